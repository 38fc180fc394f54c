//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Loss value together with one analytic gradient vector per parameter.
pub type LossAndGrad = (f64, Vec<Vec<f64>>);

/// [`LossAndGrad`] plus a signature of the piecewise branches taken.
pub type SignedLossAndGrad = (f64, Vec<Vec<f64>>, u64);

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor, chosen with `seed`.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// `(tensor, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    /// Coordinates whose probes crossed a kink (piecewise checks only).
    pub skipped: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks every coordinate of every parameter and returns the largest
/// relative error (0 for an empty parameter list).
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<LossAndGrad>,
{
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::default()
    };
    grad_check_with(loss_fn, params, &opts).map(|r| r.max_relative_error)
}

pub fn grad_check_with<F>(mut loss_fn: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<LossAndGrad>,
{
    run(|p| loss_fn(p).map(|(l, g)| (l, g, None)), params, opts)
}

/// Like [`grad_check_with`] for piecewise-smooth losses. When a probe lands
/// on a different branch than the unperturbed point the step shrinks by 10x,
/// up to twice; if both probes still cross a kink the coordinate is skipped
/// and counted in `skipped`.
pub fn grad_check_piecewise<F>(mut loss_fn: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<SignedLossAndGrad>,
{
    run(|p| loss_fn(p).map(|(l, g, s)| (l, g, Some(s))), params, opts)
}

fn run<F>(mut loss_fn: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>, Option<u64>)>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        bail!(Config, "grad_check eps must lie in [1e-7, 1e-3], got {}", opts.eps);
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: None,
        skipped: 0,
    };
    if params.is_empty() {
        return Ok(report);
    }

    let (_, analytic, base_sig) = loss_fn(params)?;
    if analytic.len() != params.len() {
        bail!(
            Shape,
            "loss_fn returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();

    for (ti, grad) in analytic.iter().enumerate() {
        let n = params[ti].len();
        if grad.len() != n {
            bail!(Shape, "gradient {ti} has {} entries, parameter has {n}", grad.len());
        }
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        'coords: for ci in coords {
            let orig = params[ti].data()[ci];
            // Piecewise checks retry with a smaller step before giving up on a kink.
            let steps = if base_sig.is_some() { 3 } else { 1 };
            let mut eps = opts.eps;
            let (plus, minus) = loop {
                work[ti].data_mut()[ci] = orig + eps;
                let (plus, _, sig_plus) = loss_fn(&work)?;
                work[ti].data_mut()[ci] = orig - eps;
                let (minus, _, sig_minus) = loss_fn(&work)?;
                work[ti].data_mut()[ci] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    bail!(Numeric, "non-finite loss when perturbing tensor {ti} coordinate {ci}");
                }
                if sig_plus == base_sig && sig_minus == base_sig {
                    break (plus, minus);
                }
                if eps <= opts.eps / 10f64.powi(steps - 1) {
                    report.skipped += 1;
                    continue 'coords;
                }
                eps /= 10.0;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad[ci], numeric);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}
