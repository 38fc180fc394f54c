//! Verification losses over a batch of pairs.
//!
//! `d` is the cosine *distance* `1 - cos(a, b)` between the two embeddings of
//! a pair and `p` the sigmoid output of the verification head. Labels are
//! `1` for same-identity pairs and `0` for impostor pairs. Every component is
//! scaled per pair by the class weight of its label.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_BCE_CLAMP_EPS: f64 = 1e-7;

/// Below this norm an embedding is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub enable_lr: bool,
    pub enable_bce: bool,
    pub w_pos: f64,
    pub w_neg: f64,
    pub bce_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: DEFAULT_MARGIN,
            enable_lr: true,
            enable_bce: true,
            w_pos: 1.0,
            w_neg: 1.0,
            bce_clamp_eps: DEFAULT_BCE_CLAMP_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            bail!(Config, "margin must lie in (0, 1], got {}", self.margin);
        }
        if !(self.w_pos > 0.0 && self.w_neg > 0.0) || !self.w_pos.is_finite() || !self.w_neg.is_finite() {
            bail!(
                Config,
                "class weights must be positive, got ({}, {})",
                self.w_pos,
                self.w_neg
            );
        }
        if !(self.bce_clamp_eps > 0.0 && self.bce_clamp_eps < 0.5) {
            bail!(Config, "bce_clamp_eps must lie in (0, 0.5), got {}", self.bce_clamp_eps);
        }
        Ok(())
    }

    pub fn with_weights(mut self, (w_pos, w_neg): (f64, f64)) -> Self {
        self.w_pos = w_pos;
        self.w_neg = w_neg;
        self
    }

    fn weight(&self, y: u8) -> f64 {
        if y == 1 {
            self.w_pos
        } else {
            self.w_neg
        }
    }
}

/// Per-component losses of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_r: f64,
    pub l_bce: f64,
    pub l_total: f64,
    pub d: Vec<f64>,
    pub p: Vec<f64>,
}

/// Cosine similarity, clamped to `[-1, 1]`; `0` when either vector has a
/// norm below [`ZERO_NORM`]. Nonnegative embeddings land in `[0, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Shape, "cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let bb: f64 = b.iter().map(|v| v * v).sum();
    if aa.sqrt() < ZERO_NORM || bb.sqrt() < ZERO_NORM {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(aa * bb) == aa exactly when a == b, so identical inputs give 1.
    Ok((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Gradients of the cosine similarity with respect to `a` and `b`.
/// Zero on the zero-vector convention and where the clamp is active.
pub(crate) fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot / (na * nb);
    if s.abs() > 1.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let inv = 1.0 / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y * inv - s * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x * inv - s * y / (nb * nb)).collect();
    (ga, gb)
}

fn check_batch(what: &str, values: &[f64], y: &[u8]) -> Result<()> {
    if values.is_empty() {
        bail!(Config, "{what}: empty batch");
    }
    if values.len() != y.len() {
        bail!(Shape, "{what}: {} values but {} labels", values.len(), y.len());
    }
    if let Some(bad) = y.iter().find(|&&l| l > 1) {
        bail!(Domain, "{what}: label {bad} is not 0 or 1");
    }
    Ok(())
}

fn check_distances(d: &[f64], y: &[u8]) -> Result<()> {
    check_batch("contrastive loss", d, y)?;
    if let Some(bad) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(Domain, "contrastive loss: distance {bad} outside [0, 1]");
    }
    Ok(())
}

/// `(1/2B) * sum w(y) * [y d^2 + (1-y) max(margin - d, 0)^2]`.
pub fn contrastive_loss(d: &[f64], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    check_distances(d, y)?;
    let sum: f64 = d
        .iter()
        .zip(y)
        .map(|(&d, &y)| {
            let term = if y == 1 {
                d * d
            } else {
                let h = (cfg.margin - d).max(0.0);
                h * h
            };
            cfg.weight(y) * term
        })
        .sum();
    Ok(sum / (2.0 * d.len() as f64))
}

/// Derivative of [`contrastive_loss`] with respect to each `d`; the hinge
/// contributes 0 at `d == margin`.
pub fn contrastive_loss_grad(d: &[f64], y: &[u8], cfg: &LossConfig) -> Result<Vec<f64>> {
    check_distances(d, y)?;
    let scale = 1.0 / d.len() as f64;
    Ok(d.iter()
        .zip(y)
        .map(|(&d, &y)| {
            let g = if y == 1 { d } else { -(cfg.margin - d).max(0.0) };
            cfg.weight(y) * g * scale
        })
        .collect())
}

/// Class-weighted batch mean of `(y - p)^2`.
pub fn mse_loss(p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    check_batch("mse loss", p, y)?;
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let r = f64::from(y) - p;
            cfg.weight(y) * r * r
        })
        .sum();
    Ok(sum / p.len() as f64)
}

pub fn mse_loss_grad(p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<Vec<f64>> {
    check_batch("mse loss", p, y)?;
    let scale = 2.0 / p.len() as f64;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| cfg.weight(y) * (p - f64::from(y)) * scale)
        .collect())
}

/// Class-weighted batch mean of `-[y ln p + (1-y) ln(1-p)]` with `p`
/// clamped into `[eps, 1-eps]`.
pub fn bce_loss(p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    check_batch("bce loss", p, y)?;
    let eps = cfg.bce_clamp_eps;
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = p.clamp(eps, 1.0 - eps);
            let nll = if y == 1 { -pc.ln() } else { -(1.0 - pc).ln() };
            cfg.weight(y) * nll
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Zero where the clamp is active.
pub fn bce_loss_grad(p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<Vec<f64>> {
    check_batch("bce loss", p, y)?;
    let eps = cfg.bce_clamp_eps;
    let scale = 1.0 / p.len() as f64;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if p < eps || p > 1.0 - eps {
                return 0.0;
            }
            let g = if y == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
            cfg.weight(y) * g * scale
        })
        .collect())
}

/// Inverse-frequency weights `w_c = (n_pos + n_neg) / (2 n_c)`.
pub fn class_weights(n_pos: usize, n_neg: usize) -> Result<(f64, f64)> {
    if n_pos == 0 || n_neg == 0 {
        bail!(
            Config,
            "class balancing needs both classes, got n_pos={n_pos} n_neg={n_neg}"
        );
    }
    let total = (n_pos + n_neg) as f64;
    Ok((total / (2.0 * n_pos as f64), total / (2.0 * n_neg as f64)))
}

/// Sums the enabled components. Disabled components are reported as 0.
pub fn total_loss(d: &[f64], p: &[f64], y: &[u8], cfg: &LossConfig) -> Result<LossBreakdown> {
    if p.len() != d.len() {
        bail!(Shape, "{} distances but {} predictions", d.len(), p.len());
    }
    let l_c = contrastive_loss(d, y, cfg)?;
    let l_r = if cfg.enable_lr { mse_loss(p, y, cfg)? } else { 0.0 };
    let l_bce = if cfg.enable_bce { bce_loss(p, y, cfg)? } else { 0.0 };
    Ok(LossBreakdown {
        l_c,
        l_r,
        l_bce,
        l_total: l_c + l_r + l_bce,
        d: d.to_vec(),
        p: p.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(margin: f64) -> LossConfig {
        LossConfig {
            margin,
            ..LossConfig::default()
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(close(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2
        ));
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[2.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn contrastive_examples() {
        let cfg = unit(0.5);
        assert_eq!(contrastive_loss(&[0.0], &[1], &cfg).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[0.7], &[0], &cfg).unwrap(), 0.0);
        assert!(close(contrastive_loss(&[0.3], &[1], &cfg).unwrap(), 0.045));
        assert!(close(contrastive_loss(&[0.2, 0.1], &[1, 0], &cfg).unwrap(), 0.05));
    }

    #[test]
    fn contrastive_errors() {
        let cfg = unit(0.5);
        assert!(matches!(contrastive_loss(&[], &[], &cfg), Err(crate::Error::Config(_))));
        assert!(matches!(
            contrastive_loss(&[1.2], &[1], &cfg),
            Err(crate::Error::Domain(_))
        ));
        assert!(matches!(
            contrastive_loss(&[0.2], &[2], &cfg),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn hinge_subgradient_is_zero_at_margin() {
        let g = contrastive_loss_grad(&[0.5], &[0], &unit(0.5)).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn mse_examples() {
        let cfg = unit(0.5);
        assert_eq!(mse_loss(&[1.0], &[1], &cfg).unwrap(), 0.0);
        assert!(close(mse_loss(&[0.5], &[0], &cfg).unwrap(), 0.25));
        assert!(close(mse_loss(&[0.9, 0.2], &[1, 0], &cfg).unwrap(), 0.025));
        assert!(matches!(mse_loss(&[0.5, 0.5], &[1], &cfg), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn bce_examples() {
        let cfg = unit(0.5);
        let ln2 = std::f64::consts::LN_2;
        assert!(close(bce_loss(&[0.5], &[1], &cfg).unwrap(), ln2));
        assert!(close(bce_loss(&[0.5, 0.5], &[1, 0], &cfg).unwrap(), ln2));
        let clamped = bce_loss(&[1.0, 0.0], &[1, 0], &cfg).unwrap();
        assert!(clamped <= -(1.0 - cfg.bce_clamp_eps).ln() + 1e-15);
        assert!(clamped > 0.0 && clamped < 1.1e-7);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(5, 5).unwrap(), (1.0, 1.0));
        assert_eq!(class_weights(6, 3).unwrap(), (0.75, 1.5));
        assert!(matches!(class_weights(4, 0), Err(crate::Error::Config(_))));
        assert!(matches!(class_weights(0, 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig {
            enable_lr: false,
            enable_bce: false,
            ..unit(0.5)
        };
        let b = total_loss(&[0.3, 0.2], &[0.6, 0.1], &[1, 0], &cfg).unwrap();
        assert_eq!(b.l_total, b.l_c);
        assert_eq!((b.l_r, b.l_bce), (0.0, 0.0));

        let perfect = total_loss(&[0.0, 0.9], &[1.0, 0.0], &[1, 0], &unit(0.5)).unwrap();
        assert!(perfect.l_total < 2e-7);

        // Components 0.045 (L_C), 0.25 (L_R) and ln 2 (BCE) at d=0.3, p=0.5, y=1.
        let b = total_loss(&[0.3], &[0.5], &[1], &unit(0.5)).unwrap();
        assert!(close(b.l_c, 0.045));
        assert!(close(b.l_total, 0.045 + 0.25 + std::f64::consts::LN_2));
    }

    #[test]
    fn validate_rejects_bad_config() {
        assert!(unit(0.0).validate().is_err());
        assert!(unit(1.5).validate().is_err());
        assert!(unit(1.0).validate().is_ok());
        assert!(LossConfig::default().with_weights((0.0, 1.0)).validate().is_err());
    }
}
