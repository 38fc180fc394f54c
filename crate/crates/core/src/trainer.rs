//! Mini-batch SGD over verification pairs.
//!
//! Each batch runs both streams of every pair through one graph, combines
//! the enabled losses, backpropagates once and applies plain SGD to every
//! unfrozen parameter tensor. Given the same seed, config and data the
//! parameter trajectory, log and checkpoints are bit-for-bit reproducible.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, preload, AugmentConfig, ImageSource, PairRecord};
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::losses::{class_weights, LossBreakdown, LossConfig};
use crate::network::{freeze_prefix, save_params, NetworkParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Leading conv layers to freeze; `None` uses the profile default.
    pub freeze_k: Option<usize>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub class_balance: bool,
    pub loader_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            freeze_k: None,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            class_balance: true,
            loader_threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_c: f64,
    pub l_r: f64,
    pub l_bce: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,l_c,l_r,l_bce,l_total,train_acc,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch, r.l_c, r.l_r, r.l_bce, r.l_total, r.train_acc, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Equality of every column except wall time, compared bitwise.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.epoch == b.epoch
                    && [a.l_c, a.l_r, a.l_bce, a.l_total, a.train_acc]
                        .iter()
                        .zip([b.l_c, b.l_r, b.l_bce, b.l_total, b.train_acc])
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Batches of one epoch as indices into the pair list, plus the class
/// weights the loss should use.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    pub class_weights: Option<(f64, f64)>,
}

/// Seeded shuffle of all pair indices, cut into batches of `batch_size`
/// (the last one may be shorter).
pub fn make_batches(
    pairs: &[PairRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    balance: bool,
) -> Result<EpochPlan> {
    if pairs.is_empty() {
        bail!(Config, "no training pairs");
    }
    if batch_size == 0 {
        bail!(Config, "batch size must be at least 1");
    }
    let weights = if balance {
        let n_pos = pairs.iter().filter(|p| p.y == 1).count();
        Some(class_weights(n_pos, pairs.len() - n_pos)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[0xba7c, epoch as u64]));
    Ok(EpochPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        class_weights: weights,
    })
}

fn first_non_finite(grads: &[Vec<f64>]) -> Option<usize> {
    grads.iter().position(|g| g.iter().any(|v| !v.is_finite()))
}

/// `θ <- θ - lr * g` for every tensor whose mask entry is false. All
/// gradients are checked for finiteness before anything is modified.
pub fn sgd_step(tensors: &mut [Tensor], grads: &[Vec<f64>], lr: f64, frozen: &[bool]) -> Result<()> {
    if grads.len() != tensors.len() || frozen.len() != tensors.len() {
        bail!(
            Shape,
            "{} tensors, {} gradients, {} mask entries",
            tensors.len(),
            grads.len(),
            frozen.len()
        );
    }
    if let Some((i, (t, g))) = tensors
        .iter()
        .zip(grads)
        .enumerate()
        .find(|(_, (t, g))| t.len() != g.len())
    {
        bail!(
            Shape,
            "gradient {i} has {} entries for a tensor of {}",
            g.len(),
            t.len()
        );
    }
    if let Some(i) = first_non_finite(grads) {
        bail!(Numeric, "non-finite gradient in parameter tensor {i}");
    }
    for ((t, g), &frozen) in tensors.iter_mut().zip(grads).zip(frozen) {
        if frozen {
            continue;
        }
        for (w, gi) in t.data_mut().iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// [`sgd_step`] on network parameters; numeric errors name the layer.
pub fn apply_sgd(params: &mut NetworkParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if let Some(i) = first_non_finite(grads) {
        let layout = params.spec().layout();
        let name = layout.get(i).map_or("?", |s| s.name.as_str());
        bail!(Numeric, "non-finite gradient in parameter tensor {i} ({name})");
    }
    let frozen = params.frozen().to_vec();
    sgd_step(params.tensors_mut(), grads, lr, &frozen)
}

/// Forward and backward over one batch of image pairs. Returns the loss
/// breakdown and one gradient per parameter tensor (layout order).
pub fn batch_loss_and_grads(
    params: &NetworkParams,
    batch: &[(Tensor, Tensor)],
    y: &[u8],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    batch_loss_grads_signature(params, batch, y, cfg).map(|(b, g, _)| (b, g))
}

/// [`batch_loss_and_grads`] plus the graph's branch signature, for
/// piecewise gradient checks.
pub fn batch_loss_grads_signature(
    params: &NetworkParams,
    batch: &[(Tensor, Tensor)],
    y: &[u8],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, u64)> {
    if batch.is_empty() {
        bail!(Config, "empty batch");
    }
    if batch.len() != y.len() {
        bail!(Shape, "{} pairs but {} labels", batch.len(), y.len());
    }
    let mut g = Graph::new();
    let nodes = params.record(&mut g);
    let mut d_nodes = Vec::with_capacity(batch.len());
    let mut p_nodes = Vec::with_capacity(batch.len());
    for (xa, xb) in batch {
        let a = g.leaf(xa.clone());
        let b = g.leaf(xb.clone());
        let out = params.siamese(&mut g, &nodes, a, b)?;
        d_nodes.push(g.cosine_distance(out.emb_a, out.emb_b)?);
        p_nodes.push(out.p);
    }
    let d = g.stack(&d_nodes)?;
    let p = g.stack(&p_nodes)?;
    if !g.value(d).is_finite() || !g.value(p).is_finite() {
        bail!(Numeric, "non-finite forward output");
    }
    let mut terms = vec![g.contrastive_loss(d, y, cfg)?];
    let mut l_r = 0.0;
    let mut l_bce = 0.0;
    if cfg.enable_lr {
        let n = g.mse_loss(p, y, cfg)?;
        l_r = g.value(n).item()?;
        terms.push(n);
    }
    if cfg.enable_bce {
        let n = g.bce_loss(p, y, cfg)?;
        l_bce = g.value(n).item()?;
        terms.push(n);
    }
    let l_c = g.value(terms[0]).item()?;
    let total = g.add(&terms)?;
    let l_total = g.value(total).item()?;
    if !l_total.is_finite() {
        bail!(Numeric, "non-finite batch loss");
    }
    g.backward(total)?;
    let grads = nodes
        .ids()
        .iter()
        .map(|&id| g.grad(id).expect("parameters precede the loss").to_vec())
        .collect();
    let breakdown = LossBreakdown {
        l_c,
        l_r,
        l_bce,
        l_total,
        d: g.value(d).data().to_vec(),
        p: g.value(p).data().to_vec(),
    };
    Ok((breakdown, grads, g.branch_signature()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains `params` on `pairs`.
///
/// With an output directory, periodic checkpoints, `final.ckpt` and
/// `train_log.csv` are written there. On error the checkpoints already on
/// disk are left in place.
pub fn train(
    params: NetworkParams,
    pairs: &[PairRecord],
    source: &dyn ImageSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        bail!(Config, "no training pairs");
    }
    let k = cfg.freeze_k.unwrap_or_else(|| params.spec().default_freeze());
    let mut params = freeze_prefix(params, k)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let images: HashMap<String, Tensor> = preload(source, pairs.iter().flat_map(|p| [&p.a, &p.b]), cfg.loader_threads)?;
    let mut paths: Vec<&String> = images.keys().collect();
    paths.sort();
    if let Some(bad) = paths.into_iter().find(|p| !images[*p].is_finite()) {
        bail!(Numeric, "non-finite pixel in {bad}");
    }
    let augment_on = !cfg.augment.is_identity();
    let view = |pair_idx: usize, side: u64, epoch: usize| -> Tensor {
        let pair = &pairs[pair_idx];
        let rec = if side == 0 { &pair.a } else { &pair.b };
        let img = &images[&rec.path];
        if augment_on {
            let mut r = rng::stream(cfg.seed, &[cfg.augment.seed, epoch as u64, pair_idx as u64, side]);
            augment(img, &cfg.augment, &mut r)
        } else {
            img.clone()
        }
    };

    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let plan = make_batches(pairs, cfg.batch_size, cfg.seed, epoch, cfg.class_balance)?;
        let loss_cfg = match plan.class_weights {
            Some(w) => cfg.loss.clone().with_weights(w),
            None => cfg.loss.clone(),
        };
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for batch in &plan.batches {
            let inputs: Vec<(Tensor, Tensor)> = batch.iter().map(|&i| (view(i, 0, epoch), view(i, 1, epoch))).collect();
            let y: Vec<u8> = batch.iter().map(|&i| pairs[i].y).collect();
            let (b, grads) = batch_loss_and_grads(&params, &inputs, &y, &loss_cfg)?;
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.l_c, b.l_r, b.l_bce, b.l_total]) {
                *s += v * n;
            }
            correct += b.p.iter().zip(&y).filter(|(&p, &y)| u8::from(p >= 0.5) == y).count();
            apply_sgd(&mut params, &grads, cfg.lr)?;
        }
        let n = pairs.len() as f64;
        log.rows.push(EpochRow {
            epoch,
            l_c: sums[0] / n,
            l_r: sums[1] / n,
            l_bce: sums[2] / n,
            l_total: sums[3] / n,
            train_acc: correct as f64 / n,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(checkpoint_name(epoch));
                save_params(&params, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        save_params(&params, &path)?;
        checkpoints.push(path);
        log.write_csv(dir.join("train_log.csv"))?;
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageKind, ImageRecord, Protocol};

    fn pairs(n_pos: usize, n_neg: usize) -> Vec<PairRecord> {
        let rec = |i: usize| ImageRecord::new("id", format!("p{i}"), ImageKind::Genuine);
        (0..n_pos + n_neg)
            .map(|i| PairRecord {
                a: rec(2 * i),
                b: rec(2 * i + 1),
                y: u8::from(i < n_pos),
                protocol: Protocol::Overall,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_partition() {
        let plan = make_batches(&pairs(5, 5), 4, 0, 1, false).unwrap();
        let sizes: Vec<_> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<_> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(plan.class_weights, None);
    }

    #[test]
    fn batches_are_seeded() {
        let p = pairs(20, 20);
        assert_eq!(
            make_batches(&p, 4, 7, 1, false).unwrap(),
            make_batches(&p, 4, 7, 1, false).unwrap()
        );
        assert_ne!(
            make_batches(&p, 4, 7, 1, false).unwrap(),
            make_batches(&p, 4, 7, 2, false).unwrap()
        );
    }

    #[test]
    fn balance_attaches_class_weights() {
        let plan = make_batches(&pairs(6, 3), 4, 0, 1, true).unwrap();
        assert_eq!(plan.class_weights, Some((0.75, 1.5)));
        assert!(matches!(
            make_batches(&pairs(6, 0), 4, 0, 1, true),
            Err(Error::Config(_))
        ));
        assert!(matches!(make_batches(&[], 4, 0, 1, false), Err(Error::Config(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut t = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        sgd_step(&mut t, &[vec![1.0], vec![1.0]], 1e-3, &[false, true]).unwrap();
        assert_eq!(t[0].data(), &[0.999]);
        assert_eq!(t[1].data(), &[1.0]);
        sgd_step(&mut t, &[vec![5.0], vec![5.0]], 0.0, &[false, false]).unwrap();
        assert_eq!(t[0].data(), &[0.999]);
    }

    #[test]
    fn sgd_rejects_non_finite_without_touching_params() {
        let mut t = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let err = sgd_step(&mut t, &[vec![1.0], vec![f64::NAN]], 0.1, &[false, false]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("tensor 1")));
        assert_eq!(t[0].data(), &[1.0]);
    }

    #[test]
    fn apply_sgd_names_the_layer() {
        let mut p = crate::network::build_network(&crate::network::NetworkSpec::tiny(), 0).unwrap();
        let mut grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        grads[3][0] = f64::INFINITY;
        let err = apply_sgd(&mut p, &grads, 0.1).unwrap_err();
        assert!(
            matches!(err, Error::Numeric(ref m) if m.contains("conv2.bias")),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_csv_header() {
        let log = TrainLog {
            rows: vec![EpochRow {
                epoch: 1,
                l_c: 0.5,
                l_r: 0.25,
                l_bce: 0.125,
                l_total: 0.875,
                train_acc: 1.0,
                seconds: 0.0,
            }],
        };
        assert_eq!(
            log.to_csv(),
            "epoch,l_c,l_r,l_bce,l_total,train_acc,seconds\n1,0.5,0.25,0.125,0.875,1,0.000\n"
        );
    }
}
