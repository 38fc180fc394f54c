#![allow(dead_code)]

use std::collections::BTreeSet;

use dgnet::dataset::{ImageKind, ImageRecord, PairRecord, Protocol};
use dgnet::evaluator::ScoreSet;
use dgnet::gradcheck::{grad_check, LossAndGrad};
use dgnet::losses::LossConfig;
use dgnet::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so relu kinks are not straddled by the
/// finite-difference step.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(r, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Runs `build` on leaves for `params` and reduces a non-scalar output with
/// fixed random weights so that every output coordinate matters.
pub fn check_op<F>(params: Vec<Tensor>, seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let f = |ps: &[Tensor]| -> Result<LossAndGrad> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).len() == 1 && g.value(out).shape().len() <= 1 {
            out
        } else {
            let shape = g.value(out).shape().to_vec();
            let w = random_tensor(&mut rng(seed ^ 0xabcd), &shape, -1.0, 1.0);
            let w = g.leaf(w);
            let m = g.mul(out, w)?;
            g.sum(m)?
        };
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        Ok((value, ids.iter().map(|&i| g.grad(i).unwrap().to_vec()).collect()))
    };
    grad_check(f, &params, EPS).unwrap()
}

/// Largest relative error for each primitive on random inputs drawn from
/// `seed`.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let y: Vec<u8> = vec![1, 0, 1, 0];
    let weighted = LossConfig {
        w_pos: r.random_range(0.5..2.0),
        w_neg: r.random_range(0.5..2.0),
        ..LossConfig::default()
    };
    let stride = 1 + (seed % 2) as usize;
    let pad = (seed % 3) as usize;
    let margin_probe = {
        // Distances straddling the hinge at margin +- 1e-3.
        let m = weighted.margin;
        Tensor::vector(vec![0.3, m - 1e-3, 0.2, m + 1e-3]).unwrap()
    };
    let w2 = weighted.clone();
    let w3 = weighted.clone();
    let w4 = weighted.clone();
    let y2 = y.clone();
    let y3 = y.clone();
    let y4 = y.clone();
    vec![
        (
            "conv2d",
            check_op(
                vec![
                    random_tensor(&mut r, &[2, 5, 6], -1.0, 1.0),
                    random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
                    random_tensor(&mut r, &[3], -1.0, 1.0),
                ],
                seed,
                |g, p| g.conv2d(p[0], p[1], p[2], stride, pad),
            ),
        ),
        (
            "relu",
            check_op(vec![away_from_zero(&mut r, &[3, 4])], seed, |g, p| g.relu(p[0])),
        ),
        (
            "maxpool2",
            check_op(vec![random_tensor(&mut r, &[2, 4, 6], -1.0, 1.0)], seed, |g, p| {
                g.maxpool2(p[0])
            }),
        ),
        (
            "linear",
            check_op(
                vec![
                    random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0),
                    random_tensor(&mut r, &[4, 12], -1.0, 1.0),
                    random_tensor(&mut r, &[4], -1.0, 1.0),
                ],
                seed,
                |g, p| g.linear(p[0], p[1], p[2]),
            ),
        ),
        (
            "sigmoid",
            check_op(vec![random_tensor(&mut r, &[5], -4.0, 4.0)], seed, |g, p| {
                g.sigmoid(p[0])
            }),
        ),
        (
            "abs_diff",
            check_op(
                vec![away_from_zero(&mut r, &[6]), random_tensor(&mut r, &[6], -0.01, 0.01)],
                seed,
                |g, p| g.abs_diff(p[0], p[1]),
            ),
        ),
        (
            "mul",
            check_op(
                vec![
                    random_tensor(&mut r, &[6], -1.0, 1.0),
                    random_tensor(&mut r, &[6], -1.0, 1.0),
                ],
                seed,
                |g, p| g.mul(p[0], p[1]),
            ),
        ),
        (
            "add",
            check_op(
                vec![
                    random_tensor(&mut r, &[3], -1.0, 1.0),
                    random_tensor(&mut r, &[3], -1.0, 1.0),
                    random_tensor(&mut r, &[3], -1.0, 1.0),
                ],
                seed,
                |g, p| g.add(p),
            ),
        ),
        (
            "sum",
            check_op(vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0)], seed, |g, p| {
                g.sum(p[0])
            }),
        ),
        (
            "cosine_distance",
            check_op(
                vec![
                    random_tensor(&mut r, &[7], 0.0, 1.0),
                    random_tensor(&mut r, &[7], 0.0, 1.0),
                ],
                seed,
                |g, p| g.cosine_distance(p[0], p[1]),
            ),
        ),
        (
            "stack",
            check_op(
                vec![
                    Tensor::scalar(r.random_range(-1.0..1.0)),
                    Tensor::scalar(r.random_range(-1.0..1.0)),
                ],
                seed,
                |g, p| g.stack(p),
            ),
        ),
        (
            "contrastive",
            check_op(vec![random_tensor(&mut r, &[4], 0.05, 0.95)], seed, move |g, p| {
                g.contrastive_loss(p[0], &y, &weighted)
            }),
        ),
        (
            "contrastive_hinge",
            check_op(vec![margin_probe], seed, move |g, p| g.contrastive_loss(p[0], &y2, &w2)),
        ),
        (
            "mse",
            check_op(vec![random_tensor(&mut r, &[4], 0.05, 0.95)], seed, move |g, p| {
                g.mse_loss(p[0], &y3, &w3)
            }),
        ),
        (
            "bce",
            check_op(vec![random_tensor(&mut r, &[4], 0.05, 0.95)], seed, move |g, p| {
                g.bce_loss(p[0], &y4, &w4)
            }),
        ),
    ]
}

// Straight-line loss formulas used as oracles.

pub fn oracle_contrastive(d: &[f64], y: &[u8], margin: f64, wp: f64, wn: f64) -> f64 {
    let b = d.len() as f64;
    let mut total = 0.0;
    for i in 0..d.len() {
        if y[i] == 1 {
            total += wp * d[i] * d[i];
        } else {
            let h = if margin - d[i] > 0.0 { margin - d[i] } else { 0.0 };
            total += wn * h * h;
        }
    }
    total / (2.0 * b)
}

pub fn oracle_mse(p: &[f64], y: &[u8], wp: f64, wn: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let t = y[i] as f64;
        let w = if y[i] == 1 { wp } else { wn };
        total += w * (t - p[i]) * (t - p[i]);
    }
    total / p.len() as f64
}

pub fn oracle_bce(p: &[f64], y: &[u8], wp: f64, wn: f64, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let q = p[i].max(eps).min(1.0 - eps);
        total += if y[i] == 1 { -wp * q.ln() } else { -wn * (1.0 - q).ln() };
    }
    total / p.len() as f64
}

pub fn oracle_class_weights(n_pos: usize, n_neg: usize) -> (f64, f64) {
    let n = (n_pos + n_neg) as f64;
    (n / (2.0 * n_pos as f64), n / (2.0 * n_neg as f64))
}

// Exhaustive metric sweeps.

fn candidates(s: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    t.push(f64::INFINITY);
    t
}

fn rate(v: &[f64], t: f64) -> f64 {
    v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64
}

pub fn brute_gar_at_far(s: &ScoreSet, target: f64) -> (f64, f64) {
    let t = candidates(s)
        .into_iter()
        .filter(|&t| rate(&s.impostor, t) <= target)
        .fold(f64::INFINITY, f64::min);
    (rate(&s.genuine, t), t)
}

pub fn brute_accuracy(s: &ScoreSet, t: f64) -> f64 {
    let tp = s.genuine.iter().filter(|&&x| x >= t).count();
    let tn = s.impostor.iter().filter(|&&x| x < t).count();
    (tp + tn) as f64 / (s.genuine.len() + s.impostor.len()) as f64
}

pub fn brute_best_accuracy(s: &ScoreSet) -> (f64, f64) {
    let mut best = (-1.0, f64::INFINITY);
    for t in candidates(s) {
        let a = brute_accuracy(s, t);
        if a > best.0 || (a == best.0 && t < best.1) {
            best = (a, t);
        }
    }
    best
}

/// Score set with both populations of size 1..=max, drawn from a coarse
/// grid so ties are common.
pub fn random_score_set(r: &mut ChaCha8Rng, max: usize) -> ScoreSet {
    let levels = [8u32, 64, 1024][r.random_range(0..3)];
    let ng = r.random_range(1..=max);
    let ni = r.random_range(1..=max);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| r.random_range(0..=levels) as f64 / levels as f64)
            .collect()
    };
    let (g, i) = (draw(ng), draw(ni));
    ScoreSet::new(g, i).unwrap()
}

// Pair enumeration oracle.

pub fn random_identity_set(r: &mut ChaCha8Rng) -> Vec<ImageRecord> {
    let kinds = [ImageKind::Genuine, ImageKind::Disguised, ImageKind::Impostor];
    let mut out = Vec::new();
    for id in 0..r.random_range(1..=10) {
        for k in 0..r.random_range(1..=6) {
            let kind = kinds[r.random_range(0..3)];
            out.push(ImageRecord::new(format!("id{id}"), format!("id{id}/img{k}.pgm"), kind));
        }
    }
    // Shuffle so the generator cannot rely on input order.
    for i in (1..out.len()).rev() {
        out.swap(i, r.random_range(0..=i));
    }
    out
}

pub type PairKey = (String, BTreeSet<String>, u8);

/// All unordered within-identity pairs kept by `protocol`, found by
/// checking every pair of records.
pub fn brute_pairs(records: &[ImageRecord], protocol: Protocol) -> BTreeSet<PairKey> {
    use ImageKind::*;
    let mut out = BTreeSet::new();
    for i in 0..records.len() {
        for j in 0..records.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&records[i], &records[j]);
            if a.identity != b.identity {
                continue;
            }
            let keep = match protocol {
                Protocol::Obfuscation => a.kind == Genuine && b.kind == Disguised,
                Protocol::Impersonation => a.kind == Genuine && b.kind == Impostor,
                Protocol::Overall => !(a.kind == Impostor && b.kind == Impostor),
            };
            if keep {
                let y = if a.kind == Impostor || b.kind == Impostor { 0 } else { 1 };
                let key: BTreeSet<String> = [a.path.clone(), b.path.clone()].into();
                out.insert((a.identity.clone(), key, y));
            }
        }
    }
    out
}

pub fn pair_keys(pairs: &[PairRecord]) -> BTreeSet<PairKey> {
    pairs
        .iter()
        .map(|p| (p.a.identity.clone(), [p.a.path.clone(), p.b.path.clone()].into(), p.y))
        .collect()
}

// Small synthetic training setups.

use dgnet::dataset::synthetic::{SyntheticConfig, SyntheticCorpus};
use dgnet::dataset::training_pairs;

pub fn small_corpus(identities: usize) -> (SyntheticCorpus, Vec<PairRecord>) {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig {
        identities,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let pairs = training_pairs(&corpus.records);
    (corpus, pairs)
}
