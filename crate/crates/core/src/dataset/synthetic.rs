//! Procedural identity corpus for tests and demos.
//!
//! Each identity owns a smooth random texture. Genuine images are the
//! texture plus mild noise; disguised images add an occluding patch and a
//! small rotation; an identity's impostor images are near-duplicates of
//! another identity's texture. Optional web extras are genuine images that
//! carry the wrong identity with a configurable probability.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{augment, write_f64, write_manifest, ImageKind, ImageRecord, MemoryImageSource, Source, Split};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub size: usize,
    pub genuine: usize,
    pub disguised: usize,
    pub impostors: usize,
    pub web: usize,
    /// Probability that a web image shows a different identity.
    pub web_mislabel_prob: f64,
    pub noise: f64,
    /// Seeds the identity textures.
    pub identity_seed: u64,
    /// Seeds the per-image variation; change it to draw fresh images of the
    /// same identities.
    pub instance_seed: u64,
    pub split: Split,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            identities: 8,
            size: 32,
            genuine: 2,
            disguised: 2,
            impostors: 1,
            web: 0,
            web_mislabel_prob: 0.2,
            noise: 0.03,
            identity_seed: 0,
            instance_seed: 0,
            split: Split::Train,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticCorpus {
    pub records: Vec<ImageRecord>,
    pub web: Vec<ImageRecord>,
    pub images: MemoryImageSource,
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.identities < 2 || cfg.size < 8 {
            bail!(Config, "synthetic corpus needs at least 2 identities and 8x8 images");
        }
        if !(0.0..=1.0).contains(&cfg.web_mislabel_prob) || cfg.noise < 0.0 {
            bail!(Config, "invalid synthetic noise settings");
        }
        let textures: Vec<Tensor> = (0..cfg.identities)
            .map(|i| texture(cfg.size, &mut rng::stream(cfg.identity_seed, &[1, i as u64])))
            .collect::<Result<_>>()?;

        let mut corpus = SyntheticCorpus::default();
        let prefix = match cfg.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        for (i, base) in textures.iter().enumerate() {
            let identity = format!("id{i:02}");
            let mut rng = rng::stream(cfg.instance_seed, &[2, cfg.identity_seed, i as u64]);
            let add = |kind: ImageKind, k: usize, source: Source, img: Tensor, corpus: &mut SyntheticCorpus| {
                let tag = match (kind, source) {
                    (_, Source::Web) => "web",
                    (ImageKind::Genuine, _) => "genuine",
                    (ImageKind::Disguised, _) => "disguised",
                    (ImageKind::Impostor, _) => "impostor",
                };
                let path = format!("{prefix}/{identity}/{tag}_{k}.f64");
                let rec = ImageRecord {
                    identity: identity.clone(),
                    path: path.clone(),
                    kind,
                    source,
                    split: cfg.split,
                    bbox: None,
                };
                corpus.images.images.insert(path, img);
                match source {
                    Source::Dfw => corpus.records.push(rec),
                    Source::Web => corpus.web.push(rec),
                }
            };
            for k in 0..cfg.genuine {
                let img = noisy(base, cfg.noise, &mut rng);
                add(ImageKind::Genuine, k, Source::Dfw, img, &mut corpus);
            }
            for k in 0..cfg.disguised {
                let img = disguise(base, cfg.noise, &mut rng);
                add(ImageKind::Disguised, k, Source::Dfw, img, &mut corpus);
            }
            for k in 0..cfg.impostors {
                let other = (i + 1 + rng.random_range(0..cfg.identities - 1)) % cfg.identities;
                let img = lookalike(&textures[other], cfg.noise, &mut rng);
                add(ImageKind::Impostor, k, Source::Dfw, img, &mut corpus);
            }
            for k in 0..cfg.web {
                let shown = if rng.random::<f64>() < cfg.web_mislabel_prob {
                    (i + 1 + rng.random_range(0..cfg.identities - 1)) % cfg.identities
                } else {
                    i
                };
                let img = noisy(&textures[shown], cfg.noise, &mut rng);
                add(ImageKind::Genuine, k, Source::Web, img, &mut corpus);
            }
        }
        Ok(corpus)
    }

    /// Appends another corpus (typically a different split).
    pub fn extend(&mut self, other: SyntheticCorpus) {
        self.records.extend(other.records);
        self.web.extend(other.web);
        self.images.images.extend(other.images.images);
    }

    /// Writes every image as `.f64` under `dir` plus `manifest.jsonl` and,
    /// when web records exist, `web.jsonl`. Returns the manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<std::path::PathBuf> {
        for (path, img) in &self.images.images {
            let full = dir.join(path);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
            }
            write_f64(img, &full)?;
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&self.records, &manifest)?;
        if !self.web.is_empty() {
            write_manifest(&self.web, dir.join("web.jsonl"))?;
        }
        Ok(manifest)
    }
}

/// Sum of random Gaussian blobs and a low-frequency grating, rescaled to
/// `[0.1, 0.9]`.
fn texture<R: Rng>(size: usize, rng: &mut R) -> Result<Tensor> {
    let s = size as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 10.0..s / 4.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let (fx, fy, phase) = (
        rng.random_range(0.5..2.5) * std::f64::consts::TAU / s,
        rng.random_range(0.5..2.5) * std::f64::consts::TAU / s,
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = 0.4 * (fx * xf + fy * yf + phase).sin();
            for &(bx, by, r, a) in &blobs {
                let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            data.push(v);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    for v in &mut data {
        *v = 0.1 + 0.8 * (*v - lo) / span;
    }
    Tensor::new(vec![1, size, size], data)
}

fn noisy<R: Rng>(base: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let mut out = base.clone();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("sigma checked");
        for v in out.data_mut() {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

fn disguise<R: Rng>(base: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let size = base.shape()[2];
    let mut img = base.clone();
    let (pw, ph) = (
        rng.random_range(size / 5..size / 3),
        rng.random_range(size / 6..size / 4),
    );
    let (px, py) = (rng.random_range(0..size - pw), rng.random_range(0..size - ph));
    let shade = rng.random_range(0.0..1.0);
    for y in py..py + ph {
        for x in px..px + pw {
            img.data_mut()[y * size + x] = shade;
        }
    }
    let deg: f64 = rng.random_range(-8.0..8.0);
    let img = augment::rotate(&img, deg.to_radians());
    noisy(&img, sigma, rng)
}

fn lookalike<R: Rng>(base: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let dx = rng.random_range(-1..=1);
    let dy = rng.random_range(-1..=1);
    let shifted = augment::translate(base, dx, dy);
    noisy(&shifted, sigma, rng)
}
