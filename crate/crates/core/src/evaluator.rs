//! Verification metrics and ablation grids.
//!
//! Scores follow "higher means same identity" and a pair is accepted at
//! threshold `t` iff `score >= t`. Candidate thresholds are the observed
//! scores plus `+inf` (reject everything), so every rate is an exact
//! empirical fraction with no interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{merge_weak_labels, preload, training_pairs, ImageRecord, ImageSource, PairRecord};
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::losses;
use crate::network::{build_network, Embedding, NetworkParams, NetworkSpec};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

/// The operating points reported by default: 0.1 %, 1 % and 10 % FAR.
pub const DEFAULT_FAR_TARGETS: [f64; 3] = [0.001, 0.01, 0.1];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Sigmoid output of the verification head.
    #[default]
    Head,
    /// Cosine similarity of the two embeddings.
    Cosine,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(ScoreMode::Head),
            "cosine" => Ok(ScoreMode::Cosine),
            other => bail!(Config, "unknown score mode '{other}' (expected head or cosine)"),
        }
    }
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Head => "head",
            ScoreMode::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            bail!(Domain, "scores must be finite");
        }
        Ok(ScoreSet { genuine, impostor })
    }

    /// Splits `scores` by the aligned labels (1 = genuine pair).
    pub fn from_labelled(scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            bail!(Shape, "{} scores but {} labels", scores.len(), labels.len());
        }
        let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
        for (&s, &y) in scores.iter().zip(labels) {
            if y == 1 {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
        ScoreSet::new(genuine, impostor)
    }

    pub fn len(&self) -> usize {
        self.genuine.len() + self.impostor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            bail!(
                Domain,
                "{what} needs genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            );
        }
        Ok(())
    }
}

/// Sorted copies of both populations for counting by binary search.
struct Sorted {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

impl Sorted {
    fn new(s: &ScoreSet) -> Self {
        let sort = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        Sorted {
            genuine: sort(&s.genuine),
            impostor: sort(&s.impostor),
        }
    }

    fn at_least(v: &[f64], t: f64) -> usize {
        v.len() - v.partition_point(|&x| x < t)
    }

    fn gar(&self, t: f64) -> f64 {
        Self::at_least(&self.genuine, t) as f64 / self.genuine.len() as f64
    }

    fn far(&self, t: f64) -> f64 {
        Self::at_least(&self.impostor, t) as f64 / self.impostor.len() as f64
    }

    /// Distinct observed scores ascending, then `+inf`.
    fn thresholds(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.push(f64::INFINITY);
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub gar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by decreasing threshold, i.e. nondecreasing FAR; starts at
    /// `(0, 0)` (threshold `+inf`) and ends at `(1, 1)`.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,gar\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.gar);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn roc_curve(s: &ScoreSet) -> Result<RocCurve> {
    s.require_both("roc_curve")?;
    let sorted = Sorted::new(s);
    let points = sorted
        .thresholds()
        .into_iter()
        .rev()
        .map(|t| RocPoint {
            threshold: t,
            far: sorted.far(t),
            gar: sorted.gar(t),
        })
        .collect();
    Ok(RocCurve { points })
}

/// GAR at the smallest candidate threshold whose FAR does not exceed
/// `far_target`. Returns `(gar, threshold)`.
pub fn gar_at_far(s: &ScoreSet, far_target: f64) -> Result<(f64, f64)> {
    if !(far_target > 0.0 && far_target <= 1.0) {
        bail!(Domain, "FAR target must lie in (0, 1], got {far_target}");
    }
    s.require_both("gar_at_far")?;
    let sorted = Sorted::new(s);
    let thresholds = sorted.thresholds();
    // FAR is nonincreasing in the threshold and 0 at +inf.
    let idx = thresholds.partition_point(|&t| sorted.far(t) > far_target);
    let t = thresholds[idx];
    Ok((sorted.gar(t), t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestAccuracy {
    pub accuracy: f64,
    /// Lowest threshold reaching `accuracy`; may be `+inf`.
    pub threshold: f64,
    pub accuracy_at_half: f64,
}

pub fn accuracy_at(s: &ScoreSet, threshold: f64) -> Result<f64> {
    s.require_both("accuracy")?;
    let sorted = Sorted::new(s);
    Ok(accuracy_sorted(&sorted, threshold))
}

fn accuracy_sorted(sorted: &Sorted, t: f64) -> f64 {
    let tp = Sorted::at_least(&sorted.genuine, t);
    let tn = sorted.impostor.len() - Sorted::at_least(&sorted.impostor, t);
    (tp + tn) as f64 / (sorted.genuine.len() + sorted.impostor.len()) as f64
}

pub fn best_accuracy(s: &ScoreSet) -> Result<BestAccuracy> {
    s.require_both("best_accuracy")?;
    let sorted = Sorted::new(s);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for t in sorted.thresholds() {
        let acc = accuracy_sorted(&sorted, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(BestAccuracy {
        accuracy: best.0,
        threshold: best.1,
        accuracy_at_half: accuracy_sorted(&sorted, 0.5),
    })
}

/// Summary written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: ScoreMode,
    pub n_genuine: usize,
    pub n_impostor: usize,
    /// GAR keyed by FAR target.
    pub gar_at: BTreeMap<String, f64>,
    pub best_accuracy: f64,
    /// `None` when the best threshold is `+inf`.
    pub best_threshold: Option<f64>,
    #[serde(rename = "acc_at_0.5")]
    pub acc_at_half: f64,
}

impl MetricsReport {
    pub fn compute(mode: ScoreMode, s: &ScoreSet, far_targets: &[f64]) -> Result<Self> {
        let best = best_accuracy(s)?;
        let mut gar_at = BTreeMap::new();
        for &far in far_targets {
            gar_at.insert(far.to_string(), gar_at_far(s, far)?.0);
        }
        Ok(MetricsReport {
            mode,
            n_genuine: s.genuine.len(),
            n_impostor: s.impostor.len(),
            gar_at,
            best_accuracy: best.accuracy,
            best_threshold: best.threshold.is_finite().then_some(best.threshold),
            acc_at_half: best.accuracy_at_half,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Head output for precomputed embeddings; identical to the value
/// `siamese_forward` produces for the same images.
pub fn head_score(params: &NetworkParams, emb_a: &Embedding, emb_b: &Embedding) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = params.record(&mut g);
    let a = g.leaf(Tensor::vector(emb_a.to_vec())?);
    let b = g.leaf(Tensor::vector(emb_b.to_vec())?);
    let p = params.head(&mut g, &nodes, a, b)?;
    g.value(p).item()
}

/// One score per pair, aligned with `pairs`. Each distinct image is
/// embedded once; no augmentation.
pub fn pair_scores(
    params: &NetworkParams,
    pairs: &[PairRecord],
    source: &dyn ImageSource,
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    let images = preload(source, pairs.iter().flat_map(|p| [&p.a, &p.b]), 1)?;
    let mut paths: Vec<&String> = images.keys().collect();
    paths.sort();
    let mut embeddings: HashMap<&str, Embedding> = HashMap::new();
    for path in paths {
        embeddings.insert(path, params.embed_forward(&images[path])?);
    }
    pairs
        .iter()
        .map(|p| {
            let (ea, eb) = (&embeddings[p.a.path.as_str()], &embeddings[p.b.path.as_str()]);
            match mode {
                ScoreMode::Head => head_score(params, ea, eb),
                ScoreMode::Cosine => losses::cosine_similarity(ea, eb),
            }
        })
        .collect()
}

pub fn score_pairs(
    params: &NetworkParams,
    pairs: &[PairRecord],
    source: &dyn ImageSource,
    mode: ScoreMode,
) -> Result<ScoreSet> {
    if pairs.is_empty() {
        bail!(Config, "no pairs to score");
    }
    let scores = pair_scores(params, pairs, source, mode)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.y).collect();
    ScoreSet::from_labelled(&scores, &labels)
}

/// One grid entry: overrides applied on top of the base training config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_lr: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_bce: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_web: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl AblationEntry {
    fn named(name: &str) -> Self {
        AblationEntry {
            name: Some(name.to_string()),
            ..AblationEntry::default()
        }
    }
}

/// Contrastive margin sweep over 0.1, 0.5 and 0.6.
pub fn margin_grid() -> Vec<AblationEntry> {
    [0.1, 0.5, 0.6]
        .into_iter()
        .map(|m| AblationEntry {
            margin: Some(m),
            ..AblationEntry::named(&format!("margin={m}"))
        })
        .collect()
}

/// L_C, L_C + L_R, L_C + L_R + L_BCE.
pub fn loss_grid() -> Vec<AblationEntry> {
    [
        ("L_C", false, false),
        ("L_C+L_R", true, false),
        ("L_C+L_R+L_BCE", true, true),
    ]
    .into_iter()
    .map(|(name, lr, bce)| AblationEntry {
        enable_lr: Some(lr),
        enable_bce: Some(bce),
        ..AblationEntry::named(name)
    })
    .collect()
}

/// Without and with the weakly labelled web records.
pub fn data_grid() -> Vec<AblationEntry> {
    [("without web data", false), ("with web data", true)]
        .into_iter()
        .map(|(name, web)| AblationEntry {
            use_web: Some(web),
            ..AblationEntry::named(name)
        })
        .collect()
}

pub struct AblationData<'a> {
    pub spec: NetworkSpec,
    pub train_records: Vec<ImageRecord>,
    pub web_records: Vec<ImageRecord>,
    pub eval_pairs: Vec<PairRecord>,
    pub source: &'a dyn ImageSource,
    pub mode: ScoreMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub name: String,
    /// Canonical JSON of the resolved overrides.
    pub fingerprint: String,
    pub seed: u64,
    pub margin: f64,
    pub enable_lr: bool,
    pub enable_bce: bool,
    pub use_web: bool,
    pub best_accuracy: Option<f64>,
    pub best_threshold: Option<f64>,
    pub acc_at_half: Option<f64>,
    pub gar_at_0_001: Option<f64>,
    pub gar_at_0_01: Option<f64>,
    pub gar_at_0_1: Option<f64>,
    pub error: Option<String>,
}

fn run_one(entry: &AblationEntry, data: &AblationData<'_>, cfg: &TrainConfig, use_web: bool) -> Result<MetricsReport> {
    let records = if use_web {
        merge_weak_labels(&data.train_records, &data.web_records)?
    } else {
        data.train_records.clone()
    };
    let pairs = training_pairs(&records);
    let params = build_network(&data.spec, cfg.seed)?;
    let outcome = train(params, &pairs, data.source, cfg, None)?;
    let scores = score_pairs(&outcome.params, &data.eval_pairs, data.source, data.mode)?;
    let _ = entry;
    MetricsReport::compute(data.mode, &scores, &DEFAULT_FAR_TARGETS)
}

/// Trains and evaluates one model per grid entry. Run `i` is seeded with
/// `base.seed + i`. A failing entry yields a row carrying its error and
/// the grid continues.
pub fn run_ablation(grid: &[AblationEntry], data: &AblationData<'_>, base: &TrainConfig) -> Vec<AblationRow> {
    grid.iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(i as u64);
            if let Some(m) = entry.margin {
                cfg.loss.margin = m;
            }
            if let Some(v) = entry.enable_lr {
                cfg.loss.enable_lr = v;
            }
            if let Some(v) = entry.enable_bce {
                cfg.loss.enable_bce = v;
            }
            if let Some(v) = entry.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = entry.lr {
                cfg.lr = v;
            }
            let use_web = entry.use_web.unwrap_or(!data.web_records.is_empty());
            let resolved = serde_json::json!({
                "margin": cfg.loss.margin,
                "enable_lr": cfg.loss.enable_lr,
                "enable_bce": cfg.loss.enable_bce,
                "use_web": use_web,
                "epochs": cfg.epochs,
                "lr": cfg.lr,
                "seed": cfg.seed,
            });
            let result = run_one(entry, data, &cfg, use_web);
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let gar = |key: &str| report.as_ref().and_then(|r| r.gar_at.get(key).copied());
            AblationRow {
                index: i,
                name: entry.name.clone().unwrap_or_else(|| format!("run{i}")),
                fingerprint: resolved.to_string(),
                seed: cfg.seed,
                margin: cfg.loss.margin,
                enable_lr: cfg.loss.enable_lr,
                enable_bce: cfg.loss.enable_bce,
                use_web,
                best_accuracy: report.as_ref().map(|r| r.best_accuracy),
                best_threshold: report.as_ref().and_then(|r| r.best_threshold),
                acc_at_half: report.as_ref().map(|r| r.acc_at_half),
                gar_at_0_001: gar("0.001"),
                gar_at_0_01: gar("0.01"),
                gar_at_0_1: gar("0.1"),
                error,
            }
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "index,name,margin,enable_lr,enable_bce,use_web,seed,best_accuracy,best_threshold,acc_at_0.5,gar_at_0.001,gar_at_0.01,gar_at_0.1,error";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            quote(&r.name),
            r.margin,
            r.enable_lr,
            r.enable_bce,
            r.use_web,
            r.seed,
            opt(r.best_accuracy),
            opt(r.best_threshold),
            opt(r.acc_at_half),
            opt(r.gar_at_0_001),
            opt(r.gar_at_0_01),
            opt(r.gar_at_0_1),
            quote(r.error.as_deref().unwrap_or("")),
        );
    }
    out
}

/// Writes `ablation.csv` and `ablation.json` into `dir`.
pub fn write_ablation_report(rows: &[AblationRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("ablation.csv");
    fs::write(&csv, ablation_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("ablation.json");
    let text = serde_json::to_string_pretty(rows).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}
