//! Identity-labelled image records, pair protocols, augmentation and
//! train/validation splitting.
//!
//! Records come from a JSON-lines manifest. Impostor images are filed under
//! the identity they imitate; web-sourced additions are always genuine and
//! keep their (possibly wrong) search labels.

mod augment;
mod image;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{augment, flip_horizontal, rotate, translate, AugmentConfig};
pub use image::{load_image, read_image, resize_bilinear, write_f64, write_pnm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Genuine,
    Disguised,
    Impostor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Dfw,
    Web,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Impersonation,
    Obfuscation,
    Overall,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Impersonation => "impersonation",
            Protocol::Obfuscation => "obfuscation",
            Protocol::Overall => "overall",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impersonation" => Ok(Protocol::Impersonation),
            "obfuscation" => Ok(Protocol::Obfuscation),
            "overall" => Ok(Protocol::Overall),
            other => bail!(Config, "unknown protocol '{other}'"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!(Config, "unknown split '{other}'"),
        }
    }
}

/// Face box in source-image pixels, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub identity: String,
    pub path: String,
    pub kind: ImageKind,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl ImageRecord {
    pub fn new(identity: impl Into<String>, path: impl Into<String>, kind: ImageKind) -> Self {
        ImageRecord {
            identity: identity.into(),
            path: path.into(),
            kind,
            source: Source::Dfw,
            split: Split::Train,
            bbox: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairRecord {
    pub a: ImageRecord,
    pub b: ImageRecord,
    pub y: u8,
    pub protocol: Protocol,
}

impl PairRecord {
    pub fn identity(&self) -> &str {
        &self.a.identity
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn parse_manifest_str(text: &str) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.source == Source::Web && rec.kind != ImageKind::Genuine {
            return Err(Error::Parse {
                line: line_no,
                message: format!("web record {} must be genuine", rec.path),
            });
        }
        if !seen.insert((rec.identity.clone(), rec.path.clone())) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate record ({}, {})", rec.identity, rec.path),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Appends web-sourced genuine images to the DFW records. Web records are
/// forced to `source = web, kind = genuine`; a web record whose
/// `(identity, path)` is already present is dropped.
pub fn merge_weak_labels(dfw: &[ImageRecord], web: &[ImageRecord]) -> Result<Vec<ImageRecord>> {
    let known: HashSet<&str> = dfw.iter().map(|r| r.identity.as_str()).collect();
    let unknown: BTreeSet<&str> = web
        .iter()
        .map(|r| r.identity.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        bail!(
            Validation,
            "web records reference identities absent from the DFW set: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        );
    }
    let mut present: HashSet<(String, String)> = dfw.iter().map(|r| (r.identity.clone(), r.path.clone())).collect();
    let mut merged = dfw.to_vec();
    for r in web {
        if present.insert((r.identity.clone(), r.path.clone())) {
            merged.push(ImageRecord {
                source: Source::Web,
                kind: ImageKind::Genuine,
                ..r.clone()
            });
        }
    }
    Ok(merged)
}

fn kind_rank(kind: ImageKind) -> u8 {
    match kind {
        ImageKind::Genuine => 0,
        ImageKind::Disguised => 1,
        ImageKind::Impostor => 2,
    }
}

fn group_by_identity(records: &[ImageRecord]) -> BTreeMap<&str, Vec<&ImageRecord>> {
    let mut groups: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.identity.as_str()).or_default().push(r);
    }
    for members in groups.values_mut() {
        members.sort_by(|a, b| (kind_rank(a.kind), &a.path).cmp(&(kind_rank(b.kind), &b.path)));
    }
    groups
}

/// Within-identity pairs for a protocol, ordered by identity and then by
/// `(kind, path)` of the members.
///
/// * impersonation: every (genuine, impostor) pair, label 0
/// * obfuscation: every (genuine, disguised) pair, label 1
/// * overall: every unordered pair except impostor-impostor; label 1 iff
///   neither member is an impostor
pub fn generate_pairs(records: &[ImageRecord], protocol: Protocol) -> Vec<PairRecord> {
    let mut pairs = Vec::new();
    for members in group_by_identity(records).values() {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                let keep = match protocol {
                    Protocol::Impersonation => a.kind == ImageKind::Genuine && b.kind == ImageKind::Impostor,
                    Protocol::Obfuscation => a.kind == ImageKind::Genuine && b.kind == ImageKind::Disguised,
                    Protocol::Overall => !(a.kind == ImageKind::Impostor && b.kind == ImageKind::Impostor),
                };
                if keep {
                    let y = u8::from(a.kind != ImageKind::Impostor && b.kind != ImageKind::Impostor);
                    pairs.push(PairRecord {
                        a: (*a).clone(),
                        b: (*b).clone(),
                        y,
                        protocol,
                    });
                }
            }
        }
    }
    pairs
}

/// Genuine-anchored training pairs: obfuscation followed by impersonation.
pub fn training_pairs(records: &[ImageRecord]) -> Vec<PairRecord> {
    let mut pairs = generate_pairs(records, Protocol::Obfuscation);
    pairs.extend(generate_pairs(records, Protocol::Impersonation));
    pairs
}

/// Keeps at most `limit` pairs, chosen with `seed`, preserving their order.
pub fn subsample_pairs(pairs: &[PairRecord], limit: usize, seed: u64) -> Vec<PairRecord> {
    if pairs.len() <= limit {
        return pairs.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut rng::stream(seed, &[0x5a]), pairs.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].clone()).collect()
}

pub fn records_in_split(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Moves `round(fraction * n_identities)` randomly chosen identities to the
/// validation side (their records get `split = val`).
pub fn split_validation(
    records: &[ImageRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        bail!(Config, "validation fraction must lie in [0, 1), got {fraction}");
    }
    let mut ids: Vec<&str> = records
        .iter()
        .map(|r| r.identity.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_val = (fraction * ids.len() as f64).round() as usize;
    if !ids.is_empty() && n_val >= ids.len() {
        bail!(Config, "fraction {fraction} leaves no identity for training");
    }
    ids.shuffle(&mut rng::stream(seed, &[0x5b]));
    let val_ids: HashSet<&str> = ids.into_iter().take(n_val).collect();
    let (val, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| val_ids.contains(r.identity.as_str()));
    let val = val
        .into_iter()
        .map(|r| ImageRecord { split: Split::Val, ..r })
        .collect();
    Ok((train, val))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const PAIRS_CSV_HEADER: &str = "identity,path_a,path_b,label,protocol";

pub fn pairs_to_csv(pairs: &[PairRecord]) -> String {
    let mut out = String::from(PAIRS_CSV_HEADER);
    out.push('\n');
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(p.identity()),
            csv_field(&p.a.path),
            csv_field(&p.b.path),
            p.y,
            p.protocol
        ));
    }
    out
}

pub fn write_pairs_csv(pairs: &[PairRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(pairs_to_csv(pairs).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Something that turns a record into a `[C,H,W]` tensor in `[0, 1]`.
pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> Result<Tensor>;
}

/// Loads image files relative to a base directory, cropping and resizing to
/// a fixed target shape.
#[derive(Clone, Debug)]
pub struct FileImageSource {
    pub base_dir: PathBuf,
    pub target: [usize; 3],
}

impl FileImageSource {
    pub fn new(base_dir: impl Into<PathBuf>, target: [usize; 3]) -> Self {
        FileImageSource {
            base_dir: base_dir.into(),
            target,
        }
    }
}

impl ImageSource for FileImageSource {
    fn load(&self, record: &ImageRecord) -> Result<Tensor> {
        load_image(record, &self.base_dir, self.target)
    }
}

/// In-memory images keyed by record path.
#[derive(Clone, Debug, Default)]
pub struct MemoryImageSource {
    pub images: HashMap<String, Tensor>,
}

impl ImageSource for MemoryImageSource {
    fn load(&self, record: &ImageRecord) -> Result<Tensor> {
        match self.images.get(&record.path) {
            Some(t) => Ok(t.clone()),
            None => bail!(Validation, "no in-memory image for path {}", record.path),
        }
    }
}

/// Loads every distinct path once, using up to `threads` workers. The
/// result does not depend on the thread count.
pub fn preload<'a, S: ImageSource + ?Sized>(
    source: &S,
    records: impl IntoIterator<Item = &'a ImageRecord>,
    threads: usize,
) -> Result<HashMap<String, Tensor>> {
    let mut unique: Vec<&ImageRecord> = Vec::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.path.as_str()) {
            unique.push(r);
        }
    }
    let threads = threads.max(1).min(unique.len().max(1));
    let chunk = unique.len().div_ceil(threads).max(1);
    let loaded: Vec<Result<Vec<(String, Tensor)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = unique
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| source.load(r).map(|t| (r.path.clone(), t)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = HashMap::new();
    for part in loaded {
        out.extend(part?);
    }
    Ok(out)
}
