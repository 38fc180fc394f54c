//! VGG-style Siamese embedding network.
//!
//! One parameter set drives both streams. Each stream is a stack of 3x3
//! conv+relu stages (each closed by a 2x2 max-pool), then `fc1 -> relu ->
//! fc2 -> relu`; the rectified FC2 activation is the embedding. The
//! verification head maps `|emb_a - emb_b|` through its fc layers (relu
//! between them) to a sigmoid score `p`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses;
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DGNETv1";
pub const CHECKPOINT_VERSION: u32 = 1;

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tiny,
    Vggface16,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "vggface16" => Ok(Profile::Vggface16),
            other => bail!(Config, "unknown profile '{other}' (expected tiny or vggface16)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub convs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub profile: Profile,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub stages: Vec<ConvStage>,
    /// Widths of FC1 and FC2 (the embedding).
    pub fc: [usize; 2],
    /// Head widths; the last one must be 1.
    pub head: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
    Head,
}

/// Name, shape and owning layer of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: LayerKind,
    /// Index of the layer within its kind.
    pub layer: usize,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl NetworkSpec {
    pub fn tiny() -> Self {
        NetworkSpec {
            profile: Profile::Tiny,
            input: [1, 32, 32],
            stages: vec![
                ConvStage {
                    out_channels: 8,
                    convs: 2,
                },
                ConvStage {
                    out_channels: 16,
                    convs: 2,
                },
            ],
            fc: [64, 32],
            head: vec![16, 1],
        }
    }

    /// The 16-weighted-layer VGG-Face topology: 13 convs in five stages,
    /// FC1/FC2 of width 4096 and a single-unit head.
    pub fn vggface16() -> Self {
        let stage = |out_channels, convs| ConvStage { out_channels, convs };
        NetworkSpec {
            profile: Profile::Vggface16,
            input: [3, 224, 224],
            stages: vec![stage(64, 2), stage(128, 2), stage(256, 3), stage(512, 3), stage(512, 3)],
            fc: [4096, 4096],
            head: vec![1],
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => NetworkSpec::tiny(),
            Profile::Vggface16 => NetworkSpec::vggface16(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            bail!(Config, "network needs at least one conv stage");
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.convs == 0) {
            bail!(Config, "conv stages need positive channel and conv counts");
        }
        if self.input.contains(&0) {
            bail!(Config, "input shape {:?} has a zero extent", self.input);
        }
        let div = 1usize << self.stages.len();
        if !self.input[1].is_multiple_of(div) || !self.input[2].is_multiple_of(div) {
            bail!(
                Config,
                "input {}x{} is not divisible by 2^{} for the max-pools",
                self.input[1],
                self.input[2],
                self.stages.len()
            );
        }
        if self.fc[0] == 0 || self.fc[1] < 2 {
            bail!(Config, "fc widths {:?} invalid (fc2 must be at least 2)", self.fc);
        }
        match self.head.last() {
            Some(1) if self.head.iter().all(|&w| w > 0) => {}
            _ => bail!(Config, "head widths {:?} must be positive and end in 1", self.head),
        }
        Ok(())
    }

    pub fn conv_layer_count(&self) -> usize {
        self.stages.iter().map(|s| s.convs).sum()
    }

    /// Conv layers plus every fully connected layer (FC1, FC2, head).
    pub fn weighted_layer_count(&self) -> usize {
        self.conv_layer_count() + 2 + self.head.len()
    }

    /// Number of leading conv layers frozen by default.
    pub fn default_freeze(&self) -> usize {
        match self.profile {
            Profile::Tiny => 1,
            Profile::Vggface16 => 4,
        }
    }

    pub fn flattened_width(&self) -> usize {
        let down = 1usize << self.stages.len();
        let last = self.stages.last().map_or(0, |s| s.out_channels);
        last * (self.input[1] / down) * (self.input[2] / down)
    }

    /// Parameter tensors in declaration order: conv layers, FC1, FC2,
    /// head layers; weight before bias within each layer.
    pub fn layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        let mut push = |kind, layer: usize, name: String, w_shape: Vec<usize>, fan_in: usize| {
            let out = w_shape[0];
            slots.push(ParamSlot {
                name: format!("{name}.weight"),
                shape: w_shape,
                kind,
                layer,
                fan_in,
                is_bias: false,
            });
            slots.push(ParamSlot {
                name: format!("{name}.bias"),
                shape: vec![out],
                kind,
                layer,
                fan_in,
                is_bias: true,
            });
        };
        let mut c_in = self.input[0];
        let mut conv = 0;
        for stage in &self.stages {
            for _ in 0..stage.convs {
                let c_out = stage.out_channels;
                push(
                    LayerKind::Conv,
                    conv,
                    format!("conv{}", conv + 1),
                    vec![c_out, c_in, KERNEL, KERNEL],
                    c_in * KERNEL * KERNEL,
                );
                c_in = c_out;
                conv += 1;
            }
        }
        let mut width = self.flattened_width();
        for (i, &out) in self.fc.iter().enumerate() {
            push(LayerKind::Fc, i, format!("fc{}", i + 1), vec![out, width], width);
            width = out;
        }
        for (i, &out) in self.head.iter().enumerate() {
            push(LayerKind::Head, i, format!("head{}", i + 1), vec![out, width], width);
            width = out;
        }
        slots
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// FNV-1a hash of the canonical JSON encoding.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Learnable parameters with a per-tensor freeze mask.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    spec: NetworkSpec,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    seed: u64,
}

/// Rectified FC2 activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Domain, "embedding entry {v} is negative or non-finite");
        }
        Ok(Embedding(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseOutput {
    pub emb_a: Embedding,
    pub emb_b: Embedding,
    pub p: f64,
}

impl SiameseOutput {
    pub fn cosine_distance(&self) -> f64 {
        losses::cosine_distance(&self.emb_a, &self.emb_b).expect("embeddings share a dimension")
    }
}

/// Graph node ids of every parameter, in layout order.
#[derive(Clone, Debug)]
pub struct ParamNodes(Vec<NodeId>);

impl ParamNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SiameseNodes {
    pub emb_a: NodeId,
    pub emb_b: NodeId,
    pub p: NodeId,
}

/// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[]);
    let mut tensors = Vec::new();
    for slot in spec.layout() {
        let n = slot.shape.iter().product();
        let data = if slot.is_bias {
            vec![0.0; n]
        } else {
            let limit = (6.0 / slot.fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        tensors.push(Tensor::new(slot.shape, data)?);
    }
    let frozen = vec![false; tensors.len()];
    Ok(NetworkParams {
        spec: spec.clone(),
        tensors,
        frozen,
        seed,
    })
}

/// Freezes weights and biases of the first `k` conv layers and unfreezes
/// everything else.
pub fn freeze_prefix(mut params: NetworkParams, k: usize) -> Result<NetworkParams> {
    params.frozen = freeze_mask(&params.spec, k)?;
    Ok(params)
}

/// The mask [`freeze_prefix`] would install, computed from the layout alone.
pub fn freeze_mask(spec: &NetworkSpec, k: usize) -> Result<Vec<bool>> {
    let convs = spec.conv_layer_count();
    if k > convs {
        bail!(Config, "cannot freeze {k} conv layers, network has {convs}");
    }
    Ok(spec
        .layout()
        .iter()
        .map(|s| s.kind == LayerKind::Conv && s.layer < k)
        .collect())
}

impl NetworkParams {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same spec, seed, mask, and bit-identical tensors.
    pub fn bitwise_eq(&self, other: &NetworkParams) -> bool {
        self.spec == other.spec
            && self.seed == other.seed
            && self.frozen == other.frozen
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }

    /// Replaces the parameter values, keeping spec and mask.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<NetworkParams> {
        if tensors.len() != self.tensors.len() || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            bail!(Shape, "replacement tensors do not match the network layout");
        }
        Ok(NetworkParams {
            tensors,
            ..self.clone()
        })
    }

    /// Records every parameter as a leaf of `g`.
    pub fn record(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// One stream up to the rectified FC2 embedding.
    pub fn embed(&self, g: &mut Graph, nodes: &ParamNodes, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape();
        if shape != self.spec.input {
            bail!(Shape, "network expects input {:?}, got {shape:?}", self.spec.input);
        }
        let ids = &nodes.0;
        let mut h = x;
        let mut next = 0;
        for stage in &self.spec.stages {
            for _ in 0..stage.convs {
                h = g.conv2d(h, ids[next], ids[next + 1], 1, PAD)?;
                h = g.relu(h)?;
                next += 2;
            }
            h = g.maxpool2(h)?;
        }
        for _ in 0..2 {
            h = g.linear(h, ids[next], ids[next + 1])?;
            h = g.relu(h)?;
            next += 2;
        }
        Ok(h)
    }

    /// Verification head on `|emb_a - emb_b|`, ending in a sigmoid.
    pub fn head(&self, g: &mut Graph, nodes: &ParamNodes, emb_a: NodeId, emb_b: NodeId) -> Result<NodeId> {
        let ids = &nodes.0;
        let first = 2 * (self.spec.conv_layer_count() + 2);
        let mut h = g.abs_diff(emb_a, emb_b)?;
        let layers = self.spec.head.len();
        for i in 0..layers {
            h = g.linear(h, ids[first + 2 * i], ids[first + 2 * i + 1])?;
            if i + 1 < layers {
                h = g.relu(h)?;
            }
        }
        g.sigmoid(h)
    }

    pub fn siamese(&self, g: &mut Graph, nodes: &ParamNodes, xa: NodeId, xb: NodeId) -> Result<SiameseNodes> {
        let emb_a = self.embed(g, nodes, xa)?;
        let emb_b = self.embed(g, nodes, xb)?;
        let p = self.head(g, nodes, emb_a, emb_b)?;
        Ok(SiameseNodes { emb_a, emb_b, p })
    }

    pub fn embed_forward(&self, x: &Tensor) -> Result<Embedding> {
        let mut g = Graph::new();
        let nodes = self.record(&mut g);
        let xi = g.leaf(x.clone());
        let e = self.embed(&mut g, &nodes, xi)?;
        Embedding::new(g.value(e).data().to_vec())
    }
}

pub fn siamese_forward(params: &NetworkParams, xa: &Tensor, xb: &Tensor) -> Result<SiameseOutput> {
    let mut g = Graph::new();
    let nodes = params.record(&mut g);
    let a = g.leaf(xa.clone());
    let b = g.leaf(xb.clone());
    let out = params.siamese(&mut g, &nodes, a, b)?;
    Ok(SiameseOutput {
        emb_a: Embedding::new(g.value(out.emb_a).data().to_vec())?,
        emb_b: Embedding::new(g.value(out.emb_b).data().to_vec())?,
        p: g.value(out.p).item()?,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    fingerprint: String,
    seed: u64,
    frozen: Vec<bool>,
}

/// Little-endian layout: magic, `u32` version, `u64` header length, JSON
/// header (spec, fingerprint, seed, freeze mask), `u32` tensor count, then
/// per tensor `u32` rank, `u32` extents and raw `f64` data.
pub fn save_params(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        spec: params.spec.clone(),
        fingerprint: format!("{:016x}", params.spec.fingerprint()),
        seed: params.seed,
        frozen: params.frozen.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&(params.tensors.len() as u32).to_le_bytes())?;
    for t in &params.tensors {
        write(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            write(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader(BufReader::new(file));

    let mut magic = [0u8; 7];
    r.fill(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        bail!(Format, "bad magic {magic:?}");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let json_len = r.u64()?;
    if json_len > 1 << 24 {
        bail!(Format, "implausible header length {json_len}");
    }
    let mut json = vec![0u8; json_len as usize];
    r.fill(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.fingerprint != format!("{:016x}", header.spec.fingerprint()) {
        bail!(Format, "header fingerprint does not match its spec");
    }
    header.spec.validate().map_err(|e| Error::Format(e.to_string()))?;

    let layout = header.spec.layout();
    let count = r.u32()? as usize;
    if count != layout.len() || header.frozen.len() != layout.len() {
        bail!(
            Format,
            "checkpoint holds {count} tensors, spec declares {}",
            layout.len()
        );
    }
    let mut tensors = Vec::with_capacity(count);
    for slot in &layout {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape {
            bail!(
                Format,
                "{} has shape {shape:?}, spec declares {:?}",
                slot.name,
                slot.shape
            );
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 8 * n];
        r.fill(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.0.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        bail!(Format, "trailing bytes after the last tensor");
    }
    Ok(NetworkParams {
        spec: header.spec,
        tensors,
        frozen: header.frozen,
        seed: header.seed,
    })
}

/// Loads a checkpoint and rejects it unless it was saved for `expected`.
pub fn load_params_for(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<NetworkParams> {
    let params = load_params(path)?;
    if params.spec.fingerprint() != expected.fingerprint() || &params.spec != expected {
        bail!(
            Format,
            "checkpoint spec fingerprint {:016x} ({:?}) does not match expected {:016x} ({:?})",
            params.spec.fingerprint(),
            params.spec.profile,
            expected.fingerprint(),
            expected.profile
        );
    }
    Ok(params)
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
            _ => Error::Format(e.to_string()),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}
