//! Fixed classifier architectures, deterministic initialization and the
//! binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CWRBCKPT"
//! version    u32      1
//! arch id    u32 length + UTF-8 bytes
//! classes    u32
//! seed       u64
//! epochs     u32
//! params     u32 count, then per parameter:
//!              u32 name length + UTF-8 name
//!              u32 rank + rank x u32 extents
//!              prod(extents) x f32 values
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ComputeGraph, Node, NodeKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CWRBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths of the four-layer CNN. These are stand-ins for the usual
/// small MNIST CNN and can be overridden per spec.
pub const CNN4_CONV1: usize = 16;
pub const CNN4_CONV2: usize = 32;
pub const CNN4_HIDDEN: usize = 100;
pub const CNN4_KERNEL: usize = 5;
/// Upper bound on input elements plus parameters of a buildable model.
pub const MAX_ARCH_ELEMENTS: f64 = (1u64 << 28) as f64;

fn default_conv1() -> usize {
    CNN4_CONV1
}
fn default_conv2() -> usize {
    CNN4_CONV2
}
fn default_hidden() -> usize {
    CNN4_HIDDEN
}
fn default_image() -> usize {
    28
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureSpec {
    /// Flatten followed by one affine layer.
    Linear { input: [usize; 3], classes: usize },
    /// Flatten, affine, relu, affine.
    Mlp {
        input: [usize; 3],
        hidden: usize,
        classes: usize,
    },
    /// conv(5x5)-relu-pool, conv(5x5)-relu-pool, affine-relu, affine.
    Cnn4 {
        channels: usize,
        classes: usize,
        #[serde(default = "default_image")]
        image_size: usize,
        #[serde(default = "default_conv1")]
        conv1: usize,
        #[serde(default = "default_conv2")]
        conv2: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

impl ArchitectureSpec {
    pub fn cnn4(channels: usize, classes: usize) -> Self {
        ArchitectureSpec::Cnn4 {
            channels,
            classes,
            image_size: 28,
            conv1: CNN4_CONV1,
            conv2: CNN4_CONV2,
            hidden: CNN4_HIDDEN,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ArchitectureSpec::Linear { classes, .. }
            | ArchitectureSpec::Mlp { classes, .. }
            | ArchitectureSpec::Cnn4 { classes, .. } => classes,
        }
    }

    /// Per-example input shape `(channels, height, width)`.
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            ArchitectureSpec::Linear { input, .. } | ArchitectureSpec::Mlp { input, .. } => input,
            ArchitectureSpec::Cnn4 {
                channels,
                image_size,
                ..
            } => [channels, image_size, image_size],
        }
    }

    /// Stable identifier stored in checkpoints.
    pub fn id(&self) -> String {
        self.to_string()
    }

    pub fn nodes(&self) -> Vec<Node> {
        let affine = |name: &str, i, o| {
            Node::new(
                name,
                NodeKind::Affine {
                    in_features: i,
                    out_features: o,
                },
            )
        };
        match *self {
            ArchitectureSpec::Linear { input, classes } => vec![
                Node::new("flatten", NodeKind::Flatten),
                affine("fc", input.iter().product(), classes),
            ],
            ArchitectureSpec::Mlp {
                input,
                hidden,
                classes,
            } => vec![
                Node::new("flatten", NodeKind::Flatten),
                affine("fc1", input.iter().product(), hidden),
                Node::new("relu1", NodeKind::Relu),
                affine("fc2", hidden, classes),
            ],
            ArchitectureSpec::Cnn4 {
                channels,
                classes,
                image_size,
                conv1,
                conv2,
                hidden,
            } => {
                let k = CNN4_KERNEL;
                let s1 = (image_size - k).div_ceil(2);
                let s2 = (s1 - k).div_ceil(2);
                vec![
                    Node::new(
                        "conv1",
                        NodeKind::Conv2d {
                            in_channels: channels,
                            out_channels: conv1,
                            kernel: k,
                        },
                    ),
                    Node::new("relu1", NodeKind::Relu),
                    Node::new("pool1", NodeKind::MaxPool2),
                    Node::new(
                        "conv2",
                        NodeKind::Conv2d {
                            in_channels: conv1,
                            out_channels: conv2,
                            kernel: k,
                        },
                    ),
                    Node::new("relu2", NodeKind::Relu),
                    Node::new("pool2", NodeKind::MaxPool2),
                    Node::new("flatten", NodeKind::Flatten),
                    affine("fc1", conv2 * s2 * s2, hidden),
                    Node::new("relu3", NodeKind::Relu),
                    affine("fc2", hidden, classes),
                ]
            }
        }
    }

    /// The same architecture for inputs with `channels` channels.
    pub fn with_channels(&self, channels: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            ArchitectureSpec::Linear { input, .. } | ArchitectureSpec::Mlp { input, .. } => {
                input[0] = channels
            }
            ArchitectureSpec::Cnn4 { channels: c, .. } => *c = channels,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let zero = match *self {
            ArchitectureSpec::Linear { input, classes } => input.contains(&0) || classes < 2,
            ArchitectureSpec::Mlp {
                input,
                hidden,
                classes,
            } => input.contains(&0) || hidden == 0 || classes < 2,
            ArchitectureSpec::Cnn4 {
                channels,
                classes,
                image_size,
                conv1,
                conv2,
                hidden,
            } => {
                channels == 0
                    || classes < 2
                    || conv1 == 0
                    || conv2 == 0
                    || hidden == 0
                    || image_size < 2 * (CNN4_KERNEL - 1) + 2 * 2 + CNN4_KERNEL - 1
            }
        };
        if zero {
            return Err(Error::invalid(format!("invalid architecture {self}")));
        }
        if self.size() > MAX_ARCH_ELEMENTS {
            return Err(Error::invalid(format!("architecture {self} is too large")));
        }
        Ok(())
    }

    /// Input elements plus parameter count.
    fn size(&self) -> f64 {
        let [c, h, w] = self.input_shape().map(|v| v as f64);
        let input = c * h * w;
        let params = match *self {
            ArchitectureSpec::Linear { classes, .. } => input * (classes as f64 + 1.0),
            ArchitectureSpec::Mlp {
                hidden, classes, ..
            } => {
                let hd = hidden as f64;
                (input + 1.0) * hd + hd * (classes as f64 + 1.0)
            }
            ArchitectureSpec::Cnn4 {
                classes,
                image_size,
                conv1,
                conv2,
                hidden,
                ..
            } => {
                let k = (CNN4_KERNEL * CNN4_KERNEL) as f64;
                let (f1, f2, hd) = (conv1 as f64, conv2 as f64, hidden as f64);
                let s = ((image_size - CNN4_KERNEL).div_ceil(2) - CNN4_KERNEL).div_ceil(2) as f64;
                f1 * (c * k + 1.0)
                    + f2 * (f1 * k + 1.0)
                    + (f2 * s * s + 1.0) * hd
                    + hd * (classes as f64 + 1.0)
            }
        };
        input + params
    }

    pub fn build_graph<T: Real>(&self) -> Result<ComputeGraph<T>> {
        self.validate()?;
        ComputeGraph::new(self.input_shape().to_vec(), self.nodes())
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape();
        match *self {
            ArchitectureSpec::Linear { classes, .. } => {
                write!(f, "linear-{c}x{h}x{w}-c{classes}")
            }
            ArchitectureSpec::Mlp {
                hidden, classes, ..
            } => write!(f, "mlp-{c}x{h}x{w}-h{hidden}-c{classes}"),
            ArchitectureSpec::Cnn4 {
                classes,
                conv1,
                conv2,
                hidden,
                ..
            } => write!(f, "cnn4-{c}x{h}x{w}-f{conv1}-f{conv2}-h{hidden}-c{classes}"),
        }
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unrecognised architecture id `{s}`"));
        let parts: Vec<&str> = s.split('-').collect();
        let num = |p: &str, prefix: &str| -> Result<usize> {
            p.strip_prefix(prefix)
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let dims = |p: &str| -> Result<[usize; 3]> {
            let v: Vec<usize> = p
                .split('x')
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            <[usize; 3]>::try_from(v).map_err(|_| bad())
        };
        let spec = match parts.as_slice() {
            ["linear", input, c] => ArchitectureSpec::Linear {
                input: dims(input)?,
                classes: num(c, "c")?,
            },
            ["mlp", input, h, c] => ArchitectureSpec::Mlp {
                input: dims(input)?,
                hidden: num(h, "h")?,
                classes: num(c, "c")?,
            },
            ["cnn4", input, f1, f2, h, c] => {
                let [ch, ih, iw] = dims(input)?;
                if ih != iw {
                    return Err(bad());
                }
                ArchitectureSpec::Cnn4 {
                    channels: ch,
                    classes: num(c, "c")?,
                    image_size: ih,
                    conv1: num(f1, "f")?,
                    conv2: num(f2, "f")?,
                    hidden: num(h, "h")?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A parameterised architecture plus the bookkeeping stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub arch: ArchitectureSpec,
    pub graph: ComputeGraph<T>,
    pub seed: u64,
    pub epochs: u32,
}

impl<T: Real> Classifier<T> {
    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn evaluate(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.evaluate(input)
    }

    /// Arg-max predictions, evaluated in chunks of `chunk` examples.
    pub fn predict(&self, input: &Tensor<T>, chunk: usize) -> Result<Vec<usize>> {
        let n = input.batch();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.graph.evaluate(&input.select_rows(&idx))?;
            for i in 0..logits.batch() {
                out.push(crate::tensor::argmax(logits.row(i)));
            }
            start = end;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch.clone(),
            graph: self.graph.cast(),
            seed: self.seed,
            epochs: self.epochs,
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            arch: self.arch.clone(),
            classes: self.classes() as u32,
            seed: self.seed,
            epochs: self.epochs,
            params: self
                .graph
                .params()
                .iter()
                .map(|p| ParamBuffer {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }
}

/// Draws every weight uniformly from `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`
/// in registry order from one ChaCha stream; biases start at zero.
pub fn init_model<T: Real>(spec: &ArchitectureSpec, seed: u64) -> Result<Classifier<T>> {
    let mut graph = spec.build_graph::<T>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in graph.params_mut() {
        if !p.name.ends_with(".weight") {
            continue;
        }
        let shape = p.value.shape();
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in p.value.data_mut() {
            *v = T::from_f64(dist.sample(&mut rng));
        }
    }
    Ok(Classifier {
        arch: spec.clone(),
        graph,
        seed,
        epochs: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchitectureSpec,
    pub classes: u32,
    pub seed: u64,
    pub epochs: u32,
    pub params: Vec<ParamBuffer>,
}

impl ModelCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let id = self.arch.id();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes. Every failure reports the byte offset where
    /// decoding stopped.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(8, format!("unsupported version {version}")));
        }
        let id_at = r.pos;
        let id = r.string("architecture id")?;
        let arch: ArchitectureSpec = id
            .parse()
            .map_err(|_| r.fail(id_at, format!("unknown architecture id `{id}`")))?;
        let classes_at = r.pos;
        let classes = r.u32("class count")?;
        if classes as usize != arch.classes() {
            return Err(r.fail(classes_at, "class count disagrees with architecture"));
        }
        let seed = r.u64("seed")?;
        let epochs = r.u32("epoch counter")?;
        let count_at = r.pos;
        let count = r.u32("parameter count")? as usize;
        let expected = arch
            .build_graph::<f32>()
            .map_err(|e| r.fail(id_at, e.to_string()))?;
        if count != expected.params().len() {
            return Err(r.fail(
                count_at,
                format!("expected {} parameters", expected.params().len()),
            ));
        }
        let mut params = Vec::with_capacity(count);
        for reference in expected.params() {
            let at = r.pos;
            let name = r.string("parameter name")?;
            if name != reference.name {
                return Err(r.fail(at, format!("expected parameter `{}`", reference.name)));
            }
            let rank_at = r.pos;
            let rank = r.u32("rank")? as usize;
            if rank != reference.value.shape().len() {
                return Err(r.fail(rank_at, "rank disagrees with architecture"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            if shape != reference.value.shape() {
                return Err(r.fail(
                    rank_at,
                    format!("shape {shape:?} disagrees with architecture"),
                ));
            }
            let n = reference.value.len();
            let raw = r.take(n * 4, "parameter values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(ParamBuffer {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        Ok(Self {
            arch,
            classes,
            seed,
            epochs,
            params,
        })
    }

    pub fn into_classifier<T: Real>(self) -> Result<Classifier<T>> {
        let mut graph = self.arch.build_graph::<T>()?;
        for p in self.params {
            let data = p.values.iter().map(|&v| T::from_f64(v as f64)).collect();
            graph.set_param(&p.name, Tensor::new(p.shape, data)?)?;
        }
        Ok(Classifier {
            arch: self.arch,
            graph,
            seed: self.seed,
            epochs: self.epochs,
        })
    }

    /// Short content hash used to tie reports to a model.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.encode());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Decode {
            what: "checkpoint",
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(self.pos, format!("truncated {field}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(field)? as usize;
        if len > 4096 {
            return Err(self.fail(at, format!("{field} length {len} too large")));
        }
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.fail(at + 4, format!("{field} is not UTF-8")))
    }
}

pub fn save_checkpoint<T: Real>(model: &Classifier<T>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &model.to_checkpoint().encode())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::decode(&bytes)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint<T: Real>(path: &Path, expected: &ArchitectureSpec) -> Result<Classifier<T>> {
    let ckpt = read_checkpoint(path)?;
    if &ckpt.arch != expected {
        return Err(Error::ArchitectureMismatch {
            expected: expected.id(),
            found: ckpt.arch.id(),
        });
    }
    ckpt.into_classifier()
}
