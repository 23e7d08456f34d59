//! Brain-response encoder: an MLP whose intermediate features are exposed so
//! later training stages can distill against them, plus checkpoint I/O and a
//! provider for synthetic image embeddings.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("encoder config: {0}")]
    BadConfig(String),
    #[error("input has {got} columns, encoder expects {want}")]
    InputDim { got: usize, want: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {found:?}, expected \"BRNC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u16 },
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("unknown activation tag {0}")]
    BadActivation(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Brain-response dimensionality (input width).
    pub input_dim: usize,
    /// Width of every hidden layer.
    pub hidden_dim: usize,
    /// Number of hidden layers; each one's post-activation output is a tap
    /// the distillation loss can reach.
    pub tap_count: usize,
    /// Embedding dimensionality (output width).
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            hidden_dim: 128,
            tap_count: 3,
            output_dim: 16,
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(EncoderError::BadConfig("dimensions must be positive".into()));
        }
        if self.tap_count == 0 {
            return Err(EncoderError::BadConfig("need at least one hidden layer".into()));
        }
        Ok(())
    }

    /// Total parameter count: weights plus biases over all layers.
    pub fn param_count(&self) -> usize {
        let (n, h, l, d) = (self.input_dim, self.hidden_dim, self.tap_count, self.output_dim);
        n * h + h + (l - 1) * (h * h + h) + h * d + d
    }
}

/// One affine layer; `weight` is `[in × out]`, `bias` is `[1 × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl EncoderParams {
    /// All parameter tensors in their canonical (layer, weight-then-bias) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * (self.hidden.len() + 1));
        for layer in &self.hidden {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * (self.hidden.len() + 1));
        for layer in &mut self.hidden {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Copy whose tensors are registered as leaves on `tape`, so gradients
    /// can be read back after `backward`.
    pub fn track(&self, tape: &mut Tape) -> EncoderParams {
        EncoderParams {
            hidden: self
                .hidden
                .iter()
                .map(|l| Linear {
                    weight: tape.leaf(&l.weight),
                    bias: tape.leaf(&l.bias),
                })
                .collect(),
            output: Linear {
                weight: tape.leaf(&self.output.weight),
                bias: tape.leaf(&self.output.bias),
            },
        }
    }
}

/// Glorot-uniform initialization from a dedicated stream of `init_seed`;
/// biases start at zero.
pub fn init_encoder(cfg: &EncoderConfig) -> Result<EncoderParams, EncoderError> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.init_seed, &[]);
    let mut layer = |fan_in: usize, fan_out: usize| -> Result<Linear, EncoderError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| r.gen_range(-bound..bound))
            .collect();
        Ok(Linear {
            weight: Tensor::from_vec(vec![fan_in, fan_out], data)?,
            bias: Tensor::zeros(vec![1, fan_out])?,
        })
    };

    let mut hidden = Vec::with_capacity(cfg.tap_count);
    hidden.push(layer(cfg.input_dim, cfg.hidden_dim)?);
    for _ in 1..cfg.tap_count {
        hidden.push(layer(cfg.hidden_dim, cfg.hidden_dim)?);
    }
    let output = layer(cfg.hidden_dim, cfg.output_dim)?;
    Ok(EncoderParams { hidden, output })
}

/// Forward outputs: the final embedding (not normalized here — losses and
/// retrieval normalize where they need to) plus every hidden layer's
/// post-activation features, in depth order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Tensor,
    pub taps: Vec<Tensor>,
}

/// Run the encoder on a `[batch × input_dim]` matrix.
///
/// With `Some(tape)` the whole computation is recorded for backward; pass
/// params through [`EncoderParams::track`] first if you need their gradients.
/// With `None` nothing is recorded.
pub fn forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    x: &Tensor,
    tape: Option<&mut Tape>,
) -> Result<ForwardTrace, EncoderError> {
    if x.shape().len() != 2 || x.cols() != cfg.input_dim {
        return Err(EncoderError::InputDim {
            got: if x.shape().len() == 2 { x.cols() } else { 0 },
            want: cfg.input_dim,
        });
    }
    let mut taps = Vec::with_capacity(params.hidden.len());
    match tape {
        Some(tape) => {
            let mut h = x.clone();
            for layer in &params.hidden {
                let lin = tape.matmul(&h, &layer.weight)?;
                let shifted = tape.add_bias(&lin, &layer.bias)?;
                h = match cfg.activation {
                    Activation::Tanh => tape.tanh(&shifted)?,
                    Activation::Relu => tape.relu(&shifted)?,
                };
                taps.push(h.clone());
            }
            let lin = tape.matmul(&h, &params.output.weight)?;
            let output = tape.add_bias(&lin, &params.output.bias)?;
            Ok(ForwardTrace { output, taps })
        }
        None => {
            let mut h = x.detached();
            for layer in &params.hidden {
                let shifted = h.matmul(&layer.weight)?.add_bias(&layer.bias)?;
                h = match cfg.activation {
                    Activation::Tanh => shifted.tanh(),
                    Activation::Relu => shifted.relu(),
                };
                taps.push(h.clone());
            }
            let output = h.matmul(&params.output.weight)?.add_bias(&params.output.bias)?;
            Ok(ForwardTrace { output, taps })
        }
    }
}

/// Frozen copy of the encoder taken at a step boundary. Distillation reads
/// features from it; nothing can write to it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    params: EncoderParams,
    cfg: EncoderConfig,
    pub step: u32,
}

impl Snapshot {
    pub fn of(params: &EncoderParams, cfg: &EncoderConfig, step: u32) -> Snapshot {
        let detach = |l: &Linear| Linear {
            weight: l.weight.detached(),
            bias: l.bias.detached(),
        };
        Snapshot {
            params: EncoderParams {
                hidden: params.hidden.iter().map(detach).collect(),
                output: detach(&params.output),
            },
            cfg: cfg.clone(),
            step,
        }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Gradient-free forward pass; never touches any tape.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace, EncoderError> {
        forward(&self.params, &self.cfg, x, None)
    }
}

/// `count` synthetic image embeddings: standard-normal rows scaled to unit
/// L2 norm, drawn from a dedicated stream of `seed`.
pub fn embedding_provider(count: usize, dim: usize, seed: u64) -> Result<Tensor, EncoderError> {
    if count == 0 || dim == 0 {
        return Err(EncoderError::BadConfig(
            "embedding_provider needs count ≥ 1 and dim ≥ 1".into(),
        ));
    }
    let mut r = rng::stream(seed, &[0x45]);
    let data: Vec<f64> = (0..count * dim).map(|_| r.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(vec![count, dim], data)?.rowwise_l2_normalize()?)
}

// ─── checkpoint format ──────────────────────────────────────────────────────
//
// "BRNC" | version u16 | input u32 | hidden u32 | taps u32 | output u32
// | activation u8 (0 = tanh, 1 = relu) | init_seed u64 | step u32
// | parameters as little-endian f64 in canonical layer order.

const MAGIC: &[u8; 4] = b"BRNC";
const VERSION: u16 = 1;

pub fn write_checkpoint(
    path: &Path,
    cfg: &EncoderConfig,
    step: u32,
    params: &EncoderParams,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.hidden_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.tap_count as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.output_dim as u32).to_le_bytes());
    buf.push(match cfg.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    });
    buf.extend_from_slice(&cfg.init_seed.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(EncoderConfig, u32, EncoderParams), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(cur.take::<2>("version")?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let input_dim = u32::from_le_bytes(cur.take::<4>("input_dim")?) as usize;
    let hidden_dim = u32::from_le_bytes(cur.take::<4>("hidden_dim")?) as usize;
    let tap_count = u32::from_le_bytes(cur.take::<4>("tap_count")?) as usize;
    let output_dim = u32::from_le_bytes(cur.take::<4>("output_dim")?) as usize;
    let activation = match cur.take::<1>("activation")?[0] {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(CheckpointError::BadActivation(other)),
    };
    let init_seed = u64::from_le_bytes(cur.take::<8>("init_seed")?);
    let step = u32::from_le_bytes(cur.take::<4>("step")?);
    let cfg = EncoderConfig {
        input_dim,
        hidden_dim,
        tap_count,
        output_dim,
        activation,
        init_seed,
    };

    if tap_count == 0 || input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
        return Err(CheckpointError::Truncated("degenerate dimensions"));
    }
    // size the whole file from the header (in u128, immune to forged huge
    // dims) before any dimension-derived allocation
    let (i, h, t, o) = (
        input_dim as u128,
        hidden_dim as u128,
        tap_count as u128,
        output_dim as u128,
    );
    let n_params = (i * h + h) + (t - 1) * (h * h + h) + (h * o + o);
    let expected = cur.pos as u128 + 8 * n_params;
    if (bytes.len() as u128) < expected {
        return Err(CheckpointError::Truncated("file shorter than header promises"));
    }
    if (bytes.len() as u128) > expected {
        return Err(CheckpointError::Truncated("trailing bytes"));
    }

    let mut read_layer = |fan_in: usize, fan_out: usize| -> Result<Linear, CheckpointError> {
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            w.push(f64::from_le_bytes(cur.take::<8>("weights")?));
        }
        let mut b = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            b.push(f64::from_le_bytes(cur.take::<8>("biases")?));
        }
        Ok(Linear {
            weight: Tensor::from_vec(vec![fan_in, fan_out], w)
                .map_err(|_| CheckpointError::Truncated("weight block"))?,
            bias: Tensor::from_vec(vec![1, fan_out], b)
                .map_err(|_| CheckpointError::Truncated("bias block"))?,
        })
    };

    let mut hidden = Vec::with_capacity(tap_count);
    hidden.push(read_layer(input_dim, hidden_dim)?);
    for _ in 1..tap_count {
        hidden.push(read_layer(hidden_dim, hidden_dim)?);
    }
    let output = read_layer(hidden_dim, output_dim)?;
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Truncated("trailing bytes"));
    }
    Ok((cfg, step, EncoderParams { hidden, output }))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        if self.pos + N > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }
}
