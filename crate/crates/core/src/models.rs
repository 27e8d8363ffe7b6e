//! Encoder/decoder MLPs over single-symbol observations, their parameter
//! table and the binary checkpoint format.
//!
//! The encoder embeds a symbol, applies two tanh layers and emits either a
//! diagonal Gaussian (`mean`, `log_variance` heads) or independent categorical
//! logits. The decoder maps a latent sample to a softmax over the vocabulary:
//! continuous latents feed the first layer directly, categorical latents are
//! embedded per latent position and summed.

use std::fmt;
use std::path::Path;

use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::stochastics::{CategoricalSet, DiagGaussian, RngStream, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    Continuous,
    Categorical,
}

impl fmt::Display for LatentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentKind::Continuous => "continuous",
            LatentKind::Categorical => "categorical",
        })
    }
}

/// Shape of the latent space. `n_categories` is ignored (kept at 1) for
/// continuous latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    pub kind: LatentKind,
    pub n_latents: usize,
    pub n_categories: usize,
}

impl LatentSpec {
    pub fn continuous(n_latents: usize) -> Self {
        LatentSpec {
            kind: LatentKind::Continuous,
            n_latents,
            n_categories: 1,
        }
    }

    pub fn categorical(n_latents: usize, n_categories: usize) -> Self {
        LatentSpec {
            kind: LatentKind::Categorical,
            n_latents,
            n_categories,
        }
    }

    /// Defaults of the synthetic experiments.
    pub fn default_for(kind: LatentKind) -> Self {
        match kind {
            LatentKind::Continuous => LatentSpec::continuous(40),
            LatentKind::Categorical => LatentSpec::categorical(8, 10),
        }
    }

    /// Width of the encoder head: `d` or `n·c`.
    pub fn head_width(&self) -> usize {
        match self.kind {
            LatentKind::Continuous => self.n_latents,
            LatentKind::Categorical => self.n_latents * self.n_categories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 || self.n_categories == 0 {
            return Err(Error::InvalidConfig(format!("latent sizes must be positive: {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LatentKind::Continuous => write!(f, "continuous({})", self.n_latents),
            LatentKind::Categorical => write!(f, "categorical({}x{})", self.n_latents, self.n_categories),
        }
    }
}

/// Which side of the model a parameter belongs to: θ (decoder and prior) or
/// φ (encoder / proposal).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Theta,
    Phi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSizes {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub emb_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All model tensors in a fixed order, each tagged θ or φ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: LatentSpec,
    sizes: ModelSizes,
    params: Vec<NamedParam>,
}

/// Names, shapes and groups of every tensor, in storage order.
fn layout(spec: &LatentSpec, sizes: &ModelSizes) -> Vec<(String, Vec<usize>, ParamGroup)> {
    let ModelSizes {
        vocab_size: v,
        hidden_size: h,
        emb_size: e,
    } = *sizes;
    let mut out = Vec::new();
    let mut dense = |prefix: &str, fan_in: usize, fan_out: usize, group: ParamGroup| {
        out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], group));
        out.push((format!("{prefix}.bias"), vec![fan_out], group));
    };
    use ParamGroup::{Phi, Theta};
    let head = spec.head_width();
    dense("encoder.hidden1", e, h, Phi);
    dense("encoder.hidden2", h, h, Phi);
    match spec.kind {
        LatentKind::Continuous => {
            dense("encoder.mean", h, head, Phi);
            dense("encoder.log_variance", h, head, Phi);
            dense("decoder.hidden1", head, h, Theta);
            dense("decoder.hidden2", h, h, Theta);
        }
        LatentKind::Categorical => {
            dense("encoder.logits", h, head, Phi);
            dense("decoder.hidden1", e, h, Theta);
        }
    }
    dense("decoder.output", h, v, Theta);
    let mut table = vec![("encoder.embedding".to_string(), vec![v, e], Phi)];
    if spec.kind == LatentKind::Categorical {
        table.push(("decoder.latent_embedding".to_string(), vec![head, e], Theta));
    }
    // Embeddings first within their group keeps the table readable.
    let (mut phi, mut theta): (Vec<_>, Vec<_>) = table.into_iter().partition(|t| t.2 == Phi);
    let (p2, t2): (Vec<_>, Vec<_>) = out.into_iter().partition(|t| t.2 == Phi);
    phi.extend(p2);
    theta.extend(t2);
    phi.extend(theta);
    phi
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Glorot-uniform weights and embeddings, zero biases.
pub fn init_model(
    spec: LatentSpec,
    vocab_size: usize,
    hidden_size: usize,
    emb_size: usize,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    let sizes = ModelSizes {
        vocab_size,
        hidden_size,
        emb_size,
    };
    ModelParams::build(spec, sizes, |name, shape| {
        if is_bias(name) {
            return Tensor::zeros(shape);
        }
        let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let n = shape[0] * shape[1];
        let data = (0..n).map(|_| rng.uniform_range(-s, s)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    })
}

impl ModelParams {
    fn build(spec: LatentSpec, sizes: ModelSizes, mut fill: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        spec.validate()?;
        if sizes.vocab_size == 0 || sizes.hidden_size == 0 || sizes.emb_size == 0 {
            return Err(Error::InvalidConfig(format!("model sizes must be positive: {sizes:?}")));
        }
        let params = layout(&spec, &sizes)
            .into_iter()
            .map(|(name, shape, group)| {
                let value = fill(&name, &shape);
                NamedParam { name, group, value }
            })
            .collect();
        Ok(ModelParams { spec, sizes, params })
    }

    /// Every tensor zero: `q(z|x)` equals the prior and `p(x|z)` is uniform.
    pub fn zeroed(spec: LatentSpec, vocab_size: usize, hidden_size: usize, emb_size: usize) -> Result<Self> {
        let sizes = ModelSizes {
            vocab_size,
            hidden_size,
            emb_size,
        };
        ModelParams::build(spec, sizes, |_, shape| Tensor::zeros(shape))
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn sizes(&self) -> ModelSizes {
        self.sizes
    }

    pub fn vocab_size(&self) -> usize {
        self.sizes.vocab_size
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        let nodes = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        BoundModel { model: self, nodes }
    }

    /// Records every tensor as a constant (evaluation only).
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundModel<'_> {
        let nodes = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        BoundModel { model: self, nodes }
    }
}

/// Proposal distribution for a batch of observations.
#[derive(Clone, Copy, Debug)]
pub enum Proposal {
    Gaussian(DiagGaussian),
    Categorical(CategoricalSet),
}

/// Latent samples handed to the decoder: `[rows, d]` node, or `rows·n`
/// category indices laid out row-major.
#[derive(Clone, Copy, Debug)]
pub enum LatentInput<'a> {
    Continuous(NodeRef),
    Categorical(&'a [usize]),
}

/// A model whose tensors are leaves on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'m> {
    model: &'m ModelParams,
    nodes: Vec<NodeRef>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &'m ModelParams {
        self.model
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    fn node(&self, name: &str) -> NodeRef {
        let i = self
            .model
            .index_of(name)
            .unwrap_or_else(|| panic!("model has no tensor `{name}`"));
        self.nodes[i]
    }

    /// A view in which every θ tensor is cut from differentiation. Used by
    /// estimators that need `ln p(x|z)` with only the path through `z` live.
    pub fn detached_theta(&self, tape: &mut Tape) -> BoundModel<'m> {
        let nodes = self
            .model
            .params
            .iter()
            .zip(&self.nodes)
            .map(|(p, &n)| match p.group {
                ParamGroup::Theta => tape.stop_gradient(n),
                ParamGroup::Phi => n,
            })
            .collect();
        BoundModel {
            model: self.model,
            nodes,
        }
    }

    fn dense(&self, tape: &mut Tape, prefix: &str, x: NodeRef) -> Result<NodeRef> {
        let w = self.node(&format!("{prefix}.weight"));
        let b = self.node(&format!("{prefix}.bias"));
        tape.affine(x, w, b)
    }

    fn check_symbols(&self, xs: &[usize]) -> Result<()> {
        let v = self.model.sizes.vocab_size;
        match xs.iter().find(|&&x| x >= v) {
            Some(&x) => Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: x,
                size: v,
            }),
            None => Ok(()),
        }
    }

    /// `q(z|x)` for each symbol in `xs`, one row per symbol.
    pub fn encode(&self, tape: &mut Tape, xs: &[usize]) -> Result<Proposal> {
        self.check_symbols(xs)?;
        let emb = tape.embedding_lookup(self.node("encoder.embedding"), xs.to_vec())?;
        let h = self.dense(tape, "encoder.hidden1", emb)?;
        let h = tape.tanh(h);
        let h = self.dense(tape, "encoder.hidden2", h)?;
        let h = tape.tanh(h);
        let spec = self.model.spec;
        Ok(match spec.kind {
            LatentKind::Continuous => {
                let mean = self.dense(tape, "encoder.mean", h)?;
                let lv = self.dense(tape, "encoder.log_variance", h)?;
                let lv = tape.clamp(lv, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX);
                Proposal::Gaussian(DiagGaussian::new(mean, lv))
            }
            LatentKind::Categorical => {
                let logits = self.dense(tape, "encoder.logits", h)?;
                Proposal::Categorical(CategoricalSet::new(logits, spec.n_latents, spec.n_categories))
            }
        })
    }

    /// `ln p(x|z)` per row; `xs` has one symbol per latent row.
    pub fn decode_log_likelihood(&self, tape: &mut Tape, z: LatentInput<'_>, xs: &[usize]) -> Result<NodeRef> {
        self.check_symbols(xs)?;
        let spec = self.model.spec;
        let rows = xs.len();
        let h = match (spec.kind, z) {
            (LatentKind::Continuous, LatentInput::Continuous(z)) => {
                let shape = tape.value(z).shape();
                if shape != [rows, spec.n_latents] {
                    return Err(Error::shape(
                        "decode",
                        format!("latent shape {:?}, expected [{}, {}]", shape, rows, spec.n_latents),
                    ));
                }
                let h = self.dense(tape, "decoder.hidden1", z)?;
                let h = tape.tanh(h);
                let h = self.dense(tape, "decoder.hidden2", h)?;
                tape.tanh(h)
            }
            (LatentKind::Categorical, LatentInput::Categorical(z)) => {
                let (n, c) = (spec.n_latents, spec.n_categories);
                if z.len() != rows * n {
                    return Err(Error::shape(
                        "decode",
                        format!("{} latent indices for {} rows of {} latents", z.len(), rows, n),
                    ));
                }
                let mut index = Vec::with_capacity(z.len());
                for (j, &zj) in z.iter().enumerate() {
                    if zj >= c {
                        return Err(Error::IndexOutOfRange {
                            what: "latent category",
                            index: zj,
                            size: c,
                        });
                    }
                    index.push((j % n) * c + zj);
                }
                let e = self.model.sizes.emb_size;
                let looked = tape.embedding_lookup(self.node("decoder.latent_embedding"), index)?;
                let grouped = tape.reshape(looked, vec![rows, n, e])?;
                let summed = tape.sum(grouped, Reduce::Axis(1))?;
                let h = self.dense(tape, "decoder.hidden1", summed)?;
                tape.tanh(h)
            }
            _ => {
                return Err(Error::shape(
                    "decode",
                    format!("latent input does not match {} latent spec", spec.kind),
                ))
            }
        };
        let logits = self.dense(tape, "decoder.output", h)?;
        tape.softmax_log_pick(logits, xs.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"MICMCO01";
const MAGIC_PREFIX: &[u8; 6] = b"MICMCO";

pub fn save_checkpoint(params: &ModelParams) -> Vec<u8> {
    let spec = params.spec;
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.push(match spec.kind {
        LatentKind::Continuous => 0,
        LatentKind::Categorical => 1,
    });
    out.extend_from_slice(&(spec.n_latents as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_categories as u32).to_le_bytes());
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(match p.group {
            ParamGroup::Theta => 0,
            ParamGroup::Phi => 1,
        });
    }
    for p in &params.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() || &bytes[..6] != MAGIC_PREFIX {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}",
            String::from_utf8_lossy(&bytes[6..8])
        )));
    }
    let mut r = Reader { bytes, at: 8 };
    let kind = match r.u8("latent kind")? {
        0 => LatentKind::Continuous,
        1 => LatentKind::Categorical,
        k => return Err(Error::Checkpoint(format!("unknown latent kind tag {k}"))),
    };
    let spec = LatentSpec {
        kind,
        n_latents: r.u32("latent count")?,
        n_categories: r.u32("category count")?,
    };
    let count = r.u32("tensor count")?;
    let mut table = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("rank")?;
        let shape = (0..ndim).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let group = match r.u8("group tag")? {
            0 => ParamGroup::Theta,
            1 => ParamGroup::Phi,
            t => return Err(Error::Checkpoint(format!("unknown group tag {t} for `{name}`"))),
        };
        table.push((name, shape, group));
    }
    let expected_len: usize = table.iter().map(|t| t.1.iter().product::<usize>() * 8).sum();
    let payload = &bytes[r.at..];
    if payload.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the tensor table describes {}",
            payload.len(),
            expected_len
        )));
    }

    let shape_of = |name: &str| table.iter().find(|t| t.0 == name).map(|t| t.1.clone());
    let (emb, hid) = match (shape_of("encoder.embedding"), shape_of("encoder.hidden1.weight")) {
        (Some(e), Some(h)) if e.len() == 2 && h.len() == 2 => (e, h),
        _ => return Err(Error::Checkpoint("tensor table lacks the encoder layers".into())),
    };
    let sizes = ModelSizes {
        vocab_size: emb[0],
        emb_size: emb[1],
        hidden_size: hid[1],
    };
    spec.validate()?;
    let expected = layout(&spec, &sizes);
    if expected != table {
        return Err(Error::Checkpoint(format!(
            "tensor table does not match the {spec} architecture"
        )));
    }

    let mut offset = 0;
    let params = table
        .into_iter()
        .map(|(name, shape, group)| {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            offset += n * 8;
            NamedParam {
                name,
                group,
                value: Tensor::from_parts(shape, data),
            }
        })
        .collect();
    Ok(ModelParams { spec, sizes, params })
}

/// Loads and checks the latent spec against what the caller expects.
pub fn load_checkpoint_for(bytes: &[u8], expected: &LatentSpec) -> Result<ModelParams> {
    let params = load_checkpoint(bytes)?;
    if params.spec != *expected {
        return Err(Error::SpecMismatch {
            expected: expected.to_string(),
            found: params.spec.to_string(),
        });
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, save_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
