//! Multimodal transformer encoders at desk scale: per-modality token
//! encoders, a joint fusion encoder, and the projection heads that map
//! summaries into prototype space.
//!
//! Parameters live in a [`ParamSet`] keyed by name; each training step
//! binds them onto a fresh [`Tape`] and reads gradients back by name.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::sample::{Modality, MultiModalSample};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Epsilon inside every layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer width d_m.
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    /// Attention heads; must divide `model_dim`.
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    /// Depth of the visual token encoder (0 = projection only).
    #[serde(default = "default_modality_layers")]
    pub layers_v: usize,
    /// Depth of the text token encoder (0 = projection only).
    #[serde(default = "default_modality_layers")]
    pub layers_t: usize,
    /// Depth of the fusion encoder.
    #[serde(default = "default_fusion_layers")]
    pub layers_f: usize,
    /// Output dimension d of the projection heads (prototype space).
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    /// Positional-embedding budget per modality; longer inputs truncate.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

fn default_model_dim() -> usize {
    64
}

fn default_num_heads() -> usize {
    4
}

fn default_modality_layers() -> usize {
    1
}

fn default_fusion_layers() -> usize {
    2
}

fn default_proj_dim() -> usize {
    32
}

fn default_max_tokens() -> usize {
    16
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: default_model_dim(),
            num_heads: default_num_heads(),
            layers_v: default_modality_layers(),
            layers_t: default_modality_layers(),
            layers_f: default_fusion_layers(),
            proj_dim: default_proj_dim(),
            max_tokens: default_max_tokens(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::config("model_dim and num_heads must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("proj_dim must be positive"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// Optimizer grouping for a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Per-modality token encoders (trained at a reduced learning rate).
    Backbone,
    /// Fusion encoder, its CLS token and modality embeddings.
    Fusion,
    /// Projection heads (the only parameters with weight decay).
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub group: ParamGroup,
    pub decay: bool,
}

/// Named, ordered parameter collection.
#[derive(Clone, Debug)]
pub struct ParamSet<F: Scalar> {
    defs: Vec<ParamDef>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { defs: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        decay: bool,
        value: Tensor<F>,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract("param_set", format!("duplicate parameter {}", name)));
        }
        self.index.insert(name.clone(), self.defs.len());
        self.defs.push(ParamDef { name, group, decay });
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn value(&self, i: usize) -> &Tensor<F> {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set_value(&mut self, i: usize, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{}: {:?} replaced by {:?}",
                    self.defs[i].name,
                    self.values[i].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamDef, &Tensor<F>)> {
        self.defs.iter().zip(self.values.iter())
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Bind every parameter onto a tape as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<F>) -> BoundParams<'a, F> {
        let vars = self.values.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { set: self, vars }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape bindings for a [`ParamSet`]; resolves names to [`Var`]s.
pub struct BoundParams<'a, F: Scalar> {
    set: &'a ParamSet<F>,
    vars: Vec<Var>,
}

impl<'a, F: Scalar> BoundParams<'a, F> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.set
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::contract("bound_params", format!("unknown parameter {}", name)))
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn normal_tensor<F: Scalar>(shape: Vec<usize>, seed: u64, name: &str) -> Tensor<F> {
    let mut rng = rng::stream(seed, name, 0);
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let n: usize = shape.iter().product();
    let values: Vec<F> = (0..n).map(|_| F::cast(dist.sample(&mut rng))).collect();
    Tensor::new(shape, values).expect("shape matches value count")
}

fn zeros<F: Scalar>(shape: Vec<usize>) -> Tensor<F> {
    Tensor::zeros(shape)
}

fn ones<F: Scalar>(shape: Vec<usize>) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![F::ONE; n]).expect("shape matches value count")
}

fn add_block_params<F: Scalar>(
    set: &mut ParamSet<F>,
    prefix: &str,
    group: ParamGroup,
    d_m: usize,
    seed: u64,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        let name = format!("{}.attn.{}", prefix, w);
        set.insert(name.clone(), group, false, normal_tensor(vec![d_m, d_m], seed, &name))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        set.insert(format!("{}.attn.{}", prefix, b), group, false, zeros(vec![d_m]))?;
    }
    set.insert(format!("{}.ln1.g", prefix), group, false, ones(vec![d_m]))?;
    set.insert(format!("{}.ln1.b", prefix), group, false, zeros(vec![d_m]))?;
    let w1 = format!("{}.ff.w1", prefix);
    set.insert(w1.clone(), group, false, normal_tensor(vec![d_m, 4 * d_m], seed, &w1))?;
    set.insert(format!("{}.ff.b1", prefix), group, false, zeros(vec![4 * d_m]))?;
    let w2 = format!("{}.ff.w2", prefix);
    set.insert(w2.clone(), group, false, normal_tensor(vec![4 * d_m, d_m], seed, &w2))?;
    set.insert(format!("{}.ff.b2", prefix), group, false, zeros(vec![d_m]))?;
    set.insert(format!("{}.ln2.g", prefix), group, false, ones(vec![d_m]))?;
    set.insert(format!("{}.ln2.b", prefix), group, false, zeros(vec![d_m]))?;
    Ok(())
}

fn add_head_params<F: Scalar>(
    set: &mut ParamSet<F>,
    name: &str,
    d_m: usize,
    d: usize,
    seed: u64,
) -> Result<()> {
    let w1 = format!("{}.w1", name);
    set.insert(w1.clone(), ParamGroup::Head, true, normal_tensor(vec![d_m, d_m], seed, &w1))?;
    set.insert(format!("{}.b1", name), ParamGroup::Head, true, zeros(vec![d_m]))?;
    let w2 = format!("{}.w2", name);
    set.insert(w2.clone(), ParamGroup::Head, true, normal_tensor(vec![d_m, d], seed, &w2))?;
    set.insert(format!("{}.b2", name), ParamGroup::Head, true, zeros(vec![d]))?;
    Ok(())
}

/// Build a freshly initialized parameter set for the given input widths.
/// Weights draw from N(0, 0.02²) on a per-parameter stream of
/// `cfg.seed`, biases start at zero, layer-norm gains at one.
pub fn build_params<F: Scalar>(
    cfg: &EncoderConfig,
    dim_v: usize,
    dim_t: usize,
) -> Result<ParamSet<F>> {
    cfg.validate()?;
    if dim_v == 0 || dim_t == 0 {
        return Err(Error::config("token dimensions must be positive"));
    }
    let d_m = cfg.model_dim;
    let mut set = ParamSet::new();
    for (m, d_in, layers) in [("v", dim_v, cfg.layers_v), ("t", dim_t, cfg.layers_t)] {
        let p = format!("enc_{}", m);
        let w = format!("{}.in_proj.w", p);
        set.insert(w.clone(), ParamGroup::Backbone, false, normal_tensor(vec![d_in, d_m], cfg.seed, &w))?;
        set.insert(format!("{}.in_proj.b", p), ParamGroup::Backbone, false, zeros(vec![d_m]))?;
        let pos = format!("{}.pos", p);
        set.insert(pos.clone(), ParamGroup::Backbone, false, normal_tensor(vec![cfg.max_tokens, d_m], cfg.seed, &pos))?;
        let cls = format!("{}.cls", p);
        set.insert(cls.clone(), ParamGroup::Backbone, false, normal_tensor(vec![d_m], cfg.seed, &cls))?;
        for i in 0..layers {
            add_block_params(&mut set, &format!("{}.block{}", p, i), ParamGroup::Backbone, d_m, cfg.seed)?;
        }
    }
    let fcls = "fusion.cls";
    set.insert(fcls, ParamGroup::Fusion, false, normal_tensor(vec![d_m], cfg.seed, fcls))?;
    for m in ["v", "t"] {
        let name = format!("fusion.mod_{}", m);
        set.insert(name.clone(), ParamGroup::Fusion, false, normal_tensor(vec![d_m], cfg.seed, &name))?;
    }
    for i in 0..cfg.layers_f {
        add_block_params(&mut set, &format!("fusion.block{}", i), ParamGroup::Fusion, d_m, cfg.seed)?;
    }
    for head in ["head_v", "head_t", "head_f"] {
        add_head_params(&mut set, head, d_m, cfg.proj_dim, cfg.seed)?;
    }
    Ok(set)
}

/// Exact parameter count for a config and the two token widths; matches
/// `build_params(..).total_params()`.
pub fn param_count(cfg: &EncoderConfig, dim_v: usize, dim_t: usize) -> usize {
    let d = cfg.model_dim;
    let block = 12 * d * d + 13 * d;
    let enc = |d_in: usize, layers: usize| {
        (d_in * d + d) + cfg.max_tokens * d + d + layers * block
    };
    let fusion = 3 * d + cfg.layers_f * block;
    let head = d * d + d + d * cfg.proj_dim + cfg.proj_dim;
    enc(dim_v, cfg.layers_v) + enc(dim_t, cfg.layers_t) + fusion + 3 * head
}

fn affine<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_vec(xw, b)
}

/// One post-norm transformer block. Returns the transformed sequence and
/// the per-head attention probability matrices.
fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &BoundParams<'_, F>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let d_m = cfg.model_dim;
    let h = cfg.num_heads;
    let d_h = d_m / h;
    let wq = bp.get(&format!("{}.attn.wq", prefix))?;
    let bq = bp.get(&format!("{}.attn.bq", prefix))?;
    let wk = bp.get(&format!("{}.attn.wk", prefix))?;
    let bk = bp.get(&format!("{}.attn.bk", prefix))?;
    let wv = bp.get(&format!("{}.attn.wv", prefix))?;
    let bv = bp.get(&format!("{}.attn.bv", prefix))?;
    let q = affine(tape, x, wq, bq)?;
    let k = affine(tape, x, wk, bk)?;
    let v = affine(tape, x, wv, bv)?;

    let scale = F::ONE / F::from_count(d_h).sqrt();
    let mut head_outs = Vec::with_capacity(h);
    let mut probs = Vec::with_capacity(h);
    for head in 0..h {
        let qh = tape.slice(q, 1, head * d_h, d_h)?;
        let kh = tape.slice(k, 1, head * d_h, d_h)?;
        let vh = tape.slice(v, 1, head * d_h, d_h)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.mul_scalar(scores, scale);
        let a = tape.softmax_rows(scaled)?;
        probs.push(a);
        head_outs.push(tape.matmul(a, vh)?);
    }
    let o = tape.concat(&head_outs, 1)?;
    let wo = bp.get(&format!("{}.attn.wo", prefix))?;
    let bo = bp.get(&format!("{}.attn.bo", prefix))?;
    let o = affine(tape, o, wo, bo)?;

    let sum1 = tape.add(x, o)?;
    let g1 = bp.get(&format!("{}.ln1.g", prefix))?;
    let b1 = bp.get(&format!("{}.ln1.b", prefix))?;
    let x1 = tape.layer_norm_rows(sum1, g1, b1, F::cast(LN_EPS))?;

    let fw1 = bp.get(&format!("{}.ff.w1", prefix))?;
    let fb1 = bp.get(&format!("{}.ff.b1", prefix))?;
    let fw2 = bp.get(&format!("{}.ff.w2", prefix))?;
    let fb2 = bp.get(&format!("{}.ff.b2", prefix))?;
    let hidden = affine(tape, x1, fw1, fb1)?;
    let act = tape.gelu(hidden);
    let ff = affine(tape, act, fw2, fb2)?;

    let sum2 = tape.add(x1, ff)?;
    let g2 = bp.get(&format!("{}.ln2.g", prefix))?;
    let b2 = bp.get(&format!("{}.ln2.b", prefix))?;
    let x2 = tape.layer_norm_rows(sum2, g2, b2, F::cast(LN_EPS))?;
    Ok((x2, probs))
}

/// Output of one modality encoder.
pub struct EncodedModality {
    /// Modality summary (the CLS position), length d_m.
    pub cls: Var,
    /// Encoded tokens, `[T, d_m]`, CLS excluded.
    pub tokens: Var,
    /// Attention probability matrices, one per block and head.
    pub attn: Vec<Var>,
    /// Original token count when the input was truncated to `max_tokens`.
    pub truncated_from: Option<usize>,
}

/// Encode one modality's raw tokens `[T, d_in]`.
///
/// Tokens are projected to d_m, positional embeddings added, a learned
/// CLS token prepended, and `layers_v`/`layers_t` post-norm blocks
/// applied; the CLS position becomes the summary. With zero layers the
/// summary is the projection of the mean token. Inputs longer than
/// `max_tokens` are truncated and the original length recorded.
pub fn encode_modality<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &BoundParams<'_, F>,
    cfg: &EncoderConfig,
    tokens: Var,
    modality: Modality,
) -> Result<EncodedModality> {
    let shape = tape.value(tokens).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape(
            "encode_modality",
            format!("tokens must be a nonempty [T, d_in] matrix, got {:?}", shape),
        ));
    }
    let full_len = shape[0];
    let (tokens, truncated_from) = if full_len > cfg.max_tokens {
        (tape.slice(tokens, 0, 0, cfg.max_tokens)?, Some(full_len))
    } else {
        (tokens, None)
    };
    let t_len = full_len.min(cfg.max_tokens);

    let prefix = format!("enc_{}", modality);
    let w = bp.get(&format!("{}.in_proj.w", prefix))?;
    let b = bp.get(&format!("{}.in_proj.b", prefix))?;
    let proj = affine(tape, tokens, w, b)?;
    let pos = bp.get(&format!("{}.pos", prefix))?;
    let pos_slice = tape.slice(pos, 0, 0, t_len)?;
    let located = tape.add(proj, pos_slice)?;

    let layers = match modality {
        Modality::V => cfg.layers_v,
        Modality::T => cfg.layers_t,
    };
    if layers == 0 {
        let cls = tape.mean_rows(proj)?;
        return Ok(EncodedModality { cls, tokens: located, attn: Vec::new(), truncated_from });
    }

    let cls_param = bp.get(&format!("{}.cls", prefix))?;
    let cls_row = tape.reshape(cls_param, vec![1, cfg.model_dim])?;
    let mut seq = tape.concat(&[cls_row, located], 0)?;
    let mut attn = Vec::new();
    for i in 0..layers {
        let (next, probs) = transformer_block(tape, bp, cfg, &format!("{}.block{}", prefix, i), seq)?;
        seq = next;
        attn.extend(probs);
    }
    let cls_out = tape.slice(seq, 0, 0, 1)?;
    let cls = tape.reshape(cls_out, vec![cfg.model_dim])?;
    let tokens_out = tape.slice(seq, 0, 1, t_len)?;
    Ok(EncodedModality { cls, tokens: tokens_out, attn, truncated_from })
}

/// Project a d_m summary into prototype space through the named 2-layer
/// head (d_m → d_m → d with GELU between). The output is not normalized;
/// the cosine similarity in the loss handles scale.
pub fn project_head<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &BoundParams<'_, F>,
    head: &str,
    cls: Var,
) -> Result<Var> {
    let d_m = tape.value(cls).numel();
    let x = tape.reshape(cls, vec![1, d_m])?;
    let w1 = bp.get(&format!("{}.w1", head))?;
    let b1 = bp.get(&format!("{}.b1", head))?;
    let w2 = bp.get(&format!("{}.w2", head))?;
    let b2 = bp.get(&format!("{}.b2", head))?;
    let h1 = affine(tape, x, w1, b1)?;
    let act = tape.gelu(h1);
    let z = affine(tape, act, w2, b2)?;
    let d = tape.value(z).numel();
    tape.reshape(z, vec![d])
}

/// Fusion output: the joint representation and its attention maps.
pub struct FusionOutput {
    pub z_f: Var,
    pub attn: Vec<Var>,
}

/// Fuse the two encoded modalities into z_f.
///
/// With both present: a learned fusion CLS is prepended to the
/// modality-tagged token sequences (each token gets its modality
/// embedding added), `layers_f` joint self-attention blocks run over the
/// concatenation, and the CLS output goes through `head_f`. Joint
/// attention over the combined sequence realizes both within- and
/// cross-modality attention. With one modality absent, z_f is `head_f`
/// applied to the present modality's summary.
pub fn fuse<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &BoundParams<'_, F>,
    cfg: &EncoderConfig,
    enc_v: Option<&EncodedModality>,
    enc_t: Option<&EncodedModality>,
) -> Result<FusionOutput> {
    match (enc_v, enc_t) {
        (Some(v), Some(t)) => {
            let mod_v = bp.get("fusion.mod_v")?;
            let mod_t = bp.get("fusion.mod_t")?;
            let tv = tape.add_row_vec(v.tokens, mod_v)?;
            let tt = tape.add_row_vec(t.tokens, mod_t)?;
            let cls_param = bp.get("fusion.cls")?;
            let cls_row = tape.reshape(cls_param, vec![1, cfg.model_dim])?;
            let mut seq = tape.concat(&[cls_row, tv, tt], 0)?;
            let mut attn = Vec::new();
            for i in 0..cfg.layers_f {
                let (next, probs) =
                    transformer_block(tape, bp, cfg, &format!("fusion.block{}", i), seq)?;
                seq = next;
                attn.extend(probs);
            }
            let cls_out = tape.slice(seq, 0, 0, 1)?;
            let cls = tape.reshape(cls_out, vec![cfg.model_dim])?;
            let z_f = project_head(tape, bp, "head_f", cls)?;
            Ok(FusionOutput { z_f, attn })
        }
        (Some(v), None) => {
            let z_f = project_head(tape, bp, "head_f", v.cls)?;
            Ok(FusionOutput { z_f, attn: Vec::new() })
        }
        (None, Some(t)) => {
            let z_f = project_head(tape, bp, "head_f", t.cls)?;
            Ok(FusionOutput { z_f, attn: Vec::new() })
        }
        (None, None) => Err(Error::contract("fuse", "at least one modality must be present")),
    }
}

/// The three projected representations of one sample. Absent modalities
/// leave their slot empty; z_f always exists.
pub struct Representations {
    pub z_v: Option<Var>,
    pub z_t: Option<Var>,
    pub z_f: Var,
}

pub struct SampleForward {
    pub reps: Representations,
    /// All attention probability matrices produced along the way.
    pub attn: Vec<Var>,
    /// Human-readable notes (currently only token truncation).
    pub warnings: Vec<String>,
}

pub(crate) fn tensor_to<F: Scalar>(t: &Tensor<f64>) -> Tensor<F> {
    let values: Vec<F> = t.values().iter().map(|&v| F::cast(v)).collect();
    Tensor::new(t.shape().to_vec(), values).expect("shape preserved")
}

/// Full forward pass for one sample: encode each present modality,
/// project per-modality summaries, and fuse.
pub fn forward_sample<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &BoundParams<'_, F>,
    cfg: &EncoderConfig,
    sample: &MultiModalSample,
) -> Result<SampleForward> {
    let mut attn = Vec::new();
    let mut warnings = Vec::new();

    let encode = |tape: &mut Tape<F>, tokens: &Tensor<f64>, m: Modality| -> Result<EncodedModality> {
        let var = tape.constant(tensor_to::<F>(tokens));
        encode_modality(tape, bp, cfg, var, m)
    };

    let enc_v = match &sample.tokens_v {
        Some(tok) => Some(encode(tape, tok, Modality::V)?),
        None => None,
    };
    let enc_t = match &sample.tokens_t {
        Some(tok) => Some(encode(tape, tok, Modality::T)?),
        None => None,
    };
    for (enc, m) in [(&enc_v, Modality::V), (&enc_t, Modality::T)] {
        if let Some(e) = enc {
            if let Some(from) = e.truncated_from {
                warnings.push(format!(
                    "sample {}: modality {} truncated from {} to {} tokens",
                    sample.id, m, from, cfg.max_tokens
                ));
            }
        }
    }

    let z_v = match &enc_v {
        Some(e) => {
            attn.extend(e.attn.iter().copied());
            Some(project_head(tape, bp, "head_v", e.cls)?)
        }
        None => None,
    };
    let z_t = match &enc_t {
        Some(e) => {
            attn.extend(e.attn.iter().copied());
            Some(project_head(tape, bp, "head_t", e.cls)?)
        }
        None => None,
    };
    let fusion = fuse(tape, bp, cfg, enc_v.as_ref(), enc_t.as_ref())?;
    attn.extend(fusion.attn.iter().copied());

    Ok(SampleForward {
        reps: Representations { z_v, z_t, z_f: fusion.z_f },
        attn,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check_multi;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            model_dim: 8,
            num_heads: 2,
            layers_v: 1,
            layers_t: 1,
            layers_f: 1,
            proj_dim: 4,
            max_tokens: 6,
            seed: 3,
        }
    }

    fn random_tokens(t: usize, d: usize, stream: u64) -> Tensor<f64> {
        let mut rng = rng::stream(17, "encoder_test_tokens", stream);
        let values: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, d], values).unwrap()
    }

    #[test]
    fn param_count_matches_formula() {
        for (cfg, dv, dt) in [
            (small_cfg(), 5, 3),
            (EncoderConfig::default(), 16, 16),
            (EncoderConfig { layers_v: 0, layers_f: 4, ..small_cfg() }, 7, 9),
        ] {
            let set = build_params::<f64>(&cfg, dv, dt).unwrap();
            assert_eq!(set.total_params(), param_count(&cfg, dv, dt));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = build_params::<f64>(&small_cfg(), 5, 3).unwrap();
        let b = build_params::<f64>(&small_cfg(), 5, 3).unwrap();
        for ((da, ta), (db, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(da.name, db.name);
            assert_eq!(ta.values(), tb.values());
        }
        let other = build_params::<f64>(&EncoderConfig { seed: 4, ..small_cfg() }, 5, 3).unwrap();
        let wa = a.tensor("enc_v.in_proj.w").unwrap();
        let wb = other.tensor("enc_v.in_proj.w").unwrap();
        assert_ne!(wa.values(), wb.values());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let tokens = tape.constant(random_tokens(4, 5, 0));
        let enc = encode_modality(&mut tape, &bp, &cfg, tokens, Modality::V).unwrap();
        assert_eq!(enc.attn.len(), cfg.num_heads * cfg.layers_v);
        for a in &enc.attn {
            let t = tape.value(*a);
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            assert_eq!(rows, cols);
            for r in 0..rows {
                let sum: f64 = t.values()[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
            }
        }
    }

    #[test]
    fn depth_zero_cls_is_projection_of_mean_token() {
        let cfg = EncoderConfig { layers_v: 0, ..small_cfg() };
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let tokens = random_tokens(4, 5, 1);
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let tv = tape.constant(tokens.clone());
        let enc = encode_modality(&mut tape, &bp, &cfg, tv, Modality::V).unwrap();
        let got = tape.value(enc.cls).values().to_vec();

        let w = set.tensor("enc_v.in_proj.w").unwrap();
        let b = set.tensor("enc_v.in_proj.b").unwrap();
        let mut mean = vec![0.0f64; 5];
        for r in 0..4 {
            for c in 0..5 {
                mean[c] += tokens.values()[r * 5 + c] / 4.0;
            }
        }
        for j in 0..cfg.model_dim {
            let mut want = b.values()[j];
            for c in 0..5 {
                want += mean[c] * w.values()[c * cfg.model_dim + j];
            }
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_permutation_equivariant_without_positions() {
        let cfg = small_cfg();
        let mut set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let pos_idx = set.index_of("enc_v.pos").unwrap();
        let pos_shape = set.value(pos_idx).shape().to_vec();
        set.set_value(pos_idx, Tensor::zeros(pos_shape)).unwrap();

        let tokens = random_tokens(4, 5, 2);
        let perm = [2usize, 0, 3, 1];
        let permuted_rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| tokens.values()[i * 5..(i + 1) * 5].to_vec())
            .collect();
        let permuted = Tensor::from_rows(&permuted_rows).unwrap();

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let bp = set.bind(&mut tape);
            let tv = tape.constant(input);
            let enc = encode_modality(&mut tape, &bp, &cfg, tv, Modality::V).unwrap();
            tape.value(enc.cls).values().to_vec()
        };
        let a = run(tokens);
        let b = run(permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_is_recorded_never_silent() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let tokens = tape.constant(random_tokens(9, 5, 3));
        let enc = encode_modality(&mut tape, &bp, &cfg, tokens, Modality::V).unwrap();
        assert_eq!(enc.truncated_from, Some(9));
        assert_eq!(tape.value(enc.tokens).shape(), &[6, 8]);

        let sample = MultiModalSample::new(
            "s-0".to_string(),
            Some(random_tokens(9, 5, 4)),
            Some(random_tokens(3, 3, 5)),
            vec![1, 0],
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let fwd = forward_sample(&mut tape, &bp, &cfg, &sample).unwrap();
        assert_eq!(fwd.warnings.len(), 1);
        assert!(fwd.warnings[0].contains("truncated from 9 to 6"));
    }

    fn fill_param(set: &mut ParamSet<f64>, name: &str, phase: f64) {
        let i = set.index_of(name).unwrap_or_else(|| panic!("no param {}", name));
        let shape = set.value(i).shape().to_vec();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|j| 0.3 * ((j as f64) * 0.7 + phase).sin()).collect();
        set.set_value(i, Tensor::new(shape, values).unwrap()).unwrap();
    }

    // Plain-f64 reimplementations used as the independent oracle.
    fn o_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    fn o_affine(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = o_matmul(x, w, m, k, n);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += b[j];
            }
        }
        out
    }

    fn o_softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
        for r in 0..rows {
            let row = &mut x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }

    fn o_layer_norm(x: &[f64], g: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                out[r * cols + c] = g[c] * (row[c] - mean) * inv + b[c];
            }
        }
        out
    }

    fn o_gelu(x: &[f64]) -> Vec<f64> {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        x.iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect()
    }

    #[test]
    fn fusion_matches_hand_attention_oracle() {
        let cfg = EncoderConfig {
            model_dim: 4,
            num_heads: 1,
            layers_v: 0,
            layers_t: 0,
            layers_f: 1,
            proj_dim: 3,
            max_tokens: 4,
            seed: 0,
        };
        let mut set = build_params::<f64>(&cfg, 3, 2).unwrap();
        let names: Vec<String> = set.defs().iter().map(|d| d.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            fill_param(&mut set, name, 0.31 * (i as f64 + 1.0));
        }

        let tok_v = Tensor::from_rows(&[vec![0.2, -0.4, 0.6], vec![0.9, 0.1, -0.3]]).unwrap();
        let tok_t = Tensor::from_rows(&[vec![0.5, -0.2], vec![-0.7, 0.8]]).unwrap();

        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let vv = tape.constant(tok_v.clone());
        let vt = tape.constant(tok_t.clone());
        let enc_v = encode_modality(&mut tape, &bp, &cfg, vv, Modality::V).unwrap();
        let enc_t = encode_modality(&mut tape, &bp, &cfg, vt, Modality::T).unwrap();
        let out = fuse(&mut tape, &bp, &cfg, Some(&enc_v), Some(&enc_t)).unwrap();
        let got = tape.value(out.z_f).values().to_vec();

        // Independent recomputation with plain loops.
        let p = |n: &str| set.tensor(n).unwrap().values().to_vec();
        let d = 4usize;
        let proj_v = o_affine(tok_v.values(), &p("enc_v.in_proj.w"), &p("enc_v.in_proj.b"), 2, 3, d);
        let proj_t = o_affine(tok_t.values(), &p("enc_t.in_proj.w"), &p("enc_t.in_proj.b"), 2, 2, d);
        let pos_v = p("enc_v.pos");
        let pos_t = p("enc_t.pos");
        let mod_v = p("fusion.mod_v");
        let mod_t = p("fusion.mod_t");
        let mut seq = vec![0.0f64; 5 * d];
        seq[0..d].copy_from_slice(&p("fusion.cls"));
        for r in 0..2 {
            for c in 0..d {
                seq[(1 + r) * d + c] = proj_v[r * d + c] + pos_v[r * d + c] + mod_v[c];
                seq[(3 + r) * d + c] = proj_t[r * d + c] + pos_t[r * d + c] + mod_t[c];
            }
        }
        let q = o_affine(&seq, &p("fusion.block0.attn.wq"), &p("fusion.block0.attn.bq"), 5, d, d);
        let k = o_affine(&seq, &p("fusion.block0.attn.wk"), &p("fusion.block0.attn.bk"), 5, d, d);
        let v = o_affine(&seq, &p("fusion.block0.attn.wv"), &p("fusion.block0.attn.bv"), 5, d, d);
        let mut scores = vec![0.0f64; 25];
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[i * d + c] * k[j * d + c];
                }
                scores[i * 5 + j] = s / (d as f64).sqrt();
            }
        }
        o_softmax_rows(&mut scores, 5, 5);
        let attended = o_matmul(&scores, &v, 5, 5, d);
        let o = o_affine(&attended, &p("fusion.block0.attn.wo"), &p("fusion.block0.attn.bo"), 5, d, d);
        let sum1: Vec<f64> = seq.iter().zip(&o).map(|(a, b)| a + b).collect();
        let x1 = o_layer_norm(&sum1, &p("fusion.block0.ln1.g"), &p("fusion.block0.ln1.b"), 5, d);
        let hidden = o_affine(&x1, &p("fusion.block0.ff.w1"), &p("fusion.block0.ff.b1"), 5, d, 4 * d);
        let act = o_gelu(&hidden);
        let ff = o_affine(&act, &p("fusion.block0.ff.w2"), &p("fusion.block0.ff.b2"), 5, 4 * d, d);
        let sum2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        let x2 = o_layer_norm(&sum2, &p("fusion.block0.ln2.g"), &p("fusion.block0.ln2.b"), 5, d);
        let cls = &x2[0..d];
        let h1 = o_affine(cls, &p("head_f.w1"), &p("head_f.b1"), 1, d, d);
        let a1 = o_gelu(&h1);
        let want = o_affine(&a1, &p("head_f.w2"), &p("head_f.b2"), 1, d, 3);

        assert_eq!(got.len(), 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "got {:?} want {:?}", got, want);
        }
    }

    #[test]
    fn swapping_modalities_and_embeddings_preserves_z_f() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 8, 8).unwrap();
        let tok_a = random_tokens(3, 8, 6);
        let tok_b = random_tokens(2, 8, 7);

        let run = |set: &ParamSet<f64>, first: &Tensor<f64>, second: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let bp = set.bind(&mut tape);
            let dummy_cls = tape.constant(Tensor::vector(vec![0.0; cfg.model_dim]));
            let ta = tape.constant(first.clone());
            let tb = tape.constant(second.clone());
            let enc_v = EncodedModality {
                cls: dummy_cls,
                tokens: ta,
                attn: Vec::new(),
                truncated_from: None,
            };
            let enc_t = EncodedModality {
                cls: dummy_cls,
                tokens: tb,
                attn: Vec::new(),
                truncated_from: None,
            };
            let out = fuse(&mut tape, &bp, &cfg, Some(&enc_v), Some(&enc_t)).unwrap();
            tape.value(out.z_f).values().to_vec()
        };

        let base = run(&set, &tok_a, &tok_b);

        let mut swapped = set.clone();
        let iv = swapped.index_of("fusion.mod_v").unwrap();
        let it = swapped.index_of("fusion.mod_t").unwrap();
        let old_v = swapped.value(iv).clone();
        let old_t = swapped.value(it).clone();
        swapped.set_value(iv, old_t).unwrap();
        swapped.set_value(it, old_v).unwrap();
        let flipped = run(&swapped, &tok_b, &tok_a);

        for (a, b) in base.iter().zip(&flipped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_zero_and_real_init_is_not() {
        let cfg = small_cfg();
        let mut set = build_params::<f64>(&cfg, 5, 3).unwrap();
        for name in ["head_f.w1", "head_f.b1", "head_f.w2", "head_f.b2"] {
            let i = set.index_of(name).unwrap();
            let shape = set.value(i).shape().to_vec();
            set.set_value(i, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let cls = tape.constant(Tensor::vector(vec![0.4; cfg.model_dim]));
        let z = project_head(&mut tape, &bp, "head_f", cls).unwrap();
        assert!(tape.value(z).values().iter().all(|&v| v == 0.0));

        let fresh = build_params::<f64>(&cfg, 5, 3).unwrap();
        let sample = MultiModalSample::new(
            "s-1".to_string(),
            Some(random_tokens(3, 5, 8)),
            Some(random_tokens(4, 3, 9)),
            vec![1, 0],
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let bp = fresh.bind(&mut tape);
        let fwd = forward_sample(&mut tape, &bp, &cfg, &sample).unwrap();
        for z in [fwd.reps.z_v.unwrap(), fwd.reps.z_t.unwrap(), fwd.reps.z_f] {
            assert!(tape.value(z).frobenius_norm() > 0.0);
        }
    }

    #[test]
    fn identity_head_passes_large_positive_inputs_through() {
        let cfg = EncoderConfig { model_dim: 4, num_heads: 1, proj_dim: 4, ..small_cfg() };
        let mut set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let eye = Tensor::new(
            vec![4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0,
                0.0, 1.0, 0.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        for name in ["head_f.w1", "head_f.w2"] {
            let i = set.index_of(name).unwrap();
            set.set_value(i, eye.clone()).unwrap();
        }
        let input = vec![6.0, 7.5, 9.0, 10.0];
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let cls = tape.constant(Tensor::vector(input.clone()));
        let z = project_head(&mut tape, &bp, "head_f", cls).unwrap();
        for (g, w) in tape.value(z).values().iter().zip(&input) {
            assert!((g - w).abs() < 1e-9, "got {} want {}", g, w);
        }
    }

    #[test]
    fn fallback_when_one_modality_is_absent() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let sample = MultiModalSample::new(
            "s-2".to_string(),
            None,
            Some(random_tokens(4, 3, 10)),
            vec![0, 1],
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let bp = set.bind(&mut tape);
        let fwd = forward_sample(&mut tape, &bp, &cfg, &sample).unwrap();
        assert!(fwd.reps.z_v.is_none());
        let z_t_source = tape.constant(tensor_to::<f64>(sample.tokens_t.as_ref().unwrap()));
        let enc_t = encode_modality(&mut tape, &bp, &cfg, z_t_source, Modality::T).unwrap();
        let direct = project_head(&mut tape, &bp, "head_f", enc_t.cls).unwrap();
        assert_eq!(tape.value(fwd.reps.z_f).values(), tape.value(direct).values());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let sample = MultiModalSample::new(
            "s-3".to_string(),
            Some(random_tokens(4, 5, 11)),
            Some(random_tokens(3, 3, 12)),
            vec![1, 1],
        )
        .unwrap();
        let run = || {
            let mut tape = Tape::<f64>::new();
            let bp = set.bind(&mut tape);
            let fwd = forward_sample(&mut tape, &bp, &cfg, &sample).unwrap();
            tape.value(fwd.reps.z_f).values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn encoder_grad_check_one_layer() {
        let cfg = small_cfg();
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let tokens = random_tokens(3, 5, 13).with_grad();
        let checked = [
            "enc_v.in_proj.w",
            "enc_v.cls",
            "enc_v.pos",
            "enc_v.block0.attn.wq",
            "enc_v.block0.ln1.g",
            "enc_v.block0.ff.w1",
            "head_v.w1",
            "head_v.w2",
        ];
        let mut inputs = vec![tokens];
        for name in checked {
            inputs.push(set.tensor(name).unwrap().clone().with_grad());
        }
        let report = grad_check_multi(&inputs, 1e-5, |inputs| {
            let mut work = set.clone();
            for (j, name) in checked.iter().enumerate() {
                let i = work.index_of(name).unwrap();
                work.set_value(i, inputs[j + 1].clone()).unwrap();
            }
            let mut tape = Tape::<f64>::new();
            let bp = work.bind(&mut tape);
            let tok = tape.leaf(inputs[0].clone());
            let enc = encode_modality(&mut tape, &bp, &cfg, tok, Modality::V)?;
            let z = project_head(&mut tape, &bp, "head_v", enc.cls)?;
            let loss = tape.dot(z, z)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let mut out = vec![grads.wrt(tok).cloned()];
            for name in checked {
                let i = work.index_of(name).unwrap();
                out.push(grads.wrt(bp.var(i)).cloned());
            }
            Ok((value, out))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn fusion_grad_check() {
        let cfg = EncoderConfig { layers_v: 0, layers_t: 0, ..small_cfg() };
        let set = build_params::<f64>(&cfg, 5, 3).unwrap();
        let tok_v = random_tokens(2, 5, 14).with_grad();
        let tok_t = random_tokens(3, 3, 15).with_grad();
        let checked = ["fusion.cls", "fusion.mod_v", "fusion.block0.attn.wv", "head_f.w2"];
        let mut inputs = vec![tok_v, tok_t];
        for name in checked {
            inputs.push(set.tensor(name).unwrap().clone().with_grad());
        }
        let report = grad_check_multi(&inputs, 1e-5, |inputs| {
            let mut work = set.clone();
            for (j, name) in checked.iter().enumerate() {
                let i = work.index_of(name).unwrap();
                work.set_value(i, inputs[j + 2].clone()).unwrap();
            }
            let mut tape = Tape::<f64>::new();
            let bp = work.bind(&mut tape);
            let tv = tape.leaf(inputs[0].clone());
            let tt = tape.leaf(inputs[1].clone());
            let enc_v = encode_modality(&mut tape, &bp, &cfg, tv, Modality::V)?;
            let enc_t = encode_modality(&mut tape, &bp, &cfg, tt, Modality::T)?;
            let out = fuse(&mut tape, &bp, &cfg, Some(&enc_v), Some(&enc_t))?;
            let loss = tape.dot(out.z_f, out.z_f)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let mut grad_out = vec![grads.wrt(tv).cloned(), grads.wrt(tt).cloned()];
            for name in checked {
                let i = work.index_of(name).unwrap();
                grad_out.push(grads.wrt(bp.var(i)).cloned());
            }
            Ok((value, grad_out))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn config_validation_and_serde() {
        let cfg: EncoderConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, EncoderConfig::default());
        assert!(cfg.validate().is_ok());
        let bad = EncoderConfig { model_dim: 10, num_heads: 4, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<EncoderConfig>(r#"{"model_dmi": 8}"#).is_err());
    }
}
