//! End-to-end flow model: geo-spatial encoder + relative-location encoder
//! feeding a transformer flow predictor with an origin-constrained softmax
//! head.
//!
//! Every candidate flow of one origin becomes a d_model embedding
//! (256-dim geographic part concatenated with the location encoding); the
//! embeddings attend to each other through the transformer stack and a
//! linear head scores each slot. A masked softmax turns scores into
//! destination probabilities, scaled by the origin's total outflow.

use crate::error::{FlowError, Result};
use crate::geodata::{distance, relative_location, CrsMode, Region, N_FEATURES};
use crate::locenc::{
    init_tensor, rle_forward, rle_prime_forward, EncoderConfig, RleParams, RleVars,
};
use crate::nn::{
    attention_layer, dropout, layer_norm, linear, AttentionParams, AttentionVars, Tape, Tensor,
    Var,
};
use crate::rng::StreamKey;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Geo input width: origin features + destination features + distance.
pub const GEO_INPUT: usize = 2 * N_FEATURES + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RleVariant {
    None,
    Rle,
    RlePrime,
}

impl std::str::FromStr for RleVariant {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RleVariant::None),
            "rle" => Ok(RleVariant::Rle),
            "rle_prime" => Ok(RleVariant::RlePrime),
            other => Err(FlowError::validation(format!("unknown rle variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for RleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RleVariant::None => "none",
            RleVariant::Rle => "rle",
            RleVariant::RlePrime => "rle_prime",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorVariant {
    Transformer,
    FeedforwardOnly,
}

impl std::str::FromStr for PredictorVariant {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(PredictorVariant::Transformer),
            "feedforward_only" => Ok(PredictorVariant::FeedforwardOnly),
            other => Err(FlowError::validation(format!(
                "unknown predictor variant {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for PredictorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictorVariant::Transformer => "transformer",
            PredictorVariant::FeedforwardOnly => "feedforward_only",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_geo: usize,
    pub encoder: EncoderConfig,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub rle_variant: RleVariant,
    pub predictor_variant: PredictorVariant,
    pub max_destinations: usize,
    /// optional 1/sqrt(d_k) attention temperature; off by default, matching
    /// the plain dot-product score
    pub scaled_attention: bool,
}

impl ModelConfig {
    /// Paper-scale defaults; only the study-area diameter is required.
    pub fn new(lambda_max: f64) -> Self {
        ModelConfig {
            d_geo: 256,
            encoder: EncoderConfig::new(1.0, lambda_max, 16, 64),
            n_layers: 2,
            n_heads: 8,
            ffn_hidden: 256,
            dropout: 0.1,
            rle_variant: RleVariant::Rle,
            predictor_variant: PredictorVariant::Transformer,
            max_destinations: 256,
            scaled_attention: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_geo + self.encoder.d_loc
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_geo == 0 {
            return Err(FlowError::validation("d_geo must be positive"));
        }
        if !self.d_model().is_multiple_of(self.n_heads) {
            return Err(FlowError::validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model(),
                self.n_heads
            )));
        }
        if self.max_destinations == 0 {
            return Err(FlowError::validation("max_destinations must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FlowError::validation(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.predictor_variant == PredictorVariant::Transformer && self.n_layers == 0 {
            return Err(FlowError::validation("transformer needs n_layers >= 1"));
        }
        Ok(())
    }
}

/// One transformer layer: residual attention, then a two-layer FFN, each
/// followed by layer norm (post-norm order).
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub norm1_g: Tensor,
    pub norm1_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub norm2_g: Tensor,
    pub norm2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub geo_w: Tensor,
    pub geo_b: Tensor,
    pub rle: Option<RleParams>,
    pub layers: Vec<LayerParams>,
    /// head stored as [1, d_model] so scoring is a single matmul_nt
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let rle = match config.rle_variant {
            RleVariant::None => None,
            RleVariant::Rle => Some(RleParams::init_two_branch(&config.encoder, key.with_str("rle"))),
            RleVariant::RlePrime => Some(RleParams::init_single(&config.encoder, key.with_str("rle"))),
        };
        let n_layers = match config.predictor_variant {
            PredictorVariant::Transformer => config.n_layers,
            PredictorVariant::FeedforwardOnly => 0,
        };
        let layers = (0..n_layers)
            .map(|i| {
                let lk = key.with_str("layer").with(i as u64);
                LayerParams {
                    attn: AttentionParams {
                        wq: init_tensor(vec![d, d], lk.with_str("wq")),
                        wk: init_tensor(vec![d, d], lk.with_str("wk")),
                        wv: init_tensor(vec![d, d], lk.with_str("wv")),
                        wz: init_tensor(vec![d, d], lk.with_str("wz")),
                        n_heads: config.n_heads,
                        d_model: d,
                        scaled: config.scaled_attention,
                    },
                    norm1_g: Tensor::vector(vec![1.0; d]),
                    norm1_b: Tensor::zeros(vec![d]),
                    ffn_w1: init_tensor(vec![d, config.ffn_hidden], lk.with_str("ffn_w1")),
                    ffn_b1: Tensor::zeros(vec![config.ffn_hidden]),
                    ffn_w2: init_tensor(vec![config.ffn_hidden, d], lk.with_str("ffn_w2")),
                    ffn_b2: Tensor::zeros(vec![d]),
                    norm2_g: Tensor::vector(vec![1.0; d]),
                    norm2_b: Tensor::zeros(vec![d]),
                }
            })
            .collect();
        Ok(ModelParams {
            geo_w: init_tensor(vec![GEO_INPUT, config.d_geo], key.with_str("geo_w")),
            geo_b: Tensor::zeros(vec![config.d_geo]),
            rle,
            layers,
            head_w: init_tensor(vec![1, d], key.with_str("head_w")),
            head_b: Tensor::zeros(vec![1]),
        })
    }

    /// All tensors with stable names, in the fixed serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("geo.w".into(), &self.geo_w),
            ("geo.b".into(), &self.geo_b),
        ];
        if let Some(r) = &self.rle {
            out.push(("rle.a.w1".into(), &r.branch_a.w1));
            out.push(("rle.a.b1".into(), &r.branch_a.b1));
            out.push(("rle.a.w2".into(), &r.branch_a.w2));
            out.push(("rle.a.b2".into(), &r.branch_a.b2));
            if let Some(b) = &r.branch_b {
                out.push(("rle.b.w1".into(), &b.w1));
                out.push(("rle.b.b1".into(), &b.b1));
                out.push(("rle.b.w2".into(), &b.w2));
                out.push(("rle.b.b2".into(), &b.b2));
            }
            if let Some(w) = &r.fusion_w {
                out.push(("rle.fusion.w".into(), w));
            }
            if let Some(b) = &r.fusion_b {
                out.push(("rle.fusion.b".into(), b));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn.wq"), &l.attn.wq));
            out.push((format!("layer{i}.attn.wk"), &l.attn.wk));
            out.push((format!("layer{i}.attn.wv"), &l.attn.wv));
            out.push((format!("layer{i}.attn.wz"), &l.attn.wz));
            out.push((format!("layer{i}.norm1.g"), &l.norm1_g));
            out.push((format!("layer{i}.norm1.b"), &l.norm1_b));
            out.push((format!("layer{i}.ffn.w1"), &l.ffn_w1));
            out.push((format!("layer{i}.ffn.b1"), &l.ffn_b1));
            out.push((format!("layer{i}.ffn.w2"), &l.ffn_w2));
            out.push((format!("layer{i}.ffn.b2"), &l.ffn_b2));
            out.push((format!("layer{i}.norm2.g"), &l.norm2_g));
            out.push((format!("layer{i}.norm2.b"), &l.norm2_b));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable view in the same order as `named`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.geo_w, &mut self.geo_b];
        if let Some(r) = &mut self.rle {
            out.push(&mut r.branch_a.w1);
            out.push(&mut r.branch_a.b1);
            out.push(&mut r.branch_a.w2);
            out.push(&mut r.branch_a.b2);
            if let Some(b) = &mut r.branch_b {
                out.push(&mut b.w1);
                out.push(&mut b.b1);
                out.push(&mut b.w2);
                out.push(&mut b.b2);
            }
            if let Some(w) = &mut r.fusion_w {
                out.push(w);
            }
            if let Some(b) = &mut r.fusion_b {
                out.push(b);
            }
        }
        for l in &mut self.layers {
            out.push(&mut l.attn.wq);
            out.push(&mut l.attn.wk);
            out.push(&mut l.attn.wv);
            out.push(&mut l.attn.wz);
            out.push(&mut l.norm1_g);
            out.push(&mut l.norm1_b);
            out.push(&mut l.ffn_w1);
            out.push(&mut l.ffn_b1);
            out.push(&mut l.ffn_w2);
            out.push(&mut l.ffn_b2);
            out.push(&mut l.norm2_g);
            out.push(&mut l.norm2_b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Clones all tensors in the fixed order.
    pub fn to_vec(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Rebuilds params from tensors in the `named` order. The structure
    /// (variant layout, layer count) comes from `config`.
    pub fn from_vec(config: &ModelConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut params = ModelParams::init(config, StreamKey::new(0))?;
        {
            let slots = params.tensors_mut();
            if slots.len() != tensors.len() {
                return Err(FlowError::shape(format!(
                    "expected {} tensors, got {}",
                    slots.len(),
                    tensors.len()
                )));
            }
            for (slot, t) in slots.into_iter().zip(tensors) {
                if slot.shape() != t.shape() {
                    return Err(FlowError::shape(format!(
                        "tensor shape {:?} does not match expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(params)
    }
}

/// One origin with its candidate destination slots, ready for the forward
/// pass: features already normalized, distances scaled by lambda_max,
/// relative locations in meters.
#[derive(Debug, Clone)]
pub struct OriginBatch {
    pub origin_id: String,
    /// empty string marks a zero-padded slot
    pub dest_ids: Vec<String>,
    pub x_origin: Vec<f64>,
    pub x_dest: Vec<Vec<f64>>,
    pub r_norm: Vec<f64>,
    pub rl: Vec<[f64; 2]>,
    /// v_ij / O_i per real slot, 0 for padding
    pub target: Vec<f64>,
    /// true = real destination
    pub mask: Vec<bool>,
    pub total_outflow: f64,
}

impl OriginBatch {
    pub fn n_slots(&self) -> usize {
        self.mask.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_slots();
        if self.dest_ids.len() != n
            || self.x_dest.len() != n
            || self.r_norm.len() != n
            || self.rl.len() != n
            || self.target.len() != n
        {
            return Err(FlowError::shape("origin batch slot arrays disagree"));
        }
        if self.x_origin.len() != N_FEATURES {
            return Err(FlowError::shape("origin feature vector must have 20 entries"));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(FlowError::validation(format!(
                "origin {:?}: no unmasked destinations",
                self.origin_id
            )));
        }
        if self.total_outflow <= 0.0 {
            return Err(FlowError::validation(format!(
                "origin {:?}: total outflow must be positive",
                self.origin_id
            )));
        }
        let tsum: f64 = self
            .target
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| *t)
            .sum();
        if (tsum - 1.0).abs() > 1e-9 {
            return Err(FlowError::validation(format!(
                "origin {:?}: targets sum to {tsum}, expected 1",
                self.origin_id
            )));
        }
        for (i, (&m, &t)) in self.mask.iter().zip(&self.target).enumerate() {
            if !m && t != 0.0 {
                return Err(FlowError::validation(format!(
                    "origin {:?}: padded slot {i} has nonzero target",
                    self.origin_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    /// per-slot destination probability; masked slots exactly 0
    pub probs: Vec<f64>,
    /// probs scaled by the origin's total outflow
    pub volumes: Vec<f64>,
    /// raw head scores; masked slots 0
    pub scores: Vec<f64>,
    /// n_layers x n_heads matrices over all slots; masked rows/columns 0
    pub attentions: Vec<Vec<Tensor>>,
    pub mask: Vec<bool>,
}

/// Tape handles for all model parameters.
pub struct ModelVars {
    pub geo_w: Var,
    pub geo_b: Var,
    pub rle: Option<RleVars>,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

pub struct LayerVars {
    pub attn: AttentionVars,
    pub norm1_g: Var,
    pub norm1_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm2_g: Var,
    pub norm2_b: Var,
}

impl ModelVars {
    pub fn from_params(tape: &mut Tape, p: &ModelParams) -> Self {
        ModelVars {
            geo_w: tape.leaf(p.geo_w.clone()),
            geo_b: tape.leaf(p.geo_b.clone()),
            rle: p.rle.as_ref().map(|r| RleVars::from_params(tape, r)),
            layers: p
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn: AttentionVars::from_params(tape, &l.attn),
                    norm1_g: tape.leaf(l.norm1_g.clone()),
                    norm1_b: tape.leaf(l.norm1_b.clone()),
                    ffn_w1: tape.leaf(l.ffn_w1.clone()),
                    ffn_b1: tape.leaf(l.ffn_b1.clone()),
                    ffn_w2: tape.leaf(l.ffn_w2.clone()),
                    ffn_b2: tape.leaf(l.ffn_b2.clone()),
                    norm2_g: tape.leaf(l.norm2_g.clone()),
                    norm2_b: tape.leaf(l.norm2_b.clone()),
                })
                .collect(),
            head_w: tape.leaf(p.head_w.clone()),
            head_b: tape.leaf(p.head_b.clone()),
        }
    }

    /// Gradients in the `ModelParams::named` order, after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        let mut out = vec![tape.grad(self.geo_w), tape.grad(self.geo_b)];
        if let Some(r) = &self.rle {
            out.push(tape.grad(r.branch_a.w1));
            out.push(tape.grad(r.branch_a.b1));
            out.push(tape.grad(r.branch_a.w2));
            out.push(tape.grad(r.branch_a.b2));
            if let Some(b) = &r.branch_b {
                out.push(tape.grad(b.w1));
                out.push(tape.grad(b.b1));
                out.push(tape.grad(b.w2));
                out.push(tape.grad(b.b2));
            }
            if let Some(w) = r.fusion_w {
                out.push(tape.grad(w));
            }
            if let Some(b) = r.fusion_b {
                out.push(tape.grad(b));
            }
        }
        for l in &self.layers {
            out.push(tape.grad(l.attn.wq));
            out.push(tape.grad(l.attn.wk));
            out.push(tape.grad(l.attn.wv));
            out.push(tape.grad(l.attn.wz));
            out.push(tape.grad(l.norm1_g));
            out.push(tape.grad(l.norm1_b));
            out.push(tape.grad(l.ffn_w1));
            out.push(tape.grad(l.ffn_b1));
            out.push(tape.grad(l.ffn_w2));
            out.push(tape.grad(l.ffn_b2));
            out.push(tape.grad(l.norm2_g));
            out.push(tape.grad(l.norm2_b));
        }
        out.push(tape.grad(self.head_w));
        out.push(tape.grad(self.head_b));
        out
    }
}

/// Differentiable forward pass over the compacted (unmasked) slots.
pub struct ForwardPass {
    /// 1 x n_active probability row
    pub probs: Var,
    /// 1 x n_active raw score row
    pub scores: Var,
    /// per layer, per head attention over active slots
    pub attentions: Vec<Vec<Tensor>>,
    /// original slot index of each active position
    pub active: Vec<usize>,
}

/// Runs the model on a tape. Masked slots are dropped before the transformer
/// (they carry no information and may not influence anything), so attention
/// and softmax see only real destinations.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &OriginBatch,
    config: &ModelConfig,
    mode: Mode,
    dropout_key: StreamKey,
) -> Result<ForwardPass> {
    batch.validate()?;
    let active: Vec<usize> = (0..batch.n_slots()).filter(|&i| batch.mask[i]).collect();
    let n = active.len();
    let training = mode == Mode::Train;
    let mut drop_rng = dropout_key.with_str("dropout").rng();

    // geo branch: concat(x_o, x_d, r) -> linear -> ReLU
    let mut geo_in = Vec::with_capacity(n * GEO_INPUT);
    for &i in &active {
        geo_in.extend_from_slice(&batch.x_origin);
        geo_in.extend_from_slice(&batch.x_dest[i]);
        geo_in.push(batch.r_norm[i]);
    }
    let geo_in = tape.leaf(Tensor::matrix(n, GEO_INPUT, geo_in)?);
    let geo = linear(tape, geo_in, vars.geo_w, vars.geo_b);
    let geo = tape.relu(geo);

    // location branch, zero-filled when the variant is off
    let rls: Vec<[f64; 2]> = active.iter().map(|&i| batch.rl[i]).collect();
    let loc = match (config.rle_variant, &vars.rle) {
        (RleVariant::None, _) => tape.leaf(Tensor::zeros(vec![n, config.encoder.d_loc])),
        (RleVariant::Rle, Some(r)) => rle_forward(tape, &rls, &config.encoder, r)?,
        (RleVariant::RlePrime, Some(r)) => rle_prime_forward(tape, &rls, &config.encoder, r)?,
        _ => return Err(FlowError::shape("rle params missing for rle variant")),
    };
    let e = tape.concat_cols(&[geo, loc]);
    let mut x = dropout(tape, e, config.dropout, training, &mut drop_rng)?;

    let mut attentions = Vec::new();
    if config.predictor_variant == PredictorVariant::Transformer {
        let all = vec![true; n];
        for layer in &vars.layers {
            let (a_out, heads) = attention_layer(tape, x, &layer.attn, &all)?;
            attentions.push(heads);
            x = layer_norm(tape, a_out, layer.norm1_g, layer.norm1_b);
            let h = linear(tape, x, layer.ffn_w1, layer.ffn_b1);
            let h = tape.relu(h);
            let h = dropout(tape, h, config.dropout, training, &mut drop_rng)?;
            let f = linear(tape, h, layer.ffn_w2, layer.ffn_b2);
            let f = tape.add(x, f);
            x = layer_norm(tape, f, layer.norm2_g, layer.norm2_b);
        }
    }

    // head: s = x . w + b as an n x 1 column, reshaped to a softmax row
    let scores = tape.matmul_nt(x, vars.head_w);
    let scores = tape.add_bias_row(scores, vars.head_b);
    let scores = tape.reshape(scores, vec![1, n]);
    let probs = tape.masked_softmax_rows(scores, &vec![true; n])?;
    tape.check_finite(probs, "forward probabilities")?;

    Ok(ForwardPass {
        probs,
        scores,
        attentions,
        active,
    })
}

/// Non-differentiable forward: scatter the compact results back onto the
/// full slot layout.
pub fn forward_origin(
    batch: &OriginBatch,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    dropout_key: StreamKey,
) -> Result<PredictionResult> {
    let mut tape = Tape::new();
    let vars = ModelVars::from_params(&mut tape, params);
    let fwd = forward_on_tape(&mut tape, &vars, batch, config, mode, dropout_key)?;
    let n_slots = batch.n_slots();
    let n = fwd.active.len();

    let mut probs = vec![0.0; n_slots];
    let mut scores = vec![0.0; n_slots];
    for (k, &slot) in fwd.active.iter().enumerate() {
        probs[slot] = tape.val(fwd.probs).data()[k];
        scores[slot] = tape.val(fwd.scores).data()[k];
    }
    let volumes: Vec<f64> = probs.iter().map(|p| p * batch.total_outflow).collect();

    let attentions = fwd
        .attentions
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| {
                    let mut full = Tensor::zeros(vec![n_slots, n_slots]);
                    for i in 0..n {
                        for j in 0..n {
                            full.data_mut()[fwd.active[i] * n_slots + fwd.active[j]] =
                                a.data()[i * n + j];
                        }
                    }
                    full
                })
                .collect()
        })
        .collect();

    Ok(PredictionResult {
        probs,
        volumes,
        scores,
        attentions,
        mask: batch.mask.clone(),
    })
}

/// Single-flow geo encoder on already-normalized features.
pub fn encode_geo(x_o: &[f64], x_d: &[f64], r: f64, params: &ModelParams) -> Result<Vec<f64>> {
    if x_o.len() != N_FEATURES || x_d.len() != N_FEATURES {
        return Err(FlowError::shape(format!(
            "feature vectors must have {N_FEATURES} entries"
        )));
    }
    let d_geo = params.geo_w.cols();
    if params.geo_w.rows() != GEO_INPUT {
        return Err(FlowError::shape(format!(
            "geo weight expects {GEO_INPUT} inputs, has {}",
            params.geo_w.rows()
        )));
    }
    let mut input = Vec::with_capacity(GEO_INPUT);
    input.extend_from_slice(x_o);
    input.extend_from_slice(x_d);
    input.push(r);
    let w = params.geo_w.data();
    let b = params.geo_b.data();
    let mut out = vec![0.0; d_geo];
    for (i, &xi) in input.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for j in 0..d_geo {
            out[j] += xi * w[i * d_geo + j];
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = (*o + b[j]).max(0.0);
    }
    Ok(out)
}

/// Full flow embedding [geo; loc] for one (origin, destination) pair. The
/// regions' features are taken as already normalized; the distance is scaled
/// by the encoder's lambda_max.
pub fn embed_flow(
    origin: &Region,
    dest: &Region,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let r = distance(origin.centroid, dest.centroid, CrsMode::Planar)?
        / config.encoder.lambda_max;
    let mut out = encode_geo(&origin.features, &dest.features, r, params)?;
    match (config.rle_variant, &params.rle) {
        (RleVariant::None, _) => out.extend(vec![0.0; config.encoder.d_loc]),
        (variant, Some(rp)) => {
            let rl = relative_location(origin.centroid, dest.centroid)?;
            let mut tape = Tape::new();
            let vars = RleVars::from_params(&mut tape, rp);
            let v = match variant {
                RleVariant::Rle => rle_forward(&mut tape, &[rl], &config.encoder, &vars)?,
                _ => rle_prime_forward(&mut tape, &[rl], &config.encoder, &vars)?,
            };
            out.extend_from_slice(tape.val(v).data());
        }
        _ => return Err(FlowError::shape("rle params missing for rle variant")),
    }
    Ok(out)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_to_metadata(config: &ModelConfig) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("d_geo", config.d_geo.to_string()),
        ("d_loc", config.encoder.d_loc.to_string()),
        ("enc_hidden", config.encoder.hidden.to_string()),
        ("lambda_min", config.encoder.lambda_min.to_string()),
        ("lambda_max", config.encoder.lambda_max.to_string()),
        ("n_scales", config.encoder.n_scales.to_string()),
        ("n_layers", config.n_layers.to_string()),
        ("n_heads", config.n_heads.to_string()),
        ("ffn_hidden", config.ffn_hidden.to_string()),
        ("dropout", config.dropout.to_string()),
        ("rle_variant", config.rle_variant.to_string()),
        ("predictor_variant", config.predictor_variant.to_string()),
        ("max_destinations", config.max_destinations.to_string()),
        ("scaled_attention", config.scaled_attention.to_string()),
    ] {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

fn metadata_to_config(meta: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in meta.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FlowError::Checkpoint(format!("bad metadata line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| FlowError::Checkpoint(format!("missing metadata key {k:?}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| FlowError::Checkpoint(format!("bad integer for {k:?}")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| FlowError::Checkpoint(format!("bad float for {k:?}")))
    };
    let mut encoder = EncoderConfig::new(
        parse_f64("lambda_min")?,
        parse_f64("lambda_max")?,
        parse_usize("n_scales")?,
        parse_usize("d_loc")?,
    );
    encoder.hidden = parse_usize("enc_hidden")?;
    let config = ModelConfig {
        d_geo: parse_usize("d_geo")?,
        encoder,
        n_layers: parse_usize("n_layers")?,
        n_heads: parse_usize("n_heads")?,
        ffn_hidden: parse_usize("ffn_hidden")?,
        dropout: parse_f64("dropout")?,
        rle_variant: get("rle_variant")?.parse()?,
        predictor_variant: get("predictor_variant")?.parse()?,
        max_destinations: parse_usize("max_destinations")?,
        scaled_attention: get("scaled_attention")?
            .parse()
            .map_err(|_| FlowError::Checkpoint("bad bool for scaled_attention".into()))?,
    };
    config.validate()?;
    Ok(config)
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes params, config, and any extra named tensors (e.g. feature
/// normalization statistics). Values are stored as f32.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &ModelConfig,
    extras: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = config_to_metadata(config);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    for (name, t) in params.named() {
        write_tensor(&mut buf, &name, t);
    }
    for (name, t) in extras {
        if !name.starts_with("extra.") {
            return Err(FlowError::Checkpoint(format!(
                "extra tensor {name:?} must use the extra. prefix"
            )));
        }
        write_tensor(&mut buf, name, t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FlowError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelParams, ModelConfig, BTreeMap<String, Tensor>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    if buf.len() < 4 + 4 + 4 + 4 {
        return Err(FlowError::Checkpoint("file too short".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(FlowError::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(FlowError::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FlowError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|_| FlowError::Checkpoint("metadata is not UTF-8".into()))?
        .to_string();
    let config = metadata_to_config(&meta)?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    while cur.pos < cur.buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| FlowError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        order.push(name.clone());
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(FlowError::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }

    let mut param_tensors = Vec::new();
    let mut extras = BTreeMap::new();
    for name in order {
        let t = tensors.remove(&name).unwrap();
        if name.starts_with("extra.") {
            extras.insert(name, t);
        } else {
            param_tensors.push(t);
        }
    }
    let params = ModelParams::from_vec(&config, &param_tensors)?;
    Ok((params, config, extras))
}
