//! Deterministic dense-tensor numerics with reverse-mode gradients.
//!
//! The primitives here are exactly the ones the model needs: linear maps,
//! ReLU, dropout, layer normalization, masked softmax, and multi-head
//! self-attention in residual form. Forward passes are pure given (input,
//! params, rng state).

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{FlowError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// xW + b.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_bias_row(y, b)
}

/// Masked softmax over a score vector (shaped 1×n or n).
pub fn softmax(tape: &mut Tape, scores: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_softmax_rows(scores, mask)
}

pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    tape.layer_norm_rows(x, gain, bias, LAYER_NORM_EPS)
}

/// Training-mode dropout: zeroes entries with probability `rate` and scales
/// survivors by 1/(1-rate). Eval mode is the identity.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FlowError::validation(format!("dropout rate {rate} out of [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.val(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(tape.mul_const(x, Tensor::new(shape, mask)?))
}

/// Multi-head self-attention weights: full-width projections read as `h`
/// concatenated per-head blocks of shape d_model × d_model/h, plus a shared
/// output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wz: Tensor,
    pub n_heads: usize,
    pub d_model: usize,
    /// optional 1/sqrt(d_k) temperature; the default follows the score
    /// formula verbatim and leaves it off
    pub scaled: bool,
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FlowError::shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wz", &self.wz)] {
            if t.shape() != [self.d_model, self.d_model] {
                return Err(FlowError::shape(format!(
                    "{name} shape {:?}, expected [{d}, {d}]",
                    t.shape(),
                    d = self.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for one attention layer's weights.
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wz: Var,
    pub n_heads: usize,
    pub scaled: bool,
}

impl AttentionVars {
    pub fn from_params(tape: &mut Tape, p: &AttentionParams) -> Self {
        AttentionVars {
            wq: tape.leaf(p.wq.clone()),
            wk: tape.leaf(p.wk.clone()),
            wv: tape.leaf(p.wv.clone()),
            wz: tape.leaf(p.wz.clone()),
            n_heads: p.n_heads,
            scaled: p.scaled,
        }
    }
}

/// Residual multi-head self-attention over `n` slots.
///
/// Per head, weight(i,j) = softmax over unmasked j of (w_q e_i · w_k e_j) and
/// e_i' = e_i + w_z · concat_heads(Σ_j weight(i,j) · w_v e_j). Masked key
/// columns carry exactly zero weight; rows for masked queries pass the input
/// through unchanged. Returns the output embeddings and the per-head weight
/// matrices (masked query rows zeroed).
pub fn attention_layer(
    tape: &mut Tape,
    e: Var,
    params: &AttentionVars,
    mask: &[bool],
) -> Result<(Var, Vec<Tensor>)> {
    let n = tape.val(e).rows();
    let d = tape.val(e).cols();
    if mask.len() != n {
        return Err(FlowError::shape(format!("mask length {} vs {} slots", mask.len(), n)));
    }
    if !mask.iter().any(|&m| m) {
        return Err(FlowError::validation("attention over fully masked input"));
    }
    let h = params.n_heads;
    if !d.is_multiple_of(h) {
        return Err(FlowError::shape(format!("d_model {d} not divisible by {h} heads")));
    }
    let dh = d / h;

    let q = tape.matmul(e, params.wq);
    let k = tape.matmul(e, params.wk);
    let v = tape.matmul(e, params.wv);

    let mut head_outs = Vec::with_capacity(h);
    let mut attn = Vec::with_capacity(h);
    for hi in 0..h {
        let qh = tape.slice_cols(q, hi * dh, dh);
        let kh = tape.slice_cols(k, hi * dh, dh);
        let vh = tape.slice_cols(v, hi * dh, dh);
        let mut scores = tape.matmul_nt(qh, kh);
        if params.scaled {
            scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        }
        let a = tape.masked_softmax_rows(scores, mask)?;
        head_outs.push(tape.matmul(a, vh));
        let mut weights = tape.val(a).clone();
        for (i, &mq) in mask.iter().enumerate() {
            if !mq {
                for w in &mut weights.data_mut()[i * n..(i + 1) * n] {
                    *w = 0.0;
                }
            }
        }
        attn.push(weights);
    }
    let concat = tape.concat_cols(&head_outs);
    // zero the attention contribution of masked query rows so the residual
    // passes their input through unchanged
    let contrib = if mask.iter().all(|&m| m) {
        concat
    } else {
        let mut rowmask = vec![0.0; n * d];
        for (i, &mq) in mask.iter().enumerate() {
            if mq {
                for x in &mut rowmask[i * d..(i + 1) * d] {
                    *x = 1.0;
                }
            }
        }
        tape.mul_const(concat, Tensor::matrix(n, d, rowmask)?)
    };
    let z = tape.matmul(contrib, params.wz);
    Ok((tape.add(e, z), attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn linear_hand_arithmetic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![3.0, 3.0]));
        let y = linear(&mut t, x, w, b);
        assert_eq!(t.val(y).data(), &[4.0, 5.0]);
    }

    #[test]
    fn softmax_equal_scores() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::matrix(1, 4, vec![2.0; 4]).unwrap());
        let p = softmax(&mut t, s, &[true; 4]).unwrap();
        for v in t.val(p).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_values() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::matrix(1, 2, vec![0.0, 3.0_f64.ln()]).unwrap());
        let p = softmax(&mut t, s, &[true, true]).unwrap();
        assert!((t.val(p).data()[0] - 0.25).abs() < 1e-6);
        assert!((t.val(p).data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_masked_entries_zero_and_rest_sum_one() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::matrix(1, 4, vec![5.0, 1.0, -2.0, 1e4]).unwrap());
        let p = softmax(&mut t, s, &[true, false, true, true]).unwrap();
        let d = t.val(p).data();
        assert_eq!(d[1], 0.0);
        let sum: f64 = d.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 4, vec![7.0; 4]).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0; 4]));
        let b = t.leaf(Tensor::vector(vec![0.0; 4]));
        let y = layer_norm(&mut t, x, g, b);
        for v in t.val(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_hand_value() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0; 2]));
        let b = t.leaf(Tensor::vector(vec![0.0; 2]));
        let y = layer_norm(&mut t, x, g, b);
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((t.val(y).data()[0] + expect).abs() < 1e-12);
        assert!((t.val(y).data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_random_rows_standardized() {
        let mut rng = stream(9, "ln-test");
        let d = 16;
        let data: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 10.0 - 3.0).collect();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, d, data).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0; d]));
        let b = t.leaf(Tensor::vector(vec![0.0; d]));
        let y = layer_norm(&mut t, x, g, b);
        let out = t.val(y).data();
        let mean: f64 = out.iter().sum::<f64>() / d as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = stream(1234, "dropout");
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = dropout(&mut t, x, 0.1, false, &mut rng).unwrap();
        assert_eq!(t.val(y).data(), &[1.0, 2.0, 3.0]);
        let z = dropout(&mut t, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(t.val(z).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dropout_rate_out_of_range() {
        let mut rng = stream(1234, "dropout");
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        assert!(dropout(&mut t, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mut rng = stream(1234, "dropout-stats");
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0; n]));
        let y = dropout(&mut t, x, 0.1, true, &mut rng).unwrap();
        let out = t.val(y).data();
        let mean: f64 = out.iter().sum::<f64>() / n as f64;
        let zeros = out.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.1).abs() < 0.01, "zero fraction {zeros}");
    }

    fn random_attention(d: usize, h: usize, seed: u64) -> AttentionParams {
        let mut rng = stream(seed, "attn-test");
        let mut mk = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
        };
        AttentionParams {
            wq: mk(d, d),
            wk: mk(d, d),
            wv: mk(d, d),
            wz: mk(d, d),
            n_heads: h,
            d_model: d,
            scaled: false,
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // plain-loop oracle on purpose
    fn attention_single_slot_matches_hand_formula() {
        let d = 4;
        let p = random_attention(d, 2, 5);
        let mut t = Tape::new();
        let e_data: Vec<f64> = vec![0.3, -0.2, 0.7, 0.1];
        let e = t.leaf(Tensor::matrix(1, d, e_data.clone()).unwrap());
        let vars = AttentionVars::from_params(&mut t, &p);
        let (out, attn) = attention_layer(&mut t, e, &vars, &[true]).unwrap();
        assert_eq!(attn.len(), 2);
        for a in &attn {
            assert!((a.data()[0] - 1.0).abs() < 1e-12);
        }
        // e' = e + wz(wv e) with a single unmasked slot
        let mut ve = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                ve[j] += e_data[i] * p.wv.data()[i * d + j];
            }
        }
        let mut ze = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                ze[j] += ve[i] * p.wz.data()[i * d + j];
            }
        }
        for j in 0..d {
            assert!((t.val(out).data()[j] - (e_data[j] + ze[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_zero_query_uniform_weights() {
        let d = 4;
        let mut p = random_attention(d, 1, 6);
        p.wq = Tensor::zeros(vec![d, d]);
        let mut t = Tape::new();
        let n = 3;
        let e = t.leaf(
            Tensor::matrix(n, d, (0..n * d).map(|i| (i as f64) * 0.1 - 0.5).collect()).unwrap(),
        );
        let vars = AttentionVars::from_params(&mut t, &p);
        let (_, attn) = attention_layer(&mut t, e, &vars, &[true; 3]).unwrap();
        for w in attn[0].data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_residual_with_zero_output_projection() {
        let d = 4;
        let mut p = random_attention(d, 2, 7);
        p.wz = Tensor::zeros(vec![d, d]);
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * d).map(|i| i as f64 * 0.3).collect();
        let e = t.leaf(Tensor::matrix(2, d, data.clone()).unwrap());
        let vars = AttentionVars::from_params(&mut t, &p);
        let (out, _) = attention_layer(&mut t, e, &vars, &[true; 2]).unwrap();
        assert_eq!(t.val(out).data(), data.as_slice());
    }

    #[test]
    fn attention_masked_rows_pass_through() {
        let d = 4;
        let p = random_attention(d, 2, 8);
        let mut t = Tape::new();
        let data: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.17).sin()).collect();
        let e = t.leaf(Tensor::matrix(3, d, data.clone()).unwrap());
        let vars = AttentionVars::from_params(&mut t, &p);
        let mask = [true, false, true];
        let (out, attn) = attention_layer(&mut t, e, &vars, &mask).unwrap();
        // masked query row unchanged
        assert_eq!(&t.val(out).data()[d..2 * d], &data[d..2 * d]);
        for a in &attn {
            // masked key column zero, unmasked rows sum to 1
            for i in [0usize, 2] {
                assert_eq!(a.data()[i * 3 + 1], 0.0);
                let s: f64 = a.data()[i * 3..(i + 1) * 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            // masked query row zeroed in the report
            assert!(a.data()[3..6].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn attention_all_masked_errors() {
        let d = 2;
        let p = random_attention(d, 1, 9);
        let mut t = Tape::new();
        let e = t.leaf(Tensor::matrix(1, d, vec![0.0; d]).unwrap());
        let vars = AttentionVars::from_params(&mut t, &p);
        assert!(attention_layer(&mut t, e, &vars, &[false]).is_err());
    }
}
