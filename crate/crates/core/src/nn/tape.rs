//! Reverse-mode autodiff tape over dense tensors.
//!
//! One tape records one forward pass; `backward` accumulates gradients for
//! every recorded node in reverse order. Tapes are single-threaded by
//! construction — parallel callers build one tape per batch and merge the
//! parameter gradients afterwards in a fixed order.

use super::tensor::Tensor;
use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m×k] · b[k×n]
    MatMul(Var, Var),
    /// a[m×k] · bᵀ where b is [n×k]
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// elementwise product with a non-differentiated constant
    MulConst(Var),
    /// matrix[n×d] + row bias[d], broadcast over rows
    AddBiasRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// ln(max(x, eps)); gradient is 0 on the clamped branch
    LnClamped(Var, f64),
    /// per-row softmax; masked columns are exactly 0
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    /// per-row layer norm with affine gain/bias vectors
    LayerNormRows(Var, Var, Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// same flat data, new shape
    Reshape(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    /// column mask for masked softmax nodes
    mask: Option<Vec<bool>>,
    /// constant factor for MulConst nodes
    constant: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            mask: None,
            constant: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`. Zeros if the node
    /// did not participate.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.all_finite() {
            Ok(())
        } else {
            Err(FlowError::numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * row[j];
                }
            }
        }
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b))
    }

    /// a[m×k] · bᵀ with b stored as [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Mul(a, b))
    }

    /// Elementwise product with a constant tensor (no gradient into `c`).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape(), c.shape(), "mul_const shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let v = self.push(Tensor::new(shape, data).unwrap(), Op::MulConst(a));
        self.nodes[v.0].constant = Some(c);
        v
    }

    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (n, d) = (ta.rows(), ta.cols());
        assert_eq!(tb.len(), d, "bias length {} vs cols {d}", tb.len());
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += tb.data()[j];
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::AddBiasRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu(a))
    }

    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(eps).ln()).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::LnClamped(a, eps))
    }

    /// Numerically stable per-row softmax (max subtraction).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, d) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                data[i * d + j] = e;
                z += e;
            }
            for j in 0..d {
                data[i * d + j] /= z;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::SoftmaxRows(a))
    }

    /// Per-row softmax over unmasked columns only; masked columns are exactly
    /// zero in the output. Errors if every column is masked.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, d) = (ta.rows(), ta.cols());
        assert_eq!(mask.len(), d, "mask length vs columns");
        if !mask.iter().any(|&m| m) {
            return Err(FlowError::validation("softmax over fully masked input"));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                if mask[j] {
                    let e = (row[j] - mx).exp();
                    data[i * d + j] = e;
                    z += e;
                }
            }
            for j in 0..d {
                data[i * d + j] /= z;
            }
        }
        let shape = ta.shape().to_vec();
        let v = self.push(Tensor::new(shape, data).unwrap(), Op::MaskedSoftmaxRows(a));
        self.nodes[v.0].mask = Some(mask.to_vec());
        Ok(v)
    }

    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, d) = (ta.rows(), ta.cols());
        assert!(d >= 2, "layer norm needs length >= 2");
        assert_eq!(self.nodes[gain.0].value.len(), d);
        assert_eq!(self.nodes[bias.0].value.len(), d);
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = ta.shape().to_vec();
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::LayerNormRows(a, gain, bias, eps),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            let d = t.cols();
            for i in 0..n {
                data[i * total + off..i * total + off + d]
                    .copy_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            off += d;
        }
        self.push(
            Tensor::matrix(n, total, data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, d) = (ta.rows(), ta.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&ta.data()[i * d + start..i * d + start + len]);
        }
        self.push(
            Tensor::matrix(n, len, data).unwrap(),
            Op::SliceCols(a, start, len),
        )
    }

    /// Reinterprets the flat data under a new shape of equal length.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        assert_eq!(n, ta.len(), "reshape length mismatch");
        let data = ta.data().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        let g = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        for (gi, di) in g.data_mut().iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, target: Var) {
        assert_eq!(self.nodes[target.0].value.len(), 1, "backward needs scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[target.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=target.0).rev() {
            let grad = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let g = grad.data();
            // Ops replicated here to avoid borrowing self.nodes twice.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    // out = A·Bᵀ, G is m×n. dA = G·B ; dB = Gᵀ·A
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * tb.data()[j * k + p];
                            }
                        }
                    }
                    let mut db = vec![0.0; n * k];
                    for j in 0..n {
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gij * ta.data()[i * k + p];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g);
                    let gv = grad.data().to_vec();
                    self.accumulate(b, &gv);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g);
                    let neg: Vec<f64> = grad.data().iter().map(|x| -x).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MulConst(a) => {
                    let a = *a;
                    let c = self.nodes[idx].constant.as_ref().unwrap().clone();
                    let da: Vec<f64> = g.iter().zip(c.data()).map(|(gi, ci)| gi * ci).collect();
                    self.accumulate(a, &da);
                }
                Op::AddBiasRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let d = self.nodes[bias.0].value.len();
                    let n = grad.len() / d;
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    self.accumulate(a, g);
                    self.accumulate(bias, &db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LnClamped(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, xi)| if *xi > eps { gi / xi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let p = self.nodes[idx].value.clone();
                    let (n, d) = (p.rows(), p.cols());
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let prow = &p.data()[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let dot: f64 = prow.iter().zip(grow).map(|(pi, gi)| pi * gi).sum();
                        for j in 0..d {
                            da[i * d + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let a = *a;
                    let p = self.nodes[idx].value.clone();
                    let mask = self.nodes[idx].mask.as_ref().unwrap().clone();
                    let (n, d) = (p.rows(), p.cols());
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let prow = &p.data()[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let dot: f64 = (0..d)
                            .filter(|&j| mask[j])
                            .map(|j| prow[j] * grow[j])
                            .sum();
                        for j in 0..d {
                            if mask[j] {
                                da[i * d + j] = prow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNormRows(a, gain, bias, eps) => {
                    let (a, gain, bias, eps) = (*a, *gain, *bias, *eps);
                    let x = self.nodes[a.0].value.clone();
                    let gvec = self.nodes[gain.0].value.data().to_vec();
                    let (n, d) = (x.rows(), x.cols());
                    let mut da = vec![0.0; n * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..n {
                        let row = &x.data()[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&gvec).map(|(gi, gn)| gi * gn).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxx = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(dxi, xi)| dxi * xi)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            da[i * d + j] = inv * (dxhat[j] - mean_dx - xhat[j] * mean_dxx);
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let total = self.nodes[idx].value.cols();
                    let n = self.nodes[idx].value.rows();
                    let mut off = 0;
                    for p in parts {
                        let d = self.nodes[p.0].value.cols();
                        let mut dp = vec![0.0; n * d];
                        for i in 0..n {
                            dp[i * d..(i + 1) * d]
                                .copy_from_slice(&g[i * total + off..i * total + off + d]);
                        }
                        self.accumulate(p, &dp);
                        off += d;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let d = self.nodes[a.0].value.cols();
                    let n = self.nodes[a.0].value.rows();
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        da[i * d + start..i * d + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.accumulate(a, &da);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    self.accumulate(a, g);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len();
                    let da = vec![g[0]; n];
                    self.accumulate(a, &da);
                }
            }
        }
    }
}
