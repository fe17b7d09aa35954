//! Relative-location encoders.
//!
//! A relative location is decomposed onto three unit base vectors spaced
//! 2π/3 apart and encoded with sine/cosine pairs at geometrically spaced
//! scales. Two learned variants sit on top: a two-branch encoder whose
//! second branch uses the base triad rotated by π/3 (six evenly spaced axes
//! overall) with a fusion layer, and a single-branch variant.

use crate::error::{FlowError, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::rng::StreamKey;
use rand::Rng;

/// Base triad: a1 = [1,0], a2 = [-1/2, √3/2], a3 = [-1/2, -√3/2].
pub fn basis_a() -> [[f64; 2]; 3] {
    [
        [1.0, 0.0],
        [-0.5, 3.0_f64.sqrt() / 2.0],
        [-0.5, -(3.0_f64.sqrt()) / 2.0],
    ]
}

/// The base triad rotated by π/3; together with `basis_a` it covers six
/// directions spaced π/3 apart.
pub fn basis_b() -> [[f64; 2]; 3] {
    let (s, c) = (std::f64::consts::FRAC_PI_3).sin_cos();
    basis_a().map(|[x, y]| [c * x - s * y, s * x + c * y])
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_scales: usize,
    /// output embedding width
    pub d_loc: usize,
    /// width of the hidden ReLU layer inside each branch
    pub hidden: usize,
}

impl EncoderConfig {
    pub fn new(lambda_min: f64, lambda_max: f64, n_scales: usize, d_loc: usize) -> Self {
        EncoderConfig {
            lambda_min,
            lambda_max,
            n_scales,
            d_loc,
            hidden: d_loc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(FlowError::validation(format!(
                "need 0 < lambda_min < lambda_max, got {} / {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.n_scales < 2 {
            return Err(FlowError::validation("n_scales must be >= 2"));
        }
        if self.d_loc == 0 || self.hidden == 0 {
            return Err(FlowError::validation("d_loc and hidden must be positive"));
        }
        Ok(())
    }

    /// input width of a branch: 6 components per scale
    pub fn pe_len(&self) -> usize {
        6 * self.n_scales
    }

    pub fn scale_ratio(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// One scale of the encoding: [a1cos, a1sin, a2cos, a2sin, a3cos, a3sin]
/// with wavelength lambda_min * g^(s/(n_scales-1)).
pub fn pe_scale(
    rl: [f64; 2],
    s: usize,
    basis: &[[f64; 2]; 3],
    lambda_min: f64,
    g: f64,
    n_scales: usize,
) -> Result<[f64; 6]> {
    if !rl.iter().all(|v| v.is_finite()) {
        return Err(FlowError::validation("non-finite relative location"));
    }
    if n_scales < 2 || s >= n_scales {
        return Err(FlowError::validation(format!(
            "scale index {s} out of range for {n_scales} scales"
        )));
    }
    let lambda = lambda_min * g.powf(s as f64 / (n_scales - 1) as f64);
    let mut out = [0.0; 6];
    for (j, a) in basis.iter().enumerate() {
        let proj = (rl[0] * a[0] + rl[1] * a[1]) / lambda;
        out[2 * j] = proj.cos();
        out[2 * j + 1] = proj.sin();
    }
    Ok(out)
}

/// Concatenation of `pe_scale` over all scales; length 6 * n_scales, every
/// entry in [-1, 1].
pub fn multiscale_encode(
    rl: [f64; 2],
    config: &EncoderConfig,
    basis: &[[f64; 2]; 3],
) -> Result<Vec<f64>> {
    config.validate()?;
    let g = config.scale_ratio();
    let mut out = Vec::with_capacity(config.pe_len());
    for s in 0..config.n_scales {
        out.extend(pe_scale(rl, s, basis, config.lambda_min, g, config.n_scales)?);
    }
    Ok(out)
}

/// Encodes a batch of relative locations into an n × (6 * n_scales) matrix.
pub fn encode_matrix(
    rls: &[[f64; 2]],
    config: &EncoderConfig,
    basis: &[[f64; 2]; 3],
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rls.len() * config.pe_len());
    for rl in rls {
        data.extend(multiscale_encode(*rl, config, basis)?);
    }
    Tensor::matrix(rls.len(), config.pe_len(), data)
}

/// Weights of one branch network: linear → ReLU → linear.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BranchParams {
    pub fn init(config: &EncoderConfig, key: StreamKey) -> Self {
        BranchParams {
            w1: init_tensor(vec![config.pe_len(), config.hidden], key.with_str("w1")),
            b1: Tensor::zeros(vec![config.hidden]),
            w2: init_tensor(vec![config.hidden, config.d_loc], key.with_str("w2")),
            b2: Tensor::zeros(vec![config.d_loc]),
        }
    }
}

/// Learned relative-location encoder weights. `branch_b` and the fusion
/// layer are present only for the two-branch variant.
#[derive(Debug, Clone)]
pub struct RleParams {
    pub branch_a: BranchParams,
    pub branch_b: Option<BranchParams>,
    pub fusion_w: Option<Tensor>,
    pub fusion_b: Option<Tensor>,
}

impl RleParams {
    pub fn init_single(config: &EncoderConfig, key: StreamKey) -> Self {
        RleParams {
            branch_a: BranchParams::init(config, key.with_str("a")),
            branch_b: None,
            fusion_w: None,
            fusion_b: None,
        }
    }

    pub fn init_two_branch(config: &EncoderConfig, key: StreamKey) -> Self {
        RleParams {
            branch_a: BranchParams::init(config, key.with_str("a")),
            branch_b: Some(BranchParams::init(config, key.with_str("b"))),
            fusion_w: Some(init_tensor(
                vec![2 * config.d_loc, config.d_loc],
                key.with_str("fusion"),
            )),
            fusion_b: Some(Tensor::zeros(vec![config.d_loc])),
        }
    }
}

/// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init, rounded to f32 so a
/// checkpoint round trip is lossless.
pub fn init_tensor(shape: Vec<usize>, key: StreamKey) -> Tensor {
    let fan_in = shape[0].max(1) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let n: usize = shape.iter().product();
    let mut rng = key.rng();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    let mut t = Tensor::new(shape, data).unwrap();
    t.round_to_f32();
    t
}

pub struct BranchVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BranchVars {
    pub fn from_params(tape: &mut Tape, p: &BranchParams) -> Self {
        BranchVars {
            w1: tape.leaf(p.w1.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: tape.leaf(p.w2.clone()),
            b2: tape.leaf(p.b2.clone()),
        }
    }
}

pub struct RleVars {
    pub branch_a: BranchVars,
    pub branch_b: Option<BranchVars>,
    pub fusion_w: Option<Var>,
    pub fusion_b: Option<Var>,
}

impl RleVars {
    pub fn from_params(tape: &mut Tape, p: &RleParams) -> Self {
        RleVars {
            branch_a: BranchVars::from_params(tape, &p.branch_a),
            branch_b: p.branch_b.as_ref().map(|b| BranchVars::from_params(tape, b)),
            fusion_w: p.fusion_w.as_ref().map(|w| tape.leaf(w.clone())),
            fusion_b: p.fusion_b.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }
}

/// linear → ReLU → linear over a batch of encodings.
pub fn branch_forward(tape: &mut Tape, pe: Var, vars: &BranchVars) -> Var {
    let h = crate::nn::linear(tape, pe, vars.w1, vars.b1);
    let h = tape.relu(h);
    crate::nn::linear(tape, h, vars.w2, vars.b2)
}

/// Single-branch variant: NN(PE(rl)) over a batch of relative locations.
pub fn rle_prime_forward(
    tape: &mut Tape,
    rls: &[[f64; 2]],
    config: &EncoderConfig,
    vars: &RleVars,
) -> Result<Var> {
    if vars.branch_b.is_some() {
        return Err(FlowError::shape("single-branch forward on two-branch params"));
    }
    let pe = encode_matrix(rls, config, &basis_a())?;
    let pe = tape.leaf(pe);
    Ok(branch_forward(tape, pe, &vars.branch_a))
}

/// Two-branch variant: fusion(concat(NN_a(PE_a), NN_b(PE_b))) with a ReLU on
/// the fused output.
pub fn rle_forward(
    tape: &mut Tape,
    rls: &[[f64; 2]],
    config: &EncoderConfig,
    vars: &RleVars,
) -> Result<Var> {
    let (branch_b, fusion_w, fusion_b) = match (&vars.branch_b, vars.fusion_w, vars.fusion_b) {
        (Some(b), Some(w), Some(bias)) => (b, w, bias),
        _ => return Err(FlowError::shape("two-branch forward needs branch_b and fusion")),
    };
    let pe_a = encode_matrix(rls, config, &basis_a())?;
    let pe_b = encode_matrix(rls, config, &basis_b())?;
    let pe_a = tape.leaf(pe_a);
    let pe_b = tape.leaf(pe_b);
    let out_a = branch_forward(tape, pe_a, &vars.branch_a);
    let out_b = branch_forward(tape, pe_b, branch_b);
    let cat = tape.concat_cols(&[out_a, out_b]);
    let fused = crate::nn::linear(tape, cat, fusion_w, fusion_b);
    Ok(tape.relu(fused))
}
