//! Event-raster classifier: polarity expansion, multi-scale depthwise-
//! separable convolution branches with channel gating, epoch tokenization,
//! masked local attention over the epoch window, a leaky integrator state
//! with reset at discontinuities, and a linear stage head.
//!
//! All arithmetic is f64; parameter values live on the f32 grid so that
//! checkpoints (stored as binary32) round-trip bitwise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NCKP_MAGIC: &[u8; 4] = b"NCKP";
pub const NCKP_VERSION: u16 = 1;

/// How a C x T_b epoch feature map collapses to one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Attention,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// (k_s, k_m, k_l), all odd.
    pub kernel_sizes: (usize, usize, usize),
    /// Channels per branch (w).
    pub branch_width: usize,
    /// Channels after the fusion projection (C = 3w).
    pub fused_width: usize,
    /// Gate bottleneck divisor (hidden = C / r, integer division).
    pub gate_reduction: usize,
    /// Attention dimension d.
    pub attn_dim: usize,
    /// Window radius L (window spans 2L+1 epochs).
    pub window_radius: usize,
    /// State leak coefficient, in (0, 1).
    pub lambda: f64,
    /// Threshold for the diagnostic spike-rate detector.
    pub fire_threshold: f64,
    pub n_classes: usize,
    /// Samples per epoch raster row.
    pub t_b: usize,
    pub pooling: Pooling,
    /// Forces the channel gate to all-ones.
    pub gate_bypass: bool,
    /// A1: raster rows carry a dense signal instead of ternary events.
    pub dense_input: bool,
    /// A2: keep only the middle branch, widened to 3w.
    pub single_branch: bool,
    /// A4: classify the attention output directly, no integrator state.
    pub no_elif: bool,
}

impl ModelConfig {
    /// Small profile for tests and CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            kernel_sizes: (7, 15, 31),
            branch_width: 8,
            fused_width: 24,
            gate_reduction: 4,
            attn_dim: 24,
            window_radius: 15,
            lambda: 0.9,
            fire_threshold: 1.0,
            n_classes: 5,
            t_b: 3000,
            pooling: Pooling::Attention,
            gate_bypass: false,
            dense_input: false,
            single_branch: false,
            no_elif: false,
        }
    }

    /// Full-size profile, sized to land near 0.93 M parameters.
    pub fn paper_scale() -> Self {
        ModelConfig {
            branch_width: 126,
            fused_width: 378,
            attn_dim: 378,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ks, km, kl) = self.kernel_sizes;
        if ks % 2 == 0 || km % 2 == 0 || kl % 2 == 0 || ks == 0 {
            return Err(Error::parameter("kernel sizes must be odd"));
        }
        if self.fused_width != 3 * self.branch_width {
            return Err(Error::parameter("fused width must equal 3 x branch width"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::parameter("lambda must lie in (0, 1)"));
        }
        if self.gate_reduction == 0 || self.fused_width < self.gate_reduction {
            return Err(Error::parameter("gate reduction must be in 1..=C"));
        }
        if self.attn_dim == 0 || self.n_classes == 0 || self.t_b == 0 || self.branch_width == 0 {
            return Err(Error::parameter("widths, classes, and t_b must be positive"));
        }
        Ok(())
    }

    /// (kernel, width) per convolution branch; A2 keeps the middle kernel at
    /// triple width so the fusion input stays 3w.
    pub fn branch_specs(&self) -> Vec<(usize, usize)> {
        let (ks, km, kl) = self.kernel_sizes;
        let w = self.branch_width;
        if self.single_branch {
            vec![(km, 3 * w)]
        } else {
            vec![(ks, w), (km, w), (kl, w)]
        }
    }

    pub fn gate_hidden(&self) -> usize {
        (self.fused_width / self.gate_reduction).max(1)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::internal("tensor dims do not match data length"));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// 4 x k depthwise kernels.
    pub dw: Tensor,
    /// width x 4 pointwise projection.
    pub pw: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub branches: Vec<BranchParams>,
    /// C x 3w fusion projection.
    pub fusion: Tensor,
    /// hidden x C and C x hidden gate maps.
    pub gate_w1: Tensor,
    pub gate_w2: Tensor,
    /// C x C score map and C score vector of the pooling tokenizer.
    pub tok_w: Tensor,
    pub tok_v: Tensor,
    /// d x C query/key/value projections and C x d output projection.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// n_classes x C head and its bias.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

/// Canonical (name, shape) listing; single source of truth for
/// initialization, counting, and the checkpoint layout.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.fused_width;
    let d = cfg.attn_dim;
    let hidden = cfg.gate_hidden();
    let mut shapes = Vec::new();
    for (i, (k, wb)) in cfg.branch_specs().into_iter().enumerate() {
        shapes.push((format!("branch{i}.dw"), vec![4, k]));
        shapes.push((format!("branch{i}.pw"), vec![wb, 4]));
        for stat in ["bn_gamma", "bn_beta", "bn_mean", "bn_var"] {
            shapes.push((format!("branch{i}.{stat}"), vec![wb]));
        }
    }
    shapes.push(("fusion".into(), vec![c, 3 * cfg.branch_width]));
    shapes.push(("gate.w1".into(), vec![hidden, c]));
    shapes.push(("gate.w2".into(), vec![c, hidden]));
    shapes.push(("tok.w".into(), vec![c, c]));
    shapes.push(("tok.v".into(), vec![c]));
    shapes.push(("attn.wq".into(), vec![d, c]));
    shapes.push(("attn.wk".into(), vec![d, c]));
    shapes.push(("attn.wv".into(), vec![d, c]));
    shapes.push(("attn.wo".into(), vec![c, d]));
    shapes.push(("cls.w".into(), vec![cfg.n_classes, c]));
    shapes.push(("cls.b".into(), vec![cfg.n_classes]));
    shapes
}

/// Batch-norm running statistics are state, not learnable parameters.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with("bn_mean") || name.ends_with("bn_var"))
}

impl ModelParams {
    /// Builds the parameter set by asking `fill` for every canonical tensor.
    pub fn build(cfg: &ModelConfig, mut fill: impl FnMut(&str, &[usize]) -> Tensor) -> Self {
        let mut get = |name: String, dims: Vec<usize>| {
            let t = fill(&name, &dims);
            debug_assert_eq!(t.dims, dims, "{name}");
            t
        };
        let branches = cfg
            .branch_specs()
            .into_iter()
            .enumerate()
            .map(|(i, (k, wb))| BranchParams {
                dw: get(format!("branch{i}.dw"), vec![4, k]),
                pw: get(format!("branch{i}.pw"), vec![wb, 4]),
                bn_gamma: get(format!("branch{i}.bn_gamma"), vec![wb]),
                bn_beta: get(format!("branch{i}.bn_beta"), vec![wb]),
                bn_mean: get(format!("branch{i}.bn_mean"), vec![wb]),
                bn_var: get(format!("branch{i}.bn_var"), vec![wb]),
            })
            .collect();
        let c = cfg.fused_width;
        let d = cfg.attn_dim;
        let hidden = cfg.gate_hidden();
        ModelParams {
            branches,
            fusion: get("fusion".into(), vec![c, 3 * cfg.branch_width]),
            gate_w1: get("gate.w1".into(), vec![hidden, c]),
            gate_w2: get("gate.w2".into(), vec![c, hidden]),
            tok_w: get("tok.w".into(), vec![c, c]),
            tok_v: get("tok.v".into(), vec![c]),
            wq: get("attn.wq".into(), vec![d, c]),
            wk: get("attn.wk".into(), vec![d, c]),
            wv: get("attn.wv".into(), vec![d, c]),
            wo: get("attn.wo".into(), vec![c, d]),
            cls_w: get("cls.w".into(), vec![cfg.n_classes, c]),
            cls_b: get("cls.b".into(), vec![cfg.n_classes]),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams::build(cfg, |_, dims| Tensor::zeros(dims))
    }

    /// Named tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.dw"), &b.dw));
            out.push((format!("branch{i}.pw"), &b.pw));
            out.push((format!("branch{i}.bn_gamma"), &b.bn_gamma));
            out.push((format!("branch{i}.bn_beta"), &b.bn_beta));
            out.push((format!("branch{i}.bn_mean"), &b.bn_mean));
            out.push((format!("branch{i}.bn_var"), &b.bn_var));
        }
        out.push(("fusion".into(), &self.fusion));
        out.push(("gate.w1".into(), &self.gate_w1));
        out.push(("gate.w2".into(), &self.gate_w2));
        out.push(("tok.w".into(), &self.tok_w));
        out.push(("tok.v".into(), &self.tok_v));
        out.push(("attn.wq".into(), &self.wq));
        out.push(("attn.wk".into(), &self.wk));
        out.push(("attn.wv".into(), &self.wv));
        out.push(("attn.wo".into(), &self.wo));
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.push((format!("branch{i}.dw"), &mut b.dw));
            out.push((format!("branch{i}.pw"), &mut b.pw));
            out.push((format!("branch{i}.bn_gamma"), &mut b.bn_gamma));
            out.push((format!("branch{i}.bn_beta"), &mut b.bn_beta));
            out.push((format!("branch{i}.bn_mean"), &mut b.bn_mean));
            out.push((format!("branch{i}.bn_var"), &mut b.bn_var));
        }
        out.push(("fusion".into(), &mut self.fusion));
        out.push(("gate.w1".into(), &mut self.gate_w1));
        out.push(("gate.w2".into(), &mut self.gate_w2));
        out.push(("tok.w".into(), &mut self.tok_w));
        out.push(("tok.v".into(), &mut self.tok_v));
        out.push(("attn.wq".into(), &mut self.wq));
        out.push(("attn.wk".into(), &mut self.wk));
        out.push(("attn.wv".into(), &mut self.wv));
        out.push(("attn.wo".into(), &mut self.wo));
        out.push(("cls.w".into(), &mut self.cls_w));
        out.push(("cls.b".into(), &mut self.cls_b));
        out
    }
}

/// Learnable parameter total; pure function of the config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    tensor_shapes(cfg)
        .iter()
        .filter(|(name, _)| is_learnable(name))
        .map(|(_, dims)| dims.iter().product::<usize>())
        .sum()
}

/// Deterministic fan-in-scaled uniform initialization. Every value is
/// quantized to the f32 grid so a checkpoint round-trips bitwise.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelParams::build(cfg, |name, dims| {
        if name.ends_with("bn_gamma") || name.ends_with("bn_var") {
            return Tensor {
                dims: dims.to_vec(),
                data: vec![1.0; dims.iter().product()],
            };
        }
        if name.ends_with("bn_beta") || name.ends_with("bn_mean") || name == "cls.b" {
            return Tensor::zeros(dims);
        }
        // fan-in = trailing dimension (kernel taps or input width)
        let fan_in = *dims.last().unwrap() as f64;
        let bound = 1.0 / fan_in.sqrt();
        let data = (0..dims.iter().product())
            .map(|_| (rng.random_range(-bound..bound) as f32) as f64)
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }))
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax; -inf entries get exactly zero weight.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// y = W x for a row-major (out x in) matrix.
pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.dims[0], w.dims[1]);
    debug_assert_eq!(cols, x.len());
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        y[r] = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
    y
}

/// Per-channel 1-D convolution with same-length zero padding.
/// `x` is n_ch x t row-major; `kernel` is n_ch x k.
pub(crate) fn dw_conv(x: &[f64], n_ch: usize, t: usize, kernel: &Tensor) -> Vec<f64> {
    let k = kernel.dims[1];
    let half = k / 2;
    let mut out = vec![0.0; n_ch * t];
    for c in 0..n_ch {
        let row = &x[c * t..(c + 1) * t];
        let taps = &kernel.data[c * k..(c + 1) * k];
        let dst = &mut out[c * t..(c + 1) * t];
        for (tap_i, &tap) in taps.iter().enumerate() {
            if tap == 0.0 {
                continue;
            }
            // out[i] += tap * row[i + tap_i - half]
            let shift = tap_i as isize - half as isize;
            let (src_lo, dst_lo) = if shift >= 0 {
                (shift as usize, 0usize)
            } else {
                (0usize, (-shift) as usize)
            };
            let len = t.saturating_sub(src_lo.max(dst_lo));
            for i in 0..len {
                dst[dst_lo + i] += tap * row[src_lo + i];
            }
        }
    }
    out
}

/// Applies a (out x in) map at every time step: y[:, t] = W x[:, t].
pub(crate) fn map_time(w: &Tensor, x: &[f64], t: usize) -> Vec<f64> {
    let (rows, cols) = (w.dims[0], w.dims[1]);
    debug_assert_eq!(cols * t, x.len());
    let mut y = vec![0.0; rows * t];
    for r in 0..rows {
        let wrow = &w.data[r * cols..(r + 1) * cols];
        let dst = &mut y[r * t..(r + 1) * t];
        for (c, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let src = &x[c * t..(c + 1) * t];
            for i in 0..t {
                dst[i] += wv * src[i];
            }
        }
    }
    y
}

/// Splits a ternary 2 x T_b raster into four nonnegative polarity rows
/// [slow+, slow-, fast+, fast-]. With `dense_input` the rows may carry
/// arbitrary reals (A1) and the alphabet check is skipped.
pub fn polarity_expand(s: &[f64], t_b: usize, dense_input: bool) -> Result<Vec<f64>> {
    if s.len() != 2 * t_b {
        return Err(Error::internal("raster is not 2 x t_b"));
    }
    if !dense_input {
        for &v in s {
            if v != 0.0 && v != 1.0 && v != -1.0 {
                return Err(Error::format(format!("raster value {v} outside {{-1,0,+1}}")));
            }
        }
    }
    let mut e = vec![0.0; 4 * t_b];
    for scale in 0..2 {
        let src = &s[scale * t_b..(scale + 1) * t_b];
        for (i, &v) in src.iter().enumerate() {
            e[2 * scale * t_b + i] = v.max(0.0);
            e[(2 * scale + 1) * t_b + i] = (-v).max(0.0);
        }
    }
    Ok(e)
}

/// Per-branch batch-norm statistics recorded during a train-mode pass
/// (per-channel mean and population variance over the time axis).
#[derive(Debug, Clone)]
pub struct BnStats {
    pub per_branch: Vec<(Vec<f64>, Vec<f64>)>,
}

/// One convolution branch: GELU(BN(PW(DW(E)))). In train mode the batch
/// norm uses this epoch's own time-axis statistics (returned for running-
/// stat updates); in eval mode it uses the stored running statistics.
pub fn branch_forward(
    e: &[f64],
    branch: &BranchParams,
    t: usize,
    mode: Mode,
) -> (Vec<f64>, (Vec<f64>, Vec<f64>)) {
    let wb = branch.pw.dims[0];
    let x = dw_conv(e, 4, t, &branch.dw);
    let mut y = map_time(&branch.pw, &x, t);
    let mut means = vec![0.0; wb];
    let mut vars = vec![0.0; wb];
    for c in 0..wb {
        let row = &mut y[c * t..(c + 1) * t];
        let (mean, var) = match mode {
            Mode::Train => {
                let m = row.iter().sum::<f64>() / t as f64;
                let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / t as f64;
                (m, v)
            }
            Mode::Eval => (branch.bn_mean.data[c], branch.bn_var.data[c]),
        };
        means[c] = mean;
        vars[c] = var;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let (g, b) = (branch.bn_gamma.data[c], branch.bn_beta.data[c]);
        for v in row.iter_mut() {
            *v = gelu(g * (*v - mean) * inv + b);
        }
    }
    (y, (means, vars))
}

/// Full front end for one epoch: branches, fusion, channel gate.
/// Returns the gated C x T_b map and train-mode batch-norm statistics.
pub fn eamr_forward(
    e: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(Vec<f64>, Option<BnStats>)> {
    let t = cfg.t_b;
    if e.len() != 4 * t {
        return Err(Error::internal("polarity map is not 4 x t_b"));
    }
    if params.branches.len() != cfg.branch_specs().len() {
        return Err(Error::internal("branch count does not match config"));
    }
    let mut concat = Vec::with_capacity(3 * cfg.branch_width * t);
    let mut stats = Vec::new();
    for branch in &params.branches {
        let (y, st) = branch_forward(e, branch, t, mode);
        concat.extend_from_slice(&y);
        stats.push(st);
    }
    let h = map_time(&params.fusion, &concat, t);
    let c = cfg.fused_width;
    let g = gate_vector(&h, params, cfg);
    let mut out = h;
    for ch in 0..c {
        let gv = g[ch];
        for v in &mut out[ch * t..(ch + 1) * t] {
            *v *= gv;
        }
    }
    let stats = match mode {
        Mode::Train => Some(BnStats { per_branch: stats }),
        Mode::Eval => None,
    };
    Ok((out, stats))
}

/// Channel gate g = sigmoid(W2 gelu(W1 meanpool_t(H))), or all-ones under
/// the bypass switch.
pub fn gate_vector(h: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    let (c, t) = (cfg.fused_width, cfg.t_b);
    if cfg.gate_bypass {
        return vec![1.0; c];
    }
    let pool: Vec<f64> = (0..c)
        .map(|ch| h[ch * t..(ch + 1) * t].iter().sum::<f64>() / t as f64)
        .collect();
    let hidden: Vec<f64> = matvec(&params.gate_w1, &pool)
        .into_iter()
        .map(gelu)
        .collect();
    matvec(&params.gate_w2, &hidden)
        .into_iter()
        .map(sigmoid)
        .collect()
}

/// Folds a train-mode batch's averaged statistics into the running stats.
pub fn update_running_stats(params: &mut ModelParams, batch_stats: &[BnStats]) -> Result<()> {
    if batch_stats.is_empty() {
        return Ok(());
    }
    let n = batch_stats.len() as f64;
    for (bi, branch) in params.branches.iter_mut().enumerate() {
        let wb = branch.bn_mean.numel();
        for c in 0..wb {
            let mut mean = 0.0;
            let mut var = 0.0;
            for st in batch_stats {
                let (m, v) = &st.per_branch[bi];
                mean += m[c];
                var += v[c];
            }
            mean /= n;
            var /= n;
            branch.bn_mean.data[c] = (1.0 - BN_MOMENTUM) * branch.bn_mean.data[c] + BN_MOMENTUM * mean;
            branch.bn_var.data[c] = (1.0 - BN_MOMENTUM) * branch.bn_var.data[c] + BN_MOMENTUM * var;
        }
    }
    Ok(())
}

/// Additive attention pooling over time: u = sum_t softmax(v . tanh(W h_t)) h_t.
/// Returns the token and the pooling weights.
pub fn attention_pool(h: &[f64], w: &Tensor, v: &Tensor, t: usize) -> (Vec<f64>, Vec<f64>) {
    let c = v.numel();
    let mut scores = vec![0.0; t];
    for ti in 0..t {
        let col: Vec<f64> = (0..c).map(|ch| h[ch * t + ti]).collect();
        let proj = matvec(w, &col);
        scores[ti] = proj.iter().zip(&v.data).map(|(&p, &vv)| p.tanh() * vv).sum();
    }
    let weights = softmax(&scores);
    let mut u = vec![0.0; c];
    for ti in 0..t {
        let wt = weights[ti];
        for ch in 0..c {
            u[ch] += wt * h[ch * t + ti];
        }
    }
    (u, weights)
}

/// Collapses one epoch's C x T_b map to a C-vector token.
pub fn tokenize_epoch(h: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    let (c, t) = (cfg.fused_width, cfg.t_b);
    match cfg.pooling {
        Pooling::Attention => attention_pool(h, &params.tok_w, &params.tok_v, t).0,
        Pooling::Mean => (0..c)
            .map(|ch| h[ch * t..(ch + 1) * t].iter().sum::<f64>() / t as f64)
            .collect(),
    }
}

/// N x N additive attention mask: entry (i, j) is 0 when |i - j| <= L and
/// epoch j is valid, -inf otherwise. `positions` carries each row/column's
/// original epoch index so gaps count toward the distance. A row that would
/// end up with no visible entry keeps self-visibility.
pub fn build_attention_mask(positions: &[usize], l: usize, m: &[bool]) -> Vec<f64> {
    let n = positions.len();
    debug_assert_eq!(n, m.len());
    let mut mask = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        let mut any = false;
        for j in 0..n {
            let dist = positions[i].abs_diff(positions[j]);
            if dist <= l && m[j] {
                mask[i * n + j] = 0.0;
                any = true;
            }
        }
        if !any {
            mask[i * n + i] = 0.0;
        }
    }
    mask
}

/// Masked single-head scaled dot-product attention with a residual output:
/// z_i = u_i + Wo c_i. `tokens` is n x C row-major; `mask` is n x n.
pub fn ltam_forward(
    tokens: &[Vec<f64>],
    mask: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = tokens.len();
    if mask.len() != n * n {
        return Err(Error::internal("attention mask is not n x n"));
    }
    let d = cfg.attn_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let q: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wq, u)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wk, u)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wv, u)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let m = mask[i * n + j];
                if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    q[i].iter().zip(&k[j]).map(|(&a, &b)| a * b).sum::<f64>() * scale + m
                }
            })
            .collect();
        if logits.iter().all(|&l| l == f64::NEG_INFINITY) {
            return Err(Error::internal("fully masked attention row"));
        }
        let alpha = softmax(&logits);
        let mut ctx = vec![0.0; d];
        for (j, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (cv, &vv) in ctx.iter_mut().zip(&v[j]) {
                *cv += a * vv;
            }
        }
        let proj = matvec(&params.wo, &ctx);
        out.push(tokens[i].iter().zip(&proj).map(|(&a, &b)| a + b).collect());
    }
    Ok(out)
}

/// Leaky integrator state over the epoch sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ElifState {
    pub h: Vec<f64>,
    pub n: usize,
}

impl ElifState {
    pub fn new(c: usize) -> Self {
        ElifState { h: vec![0.0; c], n: 0 }
    }
}

/// One state update. A valid step leaks and integrates; an invalid step
/// resets the state, then integrates the current input fresh so the epoch
/// still yields a usable average. Returns the normalized state h / max(n,1).
pub fn elif_step(state: &mut ElifState, z: &[f64], valid: bool, lambda: f64) -> Vec<f64> {
    if valid {
        for (h, &zv) in state.h.iter_mut().zip(z) {
            *h = lambda * *h + zv;
        }
        state.n += 1;
    } else {
        state.h.clear();
        state.h.extend_from_slice(z);
        state.n = 1;
    }
    let n = state.n.max(1) as f64;
    state.h.iter().map(|&h| h / n).collect()
}

/// logits = W hbar + b, probs = softmax(logits).
pub fn classify(hbar: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let mut logits = matvec(&params.cls_w, hbar);
    for (l, &b) in logits.iter_mut().zip(&params.cls_b.data) {
        *l += b;
    }
    let probs = softmax(&logits);
    (logits, probs)
}

/// A context window of epoch rasters around one target epoch. Slots with
/// `mask[i] == false` are treated as absent (edge padding or discontinuity).
#[derive(Debug, Clone)]
pub struct WindowInput {
    /// Per slot: 2 x t_b raster, row-major.
    pub rasters: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    /// Index of the target epoch within the window.
    pub center: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    /// Post-update integrator state per processed slot, paired with the
    /// slot's window index; feeds the spike-rate diagnostic.
    pub h_seq: Vec<(usize, Vec<f64>)>,
    pub bn_stats: Option<Vec<BnStats>>,
}

/// End-to-end pass for one window: tokenize each epoch within radius L of
/// the target, attend across them under the validity mask, run the
/// integrator in temporal order (resetting across gaps), and classify the
/// target epoch's normalized state.
pub fn forward(
    win: &WindowInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if win.rasters.len() != win.mask.len() || win.center >= win.mask.len() {
        return Err(Error::parameter("window slots, mask, and center disagree"));
    }
    // Only slots within L of the target can influence it; the (possibly
    // invalid) target slot itself is always processed.
    let slots: Vec<usize> = (0..win.mask.len())
        .filter(|&i| {
            i.abs_diff(win.center) <= cfg.window_radius && (win.mask[i] || i == win.center)
        })
        .collect();
    let mut tokens = Vec::with_capacity(slots.len());
    let mut all_stats = Vec::new();
    for &i in &slots {
        let e = polarity_expand(&win.rasters[i], cfg.t_b, cfg.dense_input)?;
        let (h, stats) = eamr_forward(&e, params, cfg, mode)?;
        if let Some(s) = stats {
            all_stats.push(s);
        }
        tokens.push(tokenize_epoch(&h, params, cfg));
    }
    let slot_mask: Vec<bool> = slots.iter().map(|&i| win.mask[i]).collect();
    let mask = build_attention_mask(&slots, cfg.window_radius, &slot_mask);
    let z = ltam_forward(&tokens, &mask, params, cfg)?;

    let center_pos = slots
        .iter()
        .position(|&i| i == win.center)
        .ok_or_else(|| Error::internal("target slot missing from window"))?;
    let mut state = ElifState::new(cfg.fused_width);
    let mut h_seq = Vec::with_capacity(slots.len());
    let mut hbar_center = None;
    for (si, &i) in slots.iter().enumerate() {
        // a slot is a continuation only if it is valid and nothing was
        // skipped between it and the previously processed slot
        let valid = win.mask[i] && (si == 0 || slots[si - 1] + 1 == i);
        let hbar = elif_step(&mut state, &z[si], valid, cfg.lambda);
        h_seq.push((i, state.h.clone()));
        if i == win.center {
            hbar_center = Some(hbar);
        }
    }
    let features = if cfg.no_elif {
        z[center_pos].clone()
    } else {
        hbar_center.ok_or_else(|| Error::internal("target state never produced"))?
    };
    let (logits, probs) = classify(&features, params);
    let predicted = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(ForwardOutput {
        logits,
        probs,
        predicted,
        h_seq,
        bn_stats: if mode == Mode::Train { Some(all_stats) } else { None },
    })
}

/// Mean fraction of state entries at or above the firing threshold, over
/// the given state snapshots. Diagnostic only.
pub fn spike_stats(h_seq: &[Vec<f64>], theta: f64) -> Result<f64> {
    let total: usize = h_seq.iter().map(|h| h.len()).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("spike rate over zero valid epochs".into()));
    }
    let fired: usize = h_seq
        .iter()
        .flat_map(|h| h.iter())
        .filter(|&&v| v.abs() >= theta)
        .count();
    Ok(fired as f64 / total as f64)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes config and parameters to the checkpoint container.
pub fn encode_nckp(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(NCKP_MAGIC);
    out.extend_from_slice(&NCKP_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.kernel_sizes.0 as u32);
    put_u32(&mut out, cfg.kernel_sizes.1 as u32);
    put_u32(&mut out, cfg.kernel_sizes.2 as u32);
    put_u32(&mut out, cfg.branch_width as u32);
    put_u32(&mut out, cfg.fused_width as u32);
    put_u32(&mut out, cfg.gate_reduction as u32);
    put_u32(&mut out, cfg.attn_dim as u32);
    put_u32(&mut out, cfg.window_radius as u32);
    out.extend_from_slice(&cfg.lambda.to_le_bytes());
    out.extend_from_slice(&cfg.fire_threshold.to_le_bytes());
    put_u32(&mut out, cfg.n_classes as u32);
    put_u32(&mut out, cfg.t_b as u32);
    out.push(match cfg.pooling {
        Pooling::Attention => 0,
        Pooling::Mean => 1,
    });
    out.push(cfg.gate_bypass as u8);
    out.push(cfg.dense_input as u8);
    out.push(cfg.single_branch as u8);
    out.push(cfg.no_elif as u8);
    for (name, tensor) in params.named() {
        if !tensor.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in tensor {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            put_u32(&mut out, d as u32);
        }
        for &v in &tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated reading {what} at byte offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a checkpoint, validating layout and tensor shapes against the
/// embedded config.
pub fn decode_nckp(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != NCKP_MAGIC {
        return Err(Error::format("bad checkpoint magic, expected NCKP"));
    }
    let ver = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if ver != NCKP_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {ver}")));
    }
    let cfg = ModelConfig {
        kernel_sizes: (
            cur.u32("k_s")? as usize,
            cur.u32("k_m")? as usize,
            cur.u32("k_l")? as usize,
        ),
        branch_width: cur.u32("branch width")? as usize,
        fused_width: cur.u32("fused width")? as usize,
        gate_reduction: cur.u32("gate reduction")? as usize,
        attn_dim: cur.u32("attn dim")? as usize,
        window_radius: cur.u32("window radius")? as usize,
        lambda: cur.f64("lambda")?,
        fire_threshold: cur.f64("fire threshold")?,
        n_classes: cur.u32("n_classes")? as usize,
        t_b: cur.u32("t_b")? as usize,
        pooling: match cur.u8("pooling")? {
            0 => Pooling::Attention,
            1 => Pooling::Mean,
            v => return Err(Error::format(format!("unknown pooling code {v}"))),
        },
        gate_bypass: cur.u8("gate bypass")? != 0,
        dense_input: cur.u8("dense input")? != 0,
        single_branch: cur.u8("single branch")? != 0,
        no_elif: cur.u8("no elif")? != 0,
    };
    cfg.validate()?;
    let mut tensors = Vec::new();
    for (expect_name, expect_dims) in tensor_shapes(&cfg) {
        let name_len = u16::from_le_bytes(cur.take(2, "tensor name length")?.try_into().unwrap());
        let name = std::str::from_utf8(cur.take(name_len as usize, "tensor name")?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        if name != expect_name {
            return Err(Error::format(format!(
                "tensor {name} where {expect_name} was expected"
            )));
        }
        let rank = cur.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("tensor dim")? as usize);
        }
        if dims != expect_dims {
            return Err(Error::format(format!(
                "tensor {name} has shape {dims:?}, config implies {expect_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(4 * n, "tensor values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::format(format!("non-finite value in tensor {name}")));
        }
        tensors.push(Tensor { dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(format!(
            "trailing bytes in checkpoint at byte offset {}",
            cur.pos
        )));
    }
    let mut it = tensors.into_iter();
    let params = ModelParams::build(&cfg, |_, _| it.next().unwrap());
    Ok((params, cfg))
}

pub fn save_checkpoint(
    path: impl AsRef<std::path::Path>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<()> {
    std::fs::write(path, encode_nckp(params, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(ModelParams, ModelConfig)> {
    decode_nckp(&std::fs::read(path)?)
}
