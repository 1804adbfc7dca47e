//! Supervised training of the classifier: hand-derived reverse-mode
//! gradients for the full forward graph, AdamW with decoupled weight decay,
//! an early-stopping train loop, subject-independent cross-validation
//! splits, and evaluation metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::{
    self, build_attention_mask, dw_conv, gelu, gelu_prime, map_time, matvec, polarity_expand,
    sigmoid, softmax, BnStats, Mode, ModelConfig, ModelParams, Pooling, WindowInput,
    BN_EPS,
};
use crate::signal_io::N_STAGES;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional per-class loss weights; defaults to unweighted.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 8,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::parameter("lr must be positive, weight decay nonnegative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::parameter("batch size, epochs, and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::parameter("patience must not exceed max epochs"));
        }
        Ok(())
    }
}

/// One labeled classification sample: a context window and the stage code
/// of its center epoch.
#[derive(Debug, Clone)]
pub struct Sample {
    pub window: WindowInput,
    pub label: usize,
}

// --- traced forward -------------------------------------------------------

struct BranchTrace {
    x_dw: Vec<f64>,   // 4 x T
    inv: Vec<f64>,    // wb, 1/sqrt(var + eps)
    xnorm: Vec<f64>,  // wb x T
    act_in: Vec<f64>, // wb x T, gamma*xnorm + beta
}

struct SlotTrace {
    e: Vec<f64>, // 4 x T
    branches: Vec<BranchTrace>,
    concat: Vec<f64>, // 3w x T, post-GELU
    h: Vec<f64>,      // C x T, fusion output
    pool: Vec<f64>,
    g1pre: Vec<f64>,
    g1: Vec<f64>,
    gate: Vec<f64>,
    htilde: Vec<f64>, // C x T, gated
    tanh_p: Vec<f64>, // C x T, tanh of the score projection
    weights: Vec<f64>,
    bn: BnStats,
}

struct WindowTrace {
    slots: Vec<usize>,
    slot_traces: Vec<SlotTrace>,
    tokens: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    alpha: Vec<f64>, // n x n
    ctx: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    valid_flags: Vec<bool>,
    center_pos: usize,
    n_center: usize,
    probs: Vec<f64>,
}

fn traced_slot(e: Vec<f64>, params: &ModelParams, cfg: &ModelConfig) -> SlotTrace {
    let t = cfg.t_b;
    let mut concat = Vec::with_capacity(3 * cfg.branch_width * t);
    let mut branches = Vec::with_capacity(params.branches.len());
    let mut bn_means = Vec::new();
    for branch in &params.branches {
        let wb = branch.pw.dims[0];
        let x_dw = dw_conv(&e, 4, t, &branch.dw);
        let y = map_time(&branch.pw, &x_dw, t);
        let mut mean = vec![0.0; wb];
        let mut var = vec![0.0; wb];
        let mut inv = vec![0.0; wb];
        let mut xnorm = vec![0.0; wb * t];
        let mut act_in = vec![0.0; wb * t];
        for c in 0..wb {
            let row = &y[c * t..(c + 1) * t];
            let m = row.iter().sum::<f64>() / t as f64;
            let vv = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / t as f64;
            let iv = 1.0 / (vv + BN_EPS).sqrt();
            mean[c] = m;
            var[c] = vv;
            inv[c] = iv;
            let (g, b) = (branch.bn_gamma.data[c], branch.bn_beta.data[c]);
            for i in 0..t {
                let xn = (row[i] - m) * iv;
                xnorm[c * t + i] = xn;
                let a = g * xn + b;
                act_in[c * t + i] = a;
                concat.push(gelu(a));
            }
        }
        bn_means.push((mean, var));
        branches.push(BranchTrace {
            x_dw,
            inv,
            xnorm,
            act_in,
        });
    }
    let h = map_time(&params.fusion, &concat, t);
    let c = cfg.fused_width;
    let pool: Vec<f64> = (0..c)
        .map(|ch| h[ch * t..(ch + 1) * t].iter().sum::<f64>() / t as f64)
        .collect();
    let (g1pre, g1, gate) = if cfg.gate_bypass {
        (Vec::new(), Vec::new(), vec![1.0; c])
    } else {
        let g1pre = matvec(&params.gate_w1, &pool);
        let g1: Vec<f64> = g1pre.iter().map(|&v| gelu(v)).collect();
        let gate: Vec<f64> = matvec(&params.gate_w2, &g1)
            .into_iter()
            .map(sigmoid)
            .collect();
        (g1pre, g1, gate)
    };
    let mut htilde = h.clone();
    for ch in 0..c {
        let gv = gate[ch];
        for v in &mut htilde[ch * t..(ch + 1) * t] {
            *v *= gv;
        }
    }
    // tokenizer internals (attention pooling); mean pooling stores nothing
    let (tanh_p, weights) = match cfg.pooling {
        Pooling::Attention => {
            let mut tanh_p = vec![0.0; c * t];
            let mut scores = vec![0.0; t];
            for ti in 0..t {
                let col: Vec<f64> = (0..c).map(|ch| htilde[ch * t + ti]).collect();
                let proj = matvec(&params.tok_w, &col);
                let mut s = 0.0;
                for (r, &p) in proj.iter().enumerate() {
                    let th = p.tanh();
                    tanh_p[r * t + ti] = th;
                    s += th * params.tok_v.data[r];
                }
                scores[ti] = s;
            }
            (tanh_p, softmax(&scores))
        }
        Pooling::Mean => (Vec::new(), vec![1.0 / t as f64; t]),
    };
    SlotTrace {
        e,
        branches,
        concat,
        h,
        pool,
        g1pre,
        g1,
        gate,
        htilde,
        tanh_p,
        weights,
        bn: BnStats {
            per_branch: bn_means,
        },
    }
}

fn traced_window(win: &WindowInput, params: &ModelParams, cfg: &ModelConfig) -> Result<WindowTrace> {
    if win.rasters.len() != win.mask.len() || win.center >= win.mask.len() {
        return Err(Error::parameter("window slots, mask, and center disagree"));
    }
    let slots: Vec<usize> = (0..win.mask.len())
        .filter(|&i| {
            i.abs_diff(win.center) <= cfg.window_radius && (win.mask[i] || i == win.center)
        })
        .collect();
    let t = cfg.t_b;
    let c = cfg.fused_width;
    let mut slot_traces = Vec::with_capacity(slots.len());
    let mut tokens = Vec::with_capacity(slots.len());
    for &i in &slots {
        let e = polarity_expand(&win.rasters[i], t, cfg.dense_input)?;
        let tr = traced_slot(e, params, cfg);
        let mut u = vec![0.0; c];
        for ti in 0..t {
            let w = tr.weights[ti];
            for ch in 0..c {
                u[ch] += w * tr.htilde[ch * t + ti];
            }
        }
        tokens.push(u);
        slot_traces.push(tr);
    }
    let slot_mask: Vec<bool> = slots.iter().map(|&i| win.mask[i]).collect();
    let mask = build_attention_mask(&slots, cfg.window_radius, &slot_mask);
    let n = slots.len();
    let d = cfg.attn_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let q: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wq, u)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wk, u)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|u| matvec(&params.wv, u)).collect();
    let mut alpha = vec![0.0; n * n];
    let mut ctx = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
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
        let a = softmax(&logits);
        let mut ci = vec![0.0; d];
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            for (cv, &vv) in ci.iter_mut().zip(&v[j]) {
                *cv += aj * vv;
            }
        }
        alpha[i * n..(i + 1) * n].copy_from_slice(&a);
        let proj = matvec(&params.wo, &ci);
        z.push(
            tokens[i]
                .iter()
                .zip(&proj)
                .map(|(&a, &b)| a + b)
                .collect::<Vec<f64>>(),
        );
        ctx.push(ci);
    }
    let center_pos = slots
        .iter()
        .position(|&i| i == win.center)
        .ok_or_else(|| Error::internal("target slot missing from window"))?;
    let mut valid_flags = Vec::with_capacity(n);
    for (si, &i) in slots.iter().enumerate() {
        valid_flags.push(win.mask[i] && (si == 0 || slots[si - 1] + 1 == i));
    }
    // run the state recurrence up to the center to know its update count
    let mut h = vec![0.0; c];
    let mut count = 0usize;
    for si in 0..=center_pos {
        if valid_flags[si] {
            for (hv, &zv) in h.iter_mut().zip(&z[si]) {
                *hv = cfg.lambda * *hv + zv;
            }
            count += 1;
        } else {
            h.clone_from(&z[si]);
            count = 1;
        }
    }
    let features: Vec<f64> = if cfg.no_elif {
        z[center_pos].clone()
    } else {
        h.iter().map(|&v| v / count.max(1) as f64).collect()
    };
    let (_, probs) = network::classify(&features, params);
    Ok(WindowTrace {
        slots,
        slot_traces,
        tokens,
        q,
        k,
        v,
        alpha,
        ctx,
        z,
        valid_flags,
        center_pos,
        n_center: count,
        probs,
    })
}

// --- backward -------------------------------------------------------------

fn backward_slot(
    tr: &SlotTrace,
    mut du: Vec<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &mut ModelParams,
) {
    let t = cfg.t_b;
    let c = cfg.fused_width;
    // tokenizer
    let mut dht = vec![0.0; c * t];
    match cfg.pooling {
        Pooling::Attention => {
            let mut dweights = vec![0.0; t];
            for ti in 0..t {
                let mut s = 0.0;
                for ch in 0..c {
                    s += du[ch] * tr.htilde[ch * t + ti];
                    dht[ch * t + ti] += tr.weights[ti] * du[ch];
                }
                dweights[ti] = s;
            }
            let dot: f64 = tr
                .weights
                .iter()
                .zip(&dweights)
                .map(|(&w, &dw)| w * dw)
                .sum();
            let ds: Vec<f64> = tr
                .weights
                .iter()
                .zip(&dweights)
                .map(|(&w, &dw)| w * (dw - dot))
                .collect();
            // scores s_t = v . tanh(W h_t)
            let mut dp = vec![0.0; c * t];
            for r in 0..c {
                let vr = params.tok_v.data[r];
                let mut dv = 0.0;
                for ti in 0..t {
                    let th = tr.tanh_p[r * t + ti];
                    dv += ds[ti] * th;
                    dp[r * t + ti] = ds[ti] * vr * (1.0 - th * th);
                }
                grads.tok_v.data[r] += dv;
            }
            for r in 0..c {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ti in 0..t {
                        acc += dp[r * t + ti] * tr.htilde[ch * t + ti];
                    }
                    grads.tok_w.data[r * c + ch] += acc;
                }
            }
            for ch in 0..c {
                for ti in 0..t {
                    let mut acc = 0.0;
                    for r in 0..c {
                        acc += params.tok_w.data[r * c + ch] * dp[r * t + ti];
                    }
                    dht[ch * t + ti] += acc;
                }
            }
        }
        Pooling::Mean => {
            for ch in 0..c {
                let d = du[ch] / t as f64;
                for ti in 0..t {
                    dht[ch * t + ti] += d;
                }
            }
        }
    }
    du.clear();
    // gate: htilde = h * g (g broadcast over time)
    let mut dh = vec![0.0; c * t];
    for ch in 0..c {
        let g = tr.gate[ch];
        for ti in 0..t {
            dh[ch * t + ti] = dht[ch * t + ti] * g;
        }
    }
    if !cfg.gate_bypass {
        let dgate: Vec<f64> = (0..c)
            .map(|ch| {
                (0..t)
                    .map(|ti| dht[ch * t + ti] * tr.h[ch * t + ti])
                    .sum()
            })
            .collect();
        let dg2pre: Vec<f64> = dgate
            .iter()
            .zip(&tr.gate)
            .map(|(&d, &g)| d * g * (1.0 - g))
            .collect();
        let hidden = tr.g1.len();
        for r in 0..c {
            for j in 0..hidden {
                grads.gate_w2.data[r * hidden + j] += dg2pre[r] * tr.g1[j];
            }
        }
        let mut dg1 = vec![0.0; hidden];
        for j in 0..hidden {
            for r in 0..c {
                dg1[j] += params.gate_w2.data[r * hidden + j] * dg2pre[r];
            }
        }
        let dg1pre: Vec<f64> = dg1
            .iter()
            .zip(&tr.g1pre)
            .map(|(&d, &p)| d * gelu_prime(p))
            .collect();
        for j in 0..hidden {
            for ch in 0..c {
                grads.gate_w1.data[j * c + ch] += dg1pre[j] * tr.pool[ch];
            }
        }
        let mut dpool = vec![0.0; c];
        for ch in 0..c {
            for j in 0..hidden {
                dpool[ch] += params.gate_w1.data[j * c + ch] * dg1pre[j];
            }
        }
        for ch in 0..c {
            let d = dpool[ch] / t as f64;
            for ti in 0..t {
                dh[ch * t + ti] += d;
            }
        }
    }
    // fusion: h = F concat
    let cw = 3 * cfg.branch_width;
    for r in 0..c {
        for ch in 0..cw {
            let mut acc = 0.0;
            for ti in 0..t {
                acc += dh[r * t + ti] * tr.concat[ch * t + ti];
            }
            grads.fusion.data[r * cw + ch] += acc;
        }
    }
    let mut dconcat = vec![0.0; cw * t];
    for ch in 0..cw {
        for r in 0..c {
            let w = params.fusion.data[r * cw + ch];
            if w == 0.0 {
                continue;
            }
            let dst = &mut dconcat[ch * t..(ch + 1) * t];
            let src = &dh[r * t..(r + 1) * t];
            for ti in 0..t {
                dst[ti] += w * src[ti];
            }
        }
    }
    // branches
    let mut offset = 0usize;
    for (bi, branch) in params.branches.iter().enumerate() {
        let btr = &tr.branches[bi];
        let wb = branch.pw.dims[0];
        let gbr = &mut grads.branches[bi];
        let mut dy = vec![0.0; wb * t];
        for ch in 0..wb {
            let xnorm = &btr.xnorm[ch * t..(ch + 1) * t];
            let act_in = &btr.act_in[ch * t..(ch + 1) * t];
            let dout = &dconcat[(offset + ch) * t..(offset + ch + 1) * t];
            let gamma = branch.bn_gamma.data[ch];
            let inv = btr.inv[ch];
            // through GELU into the affine batch-norm output
            let da: Vec<f64> = dout
                .iter()
                .zip(act_in)
                .map(|(&d, &a)| d * gelu_prime(a))
                .collect();
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            let mut sum_dxn = 0.0;
            let mut sum_dxn_xn = 0.0;
            for i in 0..t {
                dgamma += da[i] * xnorm[i];
                dbeta += da[i];
                let dxn = da[i] * gamma;
                sum_dxn += dxn;
                sum_dxn_xn += dxn * xnorm[i];
            }
            gbr.bn_gamma.data[ch] += dgamma;
            gbr.bn_beta.data[ch] += dbeta;
            let m_dxn = sum_dxn / t as f64;
            let m_dxn_xn = sum_dxn_xn / t as f64;
            let dst = &mut dy[ch * t..(ch + 1) * t];
            for i in 0..t {
                let dxn = da[i] * gamma;
                dst[i] = inv * (dxn - m_dxn - xnorm[i] * m_dxn_xn);
            }
        }
        // pointwise: y = P x_dw
        for o in 0..wb {
            for ci in 0..4 {
                let mut acc = 0.0;
                for ti in 0..t {
                    acc += dy[o * t + ti] * btr.x_dw[ci * t + ti];
                }
                gbr.pw.data[o * 4 + ci] += acc;
            }
        }
        let mut dx = vec![0.0; 4 * t];
        for ci in 0..4 {
            for o in 0..wb {
                let w = branch.pw.data[o * 4 + ci];
                if w == 0.0 {
                    continue;
                }
                let dst = &mut dx[ci * t..(ci + 1) * t];
                let src = &dy[o * t..(o + 1) * t];
                for ti in 0..t {
                    dst[ti] += w * src[ti];
                }
            }
        }
        // depthwise kernels (input needs no gradient)
        let kk = branch.dw.dims[1];
        let half = kk / 2;
        for ci in 0..4 {
            let e_row = &tr.e[ci * t..(ci + 1) * t];
            let dx_row = &dx[ci * t..(ci + 1) * t];
            for tap in 0..kk {
                let shift = tap as isize - half as isize;
                let (src_lo, dst_lo) = if shift >= 0 {
                    (shift as usize, 0usize)
                } else {
                    (0usize, (-shift) as usize)
                };
                let len = t.saturating_sub(src_lo.max(dst_lo));
                let mut acc = 0.0;
                for i in 0..len {
                    acc += dx_row[dst_lo + i] * e_row[src_lo + i];
                }
                gbr.dw.data[ci * kk + tap] += acc;
            }
        }
        offset += wb;
    }
}

fn backward_window(
    tr: &WindowTrace,
    dlogits: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &mut ModelParams,
) {
    let c = cfg.fused_width;
    let n = tr.slots.len();
    let d = cfg.attn_dim;
    // classifier: logits = W features + b
    let features: Vec<f64> = if cfg.no_elif {
        tr.z[tr.center_pos].clone()
    } else {
        // recompute h at the center from the stored recurrence inputs
        let mut h = vec![0.0; c];
        for si in 0..=tr.center_pos {
            if tr.valid_flags[si] {
                for (hv, &zv) in h.iter_mut().zip(&tr.z[si]) {
                    *hv = cfg.lambda * *hv + zv;
                }
            } else {
                h.clone_from(&tr.z[si]);
            }
        }
        h.iter().map(|&v| v / tr.n_center.max(1) as f64).collect()
    };
    let mut dfeat = vec![0.0; c];
    for (r, &dl) in dlogits.iter().enumerate() {
        grads.cls_b.data[r] += dl;
        for ch in 0..c {
            grads.cls_w.data[r * c + ch] += dl * features[ch];
            dfeat[ch] += params.cls_w.data[r * c + ch] * dl;
        }
    }
    // state recurrence: only slots from the last reset through the center
    // carry gradient
    let mut dz = vec![vec![0.0; c]; n];
    if cfg.no_elif {
        dz[tr.center_pos].clone_from(&dfeat);
    } else {
        let scale = 1.0 / tr.n_center.max(1) as f64;
        let mut carry: Vec<f64> = dfeat.iter().map(|&v| v * scale).collect();
        let mut si = tr.center_pos as isize;
        loop {
            let s = si as usize;
            for (a, &b) in dz[s].iter_mut().zip(&carry) {
                *a += b;
            }
            if !tr.valid_flags[s] || si == 0 {
                break;
            }
            for v in &mut carry {
                *v *= cfg.lambda;
            }
            si -= 1;
        }
    }
    // attention: z_i = u_i + Wo ctx_i
    let scale = 1.0 / (d as f64).sqrt();
    let mut du = vec![vec![0.0; c]; n];
    let mut dq = vec![vec![0.0; d]; n];
    let mut dk = vec![vec![0.0; d]; n];
    let mut dv = vec![vec![0.0; d]; n];
    for i in 0..n {
        if dz[i].iter().all(|&v| v == 0.0) {
            continue;
        }
        for (a, &b) in du[i].iter_mut().zip(&dz[i]) {
            *a += b;
        }
        let mut dctx = vec![0.0; d];
        for r in 0..c {
            let dzr = dz[i][r];
            if dzr == 0.0 {
                continue;
            }
            for j in 0..d {
                grads.wo.data[r * d + j] += dzr * tr.ctx[i][j];
                dctx[j] += params.wo.data[r * d + j] * dzr;
            }
        }
        // ctx_i = sum_j alpha_ij v_j
        let arow = &tr.alpha[i * n..(i + 1) * n];
        let mut dalpha = vec![0.0; n];
        for j in 0..n {
            let a = arow[j];
            if a == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for e in 0..d {
                s += dctx[e] * tr.v[j][e];
                dv[j][e] += a * dctx[e];
            }
            dalpha[j] = s;
        }
        let dot: f64 = arow.iter().zip(&dalpha).map(|(&a, &g)| a * g).sum();
        for j in 0..n {
            let a = arow[j];
            if a == 0.0 {
                continue;
            }
            let dlogit = a * (dalpha[j] - dot);
            for e in 0..d {
                dq[i][e] += scale * dlogit * tr.k[j][e];
                dk[j][e] += scale * dlogit * tr.q[i][e];
            }
        }
    }
    for j in 0..n {
        for (w, g, dvec) in [
            (&params.wq, &mut grads.wq, &dq[j]),
            (&params.wk, &mut grads.wk, &dk[j]),
            (&params.wv, &mut grads.wv, &dv[j]),
        ] {
            if dvec.iter().all(|&v| v == 0.0) {
                continue;
            }
            for r in 0..d {
                let dr = dvec[r];
                if dr == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    g.data[r * c + ch] += dr * tr.tokens[j][ch];
                    du[j][ch] += w.data[r * c + ch] * dr;
                }
            }
        }
    }
    for (si, dui) in du.into_iter().enumerate() {
        if dui.iter().all(|&v| v == 0.0) {
            continue;
        }
        backward_slot(&tr.slot_traces[si], dui, params, cfg, grads);
    }
}

/// Mean (optionally class-weighted) cross-entropy over the batch plus the
/// gradient for every learnable tensor, by reverse accumulation through the
/// full graph. Also returns each sample's batch-norm statistics for
/// running-stat updates.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
) -> Result<(f64, ModelParams, Vec<BnStats>)> {
    loss_and_grad_weighted(params, cfg, batch, None)
}

pub fn loss_and_grad_weighted(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
    class_weights: Option<&[f64]>,
) -> Result<(f64, ModelParams, Vec<BnStats>)> {
    if batch.is_empty() {
        return Err(Error::parameter("empty minibatch"));
    }
    let mut grads = ModelParams::zeros(cfg);
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    let mut stats = Vec::new();
    let mut traces = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.label >= cfg.n_classes {
            return Err(Error::format(format!("label {} outside 0..{}", sample.label, cfg.n_classes)));
        }
        let tr = traced_window(&sample.window, params, cfg)?;
        let w = class_weights.map_or(1.0, |cw| cw[sample.label]);
        let p = tr.probs[sample.label].max(1e-300);
        total += -w * p.ln();
        weight_sum += w;
        for st in &tr.slot_traces {
            stats.push(st.bn.clone());
        }
        traces.push((tr, sample.label, w));
    }
    let loss = total / weight_sum;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    for (tr, label, w) in &traces {
        let mut dlogits = tr.probs.clone();
        dlogits[*label] -= 1.0;
        for v in &mut dlogits {
            *v *= w / weight_sum;
        }
        backward_window(tr, &dlogits, params, cfg, &mut grads);
    }
    Ok((loss, grads, stats))
}

/// Loss only (same graph as `loss_and_grad`), for finite-difference checks.
pub fn batch_loss(params: &ModelParams, cfg: &ModelConfig, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let tr = traced_window(&sample.window, params, cfg)?;
        total += -tr.probs[sample.label].max(1e-300).ln();
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference verification of the analytic gradients. For each
/// learnable tensor, up to `max_per_tensor` elements are sampled (seeded);
/// returns the per-tensor maximum relative error.
pub fn gradient_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let (_, grads, _) = loss_and_grad(params, cfg, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params
        .named()
        .iter()
        .filter(|(n, _)| network::is_learnable(n))
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = Vec::new();
    for name in names {
        let numel = params
            .named()
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .numel();
        let indices: Vec<usize> = if numel <= max_per_tensor {
            (0..numel).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.random_range(0..numel)).collect()
        };
        let mut worst = 0.0f64;
        for idx in indices {
            let mut perturbed = params.clone();
            set_param(&mut perturbed, &name, idx, get_param(params, &name, idx) + eps);
            let plus = batch_loss(&perturbed, cfg, batch)?;
            set_param(&mut perturbed, &name, idx, get_param(params, &name, idx) - eps);
            let minus = batch_loss(&perturbed, cfg, batch)?;
            let fd = (plus - minus) / (2.0 * eps);
            let analytic = get_param(&grads, &name, idx);
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((analytic - fd).abs() / denom);
        }
        report.push((name, worst));
    }
    Ok(report)
}

fn get_param(params: &ModelParams, name: &str, idx: usize) -> f64 {
    params
        .named()
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap()
        .1
        .data[idx]
}

fn set_param(params: &mut ModelParams, name: &str, idx: usize, value: f64) {
    params
        .named_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap()
        .1
        .data[idx] = value;
}

// --- optimizer -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            step: 0,
        }
    }
}

/// Decoupled-weight-decay Adam update over the learnable tensors.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let gnamed = grads.named();
    let mnamed = state.m.named_mut();
    let mut vnamed = state.v.named_mut();
    for (((name, tensor), (gname, gt)), (_, mt)) in params
        .named_mut()
        .into_iter()
        .zip(gnamed)
        .zip(mnamed)
    {
        if name != *gname {
            return Err(Error::internal("gradient tensors out of order"));
        }
        if tensor.dims != gt.dims {
            return Err(Error::internal(format!("shape mismatch for tensor {name}")));
        }
        if !network::is_learnable(&name) {
            continue;
        }
        let vt = &mut vnamed
            .iter_mut()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1;
        for i in 0..tensor.data.len() {
            let g = gt.data[i];
            mt.data[i] = ADAM_BETA1 * mt.data[i] + (1.0 - ADAM_BETA1) * g;
            vt.data[i] = ADAM_BETA2 * vt.data[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = mt.data[i] / bc1;
            let vhat = vt.data[i] / bc2;
            tensor.data[i] =
                tensor.data[i] * (1.0 - lr * weight_decay) - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// --- train loop -------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
}

/// Accuracy of the model over a sample set, eval mode.
pub fn accuracy(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::parameter("empty evaluation set"));
    }
    let mut hits = 0usize;
    for s in samples {
        let out = network::forward(&s.window, params, cfg, Mode::Eval)?;
        if out.predicted == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Seeded minibatch training with early stopping on validation accuracy;
/// returns the checkpoint with the best recorded validation accuracy.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainResult> {
    tc.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::parameter("train and validation sets must be nonempty"));
    }
    let mut params = network::init_params(cfg, tc.seed)?;
    let mut adam = AdamState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_cafe);
    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads, stats) = loss_and_grad_weighted(
                &params,
                cfg,
                &batch,
                tc.class_weights.as_deref(),
            )?;
            adamw_step(&mut params, &grads, &mut adam, tc.lr, tc.weight_decay)?;
            network::update_running_stats(&mut params, &stats)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val_accuracy = accuracy(&params, cfg, val_set)?;
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_params = params.clone();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
        }
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_accuracy,
            best_so_far: best_acc,
        });
        if stall >= tc.patience {
            break;
        }
    }
    Ok(TrainResult {
        params: best_params,
        history,
        best_epoch,
    })
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,best_so_far\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_accuracy, row.best_so_far
        ));
    }
    out
}

// --- cross-validation --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Fold {
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Subject-level k-fold split: seeded shuffle, round-robin test assignment,
/// then ceil(val_fraction x cohort) of each fold's remaining subjects held
/// out for validation.
pub fn cv_split(
    subjects: &[String],
    n_folds: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<CvPlan> {
    if n_folds == 0 || subjects.len() < n_folds {
        return Err(Error::parameter("need at least as many subjects as folds"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::parameter("validation fraction must lie in [0, 1)"));
    }
    let mut sorted = subjects.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != subjects.len() {
        return Err(Error::parameter("duplicate subject ids"));
    }
    let mut shuffled = subjects.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let test: Vec<String> = shuffled
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n_folds == f)
            .map(|(_, s)| s.clone())
            .collect();
        let cohort: Vec<String> = shuffled
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n_folds != f)
            .map(|(_, s)| s.clone())
            .collect();
        let n_val = ((val_fraction * cohort.len() as f64).ceil() as usize).min(cohort.len());
        if n_val >= cohort.len() {
            return Err(Error::parameter("validation split leaves no training subjects"));
        }
        folds.push(Fold {
            test,
            val: cohort[..n_val].to_vec(),
            train: cohort[n_val..].to_vec(),
        });
    }
    Ok(CvPlan { folds, seed })
}

// --- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// rows = true stage, columns = predicted stage
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// None when chance agreement is 1 (kappa undefined).
    pub kappa: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

/// Confusion matrix and the derived agreement metrics; 0/0 ratios are 0.
pub fn evaluate(predictions: &[usize], labels: &[usize]) -> Result<EvalReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::parameter("predictions and labels must have equal nonzero length"));
    }
    let k = N_STAGES;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::format(format!("stage code outside 0..{k}")));
        }
        confusion[l][p] += 1;
    }
    let n = predictions.len() as f64;
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / n;
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let mut per_class = Vec::with_capacity(k);
    for cls in 0..k {
        let tp = confusion[cls][cls] as f64;
        let pred: f64 = (0..k).map(|r| confusion[r][cls] as f64).sum();
        let truth: f64 = confusion[cls].iter().map(|&v| v as f64).sum();
        let precision = ratio(tp, pred);
        let recall = ratio(tp, truth);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64;
    let p_e: f64 = (0..k)
        .map(|cls| {
            let row: f64 = confusion[cls].iter().map(|&v| v as f64).sum();
            let col: f64 = (0..k).map(|r| confusion[r][cls] as f64).sum();
            (row / n) * (col / n)
        })
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        None
    } else {
        Some((accuracy - p_e) / (1.0 - p_e))
    };
    Ok(EvalReport {
        confusion,
        accuracy,
        macro_f1,
        kappa,
        per_class,
    })
}

pub fn confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("true\\pred,W,N1,N2,N3,REM\n");
    let names = ["W", "N1", "N2", "N3", "REM"];
    for (i, row) in report.confusion.iter().enumerate() {
        out.push_str(names[i]);
        for &v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn per_class_csv(report: &EvalReport) -> String {
    let mut out = String::from("stage,precision,recall,f1\n");
    let names = ["W", "N1", "N2", "N3", "REM"];
    for (name, m) in names.iter().zip(&report.per_class) {
        out.push_str(&format!("{},{},{},{}\n", name, m.precision, m.recall, m.f1));
    }
    out.push_str(&format!(
        "overall,accuracy={},macro_f1={},kappa={}\n",
        report.accuracy,
        report.macro_f1,
        report.kappa.map_or("NA".to_string(), |k| k.to_string())
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig {
            branch_width: 2,
            fused_width: 6,
            attn_dim: 6,
            gate_reduction: 2,
            window_radius: 1,
            t_b: 8,
            ..ModelConfig::desk()
        }
    }

    fn sample(seed: u64, cfg: &ModelConfig, label: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rasters: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..2 * cfg.t_b)
                    .map(|_| [0.0, 0.0, 1.0, -1.0][rng.random_range(0..4)])
                    .collect()
            })
            .collect();
        Sample {
            window: WindowInput {
                rasters,
                mask: vec![true; 3],
                center: 1,
            },
            label,
        }
    }

    #[test]
    fn uniform_loss_is_ln5() {
        let cfg = tiny();
        let params = ModelParams::zeros(&cfg);
        let batch = vec![sample(1, &cfg, 2)];
        let loss = batch_loss(&params, &cfg, &batch).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let params = init_params(&cfg, 42).unwrap();
        let batch = vec![sample(1, &cfg, 0), sample(2, &cfg, 3)];
        let report = gradient_check(&params, &cfg, &batch, 1e-5, 16, 7).unwrap();
        for (name, err) in report {
            assert!(err < 1e-4, "tensor {name} rel err {err}");
        }
    }

    #[test]
    fn gradients_match_fd_with_gaps_and_ablations() {
        let mut cfg = tiny();
        cfg.window_radius = 2;
        let params = init_params(&cfg, 43).unwrap();
        let mut s = sample(9, &cfg, 1);
        s.window.rasters.push(s.window.rasters[0].clone());
        s.window.rasters.push(s.window.rasters[1].clone());
        s.window.mask = vec![true, false, true, true, true];
        s.window.center = 2;
        let batch = vec![s];
        for (nelif, mean_pool) in [(false, false), (true, false), (false, true)] {
            let mut c = cfg.clone();
            c.no_elif = nelif;
            if mean_pool {
                c.pooling = Pooling::Mean;
            }
            let report = gradient_check(&params, &c, &batch, 1e-5, 8, 11).unwrap();
            for (name, err) in report {
                assert!(err < 1e-4, "tensor {name} rel err {err} (no_elif={nelif}, mean={mean_pool})");
            }
        }
    }

    #[test]
    fn batch_duplication_and_permutation_invariance() {
        let cfg = tiny();
        let params = init_params(&cfg, 5).unwrap();
        let a = sample(1, &cfg, 0);
        let b = sample(2, &cfg, 4);
        let (l1, g1, _) = loss_and_grad(&params, &cfg, &[a.clone(), b.clone()]).unwrap();
        let (l2, g2, _) = loss_and_grad(&params, &cfg, &[b.clone(), a.clone()]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((n1, t1), (_, t2)) in g1.named().iter().zip(g2.named().iter()) {
            for (x, y) in t1.data.iter().zip(&t2.data) {
                assert!((x - y).abs() < 1e-12, "{n1}");
            }
        }
        let (l3, g3, _) = loss_and_grad(&params, &cfg, &[a.clone(), b.clone(), a, b]).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for ((n1, t1), (_, t3)) in g1.named().iter().zip(g3.named().iter()) {
            for (x, y) in t1.data.iter().zip(&t3.data) {
                assert!((x - y).abs() < 1e-11, "{n1}");
            }
        }
    }

    #[test]
    fn adamw_cases() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 1).unwrap();
        let reference = params.clone();
        let zero = ModelParams::zeros(&cfg);
        let mut adam = AdamState::new(&cfg);
        // zero gradient, zero decay: fixed point
        adamw_step(&mut params, &zero, &mut adam, 1e-3, 0.0).unwrap();
        assert_eq!(params, reference);
        // zero gradient with decay: pure multiplicative shrink
        let mut adam = AdamState::new(&cfg);
        adamw_step(&mut params, &zero, &mut adam, 1e-3, 1e-4).unwrap();
        for ((name, t), (_, r)) in params.named().iter().zip(reference.named().iter()) {
            if !network::is_learnable(name) {
                continue;
            }
            for (a, b) in t.data.iter().zip(&r.data) {
                assert!((a - b * (1.0 - 1e-7)).abs() < 1e-18, "{name}");
            }
        }
        // constant unit gradient, first step is about -lr
        let mut params = reference.clone();
        let mut ones = ModelParams::zeros(&cfg);
        for (_, t) in ones.named_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut adam = AdamState::new(&cfg);
        adamw_step(&mut params, &ones, &mut adam, 1e-3, 0.0).unwrap();
        let before = reference.cls_w.data[0];
        let after = params.cls_w.data[0];
        assert!((after - (before - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn train_stops_and_is_deterministic() {
        let mut cfg = tiny();
        cfg.t_b = 4;
        let train_set: Vec<Sample> = (0..8).map(|i| sample(i, &cfg, (i % 5) as usize)).collect();
        let val_set: Vec<Sample> = (100..104).map(|i| sample(i, &cfg, (i % 5) as usize)).collect();
        let tc = TrainConfig {
            max_epochs: 6,
            patience: 2,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let a = train(&train_set, &val_set, &cfg, &tc).unwrap();
        let b = train(&train_set, &val_set, &cfg, &tc).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert!(a.history.len() <= 6);
        // returned checkpoint attains the best recorded validation accuracy
        let best = a
            .history
            .iter()
            .map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let got = accuracy(&a.params, &cfg, &val_set).unwrap();
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn cv_split_soundness() {
        let subjects: Vec<String> = (0..78).map(|i| format!("S{i:03}")).collect();
        let plan = cv_split(&subjects, 5, 0.15, 9).unwrap();
        let plan2 = cv_split(&subjects, 5, 0.15, 9).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (f, fold) in plan.folds.iter().enumerate() {
            assert!(matches!(fold.test.len(), 15 | 16));
            for s in &fold.test {
                assert!(seen.insert(s.clone()), "{s} tested twice");
                assert!(!fold.train.contains(s) && !fold.val.contains(s));
            }
            for s in &fold.val {
                assert!(!fold.train.contains(s));
            }
            let cohort = fold.train.len() + fold.val.len();
            assert_eq!(cohort + fold.test.len(), 78);
            assert_eq!(fold.val.len(), (0.15 * cohort as f64).ceil() as usize);
            assert_eq!(plan2.folds[f].test, fold.test);
        }
        assert_eq!(seen.len(), 78);

        let five: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let plan = cv_split(&five, 5, 0.15, 0).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 1));
        assert!(cv_split(&five[..4], 5, 0.15, 0).is_err());
    }

    #[test]
    fn evaluate_hand_cases() {
        // perfect agreement
        let labels = vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        let rep = evaluate(&labels, &labels).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.macro_f1, 1.0);
        assert_eq!(rep.kappa, Some(1.0));

        // two-class confusion [[2,0],[1,1]] embedded in 5 classes
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 1];
        let rep = evaluate(&preds, &labels).unwrap();
        assert!((rep.accuracy - 0.75).abs() < 1e-12);
        assert_eq!(rep.kappa, Some(0.5));
        assert!((rep.per_class[0].f1 - 0.8).abs() < 1e-12);
        assert!((rep.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);

        // constant predictor on balanced data
        let labels: Vec<usize> = (0..25).map(|i| i % 5).collect();
        let preds = vec![2usize; 25];
        let rep = evaluate(&preds, &labels).unwrap();
        assert!((rep.accuracy - 0.2).abs() < 1e-12);
        assert!(rep.kappa.unwrap().abs() < 1e-12);

        assert!(evaluate(&[9], &[0]).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn eval_csv_round_trip() {
        let labels = vec![0, 1, 2, 3, 4, 0];
        let preds = vec![0, 1, 2, 3, 4, 1];
        let rep = evaluate(&preds, &labels).unwrap();
        let csv = confusion_csv(&rep);
        let mut total = 0usize;
        for line in csv.lines().skip(1) {
            total += line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<usize>().unwrap())
                .sum::<usize>();
        }
        assert_eq!(total, 6);
        assert!(per_class_csv(&rep).contains("overall,accuracy="));
    }
}
