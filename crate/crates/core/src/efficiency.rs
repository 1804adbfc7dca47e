//! Analytic FLOPs accounting per network stage, sparsity-adjusted effective
//! operation counts, input event density measurement, and a wall-clock
//! latency micro-benchmark.
//!
//! Conventions (fixed so reports are comparable across configs): one
//! multiply-accumulate = 2 FLOPs; one elementwise nonlinearity, batch-norm
//! step, or softmax entry = 4 FLOPs. Counts cover one full-window forward
//! pass with every slot valid.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::{self, Mode, ModelConfig, ModelParams, Pooling, WindowInput};
use crate::{Error, Result};

/// One counted stage; sparse stages scale with input event density.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub flops: f64,
    pub sparse: bool,
}

#[derive(Debug, Clone)]
pub struct OpsBreakdown {
    pub stages: Vec<Stage>,
    pub params: usize,
}

impl OpsBreakdown {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.flops).sum()
    }
    pub fn sparse_total(&self) -> f64 {
        self.stages.iter().filter(|s| s.sparse).map(|s| s.flops).sum()
    }
    pub fn dense_total(&self) -> f64 {
        self.stages.iter().filter(|s| !s.sparse).map(|s| s.flops).sum()
    }
    pub fn stage(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.flops)
    }
    /// Reclassifies one stage between the sparse and dense sets.
    pub fn set_sparse(&mut self, name: &str, sparse: bool) -> Result<()> {
        self.stages
            .iter_mut()
            .find(|s| s.name == name)
            .map(|s| s.sparse = sparse)
            .ok_or_else(|| Error::parameter(format!("unknown stage {name}")))
    }
}

/// Depthwise 1-D convolution cost: 2 * T * C_in * k.
pub fn dw_flops(t: usize, c_in: usize, k: usize) -> f64 {
    2.0 * (t * c_in * k) as f64
}

/// Dense map cost: 2 * fan_in * fan_out.
pub fn linear_flops(fan_in: usize, fan_out: usize) -> f64 {
    2.0 * (fan_in * fan_out) as f64
}

const ELEM: f64 = 4.0;

/// Analytic per-stage counts for one window forward (2L+1 slots, all
/// valid). Data-independent; sparsity enters later through `effective_ops`.
pub fn count_flops(cfg: &ModelConfig) -> Result<OpsBreakdown> {
    cfg.validate()?;
    let t = cfg.t_b;
    let c = cfg.fused_width;
    let d = cfg.attn_dim;
    let n = 2 * cfg.window_radius + 1;
    let nf = n as f64;

    let mut branches = 0.0;
    for (k, wb) in cfg.branch_specs() {
        branches += dw_flops(t, 4, k); // depthwise
        branches += linear_flops(4, wb) * t as f64; // pointwise
        branches += 2.0 * ELEM * (wb * t) as f64; // batch norm + GELU
    }
    let fusion = linear_flops(3 * cfg.branch_width, c) * t as f64;
    let gate = if cfg.gate_bypass {
        0.0
    } else {
        let hidden = cfg.gate_hidden();
        2.0 * (c * t) as f64 // mean pool + broadcast scaling
            + linear_flops(c, hidden)
            + ELEM * hidden as f64
            + linear_flops(hidden, c)
            + ELEM * c as f64
    };
    let tokenizer = match cfg.pooling {
        Pooling::Attention => {
            (linear_flops(c, c) + ELEM * c as f64 + 2.0 * c as f64) * t as f64 // scores
                + ELEM * t as f64 // softmax
                + 2.0 * (c * t) as f64 // weighted sum
        }
        Pooling::Mean => (c * t) as f64,
    };

    // attention over the all-valid band: row i sees min(n-1, i+L) - max(0, i-L) + 1
    let mut visible_total = 0usize;
    for i in 0..n {
        let lo = i.saturating_sub(cfg.window_radius);
        let hi = (i + cfg.window_radius).min(n - 1);
        visible_total += hi - lo + 1;
    }
    let ltam = nf * (3.0 * linear_flops(c, d) + linear_flops(d, c)) // q/k/v/o projections
        + (2 * d * visible_total) as f64 // scores
        + (2 * d * visible_total) as f64 // aggregation
        + ELEM * visible_total as f64; // softmax
    let elif = if cfg.no_elif { 0.0 } else { nf * 2.0 * c as f64 };
    let classifier = linear_flops(c, cfg.n_classes) + ELEM * cfg.n_classes as f64;

    Ok(OpsBreakdown {
        stages: vec![
            Stage { name: "eamr_branches".into(), flops: nf * branches, sparse: true },
            Stage { name: "fusion".into(), flops: nf * fusion, sparse: true },
            Stage { name: "gate".into(), flops: nf * gate, sparse: true },
            Stage { name: "tokenizer".into(), flops: nf * tokenizer, sparse: true },
            Stage { name: "ltam".into(), flops: ltam, sparse: false },
            Stage { name: "elif".into(), flops: elif, sparse: false },
            Stage { name: "classifier".into(), flops: classifier, sparse: false },
        ],
        params: network::param_count(cfg),
    })
}

/// Effective OPs: sparse-set FLOPs scaled by input event density plus the
/// dense-set FLOPs unchanged.
pub fn effective_ops(breakdown: &OpsBreakdown, insd: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&insd) {
        return Err(Error::parameter(format!("insd {insd} outside [0, 1]")));
    }
    Ok(breakdown.sparse_total() * insd + breakdown.dense_total())
}

/// Mean fraction of nonzero raster entries over the valid epochs of a
/// window.
pub fn measure_insd(rasters: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    if rasters.len() != mask.len() {
        return Err(Error::parameter("rasters and mask lengths differ"));
    }
    let mut fractions = Vec::new();
    for (raster, &valid) in rasters.iter().zip(mask) {
        if !valid {
            continue;
        }
        if raster.is_empty() {
            return Err(Error::parameter("empty raster"));
        }
        let nz = raster.iter().filter(|&&v| v != 0.0).count();
        fractions.push(nz as f64 / raster.len() as f64);
    }
    if fractions.is_empty() {
        return Err(Error::UndefinedMetric("insd over zero valid epochs".into()));
    }
    Ok(fractions.iter().sum::<f64>() / fractions.len() as f64)
}

/// Wall-clock forward latency in eval mode on fixed seeded inputs.
/// Returns (median, p90) in milliseconds. Not comparable across machines.
pub fn bench_latency(
    params: &ModelParams,
    cfg: &ModelConfig,
    n_samples: usize,
    warmup: usize,
) -> Result<(f64, f64)> {
    if n_samples < 10 {
        return Err(Error::parameter("latency benchmark needs >= 10 samples"));
    }
    if warmup == 0 {
        return Err(Error::parameter("latency benchmark needs >= 1 warmup run"));
    }
    let n = 2 * cfg.window_radius + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let win = WindowInput {
        rasters: (0..n)
            .map(|_| {
                (0..2 * cfg.t_b)
                    .map(|_| {
                        if cfg.dense_input {
                            rng.random_range(-1.0..1.0)
                        } else {
                            [0.0, 0.0, 0.0, 1.0, -1.0][rng.random_range(0..5)]
                        }
                    })
                    .collect()
            })
            .collect(),
        mask: vec![true; n],
        center: n / 2,
    };
    for _ in 0..warmup {
        network::forward(&win, params, cfg, Mode::Eval)?;
    }
    let mut times_ms = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let start = Instant::now();
        network::forward(&win, params, cfg, Mode::Eval)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| times_ms[((times_ms.len() - 1) as f64 * q).round() as usize];
    Ok((pick(0.5), pick(0.9)))
}

/// One row of the efficiency report.
#[derive(Debug, Clone)]
pub struct OpsReportRow {
    pub profile: String,
    pub params: usize,
    pub flops_total: f64,
    pub flops_sparse: f64,
    pub flops_dense: f64,
    pub insd: f64,
    pub effective_ops: f64,
    /// None renders as `NA` (state module absent).
    pub spike_rate: Option<f64>,
    /// None renders as `NA` (benchmark skipped for reproducible reports).
    pub latency_ms_median: Option<f64>,
    pub latency_ms_p90: Option<f64>,
}

/// Assembles the report row from the breakdown and measured quantities.
pub fn ops_report_row(
    profile: &str,
    breakdown: &OpsBreakdown,
    insd: f64,
    spike_rate: Option<f64>,
    latency: Option<(f64, f64)>,
) -> Result<OpsReportRow> {
    Ok(OpsReportRow {
        profile: profile.to_string(),
        params: breakdown.params,
        flops_total: breakdown.total(),
        flops_sparse: breakdown.sparse_total(),
        flops_dense: breakdown.dense_total(),
        insd,
        effective_ops: effective_ops(breakdown, insd)?,
        spike_rate,
        latency_ms_median: latency.map(|l| l.0),
        latency_ms_p90: latency.map(|l| l.1),
    })
}

pub const OPS_CSV_HEADER: &str =
    "profile,params,flops_total,flops_sparse,flops_dense,insd,effective_ops,spike_rate,latency_ms_median,latency_ms_p90";

pub fn ops_report_csv(rows: &[OpsReportRow]) -> String {
    let mut out = String::from(OPS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.profile,
            r.params,
            r.flops_total,
            r.flops_sparse,
            r.flops_dense,
            r.insd,
            r.effective_ops,
            r.spike_rate.map_or("NA".to_string(), |v| v.to_string()),
            r.latency_ms_median.map_or("NA".to_string(), |v| v.to_string()),
            r.latency_ms_p90.map_or("NA".to_string(), |v| v.to_string())
        ));
    }
    out
}
