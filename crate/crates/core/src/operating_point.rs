//! Reconstruction-fidelity metrics and the constrained sweep that selects the
//! encoder operating point.
//!
//! A candidate (k_slow, k_fast) pair is feasible when reconstruction SNR,
//! nMSE, and correlation all satisfy their thresholds; among feasible pairs
//! the one with minimum combined event density wins. nMSE is normalised by
//! the signal variance rather than its power so the three constraints stay
//! independent of each other.

use crate::encoder::{encode_ramsdm, event_density, reconstruct, EncoderConfig};
use crate::{Error, Result};

/// SNR value reported when the reconstruction error is exactly zero.
pub const SNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy)]
pub struct FidelityThresholds {
    pub tau_snr: f64,
    pub tau_nmse: f64,
    pub tau_corr: f64,
}

impl Default for FidelityThresholds {
    fn default() -> Self {
        FidelityThresholds {
            tau_snr: 8.0,
            tau_nmse: 0.16,
            tau_corr: 0.90,
        }
    }
}

impl FidelityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_nmse > 0.0 && self.tau_nmse <= 1.0) {
            return Err(Error::parameter("tau_nmse must lie in (0, 1]"));
        }
        if !(self.tau_corr > -1.0 && self.tau_corr <= 1.0) {
            return Err(Error::parameter("tau_corr must lie in (-1, 1]"));
        }
        if !self.tau_snr.is_finite() {
            return Err(Error::parameter("tau_snr must be finite"));
        }
        Ok(())
    }
}

/// Candidate grid for the sweep; only pairs with k_fast < k_slow are tried.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub k_values: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        // 0.6 to 2.4 in steps of 0.2
        SweepGrid {
            k_values: (0..10).map(|i| 0.6 + 0.2 * i as f64).collect(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() {
            return Err(Error::parameter("sweep grid is empty"));
        }
        if self.k_values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::parameter("grid values must be positive"));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parameter("grid values must be strictly ascending"));
        }
        Ok(())
    }
}

/// One evaluated candidate of the sweep.
#[derive(Debug, Clone, Copy)]
pub struct OperatingPoint {
    pub k_slow: f64,
    pub k_fast: f64,
    pub snr: f64,
    pub nmse: f64,
    pub corr: f64,
    pub rho: f64,
    pub rho_slow: f64,
    pub rho_fast: f64,
    pub feasible: bool,
}

/// Sweep outcome: the full candidate table plus the selected point, if any.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub table: Vec<OperatingPoint>,
    pub selected: Option<OperatingPoint>,
}

/// 10 log10( sum x^2 / sum (x - xh)^2 ), capped at [`SNR_CAP_DB`] for a zero
/// error.
pub fn snr(x: &[f64], xh: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != xh.len() {
        return Err(Error::parameter("snr needs equal nonzero lengths"));
    }
    let sig: f64 = x.iter().map(|&v| v * v).sum();
    if sig == 0.0 {
        return Err(Error::UndefinedMetric("snr of an all-zero signal".into()));
    }
    let err: f64 = x.iter().zip(xh).map(|(&a, &b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(SNR_CAP_DB))
}

/// sum (x - xh)^2 / sum (x - mean(x))^2.
pub fn nmse(x: &[f64], xh: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != xh.len() {
        return Err(Error::parameter("nmse needs equal nonzero lengths"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return Err(Error::UndefinedMetric("nmse of a constant signal".into()));
    }
    let err: f64 = x.iter().zip(xh).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(err / var)
}

pub fn pearson_corr(x: &[f64], xh: &[f64]) -> Result<f64> {
    if x.len() != xh.len() || x.len() < 2 {
        return Err(Error::parameter("correlation needs equal lengths >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = xh.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(xh) {
        let da = a - mx;
        let db = b - my;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// All three fidelity metrics from a single error-power computation.
pub fn fidelity(x: &[f64], xh: &[f64]) -> Result<(f64, f64, f64)> {
    if x.is_empty() || x.len() != xh.len() {
        return Err(Error::parameter("fidelity needs equal nonzero lengths"));
    }
    let err: f64 = x.iter().zip(xh).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let sig: f64 = x.iter().map(|&v| v * v).sum();
    if sig == 0.0 {
        return Err(Error::UndefinedMetric("snr of an all-zero signal".into()));
    }
    let snr_db = if err == 0.0 {
        SNR_CAP_DB
    } else {
        (10.0 * (sig / err).log10()).min(SNR_CAP_DB)
    };
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return Err(Error::UndefinedMetric("nmse of a constant signal".into()));
    }
    Ok((snr_db, err / var, pearson_corr(x, xh)?))
}

/// Conjunction of the three fidelity constraints, boundaries inclusive.
pub fn check_feasible(snr_db: f64, nmse_v: f64, corr_v: f64, thr: &FidelityThresholds) -> bool {
    snr_db >= thr.tau_snr && nmse_v <= thr.tau_nmse && corr_v >= thr.tau_corr
}

/// Evaluates every admissible (k_slow, k_fast) pair on the corpus and selects
/// the feasible pair with minimum mean combined density. Ties break toward
/// larger k_slow, then larger k_fast. The table is sorted by (k_slow, k_fast)
/// and always complete, feasible or not.
pub fn grid_search(
    signals: &[Vec<f64>],
    fs: f64,
    grid: &SweepGrid,
    thr: &FidelityThresholds,
    base: &EncoderConfig,
) -> Result<SweepResult> {
    grid.validate()?;
    thr.validate()?;
    if signals.is_empty() {
        return Err(Error::parameter("grid search needs at least one signal"));
    }
    let mut table = Vec::new();
    for &k_slow in &grid.k_values {
        for &k_fast in &grid.k_values {
            if k_fast >= k_slow {
                continue;
            }
            let cfg = EncoderConfig {
                k_slow,
                k_fast,
                ..base.clone()
            };
            let mut acc = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for x in signals {
                let stream = encode_ramsdm(x, fs, &cfg)?;
                let xh = reconstruct(&stream)?;
                let d = event_density(&stream)?;
                // A constant reconstruction (no events fired) has no defined
                // correlation; record the candidate as maximally unfaithful
                // rather than aborting the sweep.
                let (s, m, c) = match fidelity(x, &xh) {
                    Ok(t) => t,
                    Err(Error::UndefinedMetric(_)) => (snr(x, &xh)?, nmse(x, &xh)?, f64::NAN),
                    Err(e) => return Err(e),
                };
                acc.0 += s;
                acc.1 += m;
                acc.2 += c;
                acc.3 += d.combined;
                acc.4 += d.slow;
                acc.5 += d.fast;
            }
            let n = signals.len() as f64;
            let (snr_m, nmse_m, corr_m, rho, rho_slow, rho_fast) =
                (acc.0 / n, acc.1 / n, acc.2 / n, acc.3 / n, acc.4 / n, acc.5 / n);
            table.push(OperatingPoint {
                k_slow,
                k_fast,
                snr: snr_m,
                nmse: nmse_m,
                corr: corr_m,
                rho,
                rho_slow,
                rho_fast,
                feasible: check_feasible(snr_m, nmse_m, corr_m, thr),
            });
        }
    }
    if table.is_empty() {
        return Err(Error::parameter(
            "grid admits no pair with k_fast < k_slow",
        ));
    }
    table.sort_by(|a, b| {
        (a.k_slow, a.k_fast)
            .partial_cmp(&(b.k_slow, b.k_fast))
            .unwrap()
    });
    let selected = table
        .iter()
        .filter(|op| op.feasible)
        .copied()
        .min_by(|a, b| {
            (a.rho, -a.k_slow, -a.k_fast)
                .partial_cmp(&(b.rho, -b.k_slow, -b.k_fast))
                .unwrap()
        });
    Ok(SweepResult { table, selected })
}

/// Renders the sweep table as CSV.
pub fn sweep_table_csv(result: &SweepResult) -> String {
    let mut out =
        String::from("k_slow,k_fast,snr_db,nmse,corr,rho_combined,rho_slow,rho_fast,feasible\n");
    for op in &result.table {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            op.k_slow,
            op.k_fast,
            op.snr,
            op.nmse,
            op.corr,
            op.rho,
            op.rho_slow,
            op.rho_fast,
            op.feasible as u8
        ));
    }
    out
}
