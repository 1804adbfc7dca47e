//! Filter design and rate conversion primitives.
//!
//! Provides the zero-phase Butterworth band-pass used for preprocessing and a
//! Kaiser-windowed polyphase resampler. Both are deliberately plain
//! implementations: biquad cascades in direct form II transposed, and a
//! per-phase DC-normalised sinc interpolator.

use num_complex::Complex64;

use crate::{Error, Result};

/// Second-order IIR section, direct form II transposed.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn filter_inplace(&self, x: &mut [f64]) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b0 * xin + s1;
            s1 = self.b1 * xin - self.a1 * y + s2;
            s2 = self.b2 * xin - self.a2 * y;
            *v = y;
        }
    }

    /// Frequency response at normalised angular frequency `w` (rad/sample).
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = Complex64::from_polar(1.0, -2.0 * w);
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }
}

/// Cascade of biquads representing one designed filter.
#[derive(Debug, Clone)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Single-pass filtering (causal, zero initial state).
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.filter_inplace(&mut y);
        }
        y
    }

    /// Magnitude response at frequency `f` Hz for sampling rate `fs`.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        self.sections
            .iter()
            .map(|s| s.response(w))
            .product::<Complex64>()
            .norm()
    }

    /// Zero-phase filtering: odd-reflection padding of `pad` samples at each
    /// end, then forward and reverse passes. Pads are trimmed from the result.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let pad = pad.min(n.saturating_sub(1));
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let mut y = self.filter(&ext);
        y.reverse();
        let mut y = self.filter(&y);
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Designs a digital Butterworth band-pass via the analog prototype,
/// low-pass-to-band-pass transform, and bilinear mapping.
///
/// `order` is the prototype order; the band-pass has `2 * order` poles
/// arranged as `order` biquad sections. Unity gain at the (prewarped)
/// geometric centre of the band.
pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<SosFilter> {
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::parameter(format!(
            "band-pass requires 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}"
        )));
    }
    if order == 0 {
        return Err(Error::parameter("filter order must be >= 1".to_string()));
    }
    let c = 2.0 * fs; // bilinear constant
    let w1 = c * (std::f64::consts::PI * lo / fs).tan();
    let w2 = c * (std::f64::consts::PI * hi / fs).tan();
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;

    // Prototype poles on the unit circle, left half-plane. Conjugates are
    // implied; only poles with non-negative imaginary part are enumerated.
    let mut spoles: Vec<Complex64> = Vec::new();
    for k in 0..order {
        let theta = std::f64::consts::PI * (2.0 * (k as f64 + 1.0) + order as f64 - 1.0)
            / (2.0 * order as f64);
        let p = Complex64::from_polar(1.0, theta);
        // Band-pass transform: each prototype pole yields two s-plane poles,
        // roots of s^2 - p*bw*s + w0^2 = 0.
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
        spoles.push((pb + disc) / 2.0);
        spoles.push((pb - disc) / 2.0);
    }

    // Bilinear transform of poles; each section carries zeros at z = +1 and
    // z = -1 (from the band-pass zeros at s = 0 and s = infinity).
    let mut sections = Vec::with_capacity(spoles.len());
    for sp in &spoles {
        let zp = (c + sp) / (c - sp);
        sections.push(Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -2.0 * zp.re,
            a2: zp.norm_sqr(),
        });
    }
    let mut filt = SosFilter { sections };

    // Normalise to unity gain at the digital centre frequency.
    let f_center = (w0 / c).atan() * fs / std::f64::consts::PI;
    let g = filt.magnitude(f_center, fs);
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::Numeric("band-pass gain normalisation failed".into()));
    }
    let per_section = (1.0 / g).powf(1.0 / filt.sections.len() as f64);
    for s in &mut filt.sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
    Ok(filt)
}

/// Best rational approximation p/q to `x` by continued fractions.
///
/// Fails when no fraction with denominator <= `max_den` lands within
/// `tol` relative error.
pub fn rational_approx(x: f64, max_den: u64, tol: f64) -> Result<(u64, u64)> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::parameter(format!("ratio must be positive, got {x}")));
    }
    let (mut h0, mut h1) = (1u64, x.floor() as u64);
    let (mut k0, mut k1) = (0u64, 1u64);
    let mut frac = x - x.floor();
    loop {
        let approx = h1 as f64 / k1 as f64;
        if ((approx - x) / x).abs() <= tol {
            return Ok((h1, k1));
        }
        if frac.abs() < 1e-15 {
            break;
        }
        let r = 1.0 / frac;
        let a = r.floor();
        frac = r - a;
        let a = a as u64;
        let h2 = a.checked_mul(h1).and_then(|v| v.checked_add(h0));
        let k2 = a.checked_mul(k1).and_then(|v| v.checked_add(k0));
        match (h2, k2) {
            (Some(h2), Some(k2)) if k2 <= max_den => {
                h0 = h1;
                h1 = h2;
                k0 = k1;
                k1 = k2;
            }
            _ => break,
        }
    }
    Err(Error::parameter(format!(
        "no rational approximation of {x} within tolerance (max denominator {max_den})"
    )))
}

fn bessel_i0(x: f64) -> f64 {
    // Power series; converges quickly for the beta values used here.
    let mut sum = 1.0;
    let mut term = 1.0;
    let x2 = x * x / 4.0;
    for k in 1..64 {
        term *= x2 / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc polyphase resampler.
///
/// Upsample by `p`, filter, downsample by `q`. Each polyphase branch carries
/// `taps_per_phase` taps and is normalised to unit DC gain, so constants pass
/// through exactly. Edges are handled by sample-and-hold extension.
pub struct PolyphaseResampler {
    p: u64,
    q: u64,
    taps_per_phase: usize,
    /// phases[r][t] multiplies x[base - t + half], see `resample`.
    phases: Vec<Vec<f64>>,
}

impl PolyphaseResampler {
    pub fn new(p: u64, q: u64, taps_per_phase: usize, beta: f64) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::parameter("resampling ratio must be positive"));
        }
        let g = gcd(p, q);
        let (p, q) = (p / g, q / g);
        let pu = p as usize;
        let total = taps_per_phase * pu;
        // Low-pass cutoff at the narrower of the two Nyquist bands,
        // in cycles per sample at the upsampled rate.
        let fc = 0.5 / pu.max(q as usize) as f64;
        // Centre the filter on an integer number of input samples so the
        // polyphase delay compensation below is exact.
        let center = ((taps_per_phase / 2) * pu) as f64;
        let i0b = bessel_i0(beta);
        let mut h = vec![0.0f64; total];
        for (n, hv) in h.iter_mut().enumerate() {
            let m = n as f64 - center;
            let sinc = if m.abs() < 1e-12 {
                1.0
            } else {
                let a = 2.0 * std::f64::consts::PI * fc * m;
                a.sin() / a
            };
            let t = (m / center.max(1.0)).clamp(-1.0, 1.0);
            let win = bessel_i0(beta * (1.0 - t * t).max(0.0).sqrt()) / i0b;
            *hv = 2.0 * fc * sinc * win;
        }
        // Split into phases and normalise each to unit DC gain.
        let mut phases = vec![Vec::with_capacity(taps_per_phase); pu];
        for (n, hv) in h.iter().enumerate() {
            phases[n % pu].push(*hv);
        }
        for ph in &mut phases {
            let s: f64 = ph.iter().sum();
            if s.abs() < 1e-12 {
                return Err(Error::Numeric("degenerate resampling phase".into()));
            }
            for v in ph.iter_mut() {
                *v /= s;
            }
        }
        Ok(PolyphaseResampler {
            p,
            q,
            taps_per_phase,
            phases,
        })
    }

    /// Output length for `n` input samples.
    pub fn output_len(&self, n: usize) -> usize {
        ((n as f64) * self.p as f64 / self.q as f64).round() as usize
    }

    pub fn resample(&self, x: &[f64]) -> Vec<f64> {
        if self.p == self.q {
            return x.to_vec();
        }
        let n = x.len() as i64;
        let half = (self.taps_per_phase / 2) as i64;
        let out_len = self.output_len(x.len());
        let mut y = Vec::with_capacity(out_len);
        for m in 0..out_len as u64 {
            let u = m * self.q; // index at the upsampled rate
            let phase = (u % self.p) as usize;
            let base = (u / self.p) as i64;
            let ph = &self.phases[phase];
            let mut acc = 0.0;
            for (t, &c) in ph.iter().enumerate() {
                let idx = (base - t as i64 + half).clamp(0, n - 1);
                acc += c * x[idx as usize];
            }
            y.push(acc);
        }
        y
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
