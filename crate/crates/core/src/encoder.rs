//! Residual adaptive multi-scale delta modulation (R-AMSDM).
//!
//! A slow, low-sensitivity delta-modulation pass tracks the dominant trend of
//! the signal; a fast, high-sensitivity pass encodes only the residual the
//! slow pass failed to explain. Thresholds adapt to the local standard
//! deviation within a causal window, so triggering sensitivity follows the
//! local activity level. Events carry the step size in force at firing time,
//! which makes decoding exact without re-deriving the threshold series.

use std::io::Read;
use std::path::Path;

use crate::{Error, Result};

pub const NEVT_MAGIC: &[u8; 4] = b"NEVT";
pub const NEVT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Slow = 0,
    Fast = 1,
}

/// How the absolute sigma floor is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaFloor {
    /// Fraction of the recording's global standard deviation.
    RelativeToGlobalStd(f64),
    /// Fixed value in signal units.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RInitPolicy {
    FirstSample,
    Zero,
}

/// Source series for the fast-scale threshold. The default follows the
/// threshold definition literally (local deviation of the input signal); the
/// alternative derives it from the residual instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastSigmaSource {
    Signal,
    Residual,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub k_slow: f64,
    pub k_fast: f64,
    pub sigma_window: usize,
    pub sigma_floor: SigmaFloor,
    pub r_init: RInitPolicy,
    pub fast_sigma_source: FastSigmaSource,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k_slow: 1.6,
            k_fast: 1.0,
            sigma_window: 100,
            sigma_floor: SigmaFloor::RelativeToGlobalStd(1e-3),
            r_init: RInitPolicy::FirstSample,
            fast_sigma_source: FastSigmaSource::Signal,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_slow > 0.0 && self.k_fast > 0.0) {
            return Err(Error::parameter("threshold factors must be positive"));
        }
        if self.k_fast >= self.k_slow {
            return Err(Error::parameter(format!(
                "k_fast must be smaller than k_slow, got k_fast={} k_slow={}",
                self.k_fast, self.k_slow
            )));
        }
        if self.sigma_window < 2 {
            return Err(Error::parameter("sigma window must span >= 2 samples"));
        }
        match self.sigma_floor {
            SigmaFloor::RelativeToGlobalStd(f) | SigmaFloor::Absolute(f) if f <= 0.0 => {
                return Err(Error::parameter("sigma floor must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One bipolar event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub sample_index: usize,
    pub polarity: i8,
    pub step_size: f64,
    pub scale: Scale,
}

/// Two-scale event streams with their retained reconstruction references.
///
/// `r_slow` and `r_fast` have `length + 1` entries; index `t` holds the
/// pre-update reference at step `t`.
#[derive(Debug, Clone)]
pub struct MultiScaleEventStream {
    pub slow_events: Vec<Event>,
    pub fast_events: Vec<Event>,
    pub length: usize,
    pub fs: f64,
    pub r0_slow: f64,
    pub r_slow: Vec<f64>,
    pub r_fast: Vec<f64>,
}

/// Causal-window local standard deviation with an absolute floor.
///
/// At step `t` the window is `[max(0, t - w + 1), t]`; population statistics.
pub fn local_sigma(x: &[f64], w: usize, floor: f64) -> Result<Vec<f64>> {
    if w < 2 {
        return Err(Error::parameter("sigma window must span >= 2 samples"));
    }
    if floor <= 0.0 {
        return Err(Error::parameter("sigma floor must be positive"));
    }
    let n = x.len();
    let mut s1 = vec![0.0f64; n + 1];
    let mut s2 = vec![0.0f64; n + 1];
    for (i, &v) in x.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(w - 1);
        let len = (t - lo + 1) as f64;
        let mean = (s1[t + 1] - s1[lo]) / len;
        let var = ((s2[t + 1] - s2[lo]) / len - mean * mean).max(0.0);
        out.push(var.sqrt().max(floor));
    }
    Ok(out)
}

/// Single-scale delta modulation.
///
/// Per step: `d = x - r`; fire +1 when `d >= theta`, -1 when `d <= -theta`,
/// at most one event per step; `r` advances by the signed step. Returns the
/// events and the reference series of length `x.len() + 1` with `r[0] = r0`.
pub fn delta_modulate(x: &[f64], theta: &[f64], r0: f64, scale: Scale) -> Result<(Vec<Event>, Vec<f64>)> {
    if x.len() != theta.len() {
        return Err(Error::parameter(format!(
            "signal and threshold lengths differ: {} vs {}",
            x.len(),
            theta.len()
        )));
    }
    if let Some(i) = theta.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::parameter(format!(
            "threshold must be positive everywhere, theta[{i}] = {}",
            theta[i]
        )));
    }
    let mut events = Vec::new();
    let mut r = Vec::with_capacity(x.len() + 1);
    r.push(r0);
    let mut cur = r0;
    for (t, (&xv, &th)) in x.iter().zip(theta).enumerate() {
        let d = xv - cur;
        let s: i8 = if d >= th {
            1
        } else if d <= -th {
            -1
        } else {
            0
        };
        if s != 0 {
            events.push(Event {
                sample_index: t,
                polarity: s,
                step_size: th,
                scale,
            });
            cur += s as f64 * th;
        }
        r.push(cur);
    }
    Ok((events, r))
}

/// Full two-scale encode: slow pass on the signal, fast pass on the residual.
pub fn encode_ramsdm(x: &[f64], fs: f64, cfg: &EncoderConfig) -> Result<MultiScaleEventStream> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::parameter("cannot encode an empty signal"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite sample at index {i}")));
    }
    let floor = match cfg.sigma_floor {
        SigmaFloor::Absolute(f) => f,
        SigmaFloor::RelativeToGlobalStd(frac) => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (frac * var.sqrt()).max(1e-12)
        }
    };
    let sigma = local_sigma(x, cfg.sigma_window, floor)?;
    let theta_slow: Vec<f64> = sigma.iter().map(|&s| cfg.k_slow * s).collect();
    let r0 = match cfg.r_init {
        RInitPolicy::FirstSample => x[0],
        RInitPolicy::Zero => 0.0,
    };
    let (slow_events, r_slow) = delta_modulate(x, &theta_slow, r0, Scale::Slow)?;
    let residual: Vec<f64> = x.iter().enumerate().map(|(t, &v)| v - r_slow[t]).collect();
    let theta_fast: Vec<f64> = match cfg.fast_sigma_source {
        FastSigmaSource::Signal => sigma.iter().map(|&s| cfg.k_fast * s).collect(),
        FastSigmaSource::Residual => local_sigma(&residual, cfg.sigma_window, floor)?
            .iter()
            .map(|&s| cfg.k_fast * s)
            .collect(),
    };
    let (fast_events, r_fast) = delta_modulate(&residual, &theta_fast, 0.0, Scale::Fast)?;
    Ok(MultiScaleEventStream {
        slow_events,
        fast_events,
        length: x.len(),
        fs,
        r0_slow: r0,
        r_slow,
        r_fast,
    })
}

fn replay(events: &[Event], r0: f64, length: usize, scale: Scale) -> Result<Vec<f64>> {
    let mut r = Vec::with_capacity(length + 1);
    r.push(r0);
    let mut cur = r0;
    let mut last: Option<usize> = None;
    let mut it = events.iter().peekable();
    for t in 0..length {
        if let Some(ev) = it.peek() {
            if ev.scale != scale {
                return Err(Error::format("event scale mismatch in replay"));
            }
            if ev.sample_index == t {
                if let Some(prev) = last {
                    if prev >= t {
                        return Err(Error::format(format!(
                            "events out of order at sample index {t}"
                        )));
                    }
                }
                if !(ev.step_size > 0.0) {
                    return Err(Error::format(format!(
                        "non-positive step size at sample index {t}"
                    )));
                }
                cur += ev.polarity as f64 * ev.step_size;
                last = Some(t);
                it.next();
            }
        }
        r.push(cur);
    }
    if let Some(ev) = it.next() {
        return Err(Error::format(format!(
            "event at sample index {} beyond stream length {length} or out of order",
            ev.sample_index
        )));
    }
    Ok(r)
}

/// Replays events into reference series. For streams produced by
/// [`encode_ramsdm`] the result is bit-identical to the retained references.
pub fn decode(stream: &MultiScaleEventStream, r0_slow: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let r_slow = replay(&stream.slow_events, r0_slow, stream.length, Scale::Slow)?;
    let r_fast = replay(&stream.fast_events, 0.0, stream.length, Scale::Fast)?;
    Ok((r_slow, r_fast))
}

/// Reconstruction: elementwise sum of the two pre-update reference series.
pub fn reconstruct(stream: &MultiScaleEventStream) -> Result<Vec<f64>> {
    if stream.r_slow.len() != stream.length + 1 || stream.r_fast.len() != stream.length + 1 {
        return Err(Error::internal(format!(
            "reference series length mismatch: {} / {} vs {}",
            stream.r_slow.len(),
            stream.r_fast.len(),
            stream.length + 1
        )));
    }
    Ok((0..stream.length)
        .map(|t| stream.r_slow[t] + stream.r_fast[t])
        .collect())
}

/// Event densities: per-scale fraction of firing steps, and the combined
/// fraction of nonzero entries in the 2 x T event raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Density {
    pub combined: f64,
    pub slow: f64,
    pub fast: f64,
}

pub fn event_density(stream: &MultiScaleEventStream) -> Result<Density> {
    if stream.length == 0 {
        return Err(Error::parameter("density of an empty stream is undefined"));
    }
    let t = stream.length as f64;
    let slow = stream.slow_events.len() as f64 / t;
    let fast = stream.fast_events.len() as f64 / t;
    let combined = (stream.slow_events.len() + stream.fast_events.len()) as f64 / (2.0 * t);
    Ok(Density { combined, slow, fast })
}

// ---------------------------------------------------------------------------
// NEVT container
// ---------------------------------------------------------------------------

/// Serialises a stream into NEVT bytes. Events are stored merged, ordered by
/// (sample_index, scale); reference series are regenerated on load.
pub fn encode_nevt(stream: &MultiScaleEventStream) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NEVT_MAGIC);
    out.extend_from_slice(&NEVT_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.fs.to_le_bytes());
    out.extend_from_slice(&(stream.length as u64).to_le_bytes());
    out.extend_from_slice(&(stream.r0_slow as f32).to_le_bytes());
    let count = stream.slow_events.len() + stream.fast_events.len();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    let mut merged: Vec<&Event> = stream.slow_events.iter().chain(&stream.fast_events).collect();
    merged.sort_by_key(|e| (e.sample_index, e.scale as u8));
    for e in merged {
        out.extend_from_slice(&(e.sample_index as u64).to_le_bytes());
        out.push(e.scale as u8);
        out.push(e.polarity as u8);
        out.extend_from_slice(&(e.step_size as f32).to_le_bytes());
    }
    out
}

pub fn decode_nevt(bytes: &[u8]) -> Result<MultiScaleEventStream> {
    let mut r = bytes;
    let mut off = 0usize;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(format!("truncated NEVT file: {what} at byte offset {off}")))?;
        off += buf.len();
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != NEVT_MAGIC {
        return Err(Error::format("bad magic (expected \"NEVT\")"));
    }
    let mut u16b = [0u8; 2];
    take(&mut u16b, "version")?;
    if u16::from_le_bytes(u16b) != NEVT_VERSION {
        return Err(Error::format("unsupported NEVT version"));
    }
    let mut f64b = [0u8; 8];
    take(&mut f64b, "fs")?;
    let fs = f64::from_le_bytes(f64b);
    let mut u64b = [0u8; 8];
    take(&mut u64b, "length")?;
    let length = u64::from_le_bytes(u64b) as usize;
    let mut f32b = [0u8; 4];
    take(&mut f32b, "r0_slow")?;
    let r0_slow = f32::from_le_bytes(f32b) as f64;
    take(&mut u64b, "event count")?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut slow_events = Vec::new();
    let mut fast_events = Vec::new();
    for i in 0..count {
        take(&mut u64b, "event index")?;
        let sample_index = u64::from_le_bytes(u64b) as usize;
        let mut b1 = [0u8; 1];
        take(&mut b1, "event scale")?;
        let scale = match b1[0] {
            0 => Scale::Slow,
            1 => Scale::Fast,
            v => return Err(Error::format(format!("bad scale byte {v} in event {i}"))),
        };
        take(&mut b1, "event polarity")?;
        let polarity = b1[0] as i8;
        if polarity != 1 && polarity != -1 {
            return Err(Error::format(format!("bad polarity {polarity} in event {i}")));
        }
        take(&mut f32b, "event step size")?;
        let step_size = f32::from_le_bytes(f32b) as f64;
        let ev = Event { sample_index, polarity, step_size, scale };
        match scale {
            Scale::Slow => slow_events.push(ev),
            Scale::Fast => fast_events.push(ev),
        }
    }
    if !r.is_empty() {
        return Err(Error::format(format!("{} trailing bytes in NEVT file", r.len())));
    }
    // Replay validates ordering and regenerates the references.
    let r_slow = replay(&slow_events, r0_slow, length, Scale::Slow)?;
    let r_fast = replay(&fast_events, 0.0, length, Scale::Fast)?;
    Ok(MultiScaleEventStream {
        slow_events,
        fast_events,
        length,
        fs,
        r0_slow,
        r_slow,
        r_fast,
    })
}

pub fn load_events(path: impl AsRef<Path>) -> Result<MultiScaleEventStream> {
    decode_nevt(&std::fs::read(path)?)
}

pub fn save_events(path: impl AsRef<Path>, stream: &MultiScaleEventStream) -> Result<()> {
    std::fs::write(path, encode_nevt(stream))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_sigma_constant_is_floor() {
        let s = local_sigma(&[2.0; 10], 4, 1e-3).unwrap();
        assert!(s.iter().all(|&v| v == 1e-3));
    }

    #[test]
    fn local_sigma_hand_cases() {
        let s = local_sigma(&[0.0, 2.0], 2, 1e-6).unwrap();
        assert_eq!(s[1], 1.0);
        let s = local_sigma(&[1.0, 3.0, 5.0], 2, 1e-6).unwrap();
        assert_eq!(s, vec![1e-6, 1.0, 1.0]);
    }

    #[test]
    fn delta_modulate_hand_trace() {
        let x = [0.0, 2.5, 2.5, 0.4, 0.4, 0.4];
        let theta = [1.0; 6];
        let (events, r) = delta_modulate(&x, &theta, 0.0, Scale::Slow).unwrap();
        let mut s = [0i8; 6];
        for e in &events {
            s[e.sample_index] = e.polarity;
        }
        assert_eq!(s, [0, 1, 1, -1, 0, 0]);
        assert_eq!(r[6], 1.0);
        assert_eq!(r, vec![0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn delta_modulate_constant_from_matching_r0() {
        let x = [3.0; 8];
        let (events, r) = delta_modulate(&x, &[0.5; 8], 3.0, Scale::Slow).unwrap();
        assert!(events.is_empty());
        assert!(r.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn delta_modulate_one_event_per_step() {
        let (events, r) = delta_modulate(&[0.0, -5.0], &[1.0; 2], 0.0, Scale::Slow).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].polarity, -1);
        assert_eq!(events[0].sample_index, 1);
        assert_eq!(r[2], -1.0);
    }

    #[test]
    fn delta_modulate_rejects_bad_theta() {
        assert!(delta_modulate(&[1.0], &[0.0], 0.0, Scale::Slow).is_err());
    }

    #[test]
    fn encode_constant_signal_is_silent() {
        let x = vec![1.25; 400];
        let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
        assert!(stream.slow_events.is_empty());
        assert!(stream.fast_events.is_empty());
        let d = event_density(&stream).unwrap();
        assert_eq!((d.combined, d.slow, d.fast), (0.0, 0.0, 0.0));
    }

    #[test]
    fn degenerate_slow_scale_reduces_to_single_scale() {
        let x: Vec<f64> = (0..600)
            .map(|i| (2.0 * std::f64::consts::PI * 7.0 * i as f64 / 100.0).sin())
            .collect();
        let cfg = EncoderConfig {
            k_slow: 1e9,
            k_fast: 1.0,
            ..Default::default()
        };
        let stream = encode_ramsdm(&x, 100.0, &cfg).unwrap();
        assert!(stream.slow_events.is_empty());
        assert!(stream.r_slow.iter().all(|&v| v == x[0]));
        // fast stream must equal single-scale modulation of x - r0
        let floor = {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (1e-3 * var.sqrt()).max(1e-12)
        };
        let sigma = local_sigma(&x, 100, floor).unwrap();
        let theta: Vec<f64> = sigma.iter().map(|&s| 1.0 * s).collect();
        let shifted: Vec<f64> = x.iter().map(|&v| v - x[0]).collect();
        let (expect, _) = delta_modulate(&shifted, &theta, 0.0, Scale::Fast).unwrap();
        assert_eq!(stream.fast_events, expect);
    }

    #[test]
    fn fast_scale_fires_at_least_as_often() {
        let x: Vec<f64> = (0..3000)
            .map(|i| {
                let t = i as f64 / 100.0;
                (2.0 * std::f64::consts::PI * 10.0 * t).sin()
                    + 0.3 * ((i as f64 * 12.9898).sin() * 43758.5453).fract()
            })
            .collect();
        let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
        assert!(stream.fast_events.len() >= stream.slow_events.len());
        assert!(!stream.fast_events.is_empty());
    }

    #[test]
    fn decode_identity() {
        let x: Vec<f64> = (0..2000)
            .map(|i| (i as f64 * 0.37).sin() + 0.2 * (i as f64 * 1.7).cos())
            .collect();
        let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
        let (r_slow, r_fast) = decode(&stream, stream.r0_slow).unwrap();
        assert_eq!(r_slow, stream.r_slow);
        assert_eq!(r_fast, stream.r_fast);
    }

    #[test]
    fn decode_empty_and_single_event() {
        let stream = MultiScaleEventStream {
            slow_events: vec![],
            fast_events: vec![],
            length: 4,
            fs: 100.0,
            r0_slow: 2.0,
            r_slow: vec![2.0; 5],
            r_fast: vec![0.0; 5],
        };
        let (rs, rf) = decode(&stream, 2.0).unwrap();
        assert!(rs.iter().all(|&v| v == 2.0));
        assert!(rf.iter().all(|&v| v == 0.0));

        let ev = Event { sample_index: 5, polarity: 1, step_size: 0.7, scale: Scale::Slow };
        let r = replay(&[ev], 0.0, 10, Scale::Slow).unwrap();
        for (t, &v) in r.iter().enumerate() {
            if t <= 5 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, 0.7);
            }
        }
    }

    #[test]
    fn decode_rejects_out_of_order() {
        let evs = vec![
            Event { sample_index: 5, polarity: 1, step_size: 1.0, scale: Scale::Slow },
            Event { sample_index: 3, polarity: 1, step_size: 1.0, scale: Scale::Slow },
        ];
        assert!(replay(&evs, 0.0, 10, Scale::Slow).is_err());
    }

    #[test]
    fn reconstruct_hand_trace_slow_only() {
        // slow-only encode of the 6-sample trace via a huge k_fast is not
        // possible (k_fast < k_slow), so build the stream directly.
        let x = [0.0, 2.5, 2.5, 0.4, 0.4, 0.4];
        let (slow_events, r_slow) = delta_modulate(&x, &[1.0; 6], 0.0, Scale::Slow).unwrap();
        let stream = MultiScaleEventStream {
            slow_events,
            fast_events: vec![],
            length: 6,
            fs: 100.0,
            r0_slow: 0.0,
            r_slow,
            r_fast: vec![0.0; 7],
        };
        let xh = reconstruct(&stream).unwrap();
        assert_eq!(xh, vec![0.0, 0.0, 1.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn two_scale_reconstruction_not_worse_than_slow_alone() {
        for seed in 0..5u64 {
            let x: Vec<f64> = (0..3000)
                .map(|i| {
                    let t = i as f64 / 100.0;
                    (2.0 * std::f64::consts::PI * (4.0 + seed as f64) * t).sin()
                        + 0.4 * (2.0 * std::f64::consts::PI * 17.0 * t + seed as f64).sin()
                })
                .collect();
            let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
            let xh = reconstruct(&stream).unwrap();
            let err2: f64 = x.iter().zip(&xh).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let err_slow: f64 = x
                .iter()
                .enumerate()
                .map(|(t, &a)| (a - stream.r_slow[t]) * (a - stream.r_slow[t]))
                .sum();
            assert!(err2 <= err_slow + 1e-12, "seed {seed}: {err2} > {err_slow}");
        }
    }

    #[test]
    fn density_hand_case() {
        let x = [0.0, 2.5, 2.5, 0.4, 0.4, 0.4];
        let (slow_events, r_slow) = delta_modulate(&x, &[1.0; 6], 0.0, Scale::Slow).unwrap();
        let stream = MultiScaleEventStream {
            slow_events,
            fast_events: vec![],
            length: 6,
            fs: 100.0,
            r0_slow: 0.0,
            r_slow,
            r_fast: vec![0.0; 7],
        };
        let d = event_density(&stream).unwrap();
        assert_eq!(d.slow, 0.5);
        assert_eq!(d.fast, 0.0);
        assert_eq!(d.combined, 0.25);
    }

    #[test]
    fn nevt_round_trip_and_determinism() {
        let x: Vec<f64> = (0..1500).map(|i| (i as f64 * 0.21).sin() * 3.0).collect();
        let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
        let bytes = encode_nevt(&stream);
        assert_eq!(bytes, encode_nevt(&stream));
        let back = decode_nevt(&bytes).unwrap();
        assert_eq!(back.length, stream.length);
        assert_eq!(back.slow_events.len(), stream.slow_events.len());
        assert_eq!(back.fast_events.len(), stream.fast_events.len());
        // second generation is byte-exact
        assert_eq!(encode_nevt(&back), bytes);
    }

    #[test]
    fn polarity_antisymmetry() {
        let x: Vec<f64> = (0..1200)
            .map(|i| (i as f64 * 0.11).sin() + 0.5 * (i as f64 * 0.031).cos())
            .collect();
        let neg: Vec<f64> = x.iter().map(|&v| -v).collect();
        let cfg = EncoderConfig {
            r_init: RInitPolicy::Zero,
            ..Default::default()
        };
        let a = encode_ramsdm(&x, 100.0, &cfg).unwrap();
        let b = encode_ramsdm(&neg, 100.0, &cfg).unwrap();
        assert_eq!(a.slow_events.len(), b.slow_events.len());
        assert_eq!(a.fast_events.len(), b.fast_events.len());
        for (ea, eb) in a.slow_events.iter().zip(&b.slow_events) {
            assert_eq!(ea.sample_index, eb.sample_index);
            assert_eq!(ea.polarity, -eb.polarity);
            assert_eq!(ea.step_size, eb.step_size);
        }
        for (ea, eb) in a.fast_events.iter().zip(&b.fast_events) {
            assert_eq!(ea.sample_index, eb.sample_index);
            assert_eq!(ea.polarity, -eb.polarity);
            assert_eq!(ea.step_size, eb.step_size);
        }
    }
}
