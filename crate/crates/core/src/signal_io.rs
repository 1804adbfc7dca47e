//! Continuous-signal loading, preprocessing, segmentation, and synthesis.
//!
//! Recordings travel in the NSIG container (see [`save_signal`]); stage
//! labels travel as a one-code-per-epoch CSV. Preprocessing is a zero-phase
//! 4th-order Butterworth band-pass followed by polyphase resampling to
//! 100 Hz and segmentation into 30 s epochs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{butter_bandpass, rational_approx, PolyphaseResampler};
use crate::{Error, Result};

pub const STANDARD_FS: f64 = 100.0;
pub const EPOCH_SECONDS: f64 = 30.0;
pub const NSIG_MAGIC: &[u8; 4] = b"NSIG";
pub const NSIG_VERSION: u16 = 1;

/// A uniformly sampled continuous single-channel signal.
#[derive(Debug, Clone)]
pub struct Recording {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub channel: String,
    pub subject_id: String,
    pub session_id: String,
    /// Seconds from midnight, when known.
    pub start_offset: Option<f64>,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::parameter(format!("fs must be positive, got {}", self.fs)));
        }
        if self.samples.is_empty() {
            return Err(Error::parameter("recording has no samples"));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// The five AASM stages, coded 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

pub const N_STAGES: usize = 5;

impl Stage {
    pub fn from_code(code: u8) -> Result<Stage> {
        Ok(match code {
            0 => Stage::Wake,
            1 => Stage::N1,
            2 => Stage::N2,
            3 => Stage::N3,
            4 => Stage::Rem,
            other => return Err(Error::format(format!("stage code {other} outside 0..4"))),
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Wake => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

/// Per-epoch stage labels for one recording.
#[derive(Debug, Clone)]
pub struct EpochLabels {
    pub labels: Vec<Stage>,
    pub epoch_duration: f64,
}

/// One narrow-band component of a synthetic signal.
#[derive(Debug, Clone, Copy)]
pub struct SynthComponent {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub amplitude: f64,
}

/// Specification of a synthetic test signal.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub fs: f64,
    pub components: Vec<SynthComponent>,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration_s: 60.0,
            fs: STANDARD_FS,
            components: Vec::new(),
            noise_amplitude: 0.0,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// NSIG container
// ---------------------------------------------------------------------------

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        Error::format(format!("truncated NSIG file: {what} at byte offset {offset}"))
    })?;
    *offset += buf.len();
    Ok(())
}

/// Serialises a recording into NSIG bytes.
pub fn encode_nsig(rec: &Recording) -> Result<Vec<u8>> {
    rec.validate()?;
    let mut out = Vec::with_capacity(32 + rec.samples.len() * 4);
    out.extend_from_slice(NSIG_MAGIC);
    out.extend_from_slice(&NSIG_VERSION.to_le_bytes());
    out.extend_from_slice(&rec.fs.to_le_bytes());
    out.extend_from_slice(&(rec.samples.len() as u64).to_le_bytes());
    for s in [&rec.channel, &rec.subject_id] {
        let b = s.as_bytes();
        if b.len() > u16::MAX as usize {
            return Err(Error::parameter("label too long for NSIG"));
        }
        out.extend_from_slice(&(b.len() as u16).to_le_bytes());
        out.extend_from_slice(b);
    }
    for &v in &rec.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses NSIG bytes. Errors name the byte offset of the problem.
pub fn decode_nsig(bytes: &[u8]) -> Result<Recording> {
    let mut r = bytes;
    let mut off = 0usize;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut off, "magic")?;
    if &magic != NSIG_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?} at byte offset 0 (expected \"NSIG\")",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u16b = [0u8; 2];
    read_exact_at(&mut r, &mut u16b, &mut off, "version")?;
    let version = u16::from_le_bytes(u16b);
    if version != NSIG_VERSION {
        return Err(Error::format(format!("unsupported NSIG version {version}")));
    }
    let mut f64b = [0u8; 8];
    read_exact_at(&mut r, &mut f64b, &mut off, "fs")?;
    let fs = f64::from_le_bytes(f64b);
    let mut u64b = [0u8; 8];
    read_exact_at(&mut r, &mut u64b, &mut off, "sample count")?;
    let n = u64::from_le_bytes(u64b) as usize;
    let mut strings = Vec::with_capacity(2);
    for what in ["channel label", "subject id"] {
        read_exact_at(&mut r, &mut u16b, &mut off, what)?;
        let len = u16::from_le_bytes(u16b) as usize;
        let mut buf = vec![0u8; len];
        read_exact_at(&mut r, &mut buf, &mut off, what)?;
        strings.push(String::from_utf8(buf).map_err(|_| {
            Error::format(format!("invalid UTF-8 in {what} before byte offset {off}"))
        })?);
    }
    let mut samples = Vec::with_capacity(n);
    let mut f32b = [0u8; 4];
    for i in 0..n {
        read_exact_at(&mut r, &mut f32b, &mut off, "sample data")
            .map_err(|_| Error::format(format!(
                "file declares {n} samples but data ends at sample {i} (byte offset {off})"
            )))?;
        let v = f32::from_le_bytes(f32b) as f64;
        if !v.is_finite() {
            return Err(Error::format(format!(
                "non-finite sample {i} at byte offset {}",
                off - 4
            )));
        }
        samples.push(v);
    }
    if !r.is_empty() {
        return Err(Error::format(format!(
            "{} trailing bytes after sample data at byte offset {off}",
            r.len()
        )));
    }
    let rec = Recording {
        samples,
        fs,
        channel: strings.swap_remove(0),
        subject_id: strings.pop().unwrap(),
        session_id: String::new(),
        start_offset: None,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn load_signal(path: impl AsRef<Path>) -> Result<Recording> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display()))))?;
    decode_nsig(&bytes)
}

pub fn save_signal(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    let bytes = encode_nsig(rec)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Labels CSV
// ---------------------------------------------------------------------------

pub fn save_labels(path: impl AsRef<Path>, labels: &EpochLabels) -> Result<()> {
    let mut out = String::from("epoch_index,stage\n");
    for (i, st) in labels.labels.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i, st.code()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<EpochLabels> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch_index,stage") => {}
        other => {
            return Err(Error::format(format!(
                "labels CSV header mismatch: {other:?}"
            )))
        }
    }
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let idx: usize = it
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(format!("bad epoch index on line {}", ln + 2)))?;
        if idx != labels.len() {
            return Err(Error::format(format!(
                "non-contiguous epoch index {idx} on line {}",
                ln + 2
            )));
        }
        let code: u8 = it
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(format!("bad stage code on line {}", ln + 2)))?;
        labels.push(Stage::from_code(code)?);
    }
    Ok(EpochLabels {
        labels,
        epoch_duration: EPOCH_SECONDS,
    })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Zero-phase 4th-order Butterworth band-pass (two biquad sections applied
/// forward and backward), with 1 s of reflected padding at each end.
pub fn bandpass(rec: &Recording, lo: f64, hi: f64) -> Result<Recording> {
    rec.validate()?;
    if !(lo > 0.0 && lo < hi && hi < rec.fs / 2.0) {
        return Err(Error::parameter(format!(
            "band edges must satisfy 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={}",
            rec.fs
        )));
    }
    let filt = butter_bandpass(2, lo, hi, rec.fs)?;
    let pad = rec.fs.round() as usize;
    let samples = filt.filtfilt(&rec.samples, pad);
    Ok(Recording {
        samples,
        ..rec.clone()
    })
}

/// Kaiser-windowed polyphase resampling at a rational ratio.
/// Bit-exact identity when `target_fs == rec.fs`.
pub fn resample(rec: &Recording, target_fs: f64) -> Result<Recording> {
    rec.validate()?;
    if !(target_fs > 0.0) {
        return Err(Error::parameter(format!(
            "target_fs must be positive, got {target_fs}"
        )));
    }
    if target_fs == rec.fs {
        return Ok(rec.clone());
    }
    let (p, q) = rational_approx(target_fs / rec.fs, 1 << 20, 1e-9)?;
    let rs = PolyphaseResampler::new(p, q, 64, 10.0)?;
    let samples = rs.resample(&rec.samples);
    Ok(Recording {
        samples,
        fs: target_fs,
        ..rec.clone()
    })
}

/// Non-overlapping epoch slices of exactly `fs * t_epoch` samples.
/// Returns the slices together with the number of trailing samples dropped.
pub fn segment_epochs(rec: &Recording, t_epoch: f64) -> Result<(Vec<&[f64]>, usize)> {
    let step_f = rec.fs * t_epoch;
    if (step_f - step_f.round()).abs() > 1e-9 || step_f < 1.0 {
        return Err(Error::parameter(format!(
            "fs * epoch duration must be a positive integer, got {step_f}"
        )));
    }
    let step = step_f.round() as usize;
    let n_epochs = rec.samples.len() / step;
    let slices = (0..n_epochs)
        .map(|e| &rec.samples[e * step..(e + 1) * step])
        .collect();
    Ok((slices, rec.samples.len() - n_epochs * step))
}

/// Band-pass to [0.5, 35] Hz, resample to 100 Hz.
pub fn preprocess(rec: &Recording) -> Result<Recording> {
    let filtered = bandpass(rec, 0.5, 35.0)?;
    resample(&filtered, STANDARD_FS)
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Deterministic synthetic signal: narrow-band oscillations with random
/// phase plus broadband Gaussian noise.
pub fn synth_signal(spec: &SynthSpec) -> Result<Recording> {
    if !(spec.fs > 0.0) {
        return Err(Error::parameter("fs must be positive"));
    }
    if spec.duration_s <= 0.0 || (spec.duration_s / EPOCH_SECONDS).fract().abs() > 1e-9 {
        return Err(Error::parameter(format!(
            "duration must be a positive multiple of {EPOCH_SECONDS} s, got {}",
            spec.duration_s
        )));
    }
    for c in &spec.components {
        if c.center_hz + c.bandwidth_hz / 2.0 >= spec.fs / 2.0 {
            return Err(Error::parameter(format!(
                "component at {} Hz (bandwidth {}) exceeds Nyquist for fs={}",
                c.center_hz, c.bandwidth_hz, spec.fs
            )));
        }
    }
    let n = (spec.duration_s * spec.fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = vec![0.0f64; n];
    for c in &spec.components {
        let f = if c.bandwidth_hz > 0.0 {
            (c.center_hz + c.bandwidth_hz * (rng.random::<f64>() - 0.5)).max(1e-3)
        } else {
            c.center_hz
        };
        let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
        let w = 2.0 * std::f64::consts::PI * f / spec.fs;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += c.amplitude * (w * i as f64 + phase).sin();
        }
    }
    if spec.noise_amplitude != 0.0 {
        for s in samples.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += spec.noise_amplitude * z;
        }
    }
    Ok(Recording {
        samples,
        fs: spec.fs,
        channel: "synth".into(),
        subject_id: format!("synth-{}", spec.seed),
        session_id: String::new(),
        start_offset: None,
    })
}
