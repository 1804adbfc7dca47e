//! Shared plumbing between subcommands: preprocessing, raster batches,
//! context windows, and the corpus manifest.

use crate::config::RunConfig;
use neurosleep::encoder::{self, MultiScaleEventStream};
use neurosleep::network::{ModelConfig, WindowInput};
use neurosleep::s2e::{self, DEFAULT_TOLERANCE_S};
use neurosleep::signal_io::{self, EpochLabels, Recording, EPOCH_SECONDS};
use neurosleep::training::Sample;
use neurosleep::{Error, Result};
use std::path::{Path, PathBuf};

/// Band-pass and resample per the `[preprocess]` section, or pass through.
pub fn preprocess(rec: &Recording, cfg: &RunConfig) -> Result<Recording> {
    let p = &cfg.preprocess;
    if !p.enabled {
        return Ok(rec.clone());
    }
    let filtered = signal_io::bandpass(rec, p.low_hz, p.high_hz)?;
    signal_io::resample(&filtered, p.target_fs)
}

pub fn encode_recording(rec: &Recording, cfg: &RunConfig) -> Result<MultiScaleEventStream> {
    let enc = cfg.encoder_config()?;
    encoder::encode_ramsdm(&rec.samples, rec.fs, &enc)
}

/// Event-stream raster batch for the classifier.
pub fn event_batch(stream: &MultiScaleEventStream) -> Result<s2e::EpochBatch> {
    s2e::build_epoch_batch(stream, EPOCH_SECONDS, DEFAULT_TOLERANCE_S)
}

/// Dense-input (A1) raster batch: both rows of every epoch carry the
/// per-epoch z-scored signal; every epoch is valid by construction.
pub fn dense_batch(rec: &Recording) -> Result<s2e::EpochBatch> {
    let step_f = rec.fs * EPOCH_SECONDS;
    if (step_f - step_f.round()).abs() > 1e-9 || step_f < 1.0 {
        return Err(Error::parameter(format!(
            "fs * epoch duration must be a positive integer, got {step_f}"
        )));
    }
    let step = step_f.round() as usize;
    let n_epochs = rec.samples.len() / step;
    let mut rasters = Vec::with_capacity(n_epochs);
    let mut anchors = Vec::with_capacity(n_epochs);
    for e in 0..n_epochs {
        let seg = &rec.samples[e * step..(e + 1) * step];
        let mean = seg.iter().sum::<f64>() / step as f64;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / step as f64;
        let std = var.sqrt();
        let z: Vec<f64> = if std > 0.0 {
            seg.iter().map(|&v| (v - mean) / std).collect()
        } else {
            vec![0.0; step]
        };
        let mut raster = z.clone();
        raster.extend_from_slice(&z);
        rasters.push(raster);
        anchors.push(s2e::anchor_of(e, EPOCH_SECONDS));
    }
    Ok(s2e::EpochBatch {
        rasters,
        anchors,
        mask: vec![true; n_epochs],
        epoch_indices: (0..n_epochs).collect(),
        t_b: step,
    })
}

/// Raster batch for a recording, honoring the model's input mode.
pub fn batch_for_recording(
    rec: &Recording,
    run: &RunConfig,
    model: &ModelConfig,
) -> Result<s2e::EpochBatch> {
    let prep = preprocess(rec, run)?;
    let batch = if model.dense_input {
        dense_batch(&prep)?
    } else {
        event_batch(&encode_recording(&prep, run)?)?
    };
    if !batch.rasters.is_empty() && batch.t_b != model.t_b {
        return Err(Error::parameter(format!(
            "recording yields {}-sample epoch rasters but the model expects t_b={}; \
             adjust [model].t_b or [preprocess].target_fs",
            batch.t_b, model.t_b
        )));
    }
    Ok(batch)
}

/// The 2L+1 context window centered on epoch `e`; out-of-range slots are
/// zero rasters with the mask cleared.
pub fn window_for_epoch(batch: &s2e::EpochBatch, e: usize, l: usize, t_b: usize) -> WindowInput {
    let n = batch.rasters.len();
    let mut rasters = Vec::with_capacity(2 * l + 1);
    let mut mask = Vec::with_capacity(2 * l + 1);
    for off in 0..=2 * l {
        let i = e as isize + off as isize - l as isize;
        if i < 0 || i >= n as isize {
            rasters.push(vec![0.0; 2 * t_b]);
            mask.push(false);
        } else {
            rasters.push(batch.rasters[i as usize].clone());
            mask.push(batch.mask[i as usize]);
        }
    }
    WindowInput {
        rasters,
        mask,
        center: l,
    }
}

/// Labeled samples for one recording; epochs beyond the shorter of the
/// raster batch and the label track are dropped.
pub fn samples_for_recording(
    batch: &s2e::EpochBatch,
    labels: &EpochLabels,
    model: &ModelConfig,
) -> Vec<Sample> {
    let n = batch.rasters.len().min(labels.labels.len());
    (0..n)
        .map(|e| Sample {
            window: window_for_epoch(batch, e, model.window_radius, model.t_b),
            label: labels.labels[e].code() as usize,
        })
        .collect()
}

/// One corpus entry: a subject's signal and its label track.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub signal_path: PathBuf,
    pub labels_path: PathBuf,
}

pub const MANIFEST_HEADER: &str = "subject_id,signal_path,labels_path";

/// Loads a corpus manifest; relative paths resolve against the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::format(format!(
                "manifest header mismatch: expected `{MANIFEST_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::format(format!(
                "manifest line {}: expected 3 nonempty fields",
                ln + 2
            )));
        }
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        entries.push(ManifestEntry {
            subject_id: fields[0].to_string(),
            signal_path: resolve(fields[1]),
            labels_path: resolve(fields[2]),
        });
    }
    if entries.is_empty() {
        return Err(Error::parameter("manifest lists no subjects"));
    }
    Ok(entries)
}

pub fn manifest_csv(entries: &[(String, String, String)]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (id, sig, lab) in entries {
        out.push_str(&format!("{id},{sig},{lab}\n"));
    }
    out
}
