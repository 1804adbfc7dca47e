//! Signal-to-event temporal orchestration.
//!
//! Events are grouped into 30 s epochs by flooring their physical time,
//! each epoch gets a midpoint temporal anchor, and a validity mask flags
//! epochs whose anchor spacing deviates from the epoch duration by more
//! than a tolerance. Per-epoch event groups rasterize into ternary 2 x T_b
//! arrays for the network front end.

use crate::encoder::{Event, MultiScaleEventStream, Scale};
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE_S: f64 = 0.1;

/// Events of one epoch, as (within-epoch sample offset, polarity) pairs.
#[derive(Debug, Clone, Default)]
pub struct EpochEvents {
    pub epoch_index: usize,
    pub slow: Vec<(usize, i8)>,
    pub fast: Vec<(usize, i8)>,
}

/// Epoch groups plus their temporal anchors (seconds).
#[derive(Debug, Clone)]
pub struct EpochGroups {
    pub groups: Vec<EpochEvents>,
    pub anchors: Vec<f64>,
    pub samples_per_epoch: usize,
}

/// Rasterised epochs ready for the classifier.
#[derive(Debug, Clone)]
pub struct EpochBatch {
    /// Per epoch: 2 x T_b values in {-1, 0, +1}, row 0 slow, row 1 fast.
    pub rasters: Vec<Vec<f64>>,
    pub anchors: Vec<f64>,
    pub mask: Vec<bool>,
    pub epoch_indices: Vec<usize>,
    pub t_b: usize,
}

/// Epoch index and anchor for an event at time `t_n` seconds.
pub fn epoch_of(t_n: f64, t_epoch: f64) -> usize {
    (t_n / t_epoch).floor() as usize
}

pub fn anchor_of(epoch: usize, t_epoch: f64) -> f64 {
    (epoch as f64 + 0.5) * t_epoch
}

/// Groups a stream's events by epoch. Epochs are the complete `t_epoch`
/// spans of the stream; events in a trailing partial epoch are dropped.
pub fn assign_epochs(stream: &MultiScaleEventStream, t_epoch: f64) -> Result<EpochGroups> {
    let step_f = stream.fs * t_epoch;
    if (step_f - step_f.round()).abs() > 1e-9 || step_f < 1.0 {
        return Err(Error::parameter(format!(
            "fs * epoch duration must be a positive integer, got {step_f}"
        )));
    }
    let step = step_f.round() as usize;
    let n_epochs = stream.length / step;
    let mut groups: Vec<EpochEvents> = (0..n_epochs)
        .map(|e| EpochEvents {
            epoch_index: e,
            ..Default::default()
        })
        .collect();
    let mut place = |ev: &Event| {
        let t_n = ev.sample_index as f64 / stream.fs;
        let e = epoch_of(t_n, t_epoch);
        if e < n_epochs {
            let offset = ev.sample_index - e * step;
            match ev.scale {
                Scale::Slow => groups[e].slow.push((offset, ev.polarity)),
                Scale::Fast => groups[e].fast.push((offset, ev.polarity)),
            }
        }
    };
    for ev in &stream.slow_events {
        place(ev);
    }
    for ev in &stream.fast_events {
        place(ev);
    }
    let anchors = (0..n_epochs).map(|e| anchor_of(e, t_epoch)).collect();
    Ok(EpochGroups {
        groups,
        anchors,
        samples_per_epoch: step,
    })
}

/// Validity mask from anchor spacing: epoch e (e >= 1) is valid when its
/// anchor sits `t_epoch` after its predecessor within tolerance `tau`.
/// The first epoch of a batch is defined valid.
pub fn validity_mask(anchors: &[f64], t_epoch: f64, tau: f64) -> Vec<bool> {
    let mut mask = Vec::with_capacity(anchors.len());
    for (e, &a) in anchors.iter().enumerate() {
        if e == 0 {
            mask.push(true);
        } else {
            // sub-nanosecond slack keeps the inclusive boundary robust to
            // rounding in anchor arithmetic
            mask.push((a - anchors[e - 1] - t_epoch).abs() <= tau + 1e-9);
        }
    }
    mask
}

/// Rasterises one epoch group into a ternary 2 x `t_b` array
/// (row-major: raster[scale * t_b + offset]).
pub fn rasterize(group: &EpochEvents, t_b: usize) -> Result<Vec<f64>> {
    let mut raster = vec![0.0f64; 2 * t_b];
    for (row, events) in [(0usize, &group.slow), (1usize, &group.fast)] {
        for &(offset, polarity) in events.iter() {
            if offset >= t_b {
                return Err(Error::format(format!(
                    "event offset {offset} outside epoch of {t_b} samples"
                )));
            }
            let idx = row * t_b + offset;
            if raster[idx] != 0.0 {
                return Err(Error::format(format!(
                    "duplicate event at scale {row}, offset {offset} (corrupt stream)"
                )));
            }
            raster[idx] = polarity as f64;
        }
    }
    Ok(raster)
}

/// Full orchestration of one stream: group, anchor, mask, rasterize.
pub fn build_epoch_batch(stream: &MultiScaleEventStream, t_epoch: f64, tau: f64) -> Result<EpochBatch> {
    let groups = assign_epochs(stream, t_epoch)?;
    let mask = validity_mask(&groups.anchors, t_epoch, tau);
    let t_b = groups.samples_per_epoch;
    let rasters = groups
        .groups
        .iter()
        .map(|g| rasterize(g, t_b))
        .collect::<Result<Vec<_>>>()?;
    let epoch_indices = groups.groups.iter().map(|g| g.epoch_index).collect();
    Ok(EpochBatch {
        rasters,
        anchors: groups.anchors,
        mask,
        epoch_indices,
        t_b,
    })
}

/// Debug manifest CSV: `epoch_index,anchor_s,mask,n_events_slow,n_events_fast`.
pub fn batch_manifest_csv(groups: &EpochGroups, mask: &[bool]) -> String {
    let mut out = String::from("epoch_index,anchor_s,mask,n_events_slow,n_events_fast\n");
    for (g, (&a, &m)) in groups.groups.iter().zip(groups.anchors.iter().zip(mask)) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            g.epoch_index,
            a,
            m as u8,
            g.slow.len(),
            g.fast.len()
        ));
    }
    out
}
