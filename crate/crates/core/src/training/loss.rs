//! Masked, track-shift-tolerant Huber loss.
//!
//! Shift convention: candidate `(di, dj)` compares the label at `(r, c)`
//! with the prediction at `(r + di, c + dj)`. A track whose recorded
//! positions sit one pixel east of the true footprints (offset `+10 m`
//! easting) is therefore best explained by `(0, -1)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geodata::Label;
use crate::neuralnet::{Graph, Tensor, Var};

/// `r²/2` for `|r| ≤ δ`, `δ(|r| − δ/2)` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Sparse labels for each batch element.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseLabelBatch {
    pub labels: Vec<Vec<Label>>,
    pub years: Vec<i32>,
}

impl SparseLabelBatch {
    pub fn total_labels(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// The shift chosen for one track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackShift {
    pub sample: usize,
    pub track_id: u32,
    pub shift: (i32, i32),
    pub labels: usize,
}

#[derive(Debug, Clone)]
pub struct ShiftLoss {
    pub loss: Var,
    pub value: f64,
    pub shifts: Vec<TrackShift>,
}

/// Candidate shifts in selection priority: `(0, 0)` first, then
/// lexicographic.
pub fn shift_candidates(max_shift: usize) -> Vec<(i32, i32)> {
    let m = max_shift as i32;
    let mut out = vec![(0, 0)];
    for di in -m..=m {
        for dj in -m..=m {
            if (di, dj) != (0, 0) {
                out.push((di, dj));
            }
        }
    }
    out
}

struct Selection {
    idx: Vec<usize>,
    target: Vec<f32>,
    weight: Vec<f32>,
    value: f64,
    shifts: Vec<TrackShift>,
}

fn select(pred: &Tensor, batch: &SparseLabelBatch, delta: f64, max_shift: usize) -> Result<Option<Selection>> {
    let shape = pred.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!("prediction must be [B, 1, H, W], got {:?}", shape)));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if batch.labels.len() != b {
        return Err(Error::Shape(format!("{} label sets for a batch of {}", batch.labels.len(), b)));
    }
    let total = batch.total_labels();
    if total == 0 {
        return Ok(None);
    }
    let data = pred.data();
    let candidates = shift_candidates(max_shift);
    let mut sel = Selection {
        idx: Vec::with_capacity(total),
        target: Vec::with_capacity(total),
        weight: Vec::with_capacity(total),
        value: 0.0,
        shifts: Vec::new(),
    };
    for (s, labels) in batch.labels.iter().enumerate() {
        let mut tracks: BTreeMap<u32, Vec<&Label>> = BTreeMap::new();
        for l in labels {
            if l.row as usize >= h || l.col as usize >= w {
                return Err(Error::Range(format!("label ({}, {}) outside {}x{} prediction", l.row, l.col, h, w)));
            }
            tracks.entry(l.track_id).or_default().push(l);
        }
        for (track_id, members) in tracks {
            let mut best: Option<((i32, i32), f64, usize)> = None;
            for &(di, dj) in &candidates {
                let mut sum = 0.0;
                let mut n = 0usize;
                for l in &members {
                    let (r, c) = (l.row as i64 + di as i64, l.col as i64 + dj as i64);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let p = data[(s * h + r as usize) * w + c as usize] as f64;
                    sum += huber(p - l.height as f64, delta);
                    n += 1;
                }
                if n == 0 {
                    continue;
                }
                let mean = sum / n as f64;
                if best.is_none_or(|(_, m, _)| mean < m) {
                    best = Some(((di, dj), mean, n));
                }
            }
            let Some(((di, dj), mean, n)) = best else { continue };
            // weight by the full track size so that shifting never inflates
            // a track's share of the loss
            let wt = members.len() as f64 / total as f64;
            sel.value += wt * mean;
            for l in &members {
                let (r, c) = (l.row as i64 + di as i64, l.col as i64 + dj as i64);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                sel.idx.push((s * h + r as usize) * w + c as usize);
                sel.target.push(l.height);
                sel.weight.push((wt / n as f64) as f32);
            }
            sel.shifts.push(TrackShift {
                sample: s,
                track_id,
                shift: (di, dj),
                labels: members.len(),
            });
        }
    }
    Ok(Some(sel))
}

/// Track-wise minimum over integer shifts of the mean Huber loss, weighted
/// by track size. `Ok(None)` means the batch carries no labels and should
/// be skipped.
pub fn masked_shift_loss(
    g: &mut Graph,
    pred: Var,
    batch: &SparseLabelBatch,
    delta: f64,
    max_shift: usize,
) -> Result<Option<ShiftLoss>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("huber delta must be positive, got {}", delta)));
    }
    let Some(sel) = select(g.value(pred), batch, delta, max_shift)? else {
        return Ok(None);
    };
    let loss = g.sparse_huber(pred, sel.idx, sel.target, sel.weight, delta as f32)?;
    Ok(Some(ShiftLoss {
        loss,
        value: sel.value,
        shifts: sel.shifts,
    }))
}

/// Value of [`masked_shift_loss`] without building graph nodes.
pub fn shift_loss_value(pred: &Tensor, batch: &SparseLabelBatch, delta: f64, max_shift: usize) -> Result<Option<f64>> {
    Ok(select(pred, batch, delta, max_shift)?.map(|s| s.value))
}

/// Shifts selected for each track of `batch` under `pred`.
pub fn selected_shifts(pred: &Tensor, batch: &SparseLabelBatch, delta: f64, max_shift: usize) -> Result<Vec<TrackShift>> {
    Ok(select(pred, batch, delta, max_shift)?.map(|s| s.shifts).unwrap_or_default())
}

/// Mean Huber over all labels at their recorded pixels. Accumulated track
/// by track exactly as the zero-shift candidate of [`masked_shift_loss`],
/// so `shift <= plain` holds in floating point, not just on paper.
pub fn plain_masked_huber(pred: &Tensor, batch: &SparseLabelBatch, delta: f64) -> Result<Option<f64>> {
    Ok(select(pred, batch, delta, 0)?.map(|s| s.value))
}
