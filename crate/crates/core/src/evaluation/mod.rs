//! Metric suite: MAE/MSE/R², binned bias, validation-window sampling,
//! per-stratum metrics and the configuration comparison table.

pub mod experiment;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Label, RasterPatch};
use crate::synthscene::ForestType;

/// Labels at or below this height are dropped for the `r2_7` column.
pub const R2_THRESHOLD_M: f64 = 7.0;
/// Lower edges of the 5 m error bins; the last bin is closed at 40 m.
pub const BIN_EDGES: [f64; 7] = [10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0];
pub const DEFAULT_VALIDATION_WINDOWS: usize = 150;
/// 2.56 km at 10 m.
pub const DEFAULT_VALIDATION_PATCH_PX: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
    pub n: usize,
}

/// Error metrics over pairs whose label exceeds `threshold` (all pairs when
/// `None`). Fewer than two pairs or zero label variance is an error.
pub fn metrics(preds: &[f64], labels: &[f64], threshold: Option<f64>) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let pairs: Vec<(f64, f64)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| threshold.is_none_or(|t| y > t))
        .map(|(&p, &y)| (p, y))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} labels after filtering")));
    }
    let nf = n as f64;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::InsufficientData("zero label variance".into()));
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
    let mae = pairs.iter().map(|p| (p.0 - p.1).abs()).sum::<f64>() / nf;
    Ok(Metrics {
        mae,
        mse: ss_res / nf,
        r2: 1.0 - ss_res / ss_tot,
        n,
    })
}

/// Index of the error bin holding `label`, if any.
pub fn bin_of(label: f64) -> Option<usize> {
    let last = BIN_EDGES.len() - 2;
    if label == BIN_EDGES[last + 1] {
        return Some(last);
    }
    (0..=last).find(|&i| label >= BIN_EDGES[i] && label < BIN_EDGES[i + 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinError {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean of `pred − label`; `None` for an empty bin.
    pub mean_error: Option<f64>,
}

pub fn binned_errors(preds: &[f64], labels: &[f64]) -> Vec<BinError> {
    let nb = BIN_EDGES.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (&p, &y) in preds.iter().zip(labels) {
        if let Some(b) = bin_of(y) {
            sums[b] += p - y;
            counts[b] += 1;
        }
    }
    (0..nb)
        .map(|b| BinError {
            lo: BIN_EDGES[b],
            hi: BIN_EDGES[b + 1],
            count: counts[b],
            mean_error: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect()
}

/// Square pixel window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl Window {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row0 && r < self.row0 + self.size && c >= self.col0 && c < self.col0 + self.size
    }

    pub fn overlaps(&self, o: &Window) -> bool {
        self.row0 < o.row0 + o.size && o.row0 < self.row0 + self.size && self.col0 < o.col0 + o.size && o.col0 < self.col0 + self.size
    }
}

/// `n` pairwise disjoint `patch_px` windows placed uniformly at random in a
/// `height × width` extent. Rejection sampling first; if that stalls, a random
/// subset of the regular packing is used, which exists whenever the capacity
/// check passes.
pub fn sample_validation_points(height: usize, width: usize, n: usize, seed: u64, patch_px: usize) -> Result<Vec<Window>> {
    if n == 0 || patch_px == 0 {
        return Err(Error::Domain("need n ≥ 1 and a non-empty window".into()));
    }
    let capacity = (height / patch_px) * (width / patch_px);
    if n > capacity {
        return Err(Error::Capacity(format!(
            "{n} disjoint {patch_px} px windows do not fit in {height}x{width} (at most {capacity})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Window> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 200 * n {
        attempts += 1;
        let w = Window {
            row0: rng.random_range(0..=height - patch_px),
            col0: rng.random_range(0..=width - patch_px),
            size: patch_px,
        };
        if out.iter().all(|o| !o.overlaps(&w)) {
            out.push(w);
        }
    }
    if out.len() < n {
        let cols = width / patch_px;
        let mut slots: Vec<usize> = (0..capacity).collect();
        for i in 0..n {
            let j = rng.random_range(i..slots.len());
            slots.swap(i, j);
        }
        let dr = rng.random_range(0..=height - (height / patch_px) * patch_px);
        let dc = rng.random_range(0..=width - cols * patch_px);
        out = slots[..n]
            .iter()
            .map(|&s| Window {
                row0: dr + (s / cols) * patch_px,
                col0: dc + (s % cols) * patch_px,
                size: patch_px,
            })
            .collect();
    }
    Ok(out)
}

/// Labels falling inside any window. Labels are assumed to have passed the
/// LiDAR quality filter already.
pub fn labels_in_windows(labels: &[Label], windows: &[Window]) -> Vec<Label> {
    labels
        .iter()
        .filter(|l| windows.iter().any(|w| w.contains(l.row as usize, l.col as usize)))
        .copied()
        .collect()
}

/// `(prediction, label)` at every label position of a single-band raster.
/// Nodata predictions are skipped.
pub fn paired_values(pred: &RasterPatch, labels: &[Label]) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(labels.len());
    let mut y = Vec::with_capacity(labels.len());
    for l in labels {
        let (r, c) = (l.row as usize, l.col as usize);
        if r >= pred.height() || c >= pred.width() {
            continue;
        }
        let v = pred.get(0, r, c);
        if v == pred.nodata() {
            continue;
        }
        p.push(v as f64);
        y.push(l.height as f64);
    }
    (p, y)
}

pub fn stratum_name(t: ForestType) -> &'static str {
    match t {
        ForestType::None => "none",
        ForestType::Broadleaf => "broadleaf",
        ForestType::Conifer => "conifer",
    }
}

/// [`metrics`] per stratum; strata with too few labels are absent.
pub fn stratified_metrics(
    preds: &[f64],
    labels: &[f64],
    strata: &[ForestType],
    threshold: Option<f64>,
) -> Result<BTreeMap<String, Metrics>> {
    if preds.len() != labels.len() || strata.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels, {} strata",
            preds.len(),
            labels.len(),
            strata.len()
        )));
    }
    let mut out = BTreeMap::new();
    for t in [ForestType::None, ForestType::Broadleaf, ForestType::Conifer] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| strata[i] == t).collect();
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        match metrics(&p, &y, threshold) {
            Ok(m) => {
                out.insert(stratum_name(t).to_string(), m);
            }
            Err(Error::InsufficientData(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Stratum of each label from a forest-type code raster (0, 1, 2).
pub fn strata_at(types: &RasterPatch, labels: &[Label]) -> Result<Vec<ForestType>> {
    labels
        .iter()
        .map(|l| match types.get(0, l.row as usize, l.col as usize) as i32 {
            0 => Ok(ForestType::None),
            1 => Ok(ForestType::Broadleaf),
            2 => Ok(ForestType::Conifer),
            v => Err(Error::Domain(format!("forest-type code {v} at ({}, {})", l.row, l.col))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearMetrics {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
    /// R² on labels above [`R2_THRESHOLD_M`]; absent when too few remain.
    pub r2_7: Option<f64>,
    pub n_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_id: String,
    pub years: BTreeMap<i32, YearMetrics>,
    pub bins: Vec<BinError>,
}

impl EvalReport {
    /// Report over per-year `(preds, labels)` pairs; bins pool all years.
    pub fn build(config_id: &str, per_year: &BTreeMap<i32, (Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut years = BTreeMap::new();
        let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
        for (&year, (p, y)) in per_year {
            let m = metrics(p, y, None).map_err(|e| Error::InsufficientData(format!("year {year}: {e}")))?;
            let r2_7 = match metrics(p, y, Some(R2_THRESHOLD_M)) {
                Ok(m7) => Some(m7.r2),
                Err(Error::InsufficientData(_)) => None,
                Err(e) => return Err(e),
            };
            years.insert(
                year,
                YearMetrics {
                    mae: m.mae,
                    mse: m.mse,
                    r2: m.r2,
                    r2_7,
                    n_labels: m.n,
                },
            );
            all_p.extend_from_slice(p);
            all_y.extend_from_slice(y);
        }
        Ok(EvalReport {
            config_id: config_id.to_string(),
            years,
            bins: binned_errors(&all_p, &all_y),
        })
    }

    /// Mean of the per-year MAEs.
    pub fn average_mae(&self) -> f64 {
        self.years.values().map(|m| m.mae).sum::<f64>() / self.years.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config_id: String,
    /// MAE per column year; `None` when the report lacks that year.
    pub mae: Vec<Option<f64>>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub years: Vec<i32>,
    pub rows: Vec<ComparisonRow>,
}

/// Per-year MAE matrix with an average column, rows sorted by average
/// (stable, so ties keep input order).
pub fn compare_configs(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("no reports to compare".into()));
    }
    let mut years: Vec<i32> = reports.iter().flat_map(|r| r.years.keys().copied()).collect();
    years.sort_unstable();
    years.dedup();
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            config_id: r.config_id.clone(),
            mae: years.iter().map(|y| r.years.get(y).map(|m| m.mae)).collect(),
            avg: r.average_mae(),
        })
        .collect();
    rows.sort_by(|a, b| a.avg.total_cmp(&b.avg));
    Ok(ComparisonTable { years, rows })
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    /// Aligned text; numbers use the same two-decimal rendering as
    /// [`ComparisonTable::rounded`].
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.config_id.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<name_w$}", "config");
        for y in &self.years {
            s.push_str(&format!(" {y:>8}"));
        }
        s.push_str(&format!(" {:>8}\n", "Avg"));
        for r in &self.rows {
            s.push_str(&format!("{:<name_w$}", r.config_id));
            for v in &r.mae {
                match v {
                    Some(v) => s.push_str(&format!(" {v:>8.2}")),
                    None => s.push_str(&format!(" {:>8}", "-")),
                }
            }
            s.push_str(&format!(" {:>8.2}\n", r.avg));
        }
        s
    }

    /// Every number of the table at two decimals, row-major with the
    /// average last.
    pub fn rounded(&self) -> Vec<Vec<Option<String>>> {
        self.rows
            .iter()
            .map(|r| {
                r.mae
                    .iter()
                    .map(|v| v.map(|v| format!("{v:.2}")))
                    .chain(std::iter::once(Some(format!("{:.2}", r.avg))))
                    .collect()
            })
            .collect()
    }
}
