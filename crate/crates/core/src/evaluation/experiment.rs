//! Desk-scale experiment harness: the configuration benchmark, the
//! month/band ablation and the shift-recovery run, all on synthetic scenes
//! with dense truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{compare_configs, metrics, BinError, ComparisonTable, EvalReport, YearMetrics};
use crate::error::{Error, Result};
use crate::geodata::{Label, RasterPatch, SampleArchive};
use crate::neuralnet::{predict, Checkpoint};
use crate::preprocess::{InputVariant, NormTable};
use crate::synthscene::{
    gen_truth, offset_to_shift, sample_gedi_tracks, synth_sample, ChangeEvent, ChangeKind, Rect, SceneConfig, TruthField,
};
use crate::temporal::{detect_loss, mask_iou, LOSS_HI_M, LOSS_LO_M};
use crate::training::{encode_dataset, loss, train, SparseLabelBatch, TrainConfig};

fn d_seeds() -> Vec<u64> {
    (1..=5).collect()
}
fn d_size() -> usize {
    128
}
fn d_years() -> Vec<i32> {
    vec![2019, 2020, 2021, 2022]
}
fn d_density() -> f64 {
    0.03
}
fn d_offset() -> u64 {
    1000
}
fn d_single() -> i32 {
    2020
}
fn d_variants() -> Vec<InputVariant> {
    InputVariant::ALL.to_vec()
}
fn d_cut() -> usize {
    40
}
fn d_cut_year() -> i32 {
    2021
}
fn d_bench_train() -> TrainConfig {
    TrainConfig {
        iterations: 1000,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

/// Scene layout shared by every experiment: a train scene at `seed` and a
/// held-out scene at `seed + test_seed_offset`, each with one clear-cut
/// and one growth patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScene {
    #[serde(default = "d_size")]
    pub size_px: usize,
    #[serde(default = "d_years")]
    pub years: Vec<i32>,
    #[serde(default = "d_density")]
    pub label_density: f64,
    #[serde(default = "d_offset")]
    pub test_seed_offset: u64,
    /// Side of the square clear-cut (px); 0 disables it.
    #[serde(default = "d_cut")]
    pub clear_cut_px: usize,
    #[serde(default = "d_cut_year")]
    pub clear_cut_year: i32,
}

impl Default for BenchScene {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl BenchScene {
    /// Scene description for `seed`; event positions move with the seed.
    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        let mut c = SceneConfig::new(seed);
        c.size_px = self.size_px;
        c.years = self.years.clone();
        c.label_density = self.label_density;
        if let Some(r) = self.clear_cut_region(seed) {
            c.events.push(ChangeEvent {
                kind: ChangeKind::ClearCut,
                region: r,
                year: self.clear_cut_year,
                magnitude: 0.0,
            });
        }
        let g = (self.size_px / 5).max(1);
        let slack = self.size_px - g;
        c.events.push(ChangeEvent {
            kind: ChangeKind::Growth,
            region: Rect {
                row0: ((seed * 53 + 7) as usize) % (slack + 1),
                col0: ((seed * 29 + 3) as usize) % (slack + 1),
                height: g,
                width: g,
            },
            year: self.years.get(1).copied().unwrap_or(2020),
            magnitude: 1.0,
        });
        c
    }

    pub fn clear_cut_region(&self, seed: u64) -> Option<Rect> {
        if self.clear_cut_px == 0 || self.clear_cut_px > self.size_px {
            return None;
        }
        let slack = self.size_px - self.clear_cut_px;
        Some(Rect {
            row0: ((seed * 37 + 11) as usize) % (slack + 1),
            col0: ((seed * 71 + 5) as usize) % (slack + 1),
            height: self.clear_cut_px,
            width: self.clear_cut_px,
        })
    }
}

/// One synthetic scene rendered for every year.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub config: SceneConfig,
    pub truth: TruthField,
    pub samples: Vec<SampleArchive>,
}

pub fn render_scene(config: SceneConfig, prefix: &str) -> Result<SceneData> {
    let truth = gen_truth(&config)?;
    let samples = config
        .years
        .iter()
        .map(|&y| synth_sample(&truth, y, &config, &format!("{prefix}_{y}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneData { config, truth, samples })
}

/// Full-sample prediction as a one-band `height` raster on the sample grid.
pub fn predict_sample(ckpt: &Checkpoint, cfg: &TrainConfig, sample: &SampleArchive, table: &NormTable) -> Result<RasterPatch> {
    let x = cfg.encode(sample, table)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let y = predict(&ckpt.spec, &ckpt.params, &x.reshape(&shape)?)?;
    let grid = &sample.s1_composite;
    RasterPatch::new(
        grid.origin(),
        grid.resolution(),
        vec!["height".into()],
        sample.width(),
        sample.height(),
        y.data().to_vec(),
        grid.nodata(),
    )
}

/// `(pred, truth)` over every pixel.
pub fn dense_pairs(pred: &RasterPatch, truth: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.data().len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truth pixels", pred.data().len(), truth.len())));
    }
    Ok((pred.data().iter().map(|&v| v as f64).collect(), truth.iter().map(|&v| v as f64).collect()))
}

fn region_mask(template: &RasterPatch, r: &Rect) -> Result<RasterPatch> {
    let (h, w) = (template.height(), template.width());
    let data = (0..h * w).map(|i| if r.contains(i / w, i % w) { 1.0 } else { 0.0 }).collect();
    RasterPatch::new(template.origin(), template.resolution(), vec!["loss".into()], w, h, data, template.nodata())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Element-wise median of reports sharing one config id.
pub fn median_report(reports: &[&EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::InsufficientData("no reports".into()))?;
    let mut years = BTreeMap::new();
    for &y in first.years.keys() {
        let ms: Vec<&YearMetrics> = reports.iter().filter_map(|r| r.years.get(&y)).collect();
        let r2_7: Vec<f64> = ms.iter().filter_map(|m| m.r2_7).collect();
        years.insert(
            y,
            YearMetrics {
                mae: median(ms.iter().map(|m| m.mae).collect()),
                mse: median(ms.iter().map(|m| m.mse).collect()),
                r2: median(ms.iter().map(|m| m.r2).collect()),
                r2_7: (!r2_7.is_empty()).then(|| median(r2_7)),
                n_labels: ms.iter().map(|m| m.n_labels).min().unwrap_or(0),
            },
        );
    }
    let bins = first
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.bins.get(i).and_then(|b| b.mean_error)).collect();
            BinError {
                count: reports.iter().filter_map(|r| r.bins.get(i)).map(|b| b.count).sum(),
                mean_error: (!vals.is_empty()).then(|| median(vals)),
                ..*b
            }
        })
        .collect();
    Ok(EvalReport {
        config_id: first.config_id.clone(),
        years,
        bins,
    })
}

// ---------------------------------------------------------------------------
// configuration benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scene: BenchScene,
    /// Year of the single-year rows.
    #[serde(default = "d_single")]
    pub single_year: i32,
    #[serde(default = "d_variants")]
    pub variants: Vec<InputVariant>,
    /// Template; `variant`, `years` and `seed` are set per run.
    #[serde(default = "d_bench_train")]
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    /// IoU of the loss mask from predicted maps against the clear-cut, by config id.
    pub clear_cut_iou: BTreeMap<String, f64>,
    /// Same mask computed on the truth maps.
    pub truth_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub per_seed: Vec<SeedResult>,
    /// Per-config medians over seeds.
    pub medians: Vec<EvalReport>,
    pub table: ComparisonTable,
}

impl BenchmarkResult {
    pub fn median_avg(&self, config_id: &str) -> Option<f64> {
        self.medians.iter().find(|r| r.config_id == config_id).map(EvalReport::average_mae)
    }

    pub fn median_iou(&self, config_id: &str) -> Option<f64> {
        let v: Vec<f64> = self.per_seed.iter().filter_map(|s| s.clear_cut_iou.get(config_id).copied()).collect();
        (!v.is_empty()).then(|| median(v))
    }
}

pub const MULTI_YEAR: &str = "MultiYear";

pub fn config_id(variant: InputVariant, years: Option<i32>) -> String {
    match years {
        Some(y) => format!("{}-{}", variant.name(), y),
        None => format!("{}-{}", variant.name(), MULTI_YEAR),
    }
}

/// Trains every variant on the train scene (single year and all years)
/// and scores it against the dense truth of the held-out scene.
pub fn run_benchmark(cfg: &BenchmarkConfig, progress: &mut dyn FnMut(&str)) -> Result<BenchmarkResult> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed and one variant".into()));
    }
    if !cfg.scene.years.contains(&cfg.single_year) {
        return Err(Error::Config(format!("single_year {} not among scene years", cfg.single_year)));
    }
    let table = NormTable::default();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let train_scene = render_scene(cfg.scene.scene_config(seed), &format!("train{seed}"))?;
        let test_seed = seed + cfg.scene.test_seed_offset;
        let test_scene = render_scene(cfg.scene.scene_config(test_seed), &format!("test{test_seed}"))?;
        let cut = cfg.scene.clear_cut_region(test_seed);
        let cut_pair = cut.and_then(|_| {
            let y = cfg.scene.clear_cut_year;
            cfg.scene.years.contains(&(y - 1)).then_some((y - 1, y))
        });
        let truth_iou = match (cut, cut_pair) {
            (Some(r), Some((a, b))) => {
                let (m, _) = detect_loss(&test_scene.truth.height_raster(a)?, &test_scene.truth.height_raster(b)?, LOSS_HI_M, LOSS_LO_M)?;
                Some(mask_iou(&m, &region_mask(&m, &r)?)?)
            }
            _ => None,
        };
        let mut reports = Vec::new();
        let mut ious = BTreeMap::new();
        for &variant in &cfg.variants {
            for years in [Some(cfg.single_year), None] {
                let id = config_id(variant, years);
                let mut tc = cfg.train.clone();
                tc.variant = variant;
                tc.years = years.map(|y| vec![y]).unwrap_or_default();
                tc.seed = seed;
                let data = encode_dataset(&train_scene.samples, &tc, &table)?;
                let t0 = std::time::Instant::now();
                let out = train(&tc, &data)?;
                let mut per_year = BTreeMap::new();
                let mut maps = BTreeMap::new();
                for s in &test_scene.samples {
                    let pred = predict_sample(&out.checkpoint, &tc, s, &table)?;
                    per_year.insert(s.year, dense_pairs(&pred, test_scene.truth.heights_for(s.year)?)?);
                    maps.insert(s.year, pred);
                }
                let report = EvalReport::build(&id, &per_year)?;
                if let (Some(r), Some((a, b))) = (cut, cut_pair) {
                    let (m, _) = detect_loss(&maps[&a], &maps[&b], LOSS_HI_M, LOSS_LO_M)?;
                    ious.insert(id.clone(), mask_iou(&m, &region_mask(&m, &r)?)?);
                }
                progress(&format!(
                    "seed {seed} {id}: avg MAE {:.3} ({:.0} s)",
                    report.average_mae(),
                    t0.elapsed().as_secs_f64()
                ));
                reports.push(report);
            }
        }
        per_seed.push(SeedResult {
            seed,
            reports,
            clear_cut_iou: ious,
            truth_iou,
        });
    }
    let mut medians = Vec::new();
    for r in &per_seed[0].reports {
        let same: Vec<&EvalReport> = per_seed
            .iter()
            .filter_map(|s| s.reports.iter().find(|x| x.config_id == r.config_id))
            .collect();
        medians.push(median_report(&same)?);
    }
    let table = compare_configs(&medians)?;
    Ok(BenchmarkResult { per_seed, medians, table })
}

// ---------------------------------------------------------------------------
// month / band ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub months: Vec<u8>,
    #[serde(default)]
    pub drop_bands: Vec<String>,
}

fn d_rows() -> Vec<AblationRow> {
    let row = |name: &str, months: [u8; 4], drop: &[&str]| AblationRow {
        name: name.into(),
        months: months.to_vec(),
        drop_bands: drop.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        row("Winter (Nov-Feb)", [11, 12, 1, 2], &[]),
        row("Summer (Jun-Sep)", [6, 7, 8, 9], &[]),
        row("Mixed (Jan-Feb, Aug-Sep)", [1, 2, 8, 9], &[]),
        row("Mixed without B01, B09", [1, 2, 8, 9], &["B01", "B09"]),
    ]
}

fn d_ablation_train() -> TrainConfig {
    TrainConfig {
        iterations: 1000,
        batch_size: 8,
        variant: InputVariant::Stack3d,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scene: BenchScene,
    #[serde(default = "d_rows")]
    pub rows: Vec<AblationRow>,
    /// Template; `months`, `drop_bands` and `seed` are set per run.
    #[serde(default = "d_ablation_train")]
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScore {
    /// Masked Huber on the held-out scene's labels, all years pooled.
    pub val_loss: f64,
    /// Mean Huber against the dense truth.
    pub dense_loss: f64,
    pub dense_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResultRow {
    pub name: String,
    pub months: Vec<u8>,
    pub bands: usize,
    pub per_seed: Vec<AblationScore>,
    pub median: AblationScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationResultRow>,
}

impl AblationResult {
    pub fn row(&self, name_prefix: &str) -> Option<&AblationResultRow> {
        self.rows.iter().find(|r| r.name.starts_with(name_prefix))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    /// Table with one row per subset: months, band count and the median
    /// validation loss, then the dense-truth columns.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<w$} {:>16} {:>5} {:>9} {:>10} {:>9}\n", "subset", "months", "bands", "val loss", "dense loss", "dense MAE");
        for r in &self.rows {
            let months = r.months.iter().map(u8::to_string).collect::<Vec<_>>().join(",");
            s.push_str(&format!(
                "{:<w$} {:>16} {:>5} {:>9.3} {:>10.3} {:>9.3}\n",
                r.name, months, r.bands, r.median.val_loss, r.median.dense_loss, r.median.dense_mae
            ));
        }
        s
    }
}

fn huber_mean(p: &[f64], y: &[f64], delta: f64) -> f64 {
    p.iter().zip(y).map(|(a, b)| loss::huber(a - b, delta)).sum::<f64>() / p.len().max(1) as f64
}

fn label_pairs(pred: &RasterPatch, labels: &[Label]) -> (Vec<f64>, Vec<f64>) {
    let w = pred.width();
    labels
        .iter()
        .map(|l| (pred.data()[l.row as usize * w + l.col as usize] as f64, l.height as f64))
        .unzip()
}

pub fn run_ablation(cfg: &AblationConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationResult> {
    if cfg.seeds.is_empty() || cfg.rows.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one row".into()));
    }
    let table = NormTable::default();
    let mut scores: Vec<Vec<AblationScore>> = vec![Vec::new(); cfg.rows.len()];
    for &seed in &cfg.seeds {
        let train_scene = render_scene(cfg.scene.scene_config(seed), &format!("train{seed}"))?;
        let test_seed = seed + cfg.scene.test_seed_offset;
        let test_scene = render_scene(cfg.scene.scene_config(test_seed), &format!("test{test_seed}"))?;
        for (k, row) in cfg.rows.iter().enumerate() {
            let mut tc = cfg.train.clone();
            tc.months = Some(row.months.clone());
            tc.drop_bands = row.drop_bands.clone();
            tc.temporal_schedule = None;
            tc.seed = seed;
            let data = encode_dataset(&train_scene.samples, &tc, &table)?;
            let out = train(&tc, &data)?;
            let (mut lp, mut ly, mut dp, mut dy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in &test_scene.samples {
                let pred = predict_sample(&out.checkpoint, &tc, s, &table)?;
                let (p, y) = label_pairs(&pred, &s.labels);
                lp.extend(p);
                ly.extend(y);
                let (p, y) = dense_pairs(&pred, test_scene.truth.heights_for(s.year)?)?;
                dp.extend(p);
                dy.extend(y);
            }
            if lp.is_empty() {
                return Err(Error::InsufficientData(format!("held-out scene {test_seed} has no labels")));
            }
            let score = AblationScore {
                val_loss: huber_mean(&lp, &ly, tc.huber_delta),
                dense_loss: huber_mean(&dp, &dy, tc.huber_delta),
                dense_mae: metrics(&dp, &dy, None)?.mae,
            };
            progress(&format!("seed {seed} {}: val loss {:.4}, dense MAE {:.3}", row.name, score.val_loss, score.dense_mae));
            scores[k].push(score);
        }
    }
    let rows = cfg
        .rows
        .iter()
        .zip(scores)
        .map(|(r, per_seed)| AblationResultRow {
            name: r.name.clone(),
            months: r.months.clone(),
            bands: 12 - r.drop_bands.len(),
            median: AblationScore {
                val_loss: median(per_seed.iter().map(|s| s.val_loss).collect()),
                dense_loss: median(per_seed.iter().map(|s| s.dense_loss).collect()),
                dense_mae: median(per_seed.iter().map(|s| s.dense_mae).collect()),
            },
            per_seed,
        })
        .collect();
    Ok(AblationResult {
        seeds: cfg.seeds.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// shift recovery

fn d_choices() -> Vec<(f64, f64)> {
    vec![(10.0, 0.0), (-10.0, 0.0), (0.0, 10.0), (0.0, -10.0)]
}
fn d_min_labels() -> usize {
    5
}
fn d_no_jitter() -> Option<f64> {
    Some(0.0)
}
// A one-pixel shift is only identifiable through per-pixel canopy texture,
// so this run trades the default clipping for a model that can fit it.
fn d_shift_train() -> TrainConfig {
    TrainConfig {
        iterations: 5000,
        batch_size: 8,
        variant: InputVariant::Stack2d,
        lr: 3e-3,
        clip_norm: 100.0,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftRecoveryConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: BenchScene,
    /// Per-track offsets (easting, northing) in metres.
    #[serde(default = "d_choices")]
    pub offsets_m: Vec<(f64, f64)>,
    /// Tracks with fewer labels in the scene are not scored.
    #[serde(default = "d_min_labels")]
    pub min_track_labels: usize,
    /// Overrides the scene's per-pixel canopy roughness (m).
    #[serde(default)]
    pub texture_sigma_m: Option<f64>,
    /// Overrides the scene's per-acquisition imagery shift (m). Jitter blurs
    /// the texture the shift choice depends on, so it is off by default.
    #[serde(default = "d_no_jitter")]
    pub geo_jitter_sigma_m: Option<f64>,
    /// Overrides the scene's optical noise fraction.
    #[serde(default)]
    pub s2_noise: Option<f64>,
    #[serde(default = "d_shift_train")]
    pub train: TrainConfig,
}

impl Default for ShiftRecoveryConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecoveryResult {
    pub tracks_scored: usize,
    pub tracks_recovered: usize,
    pub batches: usize,
    /// Batches whose shift loss exceeded the plain masked loss.
    pub violations: usize,
    pub final_loss: f64,
}

impl ShiftRecoveryResult {
    pub fn fraction(&self) -> f64 {
        self.tracks_recovered as f64 / self.tracks_scored.max(1) as f64
    }
}

/// Trains on a scene whose tracks carry one-pixel offsets, then checks
/// which shift the trained model picks for each whole track.
pub fn run_shift_recovery(cfg: &ShiftRecoveryConfig, progress: &mut dyn FnMut(&str)) -> Result<ShiftRecoveryResult> {
    if cfg.offsets_m.is_empty() {
        return Err(Error::Config("offsets_m must not be empty".into()));
    }
    let mut sc = cfg.scene.scene_config(cfg.seed);
    sc.track_offset_choices = cfg.offsets_m.clone();
    sc.track_offset_fixed = None;
    if let Some(t) = cfg.texture_sigma_m {
        sc.texture_sigma = t;
    }
    if let Some(j) = cfg.geo_jitter_sigma_m {
        sc.geo_jitter_sigma = j;
    }
    if let Some(v) = cfg.s2_noise {
        sc.s2_noise = v;
    }
    let scene = render_scene(sc.clone(), "shift")?;
    let table = NormTable::default();
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let data = encode_dataset(&scene.samples, &tc, &table)?;
    let out = train(&tc, &data)?;
    let violations = out.losses.iter().zip(&out.plain_losses).filter(|(s, p)| !(*s <= *p)).count();
    progress(&format!(
        "trained {} batches, final loss {:.4}, {} violations",
        out.losses.len(),
        out.losses.last().copied().unwrap_or(f64::NAN),
        violations
    ));
    let (mut scored, mut recovered) = (0, 0);
    for s in &scene.samples {
        // the per-track offsets are drawn in track order by the generator
        let (_, offsets) = sample_gedi_tracks(&scene.truth, s.year, &sc)?;
        let pred = predict_sample(&out.checkpoint, &tc, s, &table)?;
        let t = crate::neuralnet::Tensor::new(vec![1, 1, pred.height(), pred.width()], pred.data().to_vec())?;
        let batch = SparseLabelBatch {
            labels: vec![s.labels.clone()],
            years: vec![s.year],
        };
        for ts in loss::selected_shifts(&t, &batch, tc.huber_delta, tc.max_shift_px)? {
            if ts.labels < cfg.min_track_labels {
                continue;
            }
            let Some(&off) = offsets.get(ts.track_id as usize) else {
                return Err(Error::Schema(format!("label track {} has no recorded offset", ts.track_id)));
            };
            scored += 1;
            if ts.shift == offset_to_shift(off) {
                recovered += 1;
            }
        }
    }
    Ok(ShiftRecoveryResult {
        tracks_scored: scored,
        tracks_recovered: recovered,
        batches: out.losses.len(),
        violations,
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_events_stay_inside() {
        let b = BenchScene::default();
        for seed in 0..200 {
            let c = b.scene_config(seed);
            c.validate().unwrap();
            for e in &c.events {
                assert!(e.region.row0 + e.region.height <= b.size_px && e.region.col0 + e.region.width <= b.size_px);
            }
        }
    }

    #[test]
    fn median_report_of_one_is_identity() {
        let mut py = BTreeMap::new();
        py.insert(2020, (vec![1.0, 12.0, 20.0], vec![2.0, 11.0, 24.0]));
        let r = EvalReport::build("x", &py).unwrap();
        assert_eq!(median_report(&[&r]).unwrap(), r);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn tiny_benchmark_runs() {
        let cfg: BenchmarkConfig = serde_json::from_value(serde_json::json!({
            "seeds": [1],
            "scene": {"size_px": 32, "years": [2020, 2021], "clear_cut_px": 12, "label_density": 0.1},
            "variants": ["2d-composite"],
            "train": {"iterations": 3, "batch_size": 2, "crop_px": 16, "base_channels": 2}
        }))
        .unwrap();
        let mut lines = Vec::new();
        let r = run_benchmark(&cfg, &mut |s| lines.push(s.to_string())).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(r.table.rows.len(), 2);
        assert_eq!(r.table.years, vec![2020, 2021]);
        assert_eq!(r.per_seed[0].truth_iou, Some(1.0));
        assert!(r.median_iou("2D-Composite-MultiYear").is_some());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = serde_json::from_str::<AblationConfig>(r#"{"seedz": [1]}"#).unwrap_err().to_string();
        assert!(e.contains("seedz"), "{e}");
    }
}
