//! One function per subcommand. Each loads its config, applies overrides,
//! runs, and writes `config.json` plus `manifest.json` into `out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cht_core::evaluation::experiment::{predict_sample, run_ablation, AblationConfig, AblationResult};
use cht_core::evaluation::{
    compare_configs, labels_in_windows, sample_validation_points, strata_at, stratified_metrics, EvalReport, Metrics,
    DEFAULT_VALIDATION_PATCH_PX, R2_THRESHOLD_M,
};
use cht_core::geodata::{archive_read, archive_write, Label};
use cht_core::inference::{
    jobs_from_samples, plan_tiles, run_pipeline, tile_sample, ArchiveSource, PipelineContext, PipelineStats, TilePlan,
    WindowJob, Workers, DEFAULT_MARGIN_PX, DEFAULT_WINDOW_PX,
};
use cht_core::preprocess::NormTable;
use cht_core::synthscene::{gen_truth, synth_sample, SceneConfig};
use cht_core::temporal::{change_report, detect_loss, smooth_map, DEFAULT_SMOOTHING, LOSS_HI_M, LOSS_LO_M};
use cht_core::training::{encode_dataset, train, write_log_csv, TrainConfig};
use cht_core::{Checkpoint, Error, RasterPatch, Result, SampleArchive};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{canonical_json, config_hash, versions, RunManifest, CONFIG_FILE, MANIFEST_FILE};
use crate::{expand_inputs, load_config, require_path, resolve};

pub const ARCHIVE_EXT: &str = "zip";
pub const RASTER_EXT: &str = "raster";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const NORM_TABLE_FILE: &str = "norm_table.json";
pub const PLAN_FILE: &str = "plan.json";

/// What a command body reports back for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

struct Run<C> {
    config: C,
    base: PathBuf,
    out: PathBuf,
}

fn start<C: DeserializeOwned>(config_path: &Path, out: &Path) -> Result<Run<C>> {
    let config = load_config(config_path)?;
    let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(out)?;
    Ok(Run {
        config,
        base,
        out: out.to_path_buf(),
    })
}

fn finish<C: Serialize>(command: &str, run: &Run<C>, t0: Instant, outcome: Outcome) -> Result<RunManifest> {
    let canonical = canonical_json(&run.config)?;
    std::fs::write(run.out.join(CONFIG_FILE), &canonical)?;
    let m = RunManifest {
        command: command.to_string(),
        config_hash: config_hash(&canonical),
        seed: outcome.seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        versions: versions(),
        wall_secs: t0.elapsed().as_secs_f64(),
    };
    std::fs::write(run.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

fn write(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text)?;
    outputs.push(path);
    Ok(())
}

fn save_raster(r: &RasterPatch, path: PathBuf, outputs: &mut Vec<PathBuf>) -> Result<()> {
    r.save(&path)?;
    outputs.push(path);
    Ok(())
}

fn read_archives(paths: &[PathBuf]) -> Result<Vec<SampleArchive>> {
    paths.iter().map(|p| archive_read(p)).collect()
}

// ---------------------------------------------------------------------------

fn d_prefix() -> String {
    "scene".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCmd {
    pub scene: SceneConfig,
    #[serde(default = "d_prefix")]
    pub prefix: String,
}

/// One archive and one truth raster per year, plus the forest-type raster.
pub fn cmd_synth(config: &Path, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let run: Run<SynthCmd> = start(config, out)?;
    let c = &run.config;
    c.scene.validate()?;
    let truth = gen_truth(&c.scene)?;
    let mut outputs = Vec::new();
    for &y in &c.scene.years {
        let s = synth_sample(&truth, y, &c.scene, &format!("{}_{}", c.prefix, y))?;
        let p = out.join(format!("{}_{}.{ARCHIVE_EXT}", c.prefix, y));
        archive_write(&s, &p)?;
        outputs.push(p);
        save_raster(&truth.height_raster(y)?, out.join(format!("truth_{y}.{RASTER_EXT}")), &mut outputs)?;
    }
    save_raster(&truth.type_raster(), out.join(format!("forest_type.{RASTER_EXT}")), &mut outputs)?;
    finish(
        "synth",
        &run,
        t0,
        Outcome {
            seed: Some(c.scene.seed),
            inputs: vec![],
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

fn d_window() -> usize {
    DEFAULT_WINDOW_PX
}
fn d_margin() -> usize {
    DEFAULT_MARGIN_PX
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessCmd {
    pub inputs: Vec<PathBuf>,
    #[serde(default = "d_window")]
    pub window_px: usize,
    #[serde(default = "d_margin")]
    pub margin_px: usize,
}

/// Window archives of one tiled extent, as written by `preprocess`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPlan {
    pub plan: TilePlan,
    pub origin: (f64, f64),
    pub resolution: f64,
    pub entries: Vec<PlanEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub year: i32,
    pub window: usize,
    /// Relative to the plan file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub archives: usize,
    pub windows: usize,
    pub labels_per_year: BTreeMap<i32, usize>,
    pub extent_px: (usize, usize),
}

fn common_grid(samples: &[SampleArchive], key: &str) -> Result<((f64, f64), f64, usize, usize)> {
    let first = &samples[0];
    for s in samples {
        s.validate()?;
        if !s.s1_composite.same_grid(&first.s1_composite) {
            return Err(Error::Config(format!(
                "key `{key}`: archives `{}` and `{}` are not on one grid",
                first.patch_id, s.patch_id
            )));
        }
    }
    Ok((first.s1_composite.origin(), first.s1_composite.resolution(), first.height(), first.width()))
}

/// Validates full-extent archives and cuts them into overlapping
/// inference windows with a `plan.json` index.
pub fn cmd_preprocess(config: &Path, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let run: Run<PreprocessCmd> = start(config, out)?;
    let c = &run.config;
    let inputs = expand_inputs(&run.base, "inputs", &c.inputs, ARCHIVE_EXT)?;
    let samples = read_archives(&inputs)?;
    let (origin, resolution, h, w) = common_grid(&samples, "inputs")?;
    let plan = plan_tiles(h, w, c.window_px, c.margin_px).map_err(|e| Error::Config(format!("key `window_px`: {e}")))?;
    let dir = out.join("windows");
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    let mut labels_per_year = BTreeMap::new();
    for s in &samples {
        *labels_per_year.entry(s.year).or_insert(0) += s.labels.len();
        for (tw, a) in plan.windows.iter().zip(tile_sample(s, &plan)?) {
            let rel = PathBuf::from("windows").join(format!("{}.{ARCHIVE_EXT}", a.patch_id));
            archive_write(&a, &out.join(&rel))?;
            outputs.push(out.join(&rel));
            entries.push(PlanEntry {
                year: s.year,
                window: tw.id,
                path: rel,
            });
        }
    }
    let summary = PreprocessSummary {
        archives: samples.len(),
        windows: entries.len(),
        labels_per_year,
        extent_px: (h, w),
    };
    let prepared = PreparedPlan {
        plan,
        origin,
        resolution,
        entries,
    };
    write(out.join(PLAN_FILE), &serde_json::to_string_pretty(&prepared)?, &mut outputs)?;
    write(out.join("summary.json"), &serde_json::to_string_pretty(&summary)?, &mut outputs)?;
    finish(
        "preprocess",
        &run,
        t0,
        Outcome {
            seed: None,
            inputs,
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmd {
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Divisor table; the built-in one when absent.
    #[serde(default)]
    pub norm_table: Option<PathBuf>,
}

/// A trained model directory: checkpoint, encoding and normalisation.
pub struct Model {
    pub checkpoint: Checkpoint,
    pub encoding: TrainConfig,
    pub table: NormTable,
}

impl Model {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Model {
            checkpoint: Checkpoint::load(&dir.join(MODEL_FILE))?,
            encoding: serde_json::from_str(&std::fs::read_to_string(dir.join(TRAIN_CONFIG_FILE))?)?,
            table: NormTable::load(&dir.join(NORM_TABLE_FILE))?,
        })
    }
}

pub fn cmd_train(config: &Path, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let run: Run<TrainCmd> = start(config, out)?;
    let c = &run.config;
    c.train.validate()?;
    let mut inputs = expand_inputs(&run.base, "inputs", &c.inputs, ARCHIVE_EXT)?;
    let table = match &c.norm_table {
        Some(p) => {
            let p = require_path(&run.base, "norm_table", p)?;
            inputs.push(p.clone());
            NormTable::load(&p).map_err(|e| Error::Config(format!("key `norm_table`: {e}")))?
        }
        None => NormTable::default(),
    };
    let samples = read_archives(&inputs[..inputs.len() - c.norm_table.is_some() as usize])?;
    let data = encode_dataset(&samples, &c.train, &table)?;
    let outcome = train(&c.train, &data)?;
    let mut outputs = Vec::new();
    let ckpt = out.join(MODEL_FILE);
    outcome.checkpoint.save(&ckpt)?;
    outputs.push(ckpt);
    write(out.join(TRAIN_CONFIG_FILE), &serde_json::to_string_pretty(&c.train)?, &mut outputs)?;
    let table_map: BTreeMap<String, f64> = table.into();
    write(out.join(NORM_TABLE_FILE), &serde_json::to_string_pretty(&table_map)?, &mut outputs)?;
    let log = out.join("train_log.csv");
    write_log_csv(&outcome.log, &log)?;
    outputs.push(log);
    if let Some(last) = outcome.log.last() {
        eprintln!("trained {} iterations, final loss {:.4}", c.train.iterations, last.loss);
    }
    finish(
        "train",
        &run,
        t0,
        Outcome {
            seed: Some(c.train.seed),
            inputs,
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

fn d_config_id() -> String {
    "model".into()
}
fn d_patch() -> usize {
    DEFAULT_VALIDATION_PATCH_PX
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmd {
    /// Label archives.
    pub inputs: Vec<PathBuf>,
    /// Trained model directory; exclusive with `predictions`.
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    /// Prediction raster per year.
    #[serde(default)]
    pub predictions: BTreeMap<i32, PathBuf>,
    #[serde(default = "d_config_id")]
    pub config_id: String,
    /// Restricts labels to this many random disjoint windows per archive.
    #[serde(default)]
    pub validation_windows: Option<usize>,
    #[serde(default = "d_patch")]
    pub window_px: usize,
    #[serde(default)]
    pub seed: u64,
    /// Forest-type raster on the archive grid, for per-stratum metrics.
    #[serde(default)]
    pub forest_types: Option<PathBuf>,
}

/// Prediction at each label's map position; labels falling outside the
/// prediction or on nodata are dropped.
fn pair_by_location(pred: &RasterPatch, grid: &RasterPatch, labels: &[Label]) -> (Vec<f64>, Vec<f64>, Vec<Label>) {
    let (mut p, mut y, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    for l in labels {
        let (e, n) = grid.pixel_center(l.row as usize, l.col as usize);
        let Some((r, c)) = pred.pixel_of(e, n) else { continue };
        let v = pred.get(0, r, c);
        if v == pred.nodata() || !v.is_finite() {
            continue;
        }
        p.push(v as f64);
        y.push(l.height as f64);
        kept.push(*l);
    }
    (p, y, kept)
}

pub fn cmd_eval(config: &Path, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let run: Run<EvalCmd> = start(config, out)?;
    let c = &run.config;
    let mut inputs = expand_inputs(&run.base, "inputs", &c.inputs, ARCHIVE_EXT)?;
    let samples = read_archives(&inputs)?;
    let model = match (&c.model_dir, c.predictions.is_empty()) {
        (Some(d), true) => {
            let d = require_path(&run.base, "model_dir", d)?;
            inputs.push(d.clone());
            Some(Model::load(&d)?)
        }
        (None, false) => None,
        _ => return Err(Error::Config("exactly one of keys `model_dir` and `predictions` must be set".into())),
    };
    let mut preds = BTreeMap::new();
    for (y, p) in &c.predictions {
        let p = require_path(&run.base, &format!("predictions.{y}"), p)?;
        preds.insert(*y, RasterPatch::load(&p)?);
        inputs.push(p);
    }
    let types = match &c.forest_types {
        Some(p) => {
            let p = require_path(&run.base, "forest_types", p)?;
            inputs.push(p.clone());
            Some(RasterPatch::load(&p)?)
        }
        None => None,
    };
    let mut per_year: BTreeMap<i32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut all_p, mut all_y, mut all_t) = (Vec::new(), Vec::new(), Vec::new());
    let mut pairs_csv = String::from("year,pred,label\n");
    for s in &samples {
        let pred = match &model {
            Some(m) => predict_sample(&m.checkpoint, &m.encoding, s, &m.table)?,
            None => preds
                .get(&s.year)
                .cloned()
                .ok_or_else(|| Error::Config(format!("key `predictions`: no raster for year {}", s.year)))?,
        };
        let labels = match c.validation_windows {
            Some(n) => labels_in_windows(&s.labels, &sample_validation_points(s.height(), s.width(), n, c.seed, c.window_px)?),
            None => s.labels.clone(),
        };
        let (p, y, kept) = pair_by_location(&pred, &s.s1_composite, &labels);
        for (a, b) in p.iter().zip(&y) {
            pairs_csv.push_str(&format!("{},{},{}\n", s.year, a, b));
        }
        if let Some(t) = &types {
            all_t.extend(strata_at(t, &kept)?);
            all_p.extend_from_slice(&p);
            all_y.extend_from_slice(&y);
        }
        let e = per_year.entry(s.year).or_default();
        e.0.extend(p);
        e.1.extend(y);
    }
    let report = EvalReport::build(&c.config_id, &per_year)?;
    let mut outputs = Vec::new();
    write(out.join("report.json"), &serde_json::to_string_pretty(&report)?, &mut outputs)?;
    let mut text = compare_configs(std::slice::from_ref(&report))?.to_text();
    text.push('\n');
    text.push_str(&format!("{:>6} {:>8} {:>9} {:>7} {:>7} {:>8}\n", "year", "mae", "mse", "r2", "r2_7", "labels"));
    for (y, m) in &report.years {
        let r27 = m.r2_7.map_or("-".to_string(), |v| format!("{v:.3}"));
        text.push_str(&format!("{y:>6} {:>8.3} {:>9.3} {:>7.3} {r27:>7} {:>8}\n", m.mae, m.mse, m.r2, m.n_labels));
    }
    write(out.join("report.txt"), &text, &mut outputs)?;
    write(out.join("pairs.csv"), &pairs_csv, &mut outputs)?;
    if types.is_some() {
        let strata: BTreeMap<String, Metrics> = stratified_metrics(&all_p, &all_y, &all_t, None)?;
        let strata7 = stratified_metrics(&all_p, &all_y, &all_t, Some(R2_THRESHOLD_M))?;
        let v = serde_json::json!({ "all": strata, "above_7m": strata7 });
        write(out.join("strata.json"), &serde_json::to_string_pretty(&v)?, &mut outputs)?;
    }
    print!("{text}");
    finish(
        "eval",
        &run,
        t0,
        Outcome {
            seed: Some(c.seed),
            inputs,
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

fn d_workers() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferCmd {
    pub model_dir: PathBuf,
    /// `plan.json` from `preprocess`; exclusive with `inputs`.
    #[serde(default)]
    pub plan: Option<PathBuf>,
    /// Full-extent archives tiled in memory.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default = "d_window")]
    pub window_px: usize,
    #[serde(default = "d_margin")]
    pub margin_px: usize,
    #[serde(default = "d_workers")]
    pub decoders: usize,
    #[serde(default = "d_workers")]
    pub inferrers: usize,
}

/// Command-line overrides for [`cmd_infer`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InferFlags {
    pub decoders: Option<usize>,
    pub inferrers: Option<usize>,
    pub window: Option<usize>,
    pub margin: Option<usize>,
}

pub fn cmd_infer(config: &Path, out: &Path, flags: InferFlags) -> Result<RunManifest> {
    let t0 = Instant::now();
    let mut run: Run<InferCmd> = start(config, out)?;
    let c = &mut run.config;
    c.decoders = flags.decoders.unwrap_or(c.decoders);
    c.inferrers = flags.inferrers.unwrap_or(c.inferrers);
    c.window_px = flags.window.unwrap_or(c.window_px);
    c.margin_px = flags.margin.unwrap_or(c.margin_px);
    let c = &run.config;
    let model_dir = require_path(&run.base, "model_dir", &c.model_dir)?;
    let model = Model::load(&model_dir)?;
    let mut inputs = vec![model_dir];
    let (plan, origin, resolution, jobs) = match (&c.plan, c.inputs.is_empty()) {
        (Some(p), true) => {
            let p = require_path(&run.base, "plan", p)?;
            let prepared: PreparedPlan = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let jobs = prepared
                .entries
                .iter()
                .map(|e| WindowJob {
                    year: e.year,
                    window: e.window,
                    source: ArchiveSource::Path(resolve(&dir, &e.path)),
                })
                .collect();
            inputs.push(p);
            (prepared.plan, prepared.origin, prepared.resolution, jobs)
        }
        (None, false) => {
            let paths = expand_inputs(&run.base, "inputs", &c.inputs, ARCHIVE_EXT)?;
            let samples = read_archives(&paths)?;
            let (origin, resolution, h, w) = common_grid(&samples, "inputs")?;
            let plan = plan_tiles(h, w, c.window_px, c.margin_px).map_err(|e| Error::Config(format!("key `window_px`: {e}")))?;
            let jobs = jobs_from_samples(&samples, &plan)?;
            inputs.extend(paths);
            (plan, origin, resolution, jobs)
        }
        _ => return Err(Error::Config("exactly one of keys `plan` and `inputs` must be set".into())),
    };
    let ctx = PipelineContext {
        plan: &plan,
        checkpoint: &model.checkpoint,
        encoding: &model.encoding,
        table: &model.table,
        origin,
        resolution,
        progress: true,
    };
    let res = run_pipeline(
        &jobs,
        &ctx,
        Workers {
            decoders: c.decoders,
            inferrers: c.inferrers,
        },
    )?;
    let mut outputs = Vec::new();
    for (y, r) in &res.rasters {
        save_raster(r, out.join(format!("height_{y}.{RASTER_EXT}")), &mut outputs)?;
    }
    let stats: &PipelineStats = &res.stats;
    write(out.join("stats.json"), &serde_json::to_string_pretty(stats)?, &mut outputs)?;
    finish(
        "infer",
        &run,
        t0,
        Outcome {
            seed: None,
            inputs,
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

fn d_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}
fn d_hi() -> f64 {
    LOSS_HI_M
}
fn d_lo() -> f64 {
    LOSS_LO_M
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessCmd {
    /// Height map per year.
    #[serde(default)]
    pub maps: BTreeMap<i32, PathBuf>,
    /// Directory of `height_<year>.raster` files, as written by `infer`.
    #[serde(default)]
    pub map_dir: Option<PathBuf>,
    #[serde(default = "d_smoothing")]
    pub smoothing: f64,
    #[serde(default = "d_true")]
    pub smooth: bool,
    #[serde(default = "d_hi")]
    pub loss_hi_m: f64,
    #[serde(default = "d_lo")]
    pub loss_lo_m: f64,
}

fn maps_in_dir(dir: &Path) -> Result<BTreeMap<i32, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(y) = name
            .strip_prefix("height_")
            .and_then(|r| r.strip_suffix(&format!(".{RASTER_EXT}")))
            .and_then(|y| y.parse::<i32>().ok())
        {
            out.insert(y, p);
        }
    }
    Ok(out)
}

/// Optional per-pixel spline smoothing over years, then loss masks and the
/// per-pair area report.
pub fn cmd_postprocess(config: &Path, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let run: Run<PostprocessCmd> = start(config, out)?;
    let c = &run.config;
    if !(c.smoothing >= 0.0) {
        return Err(Error::Config(format!("key `smoothing`: must be >= 0, got {}", c.smoothing)));
    }
    let mut paths = BTreeMap::new();
    if let Some(d) = &c.map_dir {
        paths = maps_in_dir(&require_path(&run.base, "map_dir", d)?)?;
    }
    for (y, p) in &c.maps {
        paths.insert(*y, require_path(&run.base, &format!("maps.{y}"), p)?);
    }
    if paths.len() < 2 {
        return Err(Error::Config(format!("keys `maps`/`map_dir`: need at least 2 yearly maps, found {}", paths.len())));
    }
    let years: Vec<i32> = paths.keys().copied().collect();
    let raw: Vec<RasterPatch> = paths.values().map(|p| RasterPatch::load(p)).collect::<Result<_>>()?;
    let mut outputs = Vec::new();
    let maps = if c.smooth {
        let sm = smooth_map(&raw, &years, c.smoothing)?;
        for (y, r) in years.iter().zip(&sm) {
            save_raster(r, out.join(format!("smoothed_{y}.{RASTER_EXT}")), &mut outputs)?;
        }
        sm
    } else {
        raw
    };
    let pairs: Vec<(i32, RasterPatch)> = years.iter().copied().zip(maps).collect();
    for w in pairs.windows(2) {
        let (mask, _) = detect_loss(&w[0].1, &w[1].1, c.loss_hi_m, c.loss_lo_m)?;
        save_raster(&mask, out.join(format!("loss_{}_{}.{RASTER_EXT}", w[0].0, w[1].0)), &mut outputs)?;
    }
    let report = change_report(&pairs, c.loss_hi_m, c.loss_lo_m)?;
    write(out.join("change.json"), &report.to_json(), &mut outputs)?;
    write(out.join("change.txt"), &report.to_text(), &mut outputs)?;
    write(out.join("change.csv"), &report.to_csv(), &mut outputs)?;
    print!("{}", report.to_text());
    finish(
        "postprocess",
        &run,
        t0,
        Outcome {
            seed: None,
            inputs: paths.into_values().collect(),
            outputs,
        },
    )
}

// ---------------------------------------------------------------------------

/// Month and band subsets on the synthetic benchmark.
pub fn cmd_ablate(config: &Path, out: &Path) -> Result<(RunManifest, AblationResult)> {
    let t0 = Instant::now();
    let run: Run<AblationConfig> = start(config, out)?;
    let c = &run.config;
    c.train.validate()?;
    let res = run_ablation(c, &mut |s| eprintln!("{s}"))?;
    let mut outputs = Vec::new();
    write(out.join("ablation.json"), &res.to_json(), &mut outputs)?;
    write(out.join("ablation.txt"), &res.to_text(), &mut outputs)?;
    print!("{}", res.to_text());
    let m = finish(
        "ablate",
        &run,
        t0,
        Outcome {
            seed: c.seeds.first().copied(),
            inputs: vec![],
            outputs,
        },
    )?;
    Ok((m, res))
}
