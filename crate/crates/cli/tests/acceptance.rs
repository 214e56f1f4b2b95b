//! Acceptance run: one PASS/FAIL line per criterion. Exits 0 unless
//! `CHT_ACCEPTANCE_STRICT=1` is set and a criterion failed.
//! `CHT_ACCEPTANCE_ONLY=a,b` restricts the run to the named criteria.

#[allow(dead_code)]
#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use cht_core::evaluation::experiment::{
    config_id, run_benchmark, run_shift_recovery, BenchmarkConfig, BenchmarkResult, ShiftRecoveryConfig, MULTI_YEAR,
};
use cht_core::geodata::{archive_read, archive_write, SampleMetadata};
use cht_core::inference::{plan_tiles, run_pipeline, run_sequential, throughput, tile_sample, ArchiveSource, PipelineContext, WindowJob, Workers};
use cht_core::neuralnet::param_init;
use cht_core::preprocess::{filter_gedi, normalize_s2, GediShot, NormTable, S1_BANDS, S2_BANDS};
use cht_core::synthscene::{gen_truth, synth_sample, ChangeEvent, ChangeKind, Rect, SceneConfig};
use cht_core::temporal::{smooth_series, HeightSeries};
use cht_core::training::TrainConfig;
use cht_core::{Checkpoint, InputVariant, Label, RasterPatch, SampleArchive};
use common::checks;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SECS: f64 = 60.0;
const CONV_TOL: f64 = 1e-5;
const CONV_CASES: usize = 200;
const NORM_VALUES: usize = 1_000_000;
const GEDI_SHOTS: usize = 100_000;
const SHIFT_FRACTION: f64 = 0.80;
const SPLINE_SERIES: usize = 1000;
const SPLINE_NOISE_M: f64 = 1.5;
const SPLINE_SHIFT_TOL_M: f64 = 1e-6;
const IOU_TRAINED: f64 = 0.8;
const PIPELINE_ARCHIVES: usize = 100;
const SPEEDUP: f64 = 1.3;
const ROUND_TRIPS: usize = 1000;
const SMOKE_SECS: f64 = 15.0 * 60.0;
const SMOKE_ITERS: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = checks::op_gradient_errors(11).into_iter().map(|(n, e)| (n.to_string(), e)).collect();
    let spec3 = checks::tiny_unet_spec();
    let (e3, n3) = checks::unet_gradient_error(&spec3, &[1, 3, 4, 8, 8], 3);
    worst.push((format!("unet3d({n3} params)"), e3));
    let spec2 = cht_core::UNetSpec::conv2d(3, 2, 3);
    let (e2, _) = checks::unet_gradient_error(&spec2, &[2, 3, 8, 8], 4);
    worst.push(("unet2d".into(), e2));
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = max < GRAD_TOL && n3 <= 5000 && secs < GRAD_SECS;
    let list: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(pass, format!("max rel err {max:.2e} < {GRAD_TOL:e}; {secs:.1} s < {GRAD_SECS} s; [{}]", list.join(", ")))
}

fn conv_oracle() -> Outcome {
    let d = checks::conv_oracle_max_diff(CONV_CASES, 7);
    outcome(d < CONV_TOL, format!("{CONV_CASES} shapes, max abs diff {d:.2e} < {CONV_TOL:e}"))
}

fn table1() -> Outcome {
    let want: [(&[&str], f64); 4] = [
        (&["B1"], 0.9e3),
        (&["B2", "B3", "B4", "B5"], 1.8e3),
        (&["B6", "B7", "B11", "B12"], 3.6e3),
        (&["B8", "B8A", "B9"], 5.4e3),
    ];
    let t = NormTable::default();
    let mut ok = want
        .iter()
        .all(|(bands, d)| bands.iter().all(|b| t.divisor(b).map(f64::to_bits) == Some(d.to_bits())));
    ok &= t.divisor("B10").is_none();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = NORM_VALUES.div_ceil(S2_BANDS.len());
    let data: Vec<f32> = (0..px * S2_BANDS.len())
        .map(|i| match i % 1000 {
            0 => f32::NAN,
            1 => f32::INFINITY,
            2 => f32::NEG_INFINITY,
            _ => rng.random_range(-2000.0..20000.0),
        })
        .collect();
    let raster = RasterPatch::new((0.0, 0.0), 10.0, S2_BANDS.iter().map(|s| s.to_string()).collect(), px, 1, data, -9999.0).unwrap();
    let out = normalize_s2(&raster, &t).unwrap();
    let in_range = out.data().iter().all(|v| (0.0..=1.0).contains(v));
    outcome(
        ok && in_range,
        format!("divisors bit-equal: {ok}; {} outputs in [0, 1]: {in_range}", out.data().len()),
    )
}

fn gedi_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pick = |rng: &mut ChaCha8Rng, edge: &[f64], lo: f64, hi: f64| {
        if rng.random::<f64>() < 0.2 {
            edge[rng.random_range(0..edge.len())]
        } else {
            rng.random_range(lo..hi)
        }
    };
    let shots: Vec<GediShot> = (0..GEDI_SHOTS)
        .map(|i| GediShot {
            position: (rng.random_range(0.0..1e4), rng.random_range(0.0..1e4)),
            rh_98: pick(&mut rng, &[0.0, -0.0, 100.0, -1e-9, 100.0 + 1e-9, f64::NAN, f64::INFINITY], -10.0, 140.0),
            beam_id: rng.random_range(0..=11),
            quality_flag: rng.random(),
            degrade_flag: rng.random(),
            sensitivity: pick(&mut rng, &[0.9, 0.9 - 1e-12, 1.0], 0.5, 1.0),
            track_id: (i / 50) as u32,
            year: 2020,
        })
        .collect();
    // written from the predicate list, not from the implementation
    let oracle: Vec<GediShot> = shots
        .iter()
        .filter(|s| {
            let q = s.quality_flag;
            let d = !s.degrade_flag;
            let sens = s.sensitivity >= 0.9;
            let beam = (5..=8).contains(&s.beam_id);
            let rh = s.rh_98 >= 0.0 && s.rh_98 <= 100.0;
            q && d && sens && beam && rh
        })
        .copied()
        .collect();
    let got = filter_gedi(&shots);
    outcome(got == oracle, format!("{GEDI_SHOTS} shots, {} kept, identical to oracle: {}", got.len(), got == oracle))
}

fn shift_recovery() -> Outcome {
    let cfg = ShiftRecoveryConfig::default();
    let t0 = Instant::now();
    let r = run_shift_recovery(&cfg, &mut |s| eprintln!("  shift: {s}")).unwrap();
    outcome(
        r.fraction() >= SHIFT_FRACTION && r.violations == 0,
        format!(
            "{}/{} tracks select the injected shift ({:.1}% vs >= {:.0}%); shift > plain on {} of {} batches; {} iterations, {:.0} s",
            r.tracks_recovered,
            r.tracks_scored,
            100.0 * r.fraction(),
            100.0 * SHIFT_FRACTION,
            r.violations,
            r.batches,
            cfg.train.iterations,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn config_ordering(b: &BenchmarkResult, secs: f64) -> Outcome {
    let my = |v| b.median_avg(&config_id(v, None)).unwrap_or(f64::NAN);
    let single = |v| b.median_avg(&config_id(v, Some(2020))).unwrap_or(f64::NAN);
    let (c, s, t) = (my(InputVariant::Composite2d), my(InputVariant::Stack2d), my(InputVariant::Stack3d));
    let order = t < s && s < c;
    let multi: Vec<String> = InputVariant::ALL
        .iter()
        .map(|&v| format!("{} {:.3}<{:.3}:{}", v.name(), my(v), single(v), my(v) < single(v)))
        .collect();
    let multi_ok = InputVariant::ALL.iter().all(|&v| my(v) < single(v));
    println!("{}", b.table.to_text());
    outcome(
        order && multi_ok,
        format!(
            "{MULTI_YEAR} medians 3D {t:.3} < 2D-Stack {s:.3} < 2D-Composite {c:.3}: {order}; multi-year vs 2020 [{}]; {:.0} s on {} seeds",
            multi.join(", "),
            secs,
            b.per_seed.len()
        ),
    )
}

fn series(v: &[f64]) -> HeightSeries {
    HeightSeries::new(vec![2019, 2020, 2021, 2022], v.to_vec()).unwrap()
}

fn spline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, SPLINE_NOISE_M).unwrap();
    let (mut idem, mut constant, mut worst_shift) = (true, true, 0.0f64);
    let (mut raw, mut smooth) = (0.0, 0.0);
    for i in 0..SPLINE_SERIES {
        let base = rng.random_range(5.0..35.0);
        let slope = rng.random_range(-1.0..1.5);
        let truth: Vec<f64> = (0..4).map(|k| base + slope * k as f64).collect();
        let obs: Vec<f64> = truth.iter().map(|t| (t + noise.sample(&mut rng)).max(0.0)).collect();
        let once = smooth_series(&series(&obs), 5.0).unwrap();
        idem &= smooth_series(&once, 5.0).unwrap() == once;
        let c = 10.0 + (i % 10) as f64;
        let shifted = smooth_series(&series(&obs.iter().map(|v| v + c).collect::<Vec<_>>()), 5.0).unwrap();
        if once.values.iter().all(|&v| v > 0.0) {
            for (a, b) in shifted.values.iter().zip(&once.values) {
                worst_shift = worst_shift.max((a - (b + c)).abs());
            }
        }
        let flat = series(&[base; 4]);
        constant &= smooth_series(&flat, 5.0).unwrap() == flat;
        for k in 0..4 {
            raw += (obs[k] - truth[k]).abs();
            smooth += (once.values[k] - truth[k]).abs();
        }
    }
    let n = (SPLINE_SERIES * 4) as f64;
    let (raw, smooth) = (raw / n, smooth / n);
    let shift_ok = worst_shift < SPLINE_SHIFT_TOL_M;
    outcome(
        idem && constant && shift_ok && smooth < raw,
        format!(
            "idempotent {idem}; constant identity {constant}; +c equivariance max dev {worst_shift:.1e} < {SPLINE_SHIFT_TOL_M:e}; MAE smoothed {smooth:.3} < raw {raw:.3} on {SPLINE_SERIES} series"
        ),
    )
}

fn change_detection(b: &BenchmarkResult) -> Outcome {
    let id = config_id(InputVariant::Stack3d, None);
    let per_seed: Vec<String> = b
        .per_seed
        .iter()
        .map(|s| format!("{}", s.clear_cut_iou.get(&id).map_or("-".into(), |v| format!("{v:.3}"))))
        .collect();
    let med = b.median_iou(&id).unwrap_or(f64::NAN);
    let truth_ok = b.per_seed.iter().all(|s| s.truth_iou == Some(1.0));
    outcome(
        med >= IOU_TRAINED && truth_ok,
        format!("{id} median IoU {med:.3} >= {IOU_TRAINED} (per seed [{}]); truth IoU = 1.0 on every seed: {truth_ok}", per_seed.join(", ")),
    )
}

fn pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SceneConfig::new(21);
    sc.size_px = 128;
    let truth = gen_truth(&sc).unwrap();
    let plan = plan_tiles(128, 128, 32, 4).unwrap();
    let mut jobs = Vec::new();
    let mut first = None;
    for &y in &sc.years {
        let s = synth_sample(&truth, y, &sc, &format!("p{y}")).unwrap();
        first.get_or_insert_with(|| s.s1_composite.clone());
        for (tw, a) in plan.windows.iter().zip(tile_sample(&s, &plan).unwrap()) {
            let p = dir.path().join(format!("{}.zip", a.patch_id));
            archive_write(&a, &p).unwrap();
            jobs.push(WindowJob {
                year: y,
                window: tw.id,
                source: ArchiveSource::Path(p),
            });
        }
    }
    let grid = first.unwrap();
    let enc = TrainConfig::default();
    let spec = enc.unet_spec(enc.optical_bands());
    let ckpt = Checkpoint {
        params: param_init(&spec, 5).unwrap(),
        spec,
    };
    let table = NormTable::default();
    let ctx = PipelineContext {
        plan: &plan,
        checkpoint: &ckpt,
        encoding: &enc,
        table: &table,
        origin: grid.origin(),
        resolution: grid.resolution(),
        progress: false,
    };
    let reference = run_sequential(&jobs, &ctx).unwrap();
    let bits = |m: &BTreeMap<i32, RasterPatch>| -> Vec<u32> { m.values().flat_map(|r| r.data().iter().map(|v| v.to_bits())).collect() };
    let mut identical = true;
    let mut tp = BTreeMap::new();
    for (d, i) in [(1, 1), (4, 2), (2, 4)] {
        let out = run_pipeline(&jobs, &ctx, Workers { decoders: d, inferrers: i }).unwrap();
        identical &= bits(&out.rasters) == bits(&reference);
        tp.insert((d, i), throughput(&out.stats));
    }
    let ratio = tp[&(4, 2)] / tp[&(1, 1)];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        jobs.len() == PIPELINE_ARCHIVES && identical && ratio > SPEEDUP,
        format!(
            "{} archives; bit-identical across (1,1), (4,2), (2,4) and sequential: {identical}; throughput(4,2)/throughput(1,1) = {ratio:.2} (> {SPEEDUP} required) on {cores} core(s)",
            jobs.len()
        ),
    )
}

fn random_archive(rng: &mut ChaCha8Rng, i: usize) -> SampleArchive {
    let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
    let origin = (rng.random_range(-1e6..1e6), rng.random_range(-1e6..1e7));
    let nodata = if rng.random() { -9999.0 } else { f32::MIN };
    let raster = |rng: &mut ChaCha8Rng, bands: Vec<String>| {
        let data = (0..bands.len() * h * w)
            .map(|_| match rng.random_range(0..20) {
                0 => nodata,
                1 => f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff),
                _ => rng.random_range(-50.0..12000.0),
            })
            .collect();
        RasterPatch::new(origin, 10.0, bands, w, h, data, nodata).unwrap()
    };
    let bands: Vec<String> = S2_BANDS.iter().map(|s| s.to_string()).collect();
    let s2_stack = (0..12).map(|_| raster(rng, bands.clone())).collect();
    let s1_composite = raster(rng, S1_BANDS.iter().map(|s| s.to_string()).collect());
    let labels = (0..rng.random_range(0..30))
        .map(|_| Label {
            row: rng.random_range(0..h as u32),
            col: rng.random_range(0..w as u32),
            height: rng.random_range(0.0..100.0),
            track_id: rng.random_range(0..5),
        })
        .collect();
    SampleArchive {
        patch_id: format!("rt_{i}"),
        year: rng.random_range(2017..2026),
        months: (1..=12).collect(),
        s2_stack,
        s1_composite,
        labels,
        metadata: SampleMetadata {
            seed: rng.random(),
            cloud_fractions: (0..12).map(|_| rng.random_range(0.0..1.0)).collect(),
        },
    }
}

fn round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for i in 0..ROUND_TRIPS {
        let a = random_archive(&mut rng, i);
        let p = dir.path().join("a.zip");
        archive_write(&a, &p).unwrap();
        let b = archive_read(&p).unwrap();
        let same = a.patch_id == b.patch_id
            && a.year == b.year
            && a.months == b.months
            && a.labels == b.labels
            && a.metadata == b.metadata
            && a.s2_stack.iter().chain([&a.s1_composite]).zip(b.s2_stack.iter().chain([&b.s1_composite])).all(|(x, y)| {
                x.origin() == y.origin()
                    && x.bands() == y.bands()
                    && (x.width(), x.height()) == (y.width(), y.height())
                    && x.nodata().to_bits() == y.nodata().to_bits()
                    && x.data().iter().map(|v| v.to_bits()).eq(y.data().iter().map(|v| v.to_bits()))
            });
        if !same {
            bad.push(i);
        }
    }
    outcome(bad.is_empty(), format!("{ROUND_TRIPS} random archives, {} mismatches {:?}", bad.len(), &bad[..bad.len().min(5)]))
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.json");
    std::fs::write(&cfg, "{}").unwrap();
    let t0 = Instant::now();
    let (_, res) = cht_cli::commands::cmd_ablate(&cfg, &dir.path().join("out")).unwrap();
    let v = |p: &str| res.row(p).map_or(f64::NAN, |r| r.median.val_loss);
    let (w, s, m) = (v("Winter"), v("Summer"), v("Mixed (Jan"));
    outcome(
        m <= s && s <= w,
        format!(
            "median val loss over {} seeds: Mixed {m:.4} <= Summer {s:.4} <= Winter {w:.4}; {:.0} s",
            res.seeds.len(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn smoke() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let t0 = Instant::now();
    let write = |name: &str, v: serde_json::Value| -> PathBuf {
        let p = root.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
        p
    };
    let mut scene = SceneConfig::new(77);
    scene.size_px = 128;
    scene.events.push(ChangeEvent {
        kind: ChangeKind::ClearCut,
        region: Rect {
            row0: 40,
            col0: 40,
            height: 40,
            width: 40,
        },
        year: 2021,
        magnitude: 0.0,
    });
    let steps: Vec<(&str, PathBuf, Vec<&str>)> = vec![
        ("synth", write("synth.json", serde_json::json!({ "scene": scene })), vec![]),
        ("preprocess", write("pre.json", serde_json::json!({"inputs": ["synth"], "window_px": 64, "margin_px": 8})), vec![]),
        (
            "train",
            write("train.json", serde_json::json!({"inputs": ["synth"], "train": {"iterations": SMOKE_ITERS, "batch_size": 8}})),
            vec![],
        ),
        ("eval", write("eval.json", serde_json::json!({"inputs": ["synth"], "model_dir": "train", "forest_types": "synth/forest_type.raster"})), vec![]),
        ("infer", write("infer.json", serde_json::json!({"model_dir": "train", "plan": "preprocess/plan.json"})), vec!["--decoders", "1", "--inferrers", "1"]),
        ("postprocess", write("post.json", serde_json::json!({"map_dir": "infer"})), vec![]),
    ];
    let mut failed = Vec::new();
    for (cmd, cfg, extra) in &steps {
        let out = root.join(cmd);
        let o = Command::new(env!("CARGO_BIN_EXE_cht"))
            .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .args(extra)
            .output()
            .unwrap();
        let manifest = out.join("manifest.json").exists();
        if !o.status.success() || !manifest {
            failed.push(format!("{cmd} (exit {:?}, manifest {manifest}): {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
            break;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < SMOKE_SECS,
        format!(
            "synth -> preprocess -> train({SMOKE_ITERS}) -> eval -> infer -> postprocess in {secs:.0} s (< {SMOKE_SECS:.0} s); failures {failed:?}"
        ),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("CHT_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(str::to_string).collect());
    let strict = std::env::var("CHT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let want = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == name));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    let cheap: [(&'static str, fn() -> Outcome); 6] = [
        ("gradient-correctness", gradients),
        ("convolution-oracle", conv_oracle),
        ("normalisation-table", table1),
        ("gedi-filter", gedi_filter),
        ("archive-round-trip", round_trip),
        ("spline-properties", spline),
    ];
    for (name, f) in cheap {
        if want(name) {
            report(name, f());
        }
    }
    if want("pipeline-determinism") {
        report("pipeline-determinism", pipeline());
    }
    if want("end-to-end-smoke") {
        report("end-to-end-smoke", smoke());
    }
    if want("configuration-ordering") || want("change-detection") {
        let t0 = Instant::now();
        let b = run_benchmark(&BenchmarkConfig::default(), &mut |s| eprintln!("  benchmark: {s}")).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        if want("configuration-ordering") {
            report("configuration-ordering", config_ordering(&b, secs));
        }
        if want("change-detection") {
            report("change-detection", change_detection(&b));
        }
    }
    if want("ablation-harness") {
        report("ablation-harness", ablation());
    }
    if want("shift-recovery") {
        report("shift-recovery", shift_recovery());
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed; failed: {:?}", results.len() - failed.len(), results.len(), failed);
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
