//! Training loop for the three input variants.

pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Label, SampleArchive};
use crate::neuralnet::{param_init, unet_forward, Checkpoint, Graph, Tensor, UNetSpec};
use crate::preprocess::{band_subset, build_model_input, month_subset, normalize_sample, InputVariant, NormTable};

pub use loss::{huber, masked_shift_loss, SparseLabelBatch, TrackShift};
pub use optim::{adam_step, clip_gradients, lr_at, AdamConfig, AdamState};

fn d_lr() -> f64 {
    1e-3
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    1.0
}
fn d_warm() -> f64 {
    0.10
}
fn d_iters() -> usize {
    2000
}
fn d_batch() -> usize {
    16
}
fn d_delta() -> f64 {
    1.0
}
fn d_shift() -> usize {
    1
}
fn d_variant() -> InputVariant {
    InputVariant::Stack3d
}
fn d_base() -> usize {
    8
}
fn d_depth() -> usize {
    3
}
fn d_crop() -> usize {
    32
}
fn d_log() -> usize {
    50
}
fn d_scale() -> f32 {
    10.0
}

/// Optimiser, schedule, model and data-sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_warm")]
    pub warmup_frac: f64,
    #[serde(default = "d_iters")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_delta")]
    pub huber_delta: f64,
    #[serde(default = "d_shift")]
    pub max_shift_px: usize,
    /// Training years; empty means every year in the dataset.
    #[serde(default)]
    pub years: Vec<i32>,
    #[serde(default = "d_variant")]
    pub variant: InputVariant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_base")]
    pub base_channels: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    /// 3D pooling factors; derived from the time length when absent.
    #[serde(default)]
    pub temporal_schedule: Option<Vec<usize>>,
    #[serde(default = "d_scale")]
    pub output_scale: f32,
    /// Side of the random square training crops (px).
    #[serde(default = "d_crop")]
    pub crop_px: usize,
    #[serde(default = "d_log")]
    pub log_every: usize,
    /// Calendar months fed to the model; all twelve when absent.
    #[serde(default)]
    pub months: Option<Vec<u8>>,
    #[serde(default)]
    pub drop_bands: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, ok: bool| if ok { Ok(()) } else { Err(Error::Config(format!("{} must be positive", name))) };
        pos("lr", self.lr > 0.0)?;
        pos("weight_decay", self.weight_decay >= 0.0)?;
        pos("clip_norm", self.clip_norm > 0.0)?;
        pos("batch_size", self.batch_size > 0)?;
        pos("huber_delta", self.huber_delta > 0.0)?;
        pos("base_channels", self.base_channels > 0)?;
        pos("crop_px", self.crop_px > 0)?;
        pos("log_every", self.log_every > 0)?;
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!("warmup_frac must lie in (0, 1), got {}", self.warmup_frac)));
        }
        if self.depth < 2 {
            return Err(Error::Config("depth must be >= 2".into()));
        }
        if self.crop_px % (1 << (self.depth - 1)) != 0 {
            return Err(Error::Config(format!("crop_px {} not divisible by 2^(depth-1)", self.crop_px)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn time_len(&self) -> usize {
        self.months.as_ref().map_or(12, Vec::len)
    }

    /// Network description matching this configuration.
    pub fn unet_spec(&self, optical_bands: usize) -> UNetSpec {
        let t = self.time_len();
        let in_c = self.variant.channels(optical_bands, t);
        let mut spec = match self.variant {
            InputVariant::Stack3d => {
                let sched = self
                    .temporal_schedule
                    .clone()
                    .unwrap_or_else(|| default_schedule(t, self.depth - 1));
                let mut s = UNetSpec::conv3d(in_c, self.base_channels, sched);
                s.depth = self.depth;
                s
            }
            _ => UNetSpec::conv2d(in_c, self.base_channels, self.depth),
        };
        spec.output_scale = self.output_scale;
        spec
    }

    /// Applies the month / band selection, normalisation and encoding.
    pub fn encode(&self, sample: &SampleArchive, table: &NormTable) -> Result<Tensor> {
        let mut s = normalize_sample(sample, table)?;
        if let Some(m) = &self.months {
            s = month_subset(&s, m)?;
        }
        if !self.drop_bands.is_empty() {
            let names: Vec<&str> = self.drop_bands.iter().map(String::as_str).collect();
            s = band_subset(&s, &names)?;
        }
        build_model_input(&s, self.variant)
    }

    pub fn optical_bands(&self) -> usize {
        12 - self.drop_bands.len()
    }
}

/// Splits `t` into `slots` integer pooling factors (ascending) whose
/// product is `t`: 12 over 3 slots gives `[2, 2, 3]`.
pub fn default_schedule(t: usize, slots: usize) -> Vec<usize> {
    let mut primes = Vec::new();
    let mut n = t.max(1);
    let mut p = 2;
    while n > 1 {
        while n % p == 0 {
            primes.push(p);
            n /= p;
        }
        p += 1;
    }
    while primes.len() > slots && slots > 0 {
        primes.sort_unstable();
        let a = primes.remove(0);
        primes[0] *= a;
    }
    while primes.len() < slots {
        primes.push(1);
    }
    primes.sort_unstable();
    primes
}

/// A model-ready sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub year: i32,
    /// `[C, H, W]` or `[C, T, H, W]`.
    pub input: Tensor,
    pub labels: Vec<Label>,
}

impl TrainSample {
    pub fn height(&self) -> usize {
        self.input.shape()[self.input.ndim() - 2]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[self.input.ndim() - 1]
    }
}

pub fn encode_dataset(archives: &[SampleArchive], cfg: &TrainConfig, table: &NormTable) -> Result<Vec<TrainSample>> {
    archives
        .iter()
        .map(|a| {
            Ok(TrainSample {
                id: a.patch_id.clone(),
                year: a.year,
                input: cfg.encode(a, table)?,
                labels: a.labels.clone(),
            })
        })
        .collect()
}

/// Copies the spatial window `[r0, r0+h) × [c0, c0+w)` of the last two axes.
pub fn crop_spatial(x: &Tensor, r0: usize, c0: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let nd = s.len();
    if nd < 2 {
        return Err(Error::Shape(format!("cannot crop tensor of shape {:?}", s)));
    }
    let (hh, ww) = (s[nd - 2], s[nd - 1]);
    if r0 + h > hh || c0 + w > ww {
        return Err(Error::Range(format!("crop {}x{} at ({}, {}) outside {}x{}", h, w, r0, c0, hh, ww)));
    }
    let planes: usize = s[..nd - 2].iter().product();
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let base = p * hh * ww;
        for r in r0..r0 + h {
            out.extend_from_slice(&x.data()[base + r * ww + c0..base + r * ww + c0 + w]);
        }
    }
    let mut shape = s.to_vec();
    shape[nd - 2] = h;
    shape[nd - 1] = w;
    Tensor::new(shape, out)
}

fn crop_labels(labels: &[Label], r0: usize, c0: usize, h: usize, w: usize) -> Vec<Label> {
    labels
        .iter()
        .filter(|l| (l.row as usize) >= r0 && (l.row as usize) < r0 + h && (l.col as usize) >= c0 && (l.col as usize) < c0 + w)
        .map(|l| Label {
            row: l.row - r0 as u32,
            col: l.col - c0 as u32,
            ..*l
        })
        .collect()
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Loss of every optimisation step (skipped batches excluded).
    pub losses: Vec<f64>,
    /// Unshifted masked Huber of the same batches, aligned with `losses`.
    pub plain_losses: Vec<f64>,
    pub skipped_batches: usize,
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,lr,loss")?;
    for r in log {
        writeln!(f, "{},{:e},{}", r.iter, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Random crop batch: `(input [B, …], labels, sample indices)`.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    data: &[TrainSample],
    pool: &[usize],
    batch_size: usize,
    crop: usize,
) -> Result<(Tensor, SparseLabelBatch, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut batch = SparseLabelBatch::default();
    let mut ids = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = pool[rng.random_range(0..pool.len())];
        let s = &data[i];
        let (h, w) = (s.height(), s.width());
        let ch = crop.min(h);
        let cw = crop.min(w);
        let r0 = rng.random_range(0..=h - ch);
        let c0 = rng.random_range(0..=w - cw);
        inputs.push(crop_spatial(&s.input, r0, c0, ch, cw)?);
        batch.labels.push(crop_labels(&s.labels, r0, c0, ch, cw));
        batch.years.push(s.year);
        ids.push(i);
    }
    Ok((Tensor::stack(&inputs)?, batch, ids))
}

/// Runs the full optimisation loop. Deterministic in `cfg.seed`.
pub fn train(cfg: &TrainConfig, data: &[TrainSample]) -> Result<TrainOutcome> {
    train_with_spec(cfg, &cfg.unet_spec(cfg.optical_bands()), data)
}

/// [`train`] with an explicit network, for inputs not produced by
/// [`TrainConfig::encode`].
pub fn train_with_spec(cfg: &TrainConfig, spec: &UNetSpec, data: &[TrainSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool: Vec<usize> = (0..data.len())
        .filter(|&i| cfg.years.is_empty() || cfg.years.contains(&data[i].year))
        .collect();
    for y in &cfg.years {
        if !data.iter().any(|s| s.year == *y) {
            return Err(Error::InsufficientData(format!("no training samples for year {}", y)));
        }
    }
    if pool.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let spec = spec.clone();
    let mut params = param_init(&spec, cfg.seed)?;
    let mut state = AdamState::new(&params.entries().iter().map(|(_, t)| t).collect::<Vec<_>>());
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut plain_losses = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    for iter in 0..cfg.iterations {
        let lr_t = lr_at(iter, cfg.iterations, cfg.lr, cfg.warmup_frac);
        let (x, batch, ids) = sample_batch(&mut rng, data, &pool, cfg.batch_size, cfg.crop_px)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let xv = g.leaf(x, false);
        let out = unet_forward(&spec, &bound, &mut g, xv)?;
        let Some(l) = masked_shift_loss(&mut g, out.output, &batch, cfg.huber_delta, cfg.max_shift_px)? else {
            skipped += 1;
            continue;
        };
        if !l.value.is_finite() {
            let names: Vec<&str> = ids.iter().map(|&i| data[i].id.as_str()).collect();
            return Err(Error::Diverged(format!(
                "non-finite loss {} at iteration {} (lr {:e}), batch {:?}",
                l.value, iter, lr_t, names
            )));
        }
        let plain = loss::plain_masked_huber(g.value(out.output), &batch, cfg.huber_delta)?.unwrap_or(f64::NAN);
        g.backward(l.loss)?;
        let mut grads: Vec<Tensor> = bound
            .vars()
            .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        clip_gradients(&mut grads, cfg.clip_norm);
        let mut ps: Vec<&mut Tensor> = params.tensors_mut().collect();
        adam_step(&mut ps, &grads, &mut state, lr_t, &adam)?;
        losses.push(l.value);
        plain_losses.push(plain);
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.push(LogRow {
                iter,
                lr: lr_t,
                loss: l.value,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { spec, params },
        log,
        losses,
        plain_losses,
        skipped_batches: skipped,
    })
}

/// Mean of a window of losses, for smoothed start/end comparisons.
pub fn window_mean(losses: &[f64], from: usize, len: usize) -> f64 {
    let end = (from + len).min(losses.len());
    let w = &losses[from.min(end)..end];
    w.iter().sum::<f64>() / w.len().max(1) as f64
}
