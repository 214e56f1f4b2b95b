//! Large-area tiled inference: window planning, a decode/infer/write worker
//! pipeline over compressed window archives, and core-crop stitching.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::archive::{archive_from_bytes, archive_to_bytes};
use crate::geodata::{extract_window, Label, RasterPatch, SampleArchive, NODATA};
use crate::neuralnet::{predict, Checkpoint, ConvDims, Tensor};
use crate::preprocess::{InputVariant, NormTable};
use crate::training::TrainConfig;

pub const DEFAULT_WINDOW_PX: usize = 256;
pub const DEFAULT_MARGIN_PX: usize = 32;

/// Pixel rectangle in extent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelRect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row0 && r < self.row0 + self.height && c >= self.col0 && c < self.col0 + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileWindow {
    pub id: usize,
    pub window: PixelRect,
    /// Part of the window written to the output; always inside `window`.
    pub core: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub margin: usize,
    pub windows: Vec<TileWindow>,
}

/// Window starts and core intervals along one axis.
fn plan_axis(len: usize, window: usize, margin: usize) -> Vec<(usize, usize, usize, usize)> {
    if len <= window {
        return vec![(0, len, 0, len)];
    }
    let stride = window - 2 * margin;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < len {
        starts.push(s);
        s += stride;
    }
    starts.push(len - window);
    let k = starts.len();
    (0..k)
        .map(|i| {
            let core0 = if i == 0 { 0 } else { starts[i] + margin };
            let core1 = if i + 1 == k { len } else { starts[i + 1] + margin };
            (starts[i], window, core0, core1 - core0)
        })
        .collect()
}

/// Full-size windows with shared margins; edge windows are shifted inward.
/// The core regions partition the extent. An extent smaller than the window
/// along an axis yields a single window clamped to the extent.
pub fn plan_tiles(height: usize, width: usize, window: usize, margin: usize) -> Result<TilePlan> {
    if height == 0 || width == 0 || window == 0 {
        return Err(Error::Capacity(format!("cannot tile a {height}x{width} extent with {window} px windows")));
    }
    if (height > window || width > window) && 2 * margin >= window {
        return Err(Error::Capacity(format!("margin {margin} leaves no core in a {window} px window")));
    }
    let rows = plan_axis(height, window, margin);
    let cols = plan_axis(width, window, margin);
    let mut windows = Vec::with_capacity(rows.len() * cols.len());
    for &(r0, rh, cr0, crh) in &rows {
        for &(c0, cw, cc0, ccw) in &cols {
            windows.push(TileWindow {
                id: windows.len(),
                window: PixelRect {
                    row0: r0,
                    col0: c0,
                    height: rh,
                    width: cw,
                },
                core: PixelRect {
                    row0: cr0,
                    col0: cc0,
                    height: crh,
                    width: ccw,
                },
            });
        }
    }
    Ok(TilePlan {
        height,
        width,
        window,
        margin,
        windows,
    })
}

/// Incremental core-crop writer over one output raster.
pub struct Stitcher<'a> {
    plan: &'a TilePlan,
    out: RasterPatch,
    done: Vec<bool>,
}

impl<'a> Stitcher<'a> {
    /// `origin` is the map coordinate of the extent's top-left corner.
    pub fn new(plan: &'a TilePlan, origin: (f64, f64), resolution: f64) -> Result<Self> {
        let out = RasterPatch::new(
            origin,
            resolution,
            vec!["height".into()],
            plan.width,
            plan.height,
            vec![NODATA; plan.width * plan.height],
            NODATA,
        )?;
        Ok(Stitcher {
            plan,
            out,
            done: vec![false; plan.windows.len()],
        })
    }

    /// Copies the core of window `id` from its `window`-sized output.
    pub fn place(&mut self, id: usize, output: &[f32]) -> Result<()> {
        let tw = self
            .plan
            .windows
            .get(id)
            .ok_or_else(|| Error::Domain(format!("window {id} not in plan")))?;
        let (wh, ww) = (tw.window.height, tw.window.width);
        if output.len() != wh * ww {
            return Err(Error::Shape(format!("window {id}: {} values for {wh}x{ww}", output.len())));
        }
        if std::mem::replace(&mut self.done[id], true) {
            return Err(Error::Domain(format!("window {id} written twice")));
        }
        let width = self.plan.width;
        let data = self.out.data_mut();
        for r in tw.core.row0..tw.core.row0 + tw.core.height {
            let src = (r - tw.window.row0) * ww + (tw.core.col0 - tw.window.col0);
            let dst = r * width + tw.core.col0;
            data[dst..dst + tw.core.width].copy_from_slice(&output[src..src + tw.core.width]);
        }
        Ok(())
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.done.len()).filter(|&i| !self.done[i]).collect()
    }

    pub fn finish(self) -> Result<RasterPatch> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(Error::Incomplete(format!("missing windows {missing:?}")));
        }
        Ok(self.out)
    }
}

/// Assembles per-window outputs (indexed by window id) into one raster.
pub fn stitch(outputs: &BTreeMap<usize, Vec<f32>>, plan: &TilePlan, origin: (f64, f64), resolution: f64) -> Result<RasterPatch> {
    let mut st = Stitcher::new(plan, origin, resolution)?;
    for (&id, out) in outputs {
        st.place(id, out)?;
    }
    st.finish()
}

/// Where a window archive lives.
#[derive(Debug, Clone)]
pub enum ArchiveSource {
    Path(PathBuf),
    Bytes(Arc<Vec<u8>>),
}

#[derive(Debug, Clone)]
pub struct WindowJob {
    pub year: i32,
    pub window: usize,
    pub source: ArchiveSource,
}

/// Cuts a full-extent sample into one archive per plan window.
pub fn tile_sample(sample: &SampleArchive, plan: &TilePlan) -> Result<Vec<SampleArchive>> {
    if sample.height() != plan.height || sample.width() != plan.width {
        return Err(Error::Shape(format!(
            "sample {}x{} vs plan {}x{}",
            sample.height(),
            sample.width(),
            plan.height,
            plan.width
        )));
    }
    plan.windows
        .iter()
        .map(|tw| {
            let w = tw.window;
            let cut = |p: &RasterPatch| extract_window(p, w.row0, w.col0, w.height, w.width);
            let labels: Vec<Label> = sample
                .labels
                .iter()
                .filter(|l| w.contains(l.row as usize, l.col as usize))
                .map(|l| Label {
                    row: l.row - w.row0 as u32,
                    col: l.col - w.col0 as u32,
                    ..*l
                })
                .collect();
            Ok(SampleArchive {
                patch_id: format!("{}_w{}", sample.patch_id, tw.id),
                year: sample.year,
                months: sample.months.clone(),
                s2_stack: sample.s2_stack.iter().map(cut).collect::<Result<_>>()?,
                s1_composite: cut(&sample.s1_composite)?,
                labels,
                metadata: sample.metadata.clone(),
            })
        })
        .collect()
}

/// Compressed in-memory jobs for every window of every sample.
pub fn jobs_from_samples(samples: &[SampleArchive], plan: &TilePlan) -> Result<Vec<WindowJob>> {
    let mut jobs = Vec::new();
    for s in samples {
        for (tw, a) in plan.windows.iter().zip(tile_sample(s, plan)?) {
            jobs.push(WindowJob {
                year: s.year,
                window: tw.id,
                source: ArchiveSource::Bytes(Arc::new(archive_to_bytes(&a)?)),
            });
        }
    }
    Ok(jobs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Workers {
    pub decoders: usize,
    pub inferrers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub queue_capacity: usize,
    pub max_queue_depth: usize,
    pub decoded: usize,
    pub inferred: usize,
    pub written: usize,
    pub wall_secs: f64,
}

pub struct PipelineOutput {
    pub rasters: BTreeMap<i32, RasterPatch>,
    pub stats: PipelineStats,
}

/// Everything the workers need besides the jobs.
pub struct PipelineContext<'a> {
    pub plan: &'a TilePlan,
    pub checkpoint: &'a Checkpoint,
    pub encoding: &'a TrainConfig,
    pub table: &'a NormTable,
    /// Map coordinate of the extent's top-left corner.
    pub origin: (f64, f64),
    pub resolution: f64,
    pub progress: bool,
}

enum Msg<T> {
    Item(T),
    Stop,
}

/// Blocking FIFO with a hard capacity and a high-water-mark counter.
struct BoundedQueue<T> {
    inner: Mutex<(VecDeque<Msg<T>>, bool)>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
    high_water: AtomicUsize,
}

impl<T> BoundedQueue<T> {
    fn new(capacity: usize) -> Self {
        BoundedQueue {
            inner: Mutex::new((VecDeque::with_capacity(capacity), false)),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity,
            high_water: AtomicUsize::new(0),
        }
    }

    /// `false` when the queue was closed.
    fn push(&self, m: Msg<T>) -> bool {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        while g.0.len() >= self.capacity && !g.1 {
            g = self.not_full.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        if g.1 {
            return false;
        }
        g.0.push_back(m);
        self.high_water.fetch_max(g.0.len(), Ordering::Relaxed);
        self.not_empty.notify_one();
        true
    }

    /// `None` when the queue was closed.
    fn pop(&self) -> Option<Msg<T>> {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if g.1 {
                return None;
            }
            if let Some(m) = g.0.pop_front() {
                self.not_full.notify_one();
                return Some(m);
            }
            g = self.not_empty.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn close(&self) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.1 = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }
}

fn check_compat(ctx: &PipelineContext) -> Result<()> {
    let spec = &ctx.checkpoint.spec;
    let want_3d = ctx.encoding.variant == InputVariant::Stack3d;
    if want_3d != (spec.variant == ConvDims::Conv3d) {
        return Err(Error::Config(format!(
            "checkpoint is {:?} but input variant is {}",
            spec.variant,
            ctx.encoding.variant.name()
        )));
    }
    let c = ctx.encoding.variant.channels(ctx.encoding.optical_bands(), ctx.encoding.time_len());
    if c != spec.in_channels {
        return Err(Error::Config(format!(
            "checkpoint expects {} input channels, configuration produces {c}",
            spec.in_channels
        )));
    }
    Ok(())
}

fn decode(job: &WindowJob, ctx: &PipelineContext) -> Result<Tensor> {
    let bytes = match &job.source {
        ArchiveSource::Path(p) => Arc::new(std::fs::read(p)?),
        ArchiveSource::Bytes(b) => Arc::clone(b),
    };
    let sample = archive_from_bytes(&bytes)?;
    let tw = &ctx.plan.windows[job.window];
    if sample.height() != tw.window.height || sample.width() != tw.window.width {
        return Err(Error::Shape(format!(
            "archive for window {} is {}x{}, window is {}x{}",
            job.window,
            sample.height(),
            sample.width(),
            tw.window.height,
            tw.window.width
        )));
    }
    let x = ctx.encoding.encode(&sample, ctx.table)?;
    let shape = [&[1][..], x.shape()].concat();
    x.reshape(&shape)
}

fn infer(x: &Tensor, ctx: &PipelineContext) -> Result<Vec<f32>> {
    Ok(predict(&ctx.checkpoint.spec, &ctx.checkpoint.params, x)?.into_data())
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Years in job order of first appearance, each with a fresh stitcher.
fn stitchers<'a>(jobs: &[WindowJob], ctx: &PipelineContext<'a>) -> Result<BTreeMap<i32, Stitcher<'a>>> {
    let mut out = BTreeMap::new();
    for j in jobs {
        if j.window >= ctx.plan.windows.len() {
            return Err(Error::Domain(format!("job references window {} outside the plan", j.window)));
        }
        if !out.contains_key(&j.year) {
            out.insert(j.year, Stitcher::new(ctx.plan, ctx.origin, ctx.resolution)?);
        }
    }
    Ok(out)
}

fn finish(st: BTreeMap<i32, Stitcher>) -> Result<BTreeMap<i32, RasterPatch>> {
    st.into_iter().map(|(y, s)| Ok((y, s.finish().map_err(|e| Error::Incomplete(format!("year {y}: {e}")))?))).collect()
}

/// Single-threaded reference: decode, infer and stitch each job in order.
pub fn run_sequential(jobs: &[WindowJob], ctx: &PipelineContext) -> Result<BTreeMap<i32, RasterPatch>> {
    check_compat(ctx)?;
    let mut st = stitchers(jobs, ctx)?;
    for j in jobs {
        let x = decode(j, ctx)?;
        let y = infer(&x, ctx)?;
        st.get_mut(&j.year).expect("year registered").place(j.window, &y)?;
    }
    finish(st)
}

/// Decoders pull jobs and push decoded tensors into a bounded queue of
/// capacity `2 × inferrers`; inferrers run the network and send results to a
/// single writer. Output is independent of worker counts and scheduling. A
/// failing or panicking worker closes the queue and the run reports how many
/// windows were written before the shutdown.
pub fn run_pipeline(jobs: &[WindowJob], ctx: &PipelineContext, workers: Workers) -> Result<PipelineOutput> {
    if workers.decoders == 0 || workers.inferrers == 0 {
        return Err(Error::Config("decoders and inferrers must be at least 1".into()));
    }
    check_compat(ctx)?;
    let start = Instant::now();
    let mut st = stitchers(jobs, ctx)?;
    let capacity = 2 * workers.inferrers;
    let queue: BoundedQueue<(usize, Tensor)> = BoundedQueue::new(capacity);
    let next = AtomicUsize::new(0);
    let decoded = AtomicUsize::new(0);
    let inferred = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        abort.store(true, Ordering::SeqCst);
        first_err.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
        queue.close();
    };
    let (tx, rx) = mpsc::channel::<(usize, Vec<f32>)>();
    let mut written = 0usize;

    std::thread::scope(|sc| {
        let decoders: Vec<_> = (0..workers.decoders)
            .map(|d| {
                let (queue, next, decoded, abort, fail) = (&queue, &next, &decoded, &abort, &fail);
                sc.spawn(move || {
                    let r = catch_unwind(AssertUnwindSafe(|| {
                        while !abort.load(Ordering::SeqCst) {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            let Some(job) = jobs.get(i) else { break };
                            match decode(job, ctx) {
                                Ok(x) => {
                                    decoded.fetch_add(1, Ordering::SeqCst);
                                    if !queue.push(Msg::Item((i, x))) {
                                        break;
                                    }
                                }
                                Err(e) => {
                                    fail(Error::Pipeline(format!("decoder {d}, window {} ({}): {e}", job.window, job.year)));
                                    break;
                                }
                            }
                        }
                    }));
                    if let Err(p) = r {
                        fail(Error::Pipeline(format!("decoder {d} panicked: {}", panic_message(p))));
                    }
                })
            })
            .collect();
        let inferrers: Vec<_> = (0..workers.inferrers)
            .map(|k| {
                let tx = tx.clone();
                let (queue, inferred, fail) = (&queue, &inferred, &fail);
                sc.spawn(move || {
                    let r = catch_unwind(AssertUnwindSafe(|| {
                        while let Some(Msg::Item((i, x))) = queue.pop() {
                            match infer(&x, ctx) {
                                Ok(y) => {
                                    inferred.fetch_add(1, Ordering::SeqCst);
                                    if tx.send((i, y)).is_err() {
                                        break;
                                    }
                                }
                                Err(e) => {
                                    fail(Error::Pipeline(format!("inferrer {k}, job {i}: {e}")));
                                    break;
                                }
                            }
                        }
                    }));
                    if let Err(p) = r {
                        fail(Error::Pipeline(format!("inferrer {k} panicked: {}", panic_message(p))));
                    }
                })
            })
            .collect();
        drop(tx);
        // sentinel feeder: once every decoder is done, one Stop per inferrer
        let (queue_ref, abort_ref) = (&queue, &abort);
        sc.spawn(move || {
            for h in decoders {
                let _ = h.join();
            }
            if !abort_ref.load(Ordering::SeqCst) {
                for _ in 0..workers.inferrers {
                    queue_ref.push(Msg::Stop);
                }
            }
        });
        // single writer on this thread
        for (i, y) in rx.iter() {
            let j = &jobs[i];
            if let Err(e) = st.get_mut(&j.year).expect("year registered").place(j.window, &y) {
                fail(e);
                break;
            }
            written += 1;
            if ctx.progress && (written % 10 == 0 || written == jobs.len()) {
                eprintln!("[infer] {written}/{} windows", jobs.len());
            }
        }
        for h in inferrers {
            let _ = h.join();
        }
    });

    let stats = PipelineStats {
        queue_capacity: capacity,
        max_queue_depth: queue.high_water.load(Ordering::SeqCst),
        decoded: decoded.load(Ordering::SeqCst),
        inferred: inferred.load(Ordering::SeqCst),
        written,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(e) = first_err.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(Error::Pipeline(format!(
            "{e}; shut down after writing {written} of {} windows ({} decoded, {} inferred)",
            jobs.len(),
            stats.decoded,
            stats.inferred
        )));
    }
    Ok(PipelineOutput {
        rasters: finish(st)?,
        stats,
    })
}

/// Windows per second of one pipeline run.
pub fn throughput(stats: &PipelineStats) -> f64 {
    stats.written as f64 / stats.wall_secs.max(Duration::from_micros(1).as_secs_f64())
}
