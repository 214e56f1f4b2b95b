//! From raw acquisitions and LiDAR shots to model-ready tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Label, RasterPatch, SampleArchive};
use crate::neuralnet::Tensor;

/// Optical bands in storage order (B10 is never included).
pub const S2_BANDS: [&str; 12] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12"];

/// Radar composite bands in storage order.
pub const S1_BANDS: [&str; 4] = ["VV_asc", "VH_asc", "VV_desc", "VH_desc"];

/// Radar values are stored in dB and mapped linearly from this range onto
/// `[0, 1]`.
pub const S1_DB_RANGE: (f32, f32) = (-30.0, 0.0);

pub const MIN_SENSITIVITY: f64 = 0.9;
pub const POWER_BEAMS: [u32; 4] = [5, 6, 7, 8];
pub const MAX_RH98_M: f64 = 100.0;

/// One LiDAR footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GediShot {
    /// Recorded (easting, northing) in metres.
    pub position: (f64, f64),
    pub rh_98: f64,
    pub beam_id: u32,
    pub quality_flag: bool,
    pub degrade_flag: bool,
    pub sensitivity: f64,
    pub track_id: u32,
    pub year: i32,
}

/// Canonical band name: `B01` → `B1`, `b8a` → `B8A`.
pub fn canonical_band(name: &str) -> String {
    let up = name.trim().to_ascii_uppercase();
    match up.strip_prefix('B') {
        Some(rest) => {
            let trimmed = rest.trim_start_matches('0');
            format!("B{}", if trimmed.is_empty() { "0" } else { trimmed })
        }
        None => up,
    }
}

/// Per-band divisors mapping optical values onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct NormTable {
    divisors: BTreeMap<String, f64>,
}

impl Default for NormTable {
    fn default() -> Self {
        let groups: [(&[&str], f64); 4] = [
            (&["B1"], 900.0),
            (&["B2", "B3", "B4", "B5"], 1800.0),
            (&["B6", "B7", "B11", "B12"], 3600.0),
            (&["B8", "B8A", "B9"], 5400.0),
        ];
        let divisors = groups
            .iter()
            .flat_map(|(bands, d)| bands.iter().map(move |b| (b.to_string(), *d)))
            .collect();
        NormTable { divisors }
    }
}

impl TryFrom<BTreeMap<String, f64>> for NormTable {
    type Error = Error;

    fn try_from(raw: BTreeMap<String, f64>) -> Result<Self> {
        let divisors: BTreeMap<String, f64> = raw.into_iter().map(|(k, v)| (canonical_band(&k), v)).collect();
        let expected: Vec<String> = S2_BANDS.iter().map(|s| s.to_string()).collect();
        let mut keys: Vec<String> = divisors.keys().cloned().collect();
        let mut want = expected.clone();
        keys.sort();
        want.sort();
        if keys != want {
            return Err(Error::Schema(format!("normalisation table must cover exactly {:?}, got {:?}", expected, keys)));
        }
        if let Some((k, v)) = divisors.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Schema(format!("divisor of {} must be positive, got {}", k, v)));
        }
        Ok(NormTable { divisors })
    }
}

impl From<NormTable> for BTreeMap<String, f64> {
    fn from(t: NormTable) -> Self {
        t.divisors
    }
}

impl NormTable {
    pub fn divisor(&self, band: &str) -> Option<f64> {
        self.divisors.get(&canonical_band(band)).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Picks the least cloudy candidate per month (earliest on ties).
/// `candidates[m]` holds month `m + 1`.
pub fn select_monthly_best(candidates: &[Vec<(RasterPatch, f32)>]) -> Result<Vec<RasterPatch>> {
    let best = select_monthly_indices(candidates)?;
    Ok(best.iter().enumerate().map(|(m, &i)| candidates[m][i].0.clone()).collect())
}

/// Index of the chosen candidate per month.
pub fn select_monthly_indices(candidates: &[Vec<(RasterPatch, f32)>]) -> Result<Vec<usize>> {
    if candidates.len() != 12 {
        return Err(Error::MissingData(format!("expected candidates for 12 months, got {}", candidates.len())));
    }
    let empty: Vec<usize> = (0..12).filter(|&m| candidates[m].is_empty()).map(|m| m + 1).collect();
    if !empty.is_empty() {
        return Err(Error::MissingData(format!("no acquisition for month(s) {:?}", empty)));
    }
    Ok(candidates
        .iter()
        .map(|month| {
            let mut best = 0;
            for (i, (_, f)) in month.iter().enumerate() {
                if *f < month[best].1 {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Divides every band by its divisor and clamps into `[0, 1]`. Nodata
/// pixels are kept as nodata.
pub fn normalize_s2(patch: &RasterPatch, table: &NormTable) -> Result<RasterPatch> {
    let divisors = patch
        .bands()
        .iter()
        .map(|b| {
            table
                .divisor(b)
                .ok_or_else(|| Error::Schema(format!("band `{}` has no normalisation divisor", b)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = patch.clone();
    let nodata = patch.nodata();
    for (b, d) in divisors.iter().enumerate() {
        for v in out.band_mut(b) {
            if *v != nodata {
                *v = clamp01((*v as f64 / d) as f32);
            }
        }
    }
    Ok(out)
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Maps radar dB values onto `[0, 1]` via [`S1_DB_RANGE`].
pub fn normalize_s1(patch: &RasterPatch) -> RasterPatch {
    let (lo, hi) = S1_DB_RANGE;
    let nodata = patch.nodata();
    let mut out = patch.clone();
    for v in out.data_mut() {
        if *v != nodata {
            *v = clamp01((*v - lo) / (hi - lo));
        }
    }
    out
}

/// Normalised copy of a sample: optical via `table`, radar via
/// [`normalize_s1`].
pub fn normalize_sample(sample: &SampleArchive, table: &NormTable) -> Result<SampleArchive> {
    let mut out = sample.clone();
    out.s2_stack = sample.s2_stack.iter().map(|p| normalize_s2(p, table)).collect::<Result<_>>()?;
    out.s1_composite = normalize_s1(&sample.s1_composite);
    Ok(out)
}

/// Median of a slice, midpoint for even lengths. `None` when empty.
pub fn median(values: &mut [f32]) -> Option<f32> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        ((values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0) as f32
    })
}

/// Per-pixel, per-band median across rasters, ignoring nodata.
pub fn median_composite(stack: &[RasterPatch]) -> Result<RasterPatch> {
    let first = stack
        .first()
        .ok_or_else(|| Error::MissingData("median composite of an empty stack".into()))?;
    for (i, r) in stack.iter().enumerate() {
        if !r.same_geometry(first) {
            return Err(Error::Shape(format!("raster {} differs in geometry or bands from raster 0", i)));
        }
    }
    let nodata = first.nodata();
    let mut out = first.clone();
    let mut buf = Vec::with_capacity(stack.len());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        buf.clear();
        buf.extend(stack.iter().map(|r| r.data()[i]).filter(|&v| v != nodata));
        *o = median(&mut buf).unwrap_or(nodata);
    }
    Ok(out)
}

pub fn shot_passes(s: &GediShot) -> bool {
    s.quality_flag
        && !s.degrade_flag
        && s.sensitivity >= MIN_SENSITIVITY
        && POWER_BEAMS.contains(&s.beam_id)
        && s.rh_98.is_finite()
        && (0.0..=MAX_RH98_M).contains(&s.rh_98)
}

pub fn filter_gedi(shots: &[GediShot]) -> Vec<GediShot> {
    shots.iter().copied().filter(shot_passes).collect()
}

/// Maps shots onto the pixel containing their recorded position. One label
/// per pixel (highest sensitivity, earliest on ties), sorted by (row, col).
pub fn rasterize_labels(shots: &[GediShot], grid: &RasterPatch) -> Vec<Label> {
    let mut best: BTreeMap<(usize, usize), &GediShot> = BTreeMap::new();
    for s in shots {
        let Some(px) = grid.pixel_of(s.position.0, s.position.1) else {
            continue;
        };
        match best.get(&px) {
            Some(prev) if prev.sensitivity >= s.sensitivity => {}
            _ => {
                best.insert(px, s);
            }
        }
    }
    best.into_iter()
        .map(|((r, c), s)| Label {
            row: r as u32,
            col: c as u32,
            height: s.rh_98 as f32,
            track_id: s.track_id,
        })
        .collect()
}

/// Input encodings understood by [`build_model_input`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputVariant {
    #[serde(rename = "2d-composite")]
    Composite2d,
    #[serde(rename = "2d-stack")]
    Stack2d,
    #[serde(rename = "3d-stack")]
    Stack3d,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] = [InputVariant::Composite2d, InputVariant::Stack2d, InputVariant::Stack3d];

    pub fn name(self) -> &'static str {
        match self {
            InputVariant::Composite2d => "2D-Composite",
            InputVariant::Stack2d => "2D-Stack",
            InputVariant::Stack3d => "3D-Stack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "2d-composite" | "composite" => Ok(InputVariant::Composite2d),
            "2d-stack" | "stack" => Ok(InputVariant::Stack2d),
            "3d-stack" | "3d" => Ok(InputVariant::Stack3d),
            _ => Err(Error::Config(format!("unknown input variant `{}`", s))),
        }
    }

    /// Channel count for `bands` optical bands over `months` months.
    pub fn channels(self, bands: usize, months: usize) -> usize {
        match self {
            InputVariant::Composite2d | InputVariant::Stack3d => bands + S1_BANDS.len(),
            InputVariant::Stack2d => bands * months + S1_BANDS.len(),
        }
    }
}

/// Model input tensor without batch axis.
///
/// Channel order:
/// - `2D-Composite` `[B + 4, H, W]`: optical median per band, then radar.
/// - `2D-Stack` `[T·B + 4, H, W]`: month-major (all bands of the first
///   listed month, then the next month), then radar.
/// - `3D-Stack` `[B + 4, T, H, W]`: optical bands, then radar repeated in
///   every time slice.
pub fn build_model_input(sample: &SampleArchive, variant: InputVariant) -> Result<Tensor> {
    sample.validate_geometry()?;
    let (h, w) = (sample.height(), sample.width());
    let px = h * w;
    let t = sample.s2_stack.len();
    let nb = sample.s2_stack[0].bands().len();
    let s1 = sample.s1_composite.data();
    let ns1 = S1_BANDS.len();
    match variant {
        InputVariant::Composite2d => {
            let comp = median_composite(&sample.s2_stack)?;
            let mut data = Vec::with_capacity((nb + ns1) * px);
            data.extend_from_slice(comp.data());
            data.extend_from_slice(s1);
            Tensor::new(vec![nb + ns1, h, w], data)
        }
        InputVariant::Stack2d => {
            let mut data = Vec::with_capacity((t * nb + ns1) * px);
            for m in &sample.s2_stack {
                data.extend_from_slice(m.data());
            }
            data.extend_from_slice(s1);
            Tensor::new(vec![t * nb + ns1, h, w], data)
        }
        InputVariant::Stack3d => {
            let mut data = Vec::with_capacity((nb + ns1) * t * px);
            for b in 0..nb {
                for m in &sample.s2_stack {
                    data.extend_from_slice(m.band(b));
                }
            }
            for b in 0..ns1 {
                for _ in 0..t {
                    data.extend_from_slice(&s1[b * px..(b + 1) * px]);
                }
            }
            Tensor::new(vec![nb + ns1, t, h, w], data)
        }
    }
}

/// Restricts the optical stack to the listed calendar months, in the given
/// order.
pub fn month_subset(sample: &SampleArchive, months: &[u8]) -> Result<SampleArchive> {
    if months.is_empty() {
        return Err(Error::Domain("month selection is empty".into()));
    }
    let mut out = sample.clone();
    out.s2_stack.clear();
    out.metadata.cloud_fractions.clear();
    out.months.clear();
    for &m in months {
        if !(1..=12).contains(&m) {
            return Err(Error::Domain(format!("month {} outside 1..12", m)));
        }
        let i = sample
            .months
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| Error::Domain(format!("month {} not present in sample", m)))?;
        out.s2_stack.push(sample.s2_stack[i].clone());
        out.metadata.cloud_fractions.push(sample.metadata.cloud_fractions[i]);
        out.months.push(m);
    }
    Ok(out)
}

/// Drops the named optical bands (`B01` and `B1` are equivalent) from every
/// month.
pub fn band_subset(sample: &SampleArchive, drop: &[&str]) -> Result<SampleArchive> {
    let drop: Vec<String> = drop.iter().map(|d| canonical_band(d)).collect();
    let bands = sample.s2_stack[0].bands();
    for d in &drop {
        if !bands.iter().any(|b| canonical_band(b) == *d) {
            return Err(Error::Schema(format!("band `{}` not in sample", d)));
        }
    }
    let keep: Vec<&str> = bands
        .iter()
        .filter(|b| !drop.contains(&canonical_band(b)))
        .map(|s| s.as_str())
        .collect();
    if keep.is_empty() {
        return Err(Error::Domain("band selection is empty".into()));
    }
    let mut out = sample.clone();
    out.s2_stack = sample.s2_stack.iter().map(|p| p.select_bands(&keep)).collect::<Result<_>>()?;
    Ok(out)
}
