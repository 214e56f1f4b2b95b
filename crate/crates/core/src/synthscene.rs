//! Deterministic synthetic world: canopy-height truth, optical and radar
//! imagery, and LiDAR-like sparse tracks.
//!
//! # Forward model
//!
//! Every pixel has a true height `h` (m) and a forest type. Optical band `b`
//! in month `m` of year `y` is
//!
//! ```text
//! value_b = gain_y · (base_b + veg_b · V + grass_b · G)
//! V = 2 · leaf(type, m − φ_y) · h / 40      (forest pixels, else 0)
//! G = leaf(none, m − φ_y)                   (non-forest pixels, else 0)
//! ```
//!
//! with `leaf(broadleaf, m) = 0.5 + 0.5 cos(2π (m − 7) / 12)` (peak in July),
//! `leaf(conifer, m) = 0.8` and `leaf(none, m) = 0.35 + 0.25 cos(2π (m − 7) / 12)`.
//! `veg_b` is positive for the NIR group and negative for the visible / SWIR
//! groups, so red-group bands anti-correlate with the seasonal NIR cycle.
//! `gain_y` (calibration) and `φ_y` (phenology shift, whole months) vary per
//! year. The noise-free field is rigidly shifted by a per-acquisition
//! geolocation offset drawn from `N(0, geo_jitter_sigma²)` (bilinear
//! resampling), Gaussian noise with standard deviation
//! `σ_b = s2_noise · divisor_b` truncated at ±4σ_b is added, and cloudy
//! 16×16 blocks (probability `cloud_prob`) are overwritten with
//! `1.2 · divisor_b`.
//!
//! Radar bands are in dB: `VV = −14 + 6 (1 − e^{−h/10})`,
//! `VH = −21 + 7 (1 − e^{−h/10})`, descending passes 0.5 dB lower, with
//! multiplicative exponential speckle scaled to unit median.
//!
//! The median over a broadleaf year of `leaf` is 0.5, so in a per-pixel
//! median composite a broadleaf pixel of height `h` is indistinguishable from
//! a conifer of height `0.625 h`. Monthly stacks keep the seasonal cycle that
//! separates the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{RasterPatch, SampleArchive, SampleMetadata, NODATA, RESOLUTION_M};
use crate::preprocess::{
    filter_gedi, median_composite, rasterize_labels, select_monthly_indices, GediShot, NormTable, S1_BANDS, S2_BANDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestType {
    None,
    Broadleaf,
    Conifer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    ClearCut,
    Growth,
}

/// Pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row0 && r < self.row0 + self.height && c >= self.col0 && c < self.col0 + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeEvent {
    pub kind: ChangeKind,
    pub region: Rect,
    pub year: i32,
    /// Growth rate in m/yr for `growth`; ignored for `clear_cut`.
    #[serde(default)]
    pub magnitude: f64,
}

fn default_size() -> usize {
    128
}
fn default_years() -> Vec<i32> {
    vec![2019, 2020, 2021, 2022]
}
fn default_forest_fraction() -> f64 {
    0.6
}
fn default_broadleaf_fraction() -> f64 {
    0.5
}
fn default_cloud_prob() -> f64 {
    0.3
}
fn default_jitter() -> f64 {
    4.0
}
fn default_s2_noise() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_label_sigma() -> f64 {
    1.5
}
fn default_track_offset() -> f64 {
    10.0
}
fn default_label_density() -> f64 {
    0.0015
}
fn default_fail_fraction() -> f64 {
    0.1
}
fn default_acq_per_month() -> usize {
    3
}
fn default_s1_acq() -> usize {
    8
}
fn default_origin() -> (f64, f64) {
    (500_000.0, 5_000_000.0)
}
fn default_texture() -> f64 {
    2.0
}
fn default_gain_sigma() -> f64 {
    0.06
}
fn default_phenology_shift() -> i32 {
    1
}

/// Scene parameters. Every field except `seed` has a default, so a JSON
/// config can be as small as `{"seed": 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size_px: usize,
    #[serde(default = "default_years")]
    pub years: Vec<i32>,
    #[serde(default = "default_forest_fraction")]
    pub forest_fraction: f64,
    #[serde(default = "default_broadleaf_fraction")]
    pub broadleaf_fraction: f64,
    #[serde(default)]
    pub events: Vec<ChangeEvent>,
    #[serde(default = "default_cloud_prob")]
    pub cloud_prob: f64,
    /// Standard deviation of the per-acquisition geolocation shift (m).
    #[serde(default = "default_jitter")]
    pub geo_jitter_sigma: f64,
    /// Optical noise as a fraction of each band's normalisation divisor.
    #[serde(default = "default_s2_noise")]
    pub s2_noise: f64,
    #[serde(default = "default_true")]
    pub s1_speckle: bool,
    #[serde(default = "default_label_sigma")]
    pub label_sigma: f64,
    /// Half-width of the uniform per-track offset box (m).
    #[serde(default = "default_track_offset")]
    pub track_offset_max_m: f64,
    /// Forces every track's offset (m) when set.
    #[serde(default)]
    pub track_offset_fixed: Option<(f64, f64)>,
    /// When non-empty (and no fixed offset), each track draws its offset
    /// uniformly from this list.
    #[serde(default)]
    pub track_offset_choices: Vec<(f64, f64)>,
    /// Target fraction of labelled pixels after filtering.
    #[serde(default = "default_label_density")]
    pub label_density: f64,
    /// Fraction of shots failing each quality predicate.
    #[serde(default = "default_fail_fraction")]
    pub gedi_fail_fraction: f64,
    #[serde(default = "default_acq_per_month")]
    pub acquisitions_per_month: usize,
    #[serde(default = "default_s1_acq")]
    pub s1_acquisitions: usize,
    #[serde(default = "default_origin")]
    pub origin: (f64, f64),
    /// Per-pixel canopy roughness inside stands (m).
    #[serde(default = "default_texture")]
    pub texture_sigma: f64,
    /// Spread of the per-year radiometric gain.
    #[serde(default = "default_gain_sigma")]
    pub year_gain_sigma: f64,
    /// Maximum per-year phenology shift in whole months.
    #[serde(default = "default_phenology_shift")]
    pub phenology_shift_max: i32,
}

impl SceneConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{} must lie in [0, 1], got {}", name, v)))
            }
        };
        if self.size_px < 32 {
            return Err(Error::Config(format!("size_px must be >= 32, got {}", self.size_px)));
        }
        if self.years.is_empty() || self.years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config(format!("years must be contiguous and ascending: {:?}", self.years)));
        }
        frac("forest_fraction", self.forest_fraction)?;
        frac("broadleaf_fraction", self.broadleaf_fraction)?;
        frac("cloud_prob", self.cloud_prob)?;
        frac("gedi_fail_fraction", self.gedi_fail_fraction)?;
        frac("label_density", self.label_density)?;
        if self.geo_jitter_sigma < 0.0 || self.s2_noise < 0.0 || self.label_sigma < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.acquisitions_per_month == 0 {
            return Err(Error::Config("acquisitions_per_month must be >= 1".into()));
        }
        if self.s1_acquisitions < 6 {
            return Err(Error::Config(format!("s1_acquisitions must be >= 6, got {}", self.s1_acquisitions)));
        }
        for e in &self.events {
            let r = e.region;
            if r.height == 0 || r.width == 0 || r.row0 + r.height > self.size_px || r.col0 + r.width > self.size_px {
                return Err(Error::Config(format!("event region {:?} outside scene", r)));
            }
            if !self.years.contains(&e.year) {
                return Err(Error::Config(format!("event year {} outside {:?}", e.year, self.years)));
            }
        }
        Ok(())
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, tags…)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed);
    for &t in tags {
        h = mix(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const TAG_STANDS: u64 = 1;
const TAG_TYPES: u64 = 2;
const TAG_HEIGHT: u64 = 3;
const TAG_TEXTURE: u64 = 4;
const TAG_YEAR: u64 = 5;
const TAG_S2: u64 = 6;
const TAG_S1: u64 = 7;
const TAG_GEDI: u64 = 8;

/// Multi-octave value noise, rank-transformed to a uniform `[0, 1)`
/// distribution.
fn smooth_uniform(rng: &mut ChaCha8Rng, size: usize, cells: &[(usize, f64)]) -> Vec<f64> {
    let mut acc = vec![0.0f64; size * size];
    for &(cell, weight) in cells {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for r in 0..size {
            let fr = r as f64 / cell as f64;
            let (i, tr) = (fr.floor() as usize, smooth(fr.fract()));
            for c in 0..size {
                let fc = c as f64 / cell as f64;
                let (j, tc) = (fc.floor() as usize, smooth(fc.fract()));
                let v00 = lattice[i * n + j];
                let v01 = lattice[i * n + j + 1];
                let v10 = lattice[(i + 1) * n + j];
                let v11 = lattice[(i + 1) * n + j + 1];
                let top = v00 + (v01 - v00) * tc;
                let bot = v10 + (v11 - v10) * tc;
                acc[r * size + c] += weight * (top + (bot - top) * tr);
            }
        }
    }
    let mut order: Vec<usize> = (0..acc.len()).collect();
    order.sort_by(|&a, &b| acc[a].total_cmp(&acc[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; acc.len()];
    let n = acc.len() as f64;
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as f64 / n;
    }
    out
}

/// Ground-truth heights per year plus the forest-type map.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthField {
    pub origin: (f64, f64),
    pub size: usize,
    pub years: Vec<i32>,
    /// Row-major heights (m), one raster per year.
    pub heights: Vec<Vec<f32>>,
    pub forest_type: Vec<ForestType>,
}

impl TruthField {
    fn year_index(&self, year: i32) -> Result<usize> {
        self.years
            .iter()
            .position(|&y| y == year)
            .ok_or_else(|| Error::Domain(format!("year {} not in {:?}", year, self.years)))
    }

    pub fn heights_for(&self, year: i32) -> Result<&[f32]> {
        Ok(&self.heights[self.year_index(year)?])
    }

    pub fn height_raster(&self, year: i32) -> Result<RasterPatch> {
        RasterPatch::new(
            self.origin,
            RESOLUTION_M,
            vec!["height".into()],
            self.size,
            self.size,
            self.heights_for(year)?.to_vec(),
            NODATA,
        )
    }

    /// Forest-type codes as a raster (0 none, 1 broadleaf, 2 conifer).
    pub fn type_raster(&self) -> RasterPatch {
        let data = self
            .forest_type
            .iter()
            .map(|t| match t {
                ForestType::None => 0.0,
                ForestType::Broadleaf => 1.0,
                ForestType::Conifer => 2.0,
            })
            .collect();
        RasterPatch::new(self.origin, RESOLUTION_M, vec!["forest_type".into()], self.size, self.size, data, NODATA)
            .expect("consistent")
    }

    fn grid(&self) -> RasterPatch {
        RasterPatch::filled(self.origin, &[], self.size, self.size, 0.0)
    }
}

pub fn gen_truth(cfg: &SceneConfig) -> Result<TruthField> {
    cfg.validate()?;
    let n = cfg.size_px;
    let stands = smooth_uniform(&mut stream(cfg.seed, &[TAG_STANDS]), n, &[(32, 0.6), (16, 0.3), (8, 0.1)]);
    let types = smooth_uniform(&mut stream(cfg.seed, &[TAG_TYPES]), n, &[(32, 0.7), (16, 0.3)]);
    let tall = smooth_uniform(&mut stream(cfg.seed, &[TAG_HEIGHT]), n, &[(32, 0.5), (16, 0.3), (8, 0.2)]);
    let mut tex_rng = stream(cfg.seed, &[TAG_TEXTURE]);
    let normal = Normal::new(0.0, cfg.texture_sigma.max(0.0)).expect("valid sigma");

    let clear_cuts: Vec<&ChangeEvent> = cfg.events.iter().filter(|e| e.kind == ChangeKind::ClearCut).collect();
    let mut forest_type = Vec::with_capacity(n * n);
    let mut base = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let (r, c) = (i / n, i % n);
        let texture: f64 = normal.sample(&mut tex_rng);
        let bare: f64 = tex_rng.random_range(0.0..1.5);
        let in_cut = clear_cuts.iter().any(|e| e.region.contains(r, c));
        let is_forest = stands[i] < cfg.forest_fraction || in_cut;
        let ty = if !is_forest {
            ForestType::None
        } else if types[i] < cfg.broadleaf_fraction {
            ForestType::Broadleaf
        } else {
            ForestType::Conifer
        };
        let mut h = if is_forest {
            (5.0 + 30.0 * tall[i] + texture).clamp(3.0, 55.0)
        } else {
            bare
        };
        if in_cut {
            // clear-cuts target mature stands
            h = h.max(12.0);
        }
        forest_type.push(ty);
        base.push(h);
    }

    let mut heights = Vec::with_capacity(cfg.years.len());
    let mut cut_rng = stream(cfg.seed, &[TAG_TEXTURE, 99]);
    let stubble: Vec<f64> = (0..n * n).map(|_| cut_rng.random_range(0.0..0.8)).collect();
    for &y in &cfg.years {
        let mut hy = base.clone();
        for e in &cfg.events {
            if y < e.year {
                continue;
            }
            let r = e.region;
            for row in r.row0..r.row0 + r.height {
                for col in r.col0..r.col0 + r.width {
                    let i = row * n + col;
                    match e.kind {
                        ChangeKind::ClearCut => hy[i] = stubble[i],
                        ChangeKind::Growth => {
                            hy[i] = (hy[i] + e.magnitude * (y - e.year + 1) as f64).clamp(0.0, 60.0)
                        }
                    }
                }
            }
        }
        heights.push(hy.into_iter().map(|h| h.clamp(0.0, 60.0) as f32).collect());
    }
    Ok(TruthField {
        origin: cfg.origin,
        size: n,
        years: cfg.years.clone(),
        heights,
        forest_type,
    })
}

/// Per-year radiometric gain and phenology shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YearConditions {
    pub gain: f64,
    pub phenology_shift: i32,
}

pub fn year_conditions(cfg: &SceneConfig, year: i32) -> YearConditions {
    let mut rng = stream(cfg.seed, &[TAG_YEAR, year as u64]);
    let z: f64 = StandardNormal.sample(&mut rng);
    let shift = if cfg.phenology_shift_max > 0 {
        rng.random_range(-cfg.phenology_shift_max..=cfg.phenology_shift_max)
    } else {
        0
    };
    YearConditions {
        gain: (1.0 + cfg.year_gain_sigma * z).clamp(0.85, 1.15),
        phenology_shift: shift,
    }
}

/// Seasonal leaf factor of a forest type in (possibly shifted) month `m`.
pub fn leaf(ty: ForestType, month: f64) -> f64 {
    let phase = (2.0 * std::f64::consts::PI * (month - 7.0) / 12.0).cos();
    match ty {
        ForestType::Broadleaf => 0.5 + 0.5 * phase,
        ForestType::Conifer => 0.8,
        ForestType::None => 0.35 + 0.25 * phase,
    }
}

/// `(base, veg, grass)` coefficients per optical band, in band order of
/// [`S2_BANDS`].
pub const BAND_COEFFS: [(f64, f64, f64); 12] = [
    (400.0, -40.0, -60.0),    // B1
    (500.0, -120.0, -150.0),  // B2
    (700.0, -80.0, 250.0),    // B3
    (800.0, -250.0, -350.0),  // B4
    (1100.0, 150.0, 300.0),   // B5
    (1200.0, 550.0, 700.0),   // B6
    (1300.0, 550.0, 900.0),   // B7
    (1500.0, 1000.0, 1300.0), // B8
    (1600.0, 950.0, 1200.0),  // B8A
    (1600.0, 500.0, 400.0),   // B9
    (2400.0, -450.0, -300.0), // B11
    (1800.0, -420.0, -400.0), // B12
];

/// Noise-free optical value of band `band` for one pixel.
pub fn band_model(band: usize, height: f64, ty: ForestType, month: u8, cond: YearConditions) -> f64 {
    let m = month as f64 - cond.phenology_shift as f64;
    let (v, g) = match ty {
        ForestType::None => (0.0, leaf(ForestType::None, m)),
        t => (2.0 * leaf(t, m) * height / 40.0, 0.0),
    };
    let (base, veg, grass) = BAND_COEFFS[band];
    cond.gain * (base + veg * v + grass * g)
}

fn bilinear(field: &[f64], n: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (n - 1) as f64);
    let c = c.clamp(0.0, (n - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(n - 1), (c0 + 1).min(n - 1));
    let (tr, tc) = (r - r0 as f64, c - c0 as f64);
    let top = field[r0 * n + c0] * (1.0 - tc) + field[r0 * n + c1] * tc;
    let bot = field[r1 * n + c0] * (1.0 - tc) + field[r1 * n + c1] * tc;
    top * (1.0 - tr) + bot * tr
}

pub const CLOUD_BLOCK_PX: usize = 16;

/// Acquisition `k` of a month: 12 optical bands plus its cloud fraction.
pub fn render_acquisition(
    truth: &TruthField,
    year: i32,
    month: u8,
    k: usize,
    cfg: &SceneConfig,
) -> Result<(RasterPatch, f32)> {
    if !(1..=12).contains(&month) {
        return Err(Error::Domain(format!("month {} outside 1..12", month)));
    }
    let heights = truth.heights_for(year)?;
    let n = truth.size;
    let cond = year_conditions(cfg, year);
    let table = NormTable::default();
    let mut rng = stream(cfg.seed, &[TAG_S2, year as u64, month as u64, k as u64]);
    let jitter = Normal::new(0.0, cfg.geo_jitter_sigma).expect("valid sigma");
    let dx_px = jitter.sample(&mut rng) / RESOLUTION_M;
    let dy_px = jitter.sample(&mut rng) / RESOLUTION_M;

    let blocks = n.div_ceil(CLOUD_BLOCK_PX);
    let cloudy: Vec<bool> = (0..blocks * blocks).map(|_| rng.random::<f64>() < cfg.cloud_prob).collect();
    let is_cloud = |r: usize, c: usize| cloudy[(r / CLOUD_BLOCK_PX) * blocks + c / CLOUD_BLOCK_PX];

    let mut data = Vec::with_capacity(12 * n * n);
    let mut field = vec![0.0f64; n * n];
    for (b, name) in S2_BANDS.iter().enumerate() {
        for (i, f) in field.iter_mut().enumerate() {
            *f = band_model(b, heights[i] as f64, truth.forest_type[i], month, cond);
        }
        let divisor = table.divisor(name).expect("band in table");
        let noise = Normal::new(0.0, cfg.s2_noise * divisor).expect("valid sigma");
        for r in 0..n {
            for c in 0..n {
                let v = if dx_px == 0.0 && dy_px == 0.0 {
                    field[r * n + c]
                } else {
                    bilinear(&field, n, r as f64 + dy_px, c as f64 + dx_px)
                };
                let v = if is_cloud(r, c) {
                    1.2 * divisor
                } else if cfg.s2_noise > 0.0 {
                    let sigma = cfg.s2_noise * divisor;
                    v + noise.sample(&mut rng).clamp(-4.0 * sigma, 4.0 * sigma)
                } else {
                    v
                };
                data.push(v.max(0.0) as f32);
            }
        }
    }
    let cloud_px = (0..n * n).filter(|&i| is_cloud(i / n, i % n)).count();
    let patch = RasterPatch::new(
        truth.origin,
        RESOLUTION_M,
        S2_BANDS.iter().map(|s| s.to_string()).collect(),
        n,
        n,
        data,
        NODATA,
    )?;
    Ok((patch, cloud_px as f32 / (n * n) as f32))
}

/// First acquisition of a month.
pub fn render_month(truth: &TruthField, year: i32, month: u8, cfg: &SceneConfig) -> Result<(RasterPatch, f32)> {
    render_acquisition(truth, year, month, 0, cfg)
}

/// Noise-free radar backscatter (dB) for band index `band` of [`S1_BANDS`].
pub fn radar_model(band: usize, height: f64) -> f64 {
    let closure = 1.0 - (-height / 10.0).exp();
    let pass_offset = if band >= 2 { -0.5 } else { 0.0 };
    let v = if band % 2 == 0 {
        -14.0 + 6.0 * closure
    } else {
        -21.0 + 7.0 * closure
    };
    v + pass_offset
}

pub fn render_s1_year(truth: &TruthField, year: i32, cfg: &SceneConfig) -> Result<Vec<RasterPatch>> {
    let heights = truth.heights_for(year)?;
    let n = truth.size;
    let ln2 = std::f64::consts::LN_2;
    (0..cfg.s1_acquisitions)
        .map(|k| {
            let mut rng = stream(cfg.seed, &[TAG_S1, year as u64, k as u64]);
            let mut data = Vec::with_capacity(4 * n * n);
            for b in 0..4 {
                for &h in heights {
                    let mut v = radar_model(b, h as f64);
                    if cfg.s1_speckle {
                        let e: f64 = Exp1.sample(&mut rng);
                        v += 10.0 * (e / ln2).max(1e-6).log10();
                    }
                    data.push(v.clamp(-30.0, 0.0) as f32);
                }
            }
            RasterPatch::new(
                truth.origin,
                RESOLUTION_M,
                S1_BANDS.iter().map(|s| s.to_string()).collect(),
                n,
                n,
                data,
                NODATA,
            )
        })
        .collect()
}

/// Along-track spacing of simulated LiDAR shots (m).
pub const SHOT_SPACING_M: f64 = 60.0;

pub fn sample_gedi(truth: &TruthField, year: i32, cfg: &SceneConfig) -> Result<Vec<GediShot>> {
    Ok(sample_gedi_tracks(truth, year, cfg)?.0)
}

/// Pixel shift `(di, dj)` under which a track recorded with geolocation
/// error `offset` (m, east/north) lines up with the truth: the label at
/// `(r, c)` belongs to pixel `(r + di, c + dj)`.
pub fn offset_to_shift(offset: (f64, f64)) -> (i32, i32) {
    ((offset.1 / RESOLUTION_M).round() as i32, -(offset.0 / RESOLUTION_M).round() as i32)
}

/// [`sample_gedi`] plus the geolocation offset applied to each track.
pub fn sample_gedi_tracks(truth: &TruthField, year: i32, cfg: &SceneConfig) -> Result<(Vec<GediShot>, Vec<(f64, f64)>)> {
    let heights = truth.heights_for(year)?;
    let n = truth.size;
    let grid = truth.grid();
    let extent = n as f64 * RESOLUTION_M;
    let mut rng = stream(cfg.seed, &[TAG_GEDI, year as u64]);
    let f = cfg.gedi_fail_fraction;
    // expected in-scene shots of a diagonal track and the share passing all
    // five quality predicates
    let shots_per_track = (extent * std::f64::consts::SQRT_2 * 0.75 / SHOT_SPACING_M).max(1.0);
    let pass_rate = (1.0 - f).powi(5).max(1e-3);
    let wanted = cfg.label_density * (n * n) as f64;
    let n_tracks = if cfg.label_density > 0.0 {
        ((wanted / (shots_per_track * pass_rate)).round() as usize).max(1)
    } else {
        0
    };
    let label_noise = Normal::new(0.0, cfg.label_sigma).expect("valid sigma");
    let mut shots = Vec::new();
    let mut offsets = Vec::with_capacity(n_tracks);
    for track in 0..n_tracks {
        let angle = rng.random_range(30.0f64..60.0).to_radians() * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let (dx, dy) = (angle.cos(), angle.sin());
        let cx = truth.origin.0 + rng.random_range(0.0..extent);
        let cy = truth.origin.1 - rng.random_range(0.0..extent);
        let offset = match cfg.track_offset_fixed {
            Some(o) => o,
            None if !cfg.track_offset_choices.is_empty() => {
                cfg.track_offset_choices[rng.random_range(0..cfg.track_offset_choices.len())]
            }
            None if cfg.track_offset_max_m > 0.0 => (
                rng.random_range(-cfg.track_offset_max_m..=cfg.track_offset_max_m),
                rng.random_range(-cfg.track_offset_max_m..=cfg.track_offset_max_m),
            ),
            None => (0.0, 0.0),
        };
        offsets.push(offset);
        let beam_id = if rng.random::<f64>() < f {
            rng.random_range(1..=4)
        } else {
            rng.random_range(5..=8)
        };
        let phase = rng.random_range(0.0..SHOT_SPACING_M);
        let half = extent * std::f64::consts::SQRT_2;
        let mut s = -half + phase;
        while s < half {
            let (x, y) = (cx + s * dx, cy + s * dy);
            s += SHOT_SPACING_M;
            let Some((r, c)) = grid.pixel_of(x, y) else { continue };
            let truth_h = heights[r * n + c] as f64;
            let mut rh = (truth_h + label_noise.sample(&mut rng)).max(0.0);
            let quality_flag = rng.random::<f64>() >= f;
            let degrade_flag = rng.random::<f64>() < f;
            let sensitivity = if rng.random::<f64>() < f {
                rng.random_range(0.5..0.9)
            } else {
                rng.random_range(0.9..=1.0)
            };
            if rng.random::<f64>() < f {
                rh = 100.0 + rng.random_range(1.0..50.0);
            }
            shots.push(GediShot {
                position: (x + offset.0, y + offset.1),
                rh_98: rh,
                beam_id,
                quality_flag,
                degrade_flag,
                sensitivity,
                track_id: track as u32,
                year,
            });
        }
    }
    Ok((shots, offsets))
}

/// Full preprocessing chain for one scene-year: best-of-month optical
/// selection, radar median composite, filtered and rasterised LiDAR labels.
/// Values are stored unnormalised.
pub fn synth_sample(truth: &TruthField, year: i32, cfg: &SceneConfig, patch_id: &str) -> Result<SampleArchive> {
    let mut candidates = Vec::with_capacity(12);
    for month in 1..=12u8 {
        let month_cands = (0..cfg.acquisitions_per_month)
            .map(|k| render_acquisition(truth, year, month, k, cfg))
            .collect::<Result<Vec<_>>>()?;
        candidates.push(month_cands);
    }
    let chosen = select_monthly_indices(&candidates)?;
    let cloud_fractions = chosen.iter().enumerate().map(|(m, &i)| candidates[m][i].1).collect();
    let s2_stack = chosen
        .iter()
        .enumerate()
        .map(|(m, &i)| candidates[m][i].0.clone())
        .collect();
    let s1_composite = median_composite(&render_s1_year(truth, year, cfg)?)?;
    let shots = filter_gedi(&sample_gedi(truth, year, cfg)?);
    let labels = rasterize_labels(&shots, &s1_composite);
    let sample = SampleArchive {
        patch_id: patch_id.to_string(),
        year,
        months: (1..=12).collect(),
        s2_stack,
        s1_composite,
        labels,
        metadata: SampleMetadata {
            seed: cfg.seed,
            cloud_fractions,
        },
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SceneConfig {
        let mut c = SceneConfig::new(seed);
        c.size_px = 48;
        c.geo_jitter_sigma = 0.0;
        c.s2_noise = 0.0;
        c.cloud_prob = 0.0;
        c
    }

    #[test]
    fn truth_is_deterministic() {
        let c = SceneConfig::new(11);
        assert_eq!(gen_truth(&c).unwrap(), gen_truth(&c).unwrap());
        let mut d = c.clone();
        d.seed = 12;
        assert_ne!(gen_truth(&c).unwrap().heights, gen_truth(&d).unwrap().heights);
    }

    #[test]
    fn clear_cut_contract() {
        let mut c = SceneConfig::new(3);
        let region = Rect {
            row0: 10,
            col0: 20,
            height: 30,
            width: 25,
        };
        c.events.push(ChangeEvent {
            kind: ChangeKind::ClearCut,
            region,
            year: 2021,
            magnitude: 0.0,
        });
        let t = gen_truth(&c).unwrap();
        let n = t.size;
        for i in 0..n * n {
            let (r, col) = (i / n, i % n);
            let hs: Vec<f32> = t.heights.iter().map(|h| h[i]).collect();
            if region.contains(r, col) {
                assert!(hs[2] < 1.0 && hs[3] < 1.0);
                assert!(hs[0] >= 12.0 && hs[0] == hs[1]);
            } else {
                assert!(hs.iter().all(|&h| h == hs[0]), "pixel {i} changed outside events");
            }
        }
    }

    #[test]
    fn growth_event_adds_per_year() {
        let mut c = SceneConfig::new(3);
        let region = Rect {
            row0: 0,
            col0: 0,
            height: 4,
            width: 4,
        };
        c.events.push(ChangeEvent {
            kind: ChangeKind::Growth,
            region,
            year: 2020,
            magnitude: 1.5,
        });
        let t = gen_truth(&c).unwrap();
        let h0 = t.heights[0][0];
        assert!((t.heights[1][0] - (h0 + 1.5).min(60.0)).abs() < 1e-4);
        assert!((t.heights[3][0] - (h0 + 4.5).min(60.0)).abs() < 1e-4);
    }

    #[test]
    fn no_forest_means_low_heights() {
        let mut c = SceneConfig::new(5);
        c.forest_fraction = 0.0;
        let t = gen_truth(&c).unwrap();
        assert!(t.heights.iter().flatten().all(|&h| h < 2.0));
        assert!(t.forest_type.iter().all(|&f| f == ForestType::None));
    }

    #[test]
    fn config_validation() {
        let mut c = SceneConfig::new(1);
        c.size_px = 16;
        assert!(c.validate().is_err());
        let mut c = SceneConfig::new(1);
        c.years = vec![2019, 2021];
        assert!(c.validate().is_err());
        let mut c = SceneConfig::new(1);
        c.forest_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn quiet_renders_are_identical() {
        let c = quiet(2);
        let t = gen_truth(&c).unwrap();
        let a = render_acquisition(&t, 2020, 6, 0, &c).unwrap();
        let b = render_acquisition(&t, 2020, 6, 1, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn broadleaf_nir_peaks_in_summer() {
        let cond = YearConditions {
            gain: 1.0,
            phenology_shift: 0,
        };
        let b8 = S2_BANDS.iter().position(|&b| b == "B8").unwrap();
        let june = band_model(b8, 25.0, ForestType::Broadleaf, 6, cond);
        let jan = band_model(b8, 25.0, ForestType::Broadleaf, 1, cond);
        // direct evaluation: 1500 + 1000 · 2 · leaf · 25/40
        let leaf_june = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * -1.0 / 12.0).cos();
        assert!((june - (1500.0 + 1000.0 * 2.0 * leaf_june * 25.0 / 40.0)).abs() < 1e-9);
        assert!((jan - 1500.0).abs() < 1e-9);
        assert!(june > jan);
        let c1 = band_model(b8, 25.0, ForestType::Conifer, 1, cond);
        let c6 = band_model(b8, 25.0, ForestType::Conifer, 6, cond);
        assert_eq!(c1, c6);
    }

    #[test]
    fn rendered_values_match_forward_model() {
        let mut c = quiet(9);
        c.s2_noise = 0.01;
        let t = gen_truth(&c).unwrap();
        let cond = year_conditions(&c, 2020);
        let (p, frac) = render_month(&t, 2020, 8, &c).unwrap();
        assert_eq!(frac, 0.0);
        let table = NormTable::default();
        for (b, name) in S2_BANDS.iter().enumerate() {
            let sigma = c.s2_noise * table.divisor(name).unwrap();
            for i in 0..t.size * t.size {
                let expected = band_model(b, t.heights[1][i] as f64, t.forest_type[i], 8, cond);
                let got = p.band(b)[i] as f64;
                if expected > 4.0 * sigma {
                    assert!((got - expected).abs() <= 4.0 * sigma + 1e-3, "band {name}: {got} vs {expected}");
                }
            }
        }
        let table = NormTable::default();
        for (b, name) in S2_BANDS.iter().enumerate() {
            let div = table.divisor(name).unwrap() as f32;
            assert!(p.band(b).iter().all(|&v| v >= 0.0 && v <= div), "{name} outside expected range");
        }
    }

    #[test]
    fn full_cloud_cover() {
        let mut c = quiet(4);
        c.cloud_prob = 1.0;
        let t = gen_truth(&c).unwrap();
        let (_, frac) = render_month(&t, 2019, 3, &c).unwrap();
        assert_eq!(frac, 1.0);
    }

    #[test]
    fn radar_without_speckle_is_constant_across_acquisitions() {
        let mut c = quiet(6);
        c.s1_speckle = false;
        let t = gen_truth(&c).unwrap();
        let acq = render_s1_year(&t, 2020, &c).unwrap();
        assert!(acq.len() >= 6);
        assert!(acq.iter().all(|a| a == &acq[0]));
    }

    #[test]
    fn radar_background_for_bare_scene() {
        let mut c = quiet(6);
        c.s1_speckle = false;
        let mut t = gen_truth(&c).unwrap();
        for h in &mut t.heights {
            h.fill(0.0);
        }
        let acq = render_s1_year(&t, 2020, &c).unwrap();
        for b in 0..4 {
            let v = radar_model(b, 0.0) as f32;
            assert!(acq[0].band(b).iter().all(|&x| x == v));
        }
    }

    #[test]
    fn radar_median_converges() {
        let mut c = quiet(8);
        c.size_px = 32;
        let t = gen_truth(&c).unwrap();
        let mae_for = |count: usize| {
            let mut cc = c.clone();
            cc.s1_acquisitions = count;
            let acq = render_s1_year(&t, 2020, &cc).unwrap();
            let comp = crate::preprocess::median_composite(&acq).unwrap();
            let n = t.size * t.size;
            let mut err = 0.0;
            for b in 0..4 {
                for i in 0..n {
                    err += (comp.band(b)[i] as f64 - radar_model(b, t.heights[1][i] as f64)).abs();
                }
            }
            err / (4 * n) as f64
        };
        let (few, many) = (mae_for(6), mae_for(64));
        assert!(many < few, "{many} !< {few}");
    }

    #[test]
    fn clean_shots_hit_truth() {
        let mut c = quiet(12);
        c.label_sigma = 0.0;
        c.track_offset_max_m = 0.0;
        c.gedi_fail_fraction = 0.0;
        c.label_density = 0.01;
        let t = gen_truth(&c).unwrap();
        let shots = sample_gedi(&t, 2020, &c).unwrap();
        assert!(!shots.is_empty());
        let grid = t.height_raster(2020).unwrap();
        for s in &shots {
            let (r, col) = grid.pixel_of(s.position.0, s.position.1).unwrap();
            assert_eq!(s.rh_98, grid.get(0, r, col) as f64);
        }
    }

    #[test]
    fn fixed_offset_shifts_one_column() {
        let mut c = quiet(13);
        c.label_sigma = 0.0;
        c.track_offset_fixed = Some((10.0, 0.0));
        c.gedi_fail_fraction = 0.0;
        c.label_density = 0.01;
        let t = gen_truth(&c).unwrap();
        let grid = t.height_raster(2021).unwrap();
        let mut checked = 0;
        for s in sample_gedi(&t, 2021, &c).unwrap() {
            if let Some((r, col)) = grid.pixel_of(s.position.0, s.position.1) {
                if col == 0 {
                    continue;
                }
                assert_eq!(s.rh_98, grid.get(0, r, col - 1) as f64);
                checked += 1;
            }
        }
        assert!(checked > 10);
        assert_eq!(offset_to_shift((10.0, 0.0)), (0, -1));
        assert_eq!(offset_to_shift((0.0, -10.0)), (-1, 0));
    }

    #[test]
    fn offset_choices_are_recorded_per_track() {
        let mut c = quiet(8);
        c.track_offset_choices = vec![(10.0, 0.0), (-10.0, 0.0), (0.0, 10.0), (0.0, -10.0)];
        c.label_density = 0.02;
        let t = gen_truth(&c).unwrap();
        let (shots, offsets) = sample_gedi_tracks(&t, 2020, &c).unwrap();
        assert!(offsets.len() > 4);
        assert!(offsets.iter().all(|o| c.track_offset_choices.contains(o)));
        assert!(offsets.iter().any(|o| *o != offsets[0]));
        assert_eq!(shots, sample_gedi(&t, 2020, &c).unwrap());
    }

    #[test]
    fn default_label_density() {
        for seed in 0..4 {
            let c = SceneConfig::new(seed);
            let t = gen_truth(&c).unwrap();
            let shots = filter_gedi(&sample_gedi(&t, 2020, &c).unwrap());
            let labels = rasterize_labels(&shots, &t.height_raster(2020).unwrap());
            let frac = labels.len() as f64 / (t.size * t.size) as f64;
            assert!((0.0005..=0.005).contains(&frac), "seed {seed}: density {frac}");
        }
    }
}
