//! Multi-year post-processing: per-pixel quadratic smoothing spline and
//! two-threshold canopy-loss detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::RasterPatch;

pub const DEFAULT_SMOOTHING: f64 = 5.0;
pub const LOSS_HI_M: f64 = 8.0;
pub const LOSS_LO_M: f64 = 5.0;
const PIXEL_AREA_KM2: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightSeries {
    pub years: Vec<i32>,
    pub values: Vec<f64>,
}

impl HeightSeries {
    pub fn new(years: Vec<i32>, values: Vec<f64>) -> Result<Self> {
        let s = HeightSeries { years, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.years.len() != self.values.len() || self.years.len() < 2 {
            return Err(Error::Shape(format!(
                "{} years vs {} values (need at least 2)",
                self.years.len(),
                self.values.len()
            )));
        }
        if self.years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!("years not strictly increasing: {:?}", self.years)));
        }
        if let Some(v) = self.values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Range(format!("height {v} is negative or not finite")));
        }
        Ok(())
    }
}

/// Least-squares solve of `X β = y` via normal equations with partial
/// pivoting; `None` when the design is rank deficient.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..p).map(|i| a[i][p] / a[i][i]).collect())
}

/// Truncated-power quadratic spline basis: `1, t, t², (t − k)₊²`.
fn basis(t: f64, knots: &[f64]) -> Vec<f64> {
    let mut b = vec![1.0, t, t * t];
    b.extend(knots.iter().map(|&k| (t - k).max(0.0).powi(2)));
    b
}

fn fit(ts: &[f64], y: &[f64], knots: &[f64]) -> Option<Vec<f64>> {
    let x: Vec<Vec<f64>> = ts.iter().map(|&t| basis(t, knots)).collect();
    let beta = least_squares(&x, y)?;
    Some(x.iter().map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect())
}

fn rss(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
}

/// Quadratic fit, refined by knot insertion until the residual sum of squares
/// is at most `s_param` or the spline interpolates. A fit that reproduces the
/// input to rounding returns the input itself, so smoothing is exactly
/// idempotent on its own output.
pub fn smooth_series(s: &HeightSeries, s_param: f64) -> Result<HeightSeries> {
    s.validate()?;
    let n = s.values.len();
    if n < 3 {
        return Ok(s.clone());
    }
    let y = &s.values;
    // centred and scaled years keep the normal equations well conditioned
    let mid = (s.years[0] as f64 + s.years[n - 1] as f64) / 2.0;
    let half = ((s.years[n - 1] - s.years[0]) as f64 / 2.0).max(1.0);
    let ts: Vec<f64> = s.years.iter().map(|&yr| (yr as f64 - mid) / half).collect();
    let scale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut knots: Vec<f64> = Vec::new();
    let mut used = vec![false; n - 1];
    let fitted = loop {
        if 3 + knots.len() >= n {
            break y.clone();
        }
        let Some(f) = fit(&ts, y, &knots) else {
            break y.clone();
        };
        if f.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-9 * scale) {
            break y.clone();
        }
        if rss(&f, y) <= s_param {
            break f;
        }
        let resid: Vec<f64> = f.iter().zip(y).map(|(a, b)| (a - b).abs()).collect();
        let Some(iv) = (0..n - 1)
            .filter(|&i| !used[i])
            .max_by(|&i, &j| (resid[i] + resid[i + 1]).total_cmp(&(resid[j] + resid[j + 1])).then(j.cmp(&i)))
        else {
            break y.clone();
        };
        used[iv] = true;
        knots.push((ts[iv] + ts[iv + 1]) / 2.0);
    };
    Ok(HeightSeries {
        years: s.years.clone(),
        values: fitted.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

fn check_stack(stack: &[&RasterPatch]) -> Result<()> {
    let Some(first) = stack.first() else {
        return Err(Error::Shape("empty raster stack".into()));
    };
    for (i, r) in stack.iter().enumerate() {
        if !r.same_grid(first) || r.bands().len() != 1 {
            return Err(Error::Shape(format!(
                "raster {i} ({}x{}, {} bands at {:?}) misaligned with raster 0 ({}x{} at {:?})",
                r.width(),
                r.height(),
                r.bands().len(),
                r.origin(),
                first.width(),
                first.height(),
                first.origin()
            )));
        }
    }
    Ok(())
}

/// [`smooth_series`] on every pixel of a per-year stack. Pixels with nodata
/// in any year, or with a negative value, are passed through.
pub fn smooth_map(stack: &[RasterPatch], years: &[i32], s_param: f64) -> Result<Vec<RasterPatch>> {
    check_stack(&stack.iter().collect::<Vec<_>>())?;
    if years.len() != stack.len() {
        return Err(Error::Shape(format!("{} years for {} rasters", years.len(), stack.len())));
    }
    let npix = stack[0].pixels();
    let nodata = stack[0].nodata();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(npix.max(1));
    let chunk = npix.div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                sc.spawn(move || -> Result<Vec<Vec<f32>>> {
                    let range = (t * chunk)..((t + 1) * chunk).min(npix);
                    let mut out = vec![Vec::with_capacity(range.len()); stack.len()];
                    for i in range {
                        let vals: Vec<f32> = stack.iter().map(|r| r.data()[i]).collect();
                        let smoothed = if vals.iter().any(|&v| v == nodata || !(v >= 0.0)) {
                            vals
                        } else {
                            let s = HeightSeries::new(years.to_vec(), vals.iter().map(|&v| v as f64).collect())?;
                            smooth_series(&s, s_param)?.values.iter().map(|&v| v as f32).collect()
                        };
                        for (o, v) in out.iter_mut().zip(smoothed) {
                            o.push(v);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("smoothing worker panicked")).collect()
    });
    let mut data = vec![Vec::with_capacity(npix); stack.len()];
    for part in parts {
        for (d, p) in data.iter_mut().zip(part?) {
            d.extend(p);
        }
    }
    stack
        .iter()
        .zip(data)
        .map(|(r, d)| RasterPatch::new(r.origin(), r.resolution(), r.bands().to_vec(), r.width(), r.height(), d, nodata))
        .collect()
}

/// Pixels that drop from above `hi` to below `lo`; returns a 0/1 mask and
/// the affected area in km².
pub fn detect_loss(a: &RasterPatch, b: &RasterPatch, hi: f64, lo: f64) -> Result<(RasterPatch, f64)> {
    check_stack(&[a, b])?;
    let (na, nb) = (a.nodata(), b.nodata());
    let mut count = 0usize;
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let hit = x != na && y != nb && (x as f64) > hi && (y as f64) < lo;
            count += hit as usize;
            hit as u8 as f32
        })
        .collect();
    let mask = RasterPatch::new(a.origin(), a.resolution(), vec!["loss".into()], a.width(), a.height(), data, a.nodata())?;
    Ok((mask, count as f64 * PIXEL_AREA_KM2 * (a.resolution() / 10.0).powi(2)))
}

/// Intersection over union of two 0/1 masks; 1 when both are empty.
pub fn mask_iou(a: &RasterPatch, b: &RasterPatch) -> Result<f64> {
    check_stack(&[a, b])?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairArea {
    pub from: i32,
    pub to: i32,
    pub pixels: usize,
    pub area_km2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub hi_m: f64,
    pub lo_m: f64,
    pub pairs: Vec<PairArea>,
}

impl ChangeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("canopy loss (> {} m to < {} m)\n", self.hi_m, self.lo_m);
        for p in &self.pairs {
            s.push_str(&format!("{}->{} {:>8} px {:>12.4} km2\n", p.from, p.to, p.pixels, p.area_km2));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("from,to,pixels,area_km2\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{},{}\n", p.from, p.to, p.pixels, p.area_km2));
        }
        s
    }
}

/// [`detect_loss`] over each consecutive pair of years (sorted by year).
pub fn change_report(maps: &[(i32, RasterPatch)], hi: f64, lo: f64) -> Result<ChangeReport> {
    if maps.len() < 2 {
        return Err(Error::InsufficientData(format!("{} yearly maps, need at least 2", maps.len())));
    }
    let mut sorted: Vec<&(i32, RasterPatch)> = maps.iter().collect();
    sorted.sort_by_key(|(y, _)| *y);
    let mut pairs = Vec::with_capacity(sorted.len() - 1);
    for w in sorted.windows(2) {
        let (mask, area) = detect_loss(&w[0].1, &w[1].1, hi, lo)?;
        pairs.push(PairArea {
            from: w[0].0,
            to: w[1].0,
            pixels: mask.data().iter().filter(|&&v| v == 1.0).count(),
            area_km2: area,
        });
    }
    Ok(ChangeReport { hi_m: hi, lo_m: lo, pairs })
}
