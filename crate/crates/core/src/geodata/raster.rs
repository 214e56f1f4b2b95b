use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NODATA;
use crate::error::{Error, Result};

/// Georeferenced multi-band grid, stored band-major then row-major
/// (`[bands × height × width]`). Row 0 is the northernmost row and `origin`
/// is the top-left corner of the top-left pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterPatch {
    origin: (f64, f64),
    resolution: f64,
    bands: Vec<String>,
    width: usize,
    height: usize,
    data: Vec<f32>,
    nodata: f32,
}

/// Size of the binary header in front of every raster payload.
pub const RASTER_HEADER_LEN: usize = 24;

impl RasterPatch {
    pub fn new(
        origin: (f64, f64),
        resolution: f64,
        bands: Vec<String>,
        width: usize,
        height: usize,
        data: Vec<f32>,
        nodata: f32,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Domain(format!("resolution must be > 0, got {}", resolution)));
        }
        if data.len() != bands.len() * width * height {
            return Err(Error::Shape(format!(
                "{} bands × {}×{} needs {} values, got {}",
                bands.len(),
                height,
                width,
                bands.len() * width * height,
                data.len()
            )));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(Error::Schema(format!("duplicate band name `{}`", b)));
            }
        }
        Ok(Self {
            origin,
            resolution,
            bands,
            width,
            height,
            data,
            nodata,
        })
    }

    /// A raster filled with one value, at the default resolution and nodata.
    pub fn filled(origin: (f64, f64), bands: &[&str], width: usize, height: usize, value: f32) -> Self {
        Self::new(
            origin,
            super::RESOLUTION_M,
            bands.iter().map(|s| s.to_string()).collect(),
            width,
            height,
            vec![value; bands.len() * width * height],
            NODATA,
        )
        .expect("filled raster is consistent")
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn bands(&self) -> &[String] {
        &self.bands
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn nodata(&self) -> f32 {
        self.nodata
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == name)
    }

    pub fn band(&self, i: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn band_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, v: f32) {
        self.data[(band * self.height + row) * self.width + col] = v;
    }

    /// Same origin, resolution and pixel grid (bands may differ).
    pub fn same_grid(&self, other: &RasterPatch) -> bool {
        self.origin == other.origin
            && self.resolution == other.resolution
            && self.width == other.width
            && self.height == other.height
    }

    /// Same grid and identical band list.
    pub fn same_geometry(&self, other: &RasterPatch) -> bool {
        self.same_grid(other) && self.bands == other.bands
    }

    /// Pixel `(row, col)` containing a map coordinate, if inside.
    pub fn pixel_of(&self, easting: f64, northing: f64) -> Option<(usize, usize)> {
        let c = ((easting - self.origin.0) / self.resolution).floor();
        let r = ((self.origin.1 - northing) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Map coordinate of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.resolution,
            self.origin.1 - (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Keeps only the named bands, in the given order.
    pub fn select_bands(&self, names: &[&str]) -> Result<RasterPatch> {
        let mut data = Vec::with_capacity(names.len() * self.pixels());
        for n in names {
            let i = self
                .band_index(n)
                .ok_or_else(|| Error::Schema(format!("unknown band `{}`", n)))?;
            data.extend_from_slice(self.band(i));
        }
        RasterPatch::new(
            self.origin,
            self.resolution,
            names.iter().map(|s| s.to_string()).collect(),
            self.width,
            self.height,
            data,
            self.nodata,
        )
    }

    /// Encodes as the 24-byte header (`bands: u32, height: u32, width: u32,
    /// resolution: f64, nodata: f32`, little-endian) plus raw LE `f32` data.
    /// Origin and band names travel separately.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&(self.bands.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&self.nodata.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`RasterPatch::encode_payload`]; `entry` names the source
    /// in error messages.
    pub fn decode_payload(bytes: &[u8], origin: (f64, f64), bands: Vec<String>, entry: &str) -> Result<Self> {
        let bad = |reason: String| Error::Decode {
            entry: entry.to_string(),
            reason,
        };
        if bytes.len() < RASTER_HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let nb = u32_at(0);
        let height = u32_at(4);
        let width = u32_at(8);
        let resolution = f64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let nodata = f32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
        if nb != bands.len() {
            return Err(bad(format!("header has {} bands, manifest lists {}", nb, bands.len())));
        }
        let expected = RASTER_HEADER_LEN + 4 * nb * height * width;
        if bytes.len() != expected {
            return Err(bad(format!("expected {} bytes, found {}", expected, bytes.len())));
        }
        let data = bytes[RASTER_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        RasterPatch::new(origin, resolution, bands, width, height, data, nodata).map_err(|e| bad(e.to_string()))
    }

    /// Writes a standalone raster file: `b"CHTR"`, `u32` metadata length,
    /// JSON `{"origin": [e, n], "bands": [...]}`, then the payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "origin": [self.origin.0, self.origin.1], "bands": self.bands });
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(b"CHTR");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.encode_payload());
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path.display().to_string();
        let bad = |reason: &str| Error::Decode {
            entry: name.clone(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != b"CHTR" {
            return Err(bad("not a raster file"));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let meta = bytes.get(8..8 + mlen).ok_or_else(|| bad("truncated metadata"))?;
        #[derive(Deserialize)]
        struct Meta {
            origin: (f64, f64),
            bands: Vec<String>,
        }
        let meta: Meta = serde_json::from_slice(meta)?;
        RasterPatch::decode_payload(&bytes[8 + mlen..], meta.origin, meta.bands, &name)
    }
}

/// Copies the `h × w` window at `(row0, col0)`. The result's origin moves by
/// `(col0 · res, −row0 · res)`.
pub fn extract_window(patch: &RasterPatch, row0: usize, col0: usize, h: usize, w: usize) -> Result<RasterPatch> {
    if h == 0 || w == 0 || row0 + h > patch.height || col0 + w > patch.width {
        return Err(Error::Range(format!(
            "window ({}, {}) {}×{} outside {}×{} patch",
            row0, col0, h, w, patch.height, patch.width
        )));
    }
    let mut data = Vec::with_capacity(patch.bands.len() * h * w);
    for b in 0..patch.bands.len() {
        for r in row0..row0 + h {
            let start = (b * patch.height + r) * patch.width + col0;
            data.extend_from_slice(&patch.data[start..start + w]);
        }
    }
    RasterPatch::new(
        (
            patch.origin.0 + col0 as f64 * patch.resolution,
            patch.origin.1 - row0 as f64 * patch.resolution,
        ),
        patch.resolution,
        patch.bands.clone(),
        w,
        h,
        data,
        patch.nodata,
    )
}

/// In-memory mosaic over the union extent of grid-aligned patches. Where
/// patches overlap, the first one holding data wins; uncovered pixels are
/// nodata.
pub fn mosaic(patches: &[RasterPatch]) -> Result<RasterPatch> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Domain("mosaic of zero patches".into()))?;
    let res = first.resolution;
    let mut west = f64::INFINITY;
    let mut north = f64::NEG_INFINITY;
    let mut east = f64::NEG_INFINITY;
    let mut south = f64::INFINITY;
    for p in patches {
        if p.resolution != res || p.bands != first.bands {
            return Err(Error::Shape("mosaic inputs differ in resolution or bands".into()));
        }
        west = west.min(p.origin.0);
        north = north.max(p.origin.1);
        east = east.max(p.origin.0 + p.width as f64 * res);
        south = south.min(p.origin.1 - p.height as f64 * res);
    }
    let width = ((east - west) / res).round() as usize;
    let height = ((north - south) / res).round() as usize;
    let nb = first.bands.len();
    let mut out = RasterPatch::new(
        (west, north),
        res,
        first.bands.clone(),
        width,
        height,
        vec![first.nodata; nb * width * height],
        first.nodata,
    )?;
    let mut filled = vec![false; width * height];
    for p in patches {
        let dc = (p.origin.0 - west) / res;
        let dr = (north - p.origin.1) / res;
        if (dc - dc.round()).abs() > 1e-6 || (dr - dr.round()).abs() > 1e-6 {
            return Err(Error::Shape("mosaic inputs are not grid-aligned".into()));
        }
        let (dc, dr) = (dc.round() as usize, dr.round() as usize);
        for r in 0..p.height {
            for c in 0..p.width {
                let o = (dr + r) * width + dc + c;
                if filled[o] {
                    continue;
                }
                let has = (0..nb).any(|b| p.get(b, r, c) != p.nodata);
                if has {
                    for b in 0..nb {
                        out.set(b, dr + r, dc + c, p.get(b, r, c));
                    }
                    filled[o] = true;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting(bands: usize, h: usize, w: usize) -> RasterPatch {
        let names = (0..bands).map(|b| format!("b{b}")).collect();
        let data = (0..bands * h * w).map(|i| i as f32).collect();
        RasterPatch::new((1000.0, 5000.0), 10.0, names, w, h, data, NODATA).unwrap()
    }

    #[test]
    fn invariants_checked() {
        assert!(RasterPatch::new((0.0, 0.0), 10.0, vec!["a".into()], 2, 2, vec![0.0; 3], NODATA).is_err());
        assert!(RasterPatch::new((0.0, 0.0), 0.0, vec!["a".into()], 1, 1, vec![0.0], NODATA).is_err());
        let dup = RasterPatch::new((0.0, 0.0), 10.0, vec!["a".into(), "a".into()], 1, 1, vec![0.0; 2], NODATA);
        assert!(matches!(dup, Err(Error::Schema(_))));
    }

    #[test]
    fn full_window_is_identity() {
        let p = counting(3, 5, 7);
        assert_eq!(extract_window(&p, 0, 0, 5, 7).unwrap(), p);
    }

    #[test]
    fn single_pixel_window() {
        let p = counting(3, 5, 7);
        let w = extract_window(&p, 2, 4, 1, 1).unwrap();
        for b in 0..3 {
            assert_eq!(w.get(b, 0, 0), p.get(b, 2, 4));
        }
        assert_eq!(w.origin(), (1040.0, 4980.0));
    }

    #[test]
    fn two_by_two_window_matches_index_arithmetic() {
        let (nb, h, wd) = (2, 6, 5);
        let p = counting(nb, h, wd);
        let w = extract_window(&p, 3, 1, 2, 2).unwrap();
        for b in 0..nb {
            for r in 0..2 {
                for c in 0..2 {
                    let flat = (b * h + 3 + r) * wd + 1 + c;
                    assert_eq!(w.get(b, r, c), flat as f32);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_window() {
        let p = counting(1, 4, 4);
        assert!(matches!(extract_window(&p, 3, 0, 2, 1), Err(Error::Range(_))));
        assert!(matches!(extract_window(&p, 0, 0, 0, 1), Err(Error::Range(_))));
    }

    #[test]
    fn pixel_lookup() {
        let p = counting(1, 4, 4);
        assert_eq!(p.pixel_of(1000.0, 5000.0), Some((0, 0)));
        let (e, n) = p.pixel_center(3, 2);
        assert_eq!(p.pixel_of(e, n), Some((3, 2)));
        assert_eq!(p.pixel_of(999.9, 4990.0), None);
        assert_eq!(p.pixel_of(1040.0, 4990.0), None);
    }

    #[test]
    fn mosaic_of_quadrants_restores_patch() {
        let p = counting(2, 8, 6);
        let parts = vec![
            extract_window(&p, 0, 0, 4, 3).unwrap(),
            extract_window(&p, 0, 3, 4, 3).unwrap(),
            extract_window(&p, 4, 0, 4, 3).unwrap(),
            extract_window(&p, 4, 3, 4, 3).unwrap(),
        ];
        assert_eq!(mosaic(&parts).unwrap(), p);
        let partial = mosaic(&parts[..1]).unwrap();
        assert_eq!(partial.width(), 3);
    }

    #[test]
    fn payload_round_trip() {
        let p = counting(3, 4, 5);
        let bytes = p.encode_payload();
        let q = RasterPatch::decode_payload(&bytes, p.origin(), p.bands().to_vec(), "x").unwrap();
        assert_eq!(p, q);
        let err = RasterPatch::decode_payload(&bytes[..30], p.origin(), p.bands().to_vec(), "x");
        assert!(matches!(err, Err(Error::Decode { .. })));
    }

    proptest! {
        #[test]
        fn window_composition(h in 2usize..12, w in 2usize..12, a in 0usize..100, b in 0usize..100) {
            let p = counting(2, h, w);
            let r0 = a % h; let c0 = b % w;
            let ha = h - r0; let wa = w - c0;
            let r1 = b % ha; let c1 = a % wa;
            let hb = (ha - r1).max(1); let wb = (wa - c1).max(1);
            let outer = extract_window(&p, r0, c0, ha, wa).unwrap();
            let inner = extract_window(&outer, r1, c1, hb, wb).unwrap();
            let direct = extract_window(&p, r0 + r1, c0 + c1, hb, wb).unwrap();
            prop_assert_eq!(inner, direct);
        }
    }
}
