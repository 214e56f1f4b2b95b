//! Per-sample archive container.
//!
//! A sample is a standard deflate-compressed zip file with these entries:
//!
//! | entry                  | content                                         |
//! |------------------------|-------------------------------------------------|
//! | `manifest.json`        | geometry, band names, labels, metadata (below)  |
//! | `s2/month_MM.bin`      | one raster payload per month, `MM` = `01`..`12` |
//! | `s1/composite.bin`     | the 4-band radar composite payload              |
//!
//! Raster payloads use the 24-byte header of
//! [`RasterPatch::encode_payload`](super::RasterPatch::encode_payload)
//! followed by little-endian `f32` values. The manifest schema:
//!
//! ```json
//! {
//!   "format": "cht-sample", "version": 1,
//!   "patch_id": "p0", "year": 2020,
//!   "origin": [easting, northing], "resolution": 10.0,
//!   "width": 128, "height": 128,
//!   "months": [1, 2, ..., 12],
//!   "s2_bands": ["B1", ...], "s1_bands": ["VV_asc", ...],
//!   "labels": [{"row": 3, "col": 7, "height": 12.5, "track_id": 0}],
//!   "metadata": {"seed": 1, "cloud_fractions": [0.1, ...]}
//! }
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::raster::RasterPatch;
use crate::error::{Error, Result};

pub const MANIFEST_ENTRY: &str = "manifest.json";
pub const S1_ENTRY: &str = "s1/composite.bin";
pub const FORMAT_NAME: &str = "cht-sample";
pub const FORMAT_VERSION: u32 = 1;

pub fn s2_entry(month: u8) -> String {
    format!("s2/month_{month:02}.bin")
}

/// One sparse height label in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub row: u32,
    pub col: u32,
    pub height: f32,
    pub track_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub seed: u64,
    /// Cloud fraction of the image chosen for each month.
    pub cloud_fractions: Vec<f32>,
}

/// One training sample: monthly optical stack, radar composite, sparse labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleArchive {
    pub patch_id: String,
    pub year: i32,
    /// Calendar month (1..=12) of each `s2_stack` entry.
    pub months: Vec<u8>,
    pub s2_stack: Vec<RasterPatch>,
    pub s1_composite: RasterPatch,
    pub labels: Vec<Label>,
    pub metadata: SampleMetadata,
}

impl SampleArchive {
    /// Full archive invariants: twelve months in calendar order plus
    /// [`SampleArchive::validate_geometry`].
    pub fn validate(&self) -> Result<()> {
        let expected: Vec<u8> = (1..=12).collect();
        if self.months != expected || self.s2_stack.len() != 12 {
            let missing: Vec<u8> = expected.iter().copied().filter(|m| !self.months.contains(m)).collect();
            return Err(Error::Schema(format!(
                "sample `{}` must hold months 1..12 in order; has {:?} (missing {:?})",
                self.patch_id, self.months, missing
            )));
        }
        self.validate_geometry()
    }

    /// Shared grid, consistent band lists, labels in bounds with heights in
    /// `[0, 100]`.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.s2_stack.len() != self.months.len() || self.s2_stack.is_empty() {
            return Err(Error::Schema(format!(
                "{} monthly rasters for {} listed months",
                self.s2_stack.len(),
                self.months.len()
            )));
        }
        if self.metadata.cloud_fractions.len() != self.months.len() {
            return Err(Error::Schema("one cloud fraction per month required".into()));
        }
        let s1 = &self.s1_composite;
        if s1.bands().len() != 4 {
            return Err(Error::Schema(format!("radar composite needs 4 bands, has {}", s1.bands().len())));
        }
        let first = &self.s2_stack[0];
        for (m, r) in self.months.iter().zip(&self.s2_stack) {
            if !r.same_grid(s1) || r.bands() != first.bands() {
                return Err(Error::Shape(format!("month {} does not share the sample geometry", m)));
            }
        }
        for l in &self.labels {
            if l.row as usize >= s1.height() || l.col as usize >= s1.width() {
                return Err(Error::Range(format!("label at ({}, {}) outside patch", l.row, l.col)));
            }
            if !(0.0..=100.0).contains(&l.height) {
                return Err(Error::Range(format!("label height {} outside [0, 100]", l.height)));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.s1_composite.height()
    }

    pub fn width(&self) -> usize {
        self.s1_composite.width()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    patch_id: String,
    year: i32,
    origin: (f64, f64),
    resolution: f64,
    width: usize,
    height: usize,
    months: Vec<u8>,
    s2_bands: Vec<String>,
    s1_bands: Vec<String>,
    labels: Vec<Label>,
    metadata: SampleMetadata,
}

fn zip_err(entry: &str, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        entry: entry.to_string(),
        reason: e.to_string(),
    }
}

/// Serialises a sample into archive bytes.
pub fn archive_to_bytes(sample: &SampleArchive) -> Result<Vec<u8>> {
    sample.validate()?;
    let s1 = &sample.s1_composite;
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        patch_id: sample.patch_id.clone(),
        year: sample.year,
        origin: s1.origin(),
        resolution: s1.resolution(),
        width: s1.width(),
        height: s1.height(),
        months: sample.months.clone(),
        s2_bands: sample.s2_stack[0].bands().to_vec(),
        s1_bands: s1.bands().to_vec(),
        labels: sample.labels.clone(),
        metadata: sample.metadata.clone(),
    };
    // fixed timestamp keeps archives byte-identical across runs
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default());
    let mut zw = ZipWriter::new(Cursor::new(Vec::new()));
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        zw.start_file(name, opts).map_err(|e| zip_err(name, e))?;
        zw.write_all(bytes)?;
        Ok(())
    };
    put(MANIFEST_ENTRY, &serde_json::to_vec_pretty(&manifest)?)?;
    for (m, r) in sample.months.iter().zip(&sample.s2_stack) {
        put(&s2_entry(*m), &r.encode_payload())?;
    }
    put(S1_ENTRY, &s1.encode_payload())?;
    let cursor = zw.finish().map_err(|e| zip_err("<container>", e))?;
    Ok(cursor.into_inner())
}

fn read_entry<R: Read + std::io::Seek>(za: &mut ZipArchive<R>, name: &str) -> Result<Vec<u8>> {
    let mut f = za.by_name(name).map_err(|e| match e {
        zip::result::ZipError::FileNotFound => Error::Schema(format!("archive entry `{}` is missing", name)),
        other => zip_err(name, other),
    })?;
    let mut buf = Vec::with_capacity(f.size() as usize);
    f.read_to_end(&mut buf).map_err(|e| zip_err(name, e))?;
    Ok(buf)
}

/// Parses archive bytes.
pub fn archive_from_bytes(bytes: &[u8]) -> Result<SampleArchive> {
    let mut za = ZipArchive::new(Cursor::new(bytes)).map_err(|e| zip_err("<container>", e))?;
    let raw = read_entry(&mut za, MANIFEST_ENTRY)?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| zip_err(MANIFEST_ENTRY, e))?;
    if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
        return Err(Error::Schema(format!("unsupported archive format {} v{}", m.format, m.version)));
    }
    let mut s2_stack = Vec::with_capacity(m.months.len());
    for &month in &m.months {
        let name = s2_entry(month);
        let bytes = read_entry(&mut za, &name)?;
        s2_stack.push(RasterPatch::decode_payload(&bytes, m.origin, m.s2_bands.clone(), &name)?);
    }
    let bytes = read_entry(&mut za, S1_ENTRY)?;
    let s1_composite = RasterPatch::decode_payload(&bytes, m.origin, m.s1_bands.clone(), S1_ENTRY)?;
    let sample = SampleArchive {
        patch_id: m.patch_id,
        year: m.year,
        months: m.months,
        s2_stack,
        s1_composite,
        labels: m.labels,
        metadata: m.metadata,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn archive_write(sample: &SampleArchive, path: &Path) -> Result<()> {
    let bytes = archive_to_bytes(sample)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn archive_read(path: &Path) -> Result<SampleArchive> {
    let bytes = std::fs::read(path)?;
    archive_from_bytes(&bytes)
}

/// Uncompressed size of all raster payloads plus the manifest.
pub fn raw_size(sample: &SampleArchive) -> usize {
    let px = sample.s1_composite.pixels();
    let rasters: usize = sample
        .s2_stack
        .iter()
        .chain(std::iter::once(&sample.s1_composite))
        .map(|r| super::raster::RASTER_HEADER_LEN + 4 * r.bands().len() * px)
        .sum();
    rasters + 64 * sample.labels.len()
}


#[cfg(test)]
pub(crate) use tests::random_sample;
