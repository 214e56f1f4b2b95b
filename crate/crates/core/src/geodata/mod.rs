//! Tile grid, raster containers, windowed access and the per-sample archive.

pub mod archive;
pub mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{archive_read, archive_write, Label, SampleArchive, SampleMetadata};
pub use raster::{extract_window, mosaic, RasterPatch};

/// Ground sampling distance of every raster in metres.
pub const RESOLUTION_M: f64 = 10.0;
/// Edge length of one grid tile in metres.
pub const TILE_SIZE_M: f64 = 100_000.0;
/// Edge length of one grid tile in pixels.
pub const TILE_SIZE_PX: usize = 10_000;
/// Sentinel written into raster cells without data.
pub const NODATA: f32 = -9999.0;

/// A 100 km × 100 km tile inside a zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub zone: u8,
    pub easting_idx: i64,
    pub northing_idx: i64,
}

impl TileId {
    /// Lower-left (south-west) corner in metres.
    pub fn corner(&self) -> (f64, f64) {
        (
            self.easting_idx as f64 * TILE_SIZE_M,
            self.northing_idx as f64 * TILE_SIZE_M,
        )
    }
}

/// Tile containing `(easting, northing)`. Tiles are half-open, so a point on
/// a shared edge falls in the tile whose lower edge it is.
pub fn tile_of_point(easting: f64, northing: f64, zone: u32) -> Result<TileId> {
    if !(1..=120).contains(&zone) {
        return Err(Error::Domain(format!("zone {} outside [1, 120]", zone)));
    }
    if !easting.is_finite() || !northing.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite coordinate ({}, {})",
            easting, northing
        )));
    }
    Ok(TileId {
        zone: zone as u8,
        easting_idx: (easting / TILE_SIZE_M).floor() as i64,
        northing_idx: (northing / TILE_SIZE_M).floor() as i64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_and_boundary() {
        let t = tile_of_point(0.0, 0.0, 32).unwrap();
        assert_eq!((t.zone, t.easting_idx, t.northing_idx), (32, 0, 0));
        let t = tile_of_point(100_000.0, 0.0, 32).unwrap();
        assert_eq!((t.easting_idx, t.northing_idx), (1, 0));
    }

    #[test]
    fn floor_division() {
        let t = tile_of_point(250_500.0, 99_999.0, 7).unwrap();
        assert_eq!((t.zone, t.easting_idx, t.northing_idx), (7, 2, 0));
        let t = tile_of_point(-0.5, -100_000.0, 7).unwrap();
        assert_eq!((t.easting_idx, t.northing_idx), (-1, -1));
    }

    #[test]
    fn bad_zone_and_coordinates() {
        assert!(matches!(tile_of_point(0.0, 0.0, 0), Err(Error::Domain(_))));
        assert!(matches!(tile_of_point(0.0, 0.0, 121), Err(Error::Domain(_))));
        assert!(tile_of_point(f64::NAN, 0.0, 3).is_err());
    }

    #[test]
    fn corners_map_back_to_their_tile() {
        for zone in [1u32, 32, 120] {
            for e in -3..4 {
                for n in -2..5 {
                    let t = TileId {
                        zone: zone as u8,
                        easting_idx: e,
                        northing_idx: n,
                    };
                    let (ce, cn) = t.corner();
                    assert_eq!(tile_of_point(ce, cn, zone).unwrap(), t);
                }
            }
        }
        assert_eq!(TILE_SIZE_PX as f64 * RESOLUTION_M, TILE_SIZE_M);
    }
}
