//! Ground truth for the low-resolution modality from a high-resolution
//! disparity field, and the trimmed RMSE used to score disparity maps.
//!
//! Several high-resolution samples land in every low-resolution tile. Tiles
//! on object edges mix foreground and background; averaging them would
//! invent an object at an intermediate range. The samples are sorted and,
//! when they split into two clusters, only the foreground (larger disparity)
//! cluster is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rectify::ModalityScale;
use crate::tilecorr::{DisparityField, TileGrid, TileStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BimodalParams {
    /// Smallest gap between sorted samples (low-res pixels) that splits clusters.
    pub gap_threshold: f64,
    /// Each cluster must hold at least this fraction of the valid samples.
    pub min_fraction: f64,
}

impl Default for BimodalParams {
    fn default() -> Self {
        Self {
            gap_threshold: 0.5,
            min_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTile {
    pub disparity: f64,
    /// Fraction of the tile's source samples that were kept.
    pub confidence: f64,
    pub bimodal: bool,
    /// Foreground and background cluster means when bimodal.
    pub fg: Option<f64>,
    pub bg: Option<f64>,
}

/// Ground truth over a tile grid; `None` marks absent tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthGrid {
    pub grid: TileGrid,
    pub tiles: Vec<Option<GroundTruthTile>>,
}

impl GroundTruthGrid {
    pub fn get(&self, col: usize, row: usize) -> Option<&GroundTruthTile> {
        self.tiles[self.grid.index(col, row)].as_ref()
    }

    pub fn disparity_plane(&self) -> Vec<f64> {
        self.tiles
            .iter()
            .map(|t| t.map_or(f64::NAN, |t| t.disparity))
            .collect()
    }

    pub fn confidence_plane(&self) -> Vec<f64> {
        self.tiles
            .iter()
            .map(|t| t.map_or(0.0, |t| t.confidence))
            .collect()
    }

    /// Unimodal ground truth from plain values (NaN = absent).
    pub fn from_values(grid: TileGrid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Size("value count does not match grid".into()));
        }
        Ok(Self {
            grid,
            tiles: values
                .iter()
                .map(|&v| {
                    v.is_finite().then_some(GroundTruthTile {
                        disparity: v,
                        confidence: 1.0,
                        bimodal: false,
                        fg: None,
                        bg: None,
                    })
                })
                .collect(),
        })
    }
}

/// Apply the sort / largest-gap / mean rule to the samples of one tile.
/// `total` counts all source samples of the tile, including invalid ones
/// already removed from `values`.
pub fn fuse_tile_samples(
    values: &mut [f64],
    total: usize,
    params: &BimodalParams,
) -> Option<GroundTruthTile> {
    if values.is_empty() || total == 0 {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut split = None;
    let mut widest = 0.0;
    for i in 1..n {
        let gap = values[i] - values[i - 1];
        if gap > widest {
            widest = gap;
            split = Some(i);
        }
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if let Some(i) = split {
        let min_count = params.min_fraction * n as f64;
        if widest > params.gap_threshold && i as f64 >= min_count && (n - i) as f64 >= min_count {
            let fg = mean(&values[i..]);
            return Some(GroundTruthTile {
                disparity: fg,
                confidence: (n - i) as f64 / total as f64,
                bimodal: true,
                fg: Some(fg),
                bg: Some(mean(&values[..i])),
            });
        }
    }
    Some(GroundTruthTile {
        disparity: mean(values),
        confidence: n as f64 / total as f64,
        bimodal: false,
        fg: None,
        bg: None,
    })
}

/// Downscale a high-resolution field onto a low-resolution tile grid.
///
/// Each high-res sample sits at its tile center (high-res pixels); dividing
/// by the pixel ratio places it in the low-res image, and its disparity is
/// divided by the same ratio. Samples are gathered into the `stride x stride`
/// cell of every destination tile.
pub fn downscale_gt(
    highres: &DisparityField,
    scale: &ModalityScale,
    lowres_grid: &TileGrid,
    params: &BimodalParams,
) -> Result<GroundTruthGrid> {
    let ratio = scale.pixel_ratio;
    if !(ratio > 1.0) {
        return Err(Error::Contract("pixel ratio must exceed 1".into()));
    }
    let hi = &highres.grid;
    // samples per destination cell along one axis
    let per_axis = lowres_grid.stride as f64 * ratio / hi.stride as f64;
    if per_axis * per_axis < 4.0 {
        return Err(Error::Contract(
            "destination tiles cover fewer than 4 source samples".into(),
        ));
    }
    let mut buckets: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); lowres_grid.len()];
    let stride = lowres_grid.stride as f64;
    let offset = (lowres_grid.stride / 2) as f64 - stride / 2.0;
    for row in 0..hi.rows {
        for col in 0..hi.cols {
            let (cx, cy) = hi.center(col, row);
            let (x, y) = (cx as f64 / ratio, cy as f64 / ratio);
            let (fc, fr) = (((x - offset) / stride).floor(), ((y - offset) / stride).floor());
            if fc < 0.0 || fr < 0.0 {
                continue;
            }
            let (dc, dr) = (fc as usize, fr as usize);
            if dc >= lowres_grid.cols || dr >= lowres_grid.rows {
                continue;
            }
            let bucket = &mut buckets[lowres_grid.index(dc, dr)];
            bucket.1 += 1;
            let e = highres.get(col, row);
            if e.status == TileStatus::Valid && e.disparity.is_finite() {
                bucket.0.push(e.disparity / ratio);
            }
        }
    }
    let tiles = buckets
        .into_par_iter()
        .map(|(mut values, total)| fuse_tile_samples(&mut values, total, params))
        .collect();
    Ok(GroundTruthGrid {
        grid: *lowres_grid,
        tiles,
    })
}

/// Per-tile signed errors `estimate - gt` on tiles valid in both (NaN elsewhere).
pub fn tile_errors(estimate: &DisparityField, gt: &GroundTruthGrid) -> Result<Vec<f64>> {
    if estimate.grid.cols != gt.grid.cols || estimate.grid.rows != gt.grid.rows {
        return Err(Error::Size("estimate and ground truth grids differ".into()));
    }
    Ok(estimate
        .entries
        .iter()
        .zip(&gt.tiles)
        .map(|(e, g)| match g {
            Some(g) if e.status == TileStatus::Valid && e.disparity.is_finite() => {
                e.disparity - g.disparity
            }
            _ => f64::NAN,
        })
        .collect())
}

/// RMSE of per-tile errors after discarding the worst `trim` fraction.
pub fn trimmed_rmse_of(errors: &[f64], trim: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Contract(format!("trim {trim} outside [0, 0.5)")));
    }
    let mut abs: Vec<f64> = errors
        .iter()
        .filter(|e| e.is_finite())
        .map(|e| e.abs())
        .collect();
    if abs.is_empty() {
        return Err(Error::Degenerate("no tiles valid in both fields".into()));
    }
    abs.sort_by(f64::total_cmp);
    let drop = (trim * abs.len() as f64 + 1e-9).floor() as usize;
    let kept = &abs[..abs.len() - drop];
    Ok((kept.iter().map(|e| e * e).sum::<f64>() / kept.len() as f64).sqrt())
}

pub fn trimmed_rmse(estimate: &DisparityField, gt: &GroundTruthGrid, trim: f64) -> Result<f64> {
    trimmed_rmse_of(&tile_errors(estimate, gt)?, trim)
}
