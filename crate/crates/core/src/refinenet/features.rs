use nalgebra::DMatrix;

use super::{Head, RefineNet};
use crate::error::{Error, Result};
use crate::gtfuse::GroundTruthGrid;
use crate::tilecorr::{DepthResult, DisparityField, Method, TileCorrelationSet, TileGrid, TileStatus, NUM_PAIRS};

/// Side of the correlation crop kept per pair.
pub const CROP: usize = 7;
pub const INPUT_DIM: usize = NUM_PAIRS * CROP * CROP + 1;

/// Central crop of every pair surface, each scaled by its own peak
/// magnitude, followed by the pre-shift. Missing pairs are zeros.
pub fn tile_features(set: &TileCorrelationSet) -> Vec<f64> {
    let r = (CROP / 2) as isize;
    let mut v = Vec::with_capacity(INPUT_DIM);
    for pair in &set.pairs {
        match pair {
            Some(pc) => {
                let s = &pc.surface;
                let m = s.max_abs();
                let scale = if m > 0.0 { 1.0 / m } else { 0.0 };
                for dy in -r..=r {
                    for dx in -r..=r {
                        v.push(s.at_offset(dx, dy).unwrap_or(0.0) * scale);
                    }
                }
            }
            None => v.extend(std::iter::repeat(0.0).take(CROP * CROP)),
        }
    }
    v.push(set.pre_shift);
    v
}

/// Stage-1 inputs of one scene plus the field they refine.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub grid: TileGrid,
    /// One row per tile that has features.
    pub matrix: DMatrix<f64>,
    pub row_of: Vec<Option<usize>>,
    /// Row used for every tile: its own, or the nearest tile with features.
    pub source: Vec<usize>,
    /// Field being refined; its pre-shifts are the network's reference.
    pub base: DisparityField,
}

impl SceneFeatures {
    pub fn new(base: DisparityField, features: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let grid = base.grid;
        if features.len() != grid.len() {
            return Err(Error::Size("one feature slot per tile required".into()));
        }
        let dim = match features.iter().flatten().next() {
            Some(f) => f.len(),
            None => return Err(Error::Degenerate("scene has no tile features".into())),
        };
        let mut row_of = vec![None; grid.len()];
        let mut data = Vec::new();
        let mut n = 0;
        for (i, f) in features.iter().enumerate() {
            if let Some(f) = f {
                if f.len() != dim {
                    return Err(Error::Size("feature vectors differ in length".into()));
                }
                row_of[i] = Some(n);
                data.extend_from_slice(f);
                n += 1;
            }
        }
        let matrix = DMatrix::from_row_slice(n, dim, &data);
        let featured: Vec<(usize, usize)> = (0..grid.len())
            .filter(|&i| row_of[i].is_some())
            .map(|i| grid.coords(i))
            .collect();
        let source = (0..grid.len())
            .map(|i| match row_of[i] {
                Some(r) => r,
                None => {
                    let (c, r) = grid.coords(i);
                    let nearest = featured
                        .iter()
                        .min_by_key(|&&(fc, fr)| {
                            let dc = fc as isize - c as isize;
                            let dr = fr as isize - r as isize;
                            dc * dc + dr * dr
                        })
                        .expect("at least one featured tile");
                    row_of[grid.index(nearest.0, nearest.1)].expect("featured")
                }
            })
            .collect();
        Ok(Self {
            grid,
            matrix,
            row_of,
            source,
            base,
        })
    }

    /// Features of a computed disparity map; the last correlation pass of
    /// each tile becomes its input.
    pub fn from_depth(result: &DepthResult) -> Result<Self> {
        let features = result
            .correlations
            .iter()
            .map(|c| c.as_ref().map(tile_features))
            .collect();
        Self::new(result.field.clone(), features)
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn pre_shift(&self, tile: usize) -> f64 {
        self.base.entries[tile].pre_shift
    }

    /// Feature rows of the `kernel x kernel` cluster around `tile`, with
    /// edge replication, and whether any of them was replicated.
    pub fn cluster(&self, tile: usize, kernel: usize) -> (Vec<usize>, bool) {
        let (c, r) = self.grid.coords(tile);
        let rad = (kernel / 2) as isize;
        let mut replicated = false;
        let mut rows = Vec::with_capacity(kernel * kernel);
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let (x, y) = (c as isize + dx, r as isize + dy);
                let xc = x.clamp(0, self.grid.cols as isize - 1);
                let yc = y.clamp(0, self.grid.rows as isize - 1);
                let t = self.grid.index(xc as usize, yc as usize);
                replicated |= xc != x || yc != y || self.row_of[t].is_none();
                rows.push(self.source[t]);
            }
        }
        (rows, replicated)
    }

    /// Rows of the cluster around `tile` and the pre-shift input of each copy:
    /// its pre-shift relative to the center row, as if the whole cluster had
    /// been correlated at the center's disparity.
    pub fn cluster_inputs(&self, tile: usize, kernel: usize) -> (Vec<usize>, Vec<f64>, bool) {
        let (rows, rep) = self.cluster(tile, kernel);
        let last = self.matrix.ncols() - 1;
        let center = self.matrix[(rows[rows.len() / 2], last)];
        let rel = rows.iter().map(|&r| self.matrix[(r, last)] - center).collect();
        (rows, rel, rep)
    }

    /// Gathered Stage-1 inputs of the clusters around `tiles`, cluster after cluster.
    pub fn gather(&self, tiles: &[usize], kernel: usize) -> (Vec<usize>, Vec<f64>) {
        let mut rows = Vec::with_capacity(tiles.len() * kernel * kernel);
        let mut rel = Vec::with_capacity(rows.capacity());
        for &t in tiles {
            let (r, v, _) = self.cluster_inputs(t, kernel);
            rows.extend(r);
            rel.extend(v);
        }
        (rows, rel)
    }

    /// Tiles whose estimate the network refines.
    pub fn refinable(&self, tile: usize) -> bool {
        self.row_of[tile].is_some()
            && matches!(
                self.base.entries[tile].status,
                TileStatus::Valid | TileStatus::Unconverged
            )
            && self.pre_shift(tile).is_finite()
    }
}

/// One supervised tile of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub tile: usize,
    pub gt: f64,
    pub confidence: f64,
    pub fg_bg: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub id: String,
    pub features: SceneFeatures,
    pub gt: GroundTruthGrid,
}

impl LabeledScene {
    pub fn samples(&self) -> Vec<TrainingSample> {
        (0..self.features.grid.len())
            .filter(|&t| self.features.refinable(t))
            .filter_map(|t| {
                let g = self.gt.tiles[t]?;
                Some(TrainingSample {
                    tile: t,
                    gt: g.disparity,
                    confidence: g.confidence,
                    fg_bg: g.fg.zip(g.bg),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub field: DisparityField,
    /// Tiles whose Stage-2 context used replicated neighbors.
    pub replicated: Vec<bool>,
}

/// Refine a scene: every refinable tile gets `pre_shift + residual`.
pub fn predict(net: &RefineNet, scene: &SceneFeatures) -> Result<Prediction> {
    if scene.input_dim() != net.stage1.input_dim() {
        return Err(Error::Size(format!(
            "scene features have {} inputs, network expects {}",
            scene.input_dim(),
            net.stage1.input_dim()
        )));
    }
    let (k, ch) = (net.stage2.kernel, net.stage2.channels);
    let tiles: Vec<usize> = (0..scene.grid.len()).filter(|&t| scene.refinable(t)).collect();
    let (rows, rel) = scene.gather(&tiles, k);
    let f = net.stage1.trace_gathered(&scene.matrix, &rows, &rel).output.transpose();
    let heads = f.as_slice();
    let mut field = scene.base.clone();
    field.method = Method::Network;
    let mut replicated = vec![false; scene.grid.len()];
    for (i, &t) in tiles.iter().enumerate() {
        let cluster: Vec<&[f64]> = (0..k * k)
            .map(|j| {
                let r = i * k * k + j;
                &heads[r * ch..(r + 1) * ch]
            })
            .collect();
        let out = net.stage2.forward_cluster(&cluster, Head::Main);
        field.entries[t].disparity = scene.pre_shift(t) + out;
        replicated[t] = scene.cluster(t, k).1;
    }
    Ok(Prediction { field, replicated })
}
