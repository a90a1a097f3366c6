//! Quadocular tile matcher.
//!
//! Four cameras sit at the corners of a square. A scene point with disparity
//! `d` (measured on a horizontal pair) appears in camera `c` at
//! `p - d * offset_c`, where `offset_c` is the camera position relative to
//! the rig center in baseline units. Each tile is cut from all four images
//! with that displacement pre-applied (integer part by re-extraction,
//! fraction by spectral phase rotation), the six pairs are phase-correlated,
//! and the correlations are sampled along each pair's disparity axis into one
//! 1-D score whose parabolic vertex is the residual disparity. Iterating
//! until the residual vanishes removes the sub-pixel interpolation bias.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{
    forward_dft, phase_correlate_with, shift_patch, CorrelationParams, CorrelationSurface, Patch,
    Spectrum, WindowKind,
};
use crate::image::ImageGrid;
use crate::rectify::RectificationBudget;

pub const NUM_CAMERAS: usize = 4;
pub const NUM_PAIRS: usize = 6;

pub type QuadImages = [ImageGrid; NUM_CAMERAS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Horizontal,
    Vertical,
    Diagonal,
}

/// One camera pair. A positive residual disparity `r` moves the peak of the
/// pair's correlation surface to `r * axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub id: usize,
    pub first: usize,
    pub second: usize,
    pub kind: PairKind,
    pub axis: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigGeometry {
    /// Horizontal baseline in meters.
    pub baseline: f64,
    /// Camera positions relative to the rig center, in baseline units:
    /// top-left, top-right, bottom-left, bottom-right.
    pub offsets: [(f64, f64); NUM_CAMERAS],
    pub focal_length: f64,
    pub sensor: (usize, usize),
    pub modality: String,
}

impl RigGeometry {
    /// Square rig with cameras at the corners.
    pub fn square(baseline: f64, focal_length: f64, sensor: (usize, usize), modality: &str) -> Self {
        Self {
            baseline,
            offsets: [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)],
            focal_length,
            sensor,
            modality: modality.to_string(),
        }
    }

    /// The 160x120 thermal rig of the experimental setup (150 mm baseline, 56 deg HFOV).
    pub fn lwir_160x120() -> Self {
        let f = 80.0 / (28.0f64).to_radians().tan();
        Self::square(0.15, f, (160, 120), "lwir")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.offsets;
        let side = |a: usize, b: usize| (o[a].0 - o[b].0).hypot(o[a].1 - o[b].1);
        let s = side(0, 1);
        let ok = s > 0.0
            && (side(2, 3) - s).abs() < 1e-9
            && (side(0, 2) - s).abs() < 1e-9
            && (side(1, 3) - s).abs() < 1e-9
            && (side(0, 3) - s * 2f64.sqrt()).abs() < 1e-9
            && (side(1, 2) - s * 2f64.sqrt()).abs() < 1e-9;
        if !ok {
            return Err(Error::Contract("camera offsets do not form a square".into()));
        }
        if !(self.baseline > 0.0 && self.focal_length > 0.0) {
            return Err(Error::Contract("baseline and focal length must be positive".into()));
        }
        Ok(())
    }

    /// Two horizontal, two vertical and two diagonal pairs.
    pub fn pairs(&self) -> [Pair; NUM_PAIRS] {
        let spec = [
            (1, 0, PairKind::Horizontal),
            (3, 2, PairKind::Horizontal),
            (2, 0, PairKind::Vertical),
            (3, 1, PairKind::Vertical),
            (3, 0, PairKind::Diagonal),
            (2, 1, PairKind::Diagonal),
        ];
        let side = (self.offsets[1].0 - self.offsets[0].0).abs();
        std::array::from_fn(|id| {
            let (a, b, kind) = spec[id];
            let axis = (
                (self.offsets[a].0 - self.offsets[b].0) / side,
                (self.offsets[a].1 - self.offsets[b].1) / side,
            );
            Pair {
                id,
                first: a,
                second: b,
                kind,
                axis,
            }
        })
    }

    /// Pixel displacement of camera `cam` for disparity `d`.
    #[inline]
    pub fn camera_shift(&self, cam: usize, d: f64) -> (f64, f64) {
        let side = (self.offsets[1].0 - self.offsets[0].0).abs();
        (
            -d * self.offsets[cam].0 / side,
            -d * self.offsets[cam].1 / side,
        )
    }

    /// Distance in meters for a disparity in pixels.
    pub fn range_from_disparity(&self, d: f64) -> f64 {
        self.baseline * self.focal_length / d
    }
}

/// Overlapping tiles: `tile_size` windows every `stride` pixels. Tile
/// `(col, row)` is centered at `(stride*col + stride/2, stride*row + stride/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
}

impl TileGrid {
    pub fn new(tile_size: usize, stride: usize, cols: usize, rows: usize) -> Result<Self> {
        if stride * 2 != tile_size {
            return Err(Error::Contract("stride must be half the tile size".into()));
        }
        Ok(Self {
            tile_size,
            stride,
            cols,
            rows,
        })
    }

    /// Grid covering an image with 50% overlapping tiles.
    pub fn for_image(width: usize, height: usize, tile_size: usize) -> Self {
        let stride = tile_size / 2;
        Self {
            tile_size,
            stride,
            cols: width / stride,
            rows: height / stride,
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.cols, index / self.cols)
    }

    /// Tile center in pixel coordinates.
    #[inline]
    pub fn center(&self, col: usize, row: usize) -> (isize, isize) {
        let h = (self.stride / 2) as isize;
        (
            (self.stride * col) as isize + h,
            (self.stride * row) as isize + h,
        )
    }

    /// Area represented by a tile: the `stride x stride` cell around its center.
    pub fn cell(&self, col: usize, row: usize) -> ((f64, f64), (f64, f64)) {
        let (cx, cy) = self.center(col, row);
        let h = self.stride as f64 / 2.0;
        (
            (cx as f64 - h, cy as f64 - h),
            (cx as f64 + h, cy as f64 + h),
        )
    }
}

/// Integer-cropped tile plus the fractional part of the requested shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedTile {
    pub patch: Patch,
    pub offset: (isize, isize),
    pub fraction: (f64, f64),
}

/// Round-to-nearest split of a shift: `shift = integer + fraction`, `|fraction| <= 0.5`.
#[inline]
pub fn split_shift(shift: f64) -> (isize, f64) {
    let i = shift.round();
    (i as isize, shift - i)
}

/// Cut a `size x size` tile whose content is centered at `center + shift`.
/// The integer part of the shift moves the crop; the fraction is returned for
/// the phase rotation stage.
pub fn extract_tile(
    image: &ImageGrid,
    center: (isize, isize),
    size: usize,
    shift: (f64, f64),
) -> Result<ExtractedTile> {
    let (ix, fx) = split_shift(shift.0);
    let (iy, fy) = split_shift(shift.1);
    let half = (size / 2) as isize;
    let x0 = center.0 + ix - half;
    let y0 = center.1 + iy - half;
    if x0 < 0
        || y0 < 0
        || x0 + size as isize > image.width() as isize
        || y0 + size as isize > image.height() as isize
    {
        return Err(Error::OutOfBounds);
    }
    let patch = Patch::from_fn(size, |x, y| {
        image.get((x0 + x as isize) as usize, (y0 + y as isize) as usize)
    })
    .with_origin((x0, y0));
    Ok(ExtractedTile {
        patch,
        offset: (ix, iy),
        fraction: (fx, fy),
    })
}

/// Extraction along a direction: `pre_shift * direction`.
pub fn extract_tile_along(
    image: &ImageGrid,
    center: (isize, isize),
    size: usize,
    pre_shift: f64,
    direction: (f64, f64),
) -> Result<ExtractedTile> {
    extract_tile(
        image,
        center,
        size,
        (pre_shift * direction.0, pre_shift * direction.1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileCorrConfig {
    pub tile_size: usize,
    pub eps: f64,
    /// Gaussian low-pass applied to the normalized cross-power (pixels).
    pub lowpass_sigma: f64,
    /// Extract a double-size context for the fractional shift and crop
    /// afterwards, keeping wrap-around artifacts away from the tile.
    pub shift_context: bool,
    pub tolerance: f64,
    pub max_iter: usize,
    pub min_pairs: usize,
    /// Slack beyond `[0, d_max]` before a tile is declared out of budget.
    pub budget_slack: f64,
}

impl Default for TileCorrConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            eps: 0.05,
            lowpass_sigma: 1.0,
            shift_context: true,
            tolerance: 0.02,
            max_iter: 8,
            min_pairs: 4,
            budget_slack: 0.5,
        }
    }
}

impl TileCorrConfig {
    fn params(&self) -> CorrelationParams {
        CorrelationParams {
            eps: self.eps,
            lowpass_sigma: self.lowpass_sigma,
        }
    }
}

/// Correlation of one pair for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrelation {
    pub pair: Pair,
    pub surface: CorrelationSurface,
}

/// The six pair correlations of one tile at a given pre-shift. Pairs whose
/// tiles fell outside an image are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileCorrelationSet {
    pub tile: (usize, usize),
    pub pre_shift: f64,
    pub pairs: [Option<PairCorrelation>; NUM_PAIRS],
}

impl TileCorrelationSet {
    pub fn valid_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_some()).count()
    }

    pub fn pair_mask(&self) -> [bool; NUM_PAIRS] {
        std::array::from_fn(|i| self.pairs[i].is_some())
    }

    /// Copy with one pair removed.
    pub fn without_pair(&self, id: usize) -> Self {
        let mut out = self.clone();
        out.pairs[id] = None;
        out
    }
}

/// Windowed spectrum of a camera tile aligned for disparity `d`.
fn camera_spectrum(
    image: &ImageGrid,
    center: (isize, isize),
    shift: (f64, f64),
    cfg: &TileCorrConfig,
) -> Result<Spectrum> {
    let n = cfg.tile_size;
    let aligned = if cfg.shift_context {
        let big = extract_tile(image, center, 2 * n, shift)?;
        let shifted = shift_patch(&big.patch, -big.fraction.0, -big.fraction.1)?;
        let q = n / 2;
        Patch::from_fn(n, |x, y| shifted.get(x + q, y + q))
    } else {
        let t = extract_tile(image, center, n, shift)?;
        shift_patch(&t.patch, -t.fraction.0, -t.fraction.1)?
    };
    forward_dft(&aligned.windowed_zero_mean(WindowKind::Hann), WindowKind::None)
}

/// Correlate the six pairs of a tile with every camera pre-shifted for
/// `expected_disparity`.
pub fn correlate_pairs(
    quad: &QuadImages,
    grid: &TileGrid,
    tile: (usize, usize),
    expected_disparity: f64,
    rig: &RigGeometry,
    cfg: &TileCorrConfig,
) -> Result<TileCorrelationSet> {
    if !expected_disparity.is_finite() {
        return Err(Error::Contract("non-finite pre-shift".into()));
    }
    let center = grid.center(tile.0, tile.1);
    let spectra: Vec<Option<Spectrum>> = (0..NUM_CAMERAS)
        .map(|cam| {
            let shift = rig.camera_shift(cam, expected_disparity);
            match camera_spectrum(&quad[cam], center, shift, cfg) {
                Ok(s) => Ok(Some(s)),
                Err(Error::OutOfBounds) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let params = cfg.params();
    let pairs = rig.pairs();
    let mut out: [Option<PairCorrelation>; NUM_PAIRS] = Default::default();
    for pair in pairs {
        if let (Some(a), Some(b)) = (&spectra[pair.first], &spectra[pair.second]) {
            // second(q) = first(q - residual * axis)
            let surface = phase_correlate_with(a, b, &params)?.with_pair(pair.id);
            out[pair.id] = Some(PairCorrelation { pair, surface });
        }
    }
    Ok(TileCorrelationSet {
        tile,
        pre_shift: expected_disparity,
        pairs: out,
    })
}

/// Outcome of fusing the pair correlations of one tile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPeak {
    pub residual: f64,
    pub confidence: f64,
    /// Fused score at the integer argmax.
    pub peak: f64,
    /// Fused score at zero residual.
    pub center_score: f64,
    /// Argmax hit the end of the scan range.
    pub at_boundary: bool,
    /// Parabola vertex was further than one sample from the argmax.
    pub clamped: bool,
}

/// Sub-pixel vertex of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`.
pub fn parabola_vertex(a: f64, b: f64, c: f64) -> Option<f64> {
    let den = a - 2.0 * b + c;
    if den >= 0.0 || !den.is_finite() {
        return None;
    }
    Some((a - c) / (2.0 * den))
}

/// Combined 1-D score: mean over valid pairs of each surface sampled at
/// `delta * axis` (bilinear for non-integer positions).
pub fn fused_scores(set: &TileCorrelationSet) -> Vec<(isize, f64)> {
    let valid: Vec<&PairCorrelation> = set.pairs.iter().flatten().collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let n = valid[0].surface.size() as isize;
    let reach = n / 2 - 1;
    (-reach..=reach)
        .filter_map(|delta| {
            let mut sum = 0.0;
            for pc in &valid {
                let (ax, ay) = pc.pair.axis;
                sum += pc.surface.sample(delta as f64 * ax, delta as f64 * ay)?;
            }
            Some((delta, sum / valid.len() as f64))
        })
        .collect()
}

pub fn fuse_and_argmax(set: &TileCorrelationSet, min_pairs: usize) -> Result<FusedPeak> {
    if set.valid_pairs() < min_pairs {
        return Err(Error::Degenerate(format!(
            "{} valid pairs, {min_pairs} required",
            set.valid_pairs()
        )));
    }
    let scores = fused_scores(set);
    if scores.len() < 3 || scores.iter().all(|s| s.1.abs() < 1e-12) {
        return Err(Error::Degenerate("empty correlation".into()));
    }
    let (best, &(delta, peak)) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");
    let center_score = scores
        .iter()
        .find(|s| s.0 == 0)
        .map(|s| s.1)
        .unwrap_or(0.0);
    let at_boundary = best == 0 || best == scores.len() - 1;
    let (mut vertex, mut clamped) = (0.0, false);
    if !at_boundary {
        match parabola_vertex(scores[best - 1].1, peak, scores[best + 1].1) {
            Some(v) if v.abs() <= 1.0 => vertex = v,
            Some(v) => {
                vertex = v.clamp(-1.0, 1.0);
                clamped = true;
            }
            None => clamped = true,
        }
    }
    // prominence over the strongest sample away from the peak
    let competitor = scores
        .iter()
        .filter(|s| (s.0 - delta).abs() > 2)
        .map(|s| s.1)
        .fold(0.0, f64::max);
    let confidence = (peak - competitor).clamp(0.0, 1.0);
    Ok(FusedPeak {
        residual: delta as f64 + vertex,
        confidence,
        peak,
        center_score,
        at_boundary,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TileStatus {
    Valid,
    Unconverged,
    OutOfBudget,
    /// Tile (or too many of its pairs) outside the images.
    OutOfBounds,
    /// No signal (textureless or not processed).
    Absent,
}

impl TileStatus {
    pub fn code(self) -> u8 {
        match self {
            TileStatus::Valid => 0,
            TileStatus::Unconverged => 1,
            TileStatus::OutOfBudget => 2,
            TileStatus::OutOfBounds => 3,
            TileStatus::Absent => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Poly,
    Network,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityEntry {
    pub disparity: f64,
    pub confidence: f64,
    pub iterations: usize,
    pub status: TileStatus,
    /// Pre-shift of the last correlation pass.
    pub pre_shift: f64,
}

impl DisparityEntry {
    pub fn absent(status: TileStatus) -> Self {
        Self {
            disparity: f64::NAN,
            confidence: 0.0,
            iterations: 0,
            status,
            pre_shift: f64::NAN,
        }
    }
}

/// Tile-grid disparity map with per-tile confidence and status.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityField {
    pub grid: TileGrid,
    pub entries: Vec<DisparityEntry>,
    pub method: Method,
}

impl DisparityField {
    pub fn new(grid: TileGrid, method: Method) -> Self {
        Self {
            grid,
            entries: vec![DisparityEntry::absent(TileStatus::Absent); grid.len()],
            method,
        }
    }

    pub fn from_values(grid: TileGrid, values: &[f64], method: Method) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Size("value count does not match grid".into()));
        }
        let entries = values
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    DisparityEntry {
                        disparity: v,
                        confidence: 1.0,
                        iterations: 0,
                        status: TileStatus::Valid,
                        pre_shift: v,
                    }
                } else {
                    DisparityEntry::absent(TileStatus::Absent)
                }
            })
            .collect();
        Ok(Self {
            grid,
            entries,
            method,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> &DisparityEntry {
        &self.entries[self.grid.index(col, row)]
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.get(col, row).status == TileStatus::Valid
    }

    pub fn disparity_plane(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                if e.status == TileStatus::Valid {
                    e.disparity
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    pub fn confidence_plane(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.confidence).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == TileStatus::Valid)
            .count()
    }
}

/// Repeated correlate-and-refine starting from `initial`.
#[allow(clippy::too_many_arguments)]
pub fn iterate_disparity(
    quad: &QuadImages,
    grid: &TileGrid,
    tile: (usize, usize),
    initial: f64,
    rig: &RigGeometry,
    budget: &RectificationBudget,
    cfg: &TileCorrConfig,
) -> (DisparityEntry, Option<TileCorrelationSet>) {
    let d_max = budget.d_max_value();
    let lo = -cfg.budget_slack;
    let hi = d_max + cfg.budget_slack;
    let mut d = initial;
    let mut last_set = None;
    let mut residuals: Vec<f64> = Vec::with_capacity(cfg.max_iter);
    let mut confidence = 0.0;
    for iter in 1..=cfg.max_iter.max(1) {
        let pre = d.max(0.0);
        let set = match correlate_pairs(quad, grid, tile, pre, rig, cfg) {
            Ok(s) => s,
            Err(_) => return (DisparityEntry::absent(TileStatus::OutOfBounds), None),
        };
        if set.valid_pairs() < cfg.min_pairs {
            return (DisparityEntry::absent(TileStatus::OutOfBounds), None);
        }
        let fused = match fuse_and_argmax(&set, cfg.min_pairs) {
            Ok(f) => f,
            Err(_) => return (DisparityEntry::absent(TileStatus::Absent), Some(set)),
        };
        confidence = fused.confidence;
        let step = fused.residual;
        d = pre + step;
        residuals.push(step);
        last_set = Some(set);
        if !(lo..=hi).contains(&d) {
            let mut e = DisparityEntry::absent(TileStatus::OutOfBudget);
            e.disparity = d;
            e.iterations = iter;
            e.pre_shift = pre;
            e.confidence = confidence;
            return (e, last_set);
        }
        if step.abs() < cfg.tolerance && !fused.at_boundary {
            return (
                DisparityEntry {
                    disparity: d.max(0.0),
                    confidence,
                    iterations: iter,
                    status: TileStatus::Valid,
                    pre_shift: pre,
                },
                last_set,
            );
        }
    }
    let pre = last_set.as_ref().map(|s| s.pre_shift).unwrap_or(d);
    (
        DisparityEntry {
            disparity: d,
            confidence,
            iterations: residuals.len(),
            status: TileStatus::Unconverged,
            pre_shift: pre,
        },
        last_set,
    )
}

/// How the per-tile iteration is started.
#[derive(Debug, Clone)]
pub enum Seeding<'a> {
    /// Integer sweep over `[0, d_max]`, best fused score at zero residual.
    Sweep,
    /// Start from a previous field (e.g. the preceding video frame).
    Prior(&'a DisparityField),
    /// Sweep a sparse lattice of tiles, seed the rest from their neighbors.
    Neighbors,
}

/// Best integer pre-shift over `[0, d_max]` plus the residual measured there.
pub fn sweep_seed(
    quad: &QuadImages,
    grid: &TileGrid,
    tile: (usize, usize),
    rig: &RigGeometry,
    budget: &RectificationBudget,
    cfg: &TileCorrConfig,
) -> Option<f64> {
    let d_max = budget.d_max_value();
    let steps = if d_max.is_finite() {
        d_max.floor() as usize
    } else {
        (cfg.tile_size / 2 - 1) * 4
    };
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=steps {
        let d = k as f64;
        let Ok(set) = correlate_pairs(quad, grid, tile, d, rig, cfg) else {
            continue;
        };
        let Ok(f) = fuse_and_argmax(&set, cfg.min_pairs) else {
            continue;
        };
        if best.map_or(true, |b| f.center_score > b.0) {
            let start = d + f.residual.clamp(-1.0, 1.0);
            best = Some((f.center_score, start));
        }
    }
    best.map(|b| b.1.clamp(0.0, d_max))
}

/// Per-tile results of a full map computation.
#[derive(Debug, Clone)]
pub struct DepthResult {
    pub field: DisparityField,
    /// Last correlation set of each tile (features for the network stage).
    pub correlations: Vec<Option<TileCorrelationSet>>,
}

fn run_tiles<F>(grid: &TileGrid, tiles: &[usize], f: F) -> Vec<(DisparityEntry, Option<TileCorrelationSet>)>
where
    F: Fn((usize, usize)) -> (DisparityEntry, Option<TileCorrelationSet>) + Sync,
{
    tiles
        .par_iter()
        .map(|&i| f(grid.coords(i)))
        .collect()
}

/// Disparity map over the whole tile grid. Tiles are independent, so the
/// result does not depend on the number of worker threads.
pub fn disparity_map(
    quad: &QuadImages,
    rig: &RigGeometry,
    budget: &RectificationBudget,
    seeding: Seeding<'_>,
    cfg: &TileCorrConfig,
) -> Result<DepthResult> {
    let (w, h) = (quad[0].width(), quad[0].height());
    if quad.iter().any(|im| im.width() != w || im.height() != h) {
        return Err(Error::Size("quad images differ in size".into()));
    }
    rig.validate()?;
    let grid = TileGrid::for_image(w, h, cfg.tile_size);
    let all: Vec<usize> = (0..grid.len()).collect();
    let solve = |tile: (usize, usize), seed: Option<f64>| match seed {
        Some(s) => iterate_disparity(quad, &grid, tile, s, rig, budget, cfg),
        None => (DisparityEntry::absent(TileStatus::Absent), None),
    };
    let results = match seeding {
        Seeding::Sweep => run_tiles(&grid, &all, |t| {
            solve(t, sweep_seed(quad, &grid, t, rig, budget, cfg))
        }),
        Seeding::Prior(prior) => {
            if prior.grid != grid {
                return Err(Error::Size("prior field grid mismatch".into()));
            }
            run_tiles(&grid, &all, |t| {
                let e = prior.get(t.0, t.1);
                let seed = if e.disparity.is_finite() {
                    Some(e.disparity.clamp(0.0, budget.d_max_value()))
                } else {
                    sweep_seed(quad, &grid, t, rig, budget, cfg)
                };
                solve(t, seed)
            })
        }
        Seeding::Neighbors => {
            let is_anchor = |c: usize, r: usize| c % 3 == 1 && r % 3 == 1;
            let anchors: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&i| {
                    let (c, r) = grid.coords(i);
                    is_anchor(c, r)
                })
                .collect();
            let anchor_results = run_tiles(&grid, &anchors, |t| {
                solve(t, sweep_seed(quad, &grid, t, rig, budget, cfg))
            });
            let mut anchor_field = vec![f64::NAN; grid.len()];
            for (&i, (e, _)) in anchors.iter().zip(&anchor_results) {
                if e.status == TileStatus::Valid {
                    anchor_field[i] = e.disparity;
                }
            }
            let mut results = run_tiles(&grid, &all, |t| {
                let (c, r) = (t.0 as isize, t.1 as isize);
                let mut near: Vec<f64> = Vec::new();
                for dr in -2..=2isize {
                    for dc in -2..=2isize {
                        let (nc, nr) = (c + dc, r + dr);
                        if nc < 0 || nr < 0 || nc >= grid.cols as isize || nr >= grid.rows as isize {
                            continue;
                        }
                        let v = anchor_field[grid.index(nc as usize, nr as usize)];
                        if v.is_finite() {
                            near.push(v);
                        }
                    }
                }
                if is_anchor(t.0, t.1) {
                    return (DisparityEntry::absent(TileStatus::Absent), None);
                }
                let seed = if near.is_empty() {
                    sweep_seed(quad, &grid, t, rig, budget, cfg)
                } else {
                    near.sort_by(f64::total_cmp);
                    Some(near[near.len() / 2])
                };
                solve(t, seed)
            });
            for (&i, r) in anchors.iter().zip(anchor_results) {
                results[i] = r;
            }
            results
        }
    };
    let mut field = DisparityField::new(grid, Method::Poly);
    let mut correlations = Vec::with_capacity(grid.len());
    for (i, (entry, set)) in results.into_iter().enumerate() {
        field.entries[i] = entry;
        correlations.push(set);
    }
    Ok(DepthResult {
        field,
        correlations,
    })
}
