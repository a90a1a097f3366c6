//! Grid-node detection in four steps:
//! 1. candidate patches, visited in bit-reversed order, give the two grid
//!    vectors from the peaks of their amplitude spectrum;
//! 2. a synthetic patch built from those vectors is phase-correlated with
//!    the image to find a first node;
//! 3. a wave spreads from found nodes to their lattice neighbors, predicting
//!    each from a local fit and re-verifying it by correlation;
//! 4. every node is refined against a synthetic patch rendered through a
//!    second-degree local model of the grid around it.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TargetSpec;
use crate::fourier::{forward_dft, inverse_dft_complex, Patch, Spectrum, WindowKind};
use crate::image::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    /// Patch size of the spectral analysis (step 1).
    pub fft_size: usize,
    /// Spacing of the candidate positions.
    pub scan_step: usize,
    /// Patch size of the node correlation (steps 2-4).
    pub refine_size: usize,
    /// Normalized correlation peak needed to accept a first node.
    pub accept: f64,
    /// Peak needed when a wave node is re-checked.
    pub recheck: f64,
    /// Range of grid cells an analysis patch may contain.
    pub min_cells: f64,
    pub max_cells: f64,
    /// Node tracking during the wave stops once the correction is below
    /// this (pixels).
    pub track_tol: f64,
    /// Same for the final refinement.
    pub refine_tol: f64,
    /// Final refinement passes, each re-fitting the local models to the
    /// positions of the previous one.
    pub refine_passes: usize,
    pub max_refine_iter: usize,
    /// Relative floor of the cross-power normalization.
    pub eps: f64,
    /// Gaussian low-pass of the cross-power (pixels).
    pub lowpass_sigma: f64,
    /// Lattice radius of the neighborhood used for local fits.
    pub model_radius: i32,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            fft_size: 64,
            scan_step: 32,
            refine_size: 32,
            accept: 0.35,
            recheck: 0.25,
            min_cells: 10.0,
            max_cells: 50.0,
            track_tol: 0.01,
            refine_tol: 1e-6,
            refine_passes: 2,
            max_refine_iter: 40,
            eps: 0.05,
            lowpass_sigma: 1.5,
            model_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub x: f64,
    pub y: f64,
    pub u: i32,
    pub v: i32,
    /// Target point in meters once indices are tied to the physical target.
    pub target: Option<[f64; 3]>,
    pub valid: bool,
    /// Normalized correlation peak of the final refinement.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridNodeSet {
    pub width: usize,
    pub height: usize,
    pub nodes: Vec<GridNode>,
    /// Another lattice of comparable strength was found and dropped.
    pub ambiguous: bool,
}

impl GridNodeSet {
    pub fn valid(&self) -> impl Iterator<Item = &GridNode> {
        self.nodes.iter().filter(|n| n.valid)
    }

    pub fn get(&self, u: i32, v: i32) -> Option<&GridNode> {
        self.nodes.iter().find(|n| n.u == u && n.v == v)
    }
}

/// Pixel offset of lattice offset `d`: `J d + q_uu du^2 + q_uv du dv + q_vv dv^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LocalModel {
    pub j: Matrix2<f64>,
    pub q: [Vector2<f64>; 3],
}

impl LocalModel {
    fn linear(j: Matrix2<f64>) -> Self {
        Self {
            j,
            q: [Vector2::zeros(); 3],
        }
    }

    fn eval(&self, d: Vector2<f64>) -> Vector2<f64> {
        self.j * d + self.q[0] * (d.x * d.x) + self.q[1] * (d.x * d.y) + self.q[2] * (d.y * d.y)
    }

    fn jacobian(&self, d: Vector2<f64>) -> Matrix2<f64> {
        let mut m = self.j;
        m.set_column(0, &(m.column(0) + self.q[0] * (2.0 * d.x) + self.q[1] * d.y));
        m.set_column(1, &(m.column(1) + self.q[1] * d.x + self.q[2] * (2.0 * d.y)));
        m
    }

    /// Lattice offset of pixel offset `p`.
    fn invert(&self, p: Vector2<f64>, j_inv: &Matrix2<f64>) -> Vector2<f64> {
        let mut d = j_inv * p;
        if self.q.iter().all(|q| *q == Vector2::zeros()) {
            return d;
        }
        for _ in 0..2 {
            let r = self.eval(d) - p;
            match self.jacobian(d).try_inverse() {
                Some(inv) => d -= inv * r,
                None => break,
            }
        }
        d
    }

    fn cell_size(&self) -> f64 {
        self.j.column(0).norm().min(self.j.column(1).norm())
    }
}

/// Least-squares local model around `center` from `(offset, pixel)` pairs.
/// Returns the predicted pixel position of `center` and the model.
pub(crate) fn fit_local(samples: &[(Vector2<f64>, Vector2<f64>)]) -> Option<(Vector2<f64>, LocalModel)> {
    let distinct = |f: fn(&Vector2<f64>) -> f64| {
        let mut v: Vec<i64> = samples.iter().map(|s| f(&s.0).round() as i64).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let quadratic = samples.len() >= 9 && distinct(|d| d.x) >= 3 && distinct(|d| d.y) >= 3;
    let cols = if quadratic { 6 } else { 3 };
    if samples.len() < 3 {
        return None;
    }
    let a = DMatrix::from_fn(samples.len(), cols, |r, c| {
        let d = samples[r].0;
        match c {
            0 => 1.0,
            1 => d.x,
            2 => d.y,
            3 => d.x * d.x,
            4 => d.x * d.y,
            _ => d.y * d.y,
        }
    });
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() < 1e-6 * sv.max() {
        return None;
    }
    let solve = |axis: usize| -> DVector<f64> {
        let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1[axis]));
        svd.solve(&b, 1e-12).expect("svd with vectors")
    };
    let (cx, cy) = (solve(0), solve(1));
    let j = Matrix2::new(cx[1], cx[2], cy[1], cy[2]);
    if j.determinant().abs() < 1e-9 {
        return None;
    }
    let q = if quadratic {
        [
            Vector2::new(cx[3], cy[3]),
            Vector2::new(cx[4], cy[4]),
            Vector2::new(cx[5], cy[5]),
        ]
    } else {
        [Vector2::zeros(); 3]
    };
    Some((Vector2::new(cx[0], cy[0]), LocalModel { j, q }))
}

/// Synthetic patch of node `(u, v)` at pixel `node`, `size` pixels square
/// with its top-left pixel at `origin`.
fn template(spec: &TargetSpec, origin: (i64, i64), size: usize, node: Vector2<f64>, index: (i32, i32), model: &LocalModel) -> Patch {
    const SS: usize = 2;
    let j_inv = model.j.try_inverse().unwrap_or_else(Matrix2::identity);
    let inv = 1.0 / SS as f64;
    let (px_u, px_v) = (1.0 / j_inv.row(0).norm(), 1.0 / j_inv.row(1).norm());
    Patch::from_fn(size, |x, y| {
        let mut acc = 0.0;
        for sj in 0..SS {
            for si in 0..SS {
                let px = (origin.0 + x as i64) as f64 - 0.5 + (si as f64 + 0.5) * inv;
                let py = (origin.1 + y as i64) as f64 - 0.5 + (sj as f64 + 0.5) * inv;
                let d = model.invert(Vector2::new(px, py) - node, &j_inv);
                acc += spec.smooth_value_at(index.0 as f64 + d.x, index.1 as f64 + d.y, px_u, px_v, inv);
            }
        }
        acc * inv * inv
    })
}

fn image_patch(img: &ImageGrid, origin: (i64, i64), size: usize) -> Option<Patch> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if origin.0 < 0 || origin.1 < 0 || origin.0 + size as i64 > w || origin.1 + size as i64 > h {
        return None;
    }
    Some(Patch::from_fn(size, |x, y| {
        img.get(origin.0 as usize + x, origin.1 as usize + y)
    }))
}

/// Normalized phase correlation: 1.0 for a perfect match, negative for
/// inverted contrast. Returns the peak and the displacement of `b`
/// relative to `a` within `reach` pixels.
fn correlate(a: &Patch, b: &Patch, params: &DetectParams, reach: f64) -> Option<(f64, Vector2<f64>)> {
    let n = a.size();
    let sa = forward_dft(&a.windowed_zero_mean(WindowKind::Hann), WindowKind::None).ok()?;
    let sb = forward_dft(&b.windowed_zero_mean(WindowKind::Hann), WindowKind::None).ok()?;
    let mut cross: Vec<Complex64> = sa.data().iter().zip(sb.data()).map(|(x, y)| x.conj() * y).collect();
    let top = cross.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    if !(top > 0.0) {
        return None;
    }
    let floor = params.eps * top;
    let s = 2.0 * PI * PI * params.lowpass_sigma * params.lowpass_sigma / (n * n) as f64;
    let freq = |k: usize| if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
    let mut total = 0.0;
    for (i, c) in cross.iter_mut().enumerate() {
        let (fx, fy) = (freq(i % n), freq(i / n));
        let g = (-s * (fx * fx + fy * fy)).exp();
        let w = g / (c.norm() + floor);
        total += c.norm() * w;
        *c *= w;
    }
    let spatial = inverse_dft_complex(&Spectrum::from_vec(n, cross).ok()?);
    let scale = (n * n) as f64 / total;
    let at = |dx: i64, dy: i64| spatial[(dy.rem_euclid(n as i64) as usize) * n + dx.rem_euclid(n as i64) as usize].re * scale;
    let r = reach.floor() as i64;
    let mut best = (0, 0, 0.0f64);
    for dy in -r..=r {
        for dx in -r..=r {
            let v = at(dx, dy);
            if v.abs() > best.2.abs() {
                best = (dx, dy, v);
            }
        }
    }
    let (bx, by, peak) = best;
    let sign = peak.signum();
    let vertex = |m: f64, c: f64, p: f64| {
        let den = m - 2.0 * c + p;
        if den < 0.0 {
            ((m - p) / (2.0 * den)).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let ox = vertex(sign * at(bx - 1, by), sign * peak, sign * at(bx + 1, by));
    let oy = vertex(sign * at(bx, by - 1), sign * peak, sign * at(bx, by + 1));
    Some((peak, Vector2::new(bx as f64 + ox, by as f64 + oy)))
}

#[derive(Debug, Clone, Copy)]
struct Refined {
    pos: Vector2<f64>,
    score: f64,
    converged: bool,
}

/// Move `start` onto node `index` by repeated correlation against a
/// synthetic patch rendered at the current estimate.
fn refine(img: &ImageGrid, spec: &TargetSpec, index: (i32, i32), start: Vector2<f64>, model: &LocalModel, params: &DetectParams, tol: f64) -> Option<Refined> {
    let size = params.refine_size;
    let half = (size / 2) as i64;
    let reach = (0.3 * model.cell_size()).clamp(1.0, size as f64 / 4.0);
    let mut pos = start;
    let mut score = 0.0;
    let place = |p: Vector2<f64>| (p.x.round() as i64 - half, p.y.round() as i64 - half);
    let mut origin = place(pos);
    let mut patch = image_patch(img, origin, size)?;
    let mut settled = false;
    for it in 0..params.max_refine_iter {
        // the window only follows large moves so the iteration map stays continuous
        let centered = Vector2::new((origin.0 + half) as f64, (origin.1 + half) as f64);
        if (pos - centered).amax() > 1.5 {
            origin = place(pos);
            patch = image_patch(img, origin, size)?;
        }
        let t = template(spec, origin, size, pos, index, model);
        let (peak, shift) = correlate(&t, &patch, params, reach)?;
        score = peak;
        if peak <= 0.0 {
            return Some(Refined { pos, score, converged: false });
        }
        // the parabola vertex undershoots small displacements by about a
        // third; scaling the correction makes the iteration converge fast
        let shift = if it == 0 { shift } else { shift * 1.5 };
        pos += shift;
        if (pos - start).norm() > 0.5 * model.cell_size() {
            return Some(Refined { pos, score, converged: false });
        }
        if shift.norm() < tol {
            let centered = Vector2::new((origin.0 + half) as f64, (origin.1 + half) as f64);
            // a node on a pixel border could bounce between two windows
            if settled || (pos - centered).amax() <= 0.5 {
                return Some(Refined { pos, score, converged: true });
            }
            // settle with the window centered on the result
            settled = true;
            origin = place(pos);
            patch = image_patch(img, origin, size)?;
        }
    }
    Some(Refined { pos, score, converged: false })
}

fn bit_reverse(v: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        v.reverse_bits() >> (usize::BITS - bits)
    }
}

/// Candidate patch centers in 2D bit-reversed order: consecutive
/// candidates are spread over the whole frame.
fn candidates(width: usize, height: usize, params: &DetectParams) -> Vec<Vector2<f64>> {
    let half = params.fft_size / 2;
    if width < params.fft_size || height < params.fft_size {
        return Vec::new();
    }
    let nx = (width - params.fft_size) / params.scan_step + 1;
    let ny = (height - params.fft_size) / params.scan_step + 1;
    let bx = usize::BITS - (nx - 1).leading_zeros();
    let by = usize::BITS - (ny - 1).leading_zeros();
    let mut out = Vec::with_capacity(nx * ny);
    for k in 0..1usize << (bx + by) {
        let r = bit_reverse(k, bx + by);
        let (ix, iy) = (r & ((1 << bx) - 1), r >> bx);
        if ix < nx && iy < ny {
            out.push(Vector2::new(
                (ix * params.scan_step + half) as f64 - 0.5,
                (iy * params.scan_step + half) as f64 - 0.5,
            ));
        }
    }
    out
}

/// Grid vectors (pixels per cell along each lattice axis) from the
/// amplitude spectrum of the patch centered at `center`.
fn grid_vectors(img: &ImageGrid, center: Vector2<f64>, params: &DetectParams) -> Option<Matrix2<f64>> {
    let n = params.fft_size;
    let origin = ((center.x + 0.5) as i64 - (n / 2) as i64, (center.y + 0.5) as i64 - (n / 2) as i64);
    let patch = image_patch(img, origin, n)?.windowed_zero_mean(WindowKind::Hann);
    let spec = forward_dft(&patch, WindowKind::None).ok()?;
    let amp = |kx: i64, ky: i64| {
        let n = n as i64;
        spec.get(kx.rem_euclid(n) as usize, ky.rem_euclid(n) as usize).norm()
    };
    let h = (n / 2) as i64;
    let mut peaks: Vec<(i64, i64, f64)> = Vec::new();
    for ky in 0..h {
        for kx in -h + 1..h {
            if (ky == 0 && kx <= 0) || kx * kx + ky * ky < 4 {
                continue;
            }
            peaks.push((kx, ky, amp(kx, ky)));
        }
    }
    let k1 = *peaks.iter().max_by(|a, b| a.2.total_cmp(&b.2))?;
    let k2 = *peaks
        .iter()
        .filter(|p| {
            let cross = (p.0 * k1.1 - p.1 * k1.0) as f64;
            let norms = ((p.0 * p.0 + p.1 * p.1) as f64).sqrt() * ((k1.0 * k1.0 + k1.1 * k1.1) as f64).sqrt();
            cross.abs() > 0.5 * norms
        })
        .max_by(|a, b| a.2.total_cmp(&b.2))?;
    if k2.2 < 0.25 * k1.2 {
        return None;
    }
    let sub = |k: (i64, i64, f64)| {
        let v = |a: f64, b: f64, c: f64| {
            let (a, b, c) = (a.max(1e-300).ln(), b.max(1e-300).ln(), c.max(1e-300).ln());
            let den = a - 2.0 * b + c;
            if den < 0.0 {
                ((a - c) / (2.0 * den)).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let dx = v(amp(k.0 - 1, k.1), k.2, amp(k.0 + 1, k.1));
        let dy = v(amp(k.0, k.1 - 1), k.2, amp(k.0, k.1 + 1));
        Vector2::new(k.0 as f64 + dx, k.1 as f64 + dy) / n as f64
    };
    let (f1, f2) = (sub(k1), sub(k2));
    // the checkerboard fundamentals sit at half the sum and difference of
    // the reciprocal cell vectors
    let a = f1 + f2;
    let b = f1 - f2;
    let recip = Matrix2::new(a.x, a.y, b.x, b.y);
    let cells = recip.determinant().abs() * (n * n) as f64;
    if cells < params.min_cells || cells > params.max_cells {
        return None;
    }
    recip.try_inverse()
}

type Found = HashMap<(i32, i32), (Vector2<f64>, f64)>;

/// `(lattice offset, pixel)` of found nodes within radius `r` of `at`.
fn neighborhood(found: &Found, at: (i32, i32), r: i32) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let mut out = Vec::new();
    for dv in -r..=r {
        for du in -r..=r {
            if let Some((p, _)) = found.get(&(at.0 + du, at.1 + dv)) {
                out.push((Vector2::new(du as f64, dv as f64), *p));
            }
        }
    }
    out
}

struct Growth<'a> {
    img: &'a ImageGrid,
    spec: &'a TargetSpec,
    params: &'a DetectParams,
    found: Found,
    order: Vec<(i32, i32)>,
}

impl Growth<'_> {
    fn neighborhood(&self, at: (i32, i32)) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        neighborhood(&self.found, at, self.params.model_radius)
    }

    fn margin_ok(&self, p: Vector2<f64>) -> bool {
        let m = (self.params.refine_size / 2 + 1) as f64;
        p.x >= m && p.y >= m && p.x <= self.img.width() as f64 - m && p.y <= self.img.height() as f64 - m
    }

    /// Breadth-first growth from the seed node.
    fn grow(&mut self, seed: (i32, i32), fallback: LocalModel) {
        let mut queue = VecDeque::from([seed]);
        let mut rejected = std::collections::HashSet::new();
        while let Some(at) = queue.pop_front() {
            let (from, _) = self.found[&at];
            for step in [(1, 0), (0, 1), (-1, 0), (0, -1)] {
                let next = (at.0 + step.0, at.1 + step.1);
                if self.found.contains_key(&next) || rejected.contains(&next) {
                    continue;
                }
                let d = Vector2::new(step.0 as f64, step.1 as f64);
                let (pred, model) = match fit_local(&self.neighborhood(next)) {
                    Some(m) => m,
                    None => {
                        let near = fit_local(&self.neighborhood(at)).map(|m| m.1).unwrap_or(fallback);
                        (from + near.eval(d), LocalModel::linear(near.j))
                    }
                };
                if !self.margin_ok(pred) {
                    continue;
                }
                let ok = refine(self.img, self.spec, next, pred, &model, self.params, self.params.track_tol).filter(|r| {
                    let spacing = (r.pos - from).norm() / (model.j * d).norm();
                    r.score >= self.params.recheck && (0.5..=2.0).contains(&spacing) && self.margin_ok(r.pos)
                });
                match ok {
                    Some(r) => {
                        self.found.insert(next, (r.pos, r.score));
                        self.order.push(next);
                        queue.push_back(next);
                    }
                    None => {
                        rejected.insert(next);
                    }
                }
            }
        }
    }
}

/// First node near `center`, trying both handednesses of the grid vectors.
fn seed(img: &ImageGrid, spec: &TargetSpec, center: Vector2<f64>, j: Matrix2<f64>, params: &DetectParams) -> Option<((i32, i32), Refined, LocalModel)> {
    let swapped = Matrix2::from_columns(&[j.column(1).into_owned(), j.column(0).into_owned()]);
    let size = params.refine_size;
    let half = (size / 2) as i64;
    let mut best: Option<((i32, i32), Refined, LocalModel)> = None;
    for jm in [j, swapped] {
        let model = LocalModel::linear(jm);
        let origin = (center.x.round() as i64 - half, center.y.round() as i64 - half);
        let patch = image_patch(img, origin, size)?;
        let t = template(spec, origin, size, center, (0, 0), &model);
        let Some((peak, shift)) = correlate(&t, &patch, params, size as f64 / 2.0 - 2.0) else {
            continue;
        };
        // inverted contrast means the nearest node has odd parity
        let index = if peak < 0.0 { (1, 0) } else { (0, 0) };
        let Some(r) = refine(img, spec, index, center + shift, &model, params, params.track_tol) else {
            continue;
        };
        if r.converged && r.score >= params.accept && best.as_ref().map_or(true, |b| r.score > b.1.score) {
            best = Some((index, r, model));
        }
    }
    best
}

/// Detect the nodes of `spec` in `img`. Indices are relative to the first
/// node found (up to a half-turn); tie them to the target with
/// `align_indices`.
pub fn detect_grid(img: &ImageGrid, spec: &TargetSpec, params: &DetectParams) -> GridNodeSet {
    let mut lattices: Vec<(Found, Vec<(i32, i32)>)> = Vec::new();
    for c in candidates(img.width(), img.height(), params) {
        let covered = lattices.iter().any(|(found, _)| {
            found.values().any(|(p, _)| (p - c).norm() < params.fft_size as f64 / 3.0)
        });
        if covered {
            continue;
        }
        let Some(j) = grid_vectors(img, c, params) else {
            continue;
        };
        let Some((index, first, model)) = seed(img, spec, c, j, params) else {
            continue;
        };
        let mut g = Growth {
            img,
            spec,
            params,
            found: HashMap::from([(index, (first.pos, first.score))]),
            order: vec![index],
        };
        g.grow(index, model);
        lattices.push((g.found, g.order));
    }
    let strength = |l: &Found| l.values().map(|v| v.1).sum::<f64>();
    let Some(best) = (0..lattices.len()).max_by(|&a, &b| strength(&lattices[a].0).total_cmp(&strength(&lattices[b].0))) else {
        return GridNodeSet {
            width: img.width(),
            height: img.height(),
            ..GridNodeSet::default()
        };
    };
    let top = strength(&lattices[best].0);
    let ambiguous = lattices
        .iter()
        .enumerate()
        .any(|(i, l)| i != best && strength(&l.0) > 0.1 * top);
    let (mut found, order) = lattices.swap_remove(best);
    let mut results: Vec<Option<Refined>> = vec![None; order.len()];
    for _ in 0..params.refine_passes.max(1) {
        results = order
            .par_iter()
            .map(|&at| {
                let model = fit_local(&neighborhood(&found, at, params.model_radius))?.1;
                refine(img, spec, at, found[&at].0, &model, params, params.refine_tol)
            })
            .collect();
        for (at, r) in order.iter().zip(&results) {
            if let Some(r) = r.filter(|r| r.converged) {
                found.insert(*at, (r.pos, r.score));
            }
        }
    }
    let nodes = order
        .iter()
        .zip(&results)
        .map(|(&at, r)| {
            let (pos, score) = found[&at];
            GridNode {
                x: pos.x,
                y: pos.y,
                u: at.0,
                v: at.1,
                target: None,
                valid: r.is_some_and(|r| r.converged && r.score >= params.recheck),
                score: r.map_or(score, |r| r.score),
            }
        })
        .collect();
    GridNodeSet {
        width: img.width(),
        height: img.height(),
        nodes,
        ambiguous,
    }
}
