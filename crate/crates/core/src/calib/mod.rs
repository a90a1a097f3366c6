//! Camera calibration against a large checkerboard-like target.
//!
//! The target is a checkerboard whose straight cell edges are replaced by
//! S-shaped pairs of circular arcs. Nodes (cell corners) stay on the lattice;
//! the arcs spread the pattern's spectrum and break its mirror symmetry
//! about the lattice axes. Half-turns and the swap of the two axes still map
//! the pattern onto itself.

mod detect;
mod fit;
mod io;

pub use detect::{detect_grid, DetectParams, GridNode, GridNodeSet};
pub use fit::{
    align_indices, fit_camera, mre, per_view_mre, refine_target_nodes, CameraSolution, FitParams, FitReport,
    NodeCorrection,
};
pub use io::{
    read_grid_csv, read_solution, write_grid_csv, write_grid_pfm, write_mre_table, write_solution,
};

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rectify::DistortionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Cell `(0, 0)` is bright.
    #[default]
    Normal,
    Inverted,
}

/// Step between two panels of the target: every point right of the seam
/// column is displaced by `step` (meters, in the target plane).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seam {
    /// First node column of the right panel.
    pub column: i32,
    pub step: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSpec {
    /// Cell pitch in meters.
    pub pitch: f64,
    /// Panel size in cells.
    pub cols: usize,
    pub rows: usize,
    /// S-arc edges; plain checkerboard when false.
    pub arcs: bool,
    pub polarity: Polarity,
    /// Intensities of dark cells, bright cells and the area off the panel.
    pub dark: f64,
    pub bright: f64,
    pub surround: f64,
    pub seam: Option<Seam>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            pitch: 0.18,
            cols: 40,
            rows: 17,
            arcs: true,
            polarity: Polarity::Normal,
            dark: 0.0,
            bright: 1.0,
            surround: 0.5,
            seam: None,
        }
    }
}

/// Edge deflection in cells along a unit edge: two arcs of unit radius
/// meeting at the midpoint, bulging to opposite sides.
pub fn arc_offset(t: f64) -> f64 {
    let base = (1.0f64 - 1.0 / 16.0).sqrt();
    if t <= 0.5 {
        (1.0 - (t - 0.25) * (t - 0.25)).sqrt() - base
    } else {
        -arc_offset(t - 0.5)
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pitch > 0.0) || self.cols < 2 || self.rows < 2 {
            return Err(Error::Config("target needs a positive pitch and at least 2x2 cells".into()));
        }
        Ok(())
    }

    fn deflect(&self, t: f64) -> f64 {
        if self.arcs {
            arc_offset(t)
        } else {
            0.0
        }
    }

    /// Binary pattern in lattice coordinates: true for bright.
    pub fn bright_at(&self, u: f64, v: f64) -> bool {
        let cu = (u - self.deflect(v.rem_euclid(1.0))).floor() as i64;
        let cv = (v - self.deflect(u.rem_euclid(1.0))).floor() as i64;
        ((cu + cv).rem_euclid(2) == 0) == (self.polarity == Polarity::Normal)
    }

    /// Brightness with edges ramped over `width` pixels; `px_u`, `px_v` are
    /// pixels per lattice unit across the two edge families. Continuous in
    /// `(u, v)`, unlike `value_at`.
    pub(crate) fn smooth_value_at(&self, u: f64, v: f64, px_u: f64, px_v: f64, width: f64) -> f64 {
        let side = |a: f64, px: f64| {
            let r = a - a.round();
            let sign = if (a.round() as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            (0.5 + sign * r * px / width).clamp(0.0, 1.0)
        };
        let ta = side(u - self.deflect(v.rem_euclid(1.0)), px_u);
        let tb = side(v - self.deflect(u.rem_euclid(1.0)), px_v);
        let even = ta * tb + (1.0 - ta) * (1.0 - tb);
        let bright = if self.polarity == Polarity::Normal { even } else { 1.0 - even };
        self.dark + (self.bright - self.dark) * bright
    }

    pub fn value_at(&self, u: f64, v: f64) -> f64 {
        if self.bright_at(u, v) {
            self.bright
        } else {
            self.dark
        }
    }

    /// Ideal position of node `(u, v)` in meters, seam included.
    pub fn node_position(&self, u: i32, v: i32) -> Vector3<f64> {
        let mut p = Vector3::new(u as f64 * self.pitch, v as f64 * self.pitch, 0.0);
        if let Some(s) = self.seam {
            if u >= s.column {
                p.x += s.step[0];
                p.y += s.step[1];
            }
        }
        p
    }

    /// Intensity at a point of the target plane (meters).
    pub fn value_at_point(&self, x: f64, y: f64) -> f64 {
        match self.lattice_point(x, y) {
            Some((u, v)) => self.value_at(u, v),
            None => self.surround,
        }
    }

    /// Lattice coordinates of a target-plane point, `None` off the panel.
    fn lattice_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (mut x, mut y) = (x, y);
        if let Some(s) = self.seam {
            if x >= (s.column as f64 - 0.5) * self.pitch {
                x -= s.step[0];
                y -= s.step[1];
            }
        }
        let (u, v) = (x / self.pitch, y / self.pitch);
        (u >= 0.0 && v >= 0.0 && u <= self.cols as f64 && v <= self.rows as f64).then_some((u, v))
    }

    /// Interior nodes (the panel border has no corner).
    pub fn nodes(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (1..self.rows as i32).flat_map(move |v| (1..self.cols as i32).map(move |u| (u, v)))
    }
}

/// Target-to-camera transform `x_cam = R x + t`, rotation as a scaled axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.into(),
            translation: translation.into(),
        }
    }

    pub fn from_matrix(r: &Rotation3<f64>, t: Vector3<f64>) -> Self {
        Self::new(r.scaled_axis(), t)
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        Rotation3::new(Vector3::from(self.rotation))
    }

    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x + self.t()
    }

    /// Camera at `eye` (target coordinates) looking at `center`, image x
    /// roughly along the target's x axis.
    pub fn looking_at(eye: Vector3<f64>, center: Vector3<f64>) -> Self {
        let z = (center - eye).normalize();
        let x = Vector3::x() - z * z.x;
        let x = if x.norm() < 1e-9 { Vector3::y().cross(&z) } else { x.normalize() };
        let y = z.cross(&x);
        // rows of R are the camera axes in target coordinates
        let r = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]));
        Self::from_matrix(&r, -(r * eye))
    }
}

/// Pixel position of a target point, `None` behind the camera or where
/// the distortion is not invertible.
pub fn project(model: &DistortionModel, pose: &Pose, x: &Vector3<f64>) -> Option<(f64, f64)> {
    let c = pose.apply(x);
    if c.z <= 0.0 {
        return None;
    }
    let (cx, cy) = model.principal_point;
    let pu = (cx + model.focal_length * c.x / c.z, cy + model.focal_length * c.y / c.z);
    let p = model.apply_distortion(pu);
    // far outside the lens field the radial polynomial folds back
    let back = model.undistort(p).ok()?;
    ((back.0 - pu.0).hypot(back.1 - pu.1) < 1e-6 * (1.0 + pu.0.hypot(pu.1))).then_some(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    /// Sub-samples per pixel along each axis.
    pub supersample: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            supersample: 4,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Render the target seen through `pose` and `model`. Pixel `(x, y)` covers
/// `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`.
pub fn render_target(spec: &TargetSpec, pose: &Pose, model: &DistortionModel, params: &RenderParams) -> Result<ImageGrid> {
    spec.validate()?;
    model.validate()?;
    let ss = params.supersample.max(1);
    let r = pose.rotation_matrix();
    let rt = r.inverse();
    let origin = -(rt * pose.t());
    let (cx, cy) = model.principal_point;
    let hit = |px: f64, py: f64| -> Option<(f64, f64)> {
        let (ux, uy) = model.undistort((px, py)).ok()?;
        let dir = rt * Vector3::new((ux - cx) / model.focal_length, (uy - cy) / model.focal_length, 1.0);
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let lambda = -origin.z / dir.z;
        if lambda <= 0.0 {
            return None;
        }
        let p = origin + dir * lambda;
        Some((p.x, p.y))
    };
    let inv = 1.0 / ss as f64;
    // sub-samples ramp across edges over their own width, using the local
    // pixel scale of the lattice
    let img = ImageGrid::from_fn(params.width, params.height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let scale = match (hit(fx, fy), hit(fx + 0.5, fy), hit(fx, fy + 0.5)) {
            (Some(c), Some(a), Some(b)) => {
                let g = nalgebra::Matrix2::new(a.0 - c.0, b.0 - c.0, a.1 - c.1, b.1 - c.1) * (2.0 / spec.pitch);
                Some((1.0 / g.row(0).norm(), 1.0 / g.row(1).norm()))
            }
            _ => None,
        };
        let mut acc = 0.0;
        for j in 0..ss {
            for i in 0..ss {
                let px = fx - 0.5 + (i as f64 + 0.5) * inv;
                let py = fy - 0.5 + (j as f64 + 0.5) * inv;
                let lattice = hit(px, py).and_then(|p| spec.lattice_point(p.0, p.1));
                acc += match (lattice, scale) {
                    (Some((u, v)), Some((su, sv))) => spec.smooth_value_at(u, v, su, sv, inv),
                    (Some((u, v)), None) => spec.value_at(u, v),
                    (None, _) => spec.surround,
                };
            }
        }
        acc * inv * inv
    });
    let mut img = if params.blur_sigma > 0.0 {
        img.gaussian_blur(params.blur_sigma)
    } else {
        img
    };
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        let normal = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(img)
}

/// A straight-on view of `center` from `distance` meters followed by
/// `count - 1` oblique views from a ring around it.
pub fn survey_poses(center: Vector3<f64>, distance: f64, count: usize) -> Vec<Pose> {
    (0..count)
        .map(|k| {
            if k == 0 {
                return Pose::looking_at(center - Vector3::new(0.0, 0.0, distance), center);
            }
            let a = 2.0 * std::f64::consts::PI * (k - 1) as f64 / (count - 1) as f64;
            let r = 0.4 * distance;
            let eye = center + Vector3::new(r * a.cos(), 0.6 * r * a.sin(), -distance);
            Pose::looking_at(eye, center)
        })
        .collect()
}

/// Analytic pixel positions of every interior node in view.
pub fn visible_nodes(spec: &TargetSpec, pose: &Pose, model: &DistortionModel, width: usize, height: usize, margin: f64) -> Vec<((i32, i32), (f64, f64))> {
    spec.nodes()
        .filter_map(|(u, v)| {
            let p = project(model, pose, &spec.node_position(u, v))?;
            let inside = p.0 >= margin
                && p.1 >= margin
                && p.0 <= width as f64 - 1.0 - margin
                && p.1 <= height as f64 - 1.0 - margin;
            inside.then_some(((u, v), p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> DistortionModel {
        DistortionModel::new(300.0, (159.5, 119.5), 200.0).unwrap()
    }

    #[test]
    fn arcs_keep_nodes_and_continuity() {
        assert!(arc_offset(0.0).abs() < 1e-15);
        assert!(arc_offset(0.5).abs() < 1e-15);
        assert!(arc_offset(1.0).abs() < 1e-15);
        let sag = 1.0 - (1.0f64 - 1.0 / 16.0).sqrt();
        assert!((arc_offset(0.25) - sag).abs() < 1e-15);
        assert!((arc_offset(0.75) + sag).abs() < 1e-15);
        // tangent continuity at the midpoint and across nodes
        let h = 1e-7;
        let slope = |t: f64| (arc_offset(t + h) - arc_offset(t - h)) / (2.0 * h);
        assert!((slope(0.5 - 2.0 * h) - slope(0.5 + 2.0 * h)).abs() < 1e-5);
        assert!((slope(2.0 * h) - slope(1.0 - 2.0 * h)).abs() < 1e-5);
    }

    #[test]
    fn pattern_is_binary_checkerboard_without_arcs() {
        let spec = TargetSpec { arcs: false, ..TargetSpec::default() };
        assert!(spec.bright_at(0.5, 0.5));
        assert!(!spec.bright_at(1.5, 0.5));
        assert!(spec.bright_at(1.5, 1.5));
        let inv = TargetSpec { polarity: Polarity::Inverted, ..spec.clone() };
        assert!(!inv.bright_at(0.5, 0.5));
        // arcs move edges, not cell centers or nodes
        let arcs = TargetSpec::default();
        for (u, v) in [(0.5, 0.5), (3.5, 2.5), (7.5, 4.5)] {
            assert_eq!(arcs.bright_at(u, v), spec.bright_at(u, v));
        }
        // an edge point deflected by the sagitta
        assert_ne!(arcs.bright_at(1.02, 0.25), spec.bright_at(1.02, 0.25));
    }

    #[test]
    fn pattern_symmetries() {
        let spec = TargetSpec::default();
        let plain = TargetSpec { arcs: false, ..spec.clone() };
        let mut mirror_breaks = 0;
        for i in 0..2000 {
            let (u, v) = ((i as f64 * 0.0173) % 3.0 + 0.0013, (i as f64 * 0.0291) % 3.0 + 0.0031);
            assert_eq!(spec.bright_at(4.0 + u, 4.0 + v), spec.bright_at(4.0 - u, 4.0 - v));
            assert_eq!(spec.bright_at(4.0 + u, 4.0 + v), spec.bright_at(4.0 + v, 4.0 + u));
            // mirroring a plain checkerboard about a node column flips every cell
            assert_ne!(plain.bright_at(4.0 + u, 4.0 + v), plain.bright_at(4.0 - u, 4.0 + v));
            if spec.bright_at(4.0 + u, 4.0 + v) == spec.bright_at(4.0 - u, 4.0 + v) {
                mirror_breaks += 1;
            }
        }
        assert!(mirror_breaks > 0);
    }

    #[test]
    fn projection_of_fronto_parallel_target() {
        let spec = TargetSpec { arcs: false, ..TargetSpec::default() };
        let pose = Pose::new(Vector3::zeros(), Vector3::new(-1.0, -0.8, 3.0));
        let m = camera();
        let p = project(&m, &pose, &spec.node_position(5, 4)).unwrap();
        assert!((p.0 - (159.5 + 300.0 * (0.9 - 1.0) / 3.0)).abs() < 1e-12);
        assert!((p.1 - (119.5 + 300.0 * (0.72 - 0.8) / 3.0)).abs() < 1e-12);
        let behind = Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, -3.0));
        assert!(project(&m, &behind, &spec.node_position(1, 1)).is_none());
    }

    #[test]
    fn looking_at_centers_the_target() {
        let center = Vector3::new(2.0, 1.5, 0.0);
        let pose = Pose::looking_at(Vector3::new(2.5, 1.0, -3.0), center);
        let c = pose.apply(&center);
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        let r = pose.rotation_matrix();
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn render_matches_pattern_in_flat_cells() {
        let spec = TargetSpec { arcs: false, ..TargetSpec::default() };
        let pose = Pose::new(Vector3::zeros(), Vector3::new(-1.0, -0.8, 3.0));
        let img = render_target(&spec, &pose, &camera(), &RenderParams::default()).unwrap();
        // pixel at the center of cell (5, 4): target point (0.99, 0.81)
        let (x, y): (f64, f64) = (159.5 + 300.0 * (-0.01) / 3.0, 119.5 + 300.0 * 0.01 / 3.0);
        let v = img.get(x.round() as usize, y.round() as usize);
        assert_eq!(v, spec.value_at(5.5, 4.5));
        let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
        assert!((mean - 0.5).abs() < 0.05);
    }
}
