//! Camera fitting by Levenberg-Marquardt over intrinsics and per-view poses,
//! optionally with per-node 3D corrections of the target.
//!
//! Parameter layout: `[f, cx, cy, k1, k2, k3]` then six per view (rotation
//! increment, translation). Rotations are updated multiplicatively,
//! `R <- exp(w) R`, so the rotation Jacobian at the current pose is
//! `-[R x]_x`. Node corrections have 3x3 diagonal blocks in the normal
//! equations and are eliminated by a Schur complement.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Rotation3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GridNodeSet, Pose, TargetSpec};
use crate::error::{Error, Result};
use crate::rectify::DistortionModel;

type M26 = SMatrix<f64, 2, 6>;
const NI: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    /// Free poses first, then focal length and principal point, then the
    /// radial terms. All at once when false.
    pub staged: bool,
    pub max_iter: usize,
    pub lambda0: f64,
    /// Converged once the relative cost decrease falls below this.
    pub rel_tol: f64,
    /// Or once the step is this small relative to the parameters.
    pub step_tol: f64,
    /// Consecutive rejected steps before giving up.
    pub max_failures: usize,
    /// Weight of node corrections, squared pixels per squared millimeter.
    pub regularization: f64,
    pub min_views: usize,
    pub min_nodes: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            staged: true,
            max_iter: 500,
            lambda0: 1e-3,
            rel_tol: 1e-10,
            step_tol: 1e-12,
            max_failures: 20,
            regularization: 1e-3,
            min_views: 3,
            min_nodes: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeCorrection {
    pub u: i32,
    pub v: i32,
    /// Meters, target frame.
    pub delta: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSolution {
    pub model: DistortionModel,
    pub poses: Vec<Pose>,
    pub corrections: Vec<NodeCorrection>,
    /// Pixels.
    pub mre: f64,
}

impl CameraSolution {
    pub fn correction(&self, u: i32, v: i32) -> Vector3<f64> {
        self.corrections
            .iter()
            .find(|c| c.u == u && c.v == v)
            .map_or_else(Vector3::zeros, |c| Vector3::from(c.delta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub solution: CameraSolution,
    pub iterations: usize,
    /// Final sum of squared residuals (plus the correction penalty).
    pub cost: f64,
    /// False when the damping limit was hit; the best parameters so far
    /// are returned.
    pub converged: bool,
}

struct Obs {
    view: usize,
    node: usize,
    pixel: Vector2<f64>,
}

struct Problem {
    obs: Vec<Obs>,
    base: Vec<Vector3<f64>>,
    keys: Vec<(i32, i32)>,
    views: usize,
    fov_radius: f64,
}

impl Problem {
    fn new(sets: &[GridNodeSet], spec: &TargetSpec, fov_radius: f64) -> Self {
        let mut index: HashMap<(i32, i32), usize> = HashMap::new();
        let mut base = Vec::new();
        let mut keys = Vec::new();
        let mut obs = Vec::new();
        for (view, set) in sets.iter().enumerate() {
            for n in set.valid() {
                let node = *index.entry((n.u, n.v)).or_insert_with(|| {
                    keys.push((n.u, n.v));
                    base.push(n.target.map_or_else(|| spec.node_position(n.u, n.v), Vector3::from));
                    base.len() - 1
                });
                obs.push(Obs {
                    view,
                    node,
                    pixel: Vector2::new(n.x, n.y),
                });
            }
        }
        Self {
            obs,
            base,
            keys,
            views: sets.len(),
            fov_radius,
        }
    }

    fn cols(&self) -> usize {
        NI + 6 * self.views
    }
}

#[derive(Clone)]
struct State {
    intr: [f64; NI],
    rot: Vec<Rotation3<f64>>,
    trans: Vec<Vector3<f64>>,
    corr: Vec<Vector3<f64>>,
}

impl State {
    fn from_solution(sol: &CameraSolution, problem: &Problem) -> Self {
        let m = &sol.model;
        Self {
            intr: [m.focal_length, m.principal_point.0, m.principal_point.1, m.k1, m.k2, m.k3],
            rot: sol.poses.iter().map(|p| p.rotation_matrix()).collect(),
            trans: sol.poses.iter().map(|p| p.t()).collect(),
            corr: problem.keys.iter().map(|&(u, v)| sol.correction(u, v)).collect(),
        }
    }

    fn model(&self, fov_radius: f64) -> DistortionModel {
        let [f, cx, cy, k1, k2, k3] = self.intr;
        DistortionModel {
            focal_length: f,
            principal_point: (cx, cy),
            k1,
            k2,
            k3,
            d_perc: 100.0 * (k1 + k2 + k3),
            fov_radius,
        }
    }

    fn solution(&self, problem: &Problem, mre: f64) -> CameraSolution {
        CameraSolution {
            model: self.model(problem.fov_radius),
            poses: self.rot.iter().zip(&self.trans).map(|(r, t)| Pose::from_matrix(r, *t)).collect(),
            corrections: problem
                .keys
                .iter()
                .zip(&self.corr)
                .filter(|(_, c)| **c != Vector3::zeros())
                .map(|(&(u, v), c)| NodeCorrection { u, v, delta: (*c).into() })
                .collect(),
            mre,
        }
    }
}

fn skew(y: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0)
}

struct Projection {
    p: Vector2<f64>,
    d_intr: M26,
    d_pose: M26,
    d_point: Matrix2x3<f64>,
}

fn project_point(intr: &[f64; NI], fov_radius: f64, r: &Rotation3<f64>, t: &Vector3<f64>, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    let c = r * x + t;
    if c.z <= 0.0 {
        return None;
    }
    let [f, cx, cy, k1, k2, k3] = *intr;
    let n = Vector2::new(c.x / c.z, c.y / c.z);
    let s = f * f * n.norm_squared() / (fov_radius * fov_radius);
    Some(Vector2::new(cx, cy) + n * (f * (1.0 + s * (k1 + s * (k2 + s * k3)))))
}

fn project_jac(intr: &[f64; NI], fov_radius: f64, r: &Rotation3<f64>, t: &Vector3<f64>, x: &Vector3<f64>) -> Option<Projection> {
    let y = r * x;
    let c = y + t;
    if c.z <= 0.0 {
        return None;
    }
    let [f, cx, cy, k1, k2, k3] = *intr;
    let r2 = fov_radius * fov_radius;
    let n = Vector2::new(c.x / c.z, c.y / c.z);
    let nn = n.norm_squared();
    let s = f * f * nn / r2;
    let big_f = 1.0 + s * (k1 + s * (k2 + s * k3));
    let df = k1 + s * (2.0 * k2 + 3.0 * k3 * s);
    let p = Vector2::new(cx, cy) + n * (f * big_f);
    let mut d_intr = M26::zeros();
    d_intr.set_column(0, &(n * (big_f + 2.0 * s * df)));
    d_intr[(0, 1)] = 1.0;
    d_intr[(1, 2)] = 1.0;
    d_intr.set_column(3, &(n * (f * s)));
    d_intr.set_column(4, &(n * (f * s * s)));
    d_intr.set_column(5, &(n * (f * s * s * s)));
    let dp_dn = Matrix2::identity() * (f * big_f) + n * n.transpose() * (2.0 * f * f * f * df / r2);
    let dn_dc = Matrix2x3::new(1.0 / c.z, 0.0, -c.x / (c.z * c.z), 0.0, 1.0 / c.z, -c.y / (c.z * c.z));
    let d_c = dp_dn * dn_dc;
    let mut d_pose = M26::zeros();
    d_pose.fixed_columns_mut::<3>(0).copy_from(&(d_c * -skew(&y)));
    d_pose.fixed_columns_mut::<3>(3).copy_from(&d_c);
    Some(Projection {
        p,
        d_intr,
        d_pose,
        d_point: d_c * r.matrix(),
    })
}

/// Which parameter groups move in one solve.
#[derive(Debug, Clone, Copy)]
struct Free {
    intr: [bool; NI],
    /// Regularization weight per squared meter when nodes move.
    nodes: Option<f64>,
}

fn cost(problem: &Problem, s: &State, free: &Free) -> f64 {
    let mut total = 0.0;
    for o in &problem.obs {
        let x = problem.base[o.node] + s.corr[o.node];
        match project_point(&s.intr, problem.fov_radius, &s.rot[o.view], &s.trans[o.view], &x) {
            Some(p) => total += (p - o.pixel).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    if let Some(mu) = free.nodes {
        total += mu * s.corr.iter().map(|c| c.norm_squared()).sum::<f64>();
    }
    total
}

struct Normal {
    a: DMatrix<f64>,
    g: DVector<f64>,
    b: Vec<Matrix3<f64>>,
    w: Vec<DMatrix<f64>>,
    gn: Vec<Vector3<f64>>,
}

/// `J^T J` and `-J^T r`, frozen parameters pinned.
fn normal_equations(problem: &Problem, s: &State, free: &Free) -> Option<Normal> {
    let nc = problem.cols();
    let nodes = free.nodes.is_some();
    let nn = if nodes { problem.base.len() } else { 0 };
    let mut eq = Normal {
        a: DMatrix::zeros(nc, nc),
        g: DVector::zeros(nc),
        b: vec![Matrix3::zeros(); nn],
        w: vec![DMatrix::zeros(nc, 3); nn],
        gn: vec![Vector3::zeros(); nn],
    };
    for o in &problem.obs {
        let x = problem.base[o.node] + s.corr[o.node];
        let pr = project_jac(&s.intr, problem.fov_radius, &s.rot[o.view], &s.trans[o.view], &x)?;
        let res = pr.p - o.pixel;
        let mut jc = SMatrix::<f64, 2, 12>::zeros();
        jc.fixed_columns_mut::<6>(0).copy_from(&pr.d_intr);
        jc.fixed_columns_mut::<6>(6).copy_from(&pr.d_pose);
        for (k, &on) in free.intr.iter().enumerate() {
            if !on {
                jc.column_mut(k).fill(0.0);
            }
        }
        let idx = |k: usize| if k < NI { k } else { NI + 6 * o.view + (k - NI) };
        let jtj = jc.transpose() * jc;
        let jtr = jc.transpose() * res;
        for i in 0..12 {
            eq.g[idx(i)] -= jtr[i];
            for j in 0..12 {
                eq.a[(idx(i), idx(j))] += jtj[(i, j)];
            }
        }
        if nodes {
            let jp = pr.d_point;
            eq.b[o.node] += jp.transpose() * jp;
            eq.gn[o.node] -= jp.transpose() * res;
            let cross = jc.transpose() * jp;
            let w = &mut eq.w[o.node];
            for i in 0..12 {
                for j in 0..3 {
                    w[(idx(i), j)] += cross[(i, j)];
                }
            }
        }
    }
    if let Some(mu) = free.nodes {
        for (i, c) in s.corr.iter().enumerate() {
            eq.b[i] += Matrix3::identity() * mu;
            eq.gn[i] -= c * mu;
        }
    }
    for (k, &on) in free.intr.iter().enumerate() {
        if !on {
            eq.a[(k, k)] = 1.0;
        }
    }
    Some(eq)
}

struct Step {
    cam: DVector<f64>,
    nodes: Vec<Vector3<f64>>,
}

fn damped(m: f64, lambda: f64) -> f64 {
    m + lambda * m.max(1e-12)
}

fn solve_step(eq: &Normal, lambda: f64) -> Option<Step> {
    let nc = eq.a.nrows();
    let mut s = eq.a.clone();
    for i in 0..nc {
        s[(i, i)] = damped(s[(i, i)], lambda);
    }
    let mut rhs = eq.g.clone();
    let mut b_inv = Vec::with_capacity(eq.b.len());
    for i in 0..eq.b.len() {
        let mut b = eq.b[i];
        for k in 0..3 {
            b[(k, k)] = damped(b[(k, k)], lambda);
        }
        let inv = b.try_inverse()?;
        let wb = &eq.w[i] * inv;
        s -= &wb * eq.w[i].transpose();
        rhs -= &wb * eq.gn[i];
        b_inv.push(inv);
    }
    let cam = s.cholesky()?.solve(&rhs);
    let nodes = (0..eq.b.len())
        .map(|i| b_inv[i] * (eq.gn[i] - eq.w[i].transpose() * &cam))
        .collect();
    Some(Step { cam, nodes })
}

fn apply(s: &State, step: &Step) -> State {
    let mut out = s.clone();
    for k in 0..NI {
        out.intr[k] += step.cam[k];
    }
    for v in 0..s.rot.len() {
        let o = NI + 6 * v;
        let w = Vector3::new(step.cam[o], step.cam[o + 1], step.cam[o + 2]);
        out.rot[v] = Rotation3::new(w) * s.rot[v];
        out.trans[v] += Vector3::new(step.cam[o + 3], step.cam[o + 4], step.cam[o + 5]);
    }
    for (c, d) in out.corr.iter_mut().zip(&step.nodes) {
        *c += d;
    }
    out
}

fn step_is_small(s: &State, step: &Step, tol: f64) -> bool {
    let scale = s
        .intr
        .iter()
        .chain(s.trans.iter().flat_map(|t| t.iter()))
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let big = step
        .cam
        .iter()
        .chain(step.nodes.iter().flat_map(|n| n.iter()))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    big <= tol * scale
}

struct Outcome {
    state: State,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(problem: &Problem, start: State, free: Free, params: &FitParams) -> Outcome {
    let mut s = start;
    let mut c = cost(problem, &s, &free);
    let mut lambda = params.lambda0;
    let mut iterations = 0;
    let done = |state, cost, iterations, converged| Outcome {
        state,
        cost,
        iterations,
        converged,
    };
    if c == 0.0 {
        return done(s, c, 0, true);
    }
    while iterations < params.max_iter {
        iterations += 1;
        let Some(eq) = normal_equations(problem, &s, &free) else {
            return done(s, c, iterations, false);
        };
        let mut failures = 0;
        loop {
            let step = solve_step(&eq, lambda);
            let trial = step.as_ref().map(|st| {
                let next = apply(&s, st);
                let nc = cost(problem, &next, &free);
                (next, nc)
            });
            match (step, trial) {
                (Some(st), Some((next, nc))) if nc < c => {
                    let rel = (c - nc) / c;
                    let small = step_is_small(&s, &st, params.step_tol);
                    s = next;
                    c = nc;
                    lambda = (lambda / 10.0).max(1e-15);
                    if rel < params.rel_tol || small || c == 0.0 {
                        return done(s, c, iterations, true);
                    }
                    break;
                }
                (step, _) => {
                    if step.is_some_and(|st| step_is_small(&s, &st, params.step_tol)) {
                        return done(s, c, iterations, true);
                    }
                    failures += 1;
                    lambda *= 10.0;
                    if failures >= params.max_failures {
                        return done(s, c, iterations, false);
                    }
                }
            }
        }
    }
    done(s, c, iterations, false)
}

/// Plane-to-image homography by normalized DLT.
fn homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let norm = |pts: &[Vector2<f64>]| {
        let c = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
        let k = std::f64::consts::SQRT_2 / d.max(1e-300);
        Matrix3::new(k, 0.0, -k * c.x, 0.0, k, -k * c.y, 0.0, 0.0, 1.0)
    };
    let (ts, td) = (norm(src), norm(dst));
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * Vector3::new(s.x, s.y, 1.0);
        let d = td * Vector3::new(d.x, d.y, 1.0);
        for k in 0..3 {
            a[(2 * i, k)] = s[k];
            a[(2 * i, 6 + k)] = -d.x * s[k];
            a[(2 * i + 1, 3 + k)] = s[k];
            a[(2 * i + 1, 6 + k)] = -d.y * s[k];
        }
    }
    let svd = a.svd(false, true);
    let k = svd.singular_values.imin();
    let vt = svd.v_t?;
    let h = vt.row(k);
    let h = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    Some(td.try_inverse()? * h * ts)
}

/// Pose of a planar target from its homography and the seed intrinsics.
fn pose_from_homography(h: &Matrix3<f64>, m: &DistortionModel) -> Pose {
    let (f, (cx, cy)) = (m.focal_length, m.principal_point);
    let k_inv = Matrix3::new(1.0 / f, 0.0, -cx / f, 0.0, 1.0 / f, -cy / f, 0.0, 0.0, 1.0);
    let b = k_inv * h;
    let mut lam = 2.0 / (b.column(0).norm() + b.column(1).norm());
    if (b.column(2) * lam).z < 0.0 {
        lam = -lam;
    }
    let r1 = b.column(0) * lam;
    let r2 = b.column(1) * lam;
    let t = b.column(2) * lam;
    let rough = Matrix3::from_columns(&[r1.clone_owned(), r2.clone_owned(), r1.cross(&r2)]);
    let svd = rough.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * vt;
    }
    Pose::from_matrix(&Rotation3::from_matrix_unchecked(r), t.into_owned())
}

fn check_views(sets: &[GridNodeSet], params: &FitParams) -> Result<()> {
    if sets.len() < params.min_views {
        return Err(Error::Unobservable(format!(
            "{} views, at least {} needed",
            sets.len(),
            params.min_views
        )));
    }
    for (i, s) in sets.iter().enumerate() {
        let n = s.valid().count();
        if n < params.min_nodes {
            return Err(Error::Degenerate(format!("view {i} has {n} nodes, at least {} needed", params.min_nodes)));
        }
    }
    Ok(())
}

/// Fit intrinsics and poses to node sets with absolute indices, starting
/// from `seed` (its radial radius stays fixed).
pub fn fit_camera(sets: &[GridNodeSet], spec: &TargetSpec, seed: &DistortionModel, params: &FitParams) -> Result<FitReport> {
    check_views(sets, params)?;
    seed.validate()?;
    let problem = Problem::new(sets, spec, seed.fov_radius);
    let mut poses = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for n in set.valid() {
            let x = n.target.map_or_else(|| spec.node_position(n.u, n.v), Vector3::from);
            src.push(Vector2::new(x.x, x.y));
            let (ux, uy) = seed.undistort((n.x, n.y))?;
            dst.push(Vector2::new(ux, uy));
        }
        let h = homography(&src, &dst).ok_or_else(|| Error::Degenerate(format!("view {i}: no homography")))?;
        poses.push(pose_from_homography(&h, seed));
    }
    let start = CameraSolution {
        model: *seed,
        poses,
        corrections: Vec::new(),
        mre: 0.0,
    };
    let mut state = State::from_solution(&start, &problem);
    let stages: &[[bool; NI]] = if params.staged {
        &[
            [false; NI],
            [true, true, true, false, false, false],
            [true; NI],
        ]
    } else {
        &[[true; NI]]
    };
    let mut iterations = 0;
    let mut last = None;
    for &intr in stages {
        let out = levenberg_marquardt(&problem, state, Free { intr, nodes: None }, params);
        iterations += out.iterations;
        state = out.state;
        last = Some((out.cost, out.converged));
    }
    let (cost, converged) = last.expect("at least one stage");
    let mre = mre_of(&problem, &state)?;
    Ok(FitReport {
        solution: state.solution(&problem, mre),
        iterations,
        cost,
        converged,
    })
}

/// Joint refinement of the camera and per-node 3D corrections, pulled
/// toward the ideal lattice by `params.regularization`. Never returns a
/// solution with a larger MRE than the input.
pub fn refine_target_nodes(solution: &CameraSolution, sets: &[GridNodeSet], spec: &TargetSpec, params: &FitParams) -> Result<FitReport> {
    if sets.len() < 3 {
        return Err(Error::Unobservable(format!(
            "node corrections need at least 3 views, got {}",
            sets.len()
        )));
    }
    check_views(sets, params)?;
    if solution.poses.len() != sets.len() {
        return Err(Error::Contract("one pose per node set expected".into()));
    }
    let problem = Problem::new(sets, spec, solution.model.fov_radius);
    let start = State::from_solution(solution, &problem);
    let before = mre_of(&problem, &start)?;
    // penalty per squared meter
    let mu = params.regularization * 1e6;
    let out = levenberg_marquardt(&problem, start.clone(), Free { intr: [true; NI], nodes: Some(mu) }, params);
    let after = mre_of(&problem, &out.state)?;
    let (state, mre) = if after <= before { (out.state, after) } else { (start, before) };
    Ok(FitReport {
        solution: state.solution(&problem, mre),
        iterations: out.iterations,
        cost: out.cost,
        converged: out.converged,
    })
}

fn residuals(problem: &Problem, s: &State) -> Result<Vec<(usize, f64)>> {
    problem
        .obs
        .iter()
        .map(|o| {
            let x = problem.base[o.node] + s.corr[o.node];
            let p = project_point(&s.intr, problem.fov_radius, &s.rot[o.view], &s.trans[o.view], &x)
                .ok_or_else(|| Error::Degenerate("node behind the camera".into()))?;
            Ok((o.view, (p - o.pixel).norm()))
        })
        .collect()
}

fn mre_of(problem: &Problem, s: &State) -> Result<f64> {
    let r = residuals(problem, s)?;
    if r.is_empty() {
        return Err(Error::Degenerate("no valid nodes".into()));
    }
    Ok(r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64)
}

fn problem_for(solution: &CameraSolution, sets: &[GridNodeSet], spec: &TargetSpec) -> Result<(Problem, State)> {
    if solution.poses.len() != sets.len() {
        return Err(Error::Contract(format!(
            "{} poses for {} node sets",
            solution.poses.len(),
            sets.len()
        )));
    }
    let problem = Problem::new(sets, spec, solution.model.fov_radius);
    let state = State::from_solution(solution, &problem);
    Ok((problem, state))
}

/// Mean reprojection error over all valid nodes of all views (pixels).
pub fn mre(solution: &CameraSolution, sets: &[GridNodeSet], spec: &TargetSpec) -> Result<f64> {
    let (problem, state) = problem_for(solution, sets, spec)?;
    mre_of(&problem, &state)
}

/// Per view: valid node count and mean reprojection error (NaN when empty).
pub fn per_view_mre(solution: &CameraSolution, sets: &[GridNodeSet], spec: &TargetSpec) -> Result<Vec<(usize, f64)>> {
    let (problem, state) = problem_for(solution, sets, spec)?;
    let mut acc = vec![(0usize, 0.0f64); sets.len()];
    for (view, e) in residuals(&problem, &state)? {
        acc[view].0 += 1;
        acc[view].1 += e;
    }
    Ok(acc
        .into_iter()
        .map(|(n, s)| (n, if n == 0 { f64::NAN } else { s / n as f64 }))
        .collect())
}

/// Whether `x -> M x + o` maps the pattern onto itself, checked on
/// scattered points of two cells.
fn is_symmetry(spec: &TargetSpec, m: &[i32; 4], o: (i32, i32)) -> bool {
    (0..64).all(|i| {
        let x = (0.137 + i as f64 * 0.618_034).rem_euclid(2.0);
        let y = (0.291 + i as f64 * 0.754_878).rem_euclid(2.0);
        let (mx, my) = (m[0] as f64 * x + m[1] as f64 * y, m[2] as f64 * x + m[3] as f64 * y);
        spec.bright_at(x, y) == spec.bright_at(mx + o.0 as f64, my + o.1 as f64)
    })
}

/// Tie detector indices to the target. Detected indices equal target
/// indices up to a symmetry of the pattern (a lattice rotation or mirror
/// plus an offset); it is found by voting against the nodes projected
/// through an approximate pose. When the pose is too rough for a majority,
/// the projection is pulled onto the agreeing nodes by a homography and the
/// vote repeated. Nodes that land off the panel interior are dropped.
pub fn align_indices(set: &GridNodeSet, spec: &TargetSpec, model: &DistortionModel, approx: &Pose) -> Result<GridNodeSet> {
    let mut projected: Vec<((i32, i32), Vector2<f64>)> = spec
        .nodes()
        .filter_map(|(u, v)| {
            super::project(model, approx, &spec.node_position(u, v)).map(|p| ((u, v), Vector2::new(p.0, p.1)))
        })
        .collect();
    if projected.is_empty() || set.valid().next().is_none() {
        return Err(Error::Degenerate("nothing to align".into()));
    }
    // detected index d sits at target index M d + o
    const DIHEDRAL: [[i32; 4]; 8] = [
        [1, 0, 0, 1],
        [-1, 0, 0, -1],
        [0, 1, 1, 0],
        [0, -1, -1, 0],
        [-1, 0, 0, 1],
        [1, 0, 0, -1],
        [0, -1, 1, 0],
        [0, 1, -1, 0],
    ];
    const ROUNDS: usize = 4;
    let map = |m: &[i32; 4], u: i32, v: i32| (m[0] * u + m[1] * v, m[2] * u + m[3] * v);
    let detected: Vec<&super::GridNode> = set.valid().collect();
    let mut round = 0;
    let (m, offset) = loop {
        let nearest = |x: f64, y: f64| {
            projected
                .iter()
                .min_by(|a, b| (a.1 - Vector2::new(x, y)).norm_squared().total_cmp(&(b.1 - Vector2::new(x, y)).norm_squared()))
                .expect("non-empty")
                .0
        };
        let labels: Vec<(i32, i32, (i32, i32))> = detected.iter().map(|n| (n.u, n.v, nearest(n.x, n.y))).collect();
        let mut best: Option<(usize, [i32; 4], (i32, i32))> = None;
        for m in &DIHEDRAL {
            let mut votes: HashMap<(i32, i32), usize> = HashMap::new();
            for &(u, v, t) in &labels {
                let d = map(m, u, v);
                *votes.entry((t.0 - d.0, t.1 - d.1)).or_default() += 1;
            }
            let mut ranked: Vec<((i32, i32), usize)> = votes.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let Some(&(offset, count)) = ranked.first() else {
                continue;
            };
            if best.map_or(true, |b| count > b.0) && is_symmetry(spec, m, offset) {
                best = Some((count, *m, offset));
            }
        }
        let (count, m, offset) = best.ok_or_else(|| Error::Degenerate("no consistent index offset".into()))?;
        if 2 * count >= labels.len() {
            break (m, offset);
        }
        round += 1;
        let agree: Vec<usize> = (0..labels.len())
            .filter(|&i| {
                let d = map(&m, labels[i].0, labels[i].1);
                labels[i].2 == (d.0 + offset.0, d.1 + offset.1)
            })
            .collect();
        let at: HashMap<(i32, i32), Vector2<f64>> = projected.iter().copied().collect();
        let src: Vec<Vector2<f64>> = agree.iter().map(|&i| at[&labels[i].2]).collect();
        let dst: Vec<Vector2<f64>> = agree.iter().map(|&i| Vector2::new(detected[i].x, detected[i].y)).collect();
        let h = (round < ROUNDS && agree.len() >= 8).then(|| homography(&src, &dst)).flatten();
        let Some(h) = h else {
            return Err(Error::Degenerate(format!(
                "index alignment ambiguous: {count} of {} nodes agree",
                labels.len()
            )));
        };
        for (_, p) in projected.iter_mut() {
            let q = h * Vector3::new(p.x, p.y, 1.0);
            *p = Vector2::new(q.x / q.z, q.y / q.z);
        }
    };
    let inside = |u: i32, v: i32| u >= 1 && v >= 1 && u < spec.cols as i32 && v < spec.rows as i32;
    let nodes = set
        .nodes
        .iter()
        .filter_map(|n| {
            let d = map(&m, n.u, n.v);
            let (u, v) = (d.0 + offset.0, d.1 + offset.1);
            inside(u, v).then(|| super::GridNode {
                u,
                v,
                target: Some(spec.node_position(u, v).into()),
                ..*n
            })
        })
        .collect();
    Ok(GridNodeSet {
        nodes,
        ..set.clone()
    })
}
