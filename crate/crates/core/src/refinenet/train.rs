use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::features::{predict, LabeledScene, TrainingSample};
use super::{Head, NetConfig, RefineNet};
use crate::error::{Error, Result};
use crate::gtfuse::trimmed_rmse;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    /// Penalty for predictions between foreground and background.
    pub fb: f64,
    /// Center-only auxiliary head.
    pub center: f64,
    /// Inner 3x3 auxiliary head.
    pub inner: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            fb: 0.5,
            center: 0.2,
            inner: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub l2_main: f64,
    pub l2_between: f64,
    pub l2_center_only: f64,
    pub l2_3x3: f64,
    pub lambdas: Lambdas,
    pub total: f64,
}

impl CostBreakdown {
    fn from_terms(t: [f64; 4], lambdas: Lambdas) -> Self {
        Self {
            l2_main: t[0],
            l2_between: t[1],
            l2_center_only: t[2],
            l2_3x3: t[3],
            lambdas,
            total: t[0] + lambdas.fb * t[1] + lambdas.center * t[2] + lambdas.inner * t[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// `max(0, (fg - p)(p - bg)) / (fg - bg)^2` and its derivative in `p`.
fn between_penalty(p: f64, fg: f64, bg: f64) -> (f64, f64) {
    let span2 = (fg - bg) * (fg - bg);
    if span2 == 0.0 {
        return (0.0, 0.0);
    }
    let v = (fg - p) * (p - bg);
    if v > 0.0 {
        (v / span2, (fg + bg - 2.0 * p) / span2)
    } else {
        (0.0, 0.0)
    }
}

/// Gradients have the shape of the network itself.
pub type Gradients = RefineNet;

/// Cost terms of one scene (divided by `norm`) and optionally their gradient.
fn scene_pass(
    net: &RefineNet,
    scene: &LabeledScene,
    samples: &[TrainingSample],
    norm: f64,
    lambdas: Lambdas,
    want_grad: bool,
) -> ([f64; 4], Option<Gradients>) {
    let feats = &scene.features;
    let s2 = &net.stage2;
    let (k, ch) = (s2.kernel, s2.channels);
    let kk = k * k;
    let rad = (k / 2) as isize;
    let tiles: Vec<usize> = samples.iter().map(|s| s.tile).collect();
    let (rows, rel) = feats.gather(&tiles, k);
    let trace = net.stage1.trace_gathered(&feats.matrix, &rows, &rel);
    let ft = trace.output.transpose();
    let col = |r: usize| &ft.as_slice()[r * ch..(r + 1) * ch];
    let mut terms = [0.0; 4];
    let mut grad = want_grad.then(|| RefineNet::zeros(&net.config).expect("valid config"));
    let mut d_out = DMatrix::<f64>::zeros(ch, ft.ncols());
    let heads = [(Head::Main, 1.0), (Head::CenterOnly, lambdas.center), (Head::Inner3x3, lambdas.inner)];
    for (si, s) in samples.iter().enumerate() {
        let cluster: Vec<&[f64]> = (si * kk..(si + 1) * kk).map(col).collect();
        let pre = feats.pre_shift(s.tile);
        let w = s.confidence / norm;
        for (hi, &(head, lambda)) in heads.iter().enumerate() {
            let p = pre + s2.forward_cluster(&cluster, head);
            let e = p - s.gt;
            let mut g = lambda * 2.0 * w * e;
            match hi {
                0 => {
                    terms[0] += w * e * e;
                    if let Some((fg, bg)) = s.fg_bg {
                        let (pen, dpen) = between_penalty(p, fg, bg);
                        terms[1] += w * pen;
                        g += lambdas.fb * w * dpen;
                    }
                }
                1 => terms[2] += w * e * e,
                _ => terms[3] += w * e * e,
            }
            let Some(gr) = grad.as_mut() else { continue };
            if g == 0.0 {
                continue;
            }
            gr.stage2.b += g;
            for i in 0..kk {
                let (dx, dy) = ((i % k) as isize - rad, (i / k) as isize - rad);
                if !head.sees(dx, dy) {
                    continue;
                }
                let r = si * kk + i;
                let wk = &s2.w[i * ch..(i + 1) * ch];
                let gw = &mut gr.stage2.w[i * ch..(i + 1) * ch];
                let fr = col(r);
                let mut dcol = d_out.column_mut(r);
                for c in 0..ch {
                    gw[c] += g * fr[c];
                    dcol[c] += g * wk[c];
                }
            }
        }
    }
    if let Some(gr) = grad.as_mut() {
        net.stage1.backward_gathered(&trace, d_out.transpose(), &mut gr.stage1);
    }
    (terms, grad)
}

fn add_into(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc.param_slices_mut().into_iter().zip(g.param_slices()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn batch_norm(batch: &[(&LabeledScene, Vec<TrainingSample>)]) -> f64 {
    batch
        .iter()
        .flat_map(|(_, s)| s.iter().map(|s| s.confidence))
        .sum()
}

/// Cost and gradient over a batch. Scenes are processed in parallel and
/// reduced in order, so the result does not depend on the thread count.
pub fn loss_and_grad(
    net: &RefineNet,
    batch: &[(&LabeledScene, Vec<TrainingSample>)],
    lambdas: Lambdas,
) -> (CostBreakdown, Gradients) {
    let norm = batch_norm(batch).max(f64::MIN_POSITIVE);
    let parts: Vec<([f64; 4], Option<Gradients>)> = batch
        .par_iter()
        .map(|(scene, samples)| scene_pass(net, scene, samples, norm, lambdas, true))
        .collect();
    let mut terms = [0.0; 4];
    let mut grad = RefineNet::zeros(&net.config).expect("valid config");
    for (t, g) in &parts {
        for i in 0..4 {
            terms[i] += t[i];
        }
        add_into(&mut grad, g.as_ref().expect("requested"));
    }
    (CostBreakdown::from_terms(terms, lambdas), grad)
}

/// Cost of the network over all supervised tiles of the given scenes.
pub fn cost(net: &RefineNet, scenes: &[LabeledScene], lambdas: Lambdas) -> CostBreakdown {
    let batch: Vec<(&LabeledScene, Vec<TrainingSample>)> =
        scenes.iter().map(|s| (s, s.samples())).collect();
    let norm = batch_norm(&batch).max(f64::MIN_POSITIVE);
    let parts: Vec<[f64; 4]> = batch
        .par_iter()
        .map(|(scene, samples)| scene_pass(net, scene, samples, norm, lambdas, false).0)
        .collect();
    let mut terms = [0.0; 4];
    for t in &parts {
        for i in 0..4 {
            terms[i] += t[i];
        }
    }
    CostBreakdown::from_terms(terms, lambdas)
}

/// Compare a gradient function against central differences. Every
/// parameter block is probed at up to `per_block` evenly spaced entries,
/// with a step of 1e-6 times the block's RMS magnitude.
pub fn gradient_check_with(
    net: &RefineNet,
    scenes: &[LabeledScene],
    lambdas: Lambdas,
    per_block: usize,
    grad_fn: impl Fn(&RefineNet) -> Gradients,
) -> f64 {
    let analytic = grad_fn(net);
    let blocks = net.param_slices().len();
    let mut probes: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut probe = net.clone();
    for b in 0..blocks {
        let len = net.param_slices()[b].len();
        let rms = (net.param_slices()[b].iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let h = 1e-6 * rms.max(1e-2);
        let count = per_block.min(len).max(1);
        for j in 0..count {
            let i = j * len / count;
            let orig = net.param_slices()[b][i];
            probe.param_slices_mut()[b][i] = orig + h;
            let up = cost(&probe, scenes, lambdas).total;
            probe.param_slices_mut()[b][i] = orig - h;
            let down = cost(&probe, scenes, lambdas).total;
            probe.param_slices_mut()[b][i] = orig;
            probes.push((b, i, analytic.param_slices()[b][i], (up - down) / (2.0 * h)));
        }
    }
    let scale = probes
        .iter()
        .map(|p| p.2.abs().max(p.3.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    probes
        .iter()
        .map(|&(_, _, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Maximum relative error of the backpropagated gradient.
pub fn gradient_check(net: &RefineNet, scenes: &[LabeledScene], lambdas: Lambdas, per_block: usize) -> f64 {
    gradient_check_with(net, scenes, lambdas, per_block, |n| {
        let batch: Vec<(&LabeledScene, Vec<TrainingSample>)> =
            scenes.iter().map(|s| (s, s.samples())).collect();
        loss_and_grad(n, &batch, lambdas).1
    })
}

/// Deterministic scene-level split: returns (train, test) indices.
pub fn split_scenes(count: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * count as f64).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied at the end of every epoch.
    pub lr_decay: f64,
    pub batch_scenes: usize,
    pub lambdas: Lambdas,
    pub seed: u64,
    /// Where checkpoints and the loss history go (nothing is written if unset).
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 30,
            learning_rate: 1e-3,
            lr_decay: 0.95,
            batch_scenes: 4,
            lambdas: Lambdas::default(),
            seed: 1,
            checkpoint_dir: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: CostBreakdown,
    /// Mean trimmed RMSE (trim 0.1) of the test scenes, NaN without test scenes.
    pub test_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: RefineNet,
    pub history: Vec<EpochRecord>,
    /// Training stopped on a non-finite loss; `net` is the last good state.
    pub aborted: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(net: &RefineNet) -> Self {
        let shapes: Vec<Vec<f64>> = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut RefineNet, grad: &Gradients, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (b, (p, g)) in net.param_slices_mut().into_iter().zip(grad.param_slices()).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
            }
        }
    }
}

pub fn mean_test_rmse(net: &RefineNet, scenes: &[LabeledScene], trim: f64) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in scenes {
        let p = predict(net, &s.features)?;
        total += trimmed_rmse(&p.field, &s.gt, trim)?;
    }
    Ok(total / scenes.len() as f64)
}

fn write_history(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,total,l2_main,l2_between,l2_center_only,l2_3x3,test_rmse")?;
    for r in history {
        let t = &r.train;
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}",
            r.epoch, t.total, t.l2_main, t.l2_between, t.l2_center_only, t.l2_3x3, r.test_rmse
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Mini-batch Adam over scenes. Deterministic for a given seed.
pub fn train(train_set: &[LabeledScene], test_set: &[LabeledScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let mut net = RefineNet::init(&cfg.net, cfg.seed)?;
    if let Some(s) = train_set.iter().find(|s| s.features.input_dim() != cfg.net.input_dim) {
        return Err(Error::Size(format!(
            "scene {} has {} inputs, network expects {}",
            s.id,
            s.features.input_dim(),
            cfg.net.input_dim
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let samples: Vec<Vec<TrainingSample>> = train_set.iter().map(|s| s.samples()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(&net);
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = net.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut aborted = false;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut terms = [0.0; 4];
        let mut weight = 0.0;
        for chunk in order.chunks(cfg.batch_scenes.max(1)) {
            let batch: Vec<(&LabeledScene, Vec<TrainingSample>)> = chunk
                .iter()
                .map(|&i| (&train_set[i], samples[i].clone()))
                .collect();
            let w = batch_norm(&batch);
            if w == 0.0 {
                continue;
            }
            let (c, g) = loss_and_grad(&net, &batch, cfg.lambdas);
            if !c.is_finite() || !g.all_finite() {
                aborted = true;
                break 'epochs;
            }
            for (acc, v) in terms.iter_mut().zip([c.l2_main, c.l2_between, c.l2_center_only, c.l2_3x3]) {
                *acc += v * w;
            }
            weight += w;
            adam.step(&mut net, &g, lr);
            if !net.all_finite() {
                aborted = true;
                break 'epochs;
            }
        }
        lr *= cfg.lr_decay;
        last_good = net.clone();
        let train_cost = CostBreakdown::from_terms(terms.map(|t| t / weight.max(f64::MIN_POSITIVE)), cfg.lambdas);
        history.push(EpochRecord {
            epoch,
            train: train_cost,
            test_rmse: mean_test_rmse(&net, test_set, 0.1)?,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            if epoch % cfg.checkpoint_every.max(1) == 0 || epoch == cfg.epochs {
                save_checkpoint(&dir.join(format!("epoch_{epoch:04}.qsnn")), &net)?;
            }
            write_history(&dir.join("loss_history.csv"), &history)?;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&dir.join("final.qsnn"), &last_good)?;
        write_history(&dir.join("loss_history.csv"), &history)?;
    }
    Ok(TrainOutcome {
        net: last_good,
        history,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtfuse::GroundTruthGrid;
    use crate::refinenet::SceneFeatures;
    use crate::tilecorr::{DisparityField, Method, TileGrid};
    use rand::Rng;

    fn small() -> NetConfig {
        NetConfig {
            input_dim: 6,
            widths: vec![12, 8, 6, 4],
            alpha: 0.1,
            kernel: 5,
        }
    }

    /// Random features; ground truth is a linear function of the center
    /// tile's features, added to its pre-shift.
    fn toy_scene(seed: u64, cols: usize, rows: usize, dim: usize, bimodal: bool) -> LabeledScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TileGrid::new(16, 8, cols, rows).unwrap();
        let pre: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let base = DisparityField::from_values(grid, &pre, Method::Poly).unwrap();
        let feats: Vec<Vec<f64>> = (0..grid.len())
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let coef: Vec<f64> = (0..dim).map(|j| 0.3 * ((j as f64) * 1.3).sin()).collect();
        let gt: Vec<f64> = (0..grid.len())
            .map(|i| pre[i] + feats[i].iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mut gt = GroundTruthGrid::from_values(grid, &gt).unwrap();
        if bimodal {
            for (i, t) in gt.tiles.iter_mut().enumerate() {
                let t = t.as_mut().unwrap();
                t.confidence = 0.3 + 0.7 * ((i % 5) as f64 / 4.0);
                if i % 3 == 0 {
                    t.bimodal = true;
                    t.fg = Some(t.disparity + 0.2);
                    t.bg = Some(t.disparity - 1.5);
                }
            }
        }
        LabeledScene {
            id: format!("toy{seed}"),
            features: SceneFeatures::new(base, feats.into_iter().map(Some).collect()).unwrap(),
            gt,
        }
    }

    #[test]
    fn between_penalty_values() {
        assert!((between_penalty(3.5, 5.0, 2.0).0 - 0.25).abs() < 1e-12);
        assert_eq!(between_penalty(5.0, 5.0, 2.0).0, 0.0);
        assert_eq!(between_penalty(6.0, 5.0, 2.0).0, 0.0);
    }

    #[test]
    fn cost_terms() {
        let scene = toy_scene(1, 6, 6, 6, true);
        let mut net = RefineNet::zeros(&small()).unwrap();
        // a zero network predicts the pre-shift
        let c = cost(&net, std::slice::from_ref(&scene), Lambdas::default());
        assert!(c.l2_main > 0.0 && c.l2_between >= 0.0);
        let l = c.lambdas;
        let sum = c.l2_main + l.fb * c.l2_between + l.center * c.l2_center_only + l.inner * c.l2_3x3;
        assert!((c.total - sum).abs() < 1e-12);
        let none = Lambdas { fb: 0.0, center: 0.0, inner: 0.0 };
        let c0 = cost(&net, std::slice::from_ref(&scene), none);
        assert_eq!(c0.total, c0.l2_main);
        // perfect prediction through the bias when gt == pre-shift + const
        let mut flat = scene.clone();
        for (i, t) in flat.gt.tiles.iter_mut().enumerate() {
            let t = t.as_mut().unwrap();
            t.disparity = flat.features.pre_shift(i) + 0.5;
            t.bimodal = false;
            t.fg = None;
            t.bg = None;
        }
        net.stage2.b = 0.5;
        let c = cost(&net, std::slice::from_ref(&flat), Lambdas::default());
        assert!(c.l2_main < 1e-24 && c.l2_between == 0.0 && c.total < 1e-24);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let scenes = vec![toy_scene(2, 7, 6, 6, true), toy_scene(3, 6, 6, 6, true)];
        let mut net = RefineNet::init(&small(), 9).unwrap();
        // larger Stage-2 weights so every layer receives a real gradient
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        net.stage2.w.iter_mut().for_each(|w| *w = rng.gen_range(-0.3..0.3));
        let err = gradient_check(&net, &scenes, Lambdas::default(), 40);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_check_on_default_layout() {
        let scene = toy_scene(4, 6, 5, crate::refinenet::INPUT_DIM, true);
        let mut net = RefineNet::init(&NetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        net.stage2.w.iter_mut().for_each(|w| *w = rng.gen_range(-0.2..0.2));
        let err = gradient_check(&net, std::slice::from_ref(&scene), Lambdas::default(), 12);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_zero_at_optimum() {
        let mut scene = toy_scene(5, 6, 6, 6, false);
        for (i, t) in scene.gt.tiles.iter_mut().enumerate() {
            t.as_mut().unwrap().disparity = scene.features.pre_shift(i);
        }
        let net = RefineNet::zeros(&small()).unwrap();
        let none = Lambdas { fb: 0.0, center: 0.0, inner: 0.0 };
        let batch = vec![(&scene, scene.samples())];
        let (c, g) = loss_and_grad(&net, &batch, none);
        assert_eq!(c.total, 0.0);
        assert!(g.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let scenes = vec![toy_scene(6, 6, 6, 6, true)];
        let mut net = RefineNet::init(&small(), 2).unwrap();
        net.stage2.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * ((i as f64) * 0.7).sin());
        let err = gradient_check_with(&net, &scenes, Lambdas::default(), 20, |n| {
            let batch = vec![(&scenes[0], scenes[0].samples())];
            let (_, mut g) = loss_and_grad(n, &batch, Lambdas::default());
            // wrong scale on one layer
            g.stage1.layers[1].w *= 1.5;
            g
        });
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn auxiliary_heads_share_stage2() {
        let scene = toy_scene(7, 6, 6, 6, false);
        let mut net = RefineNet::init(&small(), 1).unwrap();
        let before = cost(&net, std::slice::from_ref(&scene), Lambdas::default());
        net.stage2.w[12 * 4] += 0.5; // center weight, seen by every head
        let after = cost(&net, std::slice::from_ref(&scene), Lambdas::default());
        assert_ne!(before.l2_main, after.l2_main);
        assert_ne!(before.l2_center_only, after.l2_center_only);
        assert_ne!(before.l2_3x3, after.l2_3x3);
        net.stage2.w[0] += 0.5; // corner: main head only
        let corner = cost(&net, std::slice::from_ref(&scene), Lambdas::default());
        assert_ne!(corner.l2_main, after.l2_main);
        assert_eq!(corner.l2_center_only, after.l2_center_only);
        assert_eq!(corner.l2_3x3, after.l2_3x3);
    }

    #[test]
    fn learns_linear_toy_mapping() {
        let scenes: Vec<LabeledScene> = (0..4).map(|s| toy_scene(20 + s, 10, 8, 6, false)).collect();
        let cfg = TrainConfig {
            net: NetConfig {
                widths: vec![24, 16, 8, 4],
                ..small()
            },
            epochs: 1500,
            learning_rate: 3e-3,
            lr_decay: 0.997,
            batch_scenes: 4,
            lambdas: Lambdas { fb: 0.0, center: 0.0, inner: 0.0 },
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&scenes, &[], &cfg).unwrap();
        let c = cost(&out.net, &scenes, cfg.lambdas);
        assert!(c.l2_main < 1e-4, "{}", c.l2_main);
        assert!(!out.aborted);
        assert_eq!(out.history.len(), 1500);
    }

    #[test]
    fn shuffled_labels_learn_nothing() {
        let make = |s: u64, shuffle: bool| {
            let mut scene = toy_scene(s, 10, 8, 6, false);
            if shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut resid: Vec<f64> = scene
                    .gt
                    .tiles
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t.unwrap().disparity - scene.features.pre_shift(i))
                    .collect();
                resid.shuffle(&mut rng);
                for (i, t) in scene.gt.tiles.iter_mut().enumerate() {
                    t.as_mut().unwrap().disparity = scene.features.pre_shift(i) + resid[i];
                }
            }
            scene
        };
        let train_set: Vec<LabeledScene> = (0..4).map(|s| make(40 + s, true)).collect();
        let test_set: Vec<LabeledScene> = (0..2).map(|s| make(50 + s, false)).collect();
        let cfg = TrainConfig {
            net: small(),
            epochs: 60,
            learning_rate: 3e-3,
            lambdas: Lambdas { fb: 0.0, center: 0.0, inner: 0.0 },
            ..TrainConfig::default()
        };
        let untrained = mean_test_rmse(&RefineNet::init(&cfg.net, cfg.seed).unwrap(), &test_set, 0.1).unwrap();
        let trained = train(&train_set, &test_set, &cfg).unwrap();
        let after = mean_test_rmse(&trained.net, &test_set, 0.1).unwrap();
        // no real signal: the test error cannot drop well below the untrained one
        assert!(after > 0.8 * untrained, "{after} vs {untrained}");
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (tr, te) = split_scenes(10, 0.8, 4);
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(tr.iter().all(|i| !te.contains(i)));
        assert_eq!(split_scenes(10, 0.8, 4), (tr, te));
    }

    #[test]
    fn training_writes_checkpoints_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![toy_scene(60, 6, 6, 6, true)];
        let cfg = TrainConfig {
            net: small(),
            epochs: 3,
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let out = train(&scenes, &scenes, &cfg).unwrap();
        assert!(dir.path().join("epoch_0002.qsnn").exists());
        let loaded = crate::refinenet::load_checkpoint(&dir.path().join("final.qsnn")).unwrap();
        assert_eq!(loaded.param_count(), out.net.param_count());
        let csv = std::fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,total,l2_main"));
        // same seed, same result
        let again = train(&scenes, &scenes, &TrainConfig { checkpoint_dir: None, ..cfg }).unwrap();
        assert_eq!(again.net, out.net);
    }
}
