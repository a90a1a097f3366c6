//! Two-stage disparity refinement network.
//!
//! Stage 1 is a per-tile stack of fully connected layers turning the six
//! pair correlations of a tile (plus its pre-shift) into a 16-vector. Stage 2
//! is one 5x5 convolution over the grid of those vectors and predicts the
//! residual disparity of the center tile relative to its pre-shift.
//!
//! Within a cluster every tile's pre-shift input is taken relative to the
//! center tile, so Stage 1 runs once per cluster member rather than once per
//! tile. Its first layer is linear in that input and is still evaluated only
//! once per tile.

mod checkpoint;
mod features;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use features::{
    predict, tile_features, LabeledScene, Prediction, SceneFeatures, TrainingSample, CROP,
    INPUT_DIM,
};
pub use train::{
    cost, gradient_check, gradient_check_with, split_scenes, train, CostBreakdown, EpochRecord,
    Gradients, Lambdas, TrainConfig, TrainOutcome,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Output widths of the Stage-1 layers; the last one is the feature size.
    pub widths: Vec<usize>,
    /// Leaky-ReLU slope.
    pub alpha: f64,
    pub kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: INPUT_DIM,
            widths: vec![256, 128, 32, 16],
            alpha: 0.1,
            kernel: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("empty network layer".into()));
        }
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(Error::Config("Stage-2 kernel must be odd and >= 3".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// Fully connected layer, `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(fan_in, fan_out),
            b: DVector::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: DMatrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..=bound)),
            b: DVector::zeros(fan_out),
        }
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &self.w;
        for mut row in z.row_iter_mut() {
            row += self.b.transpose();
        }
        z
    }
}

#[inline]
pub fn leaky(z: f64, alpha: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        alpha * z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Net {
    pub layers: Vec<Dense>,
    pub alpha: f64,
}

/// Stage-1 pass over gathered copies of feature rows whose last input is
/// overridden per copy. Kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GatheredTrace {
    /// Feature rows with the last input zeroed.
    pub base_inputs: DMatrix<f64>,
    pub rows: Vec<usize>,
    pub last: Vec<f64>,
    /// Input of every layer after the first, one row per copy.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of every layer, one row per copy.
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Intermediate values of a batched Stage-1 pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Stage1Trace {
    /// Input of every layer (the first is the feature matrix).
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of every layer.
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Stage1Net {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.widths);
        Self {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
            alpha: cfg.alpha,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").w.ncols()
    }

    pub fn trace(&self, x: &DMatrix<f64>) -> Stage1Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(a);
            a = if i < last {
                z.map(|v| leaky(v, self.alpha))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Stage1Trace {
            inputs,
            pre,
            output: a,
        }
    }

    /// Batched forward pass; rows of `x` are tiles.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.trace(x).output
    }

    /// Row `i` of the result is Stage 1 applied to `x[rows[i]]` with its last
    /// input replaced by `last[i]`. The first layer runs once per row of `x`.
    pub fn trace_gathered(&self, x: &DMatrix<f64>, rows: &[usize], last: &[f64]) -> GatheredTrace {
        assert_eq!(rows.len(), last.len());
        let n_last = x.ncols() - 1;
        let mut base_inputs = x.clone();
        base_inputs.column_mut(n_last).fill(0.0);
        let first = &self.layers[0];
        let z_base = first.forward(&base_inputs);
        let w_last = first.w.row(n_last);
        let mut z0 = DMatrix::zeros(rows.len(), first.w.ncols());
        for (i, (&r, &v)) in rows.iter().zip(last).enumerate() {
            let mut row = z0.row_mut(i);
            row.copy_from(&z_base.row(r));
            row += &w_last * v;
        }
        let top = self.layers.len() - 1;
        let act = |z: &DMatrix<f64>, i: usize| {
            if i < top {
                z.map(|v| leaky(v, self.alpha))
            } else {
                z.clone()
            }
        };
        let mut a = act(&z0, 0);
        let mut pre = vec![z0];
        let mut inputs = Vec::with_capacity(top);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let z = layer.forward(&a);
            inputs.push(a);
            a = act(&z, i);
            pre.push(z);
        }
        GatheredTrace {
            base_inputs,
            rows: rows.to_vec(),
            last: last.to_vec(),
            inputs,
            pre,
            output: a,
        }
    }

    /// Accumulate into `grad` the parameter gradient for `d_out`, the
    /// derivative of the cost with respect to `trace.output`.
    pub fn backward_gathered(&self, trace: &GatheredTrace, d_out: DMatrix<f64>, grad: &mut Stage1Net) {
        let top = self.layers.len() - 1;
        let mut d_a = d_out;
        for l in (0..=top).rev() {
            let mut d_z = d_a;
            if l < top {
                let alpha = self.alpha;
                d_z.zip_apply(&trace.pre[l], |d, z| {
                    if z <= 0.0 {
                        *d *= alpha;
                    }
                });
            }
            let g = &mut grad.layers[l];
            for (j, c) in d_z.column_iter().enumerate() {
                g.b[j] += c.sum();
            }
            if l > 0 {
                g.w += trace.inputs[l - 1].transpose() * &d_z;
                d_a = &d_z * self.layers[l].w.transpose();
            } else {
                // fold the copies back onto their source rows
                let n_last = trace.base_inputs.ncols() - 1;
                let mut d_rows = DMatrix::zeros(trace.base_inputs.nrows(), d_z.ncols());
                let mut d_last = DVector::zeros(d_z.ncols());
                for (i, (&r, &v)) in trace.rows.iter().zip(&trace.last).enumerate() {
                    let dz = d_z.row(i);
                    let mut acc = d_rows.row_mut(r);
                    acc += dz;
                    d_last += dz.transpose() * v;
                }
                g.w += trace.base_inputs.transpose() * d_rows;
                let mut wl = g.w.row_mut(n_last);
                wl += d_last.transpose();
                break;
            }
        }
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(Error::Size(format!(
                "{} features for a {}-input network",
                features.len(),
                self.input_dim()
            )));
        }
        let x = DMatrix::from_row_slice(1, features.len(), features);
        Ok(self.forward_batch(&x).row(0).iter().copied().collect())
    }
}

/// Which Stage-1 vectors of the cluster a Stage-2 head sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Main,
    CenterOnly,
    Inner3x3,
}

impl Head {
    #[inline]
    pub fn sees(self, dx: isize, dy: isize) -> bool {
        match self {
            Head::Main => true,
            Head::CenterOnly => dx == 0 && dy == 0,
            Head::Inner3x3 => dx.abs() <= 1 && dy.abs() <= 1,
        }
    }
}

/// Single `kernel x kernel` convolution with `channels` inputs and one output.
/// Weights are indexed `(ky * kernel + kx) * channels + ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Net {
    pub kernel: usize,
    pub channels: usize,
    pub w: Vec<f64>,
    pub b: f64,
}

impl Stage2Net {
    pub fn zeros(kernel: usize, channels: usize) -> Self {
        Self {
            kernel,
            channels,
            w: vec![0.0; kernel * kernel * channels],
            b: 0.0,
        }
    }

    pub fn radius(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// One output from a cluster of `kernel^2` Stage-1 vectors in row-major
    /// order, seen through `head`.
    pub fn forward_cluster(&self, cluster: &[&[f64]], head: Head) -> f64 {
        let r = self.radius();
        let mut acc = self.b;
        for (k, v) in cluster.iter().enumerate() {
            let (dx, dy) = ((k % self.kernel) as isize - r, (k / self.kernel) as isize - r);
            if !head.sees(dx, dy) {
                continue;
            }
            let w = &self.w[k * self.channels..(k + 1) * self.channels];
            acc += w.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    /// Valid (unpadded) convolution over a `cols x rows x channels` grid,
    /// channels fastest.
    pub fn forward_grid(&self, grid: &[f64], cols: usize, rows: usize) -> Result<(usize, usize, Vec<f64>)> {
        let k = self.kernel;
        if grid.len() != cols * rows * self.channels {
            return Err(Error::Size("Stage-2 grid size mismatch".into()));
        }
        if cols < k || rows < k {
            return Err(Error::Size(format!("grid {cols}x{rows} smaller than the kernel")));
        }
        let (oc, or) = (cols - k + 1, rows - k + 1);
        let mut out = Vec::with_capacity(oc * or);
        for y in 0..or {
            for x in 0..oc {
                let cluster: Vec<&[f64]> = (0..k * k)
                    .map(|i| {
                        let (gx, gy) = (x + i % k, y + i / k);
                        let s = (gy * cols + gx) * self.channels;
                        &grid[s..s + self.channels]
                    })
                    .collect();
                out.push(self.forward_cluster(&cluster, Head::Main));
            }
        }
        Ok((oc, or, out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineNet {
    pub config: NetConfig,
    pub stage1: Stage1Net,
    pub stage2: Stage2Net,
}

impl RefineNet {
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            stage1: Stage1Net::zeros(config),
            stage2: Stage2Net::zeros(config.kernel, config.channels()),
        })
    }

    /// Uniform fan-in initialization. Stage 2 starts near zero so that an
    /// untrained network leaves the pre-shift unchanged.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.widths);
        let layers = dims
            .windows(2)
            .map(|d| Dense::uniform(d[0], d[1], (6.0 / d[0] as f64).sqrt(), &mut rng))
            .collect();
        let channels = config.channels();
        let fan_in = (config.kernel * config.kernel * channels) as f64;
        let bound = 0.01 / fan_in.sqrt();
        let stage2 = Stage2Net {
            kernel: config.kernel,
            channels,
            w: (0..config.kernel * config.kernel * channels)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            b: 0.0,
        };
        Ok(Self {
            config: config.clone(),
            stage1: Stage1Net {
                layers,
                alpha: config.alpha,
            },
            stage2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.stage1
            .layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum::<usize>()
            + self.stage2.w.len()
            + 1
    }

    /// All parameters in a fixed order (layer by layer, weights then bias,
    /// Stage 2 last).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.stage1.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(&self.stage2.w);
        out.push(std::slice::from_ref(&self.stage2.b));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.stage1.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(&mut self.stage2.w);
        out.push(std::slice::from_mut(&mut self.stage2.b));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}
