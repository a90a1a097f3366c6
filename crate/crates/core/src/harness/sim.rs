//! Synthetic quadocular scenes: fronto-parallel textured patches over a
//! textured background, rendered analytically for each camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtfuse::{downscale_gt, BimodalParams, GroundTruthGrid};
use crate::image::ImageGrid;
use crate::rectify::ModalityScale;
use crate::tilecorr::{DisparityField, Method, QuadImages, RigGeometry, TileGrid, NUM_CAMERAS};

/// Band-limited random texture: a sum of random-phase sinusoids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureSpec {
    pub seed: u64,
    /// RMS amplitude of the texture.
    pub contrast: f64,
    /// Amplitude falls off as `|f|^-slope`.
    pub slope: f64,
    /// Highest spatial frequency, rad/pixel.
    pub max_freq: f64,
    pub components: usize,
    pub mean: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            contrast: 1.0,
            slope: 1.0,
            max_freq: 1.0,
            components: 24,
            mean: 0.0,
        }
    }
}

/// Precomputed sinusoid table of a texture.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    mean: f64,
}

impl Texture {
    pub fn new(spec: &TextureSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e57_0000);
        let lo = 0.15 * spec.max_freq;
        let mut waves: Vec<(f64, f64, f64, f64)> = (0..spec.components.max(1))
            .map(|_| {
                let ang = rng.gen_range(0.0..std::f64::consts::PI);
                let rad = rng.gen_range(lo..=spec.max_freq);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rad.powf(-spec.slope);
                (rad * ang.cos(), rad * ang.sin(), phase, amp)
            })
            .collect();
        // RMS of a sum of unit sinusoids is sqrt(sum a^2 / 2)
        let rms = (waves.iter().map(|w| w.3 * w.3).sum::<f64>() / 2.0).sqrt();
        for w in &mut waves {
            w.3 *= spec.contrast / rms;
        }
        Self {
            waves,
            mean: spec.mean,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.mean
            + self
                .waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).cos())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePatch {
    pub disparity: f64,
    /// `[x0, y0, x1, y1]` in reference-view pixels.
    pub rect: [f64; 4],
    pub texture: TextureSpec,
}

impl ScenePatch {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.rect[0] && x < self.rect[2] && y >= self.rect[1] && y < self.rect[3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_disparity: f64,
    pub background: TextureSpec,
    pub patches: Vec<ScenePatch>,
    /// Horizontal box blur length in pixels (0 = none).
    pub motion_blur: f64,
    pub noise_sigma: f64,
    /// Relative focal length error of each camera.
    pub focal_error: [f64; NUM_CAMERAS],
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn plane(width: usize, height: usize, disparity: f64, texture: TextureSpec) -> Self {
        Self {
            width,
            height,
            background_disparity: disparity,
            background: texture,
            patches: Vec::new(),
            motion_blur: 0.0,
            noise_sigma: 0.0,
            focal_error: [0.0; NUM_CAMERAS],
            noise_seed: 0,
        }
    }

    pub fn validate(&self, d_max: f64) -> Result<()> {
        let in_range = |d: f64| d.is_finite() && (0.0..=d_max).contains(&d);
        if !in_range(self.background_disparity) {
            return Err(Error::Contract("background disparity outside [0, d_max]".into()));
        }
        for p in &self.patches {
            if !in_range(p.disparity) {
                return Err(Error::Contract("patch disparity outside [0, d_max]".into()));
            }
            if p.disparity < self.background_disparity {
                return Err(Error::Contract("patch behind the background".into()));
            }
            if !(p.rect[2] > p.rect[0] && p.rect[3] > p.rect[1]) {
                return Err(Error::Contract("empty patch rectangle".into()));
            }
        }
        if self.width == 0 || self.height == 0 || self.noise_sigma < 0.0 || self.motion_blur < 0.0 {
            return Err(Error::Contract("bad image size, noise or blur".into()));
        }
        Ok(())
    }
}

/// Four rendered views plus exact ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedQuad {
    pub images: QuadImages,
    /// Ground truth on the tile grid of the rendered images.
    pub gt: GroundTruthGrid,
}

struct Layers {
    // nearest first
    patches: Vec<(ScenePatch, Texture)>,
    background: Texture,
    background_disparity: f64,
}

impl Layers {
    fn new(spec: &SceneSpec) -> Self {
        let mut patches: Vec<(ScenePatch, Texture)> = spec
            .patches
            .iter()
            .map(|p| (p.clone(), Texture::new(&p.texture)))
            .collect();
        patches.sort_by(|a, b| b.0.disparity.total_cmp(&a.0.disparity));
        Self {
            patches,
            background: Texture::new(&spec.background),
            background_disparity: spec.background_disparity,
        }
    }

    /// Radiance seen at pixel `(x, y)` of a camera whose offset (baseline
    /// units) is `off`: the point at reference position `p` shows up at
    /// `p - d * off`.
    fn radiance(&self, x: f64, y: f64, off: (f64, f64)) -> f64 {
        for (p, tex) in &self.patches {
            let (rx, ry) = (x + p.disparity * off.0, y + p.disparity * off.1);
            if p.contains(rx, ry) {
                return tex.eval(rx, ry);
            }
        }
        let d = self.background_disparity;
        self.background.eval(x + d * off.0, y + d * off.1)
    }

    fn disparity_at(&self, x: f64, y: f64) -> f64 {
        self.patches
            .iter()
            .find(|(p, _)| p.contains(x, y))
            .map_or(self.background_disparity, |(p, _)| p.disparity)
    }
}

/// Ground truth sampled on a `ratio`-times denser raster of the reference
/// view, expressed in high-resolution pixels.
pub fn supersampled_disparity(spec: &SceneSpec, ratio: f64) -> Result<DisparityField> {
    let layers = Layers::new(spec);
    let cols = (spec.width as f64 * ratio).round() as usize;
    let rows = (spec.height as f64 * ratio).round() as usize;
    let grid = TileGrid::new(2, 1, cols, rows)?;
    let values: Vec<f64> = (0..grid.len())
        .map(|i| {
            let (c, r) = grid.coords(i);
            let (x, y) = grid.center(c, r);
            layers.disparity_at(x as f64 / ratio, y as f64 / ratio) * ratio
        })
        .collect();
    DisparityField::from_values(grid, &values, Method::GroundTruth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub tile_size: usize,
    /// Oversampling of the ground-truth raster.
    pub gt_scale: ModalityScale,
    pub bimodal: BimodalParams,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            gt_scale: ModalityScale::default(),
            bimodal: BimodalParams::default(),
        }
    }
}

pub fn simulate_quad(spec: &SceneSpec, rig: &RigGeometry, opts: &SimOptions) -> Result<SimulatedQuad> {
    rig.validate()?;
    spec.validate(f64::INFINITY)?;
    let layers = Layers::new(spec);
    let side = (rig.offsets[1].0 - rig.offsets[0].0).abs();
    let (cx, cy) = (
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
    );
    let images: QuadImages = std::array::from_fn(|cam| {
        let off = (rig.offsets[cam].0 / side, rig.offsets[cam].1 / side);
        let zoom = 1.0 + spec.focal_error[cam];
        let mut img = ImageGrid::from_fn(spec.width, spec.height, |x, y| {
            let xs = cx + (x as f64 - cx) / zoom;
            let ys = cy + (y as f64 - cy) / zoom;
            layers.radiance(xs, ys, off)
        });
        img = img.horizontal_box_blur(spec.motion_blur);
        if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed.wrapping_add(cam as u64 * 7919));
            let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
            for v in img.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        img
    });
    let hi = supersampled_disparity(spec, opts.gt_scale.pixel_ratio)?;
    let grid = TileGrid::for_image(spec.width, spec.height, opts.tile_size);
    let gt = downscale_gt(&hi, &opts.gt_scale, &grid, &opts.bimodal)?;
    Ok(SimulatedQuad { images, gt })
}

/// Ranges for randomly generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Difficulty {
    pub width: usize,
    pub height: usize,
    pub max_disparity: f64,
    /// Largest disparity step between a patch and the background.
    pub max_step: f64,
    pub min_patches: usize,
    pub max_patches: usize,
    pub noise_sigma: f64,
    /// Motion blur is drawn uniformly from `[0, max_motion_blur]` for a
    /// `motion_blur_fraction` of the scenes.
    pub max_motion_blur: f64,
    pub motion_blur_fraction: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Relative standard deviation of the camera focal lengths.
    pub focal_rsd: f64,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            max_disparity: 5.0,
            max_step: 1.5,
            min_patches: 1,
            max_patches: 3,
            noise_sigma: 0.32,
            max_motion_blur: 0.0,
            motion_blur_fraction: 0.0,
            min_contrast: 1.0,
            max_contrast: 1.0,
            focal_rsd: 0.0,
        }
    }
}

impl Difficulty {
    /// Noiseless scenes with at most two patches stepping at most 1 px.
    pub fn easy() -> Self {
        Self {
            max_patches: 2,
            max_step: 1.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    /// Noisy scenes on which the polynomial matcher lands near 0.15 px
    /// (the default).
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn random_scene(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = |rng: &mut ChaCha8Rng| TextureSpec {
            seed: rng.gen(),
            contrast: rng.gen_range(self.min_contrast..=self.max_contrast),
            slope: rng.gen_range(0.5..1.5),
            ..TextureSpec::default()
        };
        let background_disparity = rng.gen_range(0.0..=self.max_disparity * 0.5);
        let background = texture(&mut rng);
        let n = rng.gen_range(self.min_patches..=self.max_patches.max(self.min_patches));
        let (w, h) = (self.width as f64, self.height as f64);
        let patches = (0..n)
            .map(|_| {
                let pw = rng.gen_range(0.2 * w..0.6 * w);
                let ph = rng.gen_range(0.2 * h..0.6 * h);
                let x0 = rng.gen_range(-0.1 * w..w - 0.5 * pw);
                let y0 = rng.gen_range(-0.1 * h..h - 0.5 * ph);
                ScenePatch {
                    disparity: rng.gen_range(
                        background_disparity
                            ..=self.max_disparity.min(background_disparity + self.max_step),
                    ),
                    rect: [x0, y0, x0 + pw, y0 + ph],
                    texture: texture(&mut rng),
                }
            })
            .collect();
        let motion_blur = if rng.gen_bool(self.motion_blur_fraction.clamp(0.0, 1.0)) {
            rng.gen_range(0.0..=self.max_motion_blur)
        } else {
            0.0
        };
        let focal_error = std::array::from_fn(|_| {
            if self.focal_rsd > 0.0 {
                Normal::new(0.0, self.focal_rsd).expect("finite rsd").sample(&mut rng)
            } else {
                0.0
            }
        });
        SceneSpec {
            width: self.width,
            height: self.height,
            background_disparity,
            background,
            patches,
            motion_blur,
            noise_sigma: self.noise_sigma,
            focal_error,
            noise_seed: rng.gen(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{forward_dft, inverse_dft, phase_shift, Patch, WindowKind};

    fn rig() -> RigGeometry {
        RigGeometry::lwir_160x120()
    }

    fn opts() -> SimOptions {
        SimOptions::default()
    }

    #[test]
    fn zero_disparity_views_are_identical() {
        let spec = SceneSpec::plane(64, 48, 0.0, TextureSpec::default());
        let q = simulate_quad(&spec, &rig(), &opts()).unwrap();
        for cam in 1..4 {
            assert_eq!(q.images[cam], q.images[0]);
        }
    }

    #[test]
    fn texture_is_band_limited_with_requested_contrast() {
        let spec = TextureSpec {
            seed: 5,
            contrast: 0.3,
            ..TextureSpec::default()
        };
        let t = Texture::new(&spec);
        let n = 256;
        let vals: Vec<f64> = (0..n * n).map(|i| t.eval((i % n) as f64, (i / n) as f64)).collect();
        let rms = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((rms - 0.3).abs() < 0.05, "{rms}");
        assert!(t.waves.iter().all(|w| w.0.hypot(w.1) <= 1.0 + 1e-12));
    }

    #[test]
    fn horizontal_pair_is_an_exact_translation() {
        // a periodic texture lets a whole-patch Fourier shift be exact
        let n = 32;
        let tex = TextureSpec {
            components: 1,
            ..TextureSpec::default()
        };
        let t = Texture::new(&tex);
        let k = 2.0 * std::f64::consts::PI / n as f64;
        let (fx, fy) = ((t.waves[0].0 / k).round() * k, (t.waves[0].1 / k).round() * k);
        let spec = SceneSpec::plane(n, n, 2.0, tex);
        let q = simulate_quad(&spec, &rig(), &SimOptions { tile_size: 16, ..opts() }).unwrap();
        // analytic check: camera 1 sees the plane 2 px to the left of camera 0
        let (l, r) = (&q.images[0], &q.images[1]);
        for y in 0..n {
            for x in 2..n {
                assert!((r.get(x - 2, y) - l.get(x, y)).abs() < 1e-9);
            }
        }
        // and a Fourier phase shift of a periodic version reproduces it
        let a = t.waves[0].3;
        let ph = t.waves[0].2;
        let per = |dx: f64| Patch::from_fn(n, |x, y| a * (fx * (x as f64 + dx) + fy * y as f64 + ph).cos());
        let shifted = inverse_dft(&phase_shift(&forward_dft(&per(0.0), WindowKind::None).unwrap(), -1.0, 0.0).unwrap());
        let direct = per(1.0);
        for (u, v) in shifted.data().iter().zip(direct.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn occluding_patch_yields_bimodal_boundary_tiles() {
        let mut spec = SceneSpec::plane(160, 120, 1.0, TextureSpec::default());
        spec.patches.push(ScenePatch {
            disparity: 4.0,
            rect: [60.0, 40.0, 124.0, 88.0],
            texture: TextureSpec {
                seed: 9,
                ..TextureSpec::default()
            },
        });
        let q = simulate_quad(&spec, &rig(), &opts()).unwrap();
        let gt = &q.gt;
        let inside = gt.get(11, 7).unwrap();
        assert!((inside.disparity - 4.0).abs() < 1e-9 && !inside.bimodal);
        let outside = gt.get(2, 2).unwrap();
        assert!((outside.disparity - 1.0).abs() < 1e-9);
        // the patch edge x = 60 splits the cell [56, 64) in half
        let edge = gt.get(7, 7).unwrap();
        assert!(edge.bimodal, "{edge:?}");
        assert!((edge.disparity - 4.0).abs() < 1e-9);
        assert!((edge.bg.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gt_matches_independent_downscale() {
        let spec = Difficulty {
            max_patches: 4,
            max_step: 5.0,
            noise_sigma: 0.0,
            ..Difficulty::default()
        }
        .random_scene(3);
        let q = simulate_quad(&spec, &rig(), &opts()).unwrap();
        let scale = ModalityScale::new(13.0, 13.0).unwrap();
        let hi = supersampled_disparity(&spec, 13.0).unwrap();
        let other = downscale_gt(&hi, &scale, &q.gt.grid, &BimodalParams::default()).unwrap();
        // a tile covering a single surface reports exactly that surface
        let layers: Vec<f64> = std::iter::once(spec.background_disparity)
            .chain(spec.patches.iter().map(|p| p.disparity))
            .collect();
        let pure = |t: &Option<crate::gtfuse::GroundTruthTile>| {
            t.filter(|t| !t.bimodal && layers.iter().any(|&d| (d - t.disparity).abs() < 1e-9))
        };
        let (mut both, mut one) = (0, 0);
        for (a, b) in q.gt.tiles.iter().zip(&other.tiles) {
            match (pure(a), pure(b)) {
                (Some(a), Some(b)) => {
                    assert!((a.disparity - b.disparity).abs() < 1e-6);
                    both += 1;
                }
                (Some(_), None) | (None, Some(_)) => one += 1,
                _ => {}
            }
        }
        assert!(both > 150 && one <= 6, "{both} {one}");
    }

    #[test]
    fn same_seed_same_scene() {
        let d = Difficulty {
            noise_sigma: 0.1,
            ..Difficulty::default()
        };
        let a = simulate_quad(&d.random_scene(11), &rig(), &opts()).unwrap();
        let b = simulate_quad(&d.random_scene(11), &rig(), &opts()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.gt, b.gt);
        let c = d.random_scene(12);
        assert_ne!(d.random_scene(11), c);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneSpec::plane(64, 48, 2.0, TextureSpec::default());
        spec.patches.push(ScenePatch {
            disparity: 1.0,
            rect: [0.0, 0.0, 10.0, 10.0],
            texture: TextureSpec::default(),
        });
        assert!(spec.validate(10.0).is_err());
        let spec = SceneSpec::plane(64, 48, 8.0, TextureSpec::default());
        assert!(spec.validate(6.7).is_err());
    }
}
