//! TOML run configuration. Every section and key is optional; missing keys
//! take the defaults below.
//!
//! ```toml
//! seed = 7
//! trim = 0.1
//!
//! [lens]        # distortion used for the disparity budget
//! d_perc = 15.0
//! fov_radius = 80.0
//!
//! [budget]
//! window = 8.0
//! d_err = 0.05
//! rsd_f = 0.0
//!
//! [dataset]
//! count = 100
//! train_fraction = 0.8
//! [dataset.difficulty]
//! noise_sigma = 0.32
//!
//! [tilecorr]    # matcher settings
//! [train]       # optimizer settings, including [train.net] and [train.lambdas]
//!
//! [calib]       # synthetic target views and the calibration fit
//! views = 6
//! [calib.target]
//! seam = { column = 20, step = [0.0005, 0.0] }
//! ```

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetConfig, MatchSetup};
use crate::calib::{survey_poses, DetectParams, FitParams, Pose, RenderParams, TargetSpec};
use crate::error::{Error, Result};
use crate::rectify::{DistortionModel, RectificationBudget};
use crate::refinenet::TrainConfig;
use crate::tilecorr::{RigGeometry, TileCorrConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensConfig {
    pub d_perc: f64,
    pub fov_radius: f64,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            d_perc: 15.0,
            fov_radius: 80.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Correlation window (tile half-size) in pixels.
    pub window: f64,
    pub d_err: f64,
    pub rsd_f: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            window: 8.0,
            d_err: 0.05,
            rsd_f: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// The physical target, seam included. Detection and fitting use the
    /// same target without the seam.
    pub target: TargetSpec,
    pub render: RenderParams,
    /// Camera that renders the synthetic views.
    pub camera: DistortionModel,
    /// Starting intrinsics of the fit.
    pub seed_camera: DistortionModel,
    pub views: usize,
    /// Target point the survey positions look at, and their distance (m).
    pub center: [f64; 3],
    pub distance: f64,
    /// Standard deviation of the logged camera positions (m) and rotations (rad).
    pub position_sigma: f64,
    pub rotation_sigma: f64,
    pub detect: DetectParams,
    pub fit: FitParams,
    /// Also solve for per-node target corrections.
    pub refine_target: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            target: TargetSpec::default(),
            render: RenderParams::default(),
            camera: DistortionModel::new(300.0, (161.0, 118.5), 200.0)
                .expect("valid camera")
                .with_radial(-0.06, 0.015, -0.002),
            seed_camera: DistortionModel::new(290.0, (159.5, 119.5), 200.0).expect("valid camera"),
            views: 6,
            center: [3.6, 1.5, 0.0],
            distance: 3.0,
            position_sigma: 0.03,
            rotation_sigma: 0.01,
            detect: DetectParams::default(),
            fit: FitParams::default(),
            refine_target: true,
        }
    }
}

impl CalibConfig {
    pub fn nominal_target(&self) -> TargetSpec {
        TargetSpec {
            seam: None,
            ..self.target.clone()
        }
    }

    /// True pose of every view and the pose as logged by the survey, which
    /// is off by the configured noise.
    pub fn survey(&self, seed: u64) -> Result<Vec<(Pose, Pose)>> {
        let pos = Normal::new(0.0, self.position_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let rot = Normal::new(0.0, self.rotation_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |n: &Normal<f64>| Vector3::from_fn(|_, _| n.sample(&mut rng));
        let center = Vector3::from(self.center);
        Ok(survey_poses(center, self.distance, self.views)
            .into_iter()
            .map(|p| {
                let logged = Pose::new(Vector3::from(p.rotation) + jitter(&rot), p.t() + jitter(&pos));
                (p, logged)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    /// Fraction of worst tiles dropped from each scene's RMSE.
    pub trim: f64,
    pub rig: RigGeometry,
    pub lens: LensConfig,
    pub budget: BudgetConfig,
    pub dataset: DatasetConfig,
    pub tilecorr: TileCorrConfig,
    pub train: TrainConfig,
    pub calib: CalibConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trim: 0.1,
            rig: RigGeometry::lwir_160x120(),
            lens: LensConfig::default(),
            budget: BudgetConfig::default(),
            dataset: DatasetConfig::default(),
            tilecorr: TileCorrConfig::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config("trim must be within [0, 0.5)".into()));
        }
        self.rig.validate()?;
        self.train.net.validate()?;
        self.budget()?;
        self.calib.target.validate()?;
        self.calib.camera.validate()?;
        self.calib.seed_camera.validate()?;
        if self.calib.views == 0 || !(self.calib.distance > 0.0) {
            return Err(Error::Config("calib needs at least one view at a positive distance".into()));
        }
        if !(self.calib.position_sigma >= 0.0 && self.calib.rotation_sigma >= 0.0) {
            return Err(Error::Config("survey noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> Result<RectificationBudget> {
        let lens = DistortionModel::from_percent(self.lens.d_perc, self.lens.fov_radius)?;
        RectificationBudget::new(self.budget.window, self.budget.d_err, self.budget.rsd_f, &lens, None)
    }

    pub fn match_setup(&self) -> Result<MatchSetup> {
        Ok(MatchSetup {
            rig: self.rig.clone(),
            budget: self.budget()?,
            tilecorr: self.tilecorr,
        })
    }
}
