//! Differential rectification budget and the radial distortion model.
//!
//! Images from all cameras of a rig are only partially rectified to a common
//! distortion model, so a scale mismatch between the two patches of a pair
//! turns into a disparity error. The functions here relate the correlation
//! window, the tolerated disparity error, lens focal-length spread and lens
//! distortion to the largest disparity the matcher can handle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radial distortion around the principal point:
/// `p' = c + (p - c) * (1 + k1*rho^2 + k2*rho^4 + k3*rho^6)`, `rho = |p - c| / fov_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    /// Barrel/pincushion magnitude in percent, used by the budget formulas.
    #[serde(default)]
    pub d_perc: f64,
    pub fov_radius: f64,
}

const MAX_UNDISTORT_ITER: usize = 50;

impl DistortionModel {
    pub fn new(focal_length: f64, principal_point: (f64, f64), fov_radius: f64) -> Result<Self> {
        let m = Self {
            focal_length,
            principal_point,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            d_perc: 0.0,
            fov_radius,
        };
        m.validate()?;
        Ok(m)
    }

    /// Budget-only model: distortion percent and FOV radius.
    pub fn from_percent(d_perc: f64, fov_radius: f64) -> Result<Self> {
        let m = Self {
            focal_length: 1.0,
            principal_point: (0.0, 0.0),
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            d_perc,
            fov_radius,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_radial(mut self, k1: f64, k2: f64, k3: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self.d_perc = self.radial_percent();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.focal_length,
            self.principal_point.0,
            self.principal_point.1,
            self.k1,
            self.k2,
            self.k3,
            self.d_perc,
            self.fov_radius,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Contract("non-finite distortion parameter".into()));
        }
        if self.focal_length <= 0.0 {
            return Err(Error::Contract("focal length must be positive".into()));
        }
        if self.fov_radius <= 0.0 {
            return Err(Error::Contract("FOV radius must be positive".into()));
        }
        if self.d_perc.abs() > 50.0 {
            return Err(Error::Contract(format!(
                "distortion {}% outside +/-50%",
                self.d_perc
            )));
        }
        Ok(())
    }

    /// Radial displacement at `rho = 1` as a percentage of the FOV radius.
    pub fn radial_percent(&self) -> f64 {
        100.0 * (self.k1 + self.k2 + self.k3)
    }

    #[inline]
    pub fn radial_factor(&self, rho2: f64) -> f64 {
        1.0 + rho2 * (self.k1 + rho2 * (self.k2 + rho2 * self.k3))
    }

    pub fn apply_distortion(&self, p: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = self.principal_point;
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        let rho2 = (dx * dx + dy * dy) / (self.fov_radius * self.fov_radius);
        let f = self.radial_factor(rho2);
        (cx + dx * f, cy + dy * f)
    }

    /// Inverse of [`apply_distortion`](Self::apply_distortion). Solves the
    /// radial equation `s * factor(s^2) = rho_d` by damped Newton steps.
    pub fn undistort(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let (cx, cy) = self.principal_point;
        let (tx, ty) = (p.0 - cx, p.1 - cy);
        let rho_d = tx.hypot(ty) / self.fov_radius;
        if rho_d == 0.0 {
            return Ok(p);
        }
        let residual = |s: f64| s * self.radial_factor(s * s) - rho_d;
        let mut s = rho_d;
        let mut g = residual(s);
        for _ in 0..MAX_UNDISTORT_ITER {
            if (g * self.fov_radius).abs() < 1e-9 {
                let scale = s / rho_d;
                return Ok((cx + tx * scale, cy + ty * scale));
            }
            let s2 = s * s;
            let slope = self.radial_factor(s2)
                + 2.0 * s2 * (self.k1 + s2 * (2.0 * self.k2 + 3.0 * s2 * self.k3));
            if !(slope.is_finite() && slope.abs() > 1e-12) {
                break;
            }
            let step = g / slope;
            let mut damping = 1.0;
            loop {
                let candidate = s - damping * step;
                let gc = residual(candidate);
                if candidate > 0.0 && gc.abs() < g.abs() {
                    s = candidate;
                    g = gc;
                    break;
                }
                damping *= 0.5;
                if damping < 1e-6 {
                    return Err(Error::Divergence(format!(
                        "undistort of ({:.3}, {:.3}) stalled",
                        p.0, p.1
                    )));
                }
            }
        }
        Err(Error::Divergence(format!(
            "undistort of ({:.3}, {:.3}) did not converge",
            p.0, p.1
        )))
    }
}

/// Disparity error (pixels) caused by a relative scale mismatch over a
/// correlation window of `w` pixels.
pub fn disparity_error_from_mismatch(k_diff: f64, w: f64) -> Result<f64> {
    check_window(w)?;
    check_finite(k_diff)?;
    Ok(k_diff * w / 2.0)
}

/// Scale mismatch allowed for a target disparity error.
pub fn allowed_mismatch(d_err: f64, w: f64) -> Result<f64> {
    check_window(w)?;
    check_finite(d_err)?;
    Ok(2.0 * d_err / w)
}

/// Scale mismatch introduced by disparity `d` under the model's distortion.
pub fn disparity_mismatch(model: &DistortionModel, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Contract("disparity must be non-negative".into()));
    }
    Ok(model.d_perc.abs() / 100.0 * d / model.fov_radius)
}

/// Largest disparity keeping the distortion-induced mismatch within `k_disp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisparityLimit {
    Finite(f64),
    /// Distortion-free model: any disparity is acceptable.
    Unbounded,
}

impl DisparityLimit {
    pub fn value(self) -> f64 {
        match self {
            DisparityLimit::Finite(v) => v,
            DisparityLimit::Unbounded => f64::INFINITY,
        }
    }
}

pub fn max_differential_disparity(model: &DistortionModel, k_disp: f64) -> Result<DisparityLimit> {
    check_finite(k_disp)?;
    if k_disp < 0.0 {
        return Err(Error::Contract("K_disp must be non-negative".into()));
    }
    if model.d_perc == 0.0 {
        return Ok(DisparityLimit::Unbounded);
    }
    Ok(DisparityLimit::Finite(
        model.fov_radius * (100.0 / model.d_perc.abs()) * k_disp,
    ))
}

/// Lens-induced mismatch is estimated by the relative spread of focal lengths.
pub fn lens_mismatch_from_rsd(rsd_f: f64) -> Result<f64> {
    check_finite(rsd_f)?;
    if rsd_f < 0.0 {
        return Err(Error::Contract("RSD must be non-negative".into()));
    }
    Ok(rsd_f)
}

/// Pixel ratio between a high-resolution and a low-resolution modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityScale {
    pub pixel_ratio: f64,
    pub range_error_ratio: f64,
}

impl Default for ModalityScale {
    fn default() -> Self {
        Self {
            pixel_ratio: 12.8,
            range_error_ratio: 13.0,
        }
    }
}

impl ModalityScale {
    pub fn new(pixel_ratio: f64, range_error_ratio: f64) -> Result<Self> {
        if !(pixel_ratio > 1.0 && range_error_ratio > 1.0) {
            return Err(Error::Contract("modality ratios must exceed 1".into()));
        }
        Ok(Self {
            pixel_ratio,
            range_error_ratio,
        })
    }
}

pub fn cross_modality_disparity(scale: &ModalityScale, d_low: f64) -> f64 {
    d_low * scale.pixel_ratio
}

/// Complete error budget for one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectificationBudget {
    pub w: f64,
    pub d_err: f64,
    pub k_diff: f64,
    pub k_lens: f64,
    pub k_disp: f64,
    pub rsd_f: f64,
    pub d_max: DisparityLimit,
}

impl RectificationBudget {
    /// `k_disp` defaults to the whole allowed mismatch when `None`.
    pub fn new(
        w: f64,
        d_err: f64,
        rsd_f: f64,
        model: &DistortionModel,
        k_disp: Option<f64>,
    ) -> Result<Self> {
        if d_err < 0.0 {
            return Err(Error::Contract("d_err must be non-negative".into()));
        }
        let k_diff = allowed_mismatch(d_err, w)?;
        let k_lens = lens_mismatch_from_rsd(rsd_f)?;
        let k_disp = k_disp.unwrap_or(k_diff);
        let d_max = max_differential_disparity(model, k_disp)?;
        Ok(Self {
            w,
            d_err,
            k_diff,
            k_lens,
            k_disp,
            rsd_f,
            d_max,
        })
    }

    pub fn lens_within_budget(&self) -> bool {
        self.k_lens <= self.k_diff
    }

    pub fn combined_within_budget(&self) -> bool {
        self.k_lens + self.k_disp <= self.k_diff
    }

    pub fn d_max_value(&self) -> f64 {
        self.d_max.value()
    }
}

/// Printable budget for one or more modalities.
#[derive(Debug, Clone)]
pub struct BudgetReport {
    pub rows: Vec<(String, DistortionModel, RectificationBudget)>,
    pub cross: Option<(ModalityScale, String, String)>,
}

impl BudgetReport {
    pub fn all_lenses_within_budget(&self) -> bool {
        self.rows.iter().all(|(_, _, b)| b.lens_within_budget())
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>6} {:>7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>10} {:>6}",
            "modality", "w", "d_err", "K_diff", "K_lens", "K_disp", "D_perc", "r", "d_max", "lens"
        )?;
        for (name, m, b) in &self.rows {
            let d_max = match b.d_max {
                DisparityLimit::Finite(v) => format!("{v:.2}"),
                DisparityLimit::Unbounded => "inf".to_string(),
            };
            writeln!(
                f,
                "{:<10} {:>6.1} {:>7.3} {:>8.3}% {:>8.3}% {:>8.3}% {:>7.1}% {:>8.1} {:>10} {:>6}",
                name,
                b.w,
                b.d_err,
                100.0 * b.k_diff,
                100.0 * b.k_lens,
                100.0 * b.k_disp,
                m.d_perc,
                m.fov_radius,
                d_max,
                if b.lens_within_budget() { "ok" } else { "OVER" }
            )?;
        }
        if let Some((scale, low, high)) = &self.cross {
            let lo = self.rows.iter().find(|r| &r.0 == low);
            let hi = self.rows.iter().find(|r| &r.0 == high);
            if let (Some(lo), Some(hi)) = (lo, hi) {
                let mapped = cross_modality_disparity(scale, lo.2.d_max_value());
                writeln!(
                    f,
                    "d_max({low}) = {:.2} pix -> {:.2} pix of {high} (ratio {}), {high} d_max = {:.2}: {}",
                    lo.2.d_max_value(),
                    mapped,
                    scale.pixel_ratio,
                    hi.2.d_max_value(),
                    if mapped <= hi.2.d_max_value() { "ok" } else { "exceeds" }
                )?;
            }
        }
        Ok(())
    }
}

fn check_window(w: f64) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::Contract("window must be positive".into()));
    }
    Ok(())
}

fn check_finite(v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Contract("non-finite input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mismatch_to_error() {
        assert_abs_diff_eq!(disparity_error_from_mismatch(0.0125, 8.0).unwrap(), 0.05, epsilon = 1e-15);
        assert_eq!(disparity_error_from_mismatch(0.0, 16.0).unwrap(), 0.0);
        assert_abs_diff_eq!(disparity_error_from_mismatch(0.02, 16.0).unwrap(), 0.16, epsilon = 1e-15);
        assert!(disparity_error_from_mismatch(0.01, 0.0).is_err());
    }

    #[test]
    fn error_to_mismatch() {
        assert_abs_diff_eq!(allowed_mismatch(0.05, 8.0).unwrap(), 0.0125, epsilon = 1e-15);
        assert_eq!(allowed_mismatch(0.0, 8.0).unwrap(), 0.0);
        assert_abs_diff_eq!(allowed_mismatch(0.1, 16.0).unwrap(), 0.0125, epsilon = 1e-15);
    }

    #[test]
    fn distortion_mismatch() {
        let rgb = DistortionModel::from_percent(10.0, 1296.0).unwrap();
        assert_abs_diff_eq!(disparity_mismatch(&rgb, 162.0).unwrap(), 0.0125, epsilon = 1e-12);
        assert_eq!(disparity_mismatch(&rgb, 0.0).unwrap(), 0.0);
        let lwir = DistortionModel::from_percent(15.0, 80.0).unwrap();
        assert_abs_diff_eq!(disparity_mismatch(&lwir, 3.35).unwrap(), 0.15 * 3.35 / 80.0, epsilon = 1e-15);
        assert_abs_diff_eq!(disparity_mismatch(&lwir, 3.35).unwrap(), 0.00628, epsilon = 5e-6);
        assert!(disparity_mismatch(&lwir, -1.0).is_err());
    }

    #[test]
    fn d_max_values() {
        let rgb = DistortionModel::from_percent(10.0, 1296.0).unwrap();
        assert_abs_diff_eq!(max_differential_disparity(&rgb, 0.0125).unwrap().value(), 162.0, epsilon = 1e-9);
        let lwir = DistortionModel::from_percent(15.0, 80.0).unwrap();
        let d = max_differential_disparity(&lwir, 0.0125).unwrap().value();
        assert!((d - 6.7).abs() <= 0.05, "{d}");
        assert_eq!(max_differential_disparity(&lwir, 0.0).unwrap().value(), 0.0);
        let ideal = DistortionModel::from_percent(0.0, 80.0).unwrap();
        assert_eq!(
            max_differential_disparity(&ideal, 0.0125).unwrap(),
            DisparityLimit::Unbounded
        );
    }

    #[test]
    fn lens_budget() {
        let m = DistortionModel::from_percent(10.0, 1296.0).unwrap();
        let rgb = RectificationBudget::new(8.0, 0.05, 0.00027, &m, None).unwrap();
        assert!(rgb.lens_within_budget());
        let lwir = RectificationBudget::new(8.0, 0.05, 0.017, &m, None).unwrap();
        assert!(!lwir.lens_within_budget());
        assert_eq!(lens_mismatch_from_rsd(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(rgb.k_diff, 0.0125, epsilon = 1e-15);
    }

    #[test]
    fn modality_mapping() {
        let s = ModalityScale::default();
        assert_abs_diff_eq!(cross_modality_disparity(&s, 1.0), 12.8, epsilon = 1e-12);
        assert_eq!(cross_modality_disparity(&s, 0.0), 0.0);
        assert_abs_diff_eq!(cross_modality_disparity(&s, 6.7), 85.76, epsilon = 1e-9);
        assert!(ModalityScale::new(1.0, 13.0).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(DistortionModel::new(0.0, (0.0, 0.0), 10.0).is_err());
        assert!(DistortionModel::new(100.0, (0.0, 0.0), 0.0).is_err());
        assert!(DistortionModel::from_percent(60.0, 10.0).is_err());
    }

    #[test]
    fn distortion_identity_cases() {
        let m = DistortionModel::new(100.0, (80.0, 60.0), 100.0).unwrap();
        assert_eq!(m.apply_distortion((10.0, 20.0)), (10.0, 20.0));
        let k = m.with_radial(0.1, -0.05, 0.01);
        assert_eq!(k.apply_distortion((80.0, 60.0)), (80.0, 60.0));
        assert_eq!(k.undistort((80.0, 60.0)).unwrap(), (80.0, 60.0));
    }

    #[test]
    fn round_trip_at_unit_radius() {
        let m = DistortionModel::new(100.0, (80.0, 60.0), 100.0)
            .unwrap()
            .with_radial(0.05, 0.0, 0.0);
        let p = (80.0 + 60.0, 60.0 + 80.0); // rho = 1
        let d = m.apply_distortion(p);
        let u = m.undistort(d).unwrap();
        assert!((u.0 - p.0).hypot(u.1 - p.1) < 1e-6);
        assert_abs_diff_eq!(m.d_perc, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn undistort_reports_divergence() {
        // pathological: the factor crosses zero inside the domain
        let m = DistortionModel::new(100.0, (0.0, 0.0), 10.0)
            .unwrap()
            .with_radial(-1.5, 0.0, 0.0);
        assert!(matches!(m.undistort((9.0, 9.0)), Err(Error::Divergence(_))));
    }

    proptest! {
        #[test]
        fn eq1_eq2_inverse(k in 0.0f64..0.5, w in 0.5f64..64.0) {
            let e = disparity_error_from_mismatch(k, w).unwrap();
            let back = allowed_mismatch(e, w).unwrap();
            prop_assert!((back - k).abs() <= 1e-12 * k.max(1e-3));
        }

        #[test]
        fn d_max_monotone(r in 10.0f64..2000.0, dp in 1.0f64..40.0, k in 0.001f64..0.05) {
            let base = max_differential_disparity(&DistortionModel::from_percent(dp, r).unwrap(), k).unwrap().value();
            let more_r = max_differential_disparity(&DistortionModel::from_percent(dp, r * 1.1).unwrap(), k).unwrap().value();
            let more_k = max_differential_disparity(&DistortionModel::from_percent(dp, r).unwrap(), k * 1.1).unwrap().value();
            let more_d = max_differential_disparity(&DistortionModel::from_percent(dp * 1.1, r).unwrap(), k).unwrap().value();
            prop_assert!(more_r > base && more_k > base && more_d < base);
        }

        #[test]
        fn within_d_max_mismatch_in_budget(r in 10.0f64..2000.0, dp in 1.0f64..40.0, k in 0.001f64..0.05) {
            let m = DistortionModel::from_percent(dp, r).unwrap();
            let dmax = max_differential_disparity(&m, k).unwrap().value();
            for i in 0..=20 {
                let d = dmax * i as f64 / 20.0;
                prop_assert!(disparity_mismatch(&m, d).unwrap() <= k * (1.0 + 1e-12));
            }
        }

        #[test]
        fn distort_round_trip(k1 in -0.2f64..0.2, k2 in -0.1f64..0.1, rho in 0.0f64..1.0, ang in 0.0f64..6.283) {
            let m = DistortionModel::new(500.0, (320.0, 240.0), 400.0).unwrap().with_radial(k1, k2, 0.0);
            let p = (320.0 + 400.0 * rho * ang.cos(), 240.0 + 400.0 * rho * ang.sin());
            let u = m.undistort(m.apply_distortion(p)).unwrap();
            prop_assert!((u.0 - p.0).hypot(u.1 - p.1) < 1e-6);
        }
    }
}
