//! `budget`: disparity budget table of a rig description.
//!
//! ```toml
//! [[modality]]
//! name = "lwir"
//! d_perc = 15.0
//! fov_radius = 80.0
//! rsd_f = 0.017
//!
//! [cross]            # optional
//! low = "lwir"
//! high = "rgb"
//! pixel_ratio = 12.8
//! range_error_ratio = 13.0
//! ```

use std::path::Path;

use qstereo_core::harness::config::HarnessConfig;
use qstereo_core::rectify::{disparity_error_from_mismatch, BudgetReport, DistortionModel, ModalityScale, RectificationBudget};
use serde::Deserialize;

use crate::{ctx, CmdResult, Failure};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Modality {
    name: String,
    d_perc: f64,
    fov_radius: f64,
    #[serde(default)]
    rsd_f: f64,
    window: Option<f64>,
    d_err: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Cross {
    low: String,
    high: String,
    pixel_ratio: f64,
    range_error_ratio: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Rig {
    modality: Vec<Modality>,
    cross: Option<Cross>,
}

/// A 2592-pixel-wide visible quad next to the thermal quad of the run
/// configuration.
fn default_rig(cfg: &HarnessConfig) -> Rig {
    Rig {
        modality: vec![
            Modality {
                name: "rgb".into(),
                d_perc: 10.0,
                fov_radius: 1296.0,
                rsd_f: 0.0,
                window: None,
                d_err: None,
            },
            Modality {
                name: "lwir".into(),
                d_perc: cfg.lens.d_perc,
                fov_radius: cfg.lens.fov_radius,
                rsd_f: cfg.budget.rsd_f,
                window: None,
                d_err: None,
            },
        ],
        cross: Some(Cross {
            low: "lwir".into(),
            high: "rgb".into(),
            pixel_ratio: 12.8,
            range_error_ratio: 13.0,
        }),
    }
}

pub fn run(cfg: &HarnessConfig, rig: Option<&Path>) -> CmdResult {
    let rig = match rig {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<Rig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => default_rig(cfg),
    };
    let mut rows = Vec::new();
    for m in &rig.modality {
        let model = DistortionModel::from_percent(m.d_perc, m.fov_radius).map_err(|e| Failure::Usage(format!("{}: {e}", m.name)))?;
        let w = m.window.unwrap_or(cfg.budget.window);
        let d_err = m.d_err.unwrap_or(cfg.budget.d_err);
        let b = RectificationBudget::new(w, d_err, m.rsd_f, &model, None).map_err(|e| Failure::Usage(format!("{}: {e}", m.name)))?;
        rows.push((m.name.clone(), model, b));
    }
    let cross = match rig.cross {
        Some(c) => Some((
            ModalityScale::new(c.pixel_ratio, c.range_error_ratio).map_err(|e| Failure::Usage(e.to_string()))?,
            c.low,
            c.high,
        )),
        None => None,
    };
    let report = BudgetReport { rows, cross };
    print!("{report}");
    for (name, _, b) in &report.rows {
        let back = disparity_error_from_mismatch(b.k_diff, b.w).map_err(ctx(Path::new(name)))?;
        println!("{name}: d_err = {back:.3} pix at K_diff = {:.3}%, w = {}", 100.0 * b.k_diff, b.w);
    }
    if !report.all_lenses_within_budget() {
        return Err(Failure::Data("focal-length spread exceeds the allowed scale mismatch".into()));
    }
    Ok(())
}
