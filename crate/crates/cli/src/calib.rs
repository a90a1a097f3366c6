//! `target`, `detect-grid`, `fit-calib` and `mre-report`.
//!
//! A target directory holds `view_NN.pfm` images, the survey log
//! `views.toml` (image name and logged pose of each view) and `truth.toml`
//! with the camera that rendered them. `detect-grid` adds `view_NN.csv` and
//! `view_NN.grid.pfm` next to each image.

use std::path::{Path, PathBuf};

use qstereo_core::calib::{
    align_indices, detect_grid, fit_camera, per_view_mre, read_grid_csv, read_solution, refine_target_nodes,
    render_target, write_grid_csv, write_grid_pfm, write_mre_table, write_solution, CameraSolution, GridNodeSet, Pose,
    RenderParams,
};
use qstereo_core::harness::config::HarnessConfig;
use qstereo_core::harness::io::{read_pfm, write_pfm};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{ctx, CmdResult, Failure};

const LOG: &str = "views.toml";

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    image: String,
    pose: Pose,
}

#[derive(Debug, Serialize, Deserialize)]
struct SurveyLog {
    view: Vec<ViewEntry>,
}

fn read_log(dir: &Path) -> Result<SurveyLog, Failure> {
    let path = dir.join(LOG);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let log: SurveyLog = toml::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if log.view.is_empty() {
        return Err(Failure::Data(format!("{}: no views", path.display())));
    }
    Ok(log)
}

fn grid_csv(dir: &Path, image: &str) -> PathBuf {
    dir.join(Path::new(image).with_extension("csv"))
}

pub fn target(cfg: &HarnessConfig, out: &Path) -> CmdResult {
    let c = &cfg.calib;
    std::fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let survey = c.survey(cfg.seed)?;
    let views: Vec<ViewEntry> = survey
        .par_iter()
        .enumerate()
        .map(|(i, (truth, logged))| {
            let params = RenderParams {
                noise_seed: cfg.seed.wrapping_add(i as u64),
                ..c.render
            };
            let img = render_target(&c.target, truth, &c.camera, &params)?;
            let image = format!("view_{i:02}.pfm");
            write_pfm(&out.join(&image), &img)?;
            Ok(ViewEntry { image, pose: *logged })
        })
        .collect::<qstereo_core::Result<_>>()?;
    let log = SurveyLog { view: views };
    let text = toml::to_string_pretty(&log).map_err(|e| Failure::Data(e.to_string()))?;
    std::fs::write(out.join(LOG), text).map_err(|e| Failure::Data(e.to_string()))?;
    let truth = CameraSolution {
        model: c.camera,
        poses: survey.iter().map(|(t, _)| *t).collect(),
        corrections: Vec::new(),
        mre: 0.0,
    };
    write_solution(&out.join("truth.toml"), &truth)?;
    println!("{} views in {}", log.view.len(), out.display());
    Ok(())
}

pub fn detect(cfg: &HarnessConfig, dir: &Path) -> CmdResult {
    let c = &cfg.calib;
    let nominal = c.nominal_target();
    let log = read_log(dir)?;
    let sets: Vec<GridNodeSet> = log
        .view
        .par_iter()
        .map(|v| {
            let path = dir.join(&v.image);
            let img = read_pfm(&path).map_err(ctx(&path))?;
            let raw = detect_grid(&img, &nominal, &c.detect);
            let set = align_indices(&raw, &nominal, &c.seed_camera, &v.pose).map_err(ctx(&path))?;
            write_grid_csv(&grid_csv(dir, &v.image), &set)?;
            write_grid_pfm(&dir.join(Path::new(&v.image).with_extension("grid.pfm")), &set).map_err(ctx(&path))?;
            Ok(set)
        })
        .collect::<Result<_, Failure>>()?;
    for (v, s) in log.view.iter().zip(&sets) {
        let flag = if s.ambiguous { " (ambiguous)" } else { "" };
        println!("{}: {} nodes{flag}", v.image, s.valid().count());
    }
    Ok(())
}

fn read_sets(dir: &Path) -> Result<Vec<GridNodeSet>, Failure> {
    read_log(dir)?
        .view
        .iter()
        .map(|v| {
            let path = grid_csv(dir, &v.image);
            read_grid_csv(&path).map_err(ctx(&path))
        })
        .collect()
}

pub fn fit(cfg: &HarnessConfig, dir: &Path, out: &Path) -> CmdResult {
    let c = &cfg.calib;
    let nominal = c.nominal_target();
    let sets = read_sets(dir)?;
    let mut report = fit_camera(&sets, &nominal, &c.seed_camera, &c.fit)?;
    if report.converged && c.refine_target {
        report = refine_target_nodes(&report.solution, &sets, &nominal, &c.fit)?;
    }
    write_solution(out, &report.solution).map_err(ctx(out))?;
    let m = &report.solution.model;
    println!(
        "f {:.4}  c ({:.4}, {:.4})  k ({:.6}, {:.6}, {:.6})  mre {:.5} pix  {} iterations",
        m.focal_length, m.principal_point.0, m.principal_point.1, m.k1, m.k2, m.k3, report.solution.mre, report.iterations
    );
    if !report.converged {
        return Err(Failure::NoConvergence(format!("fit stopped after {} iterations", report.iterations)));
    }
    Ok(())
}

pub fn mre_report(cfg: &HarnessConfig, dir: &Path, camera: &Path, out: &Path) -> CmdResult {
    let sol = read_solution(camera).map_err(ctx(camera))?;
    let sets = read_sets(dir)?;
    let rows = per_view_mre(&sol, &sets, &cfg.calib.nominal_target())?;
    write_mre_table(out, &rows).map_err(ctx(out))?;
    let nodes: usize = rows.iter().map(|r| r.0).sum();
    let total = rows.iter().map(|&(n, e)| n as f64 * e).sum::<f64>() / nodes.max(1) as f64;
    println!("{} views, {nodes} nodes, mre {total:.5} pix", rows.len());
    Ok(())
}
