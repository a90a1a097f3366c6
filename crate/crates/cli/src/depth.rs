//! `simulate`, `depth`, `train`, `eval` and `report`.

use std::path::Path;

use qstereo_core::gtfuse::trimmed_rmse;
use qstereo_core::harness::config::HarnessConfig;
use qstereo_core::harness::dataset::{
    generate_dataset, labeled_scenes, load_quad, read_gt, read_report, report_means, run_pipeline, write_report,
    DatasetManifest, Split, GT_FILE,
};
use qstereo_core::harness::io::{read_pfm_raw, write_pfm_planes};
use qstereo_core::refinenet::{load_checkpoint, predict, train as train_net, SceneFeatures};
use qstereo_core::tilecorr::{disparity_map, DisparityField, Method, Seeding, TileGrid};

use crate::{ctx, CmdResult, Failure};

pub fn simulate(cfg: &HarnessConfig, out: &Path) -> CmdResult {
    let m = generate_dataset(out, &cfg.dataset, &cfg.rig, cfg.seed).map_err(ctx(out))?;
    println!(
        "{} scenes ({} train, {} test) in {}",
        m.entries.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

fn read_prior(path: &Path, grid: TileGrid) -> Result<DisparityField, Failure> {
    let (w, h, values) = read_pfm_raw(path).map_err(ctx(path))?;
    if (w, h) != (grid.cols, grid.rows) {
        return Err(Failure::Data(format!(
            "{}: prior is {w}x{h} tiles, the scene has {}x{}",
            path.display(),
            grid.cols,
            grid.rows
        )));
    }
    Ok(DisparityField::from_values(grid, &values, Method::Poly)?)
}

pub fn depth(cfg: &HarnessConfig, scene: &Path, out: &Path, seeding: &str, checkpoint: Option<&Path>) -> CmdResult {
    let quad = load_quad(scene).map_err(ctx(scene))?;
    let grid = TileGrid::for_image(quad[0].width(), quad[0].height(), cfg.tilecorr.tile_size);
    let prior;
    let seeding = match seeding {
        "sweep" => Seeding::Sweep,
        "neighbors" => Seeding::Neighbors,
        s => match s.strip_prefix("prior:") {
            Some(file) => {
                prior = read_prior(Path::new(file), grid)?;
                Seeding::Prior(&prior)
            }
            None => {
                return Err(Failure::Usage(format!(
                    "unknown seeding '{s}', expected sweep, prior:<file> or neighbors"
                )))
            }
        },
    };
    let setup = cfg.match_setup()?;
    let result = disparity_map(&quad, &setup.rig, &setup.budget, seeding, &setup.tilecorr)?;
    let field = match checkpoint {
        Some(p) => {
            let net = load_checkpoint(p).map_err(ctx(p))?;
            predict(&net, &SceneFeatures::from_depth(&result)?)?.field
        }
        None => result.field,
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let (cols, rows) = (field.grid.cols, field.grid.rows);
    write_pfm_planes(&out.join("disparity.pfm"), cols, rows, &[&field.disparity_plane()])?;
    write_pfm_planes(&out.join("confidence.pfm"), cols, rows, &[&field.confidence_plane()])?;
    print!("{} of {} tiles valid", field.valid_count(), field.grid.len());
    let gt_path = scene.join(GT_FILE);
    if gt_path.exists() {
        let gt = read_gt(&gt_path, field.grid).map_err(ctx(&gt_path))?;
        print!(", trimmed rmse {:.4} pix", trimmed_rmse(&field, &gt, cfg.trim)?);
    }
    println!();
    Ok(())
}

pub fn train(cfg: &HarnessConfig, corpus: &Path, out: &Path) -> CmdResult {
    let manifest = DatasetManifest::read(corpus).map_err(ctx(corpus))?;
    let setup = cfg.match_setup()?;
    let train_set = labeled_scenes(&manifest, Split::Train, &setup)?;
    let test_set = labeled_scenes(&manifest, Split::Test, &setup)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(out.to_path_buf());
    let outcome = train_net(&train_set, &test_set, &tc)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{} epochs, train cost {:.6}, test rmse {:.4} pix, weights in {}",
            last.epoch,
            last.train.total,
            last.test_rmse,
            out.join("final.qsnn").display()
        );
    }
    if outcome.aborted {
        return Err(Failure::NoConvergence(
            "loss became non-finite, kept the last finite epoch".into(),
        ));
    }
    Ok(())
}

pub fn eval(cfg: &HarnessConfig, corpus: &Path, checkpoint: Option<&Path>, out: &Path, split: &str) -> CmdResult {
    let split = match split {
        "test" => Split::Test,
        "train" => Split::Train,
        s => return Err(Failure::Usage(format!("unknown split '{s}', expected test or train"))),
    };
    let manifest = DatasetManifest::read(corpus).map_err(ctx(corpus))?;
    let net = match checkpoint {
        Some(p) => Some(load_checkpoint(p).map_err(ctx(p))?),
        None => None,
    };
    let rows = run_pipeline(&manifest, split, &cfg.match_setup()?, net.as_ref(), cfg.trim)?;
    write_report(out, &rows).map_err(ctx(out))?;
    println!("{} scenes scored into {}", rows.len(), out.display());
    Ok(())
}

pub fn report(table: &Path) -> CmdResult {
    let rows = read_report(table).map_err(ctx(table))?;
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!("{:<12} {:>12} {:>12}", "scene", "non-DNN", "DNN");
    for r in &rows {
        println!("{:<12} {:>12} {:>12}", r.scene, cell(Some(r.non_dnn_rmse)), cell(r.dnn_rmse));
    }
    if let Some((poly, dnn)) = report_means(&rows) {
        println!("{:<12} {:>12} {:>12}", "mean", cell(Some(poly)), cell(dnn));
        if let Some(d) = dnn {
            println!("DNN / non-DNN = {:.3}", d / poly);
        }
    }
    Ok(())
}
