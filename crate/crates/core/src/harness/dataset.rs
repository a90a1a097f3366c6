//! Synthetic corpora on disk and the per-scene evaluation pipeline.
//!
//! A corpus directory holds one sub-directory per scene with the four camera
//! images (`cam0.pfm` .. `cam3.pfm`) and a four-plane ground truth
//! (`gt.pfm`: disparity, confidence, foreground, background), plus
//! `manifest.csv` listing every scene with its split and seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{read_pfm, read_pfm_planes, write_pfm, write_pfm_planes};
use super::sim::{simulate_quad, Difficulty, SimOptions};
use crate::error::{Error, Result};
use crate::gtfuse::{trimmed_rmse, GroundTruthGrid, GroundTruthTile};
use crate::refinenet::{predict, split_scenes, LabeledScene, RefineNet, SceneFeatures};
use crate::rectify::RectificationBudget;
use crate::tilecorr::{disparity_map, DepthResult, QuadImages, RigGeometry, Seeding, TileCorrConfig, TileGrid};

pub const MANIFEST: &str = "manifest.csv";
pub const GT_FILE: &str = "gt.pfm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene: String,
    pub split: Split,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    /// Directory relative to the manifest.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(root.join(MANIFEST)).map_err(csv_err)?;
        let entries = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(csv_err)?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn write(&self) -> Result<()> {
        let mut w = csv::Writer::from_path(self.root.join(MANIFEST)).map_err(csv_err)?;
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn scene_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.dir)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub train_fraction: f64,
    pub difficulty: Difficulty,
    pub sim: SimOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 100,
            train_fraction: 0.8,
            difficulty: Difficulty::standard(),
            sim: SimOptions::default(),
        }
    }
}

/// Per-scene seeds drawn from the corpus seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

pub fn write_gt(path: &Path, gt: &GroundTruthGrid) -> Result<()> {
    let plane = |f: fn(&GroundTruthTile) -> f64| -> Vec<f64> {
        gt.tiles.iter().map(|t| t.as_ref().map_or(f64::NAN, f)).collect()
    };
    let disparity = plane(|t| t.disparity);
    let confidence = plane(|t| t.confidence);
    let fg = plane(|t| t.fg.unwrap_or(f64::NAN));
    let bg = plane(|t| t.bg.unwrap_or(f64::NAN));
    write_pfm_planes(path, gt.grid.cols, gt.grid.rows, &[&disparity, &confidence, &fg, &bg])
}

pub fn read_gt(path: &Path, grid: TileGrid) -> Result<GroundTruthGrid> {
    let (w, h, planes) = read_pfm_planes(path, 4)?;
    if (w, h) != (grid.cols, grid.rows) {
        return Err(Error::Format(format!(
            "ground truth is {w}x{h} tiles, expected {}x{}",
            grid.cols, grid.rows
        )));
    }
    let opt = |v: f64| v.is_finite().then_some(v);
    let tiles = (0..grid.len())
        .map(|i| {
            opt(planes[0][i]).map(|d| {
                let (fg, bg) = (opt(planes[2][i]), opt(planes[3][i]));
                GroundTruthTile {
                    disparity: d,
                    confidence: planes[1][i],
                    bimodal: fg.is_some() && bg.is_some(),
                    fg,
                    bg,
                }
            })
        })
        .collect();
    Ok(GroundTruthGrid { grid, tiles })
}

/// Render a corpus into `root`. The output depends only on `cfg` and `seed`.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig, rig: &RigGeometry, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction must be within [0, 1]".into()));
    }
    std::fs::create_dir_all(root)?;
    let seeds = scene_seeds(seed, cfg.count);
    let (train, _) = split_scenes(cfg.count, cfg.train_fraction, seed);
    let d = &cfg.difficulty;
    let entries = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let spec = d.random_scene(s);
            let quad = simulate_quad(&spec, rig, &cfg.sim)?;
            let dir = format!("scene_{i:04}");
            let path = root.join(&dir);
            std::fs::create_dir_all(&path)?;
            for (c, im) in quad.images.iter().enumerate() {
                write_pfm(&path.join(format!("cam{c}.pfm")), im)?;
            }
            write_gt(&path.join(GT_FILE), &quad.gt)?;
            Ok(ManifestEntry {
                scene: dir.clone(),
                split: if train.binary_search(&i).is_ok() {
                    Split::Train
                } else {
                    Split::Test
                },
                seed: s,
                width: d.width,
                height: d.height,
                tile_size: cfg.sim.tile_size,
                dir,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

pub fn load_quad(dir: &Path) -> Result<QuadImages> {
    let images: Vec<_> = (0..4)
        .map(|c| read_pfm(&dir.join(format!("cam{c}.pfm"))))
        .collect::<Result<_>>()?;
    Ok(images.try_into().expect("four cameras"))
}

pub fn load_scene(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<(QuadImages, GroundTruthGrid)> {
    let dir = manifest.scene_dir(entry);
    let quad = load_quad(&dir)?;
    let grid = TileGrid::for_image(entry.width, entry.height, entry.tile_size);
    let gt = read_gt(&dir.join(GT_FILE), grid)?;
    Ok((quad, gt))
}

/// What the matcher needs besides the images.
#[derive(Debug, Clone)]
pub struct MatchSetup {
    pub rig: RigGeometry,
    pub budget: RectificationBudget,
    pub tilecorr: TileCorrConfig,
}

impl MatchSetup {
    pub fn depth(&self, quad: &QuadImages) -> Result<DepthResult> {
        disparity_map(quad, &self.rig, &self.budget, Seeding::Sweep, &self.tilecorr)
    }
}

/// Run the matcher on the scenes of one split and attach their ground truth.
pub fn labeled_scenes(manifest: &DatasetManifest, split: Split, setup: &MatchSetup) -> Result<Vec<LabeledScene>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let (quad, gt) = load_scene(manifest, e)?;
            let depth = setup.depth(&quad)?;
            if depth.field.grid != gt.grid {
                return Err(Error::Size(format!("{}: ground truth grid mismatch", e.scene)));
            }
            Ok(LabeledScene {
                id: e.scene.clone(),
                features: SceneFeatures::from_depth(&depth)?,
                gt,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub non_dnn_rmse: f64,
    pub dnn_rmse: Option<f64>,
}

/// Score the polynomial matcher and, when a network is given, its refinement.
pub fn evaluate_scene(scene: &LabeledScene, net: Option<&RefineNet>, trim: f64) -> Result<SceneReport> {
    let non_dnn_rmse = trimmed_rmse(&scene.features.base, &scene.gt, trim)?;
    let dnn_rmse = match net {
        Some(net) => Some(trimmed_rmse(&predict(net, &scene.features)?.field, &scene.gt, trim)?),
        None => None,
    };
    Ok(SceneReport {
        scene: scene.id.clone(),
        non_dnn_rmse,
        dnn_rmse,
    })
}

/// Per-scene trimmed RMSE of the test split.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    split: Split,
    setup: &MatchSetup,
    net: Option<&RefineNet>,
    trim: f64,
) -> Result<Vec<SceneReport>> {
    let scenes = labeled_scenes(manifest, split, setup)?;
    scenes.par_iter().map(|s| evaluate_scene(s, net, trim)).collect()
}

/// Mean of each column; the DNN mean is present only if every scene has one.
pub fn report_means(rows: &[SceneReport]) -> Option<(f64, Option<f64>)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let poly = rows.iter().map(|r| r.non_dnn_rmse).sum::<f64>() / n;
    let dnn: Option<Vec<f64>> = rows.iter().map(|r| r.dnn_rmse).collect();
    Some((poly, dnn.map(|v| v.iter().sum::<f64>() / n)))
}

/// Table with columns `scene,non_dnn_rmse,dnn_rmse`; an empty DNN cell
/// means no network was run.
pub fn write_report(path: &Path, rows: &[SceneReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["scene", "non_dnn_rmse", "dnn_rmse"]).map_err(csv_err)?;
    for r in rows {
        let dnn = r.dnn_rmse.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([r.scene.clone(), format!("{:.6}", r.non_dnn_rmse), dnn])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<SceneReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}
