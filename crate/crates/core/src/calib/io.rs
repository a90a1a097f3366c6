//! Grid files (CSV, one node per row, or a 4-plane PFM over the lattice),
//! camera solutions (TOML) and per-view MRE tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraSolution, GridNode, GridNodeSet};
use crate::error::{Error, Result};
use crate::harness::io::write_pfm_planes;

#[derive(Serialize, Deserialize)]
struct GridRow {
    x: f64,
    y: f64,
    u: i32,
    v: i32,
    valid: u8,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Columns `x,y,u,v,valid`.
pub fn write_grid_csv(path: &Path, set: &GridNodeSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for n in &set.nodes {
        w.serialize(GridRow {
            x: n.x,
            y: n.y,
            u: n.u,
            v: n.v,
            valid: n.valid as u8,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv(path: &Path) -> Result<GridNodeSet> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut nodes = Vec::new();
    for row in r.deserialize() {
        let row: GridRow = row.map_err(csv_err)?;
        if !(row.x.is_finite() && row.y.is_finite()) {
            return Err(Error::Format(format!("non-finite node ({}, {})", row.u, row.v)));
        }
        if nodes.iter().any(|n: &GridNode| n.u == row.u && n.v == row.v) {
            return Err(Error::Format(format!("duplicate node ({}, {})", row.u, row.v)));
        }
        nodes.push(GridNode {
            x: row.x,
            y: row.y,
            u: row.u,
            v: row.v,
            target: None,
            valid: row.valid != 0,
            score: f64::NAN,
        });
    }
    Ok(GridNodeSet {
        nodes,
        ..GridNodeSet::default()
    })
}

/// Planes x, y, u, v over the bounding box of the lattice indices; NaN
/// where no valid node was found.
pub fn write_grid_pfm(path: &Path, set: &GridNodeSet) -> Result<()> {
    let valid: Vec<&GridNode> = set.valid().collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("no valid nodes to write".into()));
    }
    let u0 = valid.iter().map(|n| n.u).min().unwrap();
    let v0 = valid.iter().map(|n| n.v).min().unwrap();
    let w = (valid.iter().map(|n| n.u).max().unwrap() - u0 + 1) as usize;
    let h = (valid.iter().map(|n| n.v).max().unwrap() - v0 + 1) as usize;
    let mut planes = vec![vec![f64::NAN; w * h]; 4];
    for n in valid {
        let i = (n.v - v0) as usize * w + (n.u - u0) as usize;
        planes[0][i] = n.x;
        planes[1][i] = n.y;
        planes[2][i] = n.u as f64;
        planes[3][i] = n.v as f64;
    }
    let refs: Vec<&[f64]> = planes.iter().map(|p| p.as_slice()).collect();
    write_pfm_planes(path, w, h, &refs)
}

pub fn write_solution(path: &Path, solution: &CameraSolution) -> Result<()> {
    let text = toml::to_string_pretty(solution).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_solution(path: &Path) -> Result<CameraSolution> {
    let text = std::fs::read_to_string(path)?;
    let sol: CameraSolution = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    sol.model.validate()?;
    Ok(sol)
}

/// Columns `view,nodes,mre`.
pub fn write_mre_table(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["view", "nodes", "mre"]).map_err(csv_err)?;
    for (i, (n, e)) in rows.iter().enumerate() {
        w.write_record([i.to_string(), n.to_string(), format!("{e:.6}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
