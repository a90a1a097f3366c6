//! Network checkpoint file.
//!
//! Layout, all integers u32 little-endian:
//! magic `QSNN`, version, number of Stage-1 layers L, L + 1 layer widths
//! (input first), leaky slope as f64, Stage-2 kernel, Stage-2 channels, then
//! every parameter as a little-endian f32 in `RefineNet::param_slices` order.
//! Stage-1 weight matrices are stored output by output (`in` values each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NetConfig, RefineNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QSNN";
const VERSION: u32 = 1;

pub fn write_checkpoint(mut w: impl Write, net: &RefineNet) -> Result<()> {
    let u = |w: &mut dyn Write, v: usize| w.write_all(&(v as u32).to_le_bytes());
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = &net.config;
    u(&mut w, cfg.widths.len())?;
    u(&mut w, cfg.input_dim)?;
    for &width in &cfg.widths {
        u(&mut w, width)?;
    }
    w.write_all(&cfg.alpha.to_le_bytes())?;
    u(&mut w, cfg.kernel)?;
    u(&mut w, cfg.channels())?;
    for block in net.param_slices() {
        for v in block {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<RefineNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let layers = read_u32(&mut r)? as usize;
    if layers == 0 || layers > 64 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let widths = (0..layers)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut a = [0u8; 8];
    r.read_exact(&mut a)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let alpha = f64::from_le_bytes(a);
    let kernel = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let config = NetConfig {
        input_dim,
        widths,
        alpha,
        kernel,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad checkpoint layout: {e}")))?;
    if channels != config.channels() {
        return Err(Error::Format("Stage-2 channels disagree with Stage-1 output".into()));
    }
    let mut net = RefineNet::zeros(&config)?;
    for block in net.param_slices_mut() {
        for v in block.iter_mut() {
            *v = read_f32(&mut r)? as f64;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if !net.all_finite() {
        return Err(Error::Format("non-finite weights in checkpoint".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &RefineNet) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), net)
}

pub fn load_checkpoint(path: &Path) -> Result<RefineNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
