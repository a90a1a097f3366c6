//! File formats: PFM for float rasters, 16-bit PGM for integer images.
//!
//! PFM files are written little-endian (scale -1.0), rows bottom to top as
//! the format prescribes. Several planes of equal size are stored as one
//! single-channel image of height `planes * h`, first plane at the top.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub fn write_pfm_planes(path: &Path, width: usize, height: usize, planes: &[&[f64]]) -> Result<()> {
    if planes.is_empty() || planes.iter().any(|p| p.len() != width * height) {
        return Err(Error::Size("PFM planes do not match the image size".into()));
    }
    let total_h = height * planes.len();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{width} {total_h}\n-1.0\n")?;
    for row in (0..total_h).rev() {
        let plane = planes[row / height];
        let y = row % height;
        for v in &plane[y * width..(y + 1) * width] {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pfm(path: &Path, image: &ImageGrid) -> Result<()> {
    write_pfm_planes(path, image.width(), image.height(), &[image.data()])
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII header".into()))
}

fn parse<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} '{tok}'")))
}

/// Read a single-channel PFM into `(width, total_height, data)` in top-down order.
pub fn read_pfm_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = header_token(&mut r)?;
    if magic != "Pf" {
        return Err(Error::Format(format!("expected single-channel PFM, got '{magic}'")));
    }
    let width: usize = parse(&header_token(&mut r)?, "width")?;
    let height: usize = parse(&header_token(&mut r)?, "height")?;
    let scale: f64 = parse(&header_token(&mut r)?, "scale")?;
    if scale == 0.0 {
        return Err(Error::Format("zero PFM scale".into()));
    }
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated PFM data".into()))?;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (i % width, i / width);
        data[(height - 1 - row) * width + x] = v as f64;
    }
    Ok((width, height, data))
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid> {
    let (w, h, data) = read_pfm_raw(path)?;
    ImageGrid::from_vec(w, h, data)
}

/// Split a stacked PFM into `planes` planes.
pub fn read_pfm_planes(path: &Path, planes: usize) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let (w, total_h, data) = read_pfm_raw(path)?;
    if planes == 0 || total_h % planes != 0 {
        return Err(Error::Format(format!(
            "height {total_h} is not a multiple of {planes} planes"
        )));
    }
    let h = total_h / planes;
    let out = data.chunks(w * h).map(|c| c.to_vec()).collect();
    Ok((w, h, out))
}

/// 16-bit binary PGM (most significant byte first). Values are rounded and
/// clamped to `[0, 65535]`.
pub fn write_pgm16(path: &Path, image: &ImageGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", image.width(), image.height())?;
    for v in image.data() {
        let q = v.round().clamp(0.0, 65535.0) as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<ImageGrid> {
    let mut r = BufReader::new(File::open(path)?);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Format("not a binary PGM".into()));
    }
    let width: usize = parse(&header_token(&mut r)?, "width")?;
    let height: usize = parse(&header_token(&mut r)?, "height")?;
    let maxval: u32 = parse(&header_token(&mut r)?, "maxval")?;
    let wide = maxval > 255;
    let bpp = if wide { 2 } else { 1 };
    let mut bytes = vec![0u8; width * height * bpp];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated PGM data".into()))?;
    let data = if wide {
        bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    } else {
        bytes.iter().map(|&b| b as f64).collect()
    };
    ImageGrid::from_vec(width, height, data)
}
