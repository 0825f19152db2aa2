//! `VOLU1` grid files: one ASCII header line
//! `VOLU1 D H W spacing_mm dtype` followed by the raw little-endian buffer.
//! Volumes use dtype `f64`, segmentation masks `u8`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{SegMask, Volume};
use crate::error::{Error, Result};

fn header(size: [usize; 3], spacing: f64, dtype: &str) -> String {
    format!("VOLU1 {} {} {} {:?} {}\n", size[0], size[1], size[2], spacing, dtype)
}

fn read_header(r: &mut impl BufRead, want: &str) -> Result<([usize; 3], f64)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 || f[0] != "VOLU1" {
        return Err(Error::parse(
            "VOLU1 header",
            format!("malformed header `{}`", line.trim_end()),
        ));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse("VOLU1 header", format!("bad dimension `{s}`")))
    };
    let size = [dim(f[1])?, dim(f[2])?, dim(f[3])?];
    let spacing: f64 = f[4]
        .parse()
        .map_err(|_| Error::parse("VOLU1 header", format!("bad spacing `{}`", f[4])))?;
    if f[5] != want {
        return Err(Error::parse(
            "VOLU1 header",
            format!("dtype `{}` where `{want}` was expected", f[5]),
        ));
    }
    Ok((size, spacing))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = header(v.size, v.spacing_mm, "f64").into_bytes();
    buf.reserve(v.data.len() * 8);
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (size, spacing) = read_header(&mut r, "f64")?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let n: usize = size.iter().product();
    if raw.len() != n * 8 {
        return Err(Error::parse(
            "VOLU1 body",
            format!("expected {} bytes, found {}", n * 8, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Volume::new(size, spacing, data)
}

pub fn write_mask(path: &Path, m: &SegMask, spacing_mm: f64) -> Result<()> {
    let mut buf = header(m.size, spacing_mm, "u8").into_bytes();
    buf.extend_from_slice(&m.labels);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (size, _) = read_header(&mut r, "u8")?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let n: usize = size.iter().product();
    if raw.len() != n {
        return Err(Error::parse(
            "VOLU1 body",
            format!("expected {n} bytes, found {}", raw.len()),
        ));
    }
    SegMask::new(size, raw)
}
