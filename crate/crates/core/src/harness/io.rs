//! Frame directories: binary PPM (P6) frames and PGM (P5) masks, numbered
//! `00000.ppm`, `00001.ppm`, … in one directory each. Masks use 255 for holes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse a binary PNM header; returns (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(path, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed header"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(format_err(path, "empty image"));
    }
    Ok((w, h, pos + 1))
}

fn read_pnm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, off) = parse_header(&bytes, magic, path)?;
    let need = w * h * channels;
    let payload = bytes.get(off..off + need).ok_or_else(|| format_err(path, "truncated payload"))?;
    Ok((w, h, payload.to_vec()))
}

fn numbered(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format_err(dir, format!("no .{ext} files")));
    }
    Ok(files)
}

fn read_sequence(dir: &Path, ext: &str, magic: &[u8; 2], channels: usize) -> Result<Tensor> {
    let files = numbered(dir, ext)?;
    let mut data = Vec::new();
    let mut size = None;
    for f in &files {
        let (w, h, px) = read_pnm(f, magic, channels)?;
        match size {
            None => size = Some((h, w)),
            Some(expected) if expected != (h, w) => {
                return Err(Error::DimensionMismatch {
                    path: f.clone(),
                    expected,
                    found: (h, w),
                })
            }
            _ => {}
        }
        // Interleaved pixels → planar channels.
        for c in 0..channels {
            data.extend(px.iter().skip(c).step_by(channels).map(|&b| b as f64 / 255.0));
        }
    }
    let (h, w) = size.expect("at least one file");
    Tensor::new(&[files.len(), channels, h, w], data)
}

fn write_sequence(dir: &Path, t: &Tensor, ext: &str, magic: &str, channels: usize, map: impl Fn(f64) -> u8) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(crate::error::shape_err("write", format!("expected [T, {channels}, H, W], got {s:?}")));
    }
    fs::create_dir_all(dir)?;
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    for f in 0..s[0] {
        let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        let base = f * channels * plane;
        for i in 0..plane {
            for c in 0..channels {
                out.push(map(t.data()[base + c * plane + i]));
            }
        }
        fs::write(dir.join(format!("{f:05}.{ext}")), out)?;
    }
    Ok(())
}

/// Read `[T, 3, H, W]` frames in [0, 1].
pub fn read_frames(dir: &Path) -> Result<Tensor> {
    read_sequence(dir, "ppm", b"P6", 3)
}

pub fn write_frames(dir: &Path, frames: &Tensor) -> Result<()> {
    write_sequence(dir, frames, "ppm", "P6", 3, quantize)
}

/// Read `[T, 1, H, W]` masks; bytes ≥ 128 are holes.
pub fn read_masks(dir: &Path) -> Result<Tensor> {
    let t = read_sequence(dir, "pgm", b"P5", 1)?;
    Ok(t.map(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }))
}

pub fn write_masks(dir: &Path, masks: &Tensor) -> Result<()> {
    write_sequence(dir, masks, "pgm", "P5", 1, |v| if v >= 0.5 { 255 } else { 0 })
}

/// Round values to the 8-bit grid used on disk.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}
