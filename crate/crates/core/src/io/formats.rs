//! On-disk payload formats. Every binary layout is little-endian.
//!
//! Depth map (`.mdep`):
//! ```text
//! b"MDEP" | u32 version (=1) | u32 width | u32 height | f32[width·height] row-major meters
//! ```
//! Point cloud (`.mpcl`):
//! ```text
//! b"MPCL" | u32 version (=1) | u32 traversal | f64 timestamp | u64 count | f32[count·6] (x,y,z,r,g,b)
//! ```
//! Images are 8-bit RGB PNG, masks 8-bit grayscale PNG (0 = excluded),
//! rendered depth additionally 16-bit PNG in millimeters, normals PFM.

use std::fs;
use std::path::Path;

use crate::init::PointCloud;
use crate::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 4] = b"MDEP";
pub const CLOUD_MAGIC: &[u8; 4] = b"MPCL";
pub const FORMAT_VERSION: u32 = 1;

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Sequential little-endian reader that reports truncation as corruption.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::corrupt(self.path, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::corrupt(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn magic(&mut self, want: &[u8]) -> Result<()> {
        if self.take(want.len())? != want {
            return Err(Error::corrupt(self.path, "bad magic number"));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::UnsupportedVersion { found, expected });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(4 * v.len());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_depth(w: usize, h: usize, depth: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    put_f32s(&mut out, depth);
    out
}

pub fn write_depth(path: &Path, w: usize, h: usize, depth: &[f32]) -> Result<()> {
    write_atomic(path, &encode_depth(w, h, depth))
}

/// Returns `(width, height, depth)`.
pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(DEPTH_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let d = r.f32s(w * h)?;
    r.finish()?;
    Ok((w, h, d))
}

pub fn encode_cloud(c: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 24 * c.points.len());
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.traversal.to_le_bytes());
    out.extend_from_slice(&c.timestamp.to_le_bytes());
    out.extend_from_slice(&(c.points.len() as u64).to_le_bytes());
    for p in &c.points {
        put_f32s(&mut out, p);
    }
    out
}

pub fn write_cloud(path: &Path, c: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_cloud(c))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(CLOUD_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let traversal = r.u32()?;
    let timestamp = r.f64()?;
    let n = r.u64()? as usize;
    let flat = r.f32s(n.checked_mul(6).ok_or_else(|| Error::corrupt(path, "length overflow"))?)?;
    r.finish()?;
    let points: Vec<[f32; 6]> = flat.chunks_exact(6).map(|c| c.try_into().unwrap()).collect();
    if points.iter().any(|p| p[..3].iter().any(|v| !v.is_finite())) {
        return Err(Error::corrupt(path, "non-finite point coordinate"));
    }
    Ok(PointCloud {
        traversal,
        timestamp,
        points,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, w: usize, h: usize, rgb: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    write_atomic(path, &out)
}

/// Returns `(width, height, rgb in [0, 1])`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = read_file(path)?;
    let img = image::load_from_memory_with_format(&buf, image::ImageFormat::Png)
        .map_err(|e| Error::corrupt(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()))
}

pub fn write_mask(path: &Path, w: usize, h: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Contract("mask buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    write_atomic(path, &out)
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let buf = read_file(path)?;
    let img = image::load_from_memory_with_format(&buf, image::ImageFormat::Png)
        .map_err(|e| Error::corrupt(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b > 0).collect()))
}

/// 16-bit PNG, millimeters, saturating at 65.535 m.
pub fn write_depth_png16(path: &Path, w: usize, h: usize, depth: &[f32]) -> Result<()> {
    let px: Vec<u16> = depth
        .iter()
        .map(|&d| (d.max(0.0) * 1000.0).round().min(u16::MAX as f32) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| Error::Contract("depth buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    write_atomic(path, &out)
}

/// Portable float map, 3 channels, little-endian, bottom row first.
pub fn write_pfm(path: &Path, w: usize, h: usize, rgb: &[f32]) -> Result<()> {
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        put_f32s(&mut out, &rgb[3 * y * w..3 * (y + 1) * w]);
    }
    write_atomic(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = read_file(path)?;
    let mut lines = 0;
    let mut pos = 0;
    while lines < 3 {
        let nl = buf[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| Error::corrupt(path, "bad PFM header"))?;
        pos += nl + 1;
        lines += 1;
    }
    let header = std::str::from_utf8(&buf[..pos]).map_err(|_| Error::corrupt(path, "bad PFM header"))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("PF") {
        return Err(Error::corrupt(path, "not a color PFM"));
    }
    let dim = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| Error::corrupt(path, "bad PFM size"));
    let w = dim(it.next())?;
    let h = dim(it.next())?;
    let scale: f32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::corrupt(path, "bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::corrupt(path, "big-endian PFM not supported"));
    }
    let mut r = Reader::new(&buf[pos..], path);
    let flat = r.f32s(3 * w * h)?;
    r.finish()?;
    let mut out = vec![0.0; 3 * w * h];
    for y in 0..h {
        let src = (h - 1 - y) * 3 * w;
        out[3 * y * w..3 * (y + 1) * w].copy_from_slice(&flat[src..src + 3 * w]);
    }
    Ok((w, h, out))
}
