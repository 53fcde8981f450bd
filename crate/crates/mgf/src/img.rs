//! Image value types: grayscale micrographs, soft probability maps, and
//! hard binary masks, with PGM (P5) and PNG io.
//!
//! Grayscale values live in `[0, 1]`; a `GrayImage` carries the physical
//! pixel scale in micrometers per pixel. Masks are strictly binary and are
//! written as PGM with values {0, 255}.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MgfError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
    pub pixel_scale_um: f64,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>, pixel_scale_um: f64) -> Result<GrayImage> {
        if data.len() != h * w {
            return Err(MgfError::shape_mismatch(format!(
                "{}x{} image needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        if pixel_scale_um <= 0.0 {
            return Err(MgfError::invalid_argument(
                "pixel scale must be positive micrometers per pixel",
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MgfError::invalid_argument("gray values must lie in [0, 1]"));
        }
        Ok(GrayImage {
            h,
            w,
            data,
            pixel_scale_um,
        })
    }

    pub fn constant(h: usize, w: usize, value: f64, pixel_scale_um: f64) -> GrayImage {
        GrayImage {
            h,
            w,
            data: vec![value; h * w],
            pixel_scale_um,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// (1, 1, h, w) tensor for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone()).expect("sizes agree")
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm_bytes(path, self.h, self.w, &bytes)
    }

    /// Read a PGM (P5) or PNG file, scaling sample values to [0, 1].
    pub fn read(path: &Path, pixel_scale_um: f64) -> Result<GrayImage> {
        let (h, w, bytes) = read_gray_bytes(path)?;
        GrayImage::new(
            h,
            w,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            pixel_scale_um,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<ProbMap> {
        if data.len() != h * w {
            return Err(MgfError::shape_mismatch(format!(
                "{}x{} map needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MgfError::invalid_argument(
                "probabilities must lie in [0, 1]",
            ));
        }
        Ok(ProbMap { h, w, data })
    }

    /// From a (1, 1, h, w) tensor of probabilities.
    pub fn from_tensor(t: &Tensor) -> Result<ProbMap> {
        if t.shape().len() != 4 || t.shape()[0] != 1 || t.shape()[1] != 1 {
            return Err(MgfError::shape_mismatch(format!(
                "expected (1,1,h,w) tensor, got {:?}",
                t.shape()
            )));
        }
        ProbMap::new(t.shape()[2], t.shape()[3], t.data().to_vec())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v >= t).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        write_pgm_bytes(path, self.h, self.w, &bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> BinaryMask {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<bool>) -> Result<BinaryMask> {
        if data.len() != h * w {
            return Err(MgfError::shape_mismatch(format!(
                "{}x{} mask needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(BinaryMask { h, w, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// On-pixel coordinates in row-major order.
    pub fn on_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.h != other.h || self.w != other.w {
            return Err(MgfError::shape_mismatch(format!(
                "union of {}x{} with {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    /// Target tensor (1, 1, h, w) with on = 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.h, self.w],
            self.data
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("sizes agree")
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_pgm_bytes(path, self.h, self.w, &bytes)
    }

    /// Read a PGM/PNG: samples above half scale are foreground.
    pub fn read(path: &Path) -> Result<BinaryMask> {
        let (h, w, bytes) = read_gray_bytes(path)?;
        Ok(BinaryMask {
            h,
            w,
            data: bytes.iter().map(|&b| b > 127).collect(),
        })
    }
}

fn write_pgm_bytes(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Dispatch on extension: `.pgm` is parsed directly, anything else goes
/// through the image crate's PNG decoder.
fn read_gray_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        read_pgm(path)
    } else {
        let img = image::open(path).map_err(|e| MgfError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        Ok((
            gray.height() as usize,
            gray.width() as usize,
            gray.into_raw(),
        ))
    }
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |message: &str| MgfError::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 2 || &raw[0..2] != b"P5" {
        return Err(bad("not a P5 PGM"));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&raw[start..pos]).map_err(|_| bad("bad header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad header number"))?);
    }
    pos += 1; // single whitespace byte after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    if raw.len() < pos + w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut bytes = raw[pos..pos + w * h].to_vec();
    if maxval != 255 {
        for b in &mut bytes {
            *b = ((*b as usize * 255) / maxval) as u8;
        }
    }
    Ok((h, w, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = GrayImage::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1], 1.0).unwrap();
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read(&path, 1.0).unwrap();
        assert_eq!(back.h, 2);
        assert_eq!(back.w, 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut m = BinaryMask::empty(4, 5);
        m.set(1, 2, true);
        m.set(3, 4, true);
        m.write_pgm(&path).unwrap();
        assert_eq!(BinaryMask::read(&path).unwrap(), m);
    }

    #[test]
    fn gray_values_validated() {
        assert!(GrayImage::new(1, 1, vec![1.5], 1.0).is_err());
        assert!(GrayImage::new(1, 1, vec![0.5], 0.0).is_err());
    }

    #[test]
    fn threshold_splits_at_level() {
        let p = ProbMap::new(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        let m = p.threshold(0.5);
        assert_eq!(m.data(), &[false, true, true]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf = image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 40 + y * 100) as u8]));
        buf.save(&path).unwrap();
        let img = GrayImage::read(&path, 2.0).unwrap();
        assert_eq!(img.h, 2);
        assert_eq!(img.w, 3);
        assert_eq!(img.pixel_scale_um, 2.0);
        assert!((img.get(1, 2) - 180.0 / 255.0).abs() < 1e-12);
    }
}
