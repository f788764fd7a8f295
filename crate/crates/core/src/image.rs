//! Per-pixel image containers and their binary file formats.
//!
//! `SCRD1`: `"SCRD1\n"`, `"W H 3\n"`, then little-endian `f32` triples in
//! row-major order; NaN marks invalid pixels.
//! `LBLS1`: `"LBLS1\n"`, `"W H\n"`, then little-endian `u32` per pixel.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::geometry::{GeometryError, ImageDims, Vec3};
use crate::labels::LabelId;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {0:?} do not match {1:?}")]
    DimensionMismatch(ImageDims, ImageDims),
    #[error("pixel buffer has {got} entries, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("bad image header: {0}")]
    Header(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scene coordinates per pixel; NaN coordinates mark pixels without a value.
///
/// Equality is bitwise, so two images with the same invalid pixels compare
/// equal.
#[derive(Clone)]
pub struct SceneCoordinateImage {
    dims: ImageDims,
    data: Vec<Vec3>,
}

impl PartialEq for SceneCoordinateImage {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl std::fmt::Debug for SceneCoordinateImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SceneCoordinateImage")
            .field("dims", &self.dims)
            .field("valid", &self.valid_count())
            .finish()
    }
}

impl SceneCoordinateImage {
    pub fn invalid(dims: ImageDims) -> Self {
        Self {
            dims,
            data: vec![Vec3::repeat(f64::NAN); dims.pixel_count()],
        }
    }

    pub fn from_vec(dims: ImageDims, data: Vec<Vec3>) -> Result<Self, ImageError> {
        if data.len() != dims.pixel_count() {
            return Err(ImageError::BufferSize {
                got: data.len(),
                expected: dims.pixel_count(),
            });
        }
        // any non-finite channel invalidates the whole pixel
        let data = data
            .into_iter()
            .map(|p| if p.iter().all(|x| x.is_finite()) { p } else { Vec3::repeat(f64::NAN) })
            .collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.dims.width + col
    }

    pub fn get(&self, i: usize) -> Option<Vec3> {
        let p = self.data[i];
        p.x.is_finite().then_some(p)
    }

    pub fn set(&mut self, i: usize, value: Option<Vec3>) {
        self.data[i] = match value {
            Some(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => Vec3::repeat(f64::NAN),
        };
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.data[i].x.is_finite()
    }

    pub fn raw(&self) -> &[Vec3] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|p| p.x.is_finite()).count()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "SCRD1\n{} {} 3\n", self.dims.width, self.dims.height)?;
        let mut buf = Vec::with_capacity(12 * self.data.len());
        for p in &self.data {
            for k in 0..3 {
                buf.extend_from_slice(&(p[k] as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, ImageError> {
        expect_magic(&mut r, "SCRD1")?;
        let fields = header_fields(&mut r)?;
        if fields.len() != 3 || fields[2] != 3 {
            return Err(ImageError::Header("expected \"W H 3\"".into()));
        }
        let dims = ImageDims::new(fields[0], fields[1])?;
        let mut bytes = vec![0u8; 12 * dims.pixel_count()];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
                Vec3::new(f(0), f(4), f(8))
            })
            .collect();
        Self::from_vec(dims, data)
    }

    /// Round every coordinate through `f32`, matching what a file round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|p| p.map(|x| x as f32 as f64)).collect(),
        }
    }
}

/// Panoptic label per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelImage {
    dims: ImageDims,
    data: Vec<LabelId>,
}

impl std::fmt::Debug for LabelImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelImage").field("dims", &self.dims).finish_non_exhaustive()
    }
}

impl LabelImage {
    pub fn filled(dims: ImageDims, label: LabelId) -> Self {
        Self {
            dims,
            data: vec![label; dims.pixel_count()],
        }
    }

    pub fn from_vec(dims: ImageDims, data: Vec<LabelId>) -> Result<Self, ImageError> {
        if data.len() != dims.pixel_count() {
            return Err(ImageError::BufferSize {
                got: data.len(),
                expected: dims.pixel_count(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn get(&self, i: usize) -> LabelId {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, label: LabelId) {
        self.data[i] = label;
    }

    pub fn raw(&self) -> &[LabelId] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "LBLS1\n{} {}\n", self.dims.width, self.dims.height)?;
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for l in &self.data {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, ImageError> {
        expect_magic(&mut r, "LBLS1")?;
        let fields = header_fields(&mut r)?;
        if fields.len() != 2 {
            return Err(ImageError::Header("expected \"W H\"".into()));
        }
        let dims = ImageDims::new(fields[0], fields[1])?;
        let mut bytes = vec![0u8; 4 * dims.pixel_count()];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_vec(dims, data)
    }
}

/// Per-pixel scores over the panoptic label channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitImage {
    pub pixel_count: usize,
    pub channels: usize,
    /// Pixel-major: `scores[pixel * channels + channel]`.
    pub scores: Vec<f64>,
}

impl LogitImage {
    pub fn new(pixel_count: usize, channels: usize, scores: Vec<f64>) -> Result<Self, ImageError> {
        if scores.len() != pixel_count * channels {
            return Err(ImageError::BufferSize {
                got: scores.len(),
                expected: pixel_count * channels,
            });
        }
        Ok(Self {
            pixel_count,
            channels,
            scores,
        })
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.scores[i * self.channels..(i + 1) * self.channels]
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, ImageError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(ImageError::Header("truncated header".into()));
    }
    line.pop();
    Ok(line)
}

fn expect_magic<R: BufRead>(r: &mut R, magic: &str) -> Result<(), ImageError> {
    let line = read_line(r)?;
    if line != magic {
        return Err(ImageError::Header(format!("expected magic {magic}, got {line:?}")));
    }
    Ok(())
}

fn header_fields<R: BufRead>(r: &mut R) -> Result<Vec<usize>, ImageError> {
    read_line(r)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| ImageError::Header(format!("bad number {t:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ImageDims {
        ImageDims::new(8, 4).unwrap()
    }

    #[test]
    fn scrd_layout_is_bit_exact() {
        let mut img = SceneCoordinateImage::invalid(dims());
        img.set(1, Some(Vec3::new(1.0, -2.0, 0.5)));
        let mut bytes = Vec::new();
        img.write_to(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"SCRD1\n8 4 3\n"));
        let header = b"SCRD1\n8 4 3\n".len();
        assert_eq!(bytes.len(), header + 12 * 32);
        assert_eq!(&bytes[header + 12..header + 16], &1.0f32.to_le_bytes());
        assert!(f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()).is_nan());
        let back = SceneCoordinateImage::read_from(&bytes[..]).unwrap();
        assert_eq!(back.get(1), Some(Vec3::new(1.0, -2.0, 0.5)));
        assert_eq!(back.valid_count(), 1);
    }

    #[test]
    fn lbls_layout_is_bit_exact() {
        let mut img = LabelImage::filled(dims(), 1);
        img.set(5, 1003);
        let mut bytes = Vec::new();
        img.write_to(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"LBLS1\n8 4\n"));
        let header = b"LBLS1\n8 4\n".len();
        assert_eq!(&bytes[header + 20..header + 24], &1003u32.to_le_bytes());
        assert_eq!(LabelImage::read_from(&bytes[..]).unwrap(), img);
    }

    #[test]
    fn rejects_bad_headers_and_sizes() {
        assert!(SceneCoordinateImage::read_from(&b"SCRD2\n8 4 3\n"[..]).is_err());
        assert!(SceneCoordinateImage::read_from(&b"SCRD1\n8 4 2\n"[..]).is_err());
        assert!(LabelImage::read_from(&b"LBLS1\n8 4\n\x00"[..]).is_err());
        assert!(LabelImage::from_vec(dims(), vec![0; 3]).is_err());
    }

    #[test]
    fn partial_nan_invalidates_pixel() {
        let mut data = vec![Vec3::zeros(); 32];
        data[3] = Vec3::new(1.0, f64::NAN, 2.0);
        let img = SceneCoordinateImage::from_vec(dims(), data).unwrap();
        assert!(!img.is_valid(3));
        assert_eq!(img.valid_count(), 31);
    }
}
