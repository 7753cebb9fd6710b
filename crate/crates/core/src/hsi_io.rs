//! Binary cube (`HSIC`) and label (`HSIL`) files, plus P6 map rendering.
//!
//! Both formats are little-endian. A cube file is the magic `HSIC`, three
//! `u32` dimensions (H, W, C) and then H·W·C `f32` values in
//! band-interleaved-by-pixel order. A label file is `HSIL`, `u32` H and W,
//! then H·W `u16` class ids with 0 meaning unlabeled.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
const LABEL_MAGIC: &[u8; 4] = b"HSIL";
const CUBE_HEADER: usize = 16;
const LABEL_HEADER: usize = 12;

/// An H×W×C volume stored pixel-major, band-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::ShapeMismatch(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Spectrum of the pixel at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.bands + band]
    }
}

/// Per-pixel class ids; 0 is unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    num_classes: usize,
}

impl LabelMap {
    /// Builds a map; `num_classes` is the largest id present.
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                labels.len()
            )));
        }
        let num_classes = labels.iter().copied().max().unwrap_or(0) as usize;
        Ok(Self {
            height,
            width,
            labels,
            num_classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Pixel count per class id, index 0 holding the unlabeled count.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// RGB colour per class id, entry 0 for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Self {
        Self { colors }
    }

    /// Black background followed by evenly spaced hues.
    pub fn default_for(num_classes: usize) -> Self {
        let mut colors = vec![[0, 0, 0]];
        for k in 0..num_classes {
            let hue = k as f64 / num_classes.max(1) as f64;
            colors.push(hsv_to_rgb(hue, 0.85, 0.95));
        }
        Self { colors }
    }

    pub fn get(&self, class: u16) -> Option<[u8; 3]> {
        self.colors.get(class as usize).copied()
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to_byte = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(path: &Path, bytes: &[u8], magic: &'static [u8; 4], header: usize) -> Result<()> {
    if bytes.len() < header || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).unwrap(),
        });
    }
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_magic(path, &bytes, CUBE_MAGIC, CUBE_HEADER)?;
    let h = read_u32(&bytes, 4) as usize;
    let w = read_u32(&bytes, 8) as usize;
    let c = read_u32(&bytes, 12) as usize;
    let payload = &bytes[CUBE_HEADER..];
    let expected = h * w * c * 4;
    if payload.len() != expected {
        return Err(Error::DimMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    HsiCube::new(h, w, c, data)
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(CUBE_HEADER + cube.data.len() * 4);
    buf.extend_from_slice(CUBE_MAGIC);
    for dim in [cube.height, cube.width, cube.bands] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in &cube.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_magic(path, &bytes, LABEL_MAGIC, LABEL_HEADER)?;
    let h = read_u32(&bytes, 4) as usize;
    let w = read_u32(&bytes, 8) as usize;
    let payload = &bytes[LABEL_HEADER..];
    let expected = h * w * 2;
    if payload.len() != expected {
        return Err(Error::DimMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let labels = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    LabelMap::new(h, w, labels)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(LABEL_HEADER + labels.labels.len() * 2);
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&(labels.height as u32).to_le_bytes());
    buf.extend_from_slice(&(labels.width as u32).to_le_bytes());
    for &l in &labels.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Encodes the map as a binary P6 pixmap in memory.
pub fn encode_ppm(labels: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let header = format!("P6\n{} {}\n255\n", labels.width, labels.height);
    let mut buf = Vec::with_capacity(header.len() + 3 * labels.labels.len());
    buf.extend_from_slice(header.as_bytes());
    for &l in &labels.labels {
        let rgb = palette
            .get(l)
            .ok_or(Error::MissingPaletteEntry { label: l })?;
        buf.extend_from_slice(&rgb);
    }
    Ok(buf)
}

pub fn render_map(labels: &LabelMap, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(labels, palette)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}
