//! Single-level orthonormal 2-D Haar analysis and synthesis.
//!
//! The row pass filters each row with `f_l = (1/√2, 1/√2)` and
//! `f_h = (1/√2, -1/√2)` over non-overlapping pairs, the column pass then
//! filters each resulting half-plane the same way along columns. Subbands
//! are named row filter first: `hl` is highpass along rows followed by
//! lowpass along columns.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// The four half-resolution subbands of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands2D {
    pub ll: Plane,
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

impl Subbands2D {
    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }

    /// Subbands in stacking order `[ll, lh, hl, hh]`.
    pub fn bands(&self) -> [&Plane; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

#[inline]
fn analyze(a: f64, b: f64) -> (f64, f64) {
    ((a + b) * FRAC_1_SQRT_2, (a - b) * FRAC_1_SQRT_2)
}

#[inline]
fn synthesize(lo: f64, hi: f64) -> (f64, f64) {
    ((lo + hi) * FRAC_1_SQRT_2, (lo - hi) * FRAC_1_SQRT_2)
}

pub fn dwt2_haar(plane: &Plane) -> Result<Subbands2D> {
    let (rows, cols) = (plane.rows, plane.cols);
    if rows % 2 != 0 || cols % 2 != 0 || rows == 0 || cols == 0 {
        return Err(Error::OddDimension { rows, cols });
    }
    let half_c = cols / 2;
    // Row pass: each row splits into a lowpass and a highpass half-row.
    let mut row_lo = Plane::zeros(rows, half_c);
    let mut row_hi = Plane::zeros(rows, half_c);
    for r in 0..rows {
        for k in 0..half_c {
            let (lo, hi) = analyze(plane.get(r, 2 * k), plane.get(r, 2 * k + 1));
            row_lo.set(r, k, lo);
            row_hi.set(r, k, hi);
        }
    }
    let column_pass = |src: &Plane| {
        let mut lo = Plane::zeros(rows / 2, half_c);
        let mut hi = Plane::zeros(rows / 2, half_c);
        for k in 0..rows / 2 {
            for c in 0..half_c {
                let (l, h) = analyze(src.get(2 * k, c), src.get(2 * k + 1, c));
                lo.set(k, c, l);
                hi.set(k, c, h);
            }
        }
        (lo, hi)
    };
    let (ll, lh) = column_pass(&row_lo);
    let (hl, hh) = column_pass(&row_hi);
    Ok(Subbands2D { ll, lh, hl, hh })
}

pub fn idwt2_haar(subbands: &Subbands2D) -> Result<Plane> {
    let (hr, hc) = (subbands.ll.rows, subbands.ll.cols);
    for b in subbands.bands() {
        if b.rows != hr || b.cols != hc {
            return Err(Error::ShapeMismatch(format!(
                "subband {}x{} differs from ll {hr}x{hc}",
                b.rows, b.cols
            )));
        }
    }
    let column_inverse = |lo: &Plane, hi: &Plane| {
        let mut out = Plane::zeros(2 * hr, hc);
        for k in 0..hr {
            for c in 0..hc {
                let (a, b) = synthesize(lo.get(k, c), hi.get(k, c));
                out.set(2 * k, c, a);
                out.set(2 * k + 1, c, b);
            }
        }
        out
    };
    let row_lo = column_inverse(&subbands.ll, &subbands.lh);
    let row_hi = column_inverse(&subbands.hl, &subbands.hh);
    let mut out = Plane::zeros(2 * hr, 2 * hc);
    for r in 0..2 * hr {
        for k in 0..hc {
            let (a, b) = synthesize(row_lo.get(r, k), row_hi.get(r, k));
            out.set(r, 2 * k, a);
            out.set(r, 2 * k + 1, b);
        }
    }
    Ok(out)
}

/// Eight-subband stack: `[S_ll, S_lh, S_hl, S_hh, F_ll, F_lh, F_hl, F_hh]`,
/// each block as deep as the input band count.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    pub data: Volume,
}

impl SubbandStack {
    pub fn side(&self) -> usize {
        self.data.rows
    }

    pub fn channels(&self) -> usize {
        self.data.channels
    }

    /// Channel vector at spatial position `t` in row-major scan order.
    pub fn position(&self, t: usize) -> &[f64] {
        let c = self.data.channels;
        &self.data.data[t * c..(t + 1) * c]
    }
}

fn band_plane(volume: &Volume, band: usize) -> Plane {
    let mut plane = Plane::zeros(volume.rows, volume.cols);
    for r in 0..volume.rows {
        for c in 0..volume.cols {
            plane.set(r, c, volume.get(r, c, band));
        }
    }
    plane
}

/// Per-band transform of a volume into a (rows/2)×(cols/2)×(4·channels)
/// volume ordered `[ll, lh, hl, hh]`, each block `channels` deep.
pub fn dwt2_volume(volume: &Volume) -> Result<Volume> {
    let bands = volume.channels;
    let mut out = Volume::zeros(volume.rows / 2, volume.cols / 2, 4 * bands);
    for band in 0..bands {
        let sub = dwt2_haar(&band_plane(volume, band))?;
        for (block, plane) in sub.bands().into_iter().enumerate() {
            for r in 0..plane.rows {
                for c in 0..plane.cols {
                    out.set(r, c, block * bands + band, plane.get(r, c));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`dwt2_volume`]. Because the transform is orthonormal this is
/// also its adjoint, which the autodiff layer uses for the backward pass.
pub fn idwt2_volume(stack: &Volume) -> Result<Volume> {
    if !stack.channels.is_multiple_of(4) {
        return Err(Error::ShapeMismatch(format!(
            "subband volume has {} channels, not a multiple of 4",
            stack.channels
        )));
    }
    let bands = stack.channels / 4;
    let mut out = Volume::zeros(stack.rows * 2, stack.cols * 2, bands);
    for band in 0..bands {
        let pick = |block: usize| {
            let mut p = Plane::zeros(stack.rows, stack.cols);
            for r in 0..stack.rows {
                for c in 0..stack.cols {
                    p.set(r, c, stack.get(r, c, block * bands + band));
                }
            }
            p
        };
        let sub = Subbands2D {
            ll: pick(0),
            lh: pick(1),
            hl: pick(2),
            hh: pick(3),
        };
        let plane = idwt2_haar(&sub)?;
        for r in 0..plane.rows {
            for c in 0..plane.cols {
                out.set(r, c, band, plane.get(r, c));
            }
        }
    }
    Ok(out)
}

/// Decomposes the gated spatial and spectral volumes into the eight-subband
/// stack.
pub fn decompose_tokens(s_hat: &Volume, f_hat: &Volume) -> Result<SubbandStack> {
    if (s_hat.rows, s_hat.cols, s_hat.channels) != (f_hat.rows, f_hat.cols, f_hat.channels) {
        return Err(Error::ShapeMismatch(
            "spatial and spectral volumes differ in shape".into(),
        ));
    }
    let spatial = dwt2_volume(s_hat)?;
    let spectral = dwt2_volume(f_hat)?;
    let half_c = spatial.channels;
    let mut data = Volume::zeros(spatial.rows, spatial.cols, 2 * half_c);
    for pos in 0..spatial.rows * spatial.cols {
        let dst = &mut data.data[pos * 2 * half_c..(pos + 1) * 2 * half_c];
        dst[..half_c].copy_from_slice(&spatial.data[pos * half_c..(pos + 1) * half_c]);
        dst[half_c..].copy_from_slice(&spectral.data[pos * half_c..(pos + 1) * half_c]);
    }
    Ok(SubbandStack { data })
}
