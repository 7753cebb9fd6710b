//! Band reduction, normalization, patch extraction, tokenization and
//! stratified splitting.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelMap};
use crate::rng::{self, Stream};
use crate::volume::Volume;
use crate::wavelet::Plane;

/// Principal-component band reduction and what it found.
#[derive(Debug, Clone)]
pub struct BandReduction {
    pub cube: HsiCube,
    /// Every eigenvalue of the band covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Numerical rank of the covariance. Less than the requested band
    /// count means the trailing output bands carry no variance.
    pub rank: usize,
    pub mean: Vec<f64>,
    /// Band loadings, one row of length C per retained component.
    pub components: Vec<Vec<f64>>,
}

impl BandReduction {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues
            .iter()
            .take(self.components.len())
            .map(|&e| if total > 0.0 { e / total } else { 0.0 })
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.rank < self.components.len()
    }
}

/// Band covariance over all pixels, normalised by N − 1 (N when N = 1).
pub fn band_covariance(cube: &HsiCube) -> (Vec<f64>, DMatrix<f64>) {
    let c = cube.bands();
    let n = cube.pixels();
    let mut mean = vec![0.0; c];
    for px in cube.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0; c];
    for px in cube.data().chunks_exact(c) {
        for k in 0..c {
            centered[k] = px[k] - mean[k];
        }
        for i in 0..c {
            for j in i..c {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

pub fn reduce_bands(cube: &HsiCube, target: usize) -> Result<BandReduction> {
    let c = cube.bands();
    if target == 0 || target > c {
        return Err(Error::InvalidConfig(format!(
            "reduced band count {target} must lie in [1, {c}]"
        )));
    }
    let (mean, cov) = band_covariance(cube);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&e| e > top * 1e-12 * c as f64 && e > 0.0)
        .count();

    let components: Vec<Vec<f64>> = order
        .iter()
        .take(target)
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign fixed so the largest-magnitude loading is positive.
            let pivot = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();

    let mut data = Vec::with_capacity(cube.pixels() * target);
    for px in cube.data().chunks_exact(c) {
        for comp in &components {
            data.push(
                comp.iter()
                    .zip(px.iter().zip(&mean))
                    .map(|(w, (x, m))| w * (x - m))
                    .sum(),
            );
        }
    }
    Ok(BandReduction {
        cube: HsiCube::new(cube.height(), cube.width(), target, data)?,
        eigenvalues,
        rank,
        mean,
        components,
    })
}

/// Standardizes each band to zero mean and unit population variance.
/// Constant bands become all zeros.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let c = cube.bands();
    let n = cube.pixels() as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for px in cube.data().chunks_exact(c) {
        for k in 0..c {
            mean[k] += px[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for px in cube.data().chunks_exact(c) {
        for k in 0..c {
            sq[k] += (px[k] - mean[k]).powi(2);
        }
    }
    let scale: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| {
            let std = (s / n).sqrt();
            if std <= 1e-12 * m.abs().max(1.0) {
                0.0
            } else {
                1.0 / std
            }
        })
        .collect();
    let data = cube
        .data()
        .chunks_exact(c)
        .flat_map(|px| (0..c).map(|k| (px[k] - mean[k]) * scale[k]).collect::<Vec<_>>())
        .collect();
    HsiCube::new(cube.height(), cube.width(), c, data).expect("normalized cube keeps shape")
}

/// A P×P×C* window anchored at its top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub window: Volume,
    pub anchor_row: usize,
    pub anchor_col: usize,
    pub center_row: usize,
    pub center_col: usize,
    pub label: u16,
}

impl Patch {
    pub fn side(&self) -> usize {
        self.window.rows
    }

    /// Zero-based class index for the model.
    pub fn class_index(&self) -> usize {
        self.label as usize - 1
    }
}

/// Centre offset of an even-sided window from its top-left anchor.
pub fn center_offset(patch: usize) -> usize {
    patch / 2 - 1
}

pub fn candidate_count(height: usize, width: usize, patch: usize) -> usize {
    if patch > height || patch > width || patch == 0 {
        0
    } else {
        (height - patch + 1) * (width - patch + 1)
    }
}

pub fn check_patch_side(cube: &HsiCube, patch: usize) -> Result<()> {
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(Error::OddPatch(patch));
    }
    if patch > cube.height() || patch > cube.width() {
        return Err(Error::PatchTooLarge {
            patch,
            height: cube.height(),
            width: cube.width(),
        });
    }
    Ok(())
}

pub fn window_at(cube: &HsiCube, anchor_row: usize, anchor_col: usize, patch: usize) -> Volume {
    let c = cube.bands();
    let mut data = Vec::with_capacity(patch * patch * c);
    for r in anchor_row..anchor_row + patch {
        let start = (r * cube.width() + anchor_col) * c;
        data.extend_from_slice(&cube.data()[start..start + patch * c]);
    }
    Volume::from_vec(patch, patch, c, data)
}

/// Every top-left anchor of a full window, row-major.
pub fn anchors(height: usize, width: usize, patch: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (height + 1).saturating_sub(patch);
    let cols = (width + 1).saturating_sub(patch);
    (0..rows).flat_map(move |r| (0..cols).map(move |c| (r, c)))
}

/// Labeled windows in anchor order; windows whose centre pixel is
/// unlabeled are dropped.
pub fn extract_patches(cube: &HsiCube, labels: &LabelMap, patch: usize) -> Result<Vec<Patch>> {
    check_patch_side(cube, patch)?;
    if (labels.height(), labels.width()) != (cube.height(), cube.width()) {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{} vs cube {}x{}",
            labels.height(),
            labels.width(),
            cube.height(),
            cube.width()
        )));
    }
    let off = center_offset(patch);
    Ok(anchors(cube.height(), cube.width(), patch)
        .filter_map(|(r, c)| {
            let label = labels.get(r + off, c + off);
            (label != 0).then(|| Patch {
                window: window_at(cube, r, c, patch),
                anchor_row: r,
                anchor_col: c,
                center_row: r + off,
                center_col: c + off,
                label,
            })
        })
        .collect())
}

/// Spatial tokens (C*×P², one row per band) and spectral tokens
/// (P²×C*, one row per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPair {
    pub spatial: Plane,
    pub spectral: Plane,
}

pub fn make_tokens(patch: &Patch) -> TokenPair {
    let w = &patch.window;
    let pixels = w.rows * w.cols;
    let spectral = Plane {
        rows: pixels,
        cols: w.channels,
        data: w.data.clone(),
    };
    let mut spatial = Plane::zeros(w.channels, pixels);
    for i in 0..pixels {
        for j in 0..w.channels {
            spatial.set(j, i, spectral.get(i, j));
        }
    }
    TokenPair { spatial, spectral }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive, got {all:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 100.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 100, got {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 25.0,
            val: 5.0,
            test: 70.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

/// Per-class stratified shuffle split over patch indices.
pub fn split_dataset(patches: &[Patch], fractions: SplitFractions, seed: u64) -> Result<SplitSet> {
    fractions.validate()?;
    let max_label = patches.iter().map(|p| p.label).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max_label as usize + 1];
    for (i, p) in patches.iter().enumerate() {
        by_class[p.label as usize].push(i);
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, members) in by_class.iter_mut().enumerate().skip(1) {
        if members.is_empty() {
            return Err(Error::EmptyClass(label as u16));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (n as f64 * fractions.train / 100.0).round() as usize;
        if n >= 3 {
            n_train = n_train.max(1);
        }
        n_train = n_train.min(n);
        let n_val = ((n as f64 * fractions.val / 100.0).round() as usize).min(n - n_train);
        train.extend_from_slice(&members[..n_train]);
        validation.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    if patches.is_empty() {
        return Err(Error::EmptySplit("labeled patch"));
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitSet {
        train,
        validation,
        test,
        seed,
        fractions,
    })
}
