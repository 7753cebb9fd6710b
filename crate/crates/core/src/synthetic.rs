//! Desk-scale synthetic scenes: Voronoi class regions, each with its own
//! smooth spectral signature, band-correlated noise and a class-specific
//! 2-D texture frequency.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelMap};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    /// Amplitude of the per-class texture pattern.
    pub texture_scale: f64,
    /// Standard deviation of the band-correlated noise.
    pub noise: f64,
    /// Spread between class signatures; smaller is harder.
    pub separation: f64,
    /// Voronoi sites per class.
    pub sites_per_class: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 16,
            classes: 4,
            texture_scale: 1.0,
            noise: 0.3,
            separation: 0.3,
            sites_per_class: 3,
            seed: 3407,
        }
    }
}

/// Texture frequency for class `k`, in radians per pixel. Class 0 is flat
/// and the highest class sits at the Nyquist rate.
pub fn texture_frequency(k: usize, classes: usize) -> f64 {
    if classes <= 1 {
        0.0
    } else {
        PI * k as f64 / (classes - 1) as f64
    }
}

pub fn make_synthetic(spec: &SceneSpec) -> Result<(HsiCube, LabelMap)> {
    let (h, w, c, k) = (spec.height, spec.width, spec.bands, spec.classes);
    if k < 2 || h == 0 || w == 0 || c == 0 || spec.sites_per_class == 0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic scene needs K >= 2 and positive dims, got {h}x{w}x{c}, K={k}"
        )));
    }
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);

    let sites: Vec<(f64, f64, usize)> = (0..k * spec.sites_per_class)
        .map(|i| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), i % k))
        .collect();

    // Shared base spectrum plus a smooth per-class deviation.
    let base: Vec<f64> = (0..c).map(|b| 1.0 + 0.5 * (PI * b as f64 / c as f64).sin()).collect();
    let signatures: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let cycles = rng.gen_range(0.5..2.0);
            (0..c)
                .map(|b| {
                    base[b] + spec.separation * (2.0 * PI * cycles * b as f64 / c as f64 + phase).sin()
                })
                .collect()
        })
        .collect();
    // Spectral shape the texture modulates, one per class.
    let texture_profiles: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..c).map(|_| rng.gen_range(0.5..1.5)).collect())
        .collect();
    let noise_profile: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let phases: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)))
        .collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let class = sites
                .iter()
                .map(|&(sr, sc, cls)| ((sr - r as f64).powi(2) + (sc - col as f64).powi(2), cls))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            labels.push(class as u16 + 1);
            let freq = texture_frequency(class, k);
            let (pr, pc) = phases[class];
            let pattern = if freq == 0.0 {
                0.0
            } else {
                (freq * r as f64 + pr).cos() * (freq * col as f64 + pc).cos()
            };
            let shared: f64 = StandardNormal.sample(&mut rng);
            for b in 0..c {
                let white: f64 = StandardNormal.sample(&mut rng);
                let v = signatures[class][b]
                    + spec.texture_scale * pattern * texture_profiles[class][b]
                    + spec.noise * (0.8 * shared * noise_profile[b] + 0.6 * white);
                data.push(v);
            }
        }
    }
    Ok((HsiCube::new(h, w, c, data)?, LabelMap::new(h, w, labels)?))
}
