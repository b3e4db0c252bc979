//! Synthetic image corruptions at five severities.
//!
//! Each image draws from its own ChaCha stream keyed by the spec seed, so an
//! output depends only on (image, kind, severity, seed).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Built-in strength per severity 1..=5: noise std, photon count, flip
    /// fraction, additive offset, contrast factor, or block size.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
        }
    }

    /// Strength that leaves images unchanged.
    pub fn identity_strength(self) -> f64 {
        match self {
            CorruptionKind::ShotNoise => f64::INFINITY,
            CorruptionKind::Contrast | CorruptionKind::Pixelate => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity must be 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn strength(&self) -> f64 {
        self.kind.table()[self.severity as usize - 1]
    }
}

fn check_range(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::PixelRange { index, value: x[index] }),
        None => Ok(()),
    }
}

/// Applies `kind` at an explicit strength to one `C x H x W` image.
pub fn apply_strength(image: &Tensor<f32>, kind: CorruptionKind, strength: f64, seed: u64) -> Result<Tensor<f32>> {
    if image.rank() != 3 {
        return Err(Error::shape("corrupt", format!("expected CxHxW, got {:?}", image.shape())));
    }
    check_range(image.data())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = image.data();
    let out: Vec<f32> = match kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, strength).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            x.iter().map(|&v| v as f64 + noise.sample(&mut rng)).map(clamp).collect()
        }
        CorruptionKind::ShotNoise => {
            if strength.is_infinite() {
                x.to_vec()
            } else {
                x.iter()
                    .map(|&v| {
                        let rate = v as f64 * strength;
                        if rate <= 0.0 {
                            return 0.0;
                        }
                        let count: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                        clamp(count / strength)
                    })
                    .collect()
            }
        }
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|&v| {
                // Two draws per pixel regardless of outcome keep the stream
                // aligned, so a higher fraction flips a superset of pixels.
                let (flip, salt) = (rng.gen::<f64>(), rng.gen::<bool>());
                if flip < strength {
                    if salt {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::Brightness => x.iter().map(|&v| clamp(v as f64 + strength)).collect(),
        CorruptionKind::Contrast => {
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
            x.iter().map(|&v| clamp((v as f64 - mean) * strength + mean)).collect()
        }
        CorruptionKind::Pixelate => pixelate(image, strength.round().max(1.0) as usize),
    };
    Tensor::new(image.shape().to_vec(), out)
}

fn clamp(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Block-averages into `block x block` cells (edge cells may be smaller)
/// and writes each average back over its cell.
fn pixelate(image: &Tensor<f32>, block: usize) -> Vec<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.data().to_vec();
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0f64;
                for y in by..ye {
                    sum += plane[y * w + bx..y * w + xe].iter().map(|&v| v as f64).sum::<f64>();
                }
                let avg = (sum / ((ye - by) * (xe - bx)) as f64) as f32;
                for y in by..ye {
                    plane[y * w + bx..y * w + xe].fill(avg);
                }
            }
        }
    }
    out
}

pub fn apply_corruption(image: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity must be 1..=5, got {}", spec.severity)));
    }
    apply_strength(image, spec.kind, spec.strength(), spec.seed)
}

/// Corrupts every image, image `i` with seed `spec.seed ^ i`. Labels are kept.
pub fn corrupt_dataset(data: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let [c, h, w] = data.image_shape();
    let per = c * h * w;
    let images: Vec<Vec<f32>> = data
        .images()
        .data()
        .par_chunks(per.max(1))
        .take(data.len())
        .enumerate()
        .map(|(i, px)| {
            let img = Tensor::new(vec![c, h, w], px.to_vec())?;
            let s = CorruptionSpec {
                seed: spec.seed ^ i as u64,
                ..*spec
            };
            Ok(apply_corruption(&img, &s)?.into_data())
        })
        .collect::<Result<_>>()?;
    let mut out = data.with_images(Tensor::new(data.images().shape().to_vec(), images.concat())?)?;
    out.set_name(format!("{}+{}{}", data.name(), spec.kind, spec.severity));
    Ok(out)
}
