//! Procedurally rendered ten-class digit glyphs.
//!
//! Each class is a fixed set of strokes in the unit square. Every image draws
//! its own affine jitter and stroke width, then a style decides polarity,
//! background clutter, contrast, and noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::Result;

pub const GLYPH_SIZE: usize = 28;
pub const GLYPH_CLASSES: usize = 10;

/// Desk-scale default sizes.
pub const DEFAULT_TRAIN: usize = 10_000;
pub const DEFAULT_TEST: usize = 2_000;

type Polyline = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Polyline {
    let steps = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn strokes(class: usize) -> Vec<Polyline> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.2, 0.31, 0.0, 360.0)],
        1 => vec![vec![(0.38, 0.3), (0.52, 0.18), (0.52, 0.82)]],
        2 => {
            let mut top = arc(0.5, 0.35, 0.18, 0.17, 180.0, 390.0);
            top.extend([(0.3, 0.82), (0.72, 0.82)]);
            vec![top]
        }
        3 => vec![arc(0.5, 0.34, 0.16, 0.16, 200.0, 450.0), arc(0.5, 0.66, 0.18, 0.16, 270.0, 520.0)],
        4 => vec![vec![(0.62, 0.82), (0.62, 0.18), (0.28, 0.62), (0.74, 0.62)]],
        5 => {
            let mut s = vec![(0.7, 0.18), (0.36, 0.18), (0.35, 0.5)];
            s.extend(arc(0.5, 0.64, 0.18, 0.18, 230.0, 520.0));
            vec![s]
        }
        6 => vec![vec![(0.64, 0.18), (0.36, 0.5)], arc(0.5, 0.64, 0.17, 0.18, 0.0, 360.0)],
        7 => vec![vec![(0.3, 0.18), (0.72, 0.18), (0.44, 0.82)]],
        8 => vec![arc(0.5, 0.33, 0.15, 0.15, 0.0, 360.0), arc(0.5, 0.66, 0.18, 0.17, 0.0, 360.0)],
        9 => vec![arc(0.5, 0.36, 0.17, 0.17, 0.0, 360.0), vec![(0.67, 0.36), (0.6, 0.82)]],
        _ => unreachable!("ten classes"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Anti-aliased coverage in `[0, 1]` of `lines` drawn at half-width `r`,
/// all in pixel units.
fn rasterize(lines: &[Polyline], r: f64, out: &mut [f64]) {
    for (i, px) in out.iter_mut().enumerate() {
        let p = ((i % GLYPH_SIZE) as f64 + 0.5, (i / GLYPH_SIZE) as f64 + 0.5);
        let d = lines
            .iter()
            .flat_map(|l| l.windows(2).map(|w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        *px = px.max((r - d + 0.5).clamp(0.0, 1.0));
    }
}

/// Appearance of a rendered set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStyle {
    /// Probability that an image is drawn dark-on-light.
    pub invert_prob: f64,
    /// Number of distractor strokes per image, drawn uniformly in `0..=clutter`.
    pub clutter: usize,
    /// Intensity range of the final image: pixels map to
    /// `0.5 + contrast * (v - 0.5)`.
    pub contrast: f64,
    /// Std of additive pixel noise before clamping.
    pub noise: f64,
}

impl GlyphStyle {
    pub const SOURCE: Self = Self {
        invert_prob: 0.1,
        clutter: 2,
        contrast: 1.0,
        noise: 0.05,
    };

    /// Inverted, cluttered, and lower contrast relative to the source.
    pub const TARGET: Self = Self {
        invert_prob: 1.0,
        clutter: 6,
        contrast: 0.45,
        noise: 0.08,
    };
}

fn render_one(class: usize, style: &GlyphStyle, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = GLYPH_SIZE as f64;
    let angle = rng.gen_range(-0.4..0.4);
    let scale = rng.gen_range(0.7..1.15);
    let shear = rng.gen_range(-0.25..0.25);
    let (tx, ty) = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.06..0.06));
    let (sin, cos) = f64::sin_cos(angle);
    let warp = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (x, y) = (scale * (cos * x - sin * y), scale * (sin * x + cos * y));
        ((x + 0.5 + tx) * s, (y + 0.5 + ty) * s)
    };
    let glyph: Vec<Polyline> = strokes(class).into_iter().map(|l| l.into_iter().map(warp).collect()).collect();
    let width = rng.gen_range(0.9..1.6);
    let mut cover = vec![0.0; GLYPH_SIZE * GLYPH_SIZE];
    rasterize(&glyph, width, &mut cover);

    let clutter_count = rng.gen_range(0..=style.clutter);
    if clutter_count > 0 {
        let mut clutter = vec![0.0; cover.len()];
        let lines: Vec<Polyline> = (0..clutter_count)
            .map(|_| {
                let a = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let dir = rng.gen_range(0.0..2.0 * PI);
                let len = rng.gen_range(3.0..9.0);
                vec![a, (a.0 + len * dir.cos(), a.1 + len * dir.sin())]
            })
            .collect();
        rasterize(&lines, rng.gen_range(0.5..1.0), &mut clutter);
        let level = rng.gen_range(0.4..0.8);
        cover.iter_mut().zip(&clutter).for_each(|(c, k)| *c = c.max(level * k));
    }

    let ink = rng.gen_range(0.75..1.0);
    let background = rng.gen_range(0.0..0.15);
    let invert = rng.gen_bool(style.invert_prob);
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite std");
    cover
        .iter()
        .map(|&c| {
            let v = background + (ink - background) * c;
            let v = if invert { 1.0 - v } else { v };
            let v = 0.5 + style.contrast * (v - 0.5) + noise.sample(rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// `n` glyph images, classes cycling `0..10` so every class has `n / 10`
/// items when `n` is a multiple of ten.
pub fn render_glyphs(name: &str, n: usize, seed: u64, style: &GlyphStyle) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * GLYPH_SIZE * GLYPH_SIZE);
    let labels: Vec<usize> = (0..n).map(|i| i % GLYPH_CLASSES).collect();
    for &class in &labels {
        data.extend(render_one(class, style, &mut rng));
    }
    let images = Tensor::new(vec![n, 1, GLYPH_SIZE, GLYPH_SIZE], data)?;
    Dataset::new(name, images, Some(labels), GLYPH_CLASSES)
}

/// Source and target sets whose only difference is the rendering style.
#[derive(Clone, Debug)]
pub struct ShiftedPair {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target: Dataset,
}

/// Desk-scale shifted pair with explicit sizes.
pub fn make_shifted_pair_sized(seed: u64, train: usize, test: usize) -> Result<ShiftedPair> {
    // Distinct streams per split; the constants only separate them.
    Ok(ShiftedPair {
        source_train: render_glyphs("glyphs-source-train", train, seed, &GlyphStyle::SOURCE)?,
        source_test: render_glyphs("glyphs-source-test", test, seed ^ 0x5eed_0001, &GlyphStyle::SOURCE)?,
        target: render_glyphs("glyphs-target", test, seed ^ 0x5eed_0002, &GlyphStyle::TARGET)?,
    })
}

/// `(source, target)` at the desk default sizes.
pub fn make_shifted_pair(seed: u64) -> Result<(Dataset, Dataset)> {
    let p = make_shifted_pair_sized(seed, DEFAULT_TRAIN, DEFAULT_TEST)?;
    Ok((p.source_train, p.target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = make_shifted_pair_sized(3, 50, 30).unwrap();
        let b = make_shifted_pair_sized(3, 50, 30).unwrap();
        assert_eq!(a.source_train, b.source_train);
        assert_eq!(a.target, b.target);
        for d in [&a.source_train, &a.target] {
            let mut counts = [0; 10];
            d.labels().unwrap().iter().for_each(|&l| counts[l] += 1);
            assert!(counts.iter().all(|&c| c == d.len() / 10));
        }
        assert_ne!(a.source_train.images(), make_shifted_pair_sized(4, 50, 30).unwrap().source_train.images());
    }

    #[test]
    fn target_is_low_contrast_and_inverted() {
        let p = make_shifted_pair_sized(1, 200, 200).unwrap();
        let (src, tgt) = (p.source_test.norm(), p.target.norm());
        assert!(tgt.mean[0] > src.mean[0]);
        assert!(tgt.std[0] < src.std[0]);
        // contrast 0.55 keeps target pixels inside [0.225, 0.775] before noise
        let extreme = p.target.images().data().iter().filter(|&&v| !(0.05..=0.95).contains(&v)).count();
        assert!(extreme < p.target.images().len() / 100);
    }

    #[test]
    fn glyphs_have_ink() {
        let d = render_glyphs("g", 10, 0, &GlyphStyle { invert_prob: 0.0, clutter: 0, contrast: 1.0, noise: 0.0 }).unwrap();
        for img in d.images().data().chunks(GLYPH_SIZE * GLYPH_SIZE) {
            let ink = img.iter().filter(|&&v| v > 0.6).count();
            assert!((20..400).contains(&ink), "{ink}");
        }
    }
}
