//! Deterministic synthetic stacks standing in for OCT / lung-CT data.
//!
//! Each slice has an elliptical ROI filled with a smooth texture, a dim
//! textured surround, and bright elliptical lesions marked in the
//! annotation. A fixed fraction of slices per stack is degraded with extra
//! blur and contrast compression so that the quality metrics separate them.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SliceRecord, Split, StackDataset, MIN_IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, Image, Mask};
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stacks: usize,
    pub slices_per_stack: usize,
    pub image_size: usize,
    /// Inclusive lesion count interval per slice.
    pub lesion_count_range: (u32, u32),
    /// Inclusive interval for each lesion semi-axis, in pixels.
    pub lesion_radius_range: (u32, u32),
    /// Gaussian σ applied to degraded slices.
    pub blur_sigma_range: (f32, f32),
    /// Contrast compression factor applied to degraded slices.
    pub contrast_range: (f32, f32),
    /// Base standard deviation of additive Gaussian noise.
    pub noise_level: f32,
    /// Fraction of slices per stack receiving blur + contrast damage.
    pub degraded_fraction: f32,
    /// Fraction of slices per stack tagged as the held-out test split.
    pub test_fraction: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_stacks: 3,
            slices_per_stack: 60,
            image_size: 64,
            lesion_count_range: (0, 3),
            lesion_radius_range: (12, 18),
            blur_sigma_range: (1.5, 3.0),
            contrast_range: (0.4, 0.7),
            noise_level: 0.04,
            degraded_fraction: 0.3,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_stacks == 0 || self.slices_per_stack == 0 {
            return bad("n_stacks and slices_per_stack must be positive".into());
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return bad(format!("image_size must be at least {MIN_IMAGE_SIZE}"));
        }
        let (c0, c1) = self.lesion_count_range;
        let (r0, r1) = self.lesion_radius_range;
        if c0 > c1 || r0 > r1 {
            return bad("lesion ranges must be non-empty".into());
        }
        if r0 == 0 && c1 > 0 {
            return bad("lesion radius must be at least 1".into());
        }
        for (name, (lo, hi)) in [
            ("blur_sigma_range", self.blur_sigma_range),
            ("contrast_range", self.contrast_range),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be a non-empty non-negative interval"));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be non-negative".into());
        }
        for (name, v) in [
            ("degraded_fraction", self.degraded_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

struct Wave {
    ky: f32,
    kx: f32,
    phase: f32,
}

struct StackLayout {
    center: (f32, f32),
    axes: (f32, f32),
    base: f32,
    waves: Vec<Wave>,
    degraded: Vec<bool>,
    test: Vec<bool>,
}

fn pick_flags(rng: &mut impl Rng, n: usize, fraction: f32) -> Vec<bool> {
    let k = (fraction as f64 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &order[..k.min(n)] {
        flags[i] = true;
    }
    flags
}

fn stack_layout(spec: &SyntheticSpec, stack: usize) -> StackLayout {
    let n = spec.image_size as f32;
    let mut rng = stream(spec.seed, &[tag::SYNTH_STACK, stack as u64]);
    let center = (
        n / 2.0 + rng.random_range(-0.04..=0.04) * n,
        n / 2.0 + rng.random_range(-0.04..=0.04) * n,
    );
    let axes = (n * rng.random_range(0.36..=0.42), n * rng.random_range(0.42..=0.47));
    let base = rng.random_range(0.30..=0.42);
    let waves = (0..3)
        .map(|_| Wave {
            ky: rng.random_range(1.0..=3.5),
            kx: rng.random_range(1.0..=3.5),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
        })
        .collect();
    let degraded = pick_flags(&mut rng, spec.slices_per_stack, spec.degraded_fraction);
    let mut split_rng = stream(spec.seed, &[tag::SPLIT, stack as u64]);
    let test = pick_flags(&mut split_rng, spec.slices_per_stack, spec.test_fraction);
    StackLayout {
        center,
        axes,
        base,
        waves,
        degraded,
        test,
    }
}

/// Pixel membership of an axis-aligned ellipse with integer centre and
/// semi-axes, evaluated in exact integer arithmetic.
pub(crate) fn in_ellipse(r: i64, c: i64, cy: i64, cx: i64, ry: i64, rx: i64) -> bool {
    let (dy, dx) = (r - cy, c - cx);
    dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry
}

fn place_lesion(rng: &mut impl Rng, roi: &Mask, radius: (u32, u32)) -> Option<Vec<(usize, usize)>> {
    let (h, w) = roi.dim();
    for _ in 0..200 {
        let ry = rng.random_range(radius.0..=radius.1) as i64;
        let rx = rng.random_range(radius.0..=radius.1) as i64;
        let cy = rng.random_range(0..h) as i64;
        let cx = rng.random_range(0..w) as i64;
        if cy - ry < 0 || cx - rx < 0 || cy + ry >= h as i64 || cx + rx >= w as i64 {
            continue;
        }
        let pixels: Vec<(usize, usize)> = (cy - ry..=cy + ry)
            .flat_map(|r| (cx - rx..=cx + rx).map(move |c| (r, c)))
            .filter(|&(r, c)| in_ellipse(r, c, cy, cx, ry, rx))
            .map(|(r, c)| (r as usize, c as usize))
            .collect();
        if pixels.iter().all(|&p| roi[p] == 1) {
            return Some(pixels);
        }
    }
    None
}

fn generate_slice(spec: &SyntheticSpec, layout: &StackLayout, stack: usize, slice: usize) -> SliceRecord {
    let size = spec.image_size;
    let n = size as f32;
    let mut rng = stream(spec.seed, &[tag::SYNTH_SLICE, stack as u64, slice as u64]);

    let t = if spec.slices_per_stack > 1 {
        slice as f32 / (spec.slices_per_stack - 1) as f32
    } else {
        0.5
    };
    let scale = 0.85 + 0.15 * (std::f32::consts::PI * t).sin();
    let (ay, ax) = (layout.axes.0 * scale, layout.axes.1 * scale);
    let (cy, cx) = layout.center;
    let roi: Mask = Array2::from_shape_fn((size, size), |(r, c)| {
        let dy = (r as f32 + 0.5 - cy) / ay;
        let dx = (c as f32 + 0.5 - cx) / ax;
        u8::from(dy * dy + dx * dx <= 1.0)
    });

    let drift = slice as f32 * 0.15;
    let texture = |r: usize, c: usize| -> f32 {
        let y = r as f32 / n;
        let x = c as f32 / n;
        layout
            .waves
            .iter()
            .map(|wv| (std::f32::consts::TAU * (wv.ky * y + wv.kx * x) + wv.phase + drift).sin())
            .sum::<f32>()
            / layout.waves.len() as f32
    };

    let mut image: Image = Array2::from_shape_fn((size, size), |(r, c)| {
        if roi[[r, c]] == 1 {
            layout.base + 0.06 * texture(r, c)
        } else {
            0.1 + 0.04 * texture(r, c)
        }
    });

    let mut annotation = Mask::zeros((size, size));
    let lesions = rng.random_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
    for _ in 0..lesions {
        let contrast: f32 = rng.random_range(0.25..=0.4);
        if let Some(pixels) = place_lesion(&mut rng, &roi, spec.lesion_radius_range) {
            for p in pixels {
                if annotation[p] == 0 {
                    image[p] += contrast;
                }
                annotation[p] = 1;
            }
        }
    }

    let noise_scale: f32 = rng.random_range(0.8..=1.2);
    let sigma = spec.noise_level * noise_scale;
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    if layout.degraded[slice] {
        let (b0, b1) = spec.blur_sigma_range;
        let (k0, k1) = spec.contrast_range;
        let blur = rng.random_range(b0..=b1);
        let k = rng.random_range(k0..=k1);
        image = gaussian_blur(&image, blur);
        let mean = image.mean().unwrap_or(0.0);
        image.mapv_inplace(|v| mean + (v - mean) * k);
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));

    SliceRecord {
        stack_id: format!("syn{stack:02}"),
        slice_index: slice,
        image,
        roi_mask: Some(roi),
        annotation: Some(annotation),
        split: if layout.test[slice] { Split::Test } else { Split::Pool },
    }
}

/// Generates `n_stacks × slices_per_stack` annotated slices.
pub fn generate_synthetic_stack(spec: &SyntheticSpec) -> Result<StackDataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n_stacks * spec.slices_per_stack);
    for stack in 0..spec.n_stacks {
        let layout = stack_layout(spec, stack);
        for slice in 0..spec.slices_per_stack {
            records.push(generate_slice(spec, &layout, stack, slice));
        }
    }
    StackDataset::new(records)
}
