//! Paired random affine augmentation for an image and its mask.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{Image, Mask};

/// Sampling ranges; each parameter is drawn uniformly from `[-r, r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Radians.
    pub rotation: f64,
    /// Fraction of the image width.
    pub width_shift: f64,
    /// Fraction of the image height.
    pub height_shift: f64,
    /// Shear angle in radians.
    pub shear: f64,
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation: 0.2,
            width_shift: 0.2,
            height_shift: 0.2,
            shear: 0.2,
            horizontal_flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation, self.width_shift, self.height_shift, self.shear];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(
                "augmentation ranges must be finite and non-negative".into(),
            ));
        }
        if self.shear >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("shear must stay below π/2".into()));
        }
        Ok(())
    }
}

/// One concrete transform. Shifts are in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear: f64,
    pub flip: bool,
}

impl AffineParams {
    pub fn sample(config: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation = draw(config.rotation);
        let shift_x = draw(config.width_shift) * width as f64;
        let shift_y = draw(config.height_shift) * height as f64;
        let shear = draw(config.shear);
        let flip = config.horizontal_flip && rng.random_bool(0.5);
        Self {
            rotation,
            shift_x,
            shift_y,
            shear,
            flip,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Maps an output pixel centre `(row, col)` to its source position.
    ///
    /// Forward model about the image centre `c`:
    /// `dst = R·Sh·F·(src - c) + c + t`, with `F` the optional mirror.
    fn source_of(&self, row: f64, col: f64, cy: f64, cx: f64) -> (f64, f64) {
        let x = col - cx - self.shift_x;
        let y = row - cy - self.shift_y;
        // R⁻¹
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (c * x + s * y, -s * x + c * y);
        // Sh = [[1, -sin φ], [0, cos φ]], inverse [[1, tan φ], [0, 1/cos φ]]
        let (ss, sc) = self.shear.sin_cos();
        let (x, y) = (x + ss / sc * y, y / sc);
        let x = if self.flip { -x } else { x };
        (y + cy, x + cx)
    }
}

/// Applies `params` to both maps: bilinear for the image, nearest for the
/// mask, zero outside the source grid.
pub fn apply_affine(image: &Image, mask: &Mask, params: &AffineParams) -> Result<(Image, Mask)> {
    if image.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "image is {:?} but mask is {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    if params.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out_img = Image::zeros((h, w));
    let mut out_mask = Mask::zeros((h, w));
    let fetch = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            image[[r as usize, c as usize]]
        }
    };
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = params.source_of(r as f64, c as f64, cy, cx);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1) * fx;
            let bot = fetch(y0 + 1, x0) * (1.0 - fx) + fetch(y0 + 1, x0 + 1) * fx;
            out_img[[r, c]] = top * (1.0 - fy) + bot * fy;

            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                out_mask[[r, c]] = mask[[ny as usize, nx as usize]];
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Draws one transform from `rng` and applies it to both maps.
pub fn augment(image: &Image, mask: &Mask, config: &AugmentConfig, rng: &mut impl Rng) -> Result<(Image, Mask)> {
    if !config.enabled {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = image.dim();
    let params = AffineParams::sample(config, h, w, rng);
    apply_affine(image, mask, &params)
}

/// Column-reversal of any 2-D array.
pub fn flip_horizontal<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}
