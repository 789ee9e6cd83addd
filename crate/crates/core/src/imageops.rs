//! Small 2-D raster helpers shared by ingest, quality scoring, augmentation
//! and the network's resize operator.
//!
//! Intensity rasters are `Array2<f32>` in `[0, 1]`; masks are `Array2<u8>`
//! holding only 0 and 1. Everything indexes `[row, col]`.

use ndarray::Array2;

pub type Image = Array2<f32>;
pub type Mask = Array2<u8>;

/// One output coordinate's bilinear taps along an axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f32,
}

/// Half-pixel-centred (align-corners = false) sampling positions.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { (src - lo as f64) as f32 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of a row-major `h×w` plane into `oh×ow`.
pub fn resize_bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w);
    if h == oh && w == ow {
        return src.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0f32; oh * ow];
    for (oy, t) in ty.iter().enumerate() {
        let r0 = &src[t.lo * w..(t.lo + 1) * w];
        let r1 = &src[t.hi * w..(t.hi + 1) * w];
        let row = &mut out[oy * ow..(oy + 1) * ow];
        for (ox, s) in tx.iter().enumerate() {
            let top = r0[s.lo] + (r0[s.hi] - r0[s.lo]) * s.frac;
            let bot = r1[s.lo] + (r1[s.hi] - r1[s.lo]) * s.frac;
            row[ox] = top + (bot - top) * t.frac;
        }
    }
    out
}

/// Adjoint of [`resize_bilinear_plane`]: scatters an `oh×ow` gradient back
/// onto the `h×w` source grid.
pub fn resize_bilinear_plane_adjoint(grad_out: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    debug_assert_eq!(grad_out.len(), oh * ow);
    if h == oh && w == ow {
        return grad_out.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut grad = vec![0.0f32; h * w];
    for (oy, t) in ty.iter().enumerate() {
        for (ox, s) in tx.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            let gt = g * (1.0 - t.frac);
            let gb = g * t.frac;
            grad[t.lo * w + s.lo] += gt * (1.0 - s.frac);
            grad[t.lo * w + s.hi] += gt * s.frac;
            grad[t.hi * w + s.lo] += gb * (1.0 - s.frac);
            grad[t.hi * w + s.hi] += gb * s.frac;
        }
    }
    grad
}

pub fn resize_bilinear(image: &Image, oh: usize, ow: usize) -> Image {
    let (h, w) = image.dim();
    let src = image.as_standard_layout();
    let data = resize_bilinear_plane(src.as_slice().expect("standard layout"), h, w, oh, ow);
    Array2::from_shape_vec((oh, ow), data).expect("resize shape")
}

fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let rows: Vec<usize> = (0..oh).map(|o| nearest_index(o, h, oh)).collect();
    let cols: Vec<usize> = (0..ow).map(|o| nearest_index(o, w, ow)).collect();
    Array2::from_shape_fn((oh, ow), |(r, c)| src[[rows[r], cols[c]]])
}

pub(crate) fn to_f64<T: Copy + Into<f64>>(src: &Array2<T>) -> Array2<f64> {
    src.mapv(Into::into)
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// 3×3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate borders.
pub fn laplacian(image: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let at = |dr: isize, dc: isize| image[[clamp_index(r + dr, h), clamp_index(c + dc, w)]];
        at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1) - 4.0 * at(0, 0)
    })
}

/// Square-window median filter with replicate borders. `kernel` must be odd.
pub fn median_filter(image: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let half = (kernel / 2) as isize;
    let mut window = Vec::with_capacity(kernel * kernel);
    let mid = kernel * kernel / 2;
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            window.clear();
            for dr in -half..=half {
                let rr = clamp_index(r as isize + dr, h);
                for dc in -half..=half {
                    window.push(image[[rr, clamp_index(c as isize + dc, w)]]);
                }
            }
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out[[r, c]] = *m;
        }
    }
    out
}

/// Separable Gaussian blur (radius ⌈3σ⌉, replicate borders). σ ≤ 0 copies.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (h, w) = image.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                acc += k * image[[r, clamp_index(c as isize + d, w)]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                acc += k * tmp[[clamp_index(r as isize + d, h), c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Two-pass population variance; exact zero for constant input.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}
