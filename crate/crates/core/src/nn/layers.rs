//! Layers with hand-written backward passes.
//!
//! Every `backward` accumulates parameter gradients into [`Grads`] and
//! returns the gradient with respect to the layer input. Reductions run in
//! a fixed order so that training is bitwise reproducible.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;

/// `C = A·B + beta·C` for row-major `C (m×n)`.
///
/// `a_t` means `A` is stored as `k×m`; `b_t` means `B` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe
    // in-bounds row-/column-major layouts of those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `c×h×w` sample into `(c·9)×(h·w)` columns for a 3×3 kernel
/// with zero padding 1.
fn im2col3(src: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates columns back onto the sample grid.
fn col2im3(col: &[f32], c: usize, h: usize, w: usize, dst: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => prow[..w - 1].iter_mut().zip(&src[1..]).for_each(|(p, s)| *p += s),
                        1 => prow.iter_mut().zip(src).for_each(|(p, s)| *p += s),
                        _ => prow[1..].iter_mut().zip(&src[..w - 1]).for_each(|(p, s)| *p += s),
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a 1×1 or 3×3 kernel and bias.
/// Weight layout `[cout, cin, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1×1 and 3×3 kernels");
        let weight = store.he_uniform(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            cin * kernel * kernel,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), vec![cout], true);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.hw();
        let (wt, bias) = (store.get(self.weight), store.get(self.bias));
        let mut out = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut col = if self.kernel == 3 {
            vec![0.0f32; self.taps() * hw]
        } else {
            Vec::new()
        };
        for i in 0..x.n {
            let dst = out.sample_mut(i);
            for (co, b) in bias.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(*b);
            }
            let cols: &[f32] = if self.kernel == 3 {
                im2col3(x.sample(i), x.c, x.h, x.w, &mut col);
                &col
            } else {
                x.sample(i)
            };
            gemm(self.cout, self.taps(), hw, wt, false, cols, false, dst, 1.0);
        }
        out
    }

    /// Returns `dL/dx` when `need_input_grad`, otherwise `None`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &Tensor,
        dy: &Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let hw = x.hw();
        let taps = self.taps();
        let wt = store.get(self.weight);
        let mut col = vec![0.0f32; if self.kernel == 3 { taps * hw } else { 0 }];
        let mut dcol = vec![0.0f32; if need_input_grad { taps * hw } else { 0 }];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let dyi = dy.sample(i);
            {
                let db = grads.get_mut(self.bias);
                for (co, g) in db.iter_mut().enumerate() {
                    *g += dyi[co * hw..(co + 1) * hw].iter().sum::<f32>();
                }
            }
            let cols: &[f32] = if self.kernel == 3 {
                im2col3(x.sample(i), x.c, x.h, x.w, &mut col);
                &col
            } else {
                x.sample(i)
            };
            gemm(
                self.cout,
                hw,
                taps,
                dyi,
                false,
                cols,
                true,
                grads.get_mut(self.weight),
                1.0,
            );
            if let Some(dx) = dx.as_mut() {
                if self.kernel == 3 {
                    gemm(taps, self.cout, hw, wt, true, dyi, false, &mut dcol, 0.0);
                    col2im3(&dcol, x.c, x.h, x.w, dx.sample_mut(i));
                } else {
                    gemm(taps, self.cout, hw, wt, true, dyi, false, dx.sample_mut(i), 0.0);
                }
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.taps() * self.cout + self.cout
    }
}

/// 2×2, stride-2 transposed convolution. Weight layout `[cin, cout, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTranspose2x2 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.he_uniform(format!("{name}.weight"), vec![cin, cout, 2, 2], cin, rng);
        let bias = store.zeros(format!("{name}.bias"), vec![cout], true);
        Self {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (ow, ohw) = (2 * w, 4 * hw);
        let (wt, bias) = (store.get(self.weight), store.get(self.bias));
        let mut out = Tensor::zeros(x.n, self.cout, 2 * h, 2 * w);
        let mut tmp = vec![0.0f32; self.cout * 4 * hw];
        for i in 0..x.n {
            gemm(self.cout * 4, self.cin, hw, wt, true, x.sample(i), false, &mut tmp, 0.0);
            let dst = out.sample_mut(i);
            for co in 0..self.cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &tmp[(co * 4 + d) * hw..][..hw];
                    let plane = &mut dst[co * ohw..(co + 1) * ohw];
                    for y in 0..h {
                        let orow = &mut plane[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                        for xx in 0..w {
                            orow[2 * xx + dx] = src[y * w + xx] + bias[co];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (ow, ohw) = (2 * w, 4 * hw);
        let wt = store.get(self.weight);
        let mut dtmp = vec![0.0f32; self.cout * 4 * hw];
        let mut dx = Tensor::zeros(x.n, x.c, h, w);
        for i in 0..x.n {
            let dyi = dy.sample(i);
            {
                let db = grads.get_mut(self.bias);
                for (co, g) in db.iter_mut().enumerate() {
                    *g += dyi[co * ohw..(co + 1) * ohw].iter().sum::<f32>();
                }
            }
            for co in 0..self.cout {
                let plane = &dyi[co * ohw..(co + 1) * ohw];
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    let dst = &mut dtmp[(co * 4 + d) * hw..][..hw];
                    for y in 0..h {
                        let orow = &plane[(2 * y + ddy) * ow..(2 * y + ddy + 1) * ow];
                        for xx in 0..w {
                            dst[y * w + xx] = orow[2 * xx + ddx];
                        }
                    }
                }
            }
            gemm(
                self.cin,
                hw,
                self.cout * 4,
                x.sample(i),
                false,
                &dtmp,
                true,
                grads.get_mut(self.weight),
                1.0,
            );
            gemm(
                self.cin,
                self.cout * 4,
                hw,
                wt,
                false,
                &dtmp,
                false,
                dx.sample_mut(i),
                0.0,
            );
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * 4 + self.cout
    }
}

pub const BN_EPS: f32 = 1e-5;
/// Floor of the running-statistics update factor; earlier steps use a
/// cumulative average (factor `1/t`).
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization with trainable scale/shift and running
/// statistics buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub steps: ParamId,
    pub channels: usize,
}

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: store.zeros(format!("{name}.beta"), vec![channels], true),
            running_mean: store.zeros(format!("{name}.running_mean"), vec![channels], false),
            running_var: store.filled(format!("{name}.running_var"), vec![channels], 1.0, false),
            steps: store.zeros(format!("{name}.steps"), vec![1], false),
            channels,
        }
    }

    pub fn forward_inference(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        let (rm, rv) = (store.get(self.running_mean), store.get(self.running_var));
        let mut out = x.clone();
        for i in 0..x.n {
            for ch in 0..x.c {
                let scale = g[ch] / (rv[ch] + BN_EPS).sqrt();
                let shift = b[ch] - rm[ch] * scale;
                out.plane_mut(i, ch).iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Normalizes with batch statistics and updates the running buffers.
    pub fn forward_train(&self, store: &mut ParamStore, x: &Tensor) -> (Tensor, BatchNormCache) {
        let count = (x.n * x.hw()) as f64;
        let mut means = vec![0.0f32; x.c];
        let mut vars = vec![0.0f32; x.c];
        for ch in 0..x.c {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                sum += x.plane(i, ch).iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                sq += x
                    .plane(i, ch)
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>();
            }
            means[ch] = mean as f32;
            vars[ch] = (sq / count) as f32;
        }

        let step = store.get(self.steps)[0] + 1.0;
        store.get_mut(self.steps)[0] = step;
        let factor = (1.0 / step).max(BN_MOMENTUM);
        let unbias = if count > 1.0 {
            (count / (count - 1.0)) as f32
        } else {
            1.0
        };
        for ch in 0..x.c {
            let rm = &mut store.get_mut(self.running_mean)[ch];
            *rm += factor * (means[ch] - *rm);
            let rv = &mut store.get_mut(self.running_var)[ch];
            *rv += factor * (vars[ch] * unbias - *rv);
        }

        let inv_std: Vec<f32> = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        let mut xhat = x.clone();
        let mut out = x.clone();
        for i in 0..x.n {
            for ch in 0..x.c {
                let (m, s) = (means[ch], inv_std[ch]);
                let xh = xhat.plane_mut(i, ch);
                xh.iter_mut().for_each(|v| *v = (*v - m) * s);
                out.plane_mut(i, ch)
                    .iter_mut()
                    .zip(xh.iter())
                    .for_each(|(o, &v)| *o = g[ch] * v + b[ch]);
            }
        }
        (out, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let xhat = &cache.xhat;
        let count = (dy.n * dy.hw()) as f32;
        let g = store.get(self.gamma);
        let mut dgamma = vec![0.0f32; dy.c];
        let mut dbeta = vec![0.0f32; dy.c];
        for ch in 0..dy.c {
            let (mut sg, mut sb) = (0.0f64, 0.0f64);
            for i in 0..dy.n {
                for (&d, &xh) in dy.plane(i, ch).iter().zip(xhat.plane(i, ch)) {
                    sg += (d * xh) as f64;
                    sb += d as f64;
                }
            }
            dgamma[ch] = sg as f32;
            dbeta[ch] = sb as f32;
        }
        grads
            .get_mut(self.gamma)
            .iter_mut()
            .zip(&dgamma)
            .for_each(|(a, b)| *a += b);
        grads
            .get_mut(self.beta)
            .iter_mut()
            .zip(&dbeta)
            .for_each(|(a, b)| *a += b);

        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for i in 0..dy.n {
            for ch in 0..dy.c {
                let k = g[ch] * cache.inv_std[ch] / count;
                let (sg, sb) = (dgamma[ch], dbeta[ch]);
                let src = dy.plane(i, ch);
                let xh = xhat.plane(i, ch);
                dx.plane_mut(i, ch)
                    .iter_mut()
                    .zip(src.iter().zip(xh))
                    .for_each(|(o, (&d, &x))| *o = k * (count * d - sb - x * sg));
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(&y.data).for_each(|(d, &v)| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

pub fn sigmoid_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(&y.data).for_each(|(d, &s)| *d *= s * (1.0 - s));
    dx
}

/// 2×2 max pooling, stride 2. Returns the pooled tensor and the flat source
/// index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    let mut k = 0;
    for i in 0..x.n {
        for ch in 0..x.c {
            let plane = x.plane(i, ch);
            let base = (i * x.c + ch) * x.hw();
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * y + dy) * x.w + 2 * xx + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.data[k] = plane[best];
                    arg[k] = (base + best) as u32;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&src, &g) in arg.iter().zip(&dy.data) {
        dx.data[src as usize] += g;
    }
    dx
}

/// Inverted dropout; returns the scaled mask (0 or `1/(1-rate)`).
pub fn dropout_inplace(x: &mut Tensor, rate: f32, rng: &mut impl Rng) -> Vec<f32> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.data.len())
        .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
        .collect();
    x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    mask
}

pub fn dropout_backward(mask: &[f32], dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[99]);
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct nested-loop convolution oracle.
    fn conv_oracle(x: &Tensor, wt: &[f32], b: &[f32], cout: usize, k: usize) -> Tensor {
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for co in 0..cout {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = b[co] as f64;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = wt[((co * x.c + ci) * k + ky) * k + kx] as f64;
                                    acc += wv * x.plane(i, ci)[sy as usize * x.w + sx as usize] as f64;
                                }
                            }
                        }
                        out.plane_mut(i, co)[y * x.w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut store = ParamStore::default();
        let mut rng = stream(1, &[1]);
        let conv = Conv2d::new(&mut store, "c", 3, 4, 3, &mut rng);
        store.get_mut(conv.bias).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let x = rand_tensor(2, 3, 5, 6, 2);
        let y = conv.forward(&store, &x);
        let o = conv_oracle(&x, store.get(conv.weight), store.get(conv.bias), 4, 3);
        assert!(max_abs_diff(&y.data, &o.data) < 1e-5);
    }

    /// Checks the input and weight gradients of `L = Σ r ⊙ f(x)` against
    /// central differences.
    fn check_grad<F>(
        x: &Tensor,
        store: &mut ParamStore,
        ids: &[ParamId],
        f: F,
        analytic: &dyn Fn(&ParamStore, &mut Grads, &Tensor) -> Tensor,
    ) where
        F: Fn(&ParamStore, &Tensor) -> Tensor,
    {
        let y = f(store, x);
        let r = rand_tensor(y.n, y.c, y.h, y.w, 77);
        let loss = |s: &ParamStore, x: &Tensor| -> f64 {
            f(s, x)
                .data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut grads = store.zero_grads();
        let dx = analytic(store, &mut grads, &r);
        let h = 1e-2f32;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let num = (loss(store, &xp) - loss(store, &xm)) / (2.0 * h as f64);
            assert!(
                (num - dx.data[idx] as f64).abs() < 2e-2 * (1.0 + num.abs()),
                "dx[{idx}]: {num} vs {}",
                dx.data[idx]
            );
        }
        for &id in ids {
            for idx in (0..store.get(id).len()).step_by(5) {
                let orig = store.get(id)[idx];
                store.get_mut(id)[idx] = orig + h;
                let lp = loss(store, x);
                store.get_mut(id)[idx] = orig - h;
                let lm = loss(store, x);
                store.get_mut(id)[idx] = orig;
                let num = (lp - lm) / (2.0 * h as f64);
                let ana = grads.get(id)[idx] as f64;
                assert!(
                    (num - ana).abs() < 2e-2 * (1.0 + num.abs()),
                    "param {idx}: {num} vs {ana}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            let mut store = ParamStore::default();
            let mut rng = stream(3, &[k as u64]);
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, &mut rng);
            let x = rand_tensor(2, 2, 4, 5, 4);
            let ids = [conv.weight, conv.bias];
            let c2 = conv.clone();
            check_grad(&x, &mut store, &ids, move |s, x| conv.forward(s, x), &|s, g, dy| {
                c2.backward(s, g, &x, dy, true).unwrap()
            });
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut store = ParamStore::default();
        let mut rng = stream(5, &[0]);
        let up = ConvTranspose2x2::new(&mut store, "u", 3, 2, &mut rng);
        let x = rand_tensor(2, 3, 3, 2, 6);
        let ids = [up.weight, up.bias];
        let u2 = up.clone();
        check_grad(&x, &mut store, &ids, move |s, x| up.forward(s, x), &|s, g, dy| {
            u2.backward(s, g, &x, dy)
        });
    }

    #[test]
    fn conv_transpose_places_taps() {
        let mut store = ParamStore::default();
        let mut rng = stream(5, &[1]);
        let up = ConvTranspose2x2::new(&mut store, "u", 1, 1, &mut rng);
        store.get_mut(up.weight).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 10.0]).unwrap();
        let y = up.forward(&store, &x);
        assert_eq!(y.data, vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        store.get_mut(bn.gamma).copy_from_slice(&[1.5, 0.7]);
        store.get_mut(bn.beta).copy_from_slice(&[0.1, -0.3]);
        let x = rand_tensor(3, 2, 3, 3, 8);
        let ids = [bn.gamma, bn.beta];
        let (b1, b2) = (bn.clone(), bn.clone());
        check_grad(
            &x,
            &mut store,
            &ids,
            move |s, x| {
                let mut s = s.clone();
                b1.forward_train(&mut s, x).0
            },
            &|s, g, dy| {
                let mut s2 = s.clone();
                let (_, cache) = b2.forward_train(&mut s2, &x);
                b2.backward(s, g, &cache, dy)
            },
        );
    }

    #[test]
    fn first_batchnorm_step_copies_batch_stats() {
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        bn.forward_train(&mut store, &x);
        assert_eq!(store.get(bn.running_mean), &[3.0]);
        // unbiased: Σ(x-3)² / 3 = 14/3
        assert!((store.get(bn.running_var)[0] - 14.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 9.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let dy = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let dx = maxpool2_backward(x.shape(), &arg, &dy);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }
}
