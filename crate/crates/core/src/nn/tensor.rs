use crate::error::{Error, Result};

/// Dense NCHW `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {n}×{c}×{h}×{w} tensor",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn plane(&self, i: usize, ch: usize) -> &[f32] {
        let hw = self.hw();
        let start = (i * self.c + ch) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, ch: usize) -> &mut [f32] {
        let hw = self.hw();
        let start = (i * self.c + ch) * hw;
        &mut self.data[start..start + hw]
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let (n, h, w) = (first.n, first.h, first.w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            let mut offset = 0;
            let dst = out.sample_mut(i);
            for p in parts {
                debug_assert_eq!((p.n, p.h, p.w), (n, h, w));
                let src = p.sample(i);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for the given channel counts.
    pub fn split_channels(&self, channels: &[usize]) -> Vec<Tensor> {
        let mut parts: Vec<Tensor> = channels
            .iter()
            .map(|&c| Tensor::zeros(self.n, c, self.h, self.w))
            .collect();
        let hw = self.hw();
        for i in 0..self.n {
            let src = self.sample(i);
            let mut offset = 0;
            for p in parts.iter_mut() {
                let len = p.c * hw;
                p.sample_mut(i).copy_from_slice(&src[offset..offset + len]);
                offset += len;
            }
        }
        parts
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(samples: &[Tensor]) -> Tensor {
        let first = &samples[0];
        let mut data = Vec::with_capacity(samples.len() * first.data.len());
        for s in samples {
            debug_assert_eq!((s.c, s.h, s.w), (first.c, first.h, first.w));
            data.extend_from_slice(&s.data);
        }
        Tensor {
            n: samples.iter().map(|s| s.n).sum(),
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        }
    }

    /// Splits a batch into single-sample tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.n)
            .map(|i| Tensor {
                n: 1,
                c: self.c,
                h: self.h,
                w: self.w,
                data: self.sample(i).to_vec(),
            })
            .collect()
    }
}
