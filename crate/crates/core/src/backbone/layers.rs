//! Channel-major tensors and the forward/backward kernels of each layer kind.

use crate::backbone::{FeatureMap, TapId};
use crate::image::ImageTensor;

#[derive(Debug, Clone)]
pub(crate) struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn from_image(image: &ImageTensor) -> Self {
        let (h, w, c) = image.shape();
        let src = image.data();
        let mut data = vec![0.0; h * w * c];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = src[p * c + ch];
            }
        }
        Self { c, h, w, data }
    }

    pub fn to_feature_map(&self, tap: TapId) -> FeatureMap {
        FeatureMap {
            tap,
            filters: self.c,
            positions: self.h * self.w,
            values: self.data.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn out_size(&self, n: usize) -> usize {
        (n - self.kernel) / self.stride + 1
    }

    fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.c, self.in_channels);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let s = self.stride;
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let input = &x.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let w = self.weight(oc, ic, ky, kx);
                        for oy in 0..oh {
                            let row = &input[(oy * s + ky) * x.w + kx..];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (d, &v) in dst.iter_mut().zip(&row[..ow]) {
                                    *d += w * v;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += w * row[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor3 {
            c: self.out_channels,
            h: oh,
            w: ow,
            data: out,
        }
    }

    /// Gradient with respect to the layer input given the gradient at its output.
    pub fn backward_input(&self, x: &Tensor3, grad_out: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let s = self.stride;
        let mut grad_in = vec![0.0; x.c * x.h * x.w];
        for (ic, gplane) in grad_in.chunks_exact_mut(x.h * x.w).enumerate() {
            for oc in 0..self.out_channels {
                let gout = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let w = self.weight(oc, ic, ky, kx);
                        for oy in 0..oh {
                            let src = &gout[oy * ow..(oy + 1) * ow];
                            let start = (oy * s + ky) * x.w + kx;
                            if s == 1 {
                                for (d, &g) in gplane[start..start + ow].iter_mut().zip(src) {
                                    *d += w * g;
                                }
                            } else {
                                for (ox, &g) in src.iter().enumerate() {
                                    gplane[start + ox * s] += w * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

pub(crate) fn relu(mut x: Tensor3) -> Tensor3 {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Masks `grad` by the active units of a ReLU whose output was `out`.
pub(crate) fn relu_backward(grad: &mut [f64], out: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Returns the pooled tensor and, per output element, the flat input index of
/// the (first) maximum.
pub(crate) fn max_pool(x: &Tensor3, size: usize) -> (Tensor3, Vec<usize>) {
    let (oh, ow) = (x.h / size, x.w / size);
    let mut out = Vec::with_capacity(x.c * oh * ow);
    let mut argmax = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * x.w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * x.w + ox * size + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor3 {
            c: x.c,
            h: oh,
            w: ow,
            data: out,
        },
        argmax,
    )
}

pub(crate) fn max_pool_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&idx, &v) in argmax.iter().zip(grad_out) {
        g[idx] += v;
    }
    g
}

pub(crate) fn global_average(x: &Tensor3) -> Tensor3 {
    let n = (x.h * x.w) as f64;
    let data = x
        .data
        .chunks_exact(x.h * x.w)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect();
    Tensor3 {
        c: x.c,
        h: 1,
        w: 1,
        data,
    }
}

pub(crate) fn global_average_backward(grad_out: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(channels * positions);
    for &v in &grad_out[..channels] {
        g.extend(std::iter::repeat(v / positions as f64).take(positions));
    }
    g
}
