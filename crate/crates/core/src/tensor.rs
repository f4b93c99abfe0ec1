//! Dense `H x W x C` float tensors and the handful of neural and image
//! operations the rest of the pipeline is built from.
//!
//! Storage is row-major `(y, x, c)`, so the channel vector of one position is a
//! contiguous slice. Convolution reductions accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Degenerate(alloc::format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("tensor contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor from a function of `(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Channel vector at `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channel `c` into a single-channel tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Tensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Repeats a single-channel tensor `n` times along the channel axis.
    pub fn replicate_channels(&self, n: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len() * n);
        for px in self.data.chunks(self.channels) {
            for _ in 0..n {
                data.extend_from_slice(px);
            }
        }
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels * n,
            data,
        }
    }

    /// Channel mean; turns an RGB image into grayscale.
    pub fn mean_channels(&self) -> Tensor {
        let inv = 1.0 / self.channels as f32;
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f32>() * inv)
            .collect();
        Tensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Bilinear sample at continuous `(x, y)`, coordinates clamped to the grid.
    pub fn sample_bilinear(&self, x: f32, y: f32, out: &mut [f32]) {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = libm::floorf(xc) as usize;
        let y0 = libm::floorf(yc) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        if fx == 0.0 && fy == 0.0 {
            out.copy_from_slice(self.pixel(y0, x0));
            return;
        }
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        for c in 0..self.channels {
            let top = p00[c] + (p01[c] - p00[c]) * fx;
            let bottom = p10[c] + (p11[c] - p10[c]) * fx;
            out[c] = top + (bottom - top) * fy;
        }
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / self.data.len().max(1) as f64
    }
}

/// One convolution layer with optional fused ReLU.
///
/// `weights` are stored `[out][in][kh][kw]`; packed copies for the forward and
/// input-gradient loops are built once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_relu: bool,
    weights: Vec<f32>,
    bias: Vec<f32>,
    // [out][kh][kw][in]
    packed_fwd: Vec<f32>,
    // [kh][kw][in][out]
    packed_bwd: Vec<f32>,
}

impl ConvLayerSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        has_relu: bool,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidModel("conv layer has a zero-sized dimension".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidModel("conv stride must be at least 1".into()));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::InvalidModel(alloc::format!(
                "conv weights have {} values, expected {}",
                weights.len(),
                expected
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidModel(alloc::format!(
                "conv bias has {} values, expected {}",
                bias.len(),
                out_channels
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("conv parameters contain non-finite values".into()));
        }
        let mut packed_fwd = vec![0.0; expected];
        let mut packed_bwd = vec![0.0; expected];
        for o in 0..out_channels {
            for i in 0..in_channels {
                for ky in 0..kernel_h {
                    for kx in 0..kernel_w {
                        let w = weights[((o * in_channels + i) * kernel_h + ky) * kernel_w + kx];
                        packed_fwd[((o * kernel_h + ky) * kernel_w + kx) * in_channels + i] = w;
                        packed_bwd[((ky * kernel_w + kx) * in_channels + i) * out_channels + o] = w;
                    }
                }
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            has_relu,
            weights,
            bias,
            packed_fwd,
            packed_bwd,
        })
    }

    /// Weights in `[out][in][kh][kw]` order.
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    /// Output spatial dims for an input of `(h, w)`, or `None` when it would be empty.
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// 2-D convolution (cross-correlation) with zero padding, ReLU iff `layer.has_relu`.
pub fn conv2d(input: &Tensor, layer: &ConvLayerSpec) -> Result<Tensor> {
    if input.channels != layer.in_channels {
        return Err(Error::ChannelMismatch {
            expected: layer.in_channels,
            got: input.channels,
        });
    }
    let (oh, ow) = layer
        .output_dims(input.height, input.width)
        .ok_or_else(|| Error::Degenerate("convolution output would be empty".into()))?;
    let cin = layer.in_channels;
    let cout = layer.out_channels;
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let pad = layer.padding as isize;
    let mut out = vec![0.0f32; oh * ow * cout];
    let mut acc = vec![0.0f64; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for (a, b) in acc.iter_mut().zip(&layer.bias) {
                *a = *b as f64;
            }
            let by = (oy * layer.stride) as isize - pad;
            let bx = (ox * layer.stride) as isize - pad;
            for ky in 0..kh {
                let iy = by + ky as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = bx + kx as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let px = input.pixel(iy as usize, ix as usize);
                    for (o, a) in acc.iter_mut().enumerate() {
                        let w = &layer.packed_fwd[((o * kh + ky) * kw + kx) * cin..][..cin];
                        let mut s = 0.0f64;
                        for (wi, xi) in w.iter().zip(px) {
                            s += (*wi as f64) * (*xi as f64);
                        }
                        *a += s;
                    }
                }
            }
            let dst = &mut out[(oy * ow + ox) * cout..][..cout];
            for (d, a) in dst.iter_mut().zip(&acc) {
                let v = *a as f32;
                *d = if layer.has_relu && v < 0.0 { 0.0 } else { v };
            }
        }
    }
    Ok(Tensor {
        height: oh,
        width: ow,
        channels: cout,
        data: out,
    })
}

/// Gradient of a loss with respect to the convolution input, given the
/// gradient with respect to the (pre-ReLU masked) output.
///
/// `grad_out` must already have the ReLU mask applied by the caller.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    layer: &ConvLayerSpec,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let (oh, ow) = layer
        .output_dims(in_h, in_w)
        .ok_or_else(|| Error::Degenerate("convolution output would be empty".into()))?;
    if grad_out.dims() != (oh, ow) || grad_out.channels != layer.out_channels {
        return Err(Error::DimensionMismatch {
            context: "conv2d backward",
            expected: (oh, ow),
            got: grad_out.dims(),
        });
    }
    let cin = layer.in_channels;
    let cout = layer.out_channels;
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let pad = layer.padding as isize;
    let mut grad = vec![0.0f64; in_h * in_w * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad_out.pixel(oy, ox);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let by = (oy * layer.stride) as isize - pad;
            let bx = (ox * layer.stride) as isize - pad;
            for ky in 0..kh {
                let iy = by + ky as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = bx + kx as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let dst = &mut grad[(iy as usize * in_w + ix as usize) * cin..][..cin];
                    for (i, d) in dst.iter_mut().enumerate() {
                        let w = &layer.packed_bwd[((ky * kw + kx) * cin + i) * cout..][..cout];
                        let mut s = 0.0f64;
                        for (wi, gi) in w.iter().zip(g) {
                            s += (*wi as f64) * (*gi as f64);
                        }
                        *d += s;
                    }
                }
            }
        }
    }
    Ok(Tensor {
        height: in_h,
        width: in_w,
        channels: cin,
        data: grad.into_iter().map(|v| v as f32).collect(),
    })
}

/// 2x2 max pooling with stride 2.
pub fn max_pool2(input: &Tensor) -> Result<Tensor> {
    max_pool2_with_indices(input).map(|(t, _)| t)
}

/// Max pooling that also returns, for every output element, the flat index of
/// the input element that won its window (first maximum in scan order).
pub fn max_pool2_with_indices(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    if input.height < 2 || input.width < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "max pool needs at least 2x2 input, got {}x{}",
            input.height,
            input.width
        )));
    }
    let oh = input.height / 2;
    let ow = input.width / 2;
    let c = input.channels;
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((2 * oy + dy) * input.width + 2 * ox + dx) * c + ch;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i as u32);
            }
        }
    }
    Ok((
        Tensor {
            height: oh,
            width: ow,
            channels: c,
            data: out,
        },
        idx,
    ))
}

/// Routes pooled gradients back to the winning input elements.
pub fn max_pool2_backward(
    grad_out: &Tensor,
    indices: &[u32],
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let mut grad = Tensor::zeros(in_h, in_w, grad_out.channels);
    for (g, &i) in grad_out.data.iter().zip(indices) {
        grad.data[i as usize] += *g;
    }
    grad
}

/// Bilinear resize with the align-corners-false convention: output sample `i`
/// reads the input at `(i + 0.5) * in / out - 0.5`, clamped to the grid.
pub fn resize_bilinear(input: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Degenerate("resize target must be at least 1x1".into()));
    }
    if input.height == 0 || input.width == 0 {
        return Err(Error::Degenerate("cannot resize an empty tensor".into()));
    }
    if (new_h, new_w) == input.dims() {
        return Ok(input.clone());
    }
    let sy = input.height as f32 / new_h as f32;
    let sx = input.width as f32 / new_w as f32;
    let c = input.channels;
    let mut out = Tensor::zeros(new_h, new_w, c);
    let mut buf = vec![0.0f32; c];
    for y in 0..new_h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            input.sample_bilinear(fx, fy, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Divides every channel vector by its Euclidean norm; zero vectors stay zero.
pub fn normalize_positionwise(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for px in out.data.chunks_mut(input.channels.max(1)) {
        let norm2: f64 = px.iter().map(|v| (*v as f64) * (*v as f64)).sum();
        if norm2 > 0.0 {
            let inv = 1.0 / libm::sqrt(norm2);
            for v in px.iter_mut() {
                *v = ((*v as f64) * inv) as f32;
            }
        } else {
            px.fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn nested_loop_conv(input: &Tensor, l: &ConvLayerSpec) -> Tensor {
        let (oh, ow) = l.output_dims(input.height(), input.width()).unwrap();
        Tensor::from_fn(oh, ow, l.out_channels, |oy, ox, o| {
            let mut s = l.bias()[o] as f64;
            for i in 0..l.in_channels {
                for ky in 0..l.kernel_h {
                    for kx in 0..l.kernel_w {
                        let iy = (oy * l.stride + ky) as isize - l.padding as isize;
                        let ix = (ox * l.stride + kx) as isize - l.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < input.height() && (ix as usize) < input.width() {
                            s += l.weight(o, i, ky, kx) as f64 * input.get(iy as usize, ix as usize, i) as f64;
                        }
                    }
                }
            }
            let v = s as f32;
            if l.has_relu { v.max(0.0) } else { v }
        })
    }

    #[test]
    fn conv_identity_kernel() {
        let l = ConvLayerSpec::new(1, 1, 1, 1, 1, 0, false, vec![1.0], vec![0.0]).unwrap();
        let t = Tensor::new(1, 1, 1, vec![5.0]).unwrap();
        assert_eq!(conv2d(&t, &l).unwrap().data(), &[5.0]);
    }

    #[test]
    fn conv_zero_kernel_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 5, 4, 2);
        let l = ConvLayerSpec::new(3, 2, 3, 3, 1, 1, true, vec![0.0; 54], vec![0.0; 3]).unwrap();
        let out = conv2d(&t, &l).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_tensor(&mut rng, 6, 6, 3);
        let w: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        for (stride, pad, relu) in [(1, 0, false), (1, 1, true), (2, 1, false)] {
            let l = ConvLayerSpec::new(4, 3, 3, 3, stride, pad, relu, w.clone(), b.clone()).unwrap();
            let got = conv2d(&t, &l).unwrap();
            let want = nested_loop_conv(&t, &l);
            assert_eq!(got.dims(), want.dims());
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_errors() {
        let l = ConvLayerSpec::new(1, 2, 3, 3, 1, 0, false, vec![0.0; 18], vec![0.0]).unwrap();
        assert!(matches!(
            conv2d(&Tensor::zeros(4, 4, 1), &l),
            Err(Error::ChannelMismatch { expected: 2, got: 1 })
        ));
        assert!(conv2d(&Tensor::zeros(2, 2, 2), &l).is_err());
        assert!(ConvLayerSpec::new(1, 1, 1, 1, 0, 0, false, vec![1.0], vec![0.0]).is_err());
        assert!(ConvLayerSpec::new(1, 1, 2, 2, 1, 0, false, vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn conv_linear_without_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 7, 5, 2);
        let w: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = ConvLayerSpec::new(3, 2, 3, 3, 1, 1, false, w, vec![0.0; 3]).unwrap();
        let alpha = 2.5f32;
        let a = conv2d(&t.map(|v| v * alpha), &l).unwrap();
        let b = conv2d(&t, &l).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - alpha * y).abs() <= 1e-5 * (alpha * y).abs().max(1.0));
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> for a linear layer.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 7, 6, 3);
        let w: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        for stride in [1, 2] {
            let l = ConvLayerSpec::new(2, 3, 3, 3, stride, 1, false, w.clone(), vec![0.0; 2]).unwrap();
            let y = conv2d(&x, &l).unwrap();
            let g = random_tensor(&mut rng, y.height(), y.width(), 2);
            let gx = conv2d_backward_input(&g, &l, 7, 6).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_basic() {
        let t = Tensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2(&t).unwrap().data(), &[4.0]);
        let c = Tensor::filled(6, 5, 2, 0.25);
        let p = max_pool2(&c).unwrap();
        assert_eq!(p.dims(), (3, 2));
        assert!(p.data().iter().all(|v| *v == 0.25));
        assert!(max_pool2(&Tensor::zeros(1, 4, 1)).is_err());
    }

    #[test]
    fn pool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 8, 8, 2);
        let p = max_pool2(&t).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                for c in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| t.get(2 * oy + dy, 2 * ox + dx, c))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(p.get(oy, ox, c), m);
                }
            }
        }
    }

    #[test]
    fn resize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, 5, 3, 2);
        assert_eq!(resize_bilinear(&t, 5, 3).unwrap(), t);
        let c = Tensor::filled(3, 4, 1, 0.7);
        assert!(resize_bilinear(&c, 9, 2).unwrap().data().iter().all(|v| (*v - 0.7).abs() < 1e-7));

        // [0, 1] -> 4 samples at src = (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25
        // clamped to [0, 1]: 0, 0.25, 0.75, 1.
        let r = Tensor::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let up = resize_bilinear(&r, 4, 1).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(resize_bilinear(&r, 0, 1).is_err());
    }

    #[test]
    fn normalize_cases() {
        let t = Tensor::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let n = normalize_positionwise(&t);
        assert!((n.data()[0] - 0.6).abs() < 1e-7 && (n.data()[1] - 0.8).abs() < 1e-7);
        let z = Tensor::zeros(3, 3, 4);
        assert_eq!(normalize_positionwise(&z), z);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = random_tensor(&mut rng, 6, 6, 5);
        r.pixel_mut(2, 2).fill(0.0);
        let n = normalize_positionwise(&r);
        for y in 0..6 {
            for x in 0..6 {
                let norm: f32 = n.pixel(y, x).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-5);
            }
        }
        let nn = normalize_positionwise(&n);
        for (a, b) in nn.data().iter().zip(n.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tensor(&mut rng, 9, 7, 3);
        let w: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = ConvLayerSpec::new(2, 3, 3, 3, 1, 1, true, w, vec![0.1; 2]).unwrap();
        assert_eq!(conv2d(&t, &l).unwrap(), conv2d(&t, &l).unwrap());
        assert_eq!(max_pool2(&t).unwrap(), max_pool2(&t).unwrap());
        assert_eq!(resize_bilinear(&t, 13, 4).unwrap(), resize_bilinear(&t, 13, 4).unwrap());
        assert_eq!(normalize_positionwise(&t), normalize_positionwise(&t));
    }

    #[test]
    fn new_rejects_bad_data() {
        assert!(Tensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor::new(1, 1, 1, vec![f32::NAN]).is_err());
    }
}
