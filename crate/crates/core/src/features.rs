//! Keypoint detection, patch extraction, descriptor inference and the
//! descriptor distance matrix.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, to_gray};
use crate::network::NetworkModel;
use crate::tensor::Tensor;

/// Side of the square descriptor patch.
pub const PATCH_SIZE: usize = 32;
/// Support half-width in units of keypoint scale.
pub const PATCH_MAGNIFICATION: f64 = 6.0;
pub const DESCRIPTOR_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
    /// Row-major 2x2 shape matrix with unit determinant.
    pub affine: Option<[f32; 4]>,
    pub response: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32, scale: f32) -> Self {
        Self {
            x,
            y,
            scale,
            orientation: 0.0,
            affine: None,
            response: 0.0,
        }
    }
}

/// Anything that turns a grayscale image into keypoints.
pub trait Detector {
    fn detect(&self, image: &Tensor) -> Vec<Keypoint>;
}

/// Multi-scale determinant-of-Hessian blob detector.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDetector {
    pub max_kp: usize,
    pub threshold: f32,
    /// Smallest detection scale.
    pub sigma0: f64,
    pub scales_per_octave: usize,
    /// Number of scale samples, including the two that only serve as
    /// neighbours for suppression.
    pub num_scales: usize,
    /// Estimate an elliptical shape from the second-moment matrix.
    pub affine_shape: bool,
}

impl Default for HessianDetector {
    fn default() -> Self {
        Self {
            max_kp: 4000,
            threshold: 1e-4,
            sigma0: 1.6,
            scales_per_octave: 3,
            num_scales: 11,
            affine_shape: false,
        }
    }
}

struct ScaleLevel {
    sigma: f64,
    smooth: Tensor,
    response: Vec<f32>,
}

fn hessian_response(l: &Tensor, sigma: f64) -> Vec<f32> {
    let (h, w) = l.dims();
    let d = l.data();
    let s4 = (sigma * sigma * sigma * sigma) as f32;
    let mut r = vec![0.0f32; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let c = d[y * w + x];
            let lxx = d[y * w + x + 1] - 2.0 * c + d[y * w + x - 1];
            let lyy = d[(y + 1) * w + x] - 2.0 * c + d[(y - 1) * w + x];
            let lxy = (d[(y + 1) * w + x + 1] - d[(y + 1) * w + x - 1] - d[(y - 1) * w + x + 1]
                + d[(y - 1) * w + x - 1])
                * 0.25;
            r[y * w + x] = s4 * (lxx * lyy - lxy * lxy);
        }
    }
    r
}

fn gradient(l: &Tensor, x: usize, y: usize) -> (f32, f32) {
    let (h, w) = l.dims();
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(w - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(h - 1);
    let gx = (l.get(y, xr, 0) - l.get(y, xl, 0)) / (xr - xl).max(1) as f32;
    let gy = (l.get(yd, x, 0) - l.get(yu, x, 0)) / (yd - yu).max(1) as f32;
    (gx, gy)
}

/// Dominant gradient direction around `(cx, cy)` from a smoothed 36-bin
/// histogram, refined by a parabola through the peak bin.
fn dominant_orientation(l: &Tensor, cx: f32, cy: f32, sigma: f64) -> f32 {
    const BINS: usize = 36;
    let (h, w) = l.dims();
    let win = 1.5 * sigma;
    let r = libm::ceil(3.0 * win) as isize;
    let (px, py) = (libm::round(cx as f64) as isize, libm::round(cy as f64) as isize);
    let mut hist = [0.0f64; BINS];
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let (gx, gy) = gradient(l, x as usize, y as usize);
            let mag = libm::sqrt((gx * gx + gy * gy) as f64);
            if mag == 0.0 {
                continue;
            }
            let wt = libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * win * win));
            let ang = libm::atan2(gy as f64, gx as f64);
            let b = ((ang + PI) / (2.0 * PI) * BINS as f64) as usize % BINS;
            hist[b] += wt * mag;
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for i in 0..BINS {
            hist[i] = 0.25 * prev[(i + BINS - 1) % BINS] + 0.5 * prev[i] + 0.25 * prev[(i + 1) % BINS];
        }
    }
    let (mut best, mut bv) = (0usize, f64::MIN);
    for (i, v) in hist.iter().enumerate() {
        if *v > bv {
            bv = *v;
            best = i;
        }
    }
    if bv <= 0.0 {
        return 0.0;
    }
    let l_ = hist[(best + BINS - 1) % BINS];
    let r_ = hist[(best + 1) % BINS];
    let denom = l_ - 2.0 * bv + r_;
    let off = if denom < 0.0 { 0.5 * (l_ - r_) / denom } else { 0.0 };
    let ang = (best as f64 + 0.5 + off) / BINS as f64 * 2.0 * PI - PI;
    ang as f32
}

/// Second-moment shape `M^{-1/2}` scaled to unit determinant, with the
/// anisotropy capped at 4.
fn affine_shape(l: &Tensor, cx: f32, cy: f32, sigma: f64) -> [f32; 4] {
    let (h, w) = l.dims();
    let win = 1.5 * sigma;
    let r = libm::ceil(3.0 * win) as isize;
    let (px, py) = (libm::round(cx as f64) as isize, libm::round(cy as f64) as isize);
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let (gx, gy) = gradient(l, x as usize, y as usize);
            let wt = libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * win * win));
            a += wt * (gx * gx) as f64;
            b += wt * (gx * gy) as f64;
            c += wt * (gy * gy) as f64;
        }
    }
    // eigen-decomposition of [[a, b], [b, c]]
    let tr = a + c;
    let disc = libm::sqrt(((a - c) * (a - c) + 4.0 * b * b).max(0.0));
    let l1 = 0.5 * (tr + disc);
    let l2 = 0.5 * (tr - disc);
    if !(l2 > 1e-12 * l1.max(1e-30)) || l1 <= 0.0 {
        return [1.0, 0.0, 0.0, 1.0];
    }
    let theta = 0.5 * libm::atan2(2.0 * b, a - c);
    let (cs, sn) = (libm::cos(theta), libm::sin(theta));
    let mut s1 = 1.0 / libm::sqrt(l1);
    let mut s2 = 1.0 / libm::sqrt(l2);
    if s2 / s1 > 4.0 {
        s2 = 4.0 * s1;
    }
    let norm = libm::sqrt(s1 * s2);
    s1 /= norm;
    s2 /= norm;
    // R diag(s1, s2) R^T
    [
        (cs * cs * s1 + sn * sn * s2) as f32,
        (cs * sn * (s1 - s2)) as f32,
        (cs * sn * (s1 - s2)) as f32,
        (sn * sn * s1 + cs * cs * s2) as f32,
    ]
}

impl HessianDetector {
    fn scale_levels(&self, gray: &Tensor) -> Vec<ScaleLevel> {
        (0..self.num_scales)
            .map(|i| {
                let sigma = self.sigma0 * libm::pow(2.0, i as f64 / self.scales_per_octave as f64);
                let smooth = gaussian_blur(gray, sigma);
                let response = hessian_response(&smooth, sigma);
                ScaleLevel {
                    sigma,
                    smooth,
                    response,
                }
            })
            .collect()
    }
}

impl Detector for HessianDetector {
    fn detect(&self, image: &Tensor) -> Vec<Keypoint> {
        let gray = to_gray(image);
        let (h, w) = gray.dims();
        if h < 8 || w < 8 || self.num_scales < 3 || self.max_kp == 0 {
            return Vec::new();
        }
        let levels = self.scale_levels(&gray);
        let border = 3usize;
        let mut out = Vec::new();
        for s in 1..levels.len() - 1 {
            let (lo, mid, hi) = (&levels[s - 1].response, &levels[s].response, &levels[s + 1].response);
            for y in border..h - border {
                for x in border..w - border {
                    let v = mid[y * w + x];
                    if !(v > self.threshold) {
                        continue;
                    }
                    let mut is_max = true;
                    'n: for layer in [lo, mid, hi] {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let i = (y + dy - 1) * w + x + dx - 1;
                                if core::ptr::eq(layer, mid) && dy == 1 && dx == 1 {
                                    continue;
                                }
                                if layer[i] >= v {
                                    is_max = false;
                                    break 'n;
                                }
                            }
                        }
                    }
                    if !is_max {
                        continue;
                    }
                    let at = |layer: &Vec<f32>, dx: isize, dy: isize| -> f64 {
                        layer[((y as isize + dy) as usize) * w + (x as isize + dx) as usize] as f64
                    };
                    let c = v as f64;
                    let ox = {
                        let (a, b) = (at(mid, -1, 0), at(mid, 1, 0));
                        let d = a - 2.0 * c + b;
                        if d < 0.0 { (0.5 * (a - b) / d).clamp(-0.5, 0.5) } else { 0.0 }
                    };
                    let oy = {
                        let (a, b) = (at(mid, 0, -1), at(mid, 0, 1));
                        let d = a - 2.0 * c + b;
                        if d < 0.0 { (0.5 * (a - b) / d).clamp(-0.5, 0.5) } else { 0.0 }
                    };
                    let os = {
                        let (a, b) = (at(lo, 0, 0), at(hi, 0, 0));
                        let d = a - 2.0 * c + b;
                        if d < 0.0 { (0.5 * (a - b) / d).clamp(-0.5, 0.5) } else { 0.0 }
                    };
                    let sigma = self.sigma0
                        * libm::pow(2.0, (s as f64 + os) / self.scales_per_octave as f64);
                    let kx = (x as f64 + ox) as f32;
                    let ky = (y as f64 + oy) as f32;
                    let smooth = &levels[s].smooth;
                    out.push(Keypoint {
                        x: kx,
                        y: ky,
                        scale: sigma as f32,
                        orientation: dominant_orientation(smooth, kx, ky, levels[s].sigma),
                        affine: self
                            .affine_shape
                            .then(|| affine_shape(smooth, kx, ky, levels[s].sigma)),
                        response: v,
                    });
                }
            }
        }
        out.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.y.total_cmp(&b.y))
                .then(a.x.total_cmp(&b.x))
                .then(a.scale.total_cmp(&b.scale))
        });
        out.truncate(self.max_kp);
        out
    }
}

/// Convenience wrapper around [`HessianDetector`].
pub fn detect(image: &Tensor, max_kp: usize, threshold: f32) -> Vec<Keypoint> {
    HessianDetector {
        max_kp,
        threshold,
        ..HessianDetector::default()
    }
    .detect(image)
}

/// Maps patch-grid coordinates `(u, v)` in `[-1, 1]^2` to image pixels.
fn support_point(kp: &Keypoint, u: f64, v: f64) -> (f64, f64) {
    let half = PATCH_MAGNIFICATION * kp.scale as f64;
    let (mut lx, mut ly) = (u * half, v * half);
    if let Some(a) = kp.affine {
        let (a0, a1, a2, a3) = (a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
        (lx, ly) = (a0 * lx + a1 * ly, a2 * lx + a3 * ly);
    }
    let th = kp.orientation as f64;
    let (c, s) = (libm::cos(th), libm::sin(th));
    (kp.x as f64 + c * lx - s * ly, kp.y as f64 + s * lx + c * ly)
}

/// Bilinear resample of the keypoint's oriented (and, when present,
/// affine-normalized) support onto an `out_size x out_size` grid, before any
/// intensity normalization. Samples past the border take the nearest edge
/// value.
pub fn extract_patch_raw(image: &Tensor, kp: &Keypoint, out_size: usize) -> Result<Tensor> {
    let gray = if image.channels() == 1 {
        None
    } else {
        Some(to_gray(image))
    };
    let img = gray.as_ref().unwrap_or(image);
    let (h, w) = img.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (u, v) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let (x, y) = support_point(kp, u, v);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
        return Err(Error::SupportOutside);
    }
    let half = out_size as f64 / 2.0;
    let mut buf = [0.0f32];
    let mut data = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let v = (i as f64 + 0.5) / half - 1.0;
        for j in 0..out_size {
            let u = (j as f64 + 0.5) / half - 1.0;
            let (x, y) = support_point(kp, u, v);
            img.sample_bilinear(x as f32, y as f32, &mut buf);
            data.push(buf[0]);
        }
    }
    Tensor::new(out_size, out_size, 1, data)
}

/// Standard deviation below which a patch counts as constant.
pub const CONSTANT_PATCH_STD: f64 = 1e-6;

/// Zero-mean, unit-std copy of `patch`, or `None` for a constant patch.
pub fn normalize_patch(patch: &Tensor) -> Option<Tensor> {
    let n = patch.data().len() as f64;
    let mean = patch.data().iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = patch
        .data()
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = libm::sqrt(var);
    if std < CONSTANT_PATCH_STD {
        return None;
    }
    Some(patch.map(|v| ((v as f64 - mean) / std) as f32))
}

/// Extracts and normalizes one patch; `Ok(None)` flags a constant patch.
pub fn extract_patch(image: &Tensor, kp: &Keypoint, out_size: usize) -> Result<Option<Tensor>> {
    Ok(normalize_patch(&extract_patch_raw(image, kp, out_size)?))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    /// Keypoint index of every patch.
    pub provenance: Vec<usize>,
    /// Keypoints dropped because their patch was constant.
    pub constant: Vec<usize>,
    /// Keypoints dropped because their support missed the image.
    pub outside: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn extract_patches(image: &Tensor, keypoints: &[Keypoint], out_size: usize) -> PatchSet {
    let mut set = PatchSet::default();
    for (i, kp) in keypoints.iter().enumerate() {
        match extract_patch(image, kp, out_size) {
            Ok(Some(p)) => {
                set.patches.push(p);
                set.provenance.push(i);
            }
            Ok(None) => set.constant.push(i),
            Err(_) => set.outside.push(i),
        }
    }
    set
}

/// Row-major `len x dim` matrix of unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DescriptorContract(alloc::format!(
                "{} values do not form rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    /// Normalizes each row to unit length; an all-zero row becomes the first
    /// basis vector so the set stays on the sphere.
    pub fn from_raw_rows(dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DescriptorContract("ragged descriptor rows".into()));
        }
        for row in data.chunks_mut(dim) {
            normalize_row(row);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Keeps the rows whose indices are listed, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { dim: self.dim, data }
    }
}

fn normalize_row(row: &mut [f32]) {
    let n = libm::sqrt(row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>());
    if n > 0.0 && n.is_finite() {
        for v in row.iter_mut() {
            *v = (*v as f64 / n) as f32;
        }
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[0] = 1.0;
    }
}

/// Checks that `model` maps a 32x32x1 patch to a 128-d unit-normalized vector.
pub fn check_descriptor_contract(model: &NetworkModel) -> Result<()> {
    let spec = model.input_spec();
    if spec.channels != 1 || spec.height != Some(PATCH_SIZE) || spec.width != Some(PATCH_SIZE) {
        return Err(Error::DescriptorContract(alloc::format!(
            "descriptor input must be {PATCH_SIZE}x{PATCH_SIZE}x1, model declares {:?}x{:?}x{}",
            spec.height,
            spec.width,
            spec.channels
        )));
    }
    if model.output_channels() != DESCRIPTOR_DIM {
        return Err(Error::DescriptorContract(alloc::format!(
            "descriptor output must have {DESCRIPTOR_DIM} channels, model has {}",
            model.output_channels()
        )));
    }
    if !model.unit_norm_output() {
        return Err(Error::DescriptorContract(
            "descriptor model must declare unit-norm output".into(),
        ));
    }
    Ok(())
}

/// Runs the descriptor network on a single normalized patch.
pub fn describe_one(patch: &Tensor, model: &NetworkModel, out: &mut [f32]) -> Result<()> {
    let y = model.forward(patch)?;
    if y.dims() != (1, 1) || y.channels() != out.len() {
        return Err(Error::DescriptorContract(alloc::format!(
            "descriptor output is {:?}x{}, expected 1x1x{}",
            y.dims(),
            y.channels(),
            out.len()
        )));
    }
    out.copy_from_slice(y.data());
    normalize_row(out);
    Ok(())
}

pub fn describe(patches: &PatchSet, model: &NetworkModel) -> Result<DescriptorSet> {
    check_descriptor_contract(model)?;
    let dim = model.output_channels();
    let mut data = vec![0.0f32; patches.len() * dim];
    for (p, row) in patches.patches.iter().zip(data.chunks_mut(dim)) {
        describe_one(p, model, row)?;
    }
    DescriptorSet::new(dim, data)
}

/// Dense row-major `rows x cols` matrix of descriptor distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        DistanceMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// `sqrt(max(0, 2 - 2 <a, p>))`, the Euclidean distance of unit vectors.
#[inline]
pub fn unit_distance(a: &[f32], p: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(p).map(|(x, y)| x * y).sum();
    libm::sqrtf((2.0 - 2.0 * dot).max(0.0))
}

/// Fills `out` with the distances of row `i` of `a` against every row of `p`.
pub fn distance_row(a: &DescriptorSet, i: usize, p: &DescriptorSet, out: &mut [f32]) {
    let ai = a.row(i);
    for (j, o) in out.iter_mut().enumerate() {
        *o = unit_distance(ai, p.row(j));
    }
}

pub fn distance_matrix(a: &DescriptorSet, p: &DescriptorSet) -> Result<DistanceMatrix> {
    if a.dim() != p.dim() {
        return Err(Error::DescriptorContract(alloc::format!(
            "descriptor dimensions differ: {} vs {}",
            a.dim(),
            p.dim()
        )));
    }
    let (rows, cols) = (a.len(), p.len());
    let mut data = vec![0.0f32; rows * cols];
    if cols > 0 {
        for (i, row) in data.chunks_mut(cols).enumerate() {
            distance_row(a, i, p, row);
        }
    }
    Ok(DistanceMatrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::rotate90;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, cx: f32, cy: f32, sigma: f32) -> Tensor {
        Tensor::from_fn(h, w, 1, |y, x, _| {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            libm::expf(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
        })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        assert!(detect(&Tensor::filled(64, 64, 1, 0.4), 100, 1e-6).is_empty());
    }

    #[test]
    fn gaussian_blob_is_localized() {
        let img = blob(128, 128, 40.0, 40.0, 4.0);
        let kps = detect(&img, 10, 1e-4);
        let top = &kps[0];
        let d = libm::hypotf(top.x - 40.0, top.y - 40.0);
        assert!(d <= 1.5, "{top:?}");
        let want = 4.0 * core::f32::consts::SQRT_2;
        assert!(top.scale > want / 1.5 && top.scale < want * 1.5, "{top:?}");
    }

    #[test]
    fn detection_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut img = Tensor::zeros(96, 80, 1);
        for _ in 0..25 {
            let (cx, cy) = (rng.random_range(8.0..72.0), rng.random_range(8.0..88.0));
            let s: f32 = rng.random_range(1.5..4.0);
            let a: f32 = rng.random_range(0.3..1.0);
            let b = blob(96, 80, cx, cy, s);
            for (o, v) in img.data_mut().iter_mut().zip(b.data()) {
                *o += a * v;
            }
        }
        let k0 = detect(&img, 40, 1e-4);
        let k1 = detect(&rotate90(&img), 40, 1e-4);
        assert!(k0.len() >= 20);
        let w = img.width() as f32;
        for kp in k1.iter().take(20) {
            // (x, y) in the rotated frame came from (w - 1 - y, x)
            let (ox, oy) = (w - 1.0 - kp.y, kp.x);
            let best = k0
                .iter()
                .map(|k| libm::hypotf(k.x - ox, k.y - oy))
                .fold(f32::MAX, f32::min);
            assert!(best <= 1.5, "{kp:?} unmatched ({best})");
        }
    }

    #[test]
    fn ramp_patch_matches_closed_form() {
        let img = Tensor::from_fn(200, 200, 1, |y, x, _| 0.01 * x as f32 + 0.003 * y as f32);
        let kp = Keypoint::new(100.0, 90.0, 2.0);
        let p = extract_patch_raw(&img, &kp, PATCH_SIZE).unwrap();
        for i in 0..PATCH_SIZE {
            for j in 0..PATCH_SIZE {
                let u = (j as f64 + 0.5) / 16.0 - 1.0;
                let v = (i as f64 + 0.5) / 16.0 - 1.0;
                let x = 100.0 + 12.0 * u;
                let y = 90.0 + 12.0 * v;
                let want = 0.01 * x + 0.003 * y;
                assert!((p.get(i, j, 0) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_and_outside_patches_are_flagged() {
        let img = Tensor::filled(64, 64, 1, 0.5);
        assert_eq!(extract_patch(&img, &Keypoint::new(30.0, 30.0, 2.0), 32).unwrap(), None);
        assert_eq!(
            extract_patch(&img, &Keypoint::new(500.0, 30.0, 2.0), 32),
            Err(Error::SupportOutside)
        );
        let set = extract_patches(
            &img,
            &[Keypoint::new(30.0, 30.0, 2.0), Keypoint::new(-300.0, 0.0, 1.0)],
            32,
        );
        assert!(set.is_empty());
        assert_eq!(set.constant, vec![0]);
        assert_eq!(set.outside, vec![1]);
    }

    #[test]
    fn half_turn_flips_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(80, 80, 1, |_, _, _| rng.random_range(0.0..1.0));
        let mut kp = Keypoint::new(40.0, 40.0, 1.5);
        let a = extract_patch(&img, &kp, 32).unwrap().unwrap();
        kp.orientation = core::f32::consts::PI;
        let b = extract_patch(&img, &kp, 32).unwrap().unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert!((a.get(i, j, 0) - b.get(31 - i, 31 - j, 0)).abs() < 1e-4);
            }
        }
        let m: f64 = a.data().iter().map(|v| *v as f64).sum::<f64>() / 1024.0;
        let s: f64 = a.data().iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / 1024.0;
        assert!(m.abs() <= 1e-5 && (s.sqrt() - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn affine_shape_has_unit_determinant() {
        let img = Tensor::from_fn(64, 64, 1, |y, x, _| {
            let (dx, dy) = (x as f32 - 32.0, y as f32 - 32.0);
            libm::expf(-(dx * dx / 50.0 + dy * dy / 8.0))
        });
        let det = HessianDetector {
            affine_shape: true,
            ..HessianDetector::default()
        };
        let kps = det.detect(&img);
        assert!(!kps.is_empty());
        for k in &kps {
            let a = k.affine.unwrap();
            assert!((a[0] * a[3] - a[1] * a[2] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn distance_special_cases() {
        let e0: Vec<f32> = (0..4).map(|i| (i == 0) as u8 as f32).collect();
        let e1: Vec<f32> = (0..4).map(|i| (i == 1) as u8 as f32).collect();
        let neg: Vec<f32> = e0.iter().map(|v| -v).collect();
        assert_eq!(unit_distance(&e0, &e0), 0.0);
        assert!((unit_distance(&e0, &e1) - core::f32::consts::SQRT_2).abs() < 1e-6);
        assert!((unit_distance(&e0, &neg) - 2.0).abs() < 1e-6);
        // slightly over-unit dot product must not produce NaN
        let big = [1.0000001f32, 0.0, 0.0, 0.0];
        assert_eq!(unit_distance(&big, &big), 0.0);
    }

    #[test]
    fn distance_matrix_transpose_and_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DescriptorSet::from_raw_rows(8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = DescriptorSet::from_raw_rows(8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = distance_matrix(&a, &p).unwrap();
        let dt = distance_matrix(&p, &a).unwrap();
        assert_eq!((d.rows, d.cols), (5, 3));
        assert_eq!(d.transpose(), dt);
        let q = DescriptorSet::from_raw_rows(4, vec![1.0; 8]).unwrap();
        assert!(distance_matrix(&a, &q).is_err());
    }

    #[test]
    fn zero_rows_land_on_the_sphere() {
        let s = DescriptorSet::from_raw_rows(3, vec![0.0; 3]).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
    }
}
