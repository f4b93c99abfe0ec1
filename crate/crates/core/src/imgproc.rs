//! Single-channel image helpers shared by the detector, the synthetic pair
//! generator and the tests.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflect-101 index (`-1 -> 1`, `n -> n-2`) for borders.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur of every channel with reflected borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::new(h, w, c, out).expect("blur keeps values finite")
}

/// Channel mean, or the input itself when it is already single-channel.
pub fn to_gray(img: &Tensor) -> Tensor {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.mean_channels()
    }
}

/// Rotates by 90 degrees counter-clockwise in display orientation: the pixel
/// at `(x, y)` moves to `(y, w - 1 - x)`.
pub fn rotate90(img: &Tensor) -> Tensor {
    let (h, w) = img.dims();
    Tensor::from_fn(w, h, img.channels(), |y, x, c| img.get(x, w - 1 - y, c))
}

/// Applies a homography to a point.
pub fn project(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Renders `src` under the homography `h` (source to output coordinates)
/// onto an `out_h x out_w` grid. Pixels whose preimage falls outside the
/// source take `fill`.
pub fn warp_homography(
    src: &Tensor,
    h: &Matrix3<f64>,
    out_h: usize,
    out_w: usize,
    fill: f32,
) -> Result<Tensor> {
    let inv = h.try_inverse().ok_or(Error::NonInvertible)?;
    let c = src.channels();
    let (sh, sw) = (src.height() as f64, src.width() as f64);
    let mut out = Tensor::filled(out_h, out_w, c, fill);
    let mut buf = vec![0.0f32; c];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = project(&inv, x as f64, y as f64);
            if !(sx.is_finite() && sy.is_finite()) {
                continue;
            }
            if sx < -0.5 || sy < -0.5 || sx > sw - 0.5 || sy > sh - 0.5 {
                continue;
            }
            src.sample_bilinear(sx as f32, sy as f32, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        let s: f32 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let t = Tensor::filled(9, 7, 2, 0.25);
        let b = gaussian_blur(&t, 1.5);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let t = Tensor::from_fn(3, 5, 1, |y, x, _| (y * 5 + x) as f32);
        let r = rotate90(&rotate90(&rotate90(&rotate90(&t))));
        assert_eq!(r, t);
        let r1 = rotate90(&t);
        assert_eq!(r1.dims(), (5, 3));
        assert_eq!(r1.get(0, 0, 0), t.get(0, 4, 0));
    }

    #[test]
    fn identity_warp_is_exact() {
        let t = Tensor::from_fn(6, 8, 1, |y, x, _| (y * 8 + x) as f32);
        let w = warp_homography(&t, &Matrix3::identity(), 6, 8, 0.0).unwrap();
        assert_eq!(w, t);
        let singular = Matrix3::zeros();
        assert!(warp_homography(&t, &singular, 6, 8, 0.0).is_err());
    }
}
