//! Static visualizations: side-by-side match drawings, keypoint overlays and
//! flow images of nearest-neighbour fields.

use std::fs;
use std::path::Path;

use uaom_core::features::Keypoint;
use uaom_core::matching::MatchSet;
use uaom_core::nnf::NNField;
use uaom_core::Tensor;

use crate::error::{Error, Result};
use crate::imageio::encode_png_rgb;

pub const INLIER_COLOR: [u8; 3] = [0, 220, 0];
pub const OUTLIER_COLOR: [u8; 3] = [230, 30, 30];
pub const KEYPOINT_COLOR: [u8; 3] = [255, 200, 0];

/// RGB raster with clipped drawing primitives.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    /// Copies a grayscale image in at `(x0, y0)`.
    pub fn blit_gray(&mut self, img: &Tensor, x0: usize, y0: usize) {
        let g = if img.channels() == 1 {
            img.clone()
        } else {
            img.mean_channels()
        };
        for y in 0..g.height() {
            for x in 0..g.width() {
                let v = (g.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
                self.put(x0 as i64 + x as i64, y0 as i64 + y as i64, [v, v, v]);
            }
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Bresenham line including both endpoints.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Midpoint circle outline.
    pub fn circle(&mut self, (cx, cy): (i64, i64), r: i64, c: [u8; 3]) {
        let (mut x, mut y, mut d) = (r, 0i64, 1 - r);
        while x >= y {
            for (px, py) in [
                (x, y),
                (y, x),
                (-y, x),
                (-x, y),
                (-x, -y),
                (-y, -x),
                (y, -x),
                (x, -y),
            ] {
                self.put(cx + px, cy + py, c);
            }
            y += 1;
            if d < 0 {
                d += 2 * y + 1;
            } else {
                x -= 1;
                d += 2 * (y - x) + 1;
            }
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        encode_png_rgb(self.width, self.height, &self.rgb)
    }
}

fn round_pt(p: [f32; 2]) -> (i64, i64) {
    (p[0].round() as i64, p[1].round() as i64)
}

/// Draws A and B side by side (B shifted right by A's width), keypoint
/// circles at every match endpoint, then inlier lines in green and the rest
/// in red. Lines are drawn last so their endpoints keep the line colour.
pub fn render_matches_canvas(img_a: &Tensor, img_b: &Tensor, matches: &MatchSet) -> Canvas {
    let (ha, wa) = img_a.dims();
    let (hb, wb) = img_b.dims();
    let mut c = Canvas::new(wa + wb, ha.max(hb));
    c.blit_gray(img_a, 0, 0);
    c.blit_gray(img_b, wa, 0);
    let shift = |p: [f32; 2]| {
        let (x, y) = round_pt(p);
        (x + wa as i64, y)
    };
    for m in &matches.matches {
        c.circle(round_pt(m.pt_a), 3, KEYPOINT_COLOR);
        c.circle(shift(m.pt_b), 3, KEYPOINT_COLOR);
    }
    // outliers first so inliers stay visible where lines cross
    for pass_inliers in [false, true] {
        for (m, f) in matches.matches.iter().zip(&matches.inlier_flags) {
            if *f == pass_inliers {
                let color = if *f { INLIER_COLOR } else { OUTLIER_COLOR };
                c.line(round_pt(m.pt_a), shift(m.pt_b), color);
            }
        }
    }
    c
}

pub fn render_matches(
    img_a: &Tensor,
    img_b: &Tensor,
    matches: &MatchSet,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let path = out_path.as_ref();
    fs::write(path, render_matches_canvas(img_a, img_b, matches).to_png())
        .map_err(|e| Error::io(path, e))
}

/// Grayscale image with a circle of radius `2 * scale` per keypoint and a
/// tick along its orientation.
pub fn render_keypoints(img: &Tensor, kps: &[Keypoint]) -> Vec<u8> {
    let mut c = Canvas::new(img.width(), img.height());
    c.blit_gray(img, 0, 0);
    for k in kps {
        let r = (2.0 * k.scale).round().max(2.0) as i64;
        let centre = round_pt([k.x, k.y]);
        c.circle(centre, r, KEYPOINT_COLOR);
        let tip = [
            k.x + r as f32 * k.orientation.cos(),
            k.y + r as f32 * k.orientation.sin(),
        ];
        c.line(centre, round_pt(tip), KEYPOINT_COLOR);
    }
    c.to_png()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Flow visualization of a field: hue encodes the direction of the
/// displacement from each source pixel's scaled position to its target,
/// saturation its magnitude relative to the largest displacement.
pub fn render_nnf_flow(field: &NNField) -> Vec<u8> {
    let (sh, sw) = (field.src_h, field.src_w);
    let (rx, ry) = (field.dst_w as f32 / sw as f32, field.dst_h as f32 / sh as f32);
    let disp: Vec<(f32, f32)> = (0..sh * sw)
        .map(|i| {
            let (x, y) = ((i % sw) as f32, (i / sw) as f32);
            let [qx, qy] = field.mapping[i];
            (qx - (x + 0.5) * rx + 0.5, qy - (y + 0.5) * ry + 0.5)
        })
        .collect();
    let max = disp
        .iter()
        .map(|(dx, dy)| dx.hypot(*dy))
        .fold(0.0f32, f32::max)
        .max(1e-6);
    let mut rgb = Vec::with_capacity(sh * sw * 3);
    for (dx, dy) in disp {
        let hue = (dy.atan2(dx) / std::f32::consts::TAU).rem_euclid(1.0);
        rgb.extend_from_slice(&hsv_to_rgb(hue, (dx.hypot(dy) / max).min(1.0), 1.0));
    }
    encode_png_rgb(sw, sh, &rgb)
}
