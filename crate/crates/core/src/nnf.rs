//! Nearest-neighbor fields between feature maps and the PatchMatch search
//! that estimates them under the bidirectional analogy constraint.
//!
//! The patch distance between source position `p` and target position `q`
//! sums, over offsets `d` with `|d|_inf <= radius`,
//!
//! ```text
//! |Fa(p+d) - Fb'(q+d)|^2 + |Fa'(p+d) - Fb(q+d)|^2
//! ```
//!
//! on position-normalized features. Offsets that leave either grid are
//! dropped from both terms and the remainder is scaled to a full patch.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{normalize_positionwise, Tensor};

/// Upper bound on `src_pixels * dst_pixels` for exhaustive search.
pub const BRUTE_FORCE_LIMIT: u64 = 1 << 22;

/// Integer grid position `(x, y)`.
pub type Coord = (usize, usize);

/// Per-source-pixel correspondence into a destination grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NNField {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    pub patch_radius: usize,
    /// `(q_x, q_y)` per source pixel, row-major.
    pub mapping: Vec<[f32; 2]>,
    pub cost: Vec<f32>,
    /// Set when `cost` no longer matches `mapping` (after upsampling).
    pub cost_stale: bool,
}

impl NNField {
    /// Identity mapping between equally sized grids, costs zero and stale.
    pub fn identity(h: usize, w: usize, patch_radius: usize) -> Self {
        let mapping = (0..h * w).map(|i| [(i % w) as f32, (i / w) as f32]).collect();
        Self {
            src_h: h,
            src_w: w,
            dst_h: h,
            dst_w: w,
            patch_radius,
            mapping,
            cost: vec![0.0; h * w],
            cost_stale: true,
        }
    }

    /// Every source pixel mapped to the same target.
    pub fn constant(src: (usize, usize), dst: (usize, usize), target: [f32; 2], patch_radius: usize) -> Self {
        Self {
            src_h: src.0,
            src_w: src.1,
            dst_h: dst.0,
            dst_w: dst.1,
            patch_radius,
            mapping: vec![target; src.0 * src.1],
            cost: vec![0.0; src.0 * src.1],
            cost_stale: true,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.mapping[y * self.src_w + x]
    }

    /// Mapping rounded to the nearest grid cell and clamped in-bounds.
    #[inline]
    pub fn get_rounded(&self, x: usize, y: usize) -> Coord {
        let [qx, qy] = self.get(x, y);
        (
            (libm::roundf(qx).max(0.0) as usize).min(self.dst_w - 1),
            (libm::roundf(qy).max(0.0) as usize).min(self.dst_h - 1),
        )
    }

    pub fn total_cost(&self) -> f64 {
        self.cost.iter().map(|c| *c as f64).sum()
    }

    pub fn in_bounds(&self) -> bool {
        self.mapping.iter().all(|[x, y]| {
            *x >= 0.0 && *y >= 0.0 && *x <= (self.dst_w - 1) as f32 && *y <= (self.dst_h - 1) as f32
        })
    }
}

/// The four normalized operands of the patch distance at one level.
#[derive(Debug, Clone)]
pub struct FeatureQuad {
    pub fa: Tensor,
    pub fb_prime: Tensor,
    pub fa_prime: Tensor,
    pub fb: Tensor,
}

impl FeatureQuad {
    /// Wraps already normalized maps after checking shapes.
    pub fn new(fa: Tensor, fb_prime: Tensor, fa_prime: Tensor, fb: Tensor) -> Result<Self> {
        if !fa.same_shape(&fa_prime) {
            return Err(Error::DimensionMismatch {
                context: "quad source maps",
                expected: fa.dims(),
                got: fa_prime.dims(),
            });
        }
        if !fb.same_shape(&fb_prime) {
            return Err(Error::DimensionMismatch {
                context: "quad target maps",
                expected: fb.dims(),
                got: fb_prime.dims(),
            });
        }
        if fa.channels() != fb.channels() {
            return Err(Error::ChannelMismatch {
                expected: fa.channels(),
                got: fb.channels(),
            });
        }
        Ok(Self {
            fa,
            fb_prime,
            fa_prime,
            fb,
        })
    }

    /// Normalizes raw feature maps position-wise and builds the quad.
    pub fn normalized(fa: &Tensor, fb_prime: &Tensor, fa_prime: &Tensor, fb: &Tensor) -> Result<Self> {
        Self::new(
            normalize_positionwise(fa),
            normalize_positionwise(fb_prime),
            normalize_positionwise(fa_prime),
            normalize_positionwise(fb),
        )
    }

    pub fn src_dims(&self) -> (usize, usize) {
        self.fa.dims()
    }

    pub fn dst_dims(&self) -> (usize, usize) {
        self.fb.dims()
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Patch distance between source `p` and target `q`, both `(x, y)`.
///
/// Offsets that leave either grid are dropped from both terms, and the sum
/// over the remaining ones is scaled up to a full patch. Without the
/// rescaling, targets near a border sum fewer terms and win by default.
pub fn patch_cost(quad: &FeatureQuad, p: Coord, q: Coord, radius: usize) -> f32 {
    let (sh, sw) = quad.src_dims();
    let (dh, dw) = quad.dst_dims();
    let r = radius as isize;
    let mut total = 0.0f32;
    let mut valid = 0usize;
    for dy in -r..=r {
        let py = p.1 as isize + dy;
        let qy = q.1 as isize + dy;
        if py < 0 || qy < 0 || py >= sh as isize || qy >= dh as isize {
            continue;
        }
        for dx in -r..=r {
            let px = p.0 as isize + dx;
            let qx = q.0 as isize + dx;
            if px < 0 || qx < 0 || px >= sw as isize || qx >= dw as isize {
                continue;
            }
            let (py, px, qy, qx) = (py as usize, px as usize, qy as usize, qx as usize);
            total += sq_dist(quad.fa.pixel(py, px), quad.fb_prime.pixel(qy, qx));
            total += sq_dist(quad.fa_prime.pixel(py, px), quad.fb.pixel(qy, qx));
            valid += 1;
        }
    }
    let full = (2 * radius + 1) * (2 * radius + 1);
    if valid == full {
        total
    } else {
        total * full as f32 / valid as f32
    }
}

/// Exhaustive minimizer of [`patch_cost`] for every source pixel; ties go to
/// the lexicographically smallest `(q_y, q_x)`.
pub fn brute_force_nnf(quad: &FeatureQuad, radius: usize) -> Result<NNField> {
    let (sh, sw) = quad.src_dims();
    let (dh, dw) = quad.dst_dims();
    let evaluations = (sh * sw) as u64 * (dh * dw) as u64;
    if evaluations > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            evaluations,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut mapping = Vec::with_capacity(sh * sw);
    let mut cost = Vec::with_capacity(sh * sw);
    for py in 0..sh {
        for px in 0..sw {
            let mut best = f32::INFINITY;
            let mut best_q = (0, 0);
            for qy in 0..dh {
                for qx in 0..dw {
                    let c = patch_cost(quad, (px, py), (qx, qy), radius);
                    if c < best {
                        best = c;
                        best_q = (qx, qy);
                    }
                }
            }
            mapping.push([best_q.0 as f32, best_q.1 as f32]);
            cost.push(best);
        }
    }
    Ok(NNField {
        src_h: sh,
        src_w: sw,
        dst_h: dh,
        dst_w: dw,
        patch_radius: radius,
        mapping,
        cost,
        cost_stale: false,
    })
}

/// Starting point for [`patchmatch`].
#[derive(Debug, Clone, Copy)]
pub enum NnfInit<'a> {
    /// Uniform random in-bounds targets drawn from the run's seed.
    Random,
    /// Continue from an existing field (rounded to the grid).
    Field(&'a NNField),
}

/// Search schedule for [`patchmatch_with_config`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatchConfig {
    pub iterations: usize,
    pub patch_radius: usize,
    pub seed: u64,
    /// Random candidates drawn at every search radius.
    pub search_samples: usize,
    /// Cap on the starting random search radius, 0 searches the whole image.
    pub max_search_radius: usize,
}

/// Default number of random candidates per search radius.
pub const DEFAULT_SEARCH_SAMPLES: usize = 4;

/// PatchMatch with alternating scan order, propagation and a random search
/// whose radius starts at `max(dst_h, dst_w)` and halves until below one.
pub fn patchmatch(
    quad: &FeatureQuad,
    init: NnfInit<'_>,
    iterations: usize,
    radius: usize,
    rng_seed: u64,
) -> Result<NNField> {
    patchmatch_with_hook(quad, init, iterations, radius, rng_seed, |_, _| {})
}

/// [`patchmatch`] that calls `hook(iteration, field)` after every iteration.
pub fn patchmatch_with_hook(
    quad: &FeatureQuad,
    init: NnfInit<'_>,
    iterations: usize,
    radius: usize,
    rng_seed: u64,
    hook: impl FnMut(usize, &NNField),
) -> Result<NNField> {
    let cfg = PatchMatchConfig {
        iterations,
        patch_radius: radius,
        seed: rng_seed,
        search_samples: DEFAULT_SEARCH_SAMPLES,
        max_search_radius: 0,
    };
    patchmatch_with_config(quad, init, &cfg, hook)
}

/// Fully parameterized PatchMatch.
pub fn patchmatch_with_config(
    quad: &FeatureQuad,
    init: NnfInit<'_>,
    cfg: &PatchMatchConfig,
    mut hook: impl FnMut(usize, &NNField),
) -> Result<NNField> {
    let PatchMatchConfig {
        iterations,
        patch_radius: radius,
        seed: rng_seed,
        search_samples,
        max_search_radius,
    } = *cfg;
    if iterations == 0 || search_samples == 0 {
        return Err(Error::InvalidConfig(
            "patchmatch needs at least one iteration and one search sample".into(),
        ));
    }
    let (sh, sw) = quad.src_dims();
    let (dh, dw) = quad.dst_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut best: Vec<Coord> = match init {
        NnfInit::Random => (0..sh * sw)
            .map(|_| (rng.random_range(0..dw), rng.random_range(0..dh)))
            .collect(),
        NnfInit::Field(f) => {
            if (f.src_h, f.src_w, f.dst_h, f.dst_w) != (sh, sw, dh, dw) {
                return Err(Error::DimensionMismatch {
                    context: "patchmatch initial field",
                    expected: (sh, sw),
                    got: (f.src_h, f.src_w),
                });
            }
            (0..sh * sw).map(|i| f.get_rounded(i % sw, i / sw)).collect()
        }
    };
    let mut cost: Vec<f32> = (0..sh * sw)
        .map(|i| patch_cost(quad, (i % sw, i / sw), best[i], radius))
        .collect();

    let full = dh.max(dw);
    let max_radius = if max_search_radius == 0 { full } else { max_search_radius.min(full) } as i64;
    for it in 0..iterations {
        let forward = it % 2 == 0;
        let step: isize = if forward { 1 } else { -1 };
        for row in 0..sh {
            let y = if forward { row } else { sh - 1 - row };
            for col in 0..sw {
                let x = if forward { col } else { sw - 1 - col };
                let i = y * sw + x;

                // propagation from the already visited horizontal and vertical neighbors
                let nx = x as isize - step;
                if nx >= 0 && nx < sw as isize {
                    let (qx, qy) = best[y * sw + nx as usize];
                    let cand = ((qx as isize + step).clamp(0, dw as isize - 1) as usize, qy);
                    try_candidate(quad, (x, y), cand, radius, &mut best[i], &mut cost[i]);
                }
                let ny = y as isize - step;
                if ny >= 0 && ny < sh as isize {
                    let (qx, qy) = best[ny as usize * sw + x];
                    let cand = (qx, (qy as isize + step).clamp(0, dh as isize - 1) as usize);
                    try_candidate(quad, (x, y), cand, radius, &mut best[i], &mut cost[i]);
                }

                // random search around the incumbent with shrinking radius
                let mut r = max_radius;
                while r >= 1 {
                    for _ in 0..search_samples {
                        let (bx, by) = best[i];
                        let cx = rng.random_range(window(bx, r, dw));
                        let cy = rng.random_range(window(by, r, dh));
                        try_candidate(quad, (x, y), (cx, cy), radius, &mut best[i], &mut cost[i]);
                    }
                    r /= 2;
                }
            }
        }
        let field = to_field(&best, &cost, (sh, sw), (dh, dw), radius);
        hook(it, &field);
        if it + 1 == iterations {
            return Ok(field);
        }
    }
    unreachable!("iterations >= 1")
}

/// The search window `[c - r, c + r]` clipped to `[0, n)`, so candidates are
/// uniform over the in-bounds part instead of piling up on the border.
#[inline]
fn window(c: usize, r: i64, n: usize) -> core::ops::RangeInclusive<usize> {
    let lo = (c as i64 - r).max(0) as usize;
    let hi = (c as i64 + r).min(n as i64 - 1) as usize;
    lo..=hi
}

#[inline]
fn try_candidate(
    quad: &FeatureQuad,
    p: Coord,
    cand: Coord,
    radius: usize,
    best: &mut Coord,
    best_cost: &mut f32,
) {
    if cand == *best {
        return;
    }
    let c = patch_cost(quad, p, cand, radius);
    if c < *best_cost {
        *best = cand;
        *best_cost = c;
    }
}

fn to_field(
    best: &[Coord],
    cost: &[f32],
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
    radius: usize,
) -> NNField {
    NNField {
        src_h: sh,
        src_w: sw,
        dst_h: dh,
        dst_w: dw,
        patch_radius: radius,
        mapping: best.iter().map(|(x, y)| [*x as f32, *y as f32]).collect(),
        cost: cost.to_vec(),
        cost_stale: false,
    }
}

/// Carries a field to finer grids. Each new source pixel takes its parent's
/// target, scaled by the destination ratio, plus its own offset from the
/// parent's scaled position (scaled by the destination/source ratio), and is
/// clamped in-bounds. Costs are marked stale.
pub fn upsample_nnf(field: &NNField, new_src: (usize, usize), new_dst: (usize, usize)) -> NNField {
    let (nsh, nsw) = new_src;
    let (ndh, ndw) = new_dst;
    let rs_y = nsh as f32 / field.src_h as f32;
    let rs_x = nsw as f32 / field.src_w as f32;
    let rd_y = ndh as f32 / field.dst_h as f32;
    let rd_x = ndw as f32 / field.dst_w as f32;
    let mut mapping = Vec::with_capacity(nsh * nsw);
    for y in 0..nsh {
        let py = ((y as f32 / rs_y) as usize).min(field.src_h - 1);
        let oy = (y as f32 - py as f32 * rs_y) * (rd_y / rs_y);
        for x in 0..nsw {
            let px = ((x as f32 / rs_x) as usize).min(field.src_w - 1);
            let ox = (x as f32 - px as f32 * rs_x) * (rd_x / rs_x);
            let [qx, qy] = field.get(px, py);
            mapping.push([
                (qx * rd_x + ox).clamp(0.0, (ndw - 1) as f32),
                (qy * rd_y + oy).clamp(0.0, (ndh - 1) as f32),
            ]);
        }
    }
    NNField {
        src_h: nsh,
        src_w: nsw,
        dst_h: ndh,
        dst_w: ndw,
        patch_radius: field.patch_radius,
        mapping,
        cost: vec![0.0; nsh * nsw],
        cost_stale: true,
    }
}

/// Pulls `source` (on the field's destination grid) onto the source grid by
/// bilinear sampling at each mapped coordinate.
pub fn warp(source: &Tensor, field: &NNField) -> Result<Tensor> {
    if source.dims() != (field.dst_h, field.dst_w) {
        return Err(Error::DimensionMismatch {
            context: "warp source",
            expected: (field.dst_h, field.dst_w),
            got: source.dims(),
        });
    }
    let c = source.channels();
    let mut out = Tensor::zeros(field.src_h, field.src_w, c);
    let mut buf = vec![0.0f32; c];
    for y in 0..field.src_h {
        for x in 0..field.src_w {
            let [qx, qy] = field.get(x, y);
            source.sample_bilinear(qx, qy, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
        }
    }
    Ok(out)
}
