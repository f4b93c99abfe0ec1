//! From descriptor distances to verified correspondences.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::DistanceMatrix;
use crate::imgproc::project;

/// Which image pair a match was found on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatchOrigin {
    /// The untransferred pair A and B.
    Raw,
    /// A against the latent B'.
    AToBPrime,
    /// The latent A' against B.
    APrimeToB,
}

impl MatchOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchOrigin::Raw => "raw",
            MatchOrigin::AToBPrime => "a_bprime",
            MatchOrigin::APrimeToB => "aprime_b",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    pub pt_a: [f32; 2],
    pub pt_b: [f32; 2],
    pub dist: f32,
    pub ratio: f32,
    pub origin: MatchOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// `None` for a fused set, which mixes origins.
    pub src_tag: Option<MatchOrigin>,
    pub model: Option<Matrix3<f64>>,
    pub inlier_flags: Vec<bool>,
}

impl MatchSet {
    pub fn unverified(matches: Vec<Match>, src_tag: Option<MatchOrigin>) -> Self {
        let n = matches.len();
        Self {
            matches,
            src_tag,
            model: None,
            inlier_flags: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_flags.iter().filter(|f| **f).count()
    }
}

/// Nearest-neighbour matches of every row of `d` that pass the ratio test
/// `d1 / d2 < ratio_threshold`. Points are left at the origin; see
/// [`locate`].
pub fn ratio_match(d: &DistanceMatrix, ratio_threshold: f32) -> Result<Vec<Match>> {
    if d.cols < 2 {
        return Err(Error::NotEnoughMatches {
            needed: 2,
            got: d.cols,
        });
    }
    let mut out = Vec::new();
    for i in 0..d.rows {
        let row = d.row(i);
        let (mut j1, mut d1, mut d2) = (0usize, f32::INFINITY, f32::INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if v < d1 {
                d2 = d1;
                d1 = v;
                j1 = j;
            } else if v < d2 {
                d2 = v;
            }
        }
        let ratio = if d2 > 0.0 { d1 / d2 } else { 1.0 };
        if ratio < ratio_threshold {
            out.push(Match {
                idx_a: i,
                idx_b: j1,
                pt_a: [0.0; 2],
                pt_b: [0.0; 2],
                dist: d1,
                ratio,
                origin: MatchOrigin::Raw,
            });
        }
    }
    Ok(out)
}

/// Keeps `i -> j` from `m_ab` only when `m_ba` (matched on the transposed
/// distances, so its `idx_a` indexes B) maps `j -> i`.
pub fn cross_check(m_ab: &[Match], m_ba: &[Match]) -> Vec<Match> {
    let n_b = m_ba.iter().map(|m| m.idx_a + 1).max().unwrap_or(0);
    let mut back = vec![usize::MAX; n_b];
    for m in m_ba {
        back[m.idx_a] = m.idx_b;
    }
    m_ab.iter()
        .filter(|m| back.get(m.idx_b).copied() == Some(m.idx_a))
        .cloned()
        .collect()
}

/// Fills match coordinates from keypoint positions and tags the origin.
pub fn locate(matches: &mut [Match], pts_a: &[[f32; 2]], pts_b: &[[f32; 2]], origin: MatchOrigin) {
    for m in matches {
        m.pt_a = pts_a[m.idx_a];
        m.pt_b = pts_b[m.idx_b];
        m.origin = origin;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometricModel {
    Homography,
    Affine,
}

impl GeometricModel {
    pub fn sample_size(self) -> usize {
        match self {
            GeometricModel::Homography => 4,
            GeometricModel::Affine => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub thresh_px: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub model: GeometricModel,
    /// Stop early once this confidence of having drawn an all-inlier sample
    /// is reached. `None` always runs `max_iters` hypotheses.
    pub confidence: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            thresh_px: 3.0,
            max_iters: 2000,
            seed: 0,
            model: GeometricModel::Homography,
            confidence: None,
        }
    }
}

fn points(matches: &[Match]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    matches
        .iter()
        .map(|m| {
            (
                [m.pt_a[0] as f64, m.pt_a[1] as f64],
                [m.pt_b[0] as f64, m.pt_b[1] as f64],
            )
        })
        .unzip()
}

/// Hartley normalization: centroid to the origin, mean distance sqrt(2).
fn normalizer(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    let (cx, cy) = (cx / n, cy / n);
    let mean_d = pts
        .iter()
        .map(|p| libm::hypot(p[0] - cx, p[1] - cy))
        .sum::<f64>()
        / n;
    let s = if mean_d > 0.0 {
        core::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn finish(h: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let z = h[(2, 2)];
    if !h.iter().all(|v| v.is_finite()) || z.abs() < 1e-12 {
        return None;
    }
    let h = h / z;
    h.try_inverse()?;
    Some(h)
}

/// Normalized direct linear transform: the right singular vector of the
/// stacked constraints, found as the smallest eigenvector of `A^T A`.
pub fn homography_dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ta = normalizer(src);
    let tb = normalizer(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in src.iter().zip(dst) {
        let pa = ta * Vector3::new(a[0], a[1], 1.0);
        let pb = tb * Vector3::new(b[0], b[1], 1.0);
        let (x, y, u, v) = (pa.x, pa.y, pb.x, pb.y);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (mut k, mut best) = (0, f64::INFINITY);
    for (i, v) in eig.eigenvalues.iter().enumerate() {
        if *v < best {
            best = *v;
            k = i;
        }
    }
    let h = eig.eigenvectors.column(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    finish(tb.try_inverse()? * hn * ta)
}

/// Least-squares affine fit (normalized), at least three points.
pub fn affine_fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let ta = normalizer(src);
    let tb = normalizer(dst);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atu = Vector3::<f64>::zeros();
    let mut atv = Vector3::<f64>::zeros();
    for (a, b) in src.iter().zip(dst) {
        let pa = ta * Vector3::new(a[0], a[1], 1.0);
        let pb = tb * Vector3::new(b[0], b[1], 1.0);
        let r = Vector3::new(pa.x, pa.y, 1.0);
        ata += r * r.transpose();
        atu += r * pb.x;
        atv += r * pb.y;
    }
    let inv = ata.try_inverse()?;
    let (pu, pv) = (inv * atu, inv * atv);
    let hn = Matrix3::new(pu.x, pu.y, pu.z, pv.x, pv.y, pv.z, 0.0, 0.0, 1.0);
    finish(tb.try_inverse()? * hn * ta)
}

fn fit(model: GeometricModel, src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    match model {
        GeometricModel::Homography => homography_dlt(src, dst),
        GeometricModel::Affine => affine_fit(src, dst),
    }
}

/// Three points are treated as collinear when the sine of the angle they
/// span is below this.
const COLLINEAR_SIN: f64 = 1e-3;

fn collinear(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> bool {
    let (ux, uy) = (q[0] - p[0], q[1] - p[1]);
    let (vx, vy) = (r[0] - p[0], r[1] - p[1]);
    let cross = (ux * vy - uy * vx).abs();
    let norms = libm::hypot(ux, uy) * libm::hypot(vx, vy);
    norms == 0.0 || cross <= COLLINEAR_SIN * norms
}

/// True when any three of `pts` are (nearly) collinear or coincide.
pub fn degenerate_sample(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(pts[i], pts[j], pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// `max` of the forward and backward reprojection distances.
pub fn symmetric_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (fx, fy) = project(h, a[0], a[1]);
    let (bx, by) = project(h_inv, b[0], b[1]);
    let e = libm::hypot(fx - b[0], fy - b[1]).max(libm::hypot(bx - a[0], by - a[1]));
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn inliers(h: &Matrix3<f64>, a: &[[f64; 2]], b: &[[f64; 2]], thresh: f64) -> Option<Vec<bool>> {
    let h_inv = h.try_inverse()?;
    Some(
        a.iter()
            .zip(b)
            .map(|(p, q)| symmetric_error(h, &h_inv, *p, *q) < thresh)
            .collect(),
    )
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|f| **f).count()
}

/// Robust model fit. Hypotheses come from seeded minimal samples (samples
/// with three collinear points are skipped), the best inlier count wins with
/// ties going to the earlier hypothesis, and the winner is refit on its
/// inliers. Every flagged inlier has symmetric error below the threshold
/// under the returned model.
pub fn ransac(matches: &[Match], cfg: &RansacConfig) -> Result<(Matrix3<f64>, Vec<bool>)> {
    let k = cfg.model.sample_size();
    if matches.len() < k.max(4) {
        return Err(Error::NotEnoughMatches {
            needed: k.max(4),
            got: matches.len(),
        });
    }
    let (a, b) = points(matches);
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut needed_iters = cfg.max_iters;
    let mut idx = [0usize; 4];
    let mut it = 0;
    while it < cfg.max_iters.min(needed_iters) {
        it += 1;
        let mut filled = 0;
        while filled < k {
            let c = rng.random_range(0..n);
            if !idx[..filled].contains(&c) {
                idx[filled] = c;
                filled += 1;
            }
        }
        let sa: Vec<[f64; 2]> = idx[..k].iter().map(|&i| a[i]).collect();
        let sb: Vec<[f64; 2]> = idx[..k].iter().map(|&i| b[i]).collect();
        if degenerate_sample(&sa) || degenerate_sample(&sb) {
            continue;
        }
        let Some(h) = fit(cfg.model, &sa, &sb) else {
            continue;
        };
        let Some(flags) = inliers(&h, &a, &b, cfg.thresh_px) else {
            continue;
        };
        let c = count(&flags);
        if best.as_ref().is_none_or(|(_, _, bc)| c > *bc) {
            if let Some(conf) = cfg.confidence {
                let w = c as f64 / n as f64;
                let p_good = libm::pow(w, k as f64);
                if p_good >= 1.0 {
                    needed_iters = it;
                } else if p_good > 0.0 {
                    let est = libm::log(1.0 - conf) / libm::log(1.0 - p_good);
                    if est.is_finite() {
                        needed_iters = libm::ceil(est.max(0.0)) as usize;
                    }
                }
            }
            best = Some((h, flags, c));
        }
    }
    let min_inliers = 4;
    let Some((h, flags, _)) = best.filter(|b| b.2 >= min_inliers) else {
        return Err(Error::NoModel {
            needed: min_inliers,
        });
    };
    Ok(refine(cfg, &a, &b, h, flags, min_inliers))
}

/// Least-squares refits on the current consensus until it stops changing.
/// A minimal-sample model can pick up an extra borderline match that the
/// refit drops, so the refit wins even when it counts one fewer.
fn refine(
    cfg: &RansacConfig,
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    mut h: Matrix3<f64>,
    mut flags: Vec<bool>,
    min_inliers: usize,
) -> (Matrix3<f64>, Vec<bool>) {
    for _ in 0..REFINE_ROUNDS {
        let (ia, ib): (Vec<_>, Vec<_>) = a
            .iter()
            .zip(b)
            .zip(&flags)
            .filter(|(_, f)| **f)
            .map(|((p, q), _)| (*p, *q))
            .unzip();
        let Some(refit) = fit(cfg.model, &ia, &ib) else {
            break;
        };
        let Some(rf) = inliers(&refit, a, b, cfg.thresh_px) else {
            break;
        };
        if count(&rf) < min_inliers {
            break;
        }
        let stable = rf == flags;
        h = refit;
        flags = rf;
        if stable {
            break;
        }
    }
    (h, flags)
}

const REFINE_ROUNDS: usize = 5;

/// Homography RANSAC with the given threshold, iteration cap and seed.
pub fn ransac_homography(
    matches: &[Match],
    thresh_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(Matrix3<f64>, Vec<bool>)> {
    ransac(
        matches,
        &RansacConfig {
            thresh_px,
            max_iters,
            seed,
            ..RansacConfig::default()
        },
    )
}

/// Runs RANSAC on `set` in place. Too few matches or no consensus leave the
/// set without a model and with every flag cleared.
pub fn verify(set: &mut MatchSet, cfg: &RansacConfig) {
    match ransac(&set.matches, cfg) {
        Ok((h, flags)) => {
            set.model = Some(h);
            set.inlier_flags = flags;
        }
        Err(_) => {
            set.model = None;
            set.inlier_flags = vec![false; set.matches.len()];
        }
    }
}

/// Greedy duplicate removal in order of increasing descriptor distance: a
/// match is dropped when both of its endpoints lie within `radius` of the
/// endpoints of an already kept match. Ties keep input order.
pub fn dedup_matches(mut all: Vec<Match>, radius: f32) -> Vec<Match> {
    all.sort_by(|x, y| x.dist.total_cmp(&y.dist));
    let r2 = radius * radius;
    let d2 = |p: [f32; 2], q: [f32; 2]| {
        let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
        dx * dx + dy * dy
    };
    let mut kept: Vec<Match> = Vec::with_capacity(all.len());
    for m in all {
        let dup = kept
            .iter()
            .any(|k| d2(k.pt_a, m.pt_a) <= r2 && d2(k.pt_b, m.pt_b) <= r2);
        if !dup {
            kept.push(m);
        }
    }
    kept
}

/// Maps a coordinate on a resized grid back to the original grid, where
/// `scale` is original size over resized size and pixel centres align.
#[inline]
pub fn rescale_coord(p: [f32; 2], scale: [f32; 2]) -> [f32; 2] {
    [
        (p[0] + 0.5) * scale[0] - 0.5,
        (p[1] + 0.5) * scale[1] - 0.5,
    ]
}

/// Merges the two direction match sets onto the original images. Each set's
/// coordinates are rescaled with [`rescale_coord`] by the per-axis factors
/// mapping the matched grids back to the originals, duplicates are removed
/// with
/// [`dedup_matches`], and a final robust fit supplies the inlier flags.
pub fn fuse_and_project(
    m_opt: &MatchSet,
    m_ac: &MatchSet,
    scale_a: [f32; 2],
    scale_b: [f32; 2],
    dedup_radius: f32,
    cfg: &RansacConfig,
) -> MatchSet {
    let rescale = |m: &Match| {
        let mut m = m.clone();
        m.pt_a = rescale_coord(m.pt_a, scale_a);
        m.pt_b = rescale_coord(m.pt_b, scale_b);
        m
    };
    let all: Vec<Match> = m_opt.matches.iter().chain(&m_ac.matches).map(rescale).collect();
    let mut fused = MatchSet::unverified(dedup_matches(all, dedup_radius), None);
    verify(&mut fused, cfg);
    fused
}
