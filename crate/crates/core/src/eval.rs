//! Evaluation protocol: per-pair metrics, run averaging, the published-table
//! consistency check, synthetic modality-gap pairs, and the matching
//! pipeline that produces the counts.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{
    describe, extract_patches, distance_matrix, DescriptorSet, Detector, Keypoint, PATCH_SIZE,
};
use crate::imgproc::{gaussian_blur, project, warp_homography};
use crate::matching::{
    cross_check, fuse_and_project, locate, ratio_match, rescale_coord, symmetric_error, verify, homography_dlt,
    Match, MatchOrigin, MatchSet, RansacConfig,
};
use crate::network::NetworkModel;
use crate::tensor::Tensor;

/// Metrics of one pair under one method. Counts are reals so averaged
/// records keep fractional means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pair_id: String,
    pub method: String,
    /// Matches after the ratio test and cross-check (fused when transfer is
    /// used).
    pub gm: f64,
    /// RANSAC inliers among the `gm` matches.
    pub inl: f64,
    pub ma: f64,
    /// Detection, description and matching wall-clock.
    pub rt_seconds: f64,
    /// Attribute-transfer wall-clock, reported apart from `rt_seconds`.
    pub transfer_seconds: f64,
    /// Matches after the ratio test only, before the cross-check.
    pub gm_ratio_only: f64,
    /// Set when `gm == 0`.
    pub degenerate: bool,
}

impl EvalRecord {
    pub fn from_counts(
        pair_id: impl Into<String>,
        method: impl Into<String>,
        gm: f64,
        inl: f64,
        gm_ratio_only: f64,
    ) -> Self {
        let (ma, degenerate) = accuracy(gm, inl);
        Self {
            pair_id: pair_id.into(),
            method: method.into(),
            gm,
            inl,
            ma,
            rt_seconds: 0.0,
            transfer_seconds: 0.0,
            gm_ratio_only,
            degenerate,
        }
    }
}

/// `inl / gm`, and `(0, true)` for an empty match set.
pub fn accuracy(gm: f64, inl: f64) -> (f64, bool) {
    if gm > 0.0 {
        (inl / gm, false)
    } else {
        (0.0, true)
    }
}

/// Rounds half away from zero at `decimals` places, for display.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let s = libm::pow(10.0, decimals as f64);
    libm::round(x * s) / s
}

/// Arithmetic mean of the counts and times; `ma` is recomputed from the
/// mean counts rather than averaged.
pub fn average_runs(records: &[EvalRecord]) -> Result<EvalRecord> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    if records
        .iter()
        .any(|r| r.pair_id != first.pair_id || r.method != first.method)
    {
        return Err(Error::InvalidConfig(
            "records to average must share pair_id and method".into(),
        ));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let gm = mean(|r| r.gm);
    let inl = mean(|r| r.inl);
    let (ma, degenerate) = accuracy(gm, inl);
    Ok(EvalRecord {
        pair_id: first.pair_id.clone(),
        method: first.method.clone(),
        gm,
        inl,
        ma,
        rt_seconds: mean(|r| r.rt_seconds),
        transfer_seconds: mean(|r| r.transfer_seconds),
        gm_ratio_only: mean(|r| r.gm_ratio_only),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub gm: f64,
    pub inl: f64,
    pub ma: f64,
    pub quotient: f64,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub tolerance: f64,
    pub rows: Vec<ConsistencyRow>,
    /// Indices of failing rows.
    pub violations: Vec<usize>,
}

impl ConsistencyReport {
    pub fn all_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Default band for comparing a reported accuracy with `inl / gm`.
pub const TABLE_TOLERANCE: f64 = 0.01;

/// Checks `|ma - inl / gm| <= tolerance` for every `(gm, inl, ma)` row.
pub fn check_table_consistency(table: &[(f64, f64, f64)], tolerance: f64) -> ConsistencyReport {
    let mut rows = Vec::with_capacity(table.len());
    let mut violations = Vec::new();
    for (i, &(gm, inl, ma)) in table.iter().enumerate() {
        let quotient = accuracy(gm, inl).0;
        let residual = (ma - quotient).abs();
        // a hair of slack so a residual of exactly the tolerance survives
        // decimal representation error
        let pass = residual <= tolerance + 1e-12;
        if !pass {
            violations.push(i);
        }
        rows.push(ConsistencyRow {
            gm,
            inl,
            ma,
            quotient,
            residual,
            pass,
        });
    }
    ConsistencyReport {
        tolerance,
        rows,
        violations,
    }
}

/// Appearance changes that turn a clean optical rendering into an
/// acoustic-looking one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityGap {
    /// Exponent applied to intensities in `[0, 1]`.
    pub gamma: f32,
    /// Gain about mid-grey; negative values invert polarity.
    pub contrast: f32,
    /// Standard deviation of the multiplicative speckle.
    pub speckle_sigma: f32,
    /// Gaussian blur sigma applied after the speckle.
    pub blur: f32,
}

impl ModalityGap {
    pub const NONE: ModalityGap = ModalityGap {
        gamma: 1.0,
        contrast: 1.0,
        speckle_sigma: 0.0,
        blur: 0.0,
    };
}

impl Default for ModalityGap {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            contrast: -1.0,
            speckle_sigma: 0.35,
            blur: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// The degraded, untransformed image.
    pub a: Tensor,
    /// The clean image warped by `ground_truth`.
    pub b: Tensor,
    /// Maps pixel coordinates of `a` to those of `b`.
    pub ground_truth: Matrix3<f64>,
}

/// Builds an acoustic/optical stand-in pair from a grayscale base image.
pub fn make_synthetic_pair(
    base: &Tensor,
    transform: &Matrix3<f64>,
    gap: &ModalityGap,
    seed: u64,
) -> Result<SyntheticPair> {
    if transform.try_inverse().is_none() || !transform.iter().all(|v| v.is_finite()) {
        return Err(Error::NonInvertible);
    }
    let base = crate::imgproc::to_gray(base);
    let b = warp_homography(&base, transform, base.height(), base.width(), 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut a = base.clone();
    if gap.gamma != 1.0 || gap.contrast != 1.0 {
        a = a.map(|v| {
            let g = libm::powf(v.clamp(0.0, 1.0), gap.gamma);
            0.5 + gap.contrast * (g - 0.5)
        });
    }
    if gap.speckle_sigma > 0.0 {
        for v in a.data_mut() {
            *v *= (1.0 + gap.speckle_sigma * normal.sample(&mut rng)).max(0.0);
        }
    }
    if gap.blur > 0.0 {
        a = gaussian_blur(&a, gap.blur as f64);
    }
    let a = a.map(|v| v.clamp(0.0, 1.0));
    Ok(SyntheticPair {
        a,
        b,
        ground_truth: *transform,
    })
}

/// A random planar scene of shaded ellipses and rectangles over a gradient,
/// overlaid with value-noise texture, with values in `[0, 1]`.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy, g0): (f32, f32, f32) = (
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(0.3..0.6),
    );
    let mut img = Tensor::from_fn(h, w, 1, |y, x, _| {
        g0 + gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5)
    });
    let side = h.min(w) as f32;
    let shapes = 14 + (h * w) / 1500;
    for _ in 0..shapes {
        let cx: f32 = rng.random_range(0.0..w as f32);
        let cy: f32 = rng.random_range(0.0..h as f32);
        let rx: f32 = rng.random_range(0.02..0.12) * side;
        let ry: f32 = rng.random_range(0.02..0.12) * side;
        let ang: f32 = rng.random_range(0.0..core::f32::consts::PI);
        let val: f32 = rng.random_range(0.0..1.0);
        let ellipse = rng.random_bool(0.6);
        let (c, s) = (libm::cosf(ang), libm::sinf(ang));
        let reach = rx.max(ry) * 1.5;
        let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize).min(w));
        let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let (u, v) = ((c * dx + s * dy) / rx, (-s * dx + c * dy) / ry);
                let inside = if ellipse {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    let shade = val * (0.85 + 0.15 * u);
                    img.set(y, x, 0, shade);
                }
            }
        }
    }
    // surface texture: three octaves of bilinear value noise
    for (cell, amp) in [(24usize, 0.22f32), (12, 0.14), (6, 0.08)] {
        let (gh, gw) = (h / cell + 2, w / cell + 2);
        let grid = Tensor::from_fn(gh, gw, 1, |_, _, _| rng.random_range(-1.0f32..1.0));
        let mut buf = [0.0f32];
        for y in 0..h {
            for x in 0..w {
                grid.sample_bilinear(x as f32 / cell as f32, y as f32 / cell as f32, &mut buf);
                let v = img.get(y, x, 0) + amp * buf[0];
                img.set(y, x, 0, v);
            }
        }
    }
    let img = gaussian_blur(&img, 0.8);
    img.map(|v| v.clamp(0.0, 1.0))
}

/// A homography that moves each image corner by up to `strength` times the
/// image size, seeded.
pub fn random_homography(h: usize, w: usize, strength: f64, seed: u64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let src = [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]];
    let dst: Vec<[f64; 2]> = src
        .iter()
        .map(|p| {
            [
                p[0] + rng.random_range(-strength..=strength) * wf,
                p[1] + rng.random_range(-strength..=strength) * hf,
            ]
        })
        .collect();
    homography_dlt(&src, &dst).unwrap_or_else(Matrix3::identity)
}

/// `(agreeing, flagged)`: how many flagged inliers have symmetric transfer
/// error below `thresh_px` under the true transform.
pub fn ground_truth_agreement(set: &MatchSet, truth: &Matrix3<f64>, thresh_px: f64) -> (usize, usize) {
    let Some(inv) = truth.try_inverse() else {
        return (0, set.inlier_count());
    };
    let mut ok = 0;
    let mut total = 0;
    for (m, f) in set.matches.iter().zip(&set.inlier_flags) {
        if !f {
            continue;
        }
        total += 1;
        let a = [m.pt_a[0] as f64, m.pt_a[1] as f64];
        let b = [m.pt_b[0] as f64, m.pt_b[1] as f64];
        if symmetric_error(truth, &inv, a, b) < thresh_px {
            ok += 1;
        }
    }
    (ok, total)
}

/// Keypoints with their descriptors; rows align.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorSet,
}

impl ImageFeatures {
    pub fn points(&self) -> Vec<[f32; 2]> {
        self.keypoints.iter().map(|k| [k.x, k.y]).collect()
    }
}

/// Detects, extracts patches and describes them. Keypoints whose patch is
/// constant or outside the image are dropped.
pub fn compute_features(
    image: &Tensor,
    detector: &dyn Detector,
    desc_model: &NetworkModel,
) -> Result<ImageFeatures> {
    let kps = detector.detect(image);
    let patches = extract_patches(image, &kps, PATCH_SIZE);
    let descriptors = describe(&patches, desc_model)?;
    let keypoints = patches.provenance.iter().map(|&i| kps[i].clone()).collect();
    Ok(ImageFeatures {
        keypoints,
        descriptors,
    })
}

/// Ratio-tested, cross-checked matches between two feature sets, with
/// coordinates filled in. The second value counts the ratio-only matches
/// from A to B.
pub fn match_features(
    fa: &ImageFeatures,
    fb: &ImageFeatures,
    ratio: f32,
    origin: MatchOrigin,
) -> Result<(Vec<Match>, usize)> {
    if fa.keypoints.len() < 2 || fb.keypoints.len() < 2 {
        return Ok((Vec::new(), 0));
    }
    let d = distance_matrix(&fa.descriptors, &fb.descriptors)?;
    let ab = ratio_match(&d, ratio)?;
    let ba = ratio_match(&d.transpose(), ratio)?;
    let mut kept = cross_check(&ab, &ba);
    locate(&mut kept, &fa.points(), &fb.points(), origin);
    Ok((kept, ab.len()))
}

/// Matching configuration shared by the raw and transfer pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub ratio: f32,
    pub ransac: RansacConfig,
    pub dedup_radius: f32,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac: RansacConfig::default(),
            dedup_radius: 2.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if !(self.ransac.thresh_px > 0.0) || !(self.dedup_radius >= 0.0) {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        if self.ransac.max_iters == 0 {
            return Err(Error::InvalidConfig("RANSAC needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Outcome of one matching pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineMatches {
    pub set: MatchSet,
    pub gm_ratio_only: usize,
}

impl PipelineMatches {
    pub fn record(&self, pair_id: &str, method: &str) -> EvalRecord {
        EvalRecord::from_counts(
            pair_id,
            method,
            self.set.len() as f64,
            self.set.inlier_count() as f64,
            self.gm_ratio_only as f64,
        )
    }
}

fn rescale(m: &mut [Match], sa: [f32; 2], sb: [f32; 2]) {
    for x in m {
        x.pt_a = rescale_coord(x.pt_a, sa);
        x.pt_b = rescale_coord(x.pt_b, sb);
    }
}

/// Baseline without transfer: A against B directly. `scale_a`/`scale_b`
/// map the matched grids back to the original images.
pub fn match_raw(
    feat_a: &ImageFeatures,
    feat_b: &ImageFeatures,
    scale_a: [f32; 2],
    scale_b: [f32; 2],
    cfg: &MatchConfig,
) -> Result<PipelineMatches> {
    let (mut ms, ratio_only) = match_features(feat_a, feat_b, cfg.ratio, MatchOrigin::Raw)?;
    rescale(&mut ms, scale_a, scale_b);
    let mut set = MatchSet::unverified(ms, Some(MatchOrigin::Raw));
    verify(&mut set, &cfg.ransac);
    Ok(PipelineMatches {
        set,
        gm_ratio_only: ratio_only,
    })
}

/// Matches A with B' and A' with B, then fuses both onto the originals.
/// The latents share their originals' grids.
pub fn match_transferred(
    feat_a: &ImageFeatures,
    feat_b: &ImageFeatures,
    feat_a_prime: &ImageFeatures,
    feat_b_prime: &ImageFeatures,
    scale_a: [f32; 2],
    scale_b: [f32; 2],
    cfg: &MatchConfig,
) -> Result<PipelineMatches> {
    let (m_opt, r1) = match_features(feat_a, feat_b_prime, cfg.ratio, MatchOrigin::AToBPrime)?;
    let (m_ac, r2) = match_features(feat_a_prime, feat_b, cfg.ratio, MatchOrigin::APrimeToB)?;
    let set = fuse_and_project(
        &MatchSet::unverified(m_opt, Some(MatchOrigin::AToBPrime)),
        &MatchSet::unverified(m_ac, Some(MatchOrigin::APrimeToB)),
        scale_a,
        scale_b,
        cfg.dedup_radius,
        &cfg.ransac,
    );
    Ok(PipelineMatches {
        set,
        gm_ratio_only: r1 + r2,
    })
}

/// Projects the corners of a `h x w` image through two transforms and
/// returns the largest corner disagreement in pixels.
pub fn corner_error(a: &Matrix3<f64>, b: &Matrix3<f64>, h: usize, w: usize) -> f64 {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]]
        .iter()
        .map(|p| {
            let (x1, y1) = project(a, p[0], p[1]);
            let (x2, y2) = project(b, p[0], p[1]);
            libm::hypot(x1 - x2, y1 - y2)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(gm: f64, inl: f64) -> EvalRecord {
        EvalRecord::from_counts("p", "m", gm, inl, gm)
    }

    #[test]
    fn accuracy_cases() {
        assert!((round_half_up(rec(67.0, 36.0).ma, 2) - 0.54).abs() < 1e-12);
        assert!((rec(422.0, 286.0).ma - 0.68).abs() <= 0.01);
        let z = rec(0.0, 0.0);
        assert_eq!(z.ma, 0.0);
        assert!(z.degenerate);
        assert_eq!(round_half_up(0.125, 2), 0.13);
    }

    #[test]
    fn averaging() {
        let one = rec(5.0, 2.0);
        assert_eq!(average_runs(&[one.clone()]).unwrap(), one);
        let avg = average_runs(&[rec(10.0, 5.0), rec(20.0, 10.0)]).unwrap();
        assert_eq!((avg.gm, avg.inl, avg.ma), (15.0, 7.5, 0.5));
        assert_eq!(average_runs(&[]), Err(Error::EmptyRecords));
        let mut other = rec(1.0, 1.0);
        other.pair_id = "q".into();
        assert!(average_runs(&[rec(1.0, 1.0), other]).is_err());
    }

    #[test]
    fn table_rows() {
        let r = check_table_consistency(&[(67.0, 36.0, 0.54), (1097.0, 1096.0, 0.99), (13.0, 7.0, 0.54)], 0.01);
        assert!(r.all_pass());
        assert!(r.rows[0].residual <= 0.0073);
        assert!((r.rows[2].quotient - 0.538).abs() < 5e-4);
        let bad = check_table_consistency(&[(10.0, 5.0, 0.6)], 0.01);
        assert_eq!(bad.violations, vec![0]);
    }

    #[test]
    fn synthetic_identity_and_determinism() {
        let base = procedural_scene(48, 40, 1);
        let p = make_synthetic_pair(&base, &Matrix3::identity(), &ModalityGap::NONE, 3).unwrap();
        assert_eq!(p.a, base);
        assert_eq!(p.b, base);
        let gap = ModalityGap::default();
        let h = random_homography(48, 40, 0.05, 2);
        let p1 = make_synthetic_pair(&base, &h, &gap, 9).unwrap();
        let p2 = make_synthetic_pair(&base, &h, &gap, 9).unwrap();
        assert_eq!(p1.a, p2.a);
        assert_eq!(p1.b, p2.b);
        assert!(make_synthetic_pair(&base, &Matrix3::zeros(), &gap, 0).is_err());
    }

    #[test]
    fn random_homography_moves_corners_within_bounds() {
        let h = random_homography(100, 200, 0.1, 5);
        let (wf, hf) = (199.0, 99.0);
        for p in [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]] {
            let (x, y) = project(&h, p[0], p[1]);
            assert!((x - p[0]).abs() <= 0.1 * wf + 1e-6);
            assert!((y - p[1]).abs() <= 0.1 * hf + 1e-6);
        }
        assert!(corner_error(&h, &h, 100, 200) == 0.0);
    }

    #[test]
    fn scene_is_in_range_and_seeded() {
        let a = procedural_scene(64, 64, 4);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, procedural_scene(64, 64, 4));
        assert_ne!(a, procedural_scene(64, 64, 5));
    }
}
