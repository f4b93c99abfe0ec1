//! Coarse-to-fine attribute transfer between two images.
//!
//! Starting at the deepest pyramid level with the latent features equal to
//! the content features, every level runs a bidirectional PatchMatch, warps
//! the other image's features through the field, inverts the warped map one
//! level down by gradient descent, and blends it with the content features
//! under a magnitude-driven weight map. At level 1 the fields drive a patch
//! vote that reconstructs the two latent images.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{FeaturePyramid, NetworkModel, PYRAMID_LEVELS};
use crate::nnf::{
    patchmatch_with_config, upsample_nnf, warp, FeatureQuad, NNField, NnfInit, PatchMatchConfig,
    DEFAULT_SEARCH_SAMPLES,
};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalogyConfig {
    /// Coarsest level the search starts from (1..=5).
    pub levels: usize,
    /// Content weight per level, index 0 is level 1. Level 5 is never blended.
    pub alpha: [f32; 4],
    pub weight_kappa: f32,
    pub weight_tau: f32,
    /// Patch radius per level, index 0 is level 1.
    pub patch_radius: [usize; PYRAMID_LEVELS],
    pub pm_iterations: usize,
    pub pm_search_samples: usize,
    /// Random search radius cap per level, index 0 is level 1, 0 means the whole image.
    pub search_radius: [usize; PYRAMID_LEVELS],
    pub deconv_iterations: usize,
    pub deconv_step: f32,
    pub rng_seed: u64,
}

impl Default for AnalogyConfig {
    fn default() -> Self {
        Self {
            levels: PYRAMID_LEVELS,
            alpha: [0.1, 0.6, 0.7, 0.8],
            weight_kappa: 300.0,
            weight_tau: 0.05,
            patch_radius: [4, 4, 3, 3, 2],
            pm_iterations: 10,
            pm_search_samples: DEFAULT_SEARCH_SAMPLES,
            search_radius: [2, 2, 4, 6, 0],
            deconv_iterations: 400,
            deconv_step: 0.05,
            rng_seed: 0,
        }
    }
}

impl AnalogyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=PYRAMID_LEVELS).contains(&self.levels) {
            return Err(Error::InvalidConfig(alloc::format!(
                "levels must be within 1..=5, got {}",
                self.levels
            )));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig("alpha values must lie in [0, 1]".into()));
        }
        if self.pm_iterations == 0 || self.deconv_iterations == 0 || self.pm_search_samples == 0 {
            return Err(Error::InvalidConfig("iteration counts must be at least 1".into()));
        }
        if !(self.deconv_step.is_finite() && self.deconv_step > 0.0) {
            return Err(Error::InvalidConfig("deconvolution step must be positive".into()));
        }
        if !self.weight_kappa.is_finite() || !self.weight_tau.is_finite() {
            return Err(Error::InvalidConfig("weight parameters must be finite".into()));
        }
        Ok(())
    }

    /// Content weight used when blending into `level` (1..=4).
    pub fn alpha_for(&self, level: usize) -> f32 {
        self.alpha[level - 1]
    }

    fn pm_config(&self, level: usize, direction: u64) -> PatchMatchConfig {
        PatchMatchConfig {
            iterations: self.pm_iterations,
            patch_radius: self.patch_radius[level - 1],
            seed: derive_seed(self.rng_seed, (level as u64) << 8 | direction),
            search_samples: self.pm_search_samples,
            max_search_radius: self.search_radius[level - 1],
        }
    }
}

/// SplitMix64 step used to derive independent stream seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Working set at one level of the coarse-to-fine loop.
#[derive(Debug, Clone)]
pub struct AnalogyState {
    pub level: usize,
    pub fa: Tensor,
    pub fb: Tensor,
    pub fa_prime: Tensor,
    pub fb_prime: Tensor,
    pub phi_ab: NNField,
    pub phi_ba: NNField,
}

fn random_field(rng: &mut ChaCha8Rng, src: (usize, usize), dst: (usize, usize), radius: usize) -> NNField {
    let mut f = NNField::constant(src, dst, [0.0, 0.0], radius);
    for m in f.mapping.iter_mut() {
        *m = [rng.random_range(0..dst.1) as f32, rng.random_range(0..dst.0) as f32];
    }
    f
}

/// Sets up the coarsest level: latents copied from the content features and
/// both fields drawn uniformly at random from `cfg.rng_seed`.
pub fn init_coarsest(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    cfg: &AnalogyConfig,
) -> Result<AnalogyState> {
    cfg.validate()?;
    if pyr_a.levels.len() != PYRAMID_LEVELS || pyr_b.levels.len() != PYRAMID_LEVELS {
        return Err(Error::InvalidModel("pyramids must have five levels".into()));
    }
    for (a, b) in pyr_a.levels.iter().zip(&pyr_b.levels) {
        if a.channels() != b.channels() {
            return Err(Error::ChannelMismatch {
                expected: a.channels(),
                got: b.channels(),
            });
        }
    }
    let level = cfg.levels;
    let fa = pyr_a.level(level).clone();
    let fb = pyr_b.level(level).clone();
    let radius = cfg.patch_radius[level - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, 0xC0A5));
    let phi_ab = random_field(&mut rng, fa.dims(), fb.dims(), radius);
    let phi_ba = random_field(&mut rng, fb.dims(), fa.dims(), radius);
    Ok(AnalogyState {
        level,
        fa_prime: fa.clone(),
        fb_prime: fb.clone(),
        fa,
        fb,
        phi_ab,
        phi_ba,
    })
}

/// Objective values of the accepted gradient steps of one inversion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeconvTrace {
    pub objective: Vec<f64>,
    pub rejected_steps: usize,
    pub final_step: f32,
}

/// Initial guess for inverting the segment ending at `level`: the target is
/// resized to the lower level's grid and its channels are carried back
/// through the segment's convolutions with spatially summed, transposed
/// weights, then rescaled by the least-squares gain.
pub fn deconv_initial_guess(
    model: &NetworkModel,
    target: &Tensor,
    level: usize,
    out_dims: (usize, usize),
) -> Result<Tensor> {
    let convs = model.segment_convs(level - 1)?;
    let mut x = resize_bilinear(target, out_dims.0, out_dims.1)?;
    for spec in convs.iter().rev() {
        if x.channels() != spec.out_channels {
            return Err(Error::ChannelMismatch {
                expected: spec.out_channels,
                got: x.channels(),
            });
        }
        let mut proj = vec![0.0f32; spec.out_channels * spec.in_channels];
        for o in 0..spec.out_channels {
            for i in 0..spec.in_channels {
                let mut s = 0.0;
                for ky in 0..spec.kernel_h {
                    for kx in 0..spec.kernel_w {
                        s += spec.weight(o, i, ky, kx);
                    }
                }
                proj[o * spec.in_channels + i] = s;
            }
        }
        let mut next = Tensor::zeros(x.height(), x.width(), spec.in_channels);
        for y in 0..x.height() {
            for xx in 0..x.width() {
                let src = x.pixel(y, xx);
                let dst = next.pixel_mut(y, xx);
                for (o, v) in src.iter().enumerate() {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += proj[o * spec.in_channels + i] * v;
                    }
                }
                for d in dst.iter_mut() {
                    *d = d.max(0.0);
                }
            }
        }
        x = next;
    }
    // the projection ignores kernel gains, so fit a single scale c >= 0
    // minimising ||segment(c x) - target||^2 (exact when biases are zero)
    let y = model.forward_segment(&x, level - 1, level)?;
    if y.dims() == target.dims() && y.channels() == target.channels() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, b) in y.data().iter().zip(target.data()) {
            num += *a as f64 * *b as f64;
            den += *a as f64 * *a as f64;
        }
        if den > 0.0 && num > 0.0 {
            let c = (num / den) as f32;
            x = x.map(|v| v * c);
        }
    }
    Ok(x)
}

/// Inverts the segment `level-1 -> level`: finds a level `level-1` map whose
/// forward pass reproduces `target`, starting from [`deconv_initial_guess`].
pub fn deconvolve(
    model: &NetworkModel,
    target: &Tensor,
    level: usize,
    out_dims: (usize, usize),
    cfg: &AnalogyConfig,
) -> Result<(Tensor, DeconvTrace)> {
    let init = deconv_initial_guess(model, target, level, out_dims)?;
    deconvolve_from(model, target, level, init, cfg)
}

/// Gradient descent on `||segment(x) - target||^2` from `init`. A step is
/// accepted only if it strictly lowers the objective; otherwise the step size
/// halves. Negative values are clamped to zero on exit.
pub fn deconvolve_from(
    model: &NetworkModel,
    target: &Tensor,
    level: usize,
    init: Tensor,
    cfg: &AnalogyConfig,
) -> Result<(Tensor, DeconvTrace)> {
    if !(2..=PYRAMID_LEVELS).contains(&level) {
        return Err(Error::InvalidConfig(alloc::format!(
            "deconvolution level must be within 2..=5, got {level}"
        )));
    }
    let from = level - 1;
    let mut x = init;
    let (mut f, mut g) = model.segment_objective_grad(&x, target, from)?;
    let mut trace = DeconvTrace {
        objective: vec![f],
        rejected_steps: 0,
        final_step: cfg.deconv_step,
    };
    let mut step = cfg.deconv_step;
    for iteration in 0..cfg.deconv_iterations {
        if f == 0.0 || step < 1e-20 {
            break;
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { level, iteration });
        }
        let mut cand = x.clone();
        for (c, gi) in cand.data_mut().iter_mut().zip(g.data()) {
            *c -= step * gi;
        }
        let (fc, gc) = model.segment_objective_grad(&cand, target, from)?;
        if fc.is_finite() && fc < f {
            x = cand;
            f = fc;
            g = gc;
            trace.objective.push(f);
        } else {
            trace.rejected_steps += 1;
            step *= 0.5;
        }
    }
    trace.final_step = step;
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
    Ok((x, trace))
}

/// Per-position content weight `alpha * sigmoid(kappa * (m - tau))`, where `m`
/// is the squared channel norm rescaled to `[0, 1]` over the map.
pub fn weight_map(content: &Tensor, alpha: f32, cfg: &AnalogyConfig) -> Tensor {
    let (h, w) = content.dims();
    let mut mags = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            mags.push(content.pixel(y, x).iter().map(|v| v * v).sum::<f32>());
        }
    }
    let max = mags.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data = mags
        .into_iter()
        .map(|m| {
            let z = cfg.weight_kappa * (m * scale - cfg.weight_tau);
            alpha / (1.0 + libm::expf(-z))
        })
        .collect();
    Tensor::new(h, w, 1, data).expect("weights are finite")
}

/// `content * w + warped_style * (1 - w)`, with the single-channel `w`
/// broadcast across channels.
pub fn blend(content: &Tensor, warped_style: &Tensor, w: &Tensor) -> Result<Tensor> {
    if !content.same_shape(warped_style) {
        return Err(Error::DimensionMismatch {
            context: "blend style",
            expected: content.dims(),
            got: warped_style.dims(),
        });
    }
    if w.dims() != content.dims() || w.channels() != 1 {
        return Err(Error::DimensionMismatch {
            context: "blend weights",
            expected: content.dims(),
            got: w.dims(),
        });
    }
    let c = content.channels();
    let mut out = content.clone();
    for ((o, s), wv) in out
        .data_mut()
        .chunks_mut(c)
        .zip(warped_style.data().chunks(c))
        .zip(w.data())
    {
        for (ov, sv) in o.iter_mut().zip(s) {
            *ov = *ov * wv + sv * (1.0 - wv);
        }
    }
    Ok(out)
}

/// Latent images from level-1 fields by 3x3 patch voting: every source pixel
/// `s` votes the patch of the other image around `phi(s)` onto the patch
/// around `s`, and each pixel takes the mean of the votes it receives.
pub fn reconstruct_latent(
    img_a: &Tensor,
    img_b: &Tensor,
    phi_ab: &NNField,
    phi_ba: &NNField,
) -> Result<(Tensor, Tensor)> {
    Ok((vote(img_b, phi_ab, img_a.dims())?, vote(img_a, phi_ba, img_b.dims())?))
}

fn vote(source: &Tensor, field: &NNField, out_dims: (usize, usize)) -> Result<Tensor> {
    if (field.src_h, field.src_w) != out_dims {
        return Err(Error::DimensionMismatch {
            context: "latent reconstruction field source",
            expected: out_dims,
            got: (field.src_h, field.src_w),
        });
    }
    if (field.dst_h, field.dst_w) != source.dims() {
        return Err(Error::DimensionMismatch {
            context: "latent reconstruction field target",
            expected: source.dims(),
            got: (field.dst_h, field.dst_w),
        });
    }
    let (h, w) = out_dims;
    let c = source.channels();
    let mut acc = vec![0.0f64; h * w * c];
    let mut count = vec![0u32; h * w];
    let mut buf = vec![0.0f32; c];
    let (sh, sw) = (source.height() as f32, source.width() as f32);
    for sy in 0..h {
        for sx in 0..w {
            let [qx, qy] = field.get(sx, sy);
            for dy in -1isize..=1 {
                let py = sy as isize + dy;
                let ty = qy + dy as f32;
                if py < 0 || py >= h as isize || ty < 0.0 || ty > sh - 1.0 {
                    continue;
                }
                for dx in -1isize..=1 {
                    let px = sx as isize + dx;
                    let tx = qx + dx as f32;
                    if px < 0 || px >= w as isize || tx < 0.0 || tx > sw - 1.0 {
                        continue;
                    }
                    source.sample_bilinear(tx, ty, &mut buf);
                    let i = py as usize * w + px as usize;
                    for (a, v) in acc[i * c..(i + 1) * c].iter_mut().zip(&buf) {
                        *a += *v as f64;
                    }
                    count[i] += 1;
                }
            }
        }
    }
    let data = acc
        .chunks(c)
        .zip(&count)
        .flat_map(|(px, n)| {
            let inv = if *n > 0 { 1.0 / *n as f64 } else { 0.0 };
            px.iter().map(move |v| (*v * inv) as f32)
        })
        .collect();
    Tensor::new(h, w, c, data)
}

/// Diagnostics collected during [`run_analogy`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalogyReport {
    /// `(level, total cost a->b, total cost b->a)` after each level's search.
    pub level_costs: Vec<(usize, f64, f64)>,
    /// `(level, branch, trace)`; branch `'a'` builds A', `'b'` builds B'.
    pub deconv_traces: Vec<(usize, char, DeconvTrace)>,
    /// `(level, mean W_A, mean W_B)` of the weight maps used at each blended level.
    pub weight_means: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct AnalogyOutput {
    pub latent_a: Tensor,
    pub latent_b: Tensor,
    pub phi_ab: NNField,
    pub phi_ba: NNField,
    pub report: AnalogyReport,
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().map(|v| *v as f64).sum::<f64>() / t.data().len().max(1) as f64
}

/// One refinement step from `state.level` to `state.level - 1`, after the
/// fields at `state.level` have been searched.
fn descend(
    model: &NetworkModel,
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    state: &mut AnalogyState,
    cfg: &AnalogyConfig,
    report: &mut AnalogyReport,
) -> Result<()> {
    let l = state.level;
    let next = l - 1;
    let fa_next = pyr_a.level(next);
    let fb_next = pyr_b.level(next);

    let warped_b = warp(&state.fb, &state.phi_ab)?;
    let (rb, trace_a) = deconvolve(model, &warped_b, l, fa_next.dims(), cfg)?;
    let wa = weight_map(fa_next, cfg.alpha_for(next), cfg);
    let fa_prime = blend(fa_next, &rb, &wa)?;

    let warped_a = warp(&state.fa, &state.phi_ba)?;
    let (ra, trace_b) = deconvolve(model, &warped_a, l, fb_next.dims(), cfg)?;
    let wb = weight_map(fb_next, cfg.alpha_for(next), cfg);
    let fb_prime = blend(fb_next, &ra, &wb)?;

    report.deconv_traces.push((l, 'a', trace_a));
    report.deconv_traces.push((l, 'b', trace_b));
    report.weight_means.push((next, mean(&wa), mean(&wb)));

    state.phi_ab = upsample_nnf(&state.phi_ab, fa_next.dims(), fb_next.dims());
    state.phi_ba = upsample_nnf(&state.phi_ba, fb_next.dims(), fa_next.dims());
    for f in [&mut state.phi_ab, &mut state.phi_ba] {
        f.patch_radius = cfg.patch_radius[next - 1];
    }
    state.level = next;
    state.fa = fa_next.clone();
    state.fb = fb_next.clone();
    state.fa_prime = fa_prime;
    state.fb_prime = fb_prime;
    Ok(())
}

/// Searches both fields at the current level, in place.
pub fn search_level(state: &mut AnalogyState, cfg: &AnalogyConfig) -> Result<()> {
    let l = state.level;
    let quad_ab = FeatureQuad::normalized(&state.fa, &state.fb_prime, &state.fa_prime, &state.fb)?;
    let quad_ba = FeatureQuad::normalized(&state.fb, &state.fa_prime, &state.fb_prime, &state.fa)?;
    state.phi_ab = patchmatch_with_config(&quad_ab, NnfInit::Field(&state.phi_ab), &cfg.pm_config(l, 0), |_, _| {})?;
    state.phi_ba = patchmatch_with_config(&quad_ba, NnfInit::Field(&state.phi_ba), &cfg.pm_config(l, 1), |_, _| {})?;
    Ok(())
}

/// Stage boundaries reported by [`run_analogy_observed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalogyStage {
    Pyramids,
    /// Both fields searched at the level.
    Search(usize),
    /// Warp, deconvolution and blend from the level down to the next.
    Refine(usize),
    Reconstruct,
}

/// Full attribute transfer: returns latent A' (A's structure, B's
/// appearance), latent B', and the final fields on image resolution.
pub fn run_analogy(
    img_a: &Tensor,
    img_b: &Tensor,
    model: &NetworkModel,
    cfg: &AnalogyConfig,
) -> Result<AnalogyOutput> {
    run_analogy_observed(img_a, img_b, model, cfg, &mut |_, _| {})
}

/// [`run_analogy`] with `observe` called as each stage finishes, seeing the
/// state as it stands at that point.
pub fn run_analogy_observed(
    img_a: &Tensor,
    img_b: &Tensor,
    model: &NetworkModel,
    cfg: &AnalogyConfig,
    observe: &mut dyn FnMut(AnalogyStage, &AnalogyState),
) -> Result<AnalogyOutput> {
    cfg.validate()?;
    if img_a.channels() != img_b.channels() {
        return Err(Error::ChannelMismatch {
            expected: img_a.channels(),
            got: img_b.channels(),
        });
    }
    let pyr_a = model.extract_pyramid(img_a)?;
    let pyr_b = model.extract_pyramid(img_b)?;
    let mut state = init_coarsest(&pyr_a, &pyr_b, cfg)?;
    let mut report = AnalogyReport::default();
    observe(AnalogyStage::Pyramids, &state);
    loop {
        search_level(&mut state, cfg)?;
        observe(AnalogyStage::Search(state.level), &state);
        report
            .level_costs
            .push((state.level, state.phi_ab.total_cost(), state.phi_ba.total_cost()));
        if state.level == 1 {
            break;
        }
        let level = state.level;
        descend(model, &pyr_a, &pyr_b, &mut state, cfg, &mut report)?;
        observe(AnalogyStage::Refine(level), &state);
    }
    if (state.phi_ab.src_h, state.phi_ab.src_w) != img_a.dims()
        || (state.phi_ab.dst_h, state.phi_ab.dst_w) != img_b.dims()
    {
        state.phi_ab = upsample_nnf(&state.phi_ab, img_a.dims(), img_b.dims());
        state.phi_ba = upsample_nnf(&state.phi_ba, img_b.dims(), img_a.dims());
    }
    let (latent_a, latent_b) = reconstruct_latent(img_a, img_b, &state.phi_ab, &state.phi_ba)?;
    observe(AnalogyStage::Reconstruct, &state);
    let AnalogyState { phi_ab, phi_ba, .. } = state;
    Ok(AnalogyOutput {
        latent_a,
        latent_b,
        phi_ab,
        phi_ba,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::test_models::tiny_backbone;

    fn random_tensor(seed: u64, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn init_copies_content_and_is_seeded() {
        let m = tiny_backbone(1);
        let pa = m.extract_pyramid(&random_tensor(1, 64, 64, 1, 0.0, 1.0)).unwrap();
        let pb = m.extract_pyramid(&random_tensor(2, 64, 48, 1, 0.0, 1.0)).unwrap();
        let cfg = AnalogyConfig::default();
        let s = init_coarsest(&pa, &pb, &cfg).unwrap();
        assert_eq!(s.level, 5);
        assert_eq!(s.fa_prime, *pa.level(5));
        assert_eq!(s.fb_prime, *pb.level(5));
        assert!(s.phi_ab.in_bounds() && s.phi_ba.in_bounds());
        let s2 = init_coarsest(&pa, &pb, &cfg).unwrap();
        assert_eq!(s.phi_ab, s2.phi_ab);
        assert_eq!(s.phi_ba, s2.phi_ba);
    }

    #[test]
    fn self_pair_coarsest_search_reaches_zero() {
        let m = tiny_backbone(2);
        let img = random_tensor(3, 64, 64, 1, 0.0, 1.0);
        let p = m.extract_pyramid(&img).unwrap();
        let cfg = AnalogyConfig::default();
        let mut s = init_coarsest(&p, &p, &cfg).unwrap();
        search_level(&mut s, &cfg).unwrap();
        let px = (s.phi_ab.src_h * s.phi_ab.src_w) as f64;
        assert!(s.phi_ab.total_cost() <= 1e-6 * px);
        assert!(s.phi_ba.total_cost() <= 1e-6 * px);
    }

    #[test]
    fn deconvolve_at_optimum_is_identity() {
        let m = tiny_backbone(4);
        let p = m.extract_pyramid(&random_tensor(5, 64, 64, 1, 0.0, 1.0)).unwrap();
        let cfg = AnalogyConfig::default();
        for l in 2..=5 {
            let target = m.forward_segment(p.level(l - 1), l - 1, l).unwrap();
            let (x, trace) = deconvolve_from(&m, &target, l, p.level(l - 1).clone(), &cfg).unwrap();
            assert_eq!(trace.objective, vec![0.0]);
            assert_eq!(&x, p.level(l - 1));
        }
    }

    #[test]
    fn deconvolve_reduces_objective_monotonically() {
        let m = tiny_backbone(6);
        let cfg = AnalogyConfig {
            deconv_iterations: 200,
            ..AnalogyConfig::default()
        };
        for seed in 0..3 {
            let target = random_tensor(seed, 8, 8, 6, 0.0, 1.0);
            let (x, trace) = deconvolve(&m, &target, 3, (16, 16), &cfg).unwrap();
            assert!(x.data().iter().all(|v| *v >= 0.0));
            assert!(trace.objective.windows(2).all(|w| w[1] <= w[0]));
            let first = trace.objective[0];
            let last = *trace.objective.last().unwrap();
            assert!(last <= 0.5 * first, "{first} -> {last}");
        }
    }

    #[test]
    fn deconvolve_rejects_bad_level() {
        let m = tiny_backbone(6);
        let cfg = AnalogyConfig::default();
        assert!(deconvolve(&m, &Tensor::zeros(8, 8, 4), 1, (8, 8), &cfg).is_err());
    }

    #[test]
    fn weight_map_cases() {
        let cfg = AnalogyConfig::default();
        let z = weight_map(&Tensor::zeros(4, 4, 3), 0.8, &cfg);
        let expected = 0.8 / (1.0 + (300.0f32 * 0.05).exp());
        assert!(z.data().iter().all(|v| (v - expected).abs() < 1e-9 && *v < 1e-5));

        let mut hot = Tensor::zeros(5, 5, 2);
        hot.pixel_mut(2, 3).copy_from_slice(&[1.0, 2.0]);
        let w = weight_map(&hot, 0.7, &cfg);
        // m = 1 at the hot pixel: 0.7 * sigmoid(300 * 0.95)
        assert!((w.get(2, 3, 0) - 0.7).abs() < 1e-6);
        for (i, v) in w.data().iter().enumerate() {
            if i != 2 * 5 + 3 {
                assert!(*v < 1e-6);
            }
        }
        let r = random_tensor(1, 6, 6, 4, 0.0, 1.0);
        assert!(weight_map(&r, 0.0, &cfg).data().iter().all(|v| *v == 0.0));
        assert!(weight_map(&r, 0.6, &cfg).data().iter().all(|v| (0.0..=0.6).contains(v)));
    }

    #[test]
    fn blend_identities() {
        let c = random_tensor(1, 4, 5, 3, -1.0, 1.0);
        let s = random_tensor(2, 4, 5, 3, -1.0, 1.0);
        assert_eq!(blend(&c, &s, &Tensor::filled(4, 5, 1, 1.0)).unwrap(), c);
        assert_eq!(blend(&c, &s, &Tensor::filled(4, 5, 1, 0.0)).unwrap(), s);
        let mid = blend(
            &Tensor::filled(2, 2, 1, 2.0),
            &Tensor::filled(2, 2, 1, 4.0),
            &Tensor::filled(2, 2, 1, 0.5),
        )
        .unwrap();
        assert!(mid.data().iter().all(|v| *v == 3.0));
        assert!(blend(&c, &Tensor::zeros(4, 4, 3), &Tensor::zeros(4, 5, 1)).is_err());
    }

    #[test]
    fn reconstruct_identity_constant_and_vote_oracle() {
        let a = random_tensor(1, 7, 6, 1, 0.0, 1.0);
        let b = random_tensor(2, 7, 6, 1, 0.0, 1.0);
        let id = NNField::identity(7, 6, 1);
        let (la, lb) = reconstruct_latent(&a, &b, &id, &id).unwrap();
        for (x, y) in la.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        for (x, y) in lb.data().iter().zip(a.data()) {
            assert!((x - y).abs() <= 1e-6);
        }

        let flat = Tensor::filled(7, 6, 1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = NNField::identity(7, 6, 1);
        for m in f.mapping.iter_mut() {
            *m = [rng.random_range(0..6) as f32, rng.random_range(0..7) as f32];
        }
        let (la, _) = reconstruct_latent(&a, &flat, &f, &id).unwrap();
        assert!(la.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        // independent accumulation oracle
        let (la, _) = reconstruct_latent(&a, &b, &f, &id).unwrap();
        for py in 0..7i32 {
            for px in 0..6i32 {
                let (mut s, mut n) = (0.0f64, 0);
                for sy in 0..7i32 {
                    for sx in 0..6i32 {
                        let (dx, dy) = (px - sx, py - sy);
                        if dx.abs() > 1 || dy.abs() > 1 {
                            continue;
                        }
                        let [qx, qy] = f.get(sx as usize, sy as usize);
                        let (tx, ty) = (qx as i32 + dx, qy as i32 + dy);
                        if tx < 0 || ty < 0 || tx >= 6 || ty >= 7 {
                            continue;
                        }
                        s += b.get(ty as usize, tx as usize, 0) as f64;
                        n += 1;
                    }
                }
                let want = s / n as f64;
                assert!((la.get(py as usize, px as usize, 0) as f64 - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = AnalogyConfig::default();
        c.alpha[0] = 1.5;
        assert!(c.validate().is_err());
        let c = AnalogyConfig {
            pm_iterations: 0,
            ..AnalogyConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AnalogyConfig {
            levels: 6,
            ..AnalogyConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
