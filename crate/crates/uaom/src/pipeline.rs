//! The end-to-end pipeline with wall-clock accounting: pre-resize, attribute
//! transfer, feature extraction on both originals and both latents, dual
//! matching, fusion and verification.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uaom_core::analogy::{run_analogy_observed, AnalogyConfig, AnalogyOutput, AnalogyStage};
use uaom_core::eval::{match_raw, match_transferred, EvalRecord, ImageFeatures, MatchConfig};
use uaom_core::features::{
    check_descriptor_contract, describe_one, extract_patches, DescriptorSet, Detector,
    HessianDetector, PATCH_SIZE,
};
use uaom_core::matching::{GeometricModel, MatchSet, RansacConfig};
use uaom_core::network::{NetworkModel, PYRAMID_LEVELS};
use uaom_core::tensor::resize_bilinear;
use uaom_core::Tensor;

use crate::error::{Error, Result};

/// Every tunable of a run, serializable so outputs can echo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub ratio: f32,
    pub ransac_thresh_px: f64,
    pub ransac_iters: usize,
    /// `"homography"` or `"affine"`.
    pub geometric_model: String,
    pub dedup_radius: f32,
    pub levels: usize,
    pub max_side: usize,
    pub seed: u64,
    /// Content weights for levels 4, 3, 2, 1.
    pub alpha: [f32; 4],
    pub weight_kappa: f32,
    pub weight_tau: f32,
    /// Patch radius for levels 1..=5.
    pub patch_radius: [usize; PYRAMID_LEVELS],
    pub pm_iterations: usize,
    pub pm_search_samples: usize,
    /// Random search radius cap for levels 1..=5, 0 searches the whole map.
    pub search_radius: [usize; PYRAMID_LEVELS],
    pub deconv_iterations: usize,
    pub deconv_step: f32,
    pub max_kp: usize,
    pub detect_threshold: f32,
    pub affine_shape: bool,
    /// When false every reported time is zero, which makes outputs
    /// byte-reproducible.
    pub timing: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let a = AnalogyConfig::default();
        let d = HessianDetector::default();
        let m = MatchConfig::default();
        Self {
            ratio: m.ratio,
            ransac_thresh_px: m.ransac.thresh_px,
            ransac_iters: m.ransac.max_iters,
            geometric_model: "homography".into(),
            dedup_radius: m.dedup_radius,
            levels: a.levels,
            max_side: 448,
            seed: 0,
            alpha: [a.alpha[3], a.alpha[2], a.alpha[1], a.alpha[0]],
            weight_kappa: a.weight_kappa,
            weight_tau: a.weight_tau,
            patch_radius: a.patch_radius,
            pm_iterations: a.pm_iterations,
            pm_search_samples: a.pm_search_samples,
            search_radius: a.search_radius,
            deconv_iterations: a.deconv_iterations,
            deconv_step: a.deconv_step,
            max_kp: d.max_kp,
            detect_threshold: d.threshold,
            affine_shape: d.affine_shape,
            timing: true,
        }
    }
}

impl Settings {
    pub fn analogy(&self) -> AnalogyConfig {
        AnalogyConfig {
            levels: self.levels,
            alpha: [self.alpha[3], self.alpha[2], self.alpha[1], self.alpha[0]],
            weight_kappa: self.weight_kappa,
            weight_tau: self.weight_tau,
            patch_radius: self.patch_radius,
            pm_iterations: self.pm_iterations,
            pm_search_samples: self.pm_search_samples,
            search_radius: self.search_radius,
            deconv_iterations: self.deconv_iterations,
            deconv_step: self.deconv_step,
            rng_seed: self.seed,
        }
    }

    pub fn detector(&self) -> HessianDetector {
        HessianDetector {
            max_kp: self.max_kp,
            threshold: self.detect_threshold,
            affine_shape: self.affine_shape,
            ..HessianDetector::default()
        }
    }

    pub fn matching(&self) -> Result<MatchConfig> {
        let model = match self.geometric_model.as_str() {
            "homography" => GeometricModel::Homography,
            "affine" => GeometricModel::Affine,
            other => {
                return Err(Error::Config(format!(
                    "geometric model must be homography or affine, got {other}"
                )))
            }
        };
        Ok(MatchConfig {
            ratio: self.ratio,
            ransac: RansacConfig {
                thresh_px: self.ransac_thresh_px,
                max_iters: self.ransac_iters,
                seed: self.seed,
                model,
                confidence: None,
            },
            dedup_radius: self.dedup_radius,
        })
    }

    /// Checks every setting before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.analogy().validate()?;
        self.matching()?.validate()?;
        if self.max_side < uaom_core::network::MIN_PYRAMID_SIDE {
            return Err(Error::Config(format!(
                "max side must be at least {}",
                uaom_core::network::MIN_PYRAMID_SIDE
            )));
        }
        if !self.detect_threshold.is_finite() {
            return Err(Error::Config("detection threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Measures wall-clock time, or reports zero when disabled.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    enabled: bool,
}

impl Clock {
    pub fn new(enabled: bool) -> Self {
        Self { enabled }
    }

    pub fn start(&self) -> Timer {
        Timer {
            start: Instant::now(),
            enabled: self.enabled,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Timer {
    start: Instant,
    enabled: bool,
}

impl Timer {
    /// Seconds since start (or the last lap), then restarts.
    pub fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let s = if self.enabled {
            (now - self.start).as_secs_f64()
        } else {
            0.0
        };
        self.start = now;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// An image at original and working resolution.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub original: Tensor,
    pub work: Tensor,
    /// Original size over working size, per axis `[x, y]`.
    pub scale: [f32; 2],
}

/// Downsizes so the longer side is at most `max_side`, keeping the aspect.
pub fn prepare(image: &Tensor, max_side: usize) -> Result<Prepared> {
    let gray = uaom_core::imgproc::to_gray(image);
    let (h, w) = gray.dims();
    let long = h.max(w);
    let work = if long > max_side {
        let f = max_side as f64 / long as f64;
        let nh = ((h as f64 * f).round() as usize).max(1);
        let nw = ((w as f64 * f).round() as usize).max(1);
        resize_bilinear(&gray, nh, nw)?
    } else {
        gray.clone()
    };
    let scale = [
        w as f32 / work.width() as f32,
        h as f32 / work.height() as f32,
    ];
    Ok(Prepared {
        original: gray,
        work,
        scale,
    })
}

pub struct TransferResult {
    pub output: AnalogyOutput,
    pub stages: Vec<StageTime>,
    pub seconds: f64,
}

fn stage_name(s: AnalogyStage) -> String {
    match s {
        AnalogyStage::Pyramids => "pyramids".into(),
        AnalogyStage::Search(l) => format!("search_l{l}"),
        AnalogyStage::Refine(l) => format!("refine_l{l}"),
        AnalogyStage::Reconstruct => "reconstruct".into(),
    }
}

/// Runs the attribute transfer on working-resolution images.
pub fn transfer(
    a: &Tensor,
    b: &Tensor,
    model: &NetworkModel,
    settings: &Settings,
) -> Result<TransferResult> {
    let clock = Clock::new(settings.timing);
    let mut total = clock.start();
    let mut lap = clock.start();
    let mut stages = Vec::new();
    let output = run_analogy_observed(a, b, model, &settings.analogy(), &mut |s, _| {
        stages.push(StageTime {
            stage: stage_name(s),
            seconds: lap.lap(),
        })
    })
    .map_err(|e| Error::in_stage("transfer")(e.into()))?;
    Ok(TransferResult {
        output,
        stages,
        seconds: total.lap(),
    })
}

/// Detection and description with patches described in parallel; the
/// result does not depend on the thread schedule.
pub fn compute_features(
    image: &Tensor,
    detector: &dyn DetectorSync,
    desc_model: &NetworkModel,
) -> Result<ImageFeatures> {
    check_descriptor_contract(desc_model)?;
    let kps = detector.detect(image);
    let patches = extract_patches(image, &kps, PATCH_SIZE);
    let dim = desc_model.output_channels();
    let mut data = vec![0.0f32; patches.len() * dim];
    data.par_chunks_mut(dim.max(1))
        .zip(patches.patches.par_iter())
        .try_for_each(|(row, p)| describe_one(p, desc_model, row))?;
    let keypoints = patches.provenance.iter().map(|&i| kps[i].clone()).collect();
    Ok(ImageFeatures {
        keypoints,
        descriptors: DescriptorSet::new(dim, data)?,
    })
}

/// A [`Detector`] that can be shared across threads.
pub trait DetectorSync: Detector + Sync {}
impl<T: Detector + Sync> DetectorSync for T {}

/// Everything one pair evaluation produces.
pub struct PairOutcome {
    pub record: EvalRecord,
    pub matches: MatchSet,
    pub transfer: TransferResult,
    /// The no-transfer baseline, when requested.
    pub raw: Option<(EvalRecord, MatchSet)>,
    pub stages: Vec<StageTime>,
    pub prepared_a: Prepared,
    pub prepared_b: Prepared,
}

pub const METHOD_TRANSFER: &str = "uaom";
pub const METHOD_RAW: &str = "raw";

/// Full pipeline on one pair: transfer, then detection, description and
/// matching on (A, B') and (A', B), fused onto the original images. The
/// record's `rt_seconds` covers detection, description and matching;
/// `transfer_seconds` the attribute transfer.
pub fn evaluate_pair(
    img_a: &Tensor,
    img_b: &Tensor,
    model: &NetworkModel,
    desc_model: &NetworkModel,
    settings: &Settings,
    pair_id: &str,
    with_baseline: bool,
) -> Result<PairOutcome> {
    settings.validate()?;
    let match_cfg = settings.matching()?;
    let pa = prepare(img_a, settings.max_side)?;
    let pb = prepare(img_b, settings.max_side)?;
    let tr = transfer(&pa.work, &pb.work, model, settings)?;
    let clock = Clock::new(settings.timing);
    let detector = settings.detector();
    let mut stages = tr.stages.clone();

    let extract = |imgs: [&Tensor; 2]| -> Result<Vec<ImageFeatures>> {
        imgs.par_iter()
            .map(|img| compute_features(img, &detector, desc_model))
            .collect::<Result<_>>()
            .map_err(Error::in_stage("features"))
    };
    let mut t = clock.start();
    let orig = extract([&pa.work, &pb.work])?;
    let orig_secs = t.lap();
    let latent = extract([&tr.output.latent_a, &tr.output.latent_b])?;
    let latent_secs = t.lap();
    let fused = match_transferred(
        &orig[0], &orig[1], &latent[0], &latent[1], pa.scale, pb.scale, &match_cfg,
    )
    .map_err(|e| Error::in_stage("matching")(e.into()))?;
    let match_secs = t.lap();
    for (stage, seconds) in [
        ("features", orig_secs + latent_secs),
        ("matching", match_secs),
    ] {
        stages.push(StageTime {
            stage: stage.into(),
            seconds,
        });
    }
    let mut record = fused.record(pair_id, METHOD_TRANSFER);
    record.rt_seconds = orig_secs + latent_secs + match_secs;
    record.transfer_seconds = tr.seconds;

    // the baseline shares the original-image features and their cost
    let raw = if with_baseline {
        let mut t = clock.start();
        let m = match_raw(&orig[0], &orig[1], pa.scale, pb.scale, &match_cfg)
            .map_err(|e| Error::in_stage("matching")(e.into()))?;
        let mut r = m.record(pair_id, METHOD_RAW);
        r.rt_seconds = orig_secs + t.lap();
        Some((r, m.set))
    } else {
        None
    };

    Ok(PairOutcome {
        record,
        matches: fused.set,
        transfer: tr,
        raw,
        stages,
        prepared_a: pa,
        prepared_b: pb,
    })
}
