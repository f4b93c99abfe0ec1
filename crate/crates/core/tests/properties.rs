use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uaom_core::analogy::{blend, weight_map, AnalogyConfig};
use uaom_core::eval::{accuracy, EvalRecord};
use uaom_core::features::{distance_matrix, unit_distance, DescriptorSet};
use uaom_core::imgproc::project;
use uaom_core::matching::{cross_check, ransac, ratio_match, symmetric_error, Match, MatchOrigin, RansacConfig};
use uaom_core::nnf::{patchmatch_with_config, FeatureQuad, NnfInit, PatchMatchConfig};
use uaom_core::tensor::{conv2d, normalize_positionwise};
use uaom_core::{ConvLayerSpec, InputSpec, Layer, NetworkModel, Tensor};

fn tensor(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn unit_rows(seed: u64, n: usize, dim: usize) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    DescriptorSet::from_raw_rows(dim, data).unwrap()
}

fn model(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chans = [1usize, 3, 4, 4, 5, 5];
    let mut layers = Vec::new();
    for l in 1..=5 {
        if l > 1 {
            layers.push(Layer::MaxPool {
                name: format!("pool{}", l - 1),
            });
        }
        let (cin, cout) = (chans[l - 1], chans[l]);
        let w: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.05..0.05)).collect();
        layers.push(Layer::Conv {
            name: format!("relu{l}_1"),
            spec: ConvLayerSpec::new(cout, cin, 3, 3, 1, 1, true, w, b).unwrap(),
        });
    }
    let taps: Vec<String> = (1..=5).map(|l| format!("relu{l}_1")).collect();
    let input = InputSpec {
        channels: 1,
        height: None,
        width: None,
        mean: vec![0.5],
        std: vec![0.25],
    };
    NetworkModel::new(input, layers, &taps, false).unwrap()
}

fn matches_from_homography(seed: u64, h: &Matrix3<f64>, inliers: usize, outliers: usize) -> Vec<Match> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..inliers + outliers)
        .map(|i| {
            let a = [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)];
            let b = if i < inliers {
                let (x, y) = project(h, a[0], a[1]);
                [x + rng.random_range(-0.5..0.5), y + rng.random_range(-0.5..0.5)]
            } else {
                [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]
            };
            Match {
                idx_a: i,
                idx_b: i,
                pt_a: [a[0] as f32, a[1] as f32],
                pt_b: [b[0] as f32, b[1] as f32],
                dist: 0.0,
                ratio: 0.5,
                origin: MatchOrigin::Raw,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_without_relu_is_homogeneous(seed in any::<u64>(), alpha in -4.0f32..4.0, stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = ConvLayerSpec::new(3, 2, 3, 3, stride, pad, false, w, vec![0.0; 3]).unwrap();
        let x = tensor(seed ^ 1, 9, 8, 2);
        let y = conv2d(&x, &layer).unwrap();
        let ys = conv2d(&x.map(|v| v * alpha), &layer).unwrap();
        for (a, b) in ys.data().iter().zip(y.data()) {
            let want = alpha * b;
            prop_assert!((a - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn positionwise_normalization_is_idempotent(seed in any::<u64>(), c in 1usize..6) {
        let once = normalize_positionwise(&tensor(seed, 5, 7, c));
        let twice = normalize_positionwise(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn descriptor_metric_is_euclidean(seed in any::<u64>(), dim in 2usize..130) {
        let set = unit_rows(seed, 2, dim);
        let (a, p) = (set.row(0), set.row(1));
        let euclid: f32 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
        prop_assert!((unit_distance(a, p) - euclid).abs() <= 1e-5);
        // a row against itself can round the dot product above one
        prop_assert!(unit_distance(a, a).is_finite());
    }

    #[test]
    fn patchmatch_costs_only_decrease_and_stay_in_bounds(seed in any::<u64>(), sh in 3usize..10, dh in 3usize..10, r in 0usize..3) {
        let q = FeatureQuad::normalized(
            &tensor(seed, sh, sh + 1, 3),
            &tensor(seed ^ 2, dh, dh + 2, 3),
            &tensor(seed ^ 3, sh, sh + 1, 3),
            &tensor(seed ^ 4, dh, dh + 2, 3),
        ).unwrap();
        let cfg = PatchMatchConfig { iterations: 4, patch_radius: r, seed, search_samples: 2, max_search_radius: 0 };
        let mut prev: Option<Vec<f32>> = None;
        let mut ok = true;
        let field = patchmatch_with_config(&q, NnfInit::Random, &cfg, |_, f| {
            if let Some(p) = &prev {
                ok &= f.cost.iter().zip(p).all(|(c, p)| c <= p);
            }
            ok &= f.in_bounds() && f.cost.iter().all(|c| c.is_finite() && *c >= 0.0);
            prev = Some(f.cost.clone());
        }).unwrap();
        prop_assert!(ok);
        prop_assert!(field.in_bounds());
    }

    #[test]
    fn blend_stays_between_content_and_style(seed in any::<u64>(), alpha in 0.0f32..=1.0) {
        let content = tensor(seed, 6, 5, 4);
        let style = tensor(seed ^ 9, 6, 5, 4);
        let w = weight_map(&content, alpha, &AnalogyConfig::default());
        prop_assert!(w.data().iter().all(|v| (0.0..=alpha).contains(v)));
        let out = blend(&content, &style, &w).unwrap();
        for ((o, c), s) in out.data().iter().zip(content.data()).zip(style.data()) {
            let (lo, hi) = (c.min(*s), c.max(*s));
            prop_assert!(*o >= lo - 1e-6 && *o <= hi + 1e-6);
        }
    }

    #[test]
    fn lowering_the_ratio_never_adds_matches(seed in any::<u64>(), n in 3usize..20, m in 3usize..20) {
        let d = distance_matrix(&unit_rows(seed, n, 16), &unit_rows(seed ^ 5, m, 16)).unwrap();
        let sets: Vec<Vec<(usize, usize)>> = [0.6f32, 0.7, 0.8, 0.9]
            .iter()
            .map(|t| ratio_match(&d, *t).unwrap().iter().map(|x| (x.idx_a, x.idx_b)).collect())
            .collect();
        for pair in sets.windows(2) {
            prop_assert!(pair[0].iter().all(|x| pair[1].contains(x)));
        }
    }

    #[test]
    fn cross_check_is_symmetric(seed in any::<u64>(), n in 2usize..20, m in 2usize..20) {
        let d = distance_matrix(&unit_rows(seed, n, 8), &unit_rows(seed ^ 6, m, 8)).unwrap();
        let ab = ratio_match(&d, 1.0).unwrap();
        let ba = ratio_match(&d.transpose(), 1.0).unwrap();
        let mut fwd: Vec<(usize, usize)> = cross_check(&ab, &ba).iter().map(|x| (x.idx_a, x.idx_b)).collect();
        let mut bwd: Vec<(usize, usize)> = cross_check(&ba, &ab).iter().map(|x| (x.idx_b, x.idx_a)).collect();
        fwd.sort_unstable();
        bwd.sort_unstable();
        prop_assert_eq!(fwd, bwd);
    }

    #[test]
    fn eval_records_are_consistent(gm in 0u32..5000, frac in 0.0f64..=1.0) {
        let inl = (gm as f64 * frac).floor();
        let r = EvalRecord::from_counts("p", "m", gm as f64, inl, gm as f64);
        prop_assert!(r.inl <= r.gm);
        if gm > 0 {
            prop_assert_eq!(r.ma, inl / gm as f64);
            prop_assert!(!r.degenerate);
        } else {
            prop_assert_eq!(accuracy(0.0, 0.0), (0.0, true));
            prop_assert!(r.degenerate);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ransac_inliers_are_sound_and_seeded(seed in any::<u64>(), tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
        let h = Matrix3::new(1.05, 0.02, tx, -0.03, 0.97, ty, 1e-4, -5e-5, 1.0);
        let matches = matches_from_homography(seed, &h, 40, 20);
        let cfg = RansacConfig { seed, ..RansacConfig::default() };
        let (model, flags) = ransac(&matches, &cfg).unwrap();
        let inv = model.try_inverse().unwrap();
        for (m, f) in matches.iter().zip(&flags) {
            if *f {
                let e = symmetric_error(
                    &model,
                    &inv,
                    [m.pt_a[0] as f64, m.pt_a[1] as f64],
                    [m.pt_b[0] as f64, m.pt_b[1] as f64],
                );
                prop_assert!(e < cfg.thresh_px);
            }
        }
        prop_assert_eq!(ransac(&matches, &cfg).unwrap().1, flags);
    }

    #[test]
    fn segments_compose_to_the_pyramid(seed in any::<u64>(), h in 32usize..48, w in 32usize..48) {
        let m = model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let img = Tensor::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0..1.0));
        let pyr = m.extract_pyramid(&img).unwrap();
        prop_assert_eq!(&pyr, &m.extract_pyramid(&img).unwrap());
        for l in 1..5 {
            let next = m.forward_segment(pyr.level(l), l, l + 1).unwrap();
            prop_assert_eq!(&next, pyr.level(l + 1));
            let (ph, pw) = pyr.level(l).dims();
            prop_assert_eq!(pyr.level(l + 1).dims(), (ph / 2, pw / 2));
        }
    }
}
