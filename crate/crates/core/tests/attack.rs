mod common;

use camo_core::attack::{
    optimize_at_lambda, predicate_on_probs, ranking, run_attack_observed, success_predicate, AttackSettings,
    AttackSpec, ContentPolicy, LambdaSchedule, PhysicalSettings, ADVERSARIAL_FILE, RESULT_FILE, TRACE_FILE,
};
use camo_core::model::{CnnClassifier, CnnFeatureExtractor};
use camo_core::nn::{CnnConfig, SmallCnn};
use camo_core::transforms::{BackgroundPool, TransformRanges};
use camo_core::{make_rect_mask, run_attack, AttackMode, Classifier, Error, ImagePlane, RegionMask, Result, Tensor3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 32;

fn nets(seed: u64) -> (CnnFeatureExtractor<f64>, CnnClassifier<f64>) {
    let cfg = CnnConfig {
        channels: vec![4, 8],
        input_size: 16,
        num_classes: 6,
        label_names: (0..6).map(|i| format!("class{i}")).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        CnnFeatureExtractor::new(SmallCnn::new_random(cfg.clone(), &mut rng).unwrap()),
        CnnClassifier::new(SmallCnn::new_random(cfg, &mut rng).unwrap()),
    )
}

fn top1(clf: &impl Classifier<f64>, img: &ImagePlane<f64>) -> usize {
    ranking(&clf.predict_probs(img).unwrap())[0]
}

fn spec(orig: ImagePlane<f64>, style: ImagePlane<f64>, mask: RegionMask, mode: AttackMode) -> AttackSpec<f64> {
    AttackSpec {
        orig,
        style_img: style,
        mask,
        mode,
        settings: AttackSettings {
            schedule: LambdaSchedule {
                start: 1000.0,
                step: 1000.0,
                max: 3000.0,
            },
            max_iters_per_lambda: 30,
            ..Default::default()
        },
    }
}

fn images(seed: u64) -> (ImagePlane<f64>, ImagePlane<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        common::random_image(N, N, &mut rng),
        common::random_image(N, N, &mut rng),
    )
}

/// Fixed probabilities whatever the input; optionally non-finite.
struct Fixed(Vec<f64>);

impl Classifier<f64> for Fixed {
    fn num_classes(&self) -> usize {
        self.0.len()
    }
    fn label_names(&self) -> Option<&[String]> {
        None
    }
    fn predict_probs(&self, _img: &ImagePlane<f64>) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
    fn probs_with_pullback(
        &self,
        img: &ImagePlane<f64>,
        _upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Tensor3<f64>)> {
        let (h, w) = img.dims();
        Ok((self.0.clone(), Tensor3::zeros(3, h, w)))
    }
}

#[test]
fn predicate_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    use rand::Rng;
    for _ in 0..500 {
        let k = rng.gen_range(2..12);
        // Coarse values so ties happen.
        let p: Vec<f64> = (0..k).map(|_| rng.gen_range(0..5) as f64).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let y = rng.gen_range(0..k);
        let t = (y + rng.gen_range(1..k)) % k;
        for top_k in [1, 5] {
            let targeted = AttackMode::targeted(y, t).unwrap();
            assert_eq!(
                predicate_on_probs(&p, &targeted, top_k),
                order[..top_k.min(k)].contains(&t)
            );
            assert_eq!(predicate_on_probs(&p, &AttackMode::untargeted(y), top_k), order[0] != y);
        }
    }
}

#[test]
fn pre_misclassified_input_succeeds_without_steps() {
    let (fe, _) = nets(2);
    let clf = Fixed(vec![0.1, 0.7, 0.2]);
    let (orig, style) = images(3);
    let s = spec(orig.clone(), style, RegionMask::full(N, N), AttackMode::untargeted(0));
    let r = run_attack(&s, &fe, &clf).unwrap();
    assert!(r.success);
    assert_eq!(r.final_lambda, 1000.0);
    assert_eq!(r.iterations_used, 0);
    assert_eq!(r.adv.data(), orig.data());
    assert_eq!(r.final_top1, 1);
    assert_eq!(r.loss_trace().len(), 1);
}

#[test]
fn unreachable_target_returns_best_effort_failure() {
    let (fe, _) = nets(4);
    let clf = Fixed(vec![0.9, 0.05, 0.05]);
    let (orig, style) = images(5);
    let s = spec(
        orig,
        style,
        make_rect_mask(N, N, 4, 4, 16).unwrap(),
        AttackMode::targeted(0, 2).unwrap(),
    );
    let r = run_attack(&s, &fe, &clf).unwrap();
    assert!(!r.success);
    assert_eq!(r.final_lambda, 3000.0);
    assert_eq!(r.stages.len(), 3);
    assert_eq!(r.iterations_used, 90);
}

#[test]
fn failure_returns_lowest_adversarial_loss_iterate() {
    let (fe, clf) = nets(6);
    let (orig, style) = images(7);
    let label = top1(&clf, &orig);
    let target = (label + 1) % 6;
    let mut s = spec(
        orig,
        style,
        make_rect_mask(N, N, 8, 8, 12).unwrap(),
        AttackMode::targeted(label, target).unwrap(),
    );
    s.settings.max_iters_per_lambda = 5;
    s.settings.schedule = LambdaSchedule {
        start: 0.0,
        step: 1.0,
        max: 1.0,
    };
    let mut seen: Vec<(f64, ImagePlane<f64>)> = Vec::new();
    let r = run_attack_observed(&s, &fe, &clf, &mut |it| {
        seen.push((it.breakdown.adversarial, it.image.clone()))
    })
    .unwrap();
    if !r.success {
        let best = seen.iter().min_by(|a, b| a.0.partial_cmp(&b.0).unwrap()).unwrap();
        assert_eq!(r.adv.data(), best.1.data());
    }
}

#[test]
fn single_pixel_mask_leaves_everything_else_untouched() {
    let (fe, clf) = nets(8);
    let (orig, style) = images(9);
    let label = top1(&clf, &orig);
    let mask = make_rect_mask(N, N, 10, 20, 1).unwrap();
    let s = spec(orig.clone(), style, mask.clone(), AttackMode::untargeted(label));
    let plane = N * N;
    let mut checked = 0;
    run_attack_observed(&s, &fe, &clf, &mut |it| {
        checked += 1;
        for (k, (a, o)) in it.image.data().iter().zip(orig.data()).enumerate() {
            if !mask.flags()[k % plane] {
                assert_eq!(a.to_bits(), o.to_bits());
            }
        }
    })
    .unwrap();
    assert!(checked > 1);
}

#[test]
fn zero_lambda_with_style_equal_to_original_stays_close() {
    let (fe, clf) = nets(10);
    // A smooth image, so the smoothness term is already small at the start.
    let orig: ImagePlane<f64> = camo_core::data::background_image(N, N, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let label = top1(&clf, &orig);
    let mut s = spec(
        orig.clone(),
        orig.clone(),
        RegionMask::full(N, N),
        AttackMode::untargeted(label),
    );
    s.settings.max_iters_per_lambda = 100;
    let out = optimize_at_lambda(
        &s,
        &fe,
        &clf,
        0.0,
        &orig,
        &mut ChaCha8Rng::seed_from_u64(0),
        &mut |_| {},
    )
    .unwrap();
    let mean_abs: f64 = out
        .adv
        .data()
        .iter()
        .zip(orig.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / orig.data().len() as f64;
    assert!(mean_abs < 0.05, "mean deviation {mean_abs}");
}

#[test]
fn single_stage_schedule_equals_optimize_at_lambda() {
    let (fe, clf) = nets(12);
    let (orig, style) = images(13);
    let label = top1(&clf, &orig);
    let mut s = spec(
        orig.clone(),
        style,
        make_rect_mask(N, N, 0, 0, 20).unwrap(),
        AttackMode::untargeted(label),
    );
    s.settings.schedule = LambdaSchedule::fixed(1000.0);
    s.settings.seed = 44;
    let r = run_attack(&s, &fe, &clf).unwrap();
    let o = optimize_at_lambda(
        &s,
        &fe,
        &clf,
        1000.0,
        &orig,
        &mut ChaCha8Rng::seed_from_u64(44),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(r.success, o.success);
    assert_eq!(r.loss_trace(), o.trace);
    if o.success {
        assert_eq!(r.adv.data(), o.adv.data());
    } else {
        assert_eq!(r.adv.data(), o.best.0.data());
    }
}

#[test]
fn warm_start_consistency() {
    let (fe, clf) = nets(14);
    let (orig, style) = images(15);
    let label = top1(&clf, &orig);
    let target = (label + 3) % 6;
    let s = spec(
        orig,
        style,
        make_rect_mask(N, N, 6, 6, 10).unwrap(),
        AttackMode::targeted(label, target).unwrap(),
    );
    let r = run_attack(&s, &fe, &clf).unwrap();
    for pair in r.stages.windows(2) {
        let last = pair[0].trace.last().unwrap();
        let first = pair[1].trace[0];
        let recomputed = last.reweighted(&s.weights_at(pair[1].lambda));
        assert!(
            common::rel_err(recomputed.total, first.total) <= 1e-9,
            "{recomputed} vs {first}"
        );
    }
}

#[test]
fn success_is_honest_and_runs_are_deterministic() {
    let (fe, clf) = nets(16);
    for seed in 0..4u64 {
        let (orig, style) = images(100 + seed);
        let label = top1(&clf, &orig);
        let mut s = spec(
            orig,
            style,
            make_rect_mask(N, N, 4, 4, 24).unwrap(),
            AttackMode::untargeted(label),
        );
        s.settings.seed = seed;
        let a = run_attack(&s, &fe, &clf).unwrap();
        let b = run_attack(&s, &fe, &clf).unwrap();
        assert_eq!(a.adv.data(), b.adv.data());
        assert_eq!(a.stages, b.stages);
        if a.success {
            assert!(success_predicate(&clf, &a.adv, &s.mode, s.settings.top_k).unwrap());
        }
        assert!(a.adv.is_in_range());
    }
}

#[test]
fn physical_success_holds_on_recorded_validation_scenes() {
    let (fe, clf) = nets(18);
    let (orig, style) = images(19);
    let label = top1(&clf, &orig);
    let ranges = TransformRanges::default();
    let side = ranges.max_extent(N, N).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let pool = BackgroundPool::new((0..3).map(|_| common::random_image(side, side, &mut rng)).collect()).unwrap();
    let mut s = spec(orig, style, RegionMask::full(N, N), AttackMode::untargeted(label));
    s.settings.physical = Some(PhysicalSettings::new(pool.clone(), ranges));
    let r = run_attack(&s, &fe, &clf).unwrap();
    if r.success {
        assert_eq!(r.validation_scenes.len(), 16);
        let rate =
            camo_core::attack::scene_success_rate(&clf, &r.adv, &pool, &r.validation_scenes, &s.mode, 1).unwrap();
        assert!(rate >= 0.8);
    }
}

#[test]
fn small_masks_drop_the_content_term() {
    let (orig, style) = images(21);
    let mut s = spec(
        orig,
        style,
        make_rect_mask(N, N, 0, 0, 7).unwrap(),
        AttackMode::untargeted(0),
    );
    assert!(s.mask.coverage() < 0.05);
    assert_eq!(s.weights_at(1000.0).w_content, 0.0);
    s.settings.content = ContentPolicy::Always;
    assert_eq!(s.weights_at(1000.0).w_content, 1.0);
    s.mask = make_rect_mask(N, N, 0, 0, 8).unwrap();
    s.settings.content = ContentPolicy::Auto;
    assert_eq!(s.weights_at(1000.0).w_content, 1.0);
}

#[test]
fn non_finite_loss_aborts() {
    let (fe, _) = nets(22);
    let clf = Fixed(vec![f64::NAN, 0.5, 0.5]);
    let (orig, style) = images(23);
    let s = spec(orig, style, RegionMask::full(N, N), AttackMode::targeted(0, 1).unwrap());
    assert!(matches!(run_attack(&s, &fe, &clf), Err(Error::NonFiniteLoss { .. })));
}

#[test]
fn invalid_specs_rejected() {
    let (fe, clf) = nets(24);
    let (orig, style) = images(25);
    let mut s = spec(orig.clone(), style, RegionMask::full(N, N), AttackMode::untargeted(9));
    assert!(matches!(run_attack(&s, &fe, &clf), Err(Error::InvalidLabel { .. })));
    s.mode = AttackMode::untargeted(0);
    s.settings.schedule = LambdaSchedule {
        start: 5.0,
        step: 1.0,
        max: 1.0,
    };
    assert!(run_attack(&s, &fe, &clf).is_err());
    s.settings.schedule = LambdaSchedule::default();
    s.style_img = ImagePlane::filled(N + 2, N, 0.5).unwrap();
    assert!(matches!(run_attack(&s, &fe, &clf), Err(Error::ShapeMismatch(_))));
}

#[test]
fn result_directory_is_complete_and_parseable() {
    let (fe, clf) = nets(26);
    let (orig, style) = images(27);
    let label = top1(&clf, &orig);
    let s = spec(
        orig,
        style,
        make_rect_mask(N, N, 2, 2, 12).unwrap(),
        AttackMode::untargeted(label),
    );
    let r = run_attack(&s, &fe, &clf).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rec = r.record(s.mode, clf.label_names().unwrap_or(&[]));
    r.write_to_dir(dir.path(), &rec).unwrap();
    let img: ImagePlane<f64> = camo_core::io::load_image(dir.path().join(ADVERSARIAL_FILE)).unwrap();
    assert_eq!(img.dims(), (N, N));
    let back: camo_core::attack::ResultRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(RESULT_FILE)).unwrap()).unwrap();
    assert_eq!(back, rec);
    let mut rdr = csv::Reader::from_path(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(rdr.records().count(), r.loss_trace().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn random_masks_preserve_outside_pixels(seed in 0u64..1000, top in 0usize..24, left in 0usize..24, size in 1usize..9) {
        let (fe, clf) = nets(seed);
        let (orig, style) = images(seed + 1);
        let label = top1(&clf, &orig);
        let mask = make_rect_mask(N, N, top, left, size).unwrap();
        let mut s = spec(orig.clone(), style, mask.clone(), AttackMode::untargeted(label));
        s.settings.max_iters_per_lambda = 8;
        let mut ok = true;
        let r = run_attack_observed(&s, &fe, &clf, &mut |it| {
            for (k, (a, o)) in it.image.data().iter().zip(orig.data()).enumerate() {
                ok &= mask.flags()[k % (N * N)] || a.to_bits() == o.to_bits();
                ok &= (0.0..=1.0).contains(a);
            }
        }).unwrap();
        prop_assert!(ok);
        prop_assert!(r.adv.is_in_range());
    }
}
