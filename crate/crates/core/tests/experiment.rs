mod common;

use std::sync::OnceLock;

use aam_cgd::dataset::AnnotatedImage;
use aam_cgd::experiment::{
    normalized_p2p_error, perturb_initialization, proportion_below, run_experiment, trial_rng, ErrorStats,
    ExperimentSpec, THRESHOLDS,
};
use aam_cgd::fitting::{sampling_mask, FitConfig, Fitter};
use aam_cgd::model::AamBundle;
use aam_cgd::shape::{Shape, SimilarityTransform};
use aam_cgd::synthesis::{synthesize_dataset, Generator, ProceduralSpec, SynthOptions};
use aam_cgd::warp::build_frame_for_shape;
use aam_cgd::AamError;
use common::*;
use nalgebra::DVector;
use proptest::prelude::*;

struct Fixture {
    bundle: AamBundle,
    data: Vec<AnnotatedImage>,
}

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let (bundle, _) = toy_bundle(80.0, 20);
        let data = synthesize_dataset(&bundle, 4, &SynthOptions::default(), 31).unwrap();
        Fixture { bundle, data }
    })
}

fn spec(algorithms: &[&str]) -> ExperimentSpec {
    ExperimentSpec {
        algorithms: algorithms.iter().map(|s| s.to_string()).collect(),
        trials: 2,
        iters_per_scale: vec![4, 3],
        seed: 7,
        ..ExperimentSpec::default()
    }
}

/// Kolmogorov-Smirnov distance between a sample and the uniform law on `[a, b]`.
fn ks_uniform(mut xs: Vec<f64>, a: f64, b: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let cdf = ((x - a) / (b - a)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn square(side: f64) -> Shape {
    Shape::from_points(&[[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]]).unwrap()
}

#[test]
fn identical_shapes_have_zero_error() {
    let t = &fixture().data[0].shape;
    assert_eq!(normalized_p2p_error(t, t).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(proptest_config(64))]

    #[test]
    fn uniform_shift_is_distance_over_face_size(dx in -20.0f64..20.0, dy in -20.0f64..20.0, w in 5.0f64..50.0, h in 5.0f64..50.0) {
        let t = Shape::from_points(&[[0.0, 0.0], [w, 0.0], [w, h], [0.0, h], [w / 2.0, h / 3.0]]).unwrap();
        let e = normalized_p2p_error(&t.translated(dx, dy), &t).unwrap();
        let oracle = dx.hypot(dy) / (0.5 * (w + h));
        prop_assert!((e - oracle).abs() < 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn one_displaced_landmark_is_averaged_over_all(seed in 0u64..1000, which in 0usize..9, delta in 0.0f64..10.0, angle in 0.0f64..6.3) {
        let truth = Shape::new(random_vector(&mut rng(seed), 18) * 40.0).unwrap();
        let mut v = truth.as_vector().clone();
        v[2 * which] += delta * angle.cos();
        v[2 * which + 1] += delta * angle.sin();
        let (x0, y0, x1, y1) = truth.bounds();
        let size = 0.5 * ((x1 - x0) + (y1 - y0));
        let e = normalized_p2p_error(&Shape::new(v).unwrap(), &truth).unwrap();
        prop_assert!((e - delta / (9.0 * size)).abs() < 1e-12);
    }

    #[test]
    fn proportions_are_monotone_and_bounded(errors in proptest::collection::vec(0.0f64..0.1, 1..60)) {
        let s = ErrorStats::from_errors(&errors).unwrap();
        let p = [s.p02, s.p03, s.p04];
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(p.windows(2).all(|w| w[0] <= w[1]));
        for (pi, t) in p.iter().zip(THRESHOLDS) {
            prop_assert_eq!(*pi, proportion_below(&errors, t));
        }
        prop_assert!(s.median >= errors.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(s.count, errors.len());
    }

    #[test]
    fn proportion_below_is_monotone_in_threshold(errors in proptest::collection::vec(0.0f64..1.0, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(proportion_below(&errors, lo) <= proportion_below(&errors, hi));
    }
}

#[test]
fn p2p_errors_reject_bad_input() {
    let t = square(10.0);
    let short = Shape::from_points(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
    assert!(matches!(normalized_p2p_error(&short, &t), Err(AamError::Dimension { .. })));
    let point = Shape::from_points(&[[3.0, 3.0]; 4]).unwrap();
    assert!(matches!(normalized_p2p_error(&t, &point), Err(AamError::Degenerate(_))));
    assert!(ErrorStats::from_errors(&[]).is_err());
}

#[test]
fn noiseless_initialization_is_the_similarity_alignment() {
    let fx = fixture();
    let model = &fx.bundle.finest().shape;
    for item in &fx.data {
        let p = perturb_initialization(&item.shape, model, 0.0, &mut rng(0)).unwrap();
        assert!(p.rows(4, model.n_nonrigid()).iter().all(|v| *v == 0.0));
        let aligned = model.mean.transformed(&SimilarityTransform::align(&model.mean, &item.shape).unwrap());
        let init = model.instance(&p).unwrap();
        assert!((init.as_vector() - aligned.as_vector()).amax() < 1e-9);
        let residual = normalized_p2p_error(&aligned, &item.shape).unwrap();
        assert!((normalized_p2p_error(&init, &item.shape).unwrap() - residual).abs() < 1e-12);
    }
}

#[test]
fn perturbed_scales_are_uniform() {
    let fx = fixture();
    let model = &fx.bundle.finest().shape;
    let truth = &fx.data[1].shape;
    let base = SimilarityTransform::align(&model.mean, truth).unwrap();
    let mut rng = rng(12);
    let noise = 0.05;
    let factors: Vec<f64> = (0..10_000)
        .map(|_| {
            let p = perturb_initialization(truth, model, noise, &mut rng).unwrap();
            let init = model.instance(&p).unwrap();
            SimilarityTransform::align(&model.mean, &init).unwrap().scale / base.scale
        })
        .collect();
    assert!(factors.iter().all(|f| (1.0 - noise - 1e-9..=1.0 + noise + 1e-9).contains(f)));
    let ks = ks_uniform(factors, 1.0 - noise, 1.0 + noise);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn fixed_seeds_give_identical_initializations() {
    let fx = fixture();
    let model = &fx.bundle.finest().shape;
    let truth = &fx.data[2].shape;
    let draw = |image, trial| perturb_initialization(truth, model, 0.1, &mut trial_rng(5, 0, image, trial)).unwrap();
    let a: Vec<DVector<f64>> = (0..6).map(|t| draw(0, t)).collect();
    let b: Vec<DVector<f64>> = (0..6).map(|t| draw(0, t)).collect();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    assert_ne!(a[0], a[1]);
    assert_ne!(a[0], draw(1, 0));
    assert!(matches!(
        perturb_initialization(truth, model, -0.1, &mut rng(0)),
        Err(AamError::Config(_))
    ));
}

#[test]
fn sampling_masks_hit_their_rate() {
    let fx = fixture();
    let mut frames: Vec<_> = fx.bundle.levels.iter().map(|l| l.frame.clone()).collect();
    frames.push(build_frame_for_shape(&square(89.0), 0).unwrap().0);
    frames.push(Generator::procedural(&ProceduralSpec::default()).unwrap().frame);
    for frame in &frames {
        let f = frame.n_pixels();
        assert!(sampling_mask(frame, 1.0).iter().all(|b| *b));
        for rate in [0.25, 0.12] {
            let count = sampling_mask(frame, rate).iter().filter(|b| **b).count() as f64;
            let target = rate * f as f64;
            assert!((count - target).abs() <= 0.02 * target, "rate {rate}: {count} of {f}");
        }
        let quarter = sampling_mask(frame, 0.25);
        let parities: std::collections::HashSet<(usize, usize)> = frame
            .pixels
            .iter()
            .zip(&quarter)
            .filter(|(_, on)| **on)
            .map(|(&(x, y), _)| (x % 2, y % 2))
            .collect();
        assert_eq!(parities.len(), 1, "quarter rate is a stride-2 grid");
    }
}

#[test]
fn sparse_sampling_rates_are_insufficient() {
    let fx = fixture();
    let config = FitConfig {
        sampling_rate: 1e-4,
        ..FitConfig::from_selector("SSD_Asy_GN_Sch").unwrap()
    };
    assert!(matches!(Fitter::new(&fx.bundle, &config), Err(AamError::InsufficientData(_))));
}

#[test]
fn curves_span_the_budget_and_start_at_the_initialization() {
    let fx = fixture();
    let spec = spec(&["SSD_Asy_GN_Sch", "PO_Asy_GN", "SSD_Inv_GN_Sch"]);
    let result = run_experiment(&fx.bundle, &fx.data, &spec).unwrap();
    assert_eq!(result.runs.len(), 3);
    let first = &result.runs[0];
    for r in &result.runs {
        assert_eq!(r.mean_error.len(), spec.budget() + 1);
        assert_eq!(r.mean_cost.len(), spec.budget() + 1);
        assert_eq!(r.mean_cost[0], 1.0);
        assert_eq!(r.stats.count, fx.data.len() * spec.trials);
        assert_eq!(r.initial_errors, first.initial_errors);
        let mean_init = r.initial_errors.iter().sum::<f64>() / r.initial_errors.len() as f64;
        assert!((r.mean_error[0] - mean_init).abs() < 1e-12);
        assert!((r.mean_error[spec.budget()] - r.stats.mean).abs() < 1e-12);
    }
    let stats = result.stats_csv().unwrap();
    let lines: Vec<&str> = stats.lines().collect();
    assert_eq!(lines[0], "algorithm,p02,p03,p04,mean,std,median");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("SSD_Asy_GN_Sch,"));
    assert!(lines[1].split(',').skip(1).all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 6)));
    let curves = result.curves_csv().unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * (spec.budget() + 1));
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let fx = fixture();
    let spec = spec(&["SSD_Bid_GN_Alt", "PO_Bid_W"]);
    let a = run_experiment(&fx.bundle, &fx.data, &spec).unwrap();
    let b = run_experiment(&fx.bundle, &fx.data, &spec).unwrap();
    assert_eq!(a.stats_csv().unwrap(), b.stats_csv().unwrap());
    assert_eq!(a.curves_csv().unwrap(), b.curves_csv().unwrap());
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("stats.csv")).unwrap(), a.stats_csv().unwrap());
}

#[test]
fn wiberg_and_schur_statistics_agree() {
    let fx = fixture();
    let result = run_experiment(&fx.bundle, &fx.data, &spec(&["SSD_Asy_GN_Sch", "SSD_Asy_W"])).unwrap();
    let (a, b) = (&result.runs[0].stats, &result.runs[1].stats);
    for (x, y) in [(a.p02, b.p02), (a.p03, b.p03), (a.p04, b.p04), (a.mean, b.mean), (a.std, b.std), (a.median, b.median)] {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn grid_labels_carry_noise_and_rate() {
    let spec = ExperimentSpec {
        noise: vec![0.02, 0.05],
        sampling_rates: vec![1.0, 0.25],
        ..spec(&["SSD_For_GN_Sch"])
    };
    let labels: Vec<String> = spec.runs().unwrap().into_iter().map(|r| r.label).collect();
    assert_eq!(labels.len(), 4);
    assert!(labels.contains(&"SSD_For_GN_Sch@noise=0.05@rate=0.25".to_string()));
}

#[test]
fn invalid_specs_are_config_errors() {
    let bad = [
        ExperimentSpec { trials: 0, ..spec(&["SSD_Asy_GN_Sch"]) },
        ExperimentSpec { noise: vec![0.6], ..spec(&["SSD_Asy_GN_Sch"]) },
        ExperimentSpec { noise: vec![], ..spec(&["SSD_Asy_GN_Sch"]) },
        spec(&["SSD_Asy_XX"]),
        spec(&["PO_Asy_GN_Alt"]),
        spec(&[]),
    ];
    for s in bad {
        assert!(matches!(s.validate(), Err(AamError::Config(_))), "{s:?}");
    }
    assert!(matches!(ExperimentSpec::from_json_str(r#"{"trial": 3}"#), Err(AamError::Config(_))));
    let parsed = ExperimentSpec::from_json_str(r#"{"algorithms": ["SSD_Asy_GN_Sch"], "trials": 2}"#).unwrap();
    assert_eq!(parsed.trials, 2);
    assert_eq!(parsed.iters_per_scale, vec![24, 16]);
    assert!(run_experiment(&fixture().bundle, &[], &spec(&["SSD_Asy_GN_Sch"])).is_err());
}
