use std::hint::black_box;

use aam_cgd::experiment::perturb_initialization;
use aam_cgd::fitting::{FitConfig, Fitter};
use aam_cgd::warp::warp_to_reference;
use aam_cgd_bench::fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALGORITHMS: &[&str] = &[
    "SSD_For_GN_Sch",
    "SSD_Inv_GN_Sch",
    "SSD_Asy_GN_Sch",
    "SSD_Asy_GN_Alt",
    "SSD_Bid_GN_Sch",
    "SSD_Asy_N_Sch",
    "SSD_Asy_W",
    "PO_Inv_GN",
    "PO_Asy_GN",
    "PO_Bid_GN_Sch",
];

fn fit_benches(c: &mut Criterion) {
    let (bundle, test) = fixture(100.0, 1);
    let item = &test[0];
    let model = &bundle.finest().shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = perturb_initialization(&item.shape, model, 0.05, &mut rng).expect("init");
    let init = model.instance(&p).expect("shape");

    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for sel in ALGORITHMS {
        let cfg = FitConfig::from_selector(sel).expect("selector");
        let fitter = Fitter::new(&bundle, &cfg).expect("fitter");
        group.bench_function(BenchmarkId::from_parameter(sel), |b| {
            b.iter(|| fitter.fit(black_box(&item.image), black_box(&init)).expect("fit"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    for rate in [1.0, 0.5, 0.25] {
        let mut cfg = FitConfig::from_selector("SSD_Asy_GN_Sch").expect("selector");
        cfg.sampling_rate = rate;
        let fitter = Fitter::new(&bundle, &cfg).expect("fitter");
        group.bench_function(BenchmarkId::from_parameter(rate), |b| {
            b.iter(|| fitter.fit(black_box(&item.image), black_box(&init)).expect("fit"))
        });
    }
    group.finish();

    let level = bundle.finest();
    c.bench_function("warp_to_reference", |b| {
        b.iter(|| {
            warp_to_reference(
                black_box(&item.image),
                black_box(&item.shape),
                &level.frame,
                &level.triangulation,
            )
            .expect("warp")
        })
    });
}

criterion_group!(benches, fit_benches);
criterion_main!(benches);
