//! Fixtures shared by the integration tests: random linear algebra, an
//! analytic 2-D image model with exact derivatives, finite differences and
//! a small trained bundle.

#![allow(dead_code)]

use aam_cgd::dataset::AnnotatedImage;
use aam_cgd::jacobians::{Gradient, Projector, SecondDerivatives};
use aam_cgd::model::AamBundle;
use aam_cgd::shape::Components;
use aam_cgd::synthesis::{procedural_corpus, ProceduralSpec, SynthOptions};
use aam_cgd::training::{train, TrainConfig};
use aam_cgd::warp::WarpJacobian;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
}

pub fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    random_matrix(rng, rows, cols).qr().q()
}

pub fn rel_err(x: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (x - reference).norm() / reference.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_err_mat(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (x - reference).norm() / reference.norm().max(f64::MIN_POSITIVE)
}

/// Dense `W` of a projector.
pub fn dense_weight(w: &Projector<'_>) -> DMatrix<f64> {
    let q = w.basis;
    let f = q.nrows();
    let mut out = (DMatrix::identity(f, f) - q * q.transpose()) * w.outer;
    if let Some(k) = &w.inner {
        out += q * k * q.transpose();
    }
    out
}

/// `x = −(MᵀWM)⁻¹ MᵀW r`, solved densely through an LU factorization.
pub fn dense_weighted_ls(m: &DMatrix<f64>, w: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let mw = m.transpose() * w;
    -(&mw * m).lu().solve(&(&mw * r)).expect("nonsingular normal equations")
}

pub fn dense_ls(m: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let f = m.nrows();
    dense_weighted_ls(m, &DMatrix::identity(f, f), r)
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

/// Central-difference Hessian.
pub fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let eval = |i: usize, si: f64, j: usize, sj: f64| {
        let mut y = x.clone();
        y[i] += si * h;
        y[j] += sj * h;
        f(&y)
    };
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0) + eval(i, -1.0, j, -1.0))
                / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Sum of plane waves `Σ a sin(kx x + ky y + φ)`.
#[derive(Debug, Clone)]
pub struct Field {
    pub waves: Vec<[f64; 4]>,
}

impl Field {
    pub fn random(rng: &mut ChaCha8Rng, count: usize) -> Field {
        Field {
            waves: (0..count)
                .map(|_| {
                    [
                        rng.random_range(0.3..1.0),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(0.0..6.0),
                    ]
                })
                .collect(),
        }
    }

    pub fn zero() -> Field {
        Field { waves: Vec::new() }
    }

    /// `self + Σ w_l fields_l`.
    pub fn plus_combination(&self, fields: &[Field], w: &DVector<f64>) -> Field {
        let mut waves = self.waves.clone();
        for (f, wl) in fields.iter().zip(w.iter()) {
            waves.extend(f.waves.iter().map(|[a, kx, ky, ph]| [a * wl, *kx, *ky, *ph]));
        }
        Field { waves }
    }

    pub fn value(&self, p: [f64; 2]) -> f64 {
        self.waves
            .iter()
            .map(|[a, kx, ky, ph]| a * (kx * p[0] + ky * p[1] + ph).sin())
            .sum()
    }

    pub fn gradient(&self, p: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for [a, kx, ky, ph] in &self.waves {
            let c = a * (kx * p[0] + ky * p[1] + ph).cos();
            g[0] += c * kx;
            g[1] += c * ky;
        }
        g
    }

    pub fn hessian(&self, p: [f64; 2]) -> [f64; 3] {
        let mut h = [0.0; 3];
        for [a, kx, ky, ph] in &self.waves {
            let s = -a * (kx * p[0] + ky * p[1] + ph).sin();
            h[0] += s * kx * kx;
            h[1] += s * kx * ky;
            h[2] += s * ky * ky;
        }
        h
    }

    pub fn sample(&self, pts: &[[f64; 2]]) -> DVector<f64> {
        DVector::from_iterator(pts.len(), pts.iter().map(|p| self.value(*p)))
    }

    pub fn gradients(&self, pts: &[[f64; 2]]) -> Gradient {
        let g: Vec<[f64; 2]> = pts.iter().map(|p| self.gradient(*p)).collect();
        Gradient {
            x: DVector::from_iterator(pts.len(), g.iter().map(|v| v[0])),
            y: DVector::from_iterator(pts.len(), g.iter().map(|v| v[1])),
        }
    }

    pub fn hessians(&self, pts: &[[f64; 2]]) -> SecondDerivatives {
        let h: Vec<[f64; 3]> = pts.iter().map(|p| self.hessian(*p)).collect();
        SecondDerivatives {
            xx: DVector::from_iterator(pts.len(), h.iter().map(|v| v[0])),
            xy: DVector::from_iterator(pts.len(), h.iter().map(|v| v[1])),
            yy: DVector::from_iterator(pts.len(), h.iter().map(|v| v[2])),
        }
    }
}

/// Single-channel continuous model: image `i`, appearance mean `ā` and a
/// basis whose samples at the pixel positions are orthonormal.
pub struct AnalyticToy {
    pub pixels: Vec<[f64; 2]>,
    pub warp: WarpJacobian,
    pub image: Field,
    pub mean: Field,
    pub raw_basis: Vec<Field>,
    /// Maps raw basis samples onto orthonormal columns.
    pub mix: DMatrix<f64>,
    /// Current appearance parameters.
    pub c: DVector<f64>,
}

impl AnalyticToy {
    pub fn new(rng: &mut ChaCha8Rng, pixels: usize, n: usize, m: usize) -> AnalyticToy {
        let pts: Vec<[f64; 2]> = (0..pixels)
            .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])
            .collect();
        let warp = WarpJacobian {
            dx: random_matrix(rng, pixels, n) * 0.5,
            dy: random_matrix(rng, pixels, n) * 0.5,
        };
        let raw_basis: Vec<Field> = (0..m).map(|_| Field::random(rng, 2)).collect();
        let raw = DMatrix::from_fn(pixels, m, |i, j| raw_basis[j].value(pts[i]));
        let r = raw.qr().r();
        let mix = r.try_inverse().expect("full-rank basis samples");
        AnalyticToy {
            pixels: pts,
            warp,
            image: Field::random(rng, 3),
            mean: Field::random(rng, 3),
            raw_basis,
            mix,
            c: random_vector(rng, m),
        }
    }

    pub fn n(&self) -> usize {
        self.warp.dx.ncols()
    }

    pub fn m(&self) -> usize {
        self.mix.ncols()
    }

    /// Pixel positions displaced by `s · δ(d)`.
    pub fn shifted(&self, s: f64, d: &DVector<f64>) -> Vec<[f64; 2]> {
        let ux = &self.warp.dx * d;
        let uy = &self.warp.dy * d;
        self.pixels
            .iter()
            .enumerate()
            .map(|(k, p)| [p[0] + s * ux[k], p[1] + s * uy[k]])
            .collect()
    }

    /// Appearance instance `ā + A c` as a field.
    pub fn appearance(&self, c: &DVector<f64>) -> Field {
        self.mean.plus_combination(&self.raw_basis, &(&self.mix * c))
    }

    /// Orthonormal basis sampled at `pts`.
    pub fn basis_at(&self, pts: &[[f64; 2]]) -> DMatrix<f64> {
        let raw = DMatrix::from_fn(pts.len(), self.raw_basis.len(), |i, j| self.raw_basis[j].value(pts[i]));
        raw * &self.mix
    }

    pub fn basis(&self) -> DMatrix<f64> {
        self.basis_at(&self.pixels)
    }

    /// Gradient fields of the orthonormal basis columns.
    pub fn basis_gradients(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.raw_basis.len();
        let f = self.pixels.len();
        let mut gx = DMatrix::zeros(f, m);
        let mut gy = DMatrix::zeros(f, m);
        for (j, field) in self.raw_basis.iter().enumerate() {
            let g = field.gradients(&self.pixels);
            gx.set_column(j, &g.x);
            gy.set_column(j, &g.y);
        }
        (gx * &self.mix, gy * &self.mix)
    }

    /// Asymmetric residual `i(x + αδ(dp)) − (ā + A(c + dc))(x − βδ(dp))`.
    pub fn asym_residual(&self, alpha: f64, dc: &DVector<f64>, dp: &DVector<f64>) -> DVector<f64> {
        let beta = 1.0 - alpha;
        self.image.sample(&self.shifted(alpha, dp)) - self.appearance(&(&self.c + dc)).sample(&self.shifted(-beta, dp))
    }

    /// Bidirectional residual `i(x + δ(dp)) − (ā + A(c + dc))(x + δ(dq))`.
    pub fn bid_residual(&self, dc: &DVector<f64>, dp: &DVector<f64>, dq: &DVector<f64>) -> DVector<f64> {
        self.image.sample(&self.shifted(1.0, dp)) - self.appearance(&(&self.c + dc)).sample(&self.shifted(1.0, dq))
    }

    /// Project-out residual `i(x + αδ(dp)) − ā(x − βδ(dp))`.
    pub fn po_asym_residual(&self, alpha: f64, dp: &DVector<f64>) -> DVector<f64> {
        let beta = 1.0 - alpha;
        self.image.sample(&self.shifted(alpha, dp)) - self.mean.sample(&self.shifted(-beta, dp))
    }

    /// Project-out residual `i(x + δ(dp)) − ā(x + δ(dq))`.
    pub fn po_bid_residual(&self, dp: &DVector<f64>, dq: &DVector<f64>) -> DVector<f64> {
        self.image.sample(&self.shifted(1.0, dp)) - self.mean.sample(&self.shifted(1.0, dq))
    }
}

/// Splits a stacked vector into consecutive pieces of the given lengths.
pub fn split(x: &DVector<f64>, lens: &[usize]) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &l in lens {
        out.push(x.rows(at, l).into_owned());
        at += l;
    }
    out
}

/// Random Bayesian-style weighting `Q K Qᵀ + w (I − Q Qᵀ)`.
pub fn random_weighting<'a>(rng: &mut ChaCha8Rng, basis: &'a DMatrix<f64>) -> Projector<'a> {
    let m = basis.ncols();
    let k = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0)));
    Projector {
        basis,
        inner: Some(k),
        outer: rng.random_range(0.5..2.0),
    }
}

/// A two-level bundle trained on the built-in generator, plus the corpus.
pub fn toy_bundle(face_size: f64, images: usize) -> (AamBundle, Vec<AnnotatedImage>) {
    let spec = ProceduralSpec {
        face_size,
        ..ProceduralSpec::default()
    };
    let opts = SynthOptions {
        rotation: 0.2,
        scale_jitter: 0.1,
        ..SynthOptions::default()
    };
    let corpus = procedural_corpus(&spec, images, &opts, 1).expect("corpus");
    let config = TrainConfig {
        face_size,
        appearance_components: Components::VarianceRatio(0.98),
        ..TrainConfig::default()
    };
    let (bundle, _) = train(&corpus, &config).expect("training");
    (bundle, corpus)
}

/// Proptest settings for integration tests, which have no source file to
/// persist regressions next to.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}
