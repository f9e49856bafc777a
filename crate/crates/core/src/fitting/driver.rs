use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::config::{AltVariant, Composition, CostFunction, FitConfig, Method, Strategy};
use super::sampling::sampling_mask;
use super::steps::{
    gn_alt_asymmetric, gn_alt_bidirectional, gn_schur_asymmetric, gn_schur_bidirectional, newton_asymmetric,
    newton_bidirectional, po_gn_asymmetric, po_gn_bidirectional_alt, po_wiberg_bidirectional, wiberg_asymmetric,
    wiberg_bidirectional, BidGrams, PrecomputedUpdate, PriorTerms,
};
use crate::error::{AamError, Result};
use crate::jacobians::{
    blend, image_gradient, image_hessian, newton_terms_asymmetric, newton_terms_bidirectional,
    po_newton_terms_asymmetric, po_newton_terms_bidirectional, steepest_descent_matrix, Gradient, NewtonInput,
    Projector, SecondDerivatives,
};
use crate::linalg::solve_spd;
use crate::model::{halvings, AamBundle, ScaleLevel};
use crate::raster::Raster;
use crate::shape::{Shape, ShapeModel};
use crate::warp::{compose, invert_increment, triangle_linear_maps, PixelTriangle, Triangulation, WarpJacobian};

/// Outcome of one fit. Trace vectors have one entry for the initialization
/// followed by one per iteration; shapes are in input-image coordinates.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub algorithm: String,
    pub shapes: Vec<Shape>,
    /// Cost per residual row after each iteration, at the scale it ran on.
    pub costs: Vec<f64>,
    /// Pyramid level of each trace entry.
    pub levels: Vec<usize>,
    pub iteration_seconds: Vec<f64>,
    /// Trace indices whose Newton step fell back to Gauss-Newton.
    pub newton_fallbacks: Vec<usize>,
    /// Final shape parameters at the finest level.
    pub p: DVector<f64>,
    /// Final appearance parameters at the finest level.
    pub c: DVector<f64>,
    pub converged: bool,
    pub aborted: Option<String>,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.costs.len().saturating_sub(1)
    }

    pub fn initial_shape(&self) -> &Shape {
        &self.shapes[0]
    }

    pub fn final_shape(&self) -> &Shape {
        self.shapes.last().expect("trace has the initial entry")
    }

    /// Costs divided by the initial cost.
    pub fn normalized_costs(&self) -> Vec<f64> {
        let c0 = self.costs[0];
        self.costs.iter().map(|c| if c0 > 0.0 { c / c0 } else { *c }).collect()
    }

    /// Normalized costs padded with the final value to `len` entries.
    pub fn padded_costs(&self, len: usize) -> Vec<f64> {
        let mut v = self.normalized_costs();
        let last = *v.last().expect("non-empty trace");
        v.resize(len.max(v.len()), last);
        v
    }
}

/// Applies the composition rule of `composition` to the current warp.
/// `dp` is in the convention of the step that produced it: for inverse
/// composition it is the increment of the template-side warp.
#[allow(clippy::too_many_arguments)]
pub fn update_warp(
    model: &ShapeModel,
    tri: &Triangulation,
    composition: Composition,
    alpha: f64,
    p: &DVector<f64>,
    dp: &DVector<f64>,
    dq: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    match composition {
        Composition::Forward => compose(model, tri, p, dp),
        Composition::Inverse => compose(model, tri, p, &invert_increment(dp)),
        Composition::Asymmetric => {
            let mid = compose(model, tri, p, &(dp * alpha))?;
            compose(model, tri, &mid, &(dp * (1.0 - alpha)))
        }
        Composition::Bidirectional => {
            let dq = dq.ok_or_else(|| AamError::Input("bidirectional update needs dq".into()))?;
            let mid = compose(model, tri, p, dp)?;
            compose(model, tri, &mid, &invert_increment(dq))
        }
    }
}

struct PriorModel {
    p_precision: DVector<f64>,
    c_precision: DMatrix<f64>,
    c_mean: DVector<f64>,
}

impl PriorModel {
    fn terms(&self, p: DVector<f64>, c: &DVector<f64>) -> PriorTerms {
        PriorTerms {
            p_precision: self.p_precision.clone(),
            p,
            c_precision: self.c_precision.clone(),
            c_offset: c - &self.c_mean,
        }
    }
}

/// Model-side quantities of one level restricted to the sampled pixels.
/// Appearance coordinates are `c' = R c` where `A_s = Q R`.
struct ScaleContext {
    k: usize,
    tris: Vec<PixelTriangle>,
    wj: WarpJacobian,
    q: DMatrix<f64>,
    r_factor: Option<DMatrix<f64>>,
    mean: DVector<f64>,
    data_mean: DVector<f64>,
    grad_mean: Gradient,
    grad_basis: Option<(DMatrix<f64>, DMatrix<f64>)>,
    hess_mean: Option<SecondDerivatives>,
    hess_basis: Option<[DMatrix<f64>; 3]>,
    template_grad: Gradient,
    template_hess: Option<SecondDerivatives>,
    template_j: DMatrix<f64>,
    inner: Option<DMatrix<f64>>,
    outer: f64,
    fast: Option<PrecomputedUpdate>,
    prior: Option<PriorModel>,
}

impl ScaleContext {
    fn rows(&self) -> usize {
        self.q.nrows()
    }

    fn projector(&self, cost: CostFunction) -> Projector<'_> {
        match cost {
            CostFunction::Ssd => Projector::project_out(&self.q),
            CostFunction::ProjectOut => Projector {
                basis: &self.q,
                inner: self.inner.clone(),
                outer: self.outer,
            },
        }
    }

    fn appearance_gradient(&self, c: &DVector<f64>) -> Gradient {
        match &self.grad_basis {
            Some((gx, gy)) => Gradient {
                x: &self.grad_mean.x + gx * c,
                y: &self.grad_mean.y + gy * c,
            },
            None => self.grad_mean.clone(),
        }
    }

    fn appearance_hessian(&self, c: &DVector<f64>) -> SecondDerivatives {
        match (&self.hess_mean, &self.hess_basis) {
            (Some(h), Some([xx, xy, yy])) => SecondDerivatives {
                xx: &h.xx + xx * c,
                xy: &h.xy + xy * c,
                yy: &h.yy + yy * c,
            },
            _ => SecondDerivatives::zeros(self.rows()),
        }
    }

    /// `c = R⁻¹ c'`.
    fn model_coords(&self, c: &DVector<f64>) -> DVector<f64> {
        match &self.r_factor {
            Some(r) => r.solve_upper_triangular(c).unwrap_or_else(|| c.clone()),
            None => c.clone(),
        }
    }
}

fn select_rows(v: &DVector<f64>, rows: Option<&[usize]>) -> DVector<f64> {
    match rows {
        Some(r) => v.select_rows(r),
        None => v.clone(),
    }
}

fn select_grad(g: Gradient, rows: Option<&[usize]>) -> Gradient {
    match rows {
        Some(r) => g.select(r),
        None => g,
    }
}

fn select_hess(h: SecondDerivatives, rows: Option<&[usize]>) -> SecondDerivatives {
    match rows {
        Some(r) => h.select(r),
        None => h,
    }
}

/// `X R⁻¹` for upper-triangular `R`.
fn right_solve(x: DMatrix<f64>, r: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    match r {
        None => Ok(x),
        Some(r) => Ok(r
            .tr_solve_upper_triangular(&x.transpose())
            .ok_or_else(|| AamError::Numerical("singular sampled appearance basis".into()))?
            .transpose()),
    }
}

fn build_context(level: &ScaleLevel, cfg: &FitConfig) -> Result<ScaleContext> {
    let app = &level.appearance;
    let frame = &level.frame;
    let k = app.channels;
    let m = app.n_components();
    let n = level.shape.n_params();
    let mask = sampling_mask(frame, cfg.sampling_rate);
    let pixels: Vec<usize> = (0..frame.n_pixels()).filter(|&i| mask[i]).collect();
    if pixels.len() * k < n + m + 4 {
        return Err(AamError::InsufficientData(format!(
            "sampling rate {} leaves {} rows for {} unknowns",
            cfg.sampling_rate,
            pixels.len() * k,
            n + m
        )));
    }
    let full = pixels.len() == frame.n_pixels();
    let row_idx: Vec<usize> = pixels.iter().flat_map(|&p| (0..k).map(move |ch| p * k + ch)).collect();
    let rows = if full { None } else { Some(row_idx.as_slice()) };

    let (q, r_factor) = if full {
        (app.basis.clone(), None)
    } else {
        let a_s = app.basis.select_rows(&row_idx);
        let qr = a_s.qr();
        let r = qr.r();
        let dmax = r.diagonal().amax();
        let dmin = r.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if m > 0 && !(dmin > 1e-8 * dmax) {
            return Err(AamError::InsufficientData(
                "sampled appearance basis is rank deficient".into(),
            ));
        }
        (qr.q(), Some(r))
    };

    let data_mean_full = app.data_mean();
    let mean = select_rows(&app.mean, rows);
    let data_mean = select_rows(&data_mean_full, rows);
    let grad_mean = select_grad(image_gradient(&app.mean, frame, k)?, rows);
    let template_grad = select_grad(image_gradient(&data_mean_full, frame, k)?, rows);
    let wj = if full { level.warp_jacobian.clone() } else { level.warp_jacobian.select(&pixels) };
    let tris: Vec<PixelTriangle> = pixels.iter().map(|&i| level.triangulation.per_pixel[i]).collect();
    let newton = cfg.method == Method::Newton;
    let ssd = cfg.cost == CostFunction::Ssd;
    let model_side = cfg.composition != Composition::Forward;

    let grad_basis = if ssd && (model_side || newton) {
        let rws = row_idx.len();
        let mut gx = DMatrix::zeros(rws, m);
        let mut gy = DMatrix::zeros(rws, m);
        for j in 0..m {
            let g = select_grad(image_gradient(&app.basis.column(j).into_owned(), frame, k)?, rows);
            gx.set_column(j, &g.x);
            gy.set_column(j, &g.y);
        }
        Some((right_solve(gx, r_factor.as_ref())?, right_solve(gy, r_factor.as_ref())?))
    } else {
        None
    };

    let (hess_mean, hess_basis) = if ssd && newton && model_side {
        let rws = row_idx.len();
        let mut hs = [DMatrix::zeros(rws, m), DMatrix::zeros(rws, m), DMatrix::zeros(rws, m)];
        for j in 0..m {
            let h = select_hess(image_hessian(&app.basis.column(j).into_owned(), frame, k)?, rows);
            hs[0].set_column(j, &h.xx);
            hs[1].set_column(j, &h.xy);
            hs[2].set_column(j, &h.yy);
        }
        let [a, b, c] = hs;
        let r = r_factor.as_ref();
        (
            Some(select_hess(image_hessian(&app.mean, frame, k)?, rows)),
            Some([right_solve(a, r)?, right_solve(b, r)?, right_solve(c, r)?]),
        )
    } else {
        (None, None)
    };
    let template_hess = if !ssd && newton && model_side {
        Some(select_hess(image_hessian(&data_mean_full, frame, k)?, rows))
    } else {
        None
    };
    let template_j = if ssd {
        DMatrix::zeros(0, 0)
    } else {
        steepest_descent_matrix(&template_grad, &wj, k)?
    };

    let sigma2 = app.image_noise;
    let inv_d = app.eigenvalues.map(|e| 1.0 / (e + sigma2));
    let (inner, outer) = if ssd {
        (None, 1.0)
    } else {
        let inner = if cfg.rho > 0.0 {
            let d = DMatrix::from_diagonal(&(&inv_d * cfg.rho));
            Some(match &r_factor {
                Some(r) => r * d * r.transpose(),
                None => d,
            })
        } else {
            None
        };
        (inner, (1.0 - cfg.rho) / sigma2)
    };

    let mut ctx = ScaleContext {
        k,
        tris,
        wj,
        q,
        r_factor,
        mean,
        data_mean,
        grad_mean,
        grad_basis,
        hess_mean,
        hess_basis,
        template_grad,
        template_hess,
        template_j,
        inner,
        outer,
        fast: None,
        prior: None,
    };

    if let Some(prior) = &cfg.prior {
        let data_scale = if ssd { sigma2 } else { 1.0 };
        let p_precision = level
            .shape
            .prior_variances(prior.similarity_variance)
            .map(|v| data_scale / v);
        let sigma_inv = DMatrix::from_diagonal(&app.eigenvalues.map(|e| data_scale / e));
        let (c_precision, c_mean) = match &ctx.r_factor {
            None => (sigma_inv, app.prior_mean.clone()),
            Some(r) => {
                let r_inv = r
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| AamError::Numerical("singular sampled appearance basis".into()))?;
                (r_inv.transpose() * sigma_inv * &r_inv, r * &app.prior_mean)
            }
        };
        ctx.prior = Some(PriorModel {
            p_precision,
            c_precision,
            c_mean,
        });
    }

    let constant_jacobian = cfg.composition == Composition::Inverse
        || (cfg.composition == Composition::Asymmetric && cfg.alpha == 0.0);
    if !ssd && cfg.prior.is_none() && cfg.method != Method::Newton && constant_jacobian {
        let w = ctx.projector(cfg.cost);
        let fast = PrecomputedUpdate::new(&w, &ctx.template_j)?;
        ctx.fast = Some(fast);
    }
    Ok(ctx)
}

struct LevelImage {
    features: Raster,
    gx: Raster,
    gy: Raster,
    hess: Option<[Raster; 3]>,
}

struct Evaluation {
    i: DVector<f64>,
    grad: Option<Gradient>,
    hess: Option<SecondDerivatives>,
    shape: Shape,
}

struct StepOutcome {
    dp: DVector<f64>,
    dq: Option<DVector<f64>>,
    dc: DVector<f64>,
    fallback: bool,
}

struct AltState {
    dp: DVector<f64>,
    dq: DVector<f64>,
}

fn recoverable(e: &AamError) -> bool {
    matches!(e, AamError::RankDeficient { .. } | AamError::Numerical(_))
}

/// A configured fitter with all model-side precomputation done once.
pub struct Fitter<'a> {
    bundle: &'a AamBundle,
    config: FitConfig,
    contexts: Vec<ScaleContext>,
}

impl<'a> Fitter<'a> {
    pub fn new(bundle: &'a AamBundle, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        if config.iters_per_scale.len() != bundle.n_levels() {
            return Err(AamError::Config(format!(
                "{} iteration budgets for {} pyramid levels",
                config.iters_per_scale.len(),
                bundle.n_levels()
            )));
        }
        let contexts = bundle
            .levels
            .iter()
            .map(|l| build_context(l, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fitter {
            bundle,
            config: config.clone(),
            contexts,
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    /// Number of residual rows used at each level.
    pub fn active_rows(&self) -> Vec<usize> {
        self.contexts.iter().map(|c| c.rows()).collect()
    }

    fn needs_image_gradient(&self) -> bool {
        match self.config.composition {
            Composition::Inverse => false,
            Composition::Asymmetric => self.config.alpha != 0.0,
            _ => true,
        }
    }

    fn needs_image_hessian(&self) -> bool {
        self.config.method == Method::Newton && self.needs_image_gradient()
    }

    fn prepare_images(&self, image: &Raster, init: &Shape) -> Result<(Vec<LevelImage>, f64)> {
        let face = init.face_size();
        if !(face > 0.0) || !face.is_finite() {
            return Err(AamError::Input("degenerate initial shape".into()));
        }
        // Power-of-two rescaling keeps images near the training scale untouched.
        let k = 2f64.powf((self.bundle.face_size / face).log2().round());
        let base = image.resize(k)?;
        let mut pyramid = vec![base];
        let mut out = Vec::with_capacity(self.bundle.n_levels());
        let want_hess = self.needs_image_hessian();
        for level in &self.bundle.levels {
            let h = halvings(level.scale)? as usize;
            while pyramid.len() <= h {
                let next = pyramid.last().expect("non-empty").pyramid_down();
                pyramid.push(next);
            }
            let features = self.bundle.extractor.extract(&pyramid[h]);
            let (gx, gy) = features.gradient();
            let hess = if want_hess {
                let (gxx, gxy) = gx.gradient();
                let (gyx, gyy) = gy.gradient();
                let mut xy = gxy;
                for (a, b) in xy.data_mut().iter_mut().zip(gyx.data()) {
                    *a = 0.5 * (*a + b);
                }
                Some([gxx, xy, gyy])
            } else {
                None
            };
            out.push(LevelImage { features, gx, gy, hess });
        }
        Ok((out, k))
    }

    fn evaluate(&self, ctx: &ScaleContext, level: &ScaleLevel, img: &LevelImage, p: &DVector<f64>) -> Result<Evaluation> {
        let shape = level.shape.instance(p)?;
        let want_grad = self.needs_image_gradient();
        let want_hess = self.needs_image_hessian();
        let maps = if want_grad {
            triangle_linear_maps(&level.shape.mean, &shape, &level.triangulation)
        } else {
            Vec::new()
        };
        let k = ctx.k;
        let rows = ctx.rows();
        let s = shape.as_vector();
        let mut i = DVector::zeros(rows);
        let mut grad = want_grad.then(|| Gradient::zeros(rows));
        let mut hess = want_hess.then(|| SecondDerivatives::zeros(rows));
        let mut bx = vec![0.0; k];
        let mut by = vec![0.0; k];
        let mut hxx = vec![0.0; k];
        let mut hxy = vec![0.0; k];
        let mut hyy = vec![0.0; k];
        for (px, pt) in ctx.tris.iter().enumerate() {
            let t = &level.triangulation.triangles[pt.triangle];
            let mut x = 0.0;
            let mut y = 0.0;
            for v in 0..3 {
                x += pt.bary[v] * s[2 * t[v]];
                y += pt.bary[v] * s[2 * t[v] + 1];
            }
            let base = px * k;
            img.features.sample(x, y, &mut i.as_mut_slice()[base..base + k]);
            if let Some(g) = grad.as_mut() {
                let l = &maps[pt.triangle];
                img.gx.sample(x, y, &mut bx);
                img.gy.sample(x, y, &mut by);
                for ch in 0..k {
                    g.x[base + ch] = l[(0, 0)] * bx[ch] + l[(1, 0)] * by[ch];
                    g.y[base + ch] = l[(0, 1)] * bx[ch] + l[(1, 1)] * by[ch];
                }
                if let (Some(h), Some([rxx, rxy, ryy])) = (hess.as_mut(), img.hess.as_ref()) {
                    rxx.sample(x, y, &mut hxx);
                    rxy.sample(x, y, &mut hxy);
                    ryy.sample(x, y, &mut hyy);
                    let (a, b, c, d) = (l[(0, 0)], l[(0, 1)], l[(1, 0)], l[(1, 1)]);
                    for ch in 0..k {
                        let (xx, xy, yy) = (hxx[ch], hxy[ch], hyy[ch]);
                        h.xx[base + ch] = a * a * xx + 2.0 * a * c * xy + c * c * yy;
                        h.xy[base + ch] = a * b * xx + (a * d + b * c) * xy + c * d * yy;
                        h.yy[base + ch] = b * b * xx + 2.0 * b * d * xy + d * d * yy;
                    }
                }
            }
        }
        Ok(Evaluation { i, grad, hess, shape })
    }

    fn cost(&self, ctx: &ScaleContext, ev: &Evaluation, c: &DVector<f64>) -> f64 {
        let rows = ctx.rows() as f64;
        match self.config.cost {
            CostFunction::Ssd => (&ev.i - &ctx.mean - &ctx.q * c).norm_squared() / rows,
            CostFunction::ProjectOut => {
                let r = &ev.i - &ctx.data_mean;
                let w = ctx.projector(CostFunction::ProjectOut);
                r.dot(&w.apply(&r)) / rows
            }
        }
    }

    fn sd(&self, ctx: &ScaleContext, g: &Gradient) -> Result<DMatrix<f64>> {
        steepest_descent_matrix(g, &ctx.wj, ctx.k)
    }

    fn image_grad<'e>(&self, ev: &'e Evaluation, rows: usize) -> std::borrow::Cow<'e, Gradient> {
        match &ev.grad {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(Gradient::zeros(rows)),
        }
    }

    fn step(
        &self,
        ctx: &ScaleContext,
        ev: &Evaluation,
        p: &DVector<f64>,
        c: &DVector<f64>,
        prev: &AltState,
    ) -> Result<StepOutcome> {
        match self.config.cost {
            CostFunction::Ssd => self.ssd_step(ctx, ev, p, c, prev),
            CostFunction::ProjectOut => self.po_step(ctx, ev, p, prev),
        }
    }

    fn ssd_step(
        &self,
        ctx: &ScaleContext,
        ev: &Evaluation,
        p: &DVector<f64>,
        c: &DVector<f64>,
        prev: &AltState,
    ) -> Result<StepOutcome> {
        let cfg = &self.config;
        let rows = ctx.rows();
        let alt = cfg.strategy == Strategy::Alternated;
        let joint = cfg.alt_variant == AltVariant::Joint;
        let r = &ev.i - &ctx.mean - &ctx.q * c;
        let gi = self.image_grad(ev, rows);
        let newton_parts = || {
            let ih = ev.hess.clone().unwrap_or_else(|| SecondDerivatives::zeros(rows));
            let ah = ctx.appearance_hessian(c);
            (ih, ah)
        };
        let zeros_m = DMatrix::zeros(rows, c.len());
        let (bgx, bgy) = ctx
            .grad_basis
            .as_ref()
            .map(|(x, y)| (x, y))
            .unwrap_or((&zeros_m, &zeros_m));

        if cfg.composition == Composition::Bidirectional {
            let ji = self.sd(ctx, &gi)?;
            let ja = self.sd(ctx, &ctx.appearance_gradient(c))?;
            let gn = || -> Result<StepOutcome> {
                let s = if alt {
                    gn_alt_bidirectional(&r, &ctx.q, &ji, &ja, &prev.dp, &prev.dq, joint)?
                } else {
                    gn_schur_bidirectional(&r, &ctx.q, &ji, &ja)?
                };
                Ok(StepOutcome {
                    dp: s.dp,
                    dq: Some(s.dq),
                    dc: s.dc,
                    fallback: false,
                })
            };
            return match cfg.method {
                Method::GaussNewton => gn(),
                Method::Wiberg => {
                    let s = wiberg_bidirectional(&r, &ctx.q, &ji, &ja)?;
                    Ok(StepOutcome {
                        dp: s.dp,
                        dq: Some(s.dq),
                        dc: s.dc,
                        fallback: false,
                    })
                }
                Method::Newton => {
                    let (ih, ah) = newton_parts();
                    let input = NewtonInput {
                        residual: &r,
                        basis: &ctx.q,
                        basis_grad_x: bgx,
                        basis_grad_y: bgy,
                        image_hessian: &ih,
                        appearance_hessian: &ah,
                        warp: &ctx.wj,
                        channels: ctx.k,
                    };
                    let terms = newton_terms_bidirectional(&input, &ji, &ja);
                    let g_c = -ctx.q.tr_mul(&r);
                    let g_p = ji.tr_mul(&r);
                    let g_q = -ja.tr_mul(&r);
                    match newton_bidirectional(&terms, &g_c, &g_p, &g_q, alt, joint, &prev.dp, &prev.dq) {
                        Ok(s) => Ok(StepOutcome {
                            dp: s.dp,
                            dq: Some(s.dq),
                            dc: s.dc,
                            fallback: false,
                        }),
                        Err(e) if recoverable(&e) => gn().map(|o| StepOutcome { fallback: true, ..o }),
                        Err(e) => Err(e),
                    }
                }
            };
        }

        let (alpha, beta) = cfg.effective_weights();
        let (j, sign, newton_beta) = match cfg.composition {
            Composition::Forward => (self.sd(ctx, &gi)?, 1.0, 0.0),
            Composition::Inverse => (-self.sd(ctx, &ctx.appearance_gradient(c))?, -1.0, -1.0),
            _ => {
                let ga = if beta != 0.0 {
                    ctx.appearance_gradient(c)
                } else {
                    Gradient::zeros(rows)
                };
                (self.sd(ctx, &blend(alpha, &gi, beta, &ga))?, 1.0, beta)
            }
        };
        let prior = ctx.prior.as_ref().map(|pm| pm.terms(p * sign, c));
        let gn = || -> Result<StepOutcome> {
            let s = if alt {
                gn_alt_asymmetric(&r, &ctx.q, &j, &prev.dp, prior.as_ref())?
            } else {
                gn_schur_asymmetric(&r, &ctx.q, &j, prior.as_ref())?
            };
            Ok(StepOutcome {
                dp: s.dp,
                dq: None,
                dc: s.dc,
                fallback: false,
            })
        };
        match cfg.method {
            Method::GaussNewton => gn(),
            Method::Wiberg => {
                let s = wiberg_asymmetric(&r, &ctx.q, &j)?;
                Ok(StepOutcome {
                    dp: s.dp,
                    dq: None,
                    dc: s.dc,
                    fallback: false,
                })
            }
            Method::Newton => {
                let (ih, ah) = newton_parts();
                let input = NewtonInput {
                    residual: &r,
                    basis: &ctx.q,
                    basis_grad_x: bgx,
                    basis_grad_y: bgy,
                    image_hessian: &ih,
                    appearance_hessian: &ah,
                    warp: &ctx.wj,
                    channels: ctx.k,
                };
                let terms = newton_terms_asymmetric(&input, &j, alpha, newton_beta);
                let g_c = -ctx.q.tr_mul(&r);
                let g_p = j.tr_mul(&r);
                match newton_asymmetric(&terms, &g_c, &g_p, alt, &prev.dp) {
                    Ok(s) => Ok(StepOutcome {
                        dp: s.dp,
                        dq: None,
                        dc: s.dc,
                        fallback: false,
                    }),
                    Err(e) if recoverable(&e) => gn().map(|o| StepOutcome { fallback: true, ..o }),
                    Err(e) => Err(e),
                }
            }
        }
    }

    fn po_step(&self, ctx: &ScaleContext, ev: &Evaluation, p: &DVector<f64>, prev: &AltState) -> Result<StepOutcome> {
        let cfg = &self.config;
        let rows = ctx.rows();
        let alt = cfg.strategy == Strategy::Alternated;
        let r = &ev.i - &ctx.data_mean;
        let w = ctx.projector(CostFunction::ProjectOut);
        let empty = DVector::zeros(0);
        let outcome = |dp: DVector<f64>, dq: Option<DVector<f64>>, fallback: bool| StepOutcome {
            dp,
            dq,
            dc: DVector::zeros(0),
            fallback,
        };
        if let Some(fast) = &ctx.fast {
            let dp = fast.apply(&r);
            let dp = if cfg.composition == Composition::Inverse { dp } else { -dp };
            return Ok(outcome(dp, None, false));
        }
        let gi = self.image_grad(ev, rows);
        let ih = || ev.hess.clone().unwrap_or_else(|| SecondDerivatives::zeros(rows));
        let th = || ctx.template_hess.clone().unwrap_or_else(|| SecondDerivatives::zeros(rows));

        if cfg.composition == Composition::Bidirectional {
            let ji = self.sd(ctx, &gi)?;
            let ja = &ctx.template_j;
            let grams = BidGrams::new(&w, &r, &ji, ja);
            let gn = || -> Result<StepOutcome> {
                let (dp, dq) = if alt {
                    po_gn_bidirectional_alt(&grams, &prev.dp)?
                } else {
                    grams.schur()?
                };
                Ok(outcome(dp, Some(dq), false))
            };
            return match cfg.method {
                Method::GaussNewton => gn(),
                Method::Wiberg => {
                    let (dp, dq) = po_wiberg_bidirectional(&grams)?;
                    Ok(outcome(dp, Some(dq), false))
                }
                Method::Newton => {
                    let wr = w.apply(&r);
                    let terms = po_newton_terms_bidirectional(&w, &wr, &ji, ja, &ih(), &th(), &ctx.wj, ctx.k);
                    let g_p = ji.tr_mul(&wr);
                    let g_q = -ja.tr_mul(&wr);
                    match newton_bidirectional(&terms, &empty, &g_p, &g_q, alt, false, &prev.dp, &prev.dq) {
                        Ok(s) => Ok(outcome(s.dp, Some(s.dq), false)),
                        Err(e) if recoverable(&e) => gn().map(|o| StepOutcome { fallback: true, ..o }),
                        Err(e) => Err(e),
                    }
                }
            };
        }

        let (alpha, beta) = cfg.effective_weights();
        let (j, sign, newton_beta) = match cfg.composition {
            Composition::Forward => (self.sd(ctx, &gi)?, 1.0, 0.0),
            Composition::Inverse => (-&ctx.template_j, -1.0, -1.0),
            _ => (self.sd(ctx, &blend(alpha, &gi, beta, &ctx.template_grad))?, 1.0, beta),
        };
        let prior = ctx.prior.as_ref().map(|pm| pm.terms(p * sign, &DVector::zeros(0)));
        let gn = || -> Result<StepOutcome> { Ok(outcome(po_gn_asymmetric(&w, &r, &j, prior.as_ref())?, None, false)) };
        match cfg.method {
            Method::GaussNewton | Method::Wiberg => gn(),
            Method::Newton => {
                let wr = w.apply(&r);
                let terms =
                    po_newton_terms_asymmetric(&w, &wr, &j, &ih(), &th(), &ctx.wj, ctx.k, alpha, newton_beta);
                let g_p = j.tr_mul(&wr);
                match solve_spd(&terms.pp, &g_p) {
                    Ok(x) => Ok(outcome(-x, None, false)),
                    Err(e) if recoverable(&e) => gn().map(|o| StepOutcome { fallback: true, ..o }),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Fits the model starting from `init`, given in image coordinates.
    pub fn fit(&self, image: &Raster, init: &Shape) -> Result<FitResult> {
        if init.n_points() != self.bundle.n_points() {
            return Err(AamError::Dimension {
                expected: self.bundle.n_points(),
                got: init.n_points(),
            });
        }
        let (images, k) = self.prepare_images(image, init)?;
        let cfg = &self.config;
        let mut result = FitResult {
            algorithm: cfg.algorithm().to_string(),
            shapes: Vec::new(),
            costs: Vec::new(),
            levels: Vec::new(),
            iteration_seconds: Vec::new(),
            newton_fallbacks: Vec::new(),
            p: DVector::zeros(0),
            c: DVector::zeros(0),
            converged: false,
            aborted: None,
        };
        let mut current = init.clone();
        'levels: for (l, ctx) in self.contexts.iter().enumerate() {
            let level = &self.bundle.levels[l];
            let g = k * level.scale;
            let mut p = level.shape.project(&current.scaled(g))?;
            let mut ev = self.evaluate(ctx, level, &images[l], &p)?;
            let mut c = match cfg.cost {
                CostFunction::Ssd => ctx.q.tr_mul(&(&ev.i - &ctx.mean)),
                CostFunction::ProjectOut => DVector::zeros(0),
            };
            if l == 0 {
                result.shapes.push(ev.shape.scaled(1.0 / g));
                result.costs.push(self.cost(ctx, &ev, &c));
                result.levels.push(0);
            }
            let n = p.len();
            let mut prev = AltState {
                dp: DVector::zeros(n),
                dq: DVector::zeros(n),
            };
            result.converged = false;
            for _ in 0..cfg.iters_per_scale[l] {
                let t0 = Instant::now();
                let out = match self.step(ctx, &ev, &p, &c, &prev) {
                    Ok(o) => o,
                    Err(e) => {
                        result.aborted = Some(e.to_string());
                        result.p = p;
                        break 'levels;
                    }
                };
                let next = update_warp(
                    &level.shape,
                    &level.triangulation,
                    cfg.composition,
                    cfg.alpha,
                    &p,
                    &out.dp,
                    out.dq.as_ref(),
                )
                .and_then(|v| {
                    if v.iter().all(|x| x.is_finite()) && out.dc.iter().all(|x| x.is_finite()) {
                        Ok(v)
                    } else {
                        Err(AamError::Numerical("non-finite parameter update".into()))
                    }
                })
                .and_then(|v| Ok((self.evaluate(ctx, level, &images[l], &v)?, v)));
                let (next_ev, next_p) = match next {
                    Ok(x) => x,
                    Err(e) => {
                        result.aborted = Some(e.to_string());
                        result.p = p;
                        break 'levels;
                    }
                };
                p = next_p;
                ev = next_ev;
                if cfg.cost == CostFunction::Ssd {
                    c += &out.dc;
                }
                let cost = self.cost(ctx, &ev, &c);
                result.iteration_seconds.push(t0.elapsed().as_secs_f64());
                result.shapes.push(ev.shape.scaled(1.0 / g));
                result.costs.push(cost);
                result.levels.push(l);
                if out.fallback {
                    result.newton_fallbacks.push(result.costs.len() - 1);
                }
                let norm = out.dp.norm_squared() + out.dq.as_ref().map_or(0.0, |q| q.norm_squared());
                prev.dp = out.dp;
                if let Some(dq) = out.dq {
                    prev.dq = dq;
                }
                if norm.sqrt() < cfg.convergence_tol {
                    result.converged = true;
                    break;
                }
            }
            current = ev.shape.scaled(1.0 / g);
            result.p = p;
            result.c = match cfg.cost {
                CostFunction::Ssd => ctx.model_coords(&c),
                CostFunction::ProjectOut => ctx.model_coords(&ctx.q.tr_mul(&(&ev.i - &ctx.mean))),
            };
        }
        Ok(result)
    }
}

/// One-shot fit; prefer [`Fitter`] when fitting many images.
pub fn fit(bundle: &AamBundle, image: &Raster, init: &Shape, config: &FitConfig) -> Result<FitResult> {
    Fitter::new(bundle, config)?.fit(image, init)
}
