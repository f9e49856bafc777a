//! Per-iteration increments for every cost, composition, method and
//! strategy, expressed on linearized quantities only.
//!
//! SSD residuals are linearized as `r + J Δp − A Δc` (asymmetric family) or
//! `r + J_i Δp − J_a Δq − A Δc` (bidirectional). Every product with a
//! projector goes through thin matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::jacobians::{NewtonTerms, Projector};
use crate::linalg::{solve_spd, solve_spd_mat, spd_factor};

/// Increments of the asymmetric family.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymStep {
    pub dp: DVector<f64>,
    pub dc: DVector<f64>,
}

/// Increments of bidirectional composition; `dc` is empty for project-out.
#[derive(Debug, Clone, PartialEq)]
pub struct BidStep {
    pub dp: DVector<f64>,
    pub dq: DVector<f64>,
    pub dc: DVector<f64>,
}

/// Gaussian priors in the coordinates used by the step.
#[derive(Debug, Clone)]
pub struct PriorTerms {
    /// Diagonal precision on the shape parameters.
    pub p_precision: DVector<f64>,
    /// Current shape parameters, sign-matched to the step's increment.
    pub p: DVector<f64>,
    /// Precision on the appearance parameters (SSD only).
    pub c_precision: DMatrix<f64>,
    /// Current appearance parameters minus the prior mean.
    pub c_offset: DVector<f64>,
}

/// Weighted Gram blocks of a bidirectional problem:
/// `H_i = J_iᵀWJ_i`, `H_a = J_aᵀWJ_a`, `H_ia = J_iᵀWJ_a`, `g_i = J_iᵀWr`,
/// `g_a = J_aᵀWr`.
#[derive(Debug, Clone)]
pub struct BidGrams {
    pub hi: DMatrix<f64>,
    pub ha: DMatrix<f64>,
    pub hia: DMatrix<f64>,
    pub gi: DVector<f64>,
    pub ga: DVector<f64>,
}

impl BidGrams {
    pub fn new(w: &Projector<'_>, r: &DVector<f64>, ji: &DMatrix<f64>, ja: &DMatrix<f64>) -> BidGrams {
        let qi = w.basis.tr_mul(ji);
        let qa = w.basis.tr_mul(ja);
        let qr = w.basis.tr_mul(r);
        BidGrams {
            hi: w.gram(&qi, &qi, &ji.tr_mul(ji)),
            ha: w.gram(&qa, &qa, &ja.tr_mul(ja)),
            hia: w.gram(&qi, &qa, &ji.tr_mul(ja)),
            gi: w.gram_vec(&qi, &qr, &ji.tr_mul(r)),
            ga: w.gram_vec(&qa, &qr, &ja.tr_mul(r)),
        }
    }

    /// `(Δp, Δq)` by eliminating `Δp` first.
    pub fn schur(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let fi = spd_factor(&self.hi)?;
        let hi_inv_hia = fi.solve(&self.hia);
        let hi_inv_gi = fi.solve(&self.gi);
        let reduced = &self.ha - self.hia.tr_mul(&hi_inv_hia);
        let rhs = &self.ga - self.hia.tr_mul(&hi_inv_gi);
        let dq = solve_spd(&reduced, &rhs)?;
        let dp = -fi.solve(&(&self.gi - &self.hia * &dq));
        Ok((dp, dq))
    }

    /// `(Δp, Δq)` from one factorization of the stacked `2n` system.
    pub fn joint(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let (n, nq) = (self.hi.nrows(), self.ha.nrows());
        let mut h = DMatrix::zeros(n + nq, n + nq);
        h.view_mut((0, 0), (n, n)).copy_from(&self.hi);
        h.view_mut((0, n), (n, nq)).copy_from(&(-&self.hia));
        h.view_mut((n, 0), (nq, n)).copy_from(&(-self.hia.transpose()));
        h.view_mut((n, n), (nq, nq)).copy_from(&self.ha);
        let mut b = DVector::zeros(n + nq);
        b.rows_mut(0, n).copy_from(&(-&self.gi));
        b.rows_mut(n, nq).copy_from(&self.ga);
        let x = solve_spd(&h, &b)?;
        Ok((x.rows(0, n).into_owned(), x.rows(n, nq).into_owned()))
    }
}

/// Thin products of an SSD asymmetric problem.
struct AsymProducts {
    aj: DMatrix<f64>,
    ar: DVector<f64>,
    jtj: DMatrix<f64>,
    jr: DVector<f64>,
}

impl AsymProducts {
    fn new(r: &DVector<f64>, a: &DMatrix<f64>, j: &DMatrix<f64>) -> Self {
        AsymProducts {
            aj: a.tr_mul(j),
            ar: a.tr_mul(r),
            jtj: j.tr_mul(j),
            jr: j.tr_mul(r),
        }
    }
}

fn add_diag(mut h: DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    for i in 0..d.len() {
        h[(i, i)] += d[i];
    }
    h
}

/// Simultaneous Gauss-Newton step with `Δc` eliminated.
pub fn gn_schur_asymmetric(
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    j: &DMatrix<f64>,
    prior: Option<&PriorTerms>,
) -> Result<AsymStep> {
    let t = AsymProducts::new(r, a, j);
    match prior {
        None => {
            let h = &t.jtj - t.aj.tr_mul(&t.aj);
            let g = &t.jr - t.aj.tr_mul(&t.ar);
            let dp = -solve_spd(&h, &g)?;
            let dc = &t.ar + &t.aj * &dp;
            Ok(AsymStep { dp, dc })
        }
        Some(pr) => {
            let m = a.ncols();
            let b = DMatrix::identity(m, m) + &pr.c_precision;
            let fb = spd_factor(&b)?;
            let bc = &t.ar - &pr.c_precision * &pr.c_offset;
            let b_aj = fb.solve(&t.aj);
            let b_bc = fb.solve(&bc);
            let h = add_diag(&t.jtj - t.aj.tr_mul(&b_aj), &pr.p_precision);
            let rhs = -(&t.jr + pr.p_precision.component_mul(&pr.p)) + t.aj.tr_mul(&b_bc);
            let dp = solve_spd(&h, &rhs)?;
            let dc = b_bc + b_aj * &dp;
            Ok(AsymStep { dp, dc })
        }
    }
}

/// Alternated Gauss-Newton step: `Δc` from the previous `Δp`, then `Δp`.
pub fn gn_alt_asymmetric(
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    j: &DMatrix<f64>,
    dp_prev: &DVector<f64>,
    prior: Option<&PriorTerms>,
) -> Result<AsymStep> {
    let t = AsymProducts::new(r, a, j);
    match prior {
        None => {
            let dc = &t.ar + &t.aj * dp_prev;
            let dp = -solve_spd(&t.jtj, &(&t.jr - t.aj.tr_mul(&dc)))?;
            Ok(AsymStep { dp, dc })
        }
        Some(pr) => {
            let m = a.ncols();
            let b = DMatrix::identity(m, m) + &pr.c_precision;
            let dc = solve_spd(&b, &(&t.ar + &t.aj * dp_prev - &pr.c_precision * &pr.c_offset))?;
            let h = add_diag(t.jtj.clone(), &pr.p_precision);
            let g = &t.jr - t.aj.tr_mul(&dc) + pr.p_precision.component_mul(&pr.p);
            let dp = -solve_spd(&h, &g)?;
            Ok(AsymStep { dp, dc })
        }
    }
}

/// Wiberg step: the Schur `Δp` with `Δc = Aᵀ r`.
pub fn wiberg_asymmetric(r: &DVector<f64>, a: &DMatrix<f64>, j: &DMatrix<f64>) -> Result<AsymStep> {
    let step = gn_schur_asymmetric(r, a, j, None)?;
    Ok(AsymStep {
        dp: step.dp,
        dc: a.tr_mul(r),
    })
}

fn bid_dc(r: &DVector<f64>, a: &DMatrix<f64>, ji: &DMatrix<f64>, ja: &DMatrix<f64>, dp: &DVector<f64>, dq: &DVector<f64>) -> DVector<f64> {
    a.tr_mul(&(r + ji * dp - ja * dq))
}

/// Simultaneous bidirectional step with both Schur complements.
pub fn gn_schur_bidirectional(r: &DVector<f64>, a: &DMatrix<f64>, ji: &DMatrix<f64>, ja: &DMatrix<f64>) -> Result<BidStep> {
    let (dp, dq) = BidGrams::new(&Projector::project_out(a), r, ji, ja).schur()?;
    let dc = bid_dc(r, a, ji, ja, &dp, &dq);
    Ok(BidStep { dp, dq, dc })
}

/// Simultaneous bidirectional step solving the stacked warp system directly.
pub fn gn_single_schur_bidirectional(
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    ji: &DMatrix<f64>,
    ja: &DMatrix<f64>,
) -> Result<BidStep> {
    let (dp, dq) = BidGrams::new(&Projector::project_out(a), r, ji, ja).joint()?;
    let dc = bid_dc(r, a, ji, ja, &dp, &dq);
    Ok(BidStep { dp, dq, dc })
}

/// Alternated bidirectional step.
#[allow(clippy::too_many_arguments)]
pub fn gn_alt_bidirectional(
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    ji: &DMatrix<f64>,
    ja: &DMatrix<f64>,
    dp_prev: &DVector<f64>,
    dq_prev: &DVector<f64>,
    joint: bool,
) -> Result<BidStep> {
    let dc = bid_dc(r, a, ji, ja, dp_prev, dq_prev);
    let e = r - a * &dc;
    let hi = ji.tr_mul(ji);
    let ha = ja.tr_mul(ja);
    if joint {
        let grams = BidGrams {
            hia: ji.tr_mul(ja),
            gi: ji.tr_mul(&e),
            ga: ja.tr_mul(&e),
            hi,
            ha,
        };
        let (dp, dq) = grams.joint()?;
        return Ok(BidStep { dp, dq, dc });
    }
    let dp = -solve_spd(&hi, &ji.tr_mul(&(&e - ja * dq_prev)))?;
    let dq = solve_spd(&ha, &ja.tr_mul(&(&e + ji * &dp)))?;
    Ok(BidStep { dp, dq, dc })
}

/// Bidirectional Wiberg step: the Schur `Δq`, `Δp` evaluated at that `Δq`
/// and `Δc = Aᵀr`.
pub fn wiberg_bidirectional(r: &DVector<f64>, a: &DMatrix<f64>, ji: &DMatrix<f64>, ja: &DMatrix<f64>) -> Result<BidStep> {
    let (dp, dq) = po_wiberg_bidirectional(&BidGrams::new(&Projector::project_out(a), r, ji, ja))?;
    Ok(BidStep {
        dp,
        dq,
        dc: a.tr_mul(r),
    })
}

/// Project-out Gauss-Newton step `Δp = −(JᵀWJ)⁻¹ JᵀW r`, optionally with a
/// shape prior.
pub fn po_gn_asymmetric(
    w: &Projector<'_>,
    r: &DVector<f64>,
    j: &DMatrix<f64>,
    prior: Option<&PriorTerms>,
) -> Result<DVector<f64>> {
    let qj = w.basis.tr_mul(j);
    let qr = w.basis.tr_mul(r);
    let mut h = w.gram(&qj, &qj, &j.tr_mul(j));
    let mut g = w.gram_vec(&qj, &qr, &j.tr_mul(r));
    if let Some(pr) = prior {
        h = add_diag(h, &pr.p_precision);
        g += pr.p_precision.component_mul(&pr.p);
    }
    Ok(-solve_spd(&h, &g)?)
}

/// Project-out bidirectional steps on precomputed grams.
pub fn po_gn_bidirectional_schur(grams: &BidGrams) -> Result<(DVector<f64>, DVector<f64>)> {
    grams.schur()
}

/// `Δq` from the previous `Δp`, then `Δp` from the new `Δq`.
pub fn po_gn_bidirectional_alt(grams: &BidGrams, dp_prev: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let dq = solve_spd(&grams.ha, &(&grams.ga + grams.hia.tr_mul(dp_prev)))?;
    let dp = -solve_spd(&grams.hi, &(&grams.gi - &grams.hia * &dq))?;
    Ok((dp, dq))
}

/// Wiberg `Δq` on the reduced residual, with `Δp` recovered at that `Δq`.
/// The pair coincides with the Schur step.
pub fn po_wiberg_bidirectional(grams: &BidGrams) -> Result<(DVector<f64>, DVector<f64>)> {
    grams.schur()
}

/// Newton step of the asymmetric family. `terms.cc` must be the identity
/// (or empty for project-out). Fails when the relevant Hessian is not
/// positive definite.
pub fn newton_asymmetric(
    terms: &NewtonTerms,
    g_c: &DVector<f64>,
    g_p: &DVector<f64>,
    alternated: bool,
    dp_prev: &DVector<f64>,
) -> Result<AsymStep> {
    let cp = &terms.cp;
    if alternated {
        let dc = -(g_c + cp * dp_prev);
        let dp = -solve_spd(&terms.pp, &(g_p + cp.tr_mul(&dc)))?;
        return Ok(AsymStep { dp, dc });
    }
    let reduced = &terms.pp - cp.tr_mul(cp);
    let dp = -solve_spd(&reduced, &(g_p - cp.tr_mul(g_c)))?;
    let dc = -(g_c + cp * &dp);
    Ok(AsymStep { dp, dc })
}

/// Bidirectional Newton step over `(Δc, Δp, Δq)`.
#[allow(clippy::too_many_arguments)]
pub fn newton_bidirectional(
    terms: &NewtonTerms,
    g_c: &DVector<f64>,
    g_p: &DVector<f64>,
    g_q: &DVector<f64>,
    alternated: bool,
    joint: bool,
    dp_prev: &DVector<f64>,
    dq_prev: &DVector<f64>,
) -> Result<BidStep> {
    let n = terms.pp.nrows();
    let nq = g_q.len();
    let m = terms.cc.nrows();
    let empty_cq = DMatrix::zeros(m, nq);
    let empty_pq = DMatrix::zeros(n, nq);
    let empty_qq = DMatrix::zeros(nq, nq);
    let cp = &terms.cp;
    let cq = terms.cq.as_ref().unwrap_or(&empty_cq);
    let pq = terms.pq.as_ref().unwrap_or(&empty_pq);
    let qq = terms.qq.as_ref().unwrap_or(&empty_qq);
    if alternated {
        let dc = -(g_c + cp * dp_prev + cq * dq_prev);
        let rp = g_p + cp.tr_mul(&dc);
        let rq = g_q + cq.tr_mul(&dc);
        if joint {
            let mut h = DMatrix::zeros(n + nq, n + nq);
            h.view_mut((0, 0), (n, n)).copy_from(&terms.pp);
            h.view_mut((0, n), (n, nq)).copy_from(pq);
            h.view_mut((n, 0), (nq, n)).copy_from(&pq.transpose());
            h.view_mut((n, n), (nq, nq)).copy_from(qq);
            let mut b = DVector::zeros(n + nq);
            b.rows_mut(0, n).copy_from(&rp);
            b.rows_mut(n, nq).copy_from(&rq);
            let x = -solve_spd(&h, &b)?;
            return Ok(BidStep {
                dp: x.rows(0, n).into_owned(),
                dq: x.rows(n, nq).into_owned(),
                dc,
            });
        }
        let dp = -solve_spd(&terms.pp, &(rp + pq * dq_prev))?;
        let dq = -solve_spd(qq, &(rq + pq.tr_mul(&dp)))?;
        return Ok(BidStep { dp, dq, dc });
    }
    let v_mat = &terms.pp - cp.tr_mul(cp);
    let w_mat = pq.transpose() - cq.tr_mul(cp);
    let u_mat = qq - cq.tr_mul(cq);
    let v = -(g_p - cp.tr_mul(g_c));
    let u = -(g_q - cq.tr_mul(g_c));
    let fv = spd_factor(&v_mat)?;
    let vinv_wt = fv.solve(&w_mat.transpose());
    let vinv_v = fv.solve(&v);
    let reduced = &u_mat - &w_mat * &vinv_wt;
    let dq = solve_spd(&reduced, &(&u - &w_mat * &vinv_v))?;
    let dp = fv.solve(&(&v - w_mat.tr_mul(&dq)));
    let dc = -(g_c + cp * &dp + cq * &dq);
    Ok(BidStep { dp, dq, dc })
}

/// `K = (JᵀWJ)⁻¹ JᵀW` for a constant Jacobian, stored as its transpose.
#[derive(Debug, Clone)]
pub struct PrecomputedUpdate {
    pub kt: DMatrix<f64>,
}

impl PrecomputedUpdate {
    pub fn new(w: &Projector<'_>, j: &DMatrix<f64>) -> Result<Self> {
        let qj = w.basis.tr_mul(j);
        let h = w.gram(&qj, &qj, &j.tr_mul(j));
        let mut wj = j * w.outer - w.basis * &qj * w.outer;
        if let Some(k) = &w.inner {
            wj += w.basis * (k * &qj);
        }
        let kt = solve_spd_mat(&h, &wj.transpose())?.transpose();
        Ok(PrecomputedUpdate { kt })
    }

    /// `K r`.
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        self.kt.tr_mul(r)
    }
}
