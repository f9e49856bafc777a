//! Steepest-descent images, Gauss-Newton Hessians and Newton Hessian blocks.
//!
//! Gradient fields are dense vectors with one entry per (pixel, channel)
//! row, laid out like the warped appearance vectors.

use nalgebra::{DMatrix, DVector};

use crate::error::{AamError, Result};
use crate::warp::{ReferenceFrame, WarpJacobian};

/// First derivatives of a field along the reference-frame axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

impl Gradient {
    pub fn zeros(rows: usize) -> Self {
        Gradient {
            x: DVector::zeros(rows),
            y: DVector::zeros(rows),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Gradient {
        Gradient {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

/// Second derivatives of a field along the reference-frame axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivatives {
    pub xx: DVector<f64>,
    pub xy: DVector<f64>,
    pub yy: DVector<f64>,
}

impl SecondDerivatives {
    pub fn zeros(rows: usize) -> Self {
        SecondDerivatives {
            xx: DVector::zeros(rows),
            xy: DVector::zeros(rows),
            yy: DVector::zeros(rows),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &SecondDerivatives, b: f64) -> SecondDerivatives {
        SecondDerivatives {
            xx: &self.xx * a + &other.xx * b,
            xy: &self.xy * a + &other.xy * b,
            yy: &self.yy * a + &other.yy * b,
        }
    }

    pub fn select(&self, rows: &[usize]) -> SecondDerivatives {
        SecondDerivatives {
            xx: self.xx.select_rows(rows),
            xy: self.xy.select_rows(rows),
            yy: self.yy.select_rows(rows),
        }
    }
}

/// Central differences on the masked grid, one-sided where only one
/// neighbour is masked and zero where none is.
pub fn image_gradient(v: &DVector<f64>, frame: &ReferenceFrame, channels: usize) -> Result<Gradient> {
    AamError::check_len(frame.n_pixels() * channels, v.len())?;
    let mut g = Gradient::zeros(v.len());
    let diff = |i: usize, lo: Option<usize>, hi: Option<usize>, ch: usize| -> f64 {
        match (lo, hi) {
            (Some(l), Some(h)) => 0.5 * (v[h * channels + ch] - v[l * channels + ch]),
            (None, Some(h)) => v[h * channels + ch] - v[i * channels + ch],
            (Some(l), None) => v[i * channels + ch] - v[l * channels + ch],
            (None, None) => 0.0,
        }
    };
    for (i, &(x, y)) in frame.pixels.iter().enumerate() {
        let left = if x > 0 { frame.index_of(x - 1, y) } else { None };
        let right = if x + 1 < frame.width { frame.index_of(x + 1, y) } else { None };
        let up = if y > 0 { frame.index_of(x, y - 1) } else { None };
        let down = if y + 1 < frame.height { frame.index_of(x, y + 1) } else { None };
        for ch in 0..channels {
            g.x[i * channels + ch] = diff(i, left, right, ch);
            g.y[i * channels + ch] = diff(i, up, down, ch);
        }
    }
    Ok(g)
}

/// Second derivatives by applying [`image_gradient`] twice; the mixed term
/// is symmetrized.
pub fn image_hessian(v: &DVector<f64>, frame: &ReferenceFrame, channels: usize) -> Result<SecondDerivatives> {
    let g = image_gradient(v, frame, channels)?;
    let gx = image_gradient(&g.x, frame, channels)?;
    let gy = image_gradient(&g.y, frame, channels)?;
    Ok(SecondDerivatives {
        xx: gx.x,
        xy: (gx.y + &gy.x) * 0.5,
        yy: gy.y,
    })
}

/// `α ∇i + β ∇a`.
pub fn blend(alpha: f64, image: &Gradient, beta: f64, appearance: &Gradient) -> Gradient {
    Gradient {
        x: &image.x * alpha + &appearance.x * beta,
        y: &image.y * alpha + &appearance.y * beta,
    }
}

/// Which field a steepest-descent matrix was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Flavor {
    Image,
    Appearance,
    Blended { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteepestDescent {
    pub j: DMatrix<f64>,
    pub flavor: Flavor,
}

/// Contracts a gradient field with the warp Jacobian: row `(pixel, ch)`,
/// column `m` is `gx·dW_x[pixel, m] + gy·dW_y[pixel, m]`.
pub fn steepest_descent_matrix(grad: &Gradient, wj: &WarpJacobian, channels: usize) -> Result<DMatrix<f64>> {
    let pixels = wj.dx.nrows();
    AamError::check_len(pixels * channels, grad.x.len())?;
    AamError::check_len(pixels * channels, grad.y.len())?;
    let np = wj.n_params();
    let mut j = DMatrix::zeros(pixels * channels, np);
    for m in 0..np {
        let dx = wj.dx.column(m);
        let dy = wj.dy.column(m);
        let mut col = j.column_mut(m);
        for p in 0..pixels {
            for ch in 0..channels {
                let row = p * channels + ch;
                col[row] = grad.x[row] * dx[p] + grad.y[row] * dy[p];
            }
        }
    }
    Ok(j)
}

pub fn steepest_descent(grad: &Gradient, wj: &WarpJacobian, channels: usize, flavor: Flavor) -> Result<SteepestDescent> {
    Ok(SteepestDescent {
        j: steepest_descent_matrix(grad, wj, channels)?,
        flavor,
    })
}

/// Weighting operator `W = Q K Qᵀ + w (I − Q Qᵀ)` with orthonormal `Q`.
///
/// `K = 0, w = 1` gives the project-out operator; the Bayesian variant uses
/// `K = ρ R D⁻¹ Rᵀ` and `w = (1 − ρ)/σ²`.
#[derive(Debug, Clone)]
pub struct Projector<'a> {
    pub basis: &'a DMatrix<f64>,
    pub inner: Option<DMatrix<f64>>,
    pub outer: f64,
}

impl<'a> Projector<'a> {
    pub fn project_out(basis: &'a DMatrix<f64>) -> Self {
        Projector {
            basis,
            inner: None,
            outer: 1.0,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.basis.tr_mul(x);
        let mut out = (x - self.basis * &u) * self.outer;
        if let Some(k) = &self.inner {
            out += self.basis * (k * u);
        }
        out
    }

    /// `Xᵀ W Y` from the thin products `QᵀX`, `QᵀY` and `XᵀY`.
    pub fn gram(&self, qx: &DMatrix<f64>, qy: &DMatrix<f64>, xy: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = (xy - qx.tr_mul(qy)) * self.outer;
        if let Some(k) = &self.inner {
            out += qx.tr_mul(&(k * qy));
        }
        out
    }

    /// `Xᵀ W y` from `QᵀX`, `Qᵀy` and `Xᵀy`.
    pub fn gram_vec(&self, qx: &DMatrix<f64>, qy: &DVector<f64>, xy: &DVector<f64>) -> DVector<f64> {
        let mut out = (xy - qx.tr_mul(qy)) * self.outer;
        if let Some(k) = &self.inner {
            out += qx.tr_mul(&(k * qy));
        }
        out
    }
}

/// `JᵀJ`, or `Jᵀ W J` through thin products when a projector is given.
pub fn gn_hessian(j: &DMatrix<f64>, projector: Option<&Projector<'_>>) -> DMatrix<f64> {
    let jtj = j.tr_mul(j);
    match projector {
        None => jtj,
        Some(w) => {
            let qj = w.basis.tr_mul(j);
            w.gram(&qj, &qj, &jtj)
        }
    }
}

/// `Σ_rows w · (∂W/∂Δp)ᵀ ∇²f (∂W/∂Δp)` for the per-row weights `w`.
pub fn second_order_term(
    weights: &DVector<f64>,
    hess: &SecondDerivatives,
    wj: &WarpJacobian,
    channels: usize,
) -> DMatrix<f64> {
    let pixels = wj.dx.nrows();
    let mut wxx = DVector::zeros(pixels);
    let mut wxy = DVector::zeros(pixels);
    let mut wyy = DVector::zeros(pixels);
    for p in 0..pixels {
        for ch in 0..channels {
            let row = p * channels + ch;
            wxx[p] += weights[row] * hess.xx[row];
            wxy[p] += weights[row] * hess.xy[row];
            wyy[p] += weights[row] * hess.yy[row];
        }
    }
    let scale_rows = |m: &DMatrix<f64>, w: &DVector<f64>| {
        let mut out = m.clone();
        for (p, mut row) in out.row_iter_mut().enumerate() {
            row *= w[p];
        }
        out
    };
    let cross = wj.dx.tr_mul(&scale_rows(&wj.dy, &wxy));
    wj.dx.tr_mul(&scale_rows(&wj.dx, &wxx)) + &cross + cross.transpose() + wj.dy.tr_mul(&scale_rows(&wj.dy, &wyy))
}

/// `J_Aᵀ r`: entry `(j, m)` is `Σ_rows r · (∇a_j · ∂W/∂Δp_m)`, where the
/// columns of `gx`, `gy` hold the gradient fields of the basis vectors.
pub fn basis_residual_contraction(
    r: &DVector<f64>,
    gx: &DMatrix<f64>,
    gy: &DMatrix<f64>,
    wj: &WarpJacobian,
    channels: usize,
) -> DMatrix<f64> {
    let pixels = wj.dx.nrows();
    let m = gx.ncols();
    let mut wx = DMatrix::zeros(pixels, m);
    let mut wy = DMatrix::zeros(pixels, m);
    for j in 0..m {
        for p in 0..pixels {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for ch in 0..channels {
                let row = p * channels + ch;
                sx += r[row] * gx[(row, j)];
                sy += r[row] * gy[(row, j)];
            }
            wx[(p, j)] = sx;
            wy[(p, j)] = sy;
        }
    }
    wx.tr_mul(&wj.dx) + wy.tr_mul(&wj.dy)
}

/// Hessian blocks of the data term. The `c` blocks are empty for
/// project-out costs; the `q` blocks exist only for bidirectional
/// composition.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonTerms {
    pub cc: DMatrix<f64>,
    pub cp: DMatrix<f64>,
    pub pp: DMatrix<f64>,
    pub cq: Option<DMatrix<f64>>,
    pub pq: Option<DMatrix<f64>>,
    pub qq: Option<DMatrix<f64>>,
}

impl NewtonTerms {
    /// Full Hessian ordered `(Δc, Δp[, Δq])`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let m = self.cc.nrows();
        let n = self.pp.nrows();
        let nq = self.qq.as_ref().map_or(0, |q| q.nrows());
        let dim = m + n + nq;
        let mut h = DMatrix::zeros(dim, dim);
        h.view_mut((0, 0), (m, m)).copy_from(&self.cc);
        h.view_mut((0, m), (m, n)).copy_from(&self.cp);
        h.view_mut((m, 0), (n, m)).copy_from(&self.cp.transpose());
        h.view_mut((m, m), (n, n)).copy_from(&self.pp);
        if let (Some(cq), Some(pq), Some(qq)) = (&self.cq, &self.pq, &self.qq) {
            h.view_mut((0, m + n), (m, nq)).copy_from(cq);
            h.view_mut((m + n, 0), (nq, m)).copy_from(&cq.transpose());
            h.view_mut((m, m + n), (n, nq)).copy_from(pq);
            h.view_mut((m + n, m), (nq, n)).copy_from(&pq.transpose());
            h.view_mut((m + n, m + n), (nq, nq)).copy_from(qq);
        }
        h
    }
}

/// Inputs shared by the SSD Newton term builders. Gradients and second
/// derivatives are evaluated at the current linearization point.
pub struct NewtonInput<'a> {
    pub residual: &'a DVector<f64>,
    pub basis: &'a DMatrix<f64>,
    pub basis_grad_x: &'a DMatrix<f64>,
    pub basis_grad_y: &'a DMatrix<f64>,
    pub image_hessian: &'a SecondDerivatives,
    pub appearance_hessian: &'a SecondDerivatives,
    pub warp: &'a WarpJacobian,
    pub channels: usize,
}

/// Blocks for `r = i(x + αδ) − (ā + A(c + Δc))(x − βδ)`, where `jt` is the
/// blended steepest-descent matrix.
pub fn newton_terms_asymmetric(input: &NewtonInput<'_>, jt: &DMatrix<f64>, alpha: f64, beta: f64) -> NewtonTerms {
    let m = input.basis.ncols();
    let r = input.residual;
    let ja_r = basis_residual_contraction(r, input.basis_grad_x, input.basis_grad_y, input.warp, input.channels);
    let cp = -input.basis.tr_mul(jt) + ja_r * beta;
    let field = input
        .image_hessian
        .combine(alpha * alpha, input.appearance_hessian, -(beta * beta));
    let pp = jt.tr_mul(jt) + second_order_term(r, &field, input.warp, input.channels);
    NewtonTerms {
        cc: DMatrix::identity(m, m),
        cp,
        pp,
        cq: None,
        pq: None,
        qq: None,
    }
}

/// Blocks for `r = i(x + δp) − (ā + A(c + Δc))(x + δq)`.
pub fn newton_terms_bidirectional(input: &NewtonInput<'_>, ji: &DMatrix<f64>, ja: &DMatrix<f64>) -> NewtonTerms {
    let m = input.basis.ncols();
    let r = input.residual;
    let ja_r = basis_residual_contraction(r, input.basis_grad_x, input.basis_grad_y, input.warp, input.channels);
    NewtonTerms {
        cc: DMatrix::identity(m, m),
        cp: -input.basis.tr_mul(ji),
        pp: ji.tr_mul(ji) + second_order_term(r, input.image_hessian, input.warp, input.channels),
        cq: Some(input.basis.tr_mul(ja) - ja_r),
        pq: Some(-ji.tr_mul(ja)),
        qq: Some(ja.tr_mul(ja) - second_order_term(r, input.appearance_hessian, input.warp, input.channels)),
    }
}

/// Project-out Newton blocks for `½ rᵀ W r` with
/// `r = i(x + αδ) − ā(x − βδ)`; `wr` is `W r`.
pub fn po_newton_terms_asymmetric(
    projector: &Projector<'_>,
    wr: &DVector<f64>,
    jt: &DMatrix<f64>,
    image_hessian: &SecondDerivatives,
    template_hessian: &SecondDerivatives,
    warp: &WarpJacobian,
    channels: usize,
    alpha: f64,
    beta: f64,
) -> NewtonTerms {
    let field = image_hessian.combine(alpha * alpha, template_hessian, -(beta * beta));
    NewtonTerms {
        cc: DMatrix::zeros(0, 0),
        cp: DMatrix::zeros(0, jt.ncols()),
        pp: gn_hessian(jt, Some(projector)) + second_order_term(wr, &field, warp, channels),
        cq: None,
        pq: None,
        qq: None,
    }
}

/// Project-out Newton blocks for `r = i(x + δp) − ā(x + δq)`.
#[allow(clippy::too_many_arguments)]
pub fn po_newton_terms_bidirectional(
    projector: &Projector<'_>,
    wr: &DVector<f64>,
    ji: &DMatrix<f64>,
    ja: &DMatrix<f64>,
    image_hessian: &SecondDerivatives,
    template_hessian: &SecondDerivatives,
    warp: &WarpJacobian,
    channels: usize,
) -> NewtonTerms {
    let qi = projector.basis.tr_mul(ji);
    let qa = projector.basis.tr_mul(ja);
    let n = ji.ncols();
    NewtonTerms {
        cc: DMatrix::zeros(0, 0),
        cp: DMatrix::zeros(0, n),
        pp: projector.gram(&qi, &qi, &ji.tr_mul(ji)) + second_order_term(wr, image_hessian, warp, channels),
        cq: Some(DMatrix::zeros(0, ja.ncols())),
        pq: Some(-projector.gram(&qi, &qa, &ji.tr_mul(ja))),
        qq: Some(projector.gram(&qa, &qa, &ja.tr_mul(ja)) - second_order_term(wr, template_hessian, warp, channels)),
    }
}
