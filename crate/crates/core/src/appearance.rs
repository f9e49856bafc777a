//! Linear appearance model and the project-out / Bayesian project-out
//! operators, always applied through thin products.

use nalgebra::{DMatrix, DVector};

use crate::error::{AamError, Result};
use crate::linalg;
use crate::shape::{discarded_mean, retained_ratio, truncation, Components, PcaSummary};

/// Absolute lower bound on the image noise variance.
pub const MIN_NOISE: f64 = 1e-12;

/// `a = ā + A c` with orthonormal `A`.
///
/// `mean` is the point of the affine subspace closest to the origin, so that
/// `Aᵀ mean = 0`. The training mean itself sits at `prior_mean` in parameter
/// space and is available through [`AppearanceModel::data_mean`].
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub image_noise: f64,
    pub prior_mean: DVector<f64>,
    pub channels: usize,
}

impl AppearanceModel {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn instance(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        AamError::check_len(self.n_components(), c.len())?;
        Ok(&self.mean + &self.basis * c)
    }

    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        AamError::check_len(self.len(), v.len())?;
        Ok(self.basis.tr_mul(&(v - &self.mean)))
    }

    /// Mean of the training vectors.
    pub fn data_mean(&self) -> DVector<f64> {
        &self.mean + &self.basis * &self.prior_mean
    }

    /// `(I − A Aᵀ) r`.
    pub fn project_out(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        AamError::check_len(self.len(), r.len())?;
        Ok(r - &self.basis * self.basis.tr_mul(r))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let m = self.n_components();
        if self.basis.nrows() != n || self.eigenvalues.len() != m || self.prior_mean.len() != m {
            return Err(AamError::Invariant("appearance model dimensions disagree".into()));
        }
        if self.channels == 0 || n % self.channels != 0 {
            return Err(AamError::Invariant("appearance length not a multiple of channels".into()));
        }
        if linalg::identity_defect(&self.basis.tr_mul(&self.basis)) > 1e-10 {
            return Err(AamError::Invariant("appearance basis is not orthonormal".into()));
        }
        if self.basis.tr_mul(&self.mean).amax() > 1e-8 * (1.0 + self.mean.norm()) {
            return Err(AamError::Invariant("appearance mean not orthogonal to basis".into()));
        }
        if self.eigenvalues.iter().any(|v| !(*v > 0.0)) {
            return Err(AamError::Invariant("appearance eigenvalues must be positive".into()));
        }
        if self.eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(AamError::Invariant("appearance eigenvalues not sorted".into()));
        }
        if !(self.image_noise > 0.0) {
            return Err(AamError::Invariant("image noise must be positive".into()));
        }
        Ok(())
    }
}

/// PCA appearance model from warped training vectors.
pub fn build_appearance_model(
    vectors: &[DVector<f64>],
    components: Components,
    channels: usize,
) -> Result<(AppearanceModel, PcaSummary)> {
    if vectors.len() < 2 {
        return Err(AamError::InsufficientData(
            "appearance model needs at least two vectors".into(),
        ));
    }
    let len = vectors[0].len();
    for v in vectors {
        AamError::check_len(len, v.len())?;
    }
    let (data_mean, eigenvalues, vectors_pc) = linalg::pca(vectors);
    let (k, capped) = truncation(&eigenvalues, components)?;
    let basis = vectors_pc.columns(0, k).into_owned();
    let top = eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let noise = if k < eigenvalues.len() {
        discarded_mean(&eigenvalues, k)
    } else {
        0.0
    };
    let image_noise = noise.max(1e-8 * top).max(MIN_NOISE);
    let prior_mean = basis.tr_mul(&data_mean);
    let mean = &data_mean - &basis * &prior_mean;
    let model = AppearanceModel {
        mean,
        basis,
        eigenvalues: eigenvalues.rows(0, k).into_owned(),
        image_noise,
        prior_mean,
        channels,
    };
    let summary = PcaSummary {
        available: eigenvalues.len(),
        retained: k,
        capped,
        retained_ratio: retained_ratio(&eigenvalues, k),
    };
    Ok((model, summary))
}

/// Free-function form of [`AppearanceModel::project_out`].
pub fn project_out(model: &AppearanceModel, r: &DVector<f64>) -> Result<DVector<f64>> {
    model.project_out(r)
}

/// `Q_ρ = ρ A D⁻¹ Aᵀ + ((1 − ρ)/σ²)(I − A Aᵀ)` with `D = Σ + σ² I`.
#[derive(Debug, Clone)]
pub struct BpoOperator<'a> {
    pub model: &'a AppearanceModel,
    pub rho: f64,
    pub d: DVector<f64>,
}

impl<'a> BpoOperator<'a> {
    pub fn new(model: &'a AppearanceModel, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        let d = model.eigenvalues.map(|e| e + model.image_noise);
        Ok(BpoOperator { model, rho, d })
    }

    /// Weighted vector `Q_ρ r` and cost `rᵀ Q_ρ r`.
    pub fn apply(&self, r: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let a = &self.model.basis;
        AamError::check_len(a.nrows(), r.len())?;
        let u = a.tr_mul(r);
        let proj = r - a * &u;
        let sigma2 = self.model.image_noise;
        let ud = u.component_div(&self.d);
        let cost = self.rho * u.dot(&ud) + (1.0 - self.rho) * (proj.norm_squared() / sigma2);
        let weighted = a * (ud * self.rho) + (proj / sigma2) * (1.0 - self.rho);
        Ok((weighted, cost))
    }
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(AamError::Config(format!("rho {rho} outside [0, 1]")))
    }
}

/// Free-function form of [`BpoOperator::apply`].
pub fn bpo_apply(op: &BpoOperator<'_>, r: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    op.apply(r)
}
