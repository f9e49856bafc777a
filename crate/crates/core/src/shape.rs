//! Point distribution model: landmark shapes, similarity transforms,
//! generalized Procrustes alignment and PCA with a similarity basis.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{AamError, Result};
use crate::linalg;

/// Landmark coordinates stored interleaved as `(x1, y1, ..., xv, yv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    points: DVector<f64>,
}

impl Shape {
    pub fn new(points: DVector<f64>) -> Result<Self> {
        if !points.len().is_multiple_of(2) || points.len() < 6 {
            return Err(AamError::Input(format!(
                "shape needs an even number (>= 6) of coordinates, got {}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(AamError::Input("shape has non-finite coordinates".into()));
        }
        Ok(Shape { points })
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        Shape::new(DVector::from_iterator(
            points.len() * 2,
            points.iter().flat_map(|p| [p[0], p[1]]),
        ))
    }

    pub fn n_points(&self) -> usize {
        self.points.len() / 2
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.points[2 * i], self.points[2 * i + 1]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.n_points()).map(|i| self.point(i)).collect()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.points
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.points
    }

    pub fn centroid(&self) -> [f64; 2] {
        let v = self.n_points() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..self.n_points() {
            sx += self.points[2 * i];
            sy += self.points[2 * i + 1];
        }
        [sx / v, sy / v]
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for [x, y] in self.points() {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Mean of bounding-box width and height.
    pub fn face_size(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bounds();
        0.5 * ((x1 - x0) + (y1 - y0))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Shape {
        let mut p = self.points.clone();
        for i in 0..self.n_points() {
            p[2 * i] += dx;
            p[2 * i + 1] += dy;
        }
        Shape { points: p }
    }

    /// Scales every coordinate about the origin.
    pub fn scaled(&self, f: f64) -> Shape {
        Shape {
            points: &self.points * f,
        }
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> Shape {
        let mut p = self.points.clone();
        for i in 0..self.n_points() {
            let q = t.apply([self.points[2 * i], self.points[2 * i + 1]]);
            p[2 * i] = q[0];
            p[2 * i + 1] = q[1];
        }
        Shape { points: p }
    }

    fn centered_norm(&self) -> f64 {
        let [cx, cy] = self.centroid();
        let mut s = 0.0;
        for [x, y] in self.points() {
            s += (x - cx).powi(2) + (y - cy).powi(2);
        }
        s.sqrt()
    }
}

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix2<f64>,
    pub translation: Vector2<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix2::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: f64, angle: f64, translation: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        SimilarityTransform {
            scale,
            rotation: Matrix2::new(c, -s, s, c),
            translation: Vector2::new(translation[0], translation[1]),
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.rotation * Vector2::new(p[0], p[1]) * self.scale + self.translation;
        [q[0], q[1]]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    /// Least-squares similarity mapping `source` onto `target`.
    pub fn align(source: &Shape, target: &Shape) -> Result<Self> {
        AamError::check_len(source.as_vector().len(), target.as_vector().len())?;
        let [sx, sy] = source.centroid();
        let [tx, ty] = target.centroid();
        let (mut a, mut b, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..source.n_points() {
            let [x, y] = source.point(i);
            let [u, v] = target.point(i);
            let (x, y, u, v) = (x - sx, y - sy, u - tx, v - ty);
            a += x * u + y * v;
            b += x * v - y * u;
            nn += x * x + y * y;
        }
        if nn <= 0.0 {
            return Err(AamError::Degenerate("source shape has zero extent".into()));
        }
        let (a, b) = (a / nn, b / nn);
        let scale = (a * a + b * b).sqrt();
        if scale == 0.0 {
            return Err(AamError::Degenerate("shapes are orthogonal".into()));
        }
        let rotation = Matrix2::new(a / scale, -b / scale, b / scale, a / scale);
        let translation = Vector2::new(tx, ty) - rotation * Vector2::new(sx, sy) * scale;
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }
}

/// Result of generalized Procrustes analysis.
#[derive(Debug, Clone)]
pub struct ProcrustesAlignment {
    pub aligned: Vec<Shape>,
    /// `transforms[i]` maps `aligned[i]` back onto the i-th input shape.
    pub transforms: Vec<SimilarityTransform>,
    pub mean: Shape,
    pub iterations: usize,
    /// Mean change recorded at each iteration.
    pub mean_changes: Vec<f64>,
}

fn normalize_centered(s: &Shape) -> Shape {
    let [cx, cy] = s.centroid();
    let c = s.translated(-cx, -cy);
    let n = c.as_vector().norm();
    c.scaled(1.0 / n)
}

fn rotate_onto(s: &Shape, reference: &Shape) -> Result<Shape> {
    let t = SimilarityTransform::align(s, reference)?;
    let rot = SimilarityTransform {
        scale: 1.0,
        rotation: t.rotation,
        translation: Vector2::zeros(),
    };
    Ok(s.transformed(&rot))
}

pub const PROCRUSTES_MAX_ITERS: usize = 100;
pub const PROCRUSTES_TOL: f64 = 1e-10;

/// Generalized Procrustes analysis.
pub fn procrustes_align(shapes: &[Shape], max_iters: usize, tol: f64) -> Result<ProcrustesAlignment> {
    if shapes.len() < 2 {
        return Err(AamError::InsufficientData(
            "procrustes alignment needs at least two shapes".into(),
        ));
    }
    let len = shapes[0].as_vector().len();
    for s in shapes {
        AamError::check_len(len, s.as_vector().len())?;
        let scale = 1.0 + s.as_vector().amax();
        if s.centered_norm() <= 1e-12 * scale {
            return Err(AamError::Degenerate("shape with all points equal".into()));
        }
    }
    let normalized: Vec<Shape> = shapes.iter().map(normalize_centered).collect();
    // Order-independent reference orientation.
    let mut acc = DVector::zeros(len);
    for s in &normalized {
        acc += s.as_vector();
    }
    let reference = if acc.norm() > 1e-6 * normalized.len() as f64 {
        normalize_centered(&Shape { points: acc })
    } else {
        normalized[0].clone()
    };

    let mut mean = reference.clone();
    let mut changes = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut acc = DVector::zeros(len);
        for s in shapes {
            let t = SimilarityTransform::align(s, &mean)?;
            acc += s.transformed(&t).as_vector();
        }
        let avg = Shape {
            points: acc / shapes.len() as f64,
        };
        let new_mean = rotate_onto(&normalize_centered(&avg), &reference)?;
        let change = (new_mean.as_vector() - mean.as_vector()).norm();
        mean = new_mean;
        changes.push(change);
        if change < tol {
            break;
        }
    }

    let mut aligned = Vec::with_capacity(shapes.len());
    let mut transforms = Vec::with_capacity(shapes.len());
    for s in shapes {
        let t = SimilarityTransform::align(s, &mean)?;
        aligned.push(s.transformed(&t));
        transforms.push(t.inverse());
    }
    Ok(ProcrustesAlignment {
        aligned,
        transforms,
        mean,
        iterations,
        mean_changes: changes,
    })
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Count(usize),
    VarianceRatio(f64),
    All,
}

/// Outcome of a PCA truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaSummary {
    pub available: usize,
    pub retained: usize,
    /// True when a requested count exceeded the available rank.
    pub capped: bool,
    pub retained_ratio: f64,
}

/// Number of leading eigenvalues to keep under `components`.
pub(crate) fn truncation(eigenvalues: &DVector<f64>, components: Components) -> Result<(usize, bool)> {
    let available = eigenvalues.len();
    match components {
        Components::Count(n) => Ok((n.min(available), n > available)),
        Components::All => Ok((available, false)),
        Components::VarianceRatio(r) => {
            if !(r > 0.0 && r <= 1.0) {
                return Err(AamError::Config(format!("variance ratio {r} outside (0, 1]")));
            }
            let total: f64 = eigenvalues.iter().sum();
            let mut cum = 0.0;
            for (i, v) in eigenvalues.iter().enumerate() {
                cum += v;
                if cum > r * total {
                    return Ok((i + 1, false));
                }
            }
            Ok((available, false))
        }
    }
}

pub(crate) fn retained_ratio(eigenvalues: &DVector<f64>, k: usize) -> f64 {
    let total: f64 = eigenvalues.iter().sum();
    if total > 0.0 {
        eigenvalues.iter().take(k).sum::<f64>() / total
    } else {
        1.0
    }
}

/// Mean of discarded eigenvalues, 0 when nothing is discarded.
pub(crate) fn discarded_mean(eigenvalues: &DVector<f64>, k: usize) -> f64 {
    let rest = eigenvalues.len() - k;
    if rest == 0 {
        0.0
    } else {
        eigenvalues.iter().skip(k).sum::<f64>() / rest as f64
    }
}

/// Orthonormal similarity basis at `mean`: x/y translation, scale, rotation.
pub fn similarity_basis(mean: &Shape) -> DMatrix<f64> {
    let v = mean.n_points();
    let m = mean.as_vector();
    let mut cols = DMatrix::zeros(2 * v, 4);
    for i in 0..v {
        cols[(2 * i, 0)] = 1.0;
        cols[(2 * i + 1, 1)] = 1.0;
        cols[(2 * i, 2)] = m[2 * i];
        cols[(2 * i + 1, 2)] = m[2 * i + 1];
        cols[(2 * i, 3)] = -m[2 * i + 1];
        cols[(2 * i + 1, 3)] = m[2 * i];
    }
    let (q, idx) = linalg::orthonormalize_against(&DMatrix::zeros(2 * v, 0), &cols, 1e-10);
    debug_assert_eq!(idx.len(), 4);
    q
}

/// Linear shape model `s = mean + S p` whose first four columns are the
/// similarity basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub mean: Shape,
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub shape_noise: f64,
}

impl ShapeModel {
    pub fn n_points(&self) -> usize {
        self.mean.n_points()
    }

    pub fn n_params(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_nonrigid(&self) -> usize {
        self.basis.ncols() - 4
    }

    pub fn instance(&self, p: &DVector<f64>) -> Result<Shape> {
        AamError::check_len(self.n_params(), p.len())?;
        Shape::new(self.mean.as_vector() + &self.basis * p)
    }

    pub fn project(&self, s: &Shape) -> Result<DVector<f64>> {
        AamError::check_len(self.mean.as_vector().len(), s.as_vector().len())?;
        Ok(self.basis.tr_mul(&(s.as_vector() - self.mean.as_vector())))
    }

    /// Prior variances for every parameter, similarity entries set to
    /// `similarity_variance`.
    pub fn prior_variances(&self, similarity_variance: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.n_params(),
            (0..4).map(|_| similarity_variance).chain(self.eigenvalues.iter().cloned()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.mean.as_vector().len();
        if self.basis.nrows() != dim || self.basis.ncols() < 4 {
            return Err(AamError::Invariant("shape basis has wrong dimensions".into()));
        }
        if self.eigenvalues.len() != self.basis.ncols() - 4 {
            return Err(AamError::Invariant("eigenvalue count does not match basis".into()));
        }
        if linalg::identity_defect(&self.basis.tr_mul(&self.basis)) > 1e-10 {
            return Err(AamError::Invariant("shape basis is not orthonormal".into()));
        }
        if self.eigenvalues.iter().any(|v| !(*v > 0.0)) {
            return Err(AamError::Invariant("shape eigenvalues must be positive".into()));
        }
        if self.eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(AamError::Invariant("shape eigenvalues not sorted".into()));
        }
        if !(self.shape_noise >= 0.0) {
            return Err(AamError::Invariant("negative shape noise".into()));
        }
        Ok(())
    }
}

/// Builds the shape model from Procrustes-aligned shapes.
pub fn build_shape_model(
    aligned: &[Shape],
    mean: &Shape,
    components: Components,
) -> Result<(ShapeModel, PcaSummary)> {
    if aligned.len() < 2 {
        return Err(AamError::InsufficientData(
            "shape model needs at least two shapes".into(),
        ));
    }
    let dim = mean.as_vector().len();
    for s in aligned {
        AamError::check_len(dim, s.as_vector().len())?;
    }
    let sim = similarity_basis(mean);
    // Residuals restricted to the complement of the similarity subspace.
    let residuals: Vec<DVector<f64>> = aligned
        .iter()
        .map(|s| {
            let d = s.as_vector() - mean.as_vector();
            let proj = &sim * sim.tr_mul(&d);
            d - proj
        })
        .collect();
    let (_, eigenvalues, vectors) = linalg::pca(&residuals);
    let (k, capped) = truncation(&eigenvalues, components)?;
    if capped {
        log::warn!(
            "requested more shape components than the available rank {}",
            eigenvalues.len()
        );
    }
    let (nonrigid, kept) = linalg::orthonormalize_against(&sim, &vectors.columns(0, k).into_owned(), 1e-6);
    let mut basis = DMatrix::zeros(dim, 4 + nonrigid.ncols());
    basis.columns_mut(0, 4).copy_from(&sim);
    basis.columns_mut(4, nonrigid.ncols()).copy_from(&nonrigid);
    let eig = DVector::from_iterator(kept.len(), kept.iter().map(|&i| eigenvalues[i]));
    let model = ShapeModel {
        mean: mean.clone(),
        basis,
        eigenvalues: eig,
        shape_noise: discarded_mean(&eigenvalues, k),
    };
    let summary = PcaSummary {
        available: eigenvalues.len(),
        retained: kept.len(),
        capped,
        retained_ratio: retained_ratio(&eigenvalues, k),
    };
    Ok((model, summary))
}

/// Procrustes followed by model construction with default settings.
pub fn train_shape_model(shapes: &[Shape], components: Components) -> Result<(ShapeModel, PcaSummary)> {
    let gpa = procrustes_align(shapes, PROCRUSTES_MAX_ITERS, PROCRUSTES_TOL)?;
    build_shape_model(&gpa.aligned, &gpa.mean, components)
}
