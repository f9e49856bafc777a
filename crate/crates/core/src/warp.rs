//! Piecewise-affine warp on a triangulated reference frame.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{AamError, Result};
use crate::raster::Raster;
use crate::shape::{Shape, ShapeModel};

/// Pixel grid of the reference frame and the masked region Ω.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub width: usize,
    pub height: usize,
    /// Model coordinates of pixel `(0, 0)`.
    pub origin: [f64; 2],
    pub mask: Vec<bool>,
    /// Dense index of each grid pixel, `None` outside the mask.
    pub pixel_index: Vec<Option<usize>>,
    /// Grid coordinates of each masked pixel in dense order.
    pub pixels: Vec<(usize, usize)>,
}

impl ReferenceFrame {
    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn index_of(&self, x: usize, y: usize) -> Option<usize> {
        self.pixel_index[y * self.width + x]
    }

    /// Model coordinates of masked pixel `i`.
    pub fn position(&self, i: usize) -> [f64; 2] {
        let (x, y) = self.pixels[i];
        [self.origin[0] + x as f64, self.origin[1] + y as f64]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.is_empty() {
            return Err(AamError::Invariant("reference frame has no pixels".into()));
        }
        if self.mask.len() != self.width * self.height || self.pixel_index.len() != self.mask.len() {
            return Err(AamError::Invariant("frame grid size mismatch".into()));
        }
        for (i, &(x, y)) in self.pixels.iter().enumerate() {
            if self.index_of(x, y) != Some(i) || !self.mask[y * self.width + x] {
                return Err(AamError::Invariant("pixel index is not a bijection".into()));
            }
        }
        let masked = self.mask.iter().filter(|m| **m).count();
        if masked != self.pixels.len() {
            return Err(AamError::Invariant("mask and pixel list disagree".into()));
        }
        Ok(())
    }
}

/// Barycentric location of one masked pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTriangle {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Delaunay triangulation of the mean shape with per-pixel barycentrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub triangles: Vec<[usize; 3]>,
    pub per_pixel: Vec<PixelTriangle>,
    /// Triangles incident to each vertex.
    pub vertex_triangles: Vec<Vec<usize>>,
}

impl Triangulation {
    pub fn validate(&self, frame: &ReferenceFrame, n_vertices: usize) -> Result<()> {
        if self.per_pixel.len() != frame.n_pixels() {
            return Err(AamError::Invariant("barycentric table size mismatch".into()));
        }
        for t in &self.triangles {
            if t.iter().any(|&v| v >= n_vertices) {
                return Err(AamError::Invariant("triangle vertex out of range".into()));
            }
        }
        for px in &self.per_pixel {
            if px.triangle >= self.triangles.len() {
                return Err(AamError::Invariant("pixel triangle out of range".into()));
            }
            let s: f64 = px.bary.iter().sum();
            if (s - 1.0).abs() > 1e-9 || px.bary.iter().any(|b| *b < -1e-9) {
                return Err(AamError::Invariant("invalid barycentric coordinates".into()));
            }
        }
        Ok(())
    }
}

/// Derivative of each masked pixel's warped position with respect to the
/// shape parameters at the identity warp, split by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpJacobian {
    pub dx: DMatrix<f64>,
    pub dy: DMatrix<f64>,
}

impl WarpJacobian {
    pub fn n_params(&self) -> usize {
        self.dx.ncols()
    }

    /// Rows for the given dense pixel indices.
    pub fn select(&self, pixels: &[usize]) -> WarpJacobian {
        WarpJacobian {
            dx: self.dx.select_rows(pixels),
            dy: self.dy.select_rows(pixels),
        }
    }
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if det.abs() < 1e-14 {
        return None;
    }
    let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    Some([l1, l2, 1.0 - l1 - l2])
}

/// Builds the reference frame and triangulation for an arbitrary mean shape.
pub fn build_frame_for_shape(mean: &Shape, margin: usize) -> Result<(ReferenceFrame, Triangulation)> {
    let pts = mean.points();
    let dpts: Vec<delaunator::Point> = pts.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let del = delaunator::triangulate(&dpts);
    if del.triangles.is_empty() {
        return Err(AamError::Triangulation("mean shape is collinear".into()));
    }
    let triangles: Vec<[usize; 3]> = del
        .triangles
        .chunks(3)
        .map(|t| [t[0], t[1], t[2]])
        .collect();

    let (x0, y0, x1, y1) = mean.bounds();
    let origin = [x0.floor() - margin as f64, y0.floor() - margin as f64];
    let width = (x1 - origin[0]).ceil() as usize + margin + 1;
    let height = (y1 - origin[1]).ceil() as usize + margin + 1;
    let local: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] - origin[0], p[1] - origin[1]]).collect();

    let mut assigned: Vec<Option<PixelTriangle>> = vec![None; width * height];
    for (ti, t) in triangles.iter().enumerate() {
        let (a, b, c) = (local[t[0]], local[t[1]], local[t[2]]);
        let xmin = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let ymin = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let xmax = (a[0].max(b[0]).max(c[0]).ceil() as usize).min(width - 1);
        let ymax = (a[1].max(b[1]).max(c[1]).ceil() as usize).min(height - 1);
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let slot = &mut assigned[y * width + x];
                if slot.is_some() {
                    continue;
                }
                let Some(bary) = barycentric([x as f64, y as f64], a, b, c) else {
                    continue;
                };
                if bary.iter().all(|v| *v >= -1e-9) {
                    let mut bary = bary.map(|v| v.max(0.0));
                    let s: f64 = bary.iter().sum();
                    bary.iter_mut().for_each(|v| *v /= s);
                    *slot = Some(PixelTriangle { triangle: ti, bary });
                }
            }
        }
    }

    let mut mask = vec![false; width * height];
    let mut pixel_index = vec![None; width * height];
    let mut pixels = Vec::new();
    let mut per_pixel = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if let Some(pt) = assigned[y * width + x] {
                mask[y * width + x] = true;
                pixel_index[y * width + x] = Some(pixels.len());
                pixels.push((x, y));
                per_pixel.push(pt);
            }
        }
    }
    if pixels.is_empty() {
        return Err(AamError::Triangulation("triangulation covers no pixels".into()));
    }
    let mut vertex_triangles = vec![Vec::new(); pts.len()];
    for (ti, t) in triangles.iter().enumerate() {
        for &v in t {
            vertex_triangles[v].push(ti);
        }
    }
    Ok((
        ReferenceFrame {
            width,
            height,
            origin,
            mask,
            pixel_index,
            pixels,
        },
        Triangulation {
            triangles,
            per_pixel,
            vertex_triangles,
        },
    ))
}

/// Delaunay triangulation of the model mean, rasterized onto a pixel grid.
pub fn build_reference_frame(model: &ShapeModel, margin: usize) -> Result<(ReferenceFrame, Triangulation)> {
    build_frame_for_shape(&model.mean, margin)
}

#[inline]
fn warped_position(shape: &DVector<f64>, tri: &[usize; 3], b: &[f64; 3]) -> [f64; 2] {
    let mut x = 0.0;
    let mut y = 0.0;
    for k in 0..3 {
        x += b[k] * shape[2 * tri[k]];
        y += b[k] * shape[2 * tri[k] + 1];
    }
    [x, y]
}

/// Samples `image` at the warped positions of the given masked pixels.
pub fn warp_pixels(image: &Raster, shape: &Shape, tri: &Triangulation, pixels: &[usize]) -> Result<DVector<f64>> {
    let k = image.channels();
    let s = shape.as_vector();
    let mut out = DVector::zeros(pixels.len() * k);
    for (row, &i) in pixels.iter().enumerate() {
        let pt = &tri.per_pixel[i];
        let [x, y] = warped_position(s, &tri.triangles[pt.triangle], &pt.bary);
        image.sample(x, y, &mut out.as_mut_slice()[row * k..(row + 1) * k]);
    }
    Ok(out)
}

/// `i[p]`: the image warped onto the reference frame, pixel-major with
/// interleaved channels.
pub fn warp_to_reference(
    image: &Raster,
    shape: &Shape,
    frame: &ReferenceFrame,
    tri: &Triangulation,
) -> Result<DVector<f64>> {
    let all: Vec<usize> = (0..frame.n_pixels()).collect();
    warp_pixels(image, shape, tri, &all)
}

/// Warp Jacobian at the identity warp.
pub fn warp_jacobian_identity(model: &ShapeModel, frame: &ReferenceFrame, tri: &Triangulation) -> WarpJacobian {
    let f = frame.n_pixels();
    let np = model.n_params();
    let s = &model.basis;
    let mut dx = DMatrix::zeros(f, np);
    let mut dy = DMatrix::zeros(f, np);
    for (i, pt) in tri.per_pixel.iter().enumerate() {
        let t = &tri.triangles[pt.triangle];
        for m in 0..np {
            let mut vx = 0.0;
            let mut vy = 0.0;
            for k in 0..3 {
                vx += pt.bary[k] * s[(2 * t[k], m)];
                vy += pt.bary[k] * s[(2 * t[k] + 1, m)];
            }
            dx[(i, m)] = vx;
            dy[(i, m)] = vy;
        }
    }
    WarpJacobian { dx, dy }
}

fn edge_matrix(s: &DVector<f64>, t: &[usize; 3]) -> Matrix2<f64> {
    let (a, b, c) = (t[0], t[1], t[2]);
    Matrix2::new(
        s[2 * b] - s[2 * a],
        s[2 * c] - s[2 * a],
        s[2 * b + 1] - s[2 * a + 1],
        s[2 * c + 1] - s[2 * a + 1],
    )
}

/// Linear parts of the per-triangle affine maps from `from` onto `to`.
pub fn triangle_linear_maps(from: &Shape, to: &Shape, tri: &Triangulation) -> Vec<Matrix2<f64>> {
    tri.triangles
        .iter()
        .map(|t| {
            let em = edge_matrix(from.as_vector(), t);
            let ec = edge_matrix(to.as_vector(), t);
            em.try_inverse().map(|inv| ec * inv).unwrap_or_else(Matrix2::identity)
        })
        .collect()
}

/// `p ∘ dp`: the mean-frame displacement `S dp` is carried through the
/// current warp's affine maps (averaged over triangles sharing a vertex) and
/// the displaced shape is projected back onto the model.
pub fn compose(model: &ShapeModel, tri: &Triangulation, p: &DVector<f64>, dp: &DVector<f64>) -> Result<DVector<f64>> {
    AamError::check_len(model.n_params(), p.len())?;
    AamError::check_len(model.n_params(), dp.len())?;
    if dp.iter().all(|v| *v == 0.0) {
        return Ok(p.clone());
    }
    let current = model.instance(p)?;
    let maps = triangle_linear_maps(&model.mean, &current, tri);
    let delta = &model.basis * dp;
    let mut next = current.as_vector().clone();
    for (v, tris) in tri.vertex_triangles.iter().enumerate() {
        let mut avg = Matrix2::zeros();
        for &t in tris {
            avg += maps[t];
        }
        if tris.is_empty() {
            avg = Matrix2::identity();
        } else {
            avg /= tris.len() as f64;
        }
        let d = avg * Vector2::new(delta[2 * v], delta[2 * v + 1]);
        next[2 * v] += d[0];
        next[2 * v + 1] += d[1];
    }
    model.project(&Shape::new(next)?)
}

/// First-order inverse of an incremental warp.
pub fn invert_increment(dp: &DVector<f64>) -> DVector<f64> {
    -dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_against;
    use crate::shape::similarity_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(side: f64) -> Shape {
        Shape::from_points(&[[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]]).unwrap()
    }

    fn toy_model(seed: u64) -> ShapeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [[40.0, 40.0], [60.0, 38.0], [75.0, 50.0], [70.0, 72.0], [50.0, 75.0], [38.0, 60.0], [55.0, 55.0]];
        let mean = Shape::from_points(&base).unwrap();
        let sim = similarity_basis(&mean);
        let (q, _) = orthonormalize_against(&sim, &DMatrix::from_fn(14, 3, |_, _| rng.random_range(-1.0..1.0)), 1e-8);
        let mut basis = DMatrix::zeros(14, 7);
        basis.columns_mut(0, 4).copy_from(&sim);
        basis.columns_mut(4, 3).copy_from(&q);
        ShapeModel {
            mean,
            basis,
            eigenvalues: DVector::from_vec(vec![3.0, 2.0, 1.0]),
            shape_noise: 0.0,
        }
    }

    #[test]
    fn square_frame_covers_closed_square() {
        let (frame, tri) = build_frame_for_shape(&square(10.0), 0).unwrap();
        assert_eq!(tri.triangles.len(), 2);
        let oracle = (0..=10).flat_map(|y| (0..=10).map(move |x| (x, y))).count();
        assert_eq!(frame.n_pixels(), oracle);
        frame.validate().unwrap();
        tri.validate(&frame, 4).unwrap();
    }

    #[test]
    fn collinear_mean_is_rejected() {
        let s = Shape::from_points(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        assert!(matches!(build_frame_for_shape(&s, 0), Err(AamError::Triangulation(_))));
    }

    #[test]
    fn vertex_pixels_have_indicator_barycentrics() {
        let m = toy_model(1);
        let (frame, tri) = build_reference_frame(&m, 2).unwrap();
        for (v, [x, y]) in m.mean.points().into_iter().enumerate() {
            let gx = x - frame.origin[0];
            let gy = y - frame.origin[1];
            if (gx - gx.round()).abs() > 1e-12 || (gy - gy.round()).abs() > 1e-12 {
                continue;
            }
            let i = frame.index_of(gx as usize, gy as usize).unwrap();
            let pt = tri.per_pixel[i];
            let pos = tri.triangles[pt.triangle].iter().position(|&k| k == v).unwrap();
            assert!((pt.bary[pos] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_recovers_rendered_values() {
        let m = toy_model(2);
        let (frame, tri) = build_reference_frame(&m, 0).unwrap();
        let img = Raster::from_fn(frame.width + 20, frame.height + 20, |x, y| ((x * 7 + y * 3) % 11) as f64);
        let shifted = m.mean.translated(-frame.origin[0] + 5.0, -frame.origin[1] + 5.0);
        let v = warp_to_reference(&img, &shifted, &frame, &tri).unwrap();
        for (i, &(x, y)) in frame.pixels.iter().enumerate() {
            assert!((v[i] - img.get(x + 5, y + 5, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn translated_shape_on_ramp() {
        let m = toy_model(3);
        let (frame, tri) = build_reference_frame(&m, 0).unwrap();
        let img = Raster::from_fn(200, 200, |x, y| 0.5 * x as f64 + 0.25 * y as f64);
        let (tx, ty) = (3.3, -1.7);
        let a = warp_to_reference(&img, &m.mean, &frame, &tri).unwrap();
        let b = warp_to_reference(&img, &m.mean.translated(tx, ty), &frame, &tri).unwrap();
        for i in 0..a.len() {
            assert!((b[i] - a[i] - (0.5 * tx + 0.25 * ty)).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_columns_are_unit_shifts() {
        let m = toy_model(4);
        let (frame, tri) = build_reference_frame(&m, 0).unwrap();
        let wj = warp_jacobian_identity(&m, &frame, &tri);
        let norm = (m.n_points() as f64).sqrt();
        for i in 0..frame.n_pixels() {
            assert!((wj.dx[(i, 0)] * norm - 1.0).abs() < 1e-12);
            assert!((wj.dy[(i, 0)] * norm).abs() < 1e-12);
            assert!((wj.dy[(i, 1)] * norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_jacobian_matches_finite_differences() {
        let m = toy_model(5);
        let (frame, tri) = build_reference_frame(&m, 0).unwrap();
        let wj = warp_jacobian_identity(&m, &frame, &tri);
        let h = 1e-4;
        for col in 0..m.n_params() {
            let mut e = DVector::zeros(m.n_params());
            e[col] = h;
            let sp = m.instance(&e).unwrap();
            let sm = m.instance(&(-&e)).unwrap();
            for (i, pt) in tri.per_pixel.iter().enumerate() {
                let t = &tri.triangles[pt.triangle];
                let a = warped_position(sp.as_vector(), t, &pt.bary);
                let b = warped_position(sm.as_vector(), t, &pt.bary);
                assert!(((a[0] - b[0]) / (2.0 * h) - wj.dx[(i, col)]).abs() < 1e-5);
                assert!(((a[1] - b[1]) / (2.0 * h) - wj.dy[(i, col)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn compose_identities() {
        let m = toy_model(6);
        let (_, tri) = build_reference_frame(&m, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let dp = DVector::from_fn(7, |_, _| rng.random_range(-0.5..0.5));
        let zero = DVector::zeros(7);
        assert_eq!(compose(&m, &tri, &p, &zero).unwrap(), p);
        assert!((compose(&m, &tri, &zero, &dp).unwrap() - &dp).amax() < 1e-10);
        assert_eq!(invert_increment(&invert_increment(&dp)), dp);
    }

    #[test]
    fn compose_inverse_roundtrip_decays_quadratically() {
        let m = toy_model(7);
        let (_, tri) = build_reference_frame(&m, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DVector::from_fn(7, |_, _| rng.random_range(-3.0..3.0));
        let dp = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let err = |s: f64| {
            let d = &dp * s;
            let q = compose(&m, &tri, &compose(&m, &tri, &p, &d).unwrap(), &invert_increment(&d)).unwrap();
            (q - &p).norm()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        let ratio = e1 / e2;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }
}
