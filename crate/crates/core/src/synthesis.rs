//! Synthetic annotated images rendered from linear shape and texture models.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedImage;
use crate::error::{AamError, Result};
use crate::linalg::orthonormalize_against;
use crate::model::{AamBundle, ScaleLevel};
use crate::raster::Raster;
use crate::shape::{similarity_basis, Shape, ShapeModel, SimilarityTransform};
use crate::warp::{build_reference_frame, ReferenceFrame, Triangulation};

/// Random draws are clipped to this many standard deviations.
const CLIP: f64 = 3.0;

/// Width in pixels of the texture band rendered outside the shape hull.
const EXTEND: f64 = 3.0;

/// Sampling settings for rendered images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Non-rigid parameter spread in units of the model standard deviations.
    pub shape_sigma: f64,
    /// Appearance parameter spread in units of the model standard deviations.
    pub appearance_sigma: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Maximum absolute in-plane rotation, radians.
    pub rotation: f64,
    /// Maximum relative scale change.
    pub scale_jitter: f64,
    /// Canvas border around the mean shape as a fraction of its extent.
    pub padding: f64,
    pub background: f64,
    /// Pairs consecutive samples with negated shape and appearance draws.
    pub antithetic: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            shape_sigma: 1.0,
            appearance_sigma: 1.0,
            noise_sigma: 0.0,
            rotation: 0.0,
            scale_jitter: 0.0,
            padding: 0.3,
            background: 0.5,
            antithetic: false,
        }
    }
}

/// Settings for the built-in face-like generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProceduralSpec {
    pub face_size: f64,
    pub shape_modes: usize,
    pub texture_modes: usize,
    pub seed: u64,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        ProceduralSpec {
            face_size: 150.0,
            shape_modes: 3,
            texture_modes: 4,
            seed: 0,
        }
    }
}

/// One rendered sample with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub item: AnnotatedImage,
    /// Non-rigid shape parameters.
    pub p: DVector<f64>,
    /// Texture parameters.
    pub c: DVector<f64>,
}

/// Grayscale generative model: `t = mean + basis c` on the reference frame
/// of `shape`, rendered at `T(s̄ + S p)`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub shape: ShapeModel,
    pub frame: ReferenceFrame,
    pub triangulation: Triangulation,
    pub texture_mean: DVector<f64>,
    pub texture_basis: DMatrix<f64>,
    /// Standard deviation of every texture parameter.
    pub texture_std: DVector<f64>,
    /// Mean of the texture parameters.
    pub texture_center: DVector<f64>,
}

/// Landmark template in units of the face size, centred on the origin.
fn face_template() -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = (0..10)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / 10.0;
            [0.5 * t.cos(), 0.5 * t.sin()]
        })
        .collect();
    pts.extend_from_slice(&[
        [-0.26, -0.12],
        [-0.1, -0.13],
        [0.1, -0.13],
        [0.26, -0.12],
        [0.0, 0.06],
        [-0.17, 0.24],
        [0.0, 0.2],
        [0.17, 0.24],
        [0.0, 0.31],
    ]);
    pts
}

fn gaussian_blob(u: f64, v: f64, cu: f64, cv: f64, s: f64) -> f64 {
    (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * s * s)).exp()
}

/// Smooth face-like texture at template coordinates `(u, v)`.
fn template_texture(u: f64, v: f64) -> f64 {
    0.62 + 0.12 * v - 0.25 * gaussian_blob(u, v, -0.18, -0.12, 0.06) - 0.25 * gaussian_blob(u, v, 0.18, -0.12, 0.06)
        + 0.12 * gaussian_blob(u, v, 0.0, 0.04, 0.07)
        - 0.2 * gaussian_blob(u, v, 0.0, 0.25, 0.07)
        - 0.1 * gaussian_blob(u, v, 0.0, -0.32, 0.1)
}

/// Low-frequency texture variation number `k`.
fn texture_mode(k: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    let (a, b) = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2)][k % 8];
    let phase = (k / 8) as f64 * 0.5 * PI;
    (PI * a as f64 * u + phase).cos() * (PI * b as f64 * v).cos() + 0.5 * (2.0 * PI * (a + b) as f64 * (u + v)).sin()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-CLIP, CLIP)
}

/// Nearest-masked fill of frame values onto the full frame grid.
fn texture_raster(frame: &ReferenceFrame, values: &DVector<f64>) -> Raster {
    let (w, h) = (frame.width, frame.height);
    let mut out = Raster::filled(w, h, 1, 0.0);
    let mut done = vec![false; w * h];
    let mut queue = VecDeque::new();
    for (i, &(x, y)) in frame.pixels.iter().enumerate() {
        out.set(x, y, 0, values[i]);
        done[y * w + x] = true;
        queue.push_back((x, y));
    }
    while let Some((x, y)) = queue.pop_front() {
        let v = out.get(x, y, 0);
        let mut visit = |nx: usize, ny: usize| {
            if !done[ny * w + nx] {
                done[ny * w + nx] = true;
                out.set(nx, ny, 0, v);
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    out
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if det.abs() < 1e-12 {
        return None;
    }
    let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    Some([l1, l2, 1.0 - l1 - l2])
}

/// Distance from a point with barycentrics `l` to triangle `abc`, measured
/// through the most violated edge.
fn outside_distance(l: [f64; 3], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
    let edges = [(b, c), (c, a), (a, b)];
    (0..3)
        .map(|i| {
            let (p, q) = edges[i];
            let len = (q[0] - p[0]).hypot(q[1] - p[1]);
            -l[i] * area2 / len
        })
        .fold(0.0, f64::max)
}

impl Generator {
    /// Built-in face-like generator with random smooth shape modes.
    pub fn procedural(spec: &ProceduralSpec) -> Result<Self> {
        if !(spec.face_size >= 16.0) {
            return Err(AamError::Config("procedural face size must be at least 16".into()));
        }
        if spec.shape_modes == 0 || spec.shape_modes > 6 || spec.texture_modes == 0 {
            return Err(AamError::Config(
                "procedural generator needs 1..=6 shape modes and at least one texture mode".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let template = face_template();
        let v = template.len();
        let fs = spec.face_size;
        let mean = Shape::from_points(&template.iter().map(|p| [p[0] * fs, p[1] * fs]).collect::<Vec<_>>())?;

        // Smooth displacement fields from random quadratic polynomials.
        let mut raw = DMatrix::zeros(2 * v, spec.shape_modes);
        for k in 0..spec.shape_modes {
            let coef: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (i, p) in template.iter().enumerate() {
                let mono = [p[0], p[1], p[0] * p[0], p[0] * p[1], p[1] * p[1]];
                raw[(2 * i, k)] = (0..5).map(|j| coef[j] * mono[j]).sum();
                raw[(2 * i + 1, k)] = (0..5).map(|j| coef[5 + j] * mono[j]).sum();
            }
        }
        let sim = similarity_basis(&mean);
        let (modes, kept) = orthonormalize_against(&sim, &raw, 1e-6);
        if kept.len() != spec.shape_modes {
            return Err(AamError::Degenerate("procedural shape modes are dependent".into()));
        }
        let mut basis = DMatrix::zeros(2 * v, 4 + spec.shape_modes);
        basis.columns_mut(0, 4).copy_from(&sim);
        basis.columns_mut(4, spec.shape_modes).copy_from(&modes);
        // Per-coordinate RMS displacement of 2.5%, 2%, 1.5%, ... of the face size.
        let eigenvalues = DVector::from_fn(spec.shape_modes, |k, _| {
            let rms = fs * (0.025 - 0.005 * k as f64).max(0.005);
            rms * rms * (2 * v) as f64
        });
        let shape = ShapeModel {
            mean,
            basis,
            eigenvalues,
            shape_noise: 0.0,
        };
        let (frame, triangulation) = build_reference_frame(&shape, 1)?;

        let f = frame.n_pixels();
        let coords: Vec<[f64; 2]> = (0..f)
            .map(|i| {
                let [x, y] = frame.position(i);
                [x / fs, y / fs]
            })
            .collect();
        let texture_mean = DVector::from_iterator(f, coords.iter().map(|&[u, v]| template_texture(u, v)));
        let mut raw_t = DMatrix::zeros(f, spec.texture_modes);
        for k in 0..spec.texture_modes {
            for (i, &[u, v]) in coords.iter().enumerate() {
                raw_t[(i, k)] = texture_mode(k, u, v);
            }
        }
        let (texture_basis, kept) = orthonormalize_against(&DMatrix::zeros(f, 0), &raw_t, 1e-6);
        if kept.len() != spec.texture_modes {
            return Err(AamError::Degenerate("procedural texture modes are dependent".into()));
        }
        // Per-pixel RMS amplitude of 0.06, 0.05, ... in intensity units.
        let texture_std = DVector::from_fn(spec.texture_modes, |k, _| {
            (0.06 - 0.01 * k as f64).max(0.01) * (f as f64).sqrt()
        });
        Ok(Generator {
            shape,
            frame,
            triangulation,
            texture_mean,
            texture_basis,
            texture_std,
            texture_center: DVector::zeros(spec.texture_modes),
        })
    }

    /// Generator reproducing a trained grayscale level.
    pub fn from_level(level: &ScaleLevel) -> Result<Self> {
        if level.appearance.channels != 1 {
            return Err(AamError::Config(
                "synthesis needs a single-channel appearance model".into(),
            ));
        }
        Ok(Generator {
            shape: level.shape.clone(),
            frame: level.frame.clone(),
            triangulation: level.triangulation.clone(),
            texture_mean: level.appearance.mean.clone(),
            texture_basis: level.appearance.basis.clone(),
            texture_std: level.appearance.eigenvalues.map(f64::sqrt),
            texture_center: level.appearance.prior_mean.clone(),
        })
    }

    pub fn n_shape_modes(&self) -> usize {
        self.shape.n_nonrigid()
    }

    pub fn n_texture_modes(&self) -> usize {
        self.texture_basis.ncols()
    }

    /// Shape-free texture for parameters `c`.
    pub fn texture(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        AamError::check_len(self.n_texture_modes(), c.len())?;
        Ok(&self.texture_mean + &self.texture_basis * c)
    }

    /// Shape `s̄ + S p` for non-rigid parameters `p`.
    pub fn nonrigid_shape(&self, p: &DVector<f64>) -> Result<Shape> {
        let n = self.n_shape_modes();
        AamError::check_len(n, p.len())?;
        let full = DVector::from_iterator(n + 4, std::iter::repeat_n(0.0, 4).chain(p.iter().cloned()));
        self.shape.instance(&full)
    }

    /// Canvas size and integer offset placing the mean shape with `padding`.
    pub fn canvas(&self, padding: f64) -> (usize, usize, [f64; 2]) {
        let (x0, y0, x1, y1) = self.shape.mean.bounds();
        let pad = padding.max(0.0) * (x1 - x0).max(y1 - y0);
        let w = (x1 - x0 + 2.0 * pad).ceil() as usize + 1;
        let h = (y1 - y0 + 2.0 * pad).ceil() as usize + 1;
        (w, h, [(pad - x0).round(), (pad - y0).round()])
    }

    /// Renders `texture` warped onto `shape` over a `width × height` canvas.
    pub fn render(&self, texture: &DVector<f64>, shape: &Shape, width: usize, height: usize, background: f64) -> Result<Raster> {
        AamError::check_len(self.frame.n_pixels(), texture.len())?;
        AamError::check_len(self.shape.mean.as_vector().len(), shape.as_vector().len())?;
        let tex = texture_raster(&self.frame, texture);
        let mut out = Raster::filled(width, height, 1, background);
        let mut assigned = vec![false; width * height];
        let pts = shape.points();
        let refs = self.shape.mean.points();
        let o = self.frame.origin;
        let mut buf = [0.0];
        for t in &self.triangulation.triangles {
            let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
            let xmin = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
            let ymin = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
            let xmax = a[0].max(b[0]).max(c[0]).ceil().min(width as f64 - 1.0);
            let ymax = a[1].max(b[1]).max(c[1]).ceil().min(height as f64 - 1.0);
            if xmax < 0.0 || ymax < 0.0 {
                continue;
            }
            for y in ymin..=ymax as usize {
                for x in xmin..=xmax as usize {
                    if assigned[y * width + x] {
                        continue;
                    }
                    let Some(l) = barycentric([x as f64, y as f64], a, b, c) else {
                        continue;
                    };
                    if l.iter().any(|v| *v < -1e-9) {
                        continue;
                    }
                    let u = l[0] * refs[t[0]][0] + l[1] * refs[t[1]][0] + l[2] * refs[t[2]][0];
                    let v = l[0] * refs[t[0]][1] + l[1] * refs[t[1]][1] + l[2] * refs[t[2]][1];
                    tex.sample_cubic(u - o[0], v - o[1], &mut buf);
                    out.set(x, y, 0, buf[0]);
                    assigned[y * width + x] = true;
                }
            }
        }
        // Affine extension of the nearest triangle in a thin band around the
        // hull, so that bilinear lookups at the outline see no background.
        let (x0, y0, x1, y1) = shape.bounds();
        let lo = |v: f64| (v - EXTEND).floor().max(0.0) as usize;
        let (xa, ya) = (lo(x0), lo(y0));
        let xb = ((x1 + EXTEND).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let yb = ((y1 + EXTEND).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        for y in ya..=yb {
            for x in xa..=xb {
                if assigned[y * width + x] {
                    continue;
                }
                let q = [x as f64, y as f64];
                let best = self
                    .triangulation
                    .triangles
                    .iter()
                    .filter_map(|t| {
                        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
                        barycentric(q, a, b, c).map(|l| (outside_distance(l, a, b, c), t, l))
                    })
                    .min_by(|u, v| u.0.total_cmp(&v.0));
                if let Some((d, t, l)) = best {
                    if d <= EXTEND {
                        let u = l[0] * refs[t[0]][0] + l[1] * refs[t[1]][0] + l[2] * refs[t[2]][0];
                        let v = l[0] * refs[t[0]][1] + l[1] * refs[t[1]][1] + l[2] * refs[t[2]][1];
                        tex.sample_cubic(u - o[0], v - o[1], &mut buf);
                        out.set(x, y, 0, buf[0]);
                    }
                }
            }
        }
        Ok(out)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, opts: &SynthOptions) -> (DVector<f64>, DVector<f64>) {
        let p = DVector::from_fn(self.n_shape_modes(), |k, _| {
            opts.shape_sigma * self.shape.eigenvalues[k].sqrt() * gaussian(rng)
        });
        let c = DVector::from_fn(self.n_texture_modes(), |k, _| {
            opts.appearance_sigma * self.texture_std[k] * gaussian(rng)
        });
        (p, c)
    }

    /// Renders one image with parameter offsets `p`, `c` from the generator
    /// centre, a random similarity jitter and pixel noise.
    pub fn render_sample(
        &self,
        name: String,
        p: DVector<f64>,
        c: DVector<f64>,
        rng: &mut ChaCha8Rng,
        opts: &SynthOptions,
    ) -> Result<SyntheticSample> {
        let (w, h, offset) = self.canvas(opts.padding);
        let base = self.nonrigid_shape(&p)?;
        let angle = opts.rotation * rng.random_range(-1.0..=1.0);
        let scale = 1.0 + opts.scale_jitter * rng.random_range(-1.0..=1.0);
        let [cx, cy] = self.shape.mean.centroid();
        let about = SimilarityTransform::new(1.0, 0.0, [-cx, -cy]);
        let jitter = SimilarityTransform::new(scale, angle, [cx + offset[0], cy + offset[1]]);
        let shape = base.transformed(&jitter.compose(&about));
        let c_abs = &self.texture_center + &c;
        let texture = self.texture(&c_abs)?;
        let mut image = self.render(&texture, &shape, w, h, opts.background)?;
        if opts.noise_sigma > 0.0 {
            for v in image.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += opts.noise_sigma * z;
            }
        }
        Ok(SyntheticSample {
            item: AnnotatedImage { name, image, shape },
            p,
            c: c_abs,
        })
    }

    /// Draws `count` samples from a seeded stream.
    pub fn sample_many(&self, count: usize, opts: &SynthOptions, seed: u64, prefix: &str) -> Result<Vec<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<SyntheticSample> = Vec::with_capacity(count);
        for i in 0..count {
            let (p, c) = match out.last() {
                Some(prev) if opts.antithetic && i % 2 == 1 => (-&prev.p, -(&prev.c - &self.texture_center)),
                _ => self.draw(&mut rng, opts),
            };
            out.push(self.render_sample(format!("{prefix}{i:04}"), p, c, &mut rng, opts)?);
        }
        Ok(out)
    }
}

/// Annotated images rendered from the finest level of a grayscale bundle.
pub fn synthesize_dataset(bundle: &AamBundle, count: usize, opts: &SynthOptions, seed: u64) -> Result<Vec<AnnotatedImage>> {
    let generator = Generator::from_level(bundle.finest())?;
    Ok(generator
        .sample_many(count, opts, seed, "synth_")?
        .into_iter()
        .map(|s| s.item)
        .collect())
}

/// Annotated images from the built-in face-like generator.
pub fn procedural_corpus(spec: &ProceduralSpec, count: usize, opts: &SynthOptions, seed: u64) -> Result<Vec<AnnotatedImage>> {
    let generator = Generator::procedural(spec)?;
    Ok(generator
        .sample_many(count, opts, seed, "face_")?
        .into_iter()
        .map(|s| s.item)
        .collect())
}
