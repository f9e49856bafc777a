//! Benchmark protocol: perturbed initializations, normalized errors,
//! cumulative error statistics and per-iteration curves.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedImage;
use crate::error::{AamError, Result};
use crate::fitting::{AltVariant, FitConfig, FitResult, Fitter, MapPrior};
use crate::model::AamBundle;
use crate::shape::{Shape, ShapeModel, SimilarityTransform};

/// Error thresholds reported in the statistics table.
pub const THRESHOLDS: [f64; 3] = [0.02, 0.03, 0.04];

/// Mean landmark distance divided by the face size of `truth`.
pub fn normalized_p2p_error(fitted: &Shape, truth: &Shape) -> Result<f64> {
    AamError::check_len(truth.as_vector().len(), fitted.as_vector().len())?;
    let size = truth.face_size();
    if !(size > 0.0) {
        return Err(AamError::Degenerate("ground truth has zero face size".into()));
    }
    let v = truth.n_points();
    let total: f64 = (0..v)
        .map(|i| {
            let [a, b] = fitted.point(i);
            let [x, y] = truth.point(i);
            (a - x).hypot(b - y)
        })
        .sum();
    Ok(total / (v as f64 * size))
}

/// Similarity-only initialization: the mean shape aligned to `truth` with
/// uniform noise in `±noise_pct` on scale, rotation (`·π/2`) and translation
/// (`·face size`, per axis).
pub fn perturb_initialization<R: Rng + ?Sized>(
    truth: &Shape,
    model: &ShapeModel,
    noise_pct: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(noise_pct >= 0.0) || !noise_pct.is_finite() {
        return Err(AamError::Config(format!("invalid noise level {noise_pct}")));
    }
    let fit = SimilarityTransform::align(&model.mean, truth)?;
    let mut u = || rng.random_range(-noise_pct..=noise_pct);
    let (u1, u2, u3x, u3y) = (u(), u(), u(), u());
    let size = truth.face_size();
    let [mx, my] = model.mean.centroid();
    let [cx, cy] = fit.apply([mx, my]);
    let perturbed = SimilarityTransform::new(
        fit.scale * (1.0 + u1),
        fit.angle() + u2 * FRAC_PI_2,
        [cx + u3x * size, cy + u3y * size],
    )
    .compose(&SimilarityTransform::new(1.0, 0.0, [-mx, -my]));
    let mut p = model.project(&model.mean.transformed(&perturbed))?;
    p.rows_mut(4, model.n_nonrigid()).fill(0.0);
    Ok(p)
}

/// Proportions below [`THRESHOLDS`] and moments of a set of final errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub p02: f64,
    pub p03: f64,
    pub p04: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

pub fn proportion_below(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| **e < threshold).count() as f64 / errors.len() as f64
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(AamError::InsufficientData("no errors to summarize".into()));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        };
        Ok(ErrorStats {
            p02: proportion_below(errors, THRESHOLDS[0]),
            p03: proportion_below(errors, THRESHOLDS[1]),
            p04: proportion_below(errors, THRESHOLDS[2]),
            mean,
            std: var.sqrt(),
            median,
            count: errors.len(),
        })
    }
}

/// What to run: every algorithm at every noise level and sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub algorithms: Vec<String>,
    pub noise: Vec<f64>,
    pub trials: usize,
    pub sampling_rates: Vec<f64>,
    pub iters_per_scale: Vec<usize>,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub alt_variant: Option<AltVariant>,
    pub prior: Option<MapPrior>,
    pub convergence_tol: Option<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            algorithms: vec!["SSD_Asy_GN_Sch".into()],
            noise: vec![0.05],
            trials: 3,
            sampling_rates: vec![1.0],
            iters_per_scale: vec![24, 16],
            seed: 0,
            alpha: None,
            rho: None,
            alt_variant: None,
            prior: None,
            convergence_tol: None,
        }
    }
}

/// One algorithm at one noise level and sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub noise_index: usize,
    pub noise: f64,
    pub config: FitConfig,
}

impl ExperimentSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(s).map_err(|e| AamError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(AamError::Config("trials must be at least 1".into()));
        }
        if self.algorithms.is_empty() || self.noise.is_empty() || self.sampling_rates.is_empty() {
            return Err(AamError::Config(
                "algorithms, noise and sampling_rates must be nonempty".into(),
            ));
        }
        if let Some(n) = self.noise.iter().find(|n| !(**n >= 0.0 && **n <= 0.5)) {
            return Err(AamError::Config(format!("noise {n} outside [0, 0.5]")));
        }
        self.runs().map(|_| ())
    }

    /// Expands the grid into validated fitting configurations.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let mut out = Vec::new();
        for sel in &self.algorithms {
            let base = FitConfig::from_selector(sel)?;
            for (ni, &noise) in self.noise.iter().enumerate() {
                for &rate in &self.sampling_rates {
                    let mut cfg = base.clone();
                    cfg.iters_per_scale = self.iters_per_scale.clone();
                    cfg.sampling_rate = rate;
                    if let Some(a) = self.alpha {
                        cfg.alpha = a;
                    }
                    if let Some(r) = self.rho {
                        cfg.rho = r;
                    }
                    if let Some(v) = self.alt_variant {
                        cfg.alt_variant = v;
                    }
                    if let Some(t) = self.convergence_tol {
                        cfg.convergence_tol = t;
                    }
                    cfg.prior = self.prior;
                    cfg.validate()?;
                    let mut label = cfg.algorithm().to_string();
                    if self.noise.len() > 1 {
                        label.push_str(&format!("@noise={noise}"));
                    }
                    if self.sampling_rates.len() > 1 {
                        label.push_str(&format!("@rate={rate}"));
                    }
                    out.push(RunSpec {
                        label,
                        noise_index: ni,
                        noise,
                        config: cfg,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn budget(&self) -> usize {
        self.iters_per_scale.iter().sum()
    }
}

/// Aggregated outcome of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub noise: f64,
    pub sampling_rate: f64,
    pub stats: ErrorStats,
    /// Final errors in (image, trial) order.
    pub final_errors: Vec<f64>,
    pub initial_errors: Vec<f64>,
    /// Mean normalized error at each iteration, `budget + 1` entries.
    pub mean_error: Vec<f64>,
    /// Mean cost relative to the initial cost at each iteration.
    pub mean_cost: Vec<f64>,
    /// Mean wall time per iteration, seconds.
    pub mean_iteration_seconds: f64,
    pub aborted: usize,
    pub converged: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub budget: usize,
}

struct Outcome {
    initial_error: f64,
    final_error: f64,
    errors: Vec<f64>,
    costs: Vec<f64>,
    seconds: f64,
    iterations: usize,
    aborted: bool,
    converged: bool,
}

fn pad(mut v: Vec<f64>, len: usize) -> Vec<f64> {
    let last = *v.last().expect("non-empty curve");
    v.resize(len, last);
    v.truncate(len);
    v
}

fn summarize(result: Result<FitResult>, truth: &Shape, initial_error: f64, len: usize) -> Result<Outcome> {
    let failed = |aborted: bool| Outcome {
        initial_error,
        final_error: initial_error,
        errors: vec![initial_error; len],
        costs: vec![1.0; len],
        seconds: 0.0,
        iterations: 0,
        aborted,
        converged: false,
    };
    let fit = match result {
        Ok(f) => f,
        Err(e) => {
            log::warn!("fit failed: {e}");
            return Ok(failed(true));
        }
    };
    if let Some(reason) = &fit.aborted {
        log::debug!("fit aborted: {reason}");
        return Ok(failed(true));
    }
    let errors = fit
        .shapes
        .iter()
        .map(|s| normalized_p2p_error(s, truth))
        .collect::<Result<Vec<_>>>()?;
    let final_error = *errors.last().expect("trace has the initial entry");
    Ok(Outcome {
        initial_error,
        final_error,
        errors: pad(errors, len),
        costs: fit.padded_costs(len),
        seconds: fit.iteration_seconds.iter().sum(),
        iterations: fit.iteration_seconds.len(),
        aborted: false,
        converged: fit.converged,
    })
}

/// Seeded generator for one (noise level, image, trial) initialization,
/// shared by every algorithm.
pub fn trial_rng(seed: u64, noise_index: usize, image: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((noise_index as u64) << 48) | ((image as u64) << 16) | trial as u64);
    rng
}

/// Runs every configuration of `spec` on `data`, parallel over (image, trial).
pub fn run_experiment(bundle: &AamBundle, data: &[AnnotatedImage], spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    if data.is_empty() {
        return Err(AamError::InsufficientData("empty benchmark dataset".into()));
    }
    let model = &bundle.finest().shape;
    let len = spec.budget() + 1;

    // Initializations per noise level, identical for every algorithm.
    let mut inits: Vec<Vec<(Shape, f64)>> = Vec::with_capacity(spec.noise.len());
    for (ni, &noise) in spec.noise.iter().enumerate() {
        let mut level = Vec::with_capacity(data.len() * spec.trials);
        for (i, item) in data.iter().enumerate() {
            for t in 0..spec.trials {
                let mut rng = trial_rng(spec.seed, ni, i, t);
                let p = perturb_initialization(&item.shape, model, noise, &mut rng)?;
                let shape = model.instance(&p)?;
                let err = normalized_p2p_error(&shape, &item.shape)?;
                level.push((shape, err));
            }
        }
        inits.push(level);
    }

    let mut runs = Vec::new();
    for run in spec.runs()? {
        let fitter = Fitter::new(bundle, &run.config)?;
        let outcomes: Vec<Outcome> = inits[run.noise_index]
            .par_iter()
            .enumerate()
            .map(|(k, (init, err))| {
                let truth = &data[k / spec.trials];
                summarize(fitter.fit(&truth.image, init), &truth.shape, *err, len)
            })
            .collect::<Result<_>>()?;

        let count = outcomes.len() as f64;
        let final_errors: Vec<f64> = outcomes.iter().map(|o| o.final_error).collect();
        let mut mean_error = vec![0.0; len];
        let mut mean_cost = vec![0.0; len];
        for o in &outcomes {
            for j in 0..len {
                mean_error[j] += o.errors[j];
                mean_cost[j] += o.costs[j];
            }
        }
        mean_error.iter_mut().for_each(|v| *v /= count);
        mean_cost.iter_mut().for_each(|v| *v /= count);
        let iterations: usize = outcomes.iter().map(|o| o.iterations).sum();
        let seconds: f64 = outcomes.iter().map(|o| o.seconds).sum();
        runs.push(RunResult {
            label: run.label,
            noise: run.noise,
            sampling_rate: run.config.sampling_rate,
            stats: ErrorStats::from_errors(&final_errors)?,
            initial_errors: outcomes.iter().map(|o| o.initial_error).collect(),
            final_errors,
            mean_error,
            mean_cost,
            mean_iteration_seconds: if iterations > 0 { seconds / iterations as f64 } else { 0.0 },
            aborted: outcomes.iter().filter(|o| o.aborted).count(),
            converged: outcomes.iter().filter(|o| o.converged).count(),
        });
    }
    Ok(ExperimentResult {
        runs,
        budget: spec.budget(),
    })
}

fn csv_error(e: csv::Error) -> AamError {
    AamError::Format(format!("csv: {e}"))
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

impl ExperimentResult {
    pub fn run(&self, label: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.label == label)
    }

    /// `algorithm,p02,p03,p04,mean,std,median`.
    pub fn stats_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["algorithm", "p02", "p03", "p04", "mean", "std", "median"])
            .map_err(csv_error)?;
        for r in &self.runs {
            let s = &r.stats;
            w.write_record([
                r.label.clone(),
                f6(s.p02),
                f6(s.p03),
                f6(s.p04),
                f6(s.mean),
                f6(s.std),
                f6(s.median),
            ])
            .map_err(csv_error)?;
        }
        into_string(w)
    }

    /// `algorithm,iteration,mean_error,mean_cost`.
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["algorithm", "iteration", "mean_error", "mean_cost"])
            .map_err(csv_error)?;
        for r in &self.runs {
            for (j, (e, c)) in r.mean_error.iter().zip(&r.mean_cost).enumerate() {
                w.write_record([r.label.clone(), j.to_string(), f6(*e), f6(*c)])
                    .map_err(csv_error)?;
            }
        }
        into_string(w)
    }

    /// Writes `stats.csv` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("stats.csv"), self.stats_csv()?)?;
        fs::write(dir.join("curves.csv"), self.curves_csv()?)?;
        Ok(())
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| AamError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AamError::Format(e.to_string()))
}
