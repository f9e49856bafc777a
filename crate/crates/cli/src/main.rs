//! `aam-cgd`: train, fit, synthesize and benchmark active appearance models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aam_cgd::bundle_io::{load_bundle, save_bundle};
use aam_cgd::dataset::{load_dataset, read_pts, save_dataset};
use aam_cgd::experiment::{normalized_p2p_error, perturb_initialization, run_experiment, ExperimentSpec};
use aam_cgd::fitting::{fit, step_complexity, FitConfig, FitResult};
use aam_cgd::model::FeatureExtractor;
use aam_cgd::raster::Raster;
use aam_cgd::shape::{Components, Shape};
use aam_cgd::synthesis::{procedural_corpus, synthesize_dataset, ProceduralSpec, SynthOptions};
use aam_cgd::training::{train, TrainConfig};
use aam_cgd::{AamError, ErrorKind, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "aam-cgd", version, about = "Active appearance model fitting with compositional gradient descent")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a multi-scale model from a directory of annotated images.
    Train(TrainArgs),
    /// Fit a model to one image and write the iteration trace.
    Fit(FitArgs),
    /// Render a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Run a benchmark experiment.
    Bench(BenchArgs),
    /// Print the contents of a model bundle.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pyramid scales, coarse to fine.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0])]
    scales: Vec<f64>,
    /// Retained appearance variance.
    #[arg(long, default_value_t = 0.75)]
    variance: f64,
    /// Retained shape variance.
    #[arg(long, default_value_t = 0.95)]
    shape_variance: f64,
    #[arg(long, default_value = "grayscale")]
    features: String,
    #[arg(long, default_value_t = 150.0)]
    face_size: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// `pts`, `pts:FILE` or `perturb:PCT`.
    #[arg(long, default_value = "perturb:0.05")]
    init: String,
    /// Algorithm selector `CF_TC_OM[_OS]`.
    #[arg(long)]
    algo: Option<String>,
    /// Full fitting configuration (TOML or JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Iterations per scale, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    iters: Option<Vec<usize>>,
    #[arg(long)]
    sampling: Option<f64>,
    #[arg(long, env = "AAM_CGD_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Render from this bundle instead of the built-in generator.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Standard deviation of additive pixel noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Maximum in-plane rotation, radians.
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.0)]
    scale_jitter: f64,
    /// Face size of the built-in generator.
    #[arg(long, default_value_t = 150.0)]
    face_size: f64,
    #[arg(long, env = "AAM_CGD_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Experiment specification (JSON).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "AAM_CGD_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    bundle: PathBuf,
}

fn exit_code(e: &AamError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AamError::Config(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let extractor: FeatureExtractor = args.features.parse()?;
    let config = TrainConfig {
        scales: args.scales.clone(),
        face_size: args.face_size,
        shape_components: Components::VarianceRatio(args.shape_variance),
        appearance_components: Components::VarianceRatio(args.variance),
        extractor,
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = load_dataset(&args.data)?;
    let (bundle, report) = train(&data.images, &config)?;
    save_bundle(&bundle, &args.out)?;
    println!(
        "trained on {} images, {} warnings; shape retained {:.4}",
        data.images.len(),
        data.warnings.len(),
        report.shape.retained_ratio
    );
    for l in &report.levels {
        println!(
            "scale {}: n={} m={} F={} retained={:.4}",
            l.scale, l.n, l.m, l.f, l.appearance.retained_ratio
        );
    }
    Ok(())
}

fn fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = read_text(path)?;
            if path.extension().is_some_and(|e| e == "json") {
                FitConfig::from_json_str(&text)?
            } else {
                FitConfig::from_toml_str(&text)?
            }
        }
        None => FitConfig::default(),
    };
    if let Some(sel) = &args.algo {
        cfg = cfg.with_algorithm(sel.parse()?);
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(r) = args.rho {
        cfg.rho = r;
    }
    if let Some(it) = &args.iters {
        cfg.iters_per_scale = it.clone();
    }
    if let Some(s) = args.sampling {
        cfg.sampling_rate = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace(path: &Path, result: &FitResult, truth: Option<&Shape>) -> Result<()> {
    let mut out = String::from("iteration,level,cost,normalized_cost,error");
    for i in 0..result.shapes[0].n_points() {
        out.push_str(&format!(",x{i},y{i}"));
    }
    out.push('\n');
    let normalized = result.normalized_costs();
    for (k, shape) in result.shapes.iter().enumerate() {
        let err = match truth {
            Some(t) => format!("{:.6}", normalized_p2p_error(shape, t)?),
            None => String::new(),
        };
        out.push_str(&format!(
            "{k},{},{:.6e},{:.6},{err}",
            result.levels[k], result.costs[k], normalized[k]
        ));
        for v in shape.as_vector().iter() {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = fit_config(args)?;
    let bundle = load_bundle(&args.bundle)?;
    let image = Raster::load(&args.image)?;
    let sibling = args.image.with_extension("pts");
    let truth = sibling.is_file().then(|| read_pts(&sibling)).transpose()?;
    let model = &bundle.finest().shape;
    let init = if args.init == "pts" {
        truth
            .clone()
            .ok_or_else(|| AamError::Input(format!("{} not found", sibling.display())))?
    } else if let Some(path) = args.init.strip_prefix("pts:") {
        read_pts(Path::new(path))?
    } else if let Some(pct) = args.init.strip_prefix("perturb:") {
        let pct: f64 = pct
            .parse()
            .map_err(|_| AamError::Config(format!("bad perturbation '{pct}'")))?;
        let t = truth
            .as_ref()
            .ok_or_else(|| AamError::Input(format!("perturbation needs {}", sibling.display())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
        model.instance(&perturb_initialization(t, model, pct, &mut rng)?)?
    } else {
        return Err(AamError::Config(format!(
            "bad --init '{}' (expected pts, pts:FILE or perturb:PCT)",
            args.init
        )));
    };
    let result = fit(&bundle, &image, &init, &cfg)?;
    let (cx, _) = step_complexity(&cfg, model.n_params(), bundle.finest().appearance.n_components(), bundle.finest().appearance.len())?;
    println!("{} {} iterations, complexity {cx}", result.algorithm, result.iterations());
    if let Some(t) = &truth {
        println!(
            "error: initial {:.6} final {:.6}",
            normalized_p2p_error(result.initial_shape(), t)?,
            normalized_p2p_error(result.final_shape(), t)?
        );
    }
    if let Some(path) = &args.out {
        write_trace(path, &result, truth.as_ref())?;
    }
    if let Some(reason) = &result.aborted {
        return Err(AamError::Numerical(format!("fit aborted: {reason}")));
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        noise_sigma: args.noise,
        rotation: args.rotation,
        scale_jitter: args.scale_jitter,
        ..SynthOptions::default()
    };
    let seed = args.seed.unwrap_or(0);
    let images = match &args.bundle {
        Some(path) => synthesize_dataset(&load_bundle(path)?, args.count, &opts, seed)?,
        None => {
            let spec = ProceduralSpec {
                face_size: args.face_size,
                seed,
                ..ProceduralSpec::default()
            };
            procedural_corpus(&spec, args.count, &opts, seed)?
        }
    };
    save_dataset(&args.out, &images)?;
    println!("wrote {} images to {}", images.len(), args.out.display());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => ExperimentSpec::from_json_str(&read_text(path)?)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let bundle = load_bundle(&args.bundle)?;
    let data = load_dataset(&args.data)?;
    let result = run_experiment(&bundle, &data.images, &spec)?;
    result.write(&args.out)?;
    println!(
        "images: {}  fits per algorithm: {}  warnings: {}",
        data.images.len(),
        data.images.len() * spec.trials,
        data.warnings.len()
    );
    println!("{:<28} {:>8} {:>8} {:>8} {:>10} {:>10} {:>8}", "algorithm", "p02", "p03", "p04", "mean", "median", "aborted");
    for r in &result.runs {
        println!(
            "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>10.6} {:>10.6} {:>8}",
            r.label, r.stats.p02, r.stats.p03, r.stats.p04, r.stats.mean, r.stats.median, r.aborted
        );
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    println!(
        "features {}  face size {}  margin {}  trained on {} images",
        bundle.extractor.id(),
        bundle.face_size,
        bundle.margin,
        bundle.training.n_images
    );
    println!("landmarks {}", bundle.n_points());
    for level in &bundle.levels {
        println!(
            "scale {}: n={} m={} F={} frame={}x{} triangles={} image_noise={:.3e}",
            level.scale,
            level.shape.n_params(),
            level.appearance.n_components(),
            level.appearance.len(),
            level.frame.width,
            level.frame.height,
            level.triangulation.triangles.len(),
            level.appearance.image_noise
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(AamError::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    pool.build_global()
        .map_err(|e| AamError::Config(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
