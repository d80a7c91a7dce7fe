//! Command-line interface for the depth-enhancement pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use signet::ablate::{run_ablation, AblationVariant};
use signet::config::ConfigFile;
use signet::data::{read_depth_png, read_rgb_png, write_depth_png, write_rgb_png, DepthMap, ValidPixelSet};
use signet::degradation::{apply_degradation, DegradationKernel, NoiseModel};
use signet::densify::{
    densify_colorization, densify_morphological, ColorizationParams, FinalFill, MorphParams,
};
use signet::error::{Result, SignetError};
use signet::eval::{evaluate, rows_to_csv};
use signet::metrics::compute_metrics;
use signet::model::{load_checkpoint, save_checkpoint, SigNet};
use signet::synth::{generate_scenes, SyntheticScene};
use signet::train::{prepare_samples, train};

#[derive(Parser)]
#[command(
    name = "signet",
    about = "Depth completion as degradation-aware depth enhancement",
    version
)]
struct Cli {
    /// Disable data-parallel execution (single-threaded reference path).
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic RGB-D scenes into a directory.
    Synth(SynthArgs),
    /// Densify a sparse depth PNG with a classical fill.
    Densify(DensifyArgs),
    /// Apply a degradation kernel (+ noise) to a dense depth PNG.
    Degrade(DegradeArgs),
    /// Train on a directory of scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a density sweep.
    Eval(EvalArgs),
    /// Train and score one ablation variant.
    Ablate(AblateArgs),
    /// Compute metrics between a prediction and ground truth.
    Metrics(MetricsArgs),
    /// Render a training-log or evaluation CSV as a PNG plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DensifyArgs {
    /// morph | colorize
    #[arg(long)]
    method: String,
    #[arg(long = "in")]
    input: PathBuf,
    /// RGB guide (required for colorize).
    #[arg(long)]
    rgb: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Morph: diamond radius per pass.
    #[arg(long, default_value_t = 2)]
    radius: usize,
    /// Morph: dilation passes.
    #[arg(long, default_value_t = 3)]
    passes: usize,
    /// Morph: nearest | median straggler fill.
    #[arg(long, default_value = "nearest")]
    final_fill: String,
    /// Colorize: affinity sigma on [0,1] intensities.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Colorize: relative residual target.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Colorize: iteration cap.
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// delta | uniform | path to a whitespace-separated k x k weight file.
    #[arg(long)]
    kernel: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value config file (train + network keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of NNNN_depth.png / NNNN_rgb.png pairs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory (one checkpoint per epoch).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint produced by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the step log CSV here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Percent densities, e.g. 1,5,35,65,95.
    #[arg(long, default_value = "1,5,35,65,95")]
    densities: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// i | ii | iii | iv | v | vi
    #[arg(long)]
    variant: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of scenes held out for scoring.
    #[arg(long, default_value_t = 0.5)]
    heldout_fraction: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Training-log CSV (step,epoch,l_r_mm,l_d_mm,l_t_mm).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Evaluation CSV (density sweep).
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        signet::par::set_parallel(false);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => ConfigFile::parse(""),
    }
}

fn scene_paths(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut depths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| SignetError::io(dir, e))? {
        let entry = entry.map_err(|e| SignetError::io(dir, e))?;
        let path = entry.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(prefix) = name.strip_suffix("_depth.png") {
            depths.push((prefix.to_string(), path.clone()));
        }
    }
    depths.sort();
    let mut pairs = Vec::with_capacity(depths.len());
    for (prefix, depth_path) in depths {
        let rgb_path = dir.join(format!("{prefix}_rgb.png"));
        if !rgb_path.exists() {
            return Err(SignetError::Config(format!(
                "missing RGB file for scene {prefix} in {}",
                dir.display()
            )));
        }
        pairs.push((depth_path, rgb_path));
    }
    if pairs.is_empty() {
        return Err(SignetError::EmptyInput {
            context: format!("no *_depth.png scenes in {}", dir.display()),
        });
    }
    Ok(pairs)
}

fn load_scenes(dir: &Path) -> Result<Vec<SyntheticScene>> {
    scene_paths(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, (dp, rp))| {
            let sparse = read_depth_png(&dp)?;
            let gt = DepthMap::new(sparse.height(), sparse.width(), sparse.values().to_vec())?;
            let rgb = read_rgb_png(&rp)?;
            if gt.height() != rgb.height() || gt.width() != rgb.width() {
                return Err(SignetError::shape(
                    format!("scene {}", dp.display()),
                    format!("{}x{}", gt.height(), gt.width()),
                    format!("{}x{}", rgb.height(), rgb.width()),
                ));
            }
            Ok(SyntheticScene {
                depth_gt: gt,
                rgb,
                scene_seed: i as u64,
            })
        })
        .collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(args) => {
            std::fs::create_dir_all(&args.out).map_err(|e| SignetError::io(&args.out, e))?;
            let scenes = generate_scenes(args.seed, args.n, args.size, args.size);
            for (i, scene) in scenes.iter().enumerate() {
                write_depth_png(&scene.depth_gt, args.out.join(format!("{i:04}_depth.png")))?;
                write_rgb_png(&scene.rgb, args.out.join(format!("{i:04}_rgb.png")))?;
            }
            println!("wrote {} scenes to {}", scenes.len(), args.out.display());
            Ok(())
        }
        Command::Densify(args) => {
            let sparse = read_depth_png(&args.input)?;
            let dense = match args.method.as_str() {
                "morph" => {
                    let params = MorphParams {
                        fill_kernel_radius: args.radius,
                        num_dilation_passes: args.passes,
                        final_fill: match args.final_fill.as_str() {
                            "nearest" => FinalFill::NearestValid,
                            "median" => FinalFill::MedianOfValid,
                            other => {
                                return Err(SignetError::Config(format!(
                                    "unknown final fill {other}"
                                )))
                            }
                        },
                    };
                    densify_morphological(&sparse, &params)?
                }
                "colorize" => {
                    let rgb_path = args.rgb.ok_or_else(|| {
                        SignetError::Config("--rgb is required for colorize".into())
                    })?;
                    let rgb = read_rgb_png(rgb_path)?;
                    let params = ColorizationParams {
                        affinity_sigma: args.sigma,
                        solver_tolerance: args.tol,
                        max_iterations: args.max_iters,
                    };
                    densify_colorization(&sparse, &rgb, &params)?
                }
                other => {
                    return Err(SignetError::Config(format!(
                        "unknown densify method {other}"
                    )))
                }
            };
            write_depth_png(&dense, &args.out)
        }
        Command::Degrade(args) => {
            let sparse = read_depth_png(&args.input)?;
            let dense = DepthMap::new(
                sparse.height(),
                sparse.width(),
                sparse.values().to_vec(),
            )?;
            let kernel = match args.kernel.as_str() {
                "delta" => DegradationKernel::delta(args.k),
                "uniform" => DegradationKernel::uniform(args.k),
                path => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| SignetError::io(path, e))?;
                    let weights: std::result::Result<Vec<f64>, _> =
                        text.split_whitespace().map(|t| t.parse()).collect();
                    let weights = weights.map_err(|_| {
                        SignetError::Config(format!("kernel file {path} must hold k*k numbers"))
                    })?;
                    DegradationKernel::new(args.k, weights)?
                }
            };
            let noise = if args.noise_sigma > 0.0 {
                NoiseModel::gaussian(args.noise_sigma)
            } else {
                NoiseModel::None
            };
            let degraded = apply_degradation(&dense, &kernel, &noise, args.seed);
            write_depth_png(&degraded, &args.out)
        }
        Command::Train(args) => {
            let file = load_config(&args.config)?;
            let net_cfg = file.network_config()?;
            let train_cfg = file.train_config()?;
            let scenes = load_scenes(&args.data)?;
            let (net, mut store) = SigNet::build(net_cfg.clone(), train_cfg.seed)?;
            let resume_state = match &args.resume {
                Some(path) => {
                    let (loaded, hash, state) = load_checkpoint(path)?;
                    if hash != net_cfg.config_hash() {
                        return Err(SignetError::Checkpoint {
                            path: path.clone(),
                            reason: "config hash mismatch".into(),
                        });
                    }
                    store = loaded;
                    state
                }
                None => None,
            };
            let samples = prepare_samples(&net, &scenes, train_cfg.density, train_cfg.seed)?;
            let outcome = train(
                &net,
                &mut store,
                &samples,
                &train_cfg,
                &net_cfg,
                Some(&args.out),
                resume_state,
                |s, _| {
                    if s.step % 10 == 0 {
                        println!(
                            "step {:>6} epoch {:>3}  l_r {:>10.3}  l_d {:>10.3}  l_t {:>10.3}",
                            s.step, s.epoch, s.l_r, s.l_d, s.l_t
                        );
                    }
                    true
                },
            )?;
            let final_path = args.out.join("final.ckpt");
            save_checkpoint(&final_path, &store, net_cfg.config_hash(), None)?;
            if let Some(log_path) = args.log {
                std::fs::write(&log_path, outcome.log.to_csv())
                    .map_err(|e| SignetError::io(&log_path, e))?;
            }
            println!(
                "trained {} steps over {} epochs; final checkpoint {}",
                outcome.final_step,
                outcome.final_epoch,
                final_path.display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            let file = load_config(&args.config)?;
            let net_cfg = file.network_config()?;
            let (store, hash, _) = load_checkpoint(&args.ckpt)?;
            if hash != net_cfg.config_hash() {
                return Err(SignetError::Checkpoint {
                    path: args.ckpt.clone(),
                    reason: "config hash mismatch (pass the matching --config)".into(),
                });
            }
            let (net, _) = SigNet::build(net_cfg, 0)?;
            let scenes = load_scenes(&args.data)?;
            let densities: Result<Vec<f64>> = args
                .densities
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map(|p| p / 100.0)
                        .map_err(|_| SignetError::Config(format!("bad density {t:?}")))
                })
                .collect();
            let rows = evaluate(&net, &store, &scenes, &densities?, args.seed)?;
            let csv = rows_to_csv(&rows);
            match args.out {
                Some(path) => {
                    std::fs::write(&path, csv).map_err(|e| SignetError::io(&path, e))?
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Ablate(args) => {
            let file = load_config(&args.config)?;
            let net_cfg = file.network_config()?;
            let train_cfg = file.train_config()?;
            let variant = AblationVariant::parse(&args.variant)?;
            let scenes = load_scenes(&args.data)?;
            if scenes.len() < 2 {
                return Err(SignetError::EmptyInput {
                    context: "ablation needs at least two scenes".into(),
                });
            }
            let held = ((scenes.len() as f64 * args.heldout_fraction) as usize)
                .clamp(1, scenes.len() - 1);
            let (train_scenes, heldout) = scenes.split_at(scenes.len() - held);
            let outcome = run_ablation(variant, &net_cfg, &train_cfg, train_scenes, heldout)?;
            let csv = rows_to_csv(&outcome.rows);
            println!(
                "variant {}: held-out rmse {:.3} mm, rel {:.5}",
                variant.as_str(),
                outcome.heldout.rmse,
                outcome.heldout.rel
            );
            if let Some(path) = args.out {
                std::fs::write(&path, csv).map_err(|e| SignetError::io(&path, e))?;
            }
            Ok(())
        }
        Command::Metrics(args) => {
            let pred_sparse = read_depth_png(&args.pred)?;
            let gt_sparse = read_depth_png(&args.gt)?;
            let pred = DepthMap::new(
                pred_sparse.height(),
                pred_sparse.width(),
                pred_sparse.values().to_vec(),
            )?;
            let gt = DepthMap::new(
                gt_sparse.height(),
                gt_sparse.width(),
                gt_sparse.values().to_vec(),
            )?;
            let valid = ValidPixelSet::from_positive(&gt);
            let m = compute_metrics(&pred, &gt, &valid)?;
            println!("rmse_mm,rel,d1,d2,d3");
            println!(
                "{},{},{},{},{}",
                m.rmse, m.rel, m.delta[0], m.delta[1], m.delta[2]
            );
            Ok(())
        }
        Command::Plot(args) => match (&args.log, &args.sweep) {
            (Some(log), None) => {
                let csv =
                    std::fs::read_to_string(log).map_err(|e| SignetError::io(log, e))?;
                signet::plot::plot_training_log(&csv, &args.out)
            }
            (None, Some(sweep)) => {
                let csv =
                    std::fs::read_to_string(sweep).map_err(|e| SignetError::io(sweep, e))?;
                signet::plot::plot_rmse_vs_density(&csv, &args.out)
            }
            _ => Err(SignetError::Config(
                "pass exactly one of --log or --sweep".into(),
            )),
        },
    }
}
