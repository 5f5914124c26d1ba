//! Command-line entry point: dataset synthesis, training, inference,
//! evaluation and the plan A/B ablation.
//!
//! Flags can come from a flat `key=value` config file via `--config`;
//! explicit flags win over file values, file values win over defaults, and
//! the fully resolved configuration is echoed into the output directory.
//! Relative output directories resolve under `$DEHAZE_OUT_ROOT` when set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use dehaze::error::{DehazeError, Result};
use dehaze::eval::{compare_table, evaluate, Restorer, Which};
use dehaze::haze::{build_dataset, write_procedural_sources, DatasetManifest, Split, SynthesisConfig};
use dehaze::image::Image;
use dehaze::loss::{FeatureExtractor, LossWeights, Plan};
use dehaze::model::ModelConfig;
use dehaze::train::{load_checkpoint, train, TrainConfig, TrainState};

const OUT_ROOT_ENV: &str = "DEHAZE_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "dehaze",
    about = "Coarse-to-fine adversarial single-image dehazing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired hazy/clear dataset with the scattering model
    Synthesize(SynthesizeArgs),
    /// Train the generator/critic pair on a synthesized dataset
    Train(TrainArgs),
    /// Run a trained checkpoint on arbitrary images
    Dehaze(DehazeArgs),
    /// Compute PSNR/SSIM of a checkpoint over a manifest
    Evaluate(EvaluateArgs),
    /// Train and evaluate both loss-allocation plans with a shared seed
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Directory of `<id>_clear.png` + `<id>_depth.{png,raw}` sources;
    /// omitted: procedural scenes are generated under the output directory
    #[arg(long)]
    source_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Flat key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training pairs to synthesize
    #[arg(long)]
    train_count: Option<usize>,
    /// Test pairs to synthesize
    #[arg(long)]
    test_count: Option<usize>,
    /// Atmospheric light range [default: 0.6..1.0]
    #[arg(long)]
    a_min: Option<f64>,
    #[arg(long)]
    a_max: Option<f64>,
    /// Scattering coefficient range for the test split [default: 1.0..1.6]
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    /// Scattering coefficient range for the train split [default: 0.8..1.6]
    #[arg(long)]
    beta_train_min: Option<f64>,
    #[arg(long)]
    beta_train_max: Option<f64>,
    /// Square crop written per pair [default: 256]
    #[arg(long)]
    crop_size: Option<usize>,
    /// Fraction of sources assigned to the train partition [default: 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Procedural scene count when no source dir is given [default: 10]
    #[arg(long)]
    scene_count: Option<usize>,
    /// Procedural scene side length [default: 320]
    #[arg(long)]
    scene_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Flat key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimization steps [default: 600000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Square crop fed to the networks [default: 256]
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Critic updates per generator update [default: 1]
    #[arg(long)]
    critic_steps: Option<usize>,
    /// Base Adam learning rate [default: 0.0002]
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Channel-width multiplier for desk-scale models [default: 1]
    #[arg(long)]
    width_mult: Option<f64>,
    /// Stride-2 critic layers; smaller images need fewer [default: 4]
    #[arg(long)]
    critic_layers: Option<usize>,
    /// Loss allocation plan, A or B [default: B]
    #[arg(long)]
    plan: Option<String>,
    /// MSE weight [default: 10]
    #[arg(long)]
    lambda_mse: Option<f64>,
    /// SSIM-loss weight [default: 10]
    #[arg(long)]
    lambda_ssim: Option<f64>,
    /// MAD weight [default: 100]
    #[arg(long)]
    lambda_mad: Option<f64>,
    /// Perceptual weight [default: 0.001]
    #[arg(long)]
    lambda_perceptual: Option<f64>,
    /// Gradient-penalty weight [default: 10]
    #[arg(long)]
    lambda_gp: Option<f64>,
    /// Perceptual feature-extractor weights; omitted: bundled fixed-seed extractor
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a loss line every N steps [default: 10]
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct DehazeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the coarse restoration per input
    #[arg(long)]
    coarse: bool,
    /// Input images
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint; required unless --identity is set
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate the identity pass-through instead of a checkpoint
    /// (metric-wiring test hook)
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Which generator output to score: coarse, fine or both [default: both]
    #[arg(long)]
    which: Option<String>,
    /// Manifest split to score: train or test [default: test]
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Dehaze(a) => cmd_dehaze(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DehazeError::Config(_) | DehazeError::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// Flat `key=value` config file ('#' comments, blank lines ignored).
#[derive(Default)]
struct FileCfg(BTreeMap<String, String>);

impl FileCfg {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileCfg::default());
        };
        let text =
            fs::read_to_string(path).map_err(|e| DehazeError::io(path.display().to_string(), e))?;
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DehazeError::config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    ln + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FileCfg(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| DehazeError::config(format!("config key `{key}`: bad value `{raw}`"))),
        }
    }
}

/// Flag beats config file beats default.
fn pick<T: FromStr>(flag: Option<T>, cfg: &FileCfg, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.get(key)?.unwrap_or(default))
}

fn out_dir(path: &Path) -> Result<PathBuf> {
    let resolved = match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    };
    fs::create_dir_all(&resolved)
        .map_err(|e| DehazeError::io(resolved.display().to_string(), e))?;
    Ok(resolved)
}

fn echo_config(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    let path = dir.join("config_effective.txt");
    fs::write(&path, s).map_err(|e| DehazeError::io(path.display().to_string(), e))
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<()> {
    let file = FileCfg::load(args.config.as_deref())?;
    let out = out_dir(&args.out_dir)?;
    let source_dir = match args.source_dir {
        Some(d) => d,
        None => {
            let count = pick(args.scene_count, &file, "scene_count", 10)?;
            let size = pick(args.scene_size, &file, "scene_size", 320)?;
            let dir = out.join("sources");
            write_procedural_sources(&dir, count, size)?;
            dir
        }
    };
    let mut cfg = SynthesisConfig::new(source_dir, out.join("data"));
    cfg.train_count = pick(args.train_count, &file, "train_count", cfg.train_count)?;
    cfg.test_count = pick(args.test_count, &file, "test_count", cfg.test_count)?;
    cfg.a_range.0 = pick(args.a_min, &file, "a_min", cfg.a_range.0)?;
    cfg.a_range.1 = pick(args.a_max, &file, "a_max", cfg.a_range.1)?;
    cfg.beta_test.0 = pick(args.beta_min, &file, "beta_min", cfg.beta_test.0)?;
    cfg.beta_test.1 = pick(args.beta_max, &file, "beta_max", cfg.beta_test.1)?;
    cfg.beta_train.0 = pick(args.beta_train_min, &file, "beta_train_min", cfg.beta_train.0)?;
    cfg.beta_train.1 = pick(args.beta_train_max, &file, "beta_train_max", cfg.beta_train.1)?;
    cfg.crop_size = pick(args.crop_size, &file, "crop_size", cfg.crop_size)?;
    cfg.train_fraction = pick(args.train_fraction, &file, "train_fraction", cfg.train_fraction)?;
    cfg.seed = pick(args.seed, &file, "seed", cfg.seed)?;

    echo_config(
        &out,
        &[
            ("source_dir", cfg.source_dir.display().to_string()),
            ("train_count", cfg.train_count.to_string()),
            ("test_count", cfg.test_count.to_string()),
            ("a_min", cfg.a_range.0.to_string()),
            ("a_max", cfg.a_range.1.to_string()),
            ("beta_train_min", cfg.beta_train.0.to_string()),
            ("beta_train_max", cfg.beta_train.1.to_string()),
            ("beta_min", cfg.beta_test.0.to_string()),
            ("beta_max", cfg.beta_test.1.to_string()),
            ("crop_size", cfg.crop_size.to_string()),
            ("train_fraction", cfg.train_fraction.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;

    let manifest = build_dataset(&cfg)?;
    let manifest_path = out.join("manifest.txt");
    manifest.save(&manifest_path)?;
    println!(
        "synthesized {} train + {} test pairs ({} failures)",
        manifest.split_records(Split::Train).count(),
        manifest.split_records(Split::Test).count(),
        manifest.failures.len()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

struct ResolvedTrain {
    tcfg: TrainConfig,
    weights: LossWeights,
    model: ModelConfig,
    extractor: FeatureExtractor,
    log_every: usize,
}

fn resolve_train(args: &TrainArgs, plan_override: Option<Plan>) -> Result<ResolvedTrain> {
    let file = FileCfg::load(args.config.as_deref())?;
    let d = TrainConfig::default();
    let tcfg = TrainConfig {
        total_steps: pick(args.iterations, &file, "iterations", d.total_steps)?,
        batch_size: pick(args.batch_size, &file, "batch_size", d.batch_size)?,
        critic_steps: pick(args.critic_steps, &file, "critic_steps", d.critic_steps)?,
        learning_rate: pick(args.learning_rate, &file, "learning_rate", d.learning_rate)?,
        image_size: pick(args.image_size, &file, "image_size", d.image_size)?,
        checkpoint_every: pick(args.checkpoint_every, &file, "checkpoint_every", d.checkpoint_every)?,
        seed: pick(args.seed, &file, "seed", d.seed)?,
        ..d
    };
    let dw = LossWeights::default();
    let plan = match plan_override {
        Some(p) => p,
        None => {
            let raw = pick(args.plan.clone(), &file, "plan", "B".to_string())?;
            Plan::parse(&raw)
                .ok_or_else(|| DehazeError::config(format!("plan must be A or B, got `{raw}`")))?
        }
    };
    let weights = LossWeights {
        lambda_mse: pick(args.lambda_mse, &file, "lambda_mse", dw.lambda_mse)?,
        lambda_ssim: pick(args.lambda_ssim, &file, "lambda_ssim", dw.lambda_ssim)?,
        lambda_mad: pick(args.lambda_mad, &file, "lambda_mad", dw.lambda_mad)?,
        lambda_perceptual: pick(
            args.lambda_perceptual,
            &file,
            "lambda_perceptual",
            dw.lambda_perceptual,
        )?,
        lambda_gp: pick(args.lambda_gp, &file, "lambda_gp", dw.lambda_gp)?,
        plan,
    };
    weights.validate()?;
    let model = ModelConfig {
        width_mult: pick(args.width_mult, &file, "width_mult", 1.0)?,
        critic_layers: pick(args.critic_layers, &file, "critic_layers", 4)?,
        ..ModelConfig::default()
    };
    if model.width_mult <= 0.0 {
        return Err(DehazeError::config("width_mult must be positive"));
    }
    if model.critic_layers == 0 || model.critic_layers > 4 {
        return Err(DehazeError::config("critic_layers must be between 1 and 4"));
    }
    if tcfg.image_size < 2usize.pow(model.critic_layers as u32) * 2 {
        return Err(DehazeError::config(format!(
            "image_size {} too small for {} critic layers; lower --critic-layers",
            tcfg.image_size, model.critic_layers
        )));
    }
    let extractor = match &args.extractor {
        Some(p) => FeatureExtractor::load(p)?,
        None => FeatureExtractor::bundled(),
    };
    Ok(ResolvedTrain {
        tcfg,
        weights,
        model,
        extractor,
        log_every: pick(args.log_every, &file, "log_every", 10)?,
    })
}

fn run_train(args: &TrainArgs, plan_override: Option<Plan>, out: &Path) -> Result<PathBuf> {
    let r = resolve_train(args, plan_override)?;
    r.tcfg.validate()?;
    if !args.manifest.exists() {
        return Err(DehazeError::config(format!(
            "manifest not found: {}",
            args.manifest.display()
        )));
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    echo_config(
        out,
        &[
            ("manifest", args.manifest.display().to_string()),
            ("iterations", r.tcfg.total_steps.to_string()),
            ("batch_size", r.tcfg.batch_size.to_string()),
            ("critic_steps", r.tcfg.critic_steps.to_string()),
            ("learning_rate", r.tcfg.learning_rate.to_string()),
            ("image_size", r.tcfg.image_size.to_string()),
            ("checkpoint_every", r.tcfg.checkpoint_every.to_string()),
            ("seed", r.tcfg.seed.to_string()),
            ("width_mult", r.model.width_mult.to_string()),
            ("critic_layers", r.model.critic_layers.to_string()),
            ("plan", r.weights.plan.as_str().to_string()),
            ("lambda_mse", r.weights.lambda_mse.to_string()),
            ("lambda_ssim", r.weights.lambda_ssim.to_string()),
            ("lambda_mad", r.weights.lambda_mad.to_string()),
            ("lambda_perceptual", r.weights.lambda_perceptual.to_string()),
            ("lambda_gp", r.weights.lambda_gp.to_string()),
            ("log_every", r.log_every.to_string()),
        ],
    )?;
    let mut state = match &args.resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::init(r.model, r.tcfg.seed),
    };
    let log_every = r.log_every.max(1);
    let path = train(
        &mut state,
        &manifest,
        &r.tcfg,
        &r.weights,
        &r.extractor,
        out,
        &mut |step, bundle| {
            if step % log_every == 0 {
                println!(
                    "step {step} total_gen {:.6} total_critic {:.6} mse {:.6} mad {:.6}",
                    bundle.total_generator, bundle.total_critic, bundle.mse, bundle.mad
                );
            }
        },
    )?;
    println!("checkpoint: {}", path.display());
    Ok(path)
}

fn cmd_train(args: TrainArgs) -> Result<PathBuf> {
    let out = out_dir(&args.out_dir)?;
    run_train(&args, None, &out)
}

fn cmd_dehaze(args: DehazeArgs) -> Result<()> {
    let out = out_dir(&args.out_dir)?;
    let restorer = Restorer::from_checkpoint(&args.checkpoint)?;
    let mut failures = 0usize;
    for input in &args.inputs {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let result = Image::load(input).and_then(|img| {
            let (coarse, fine) = restorer.restore_image(&img)?;
            fine.save_png(&out.join(format!("{stem}_dehazed.png")))?;
            if args.coarse {
                coarse.save_png(&out.join(format!("{stem}_coarse.png")))?;
            }
            Ok(())
        });
        if let Err(e) = result {
            eprintln!("{}: {e}", input.display());
            failures += 1;
        }
    }
    println!(
        "processed {} of {} images, {} failures",
        args.inputs.len() - failures,
        args.inputs.len(),
        failures
    );
    if failures > 0 {
        return Err(DehazeError::invalid(format!(
            "{failures} input(s) could not be processed"
        )));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let out = out_dir(&args.out_dir)?;
    let restorer = match (&args.checkpoint, args.identity) {
        (_, true) => Restorer::Identity,
        (Some(p), false) => Restorer::from_checkpoint(p)?,
        (None, false) => {
            return Err(DehazeError::config(
                "either --checkpoint or --identity is required",
            ))
        }
    };
    let which_raw = args.which.as_deref().unwrap_or("both");
    let which = Which::parse(which_raw).ok_or_else(|| {
        DehazeError::config(format!(
            "--which must be coarse, fine or both, got `{which_raw}`"
        ))
    })?;
    let split = Split::parse(args.split.as_deref().unwrap_or("test"))?;
    let manifest = DatasetManifest::load(&args.manifest)?;

    let reports = evaluate(&restorer, &manifest, split, which)?;
    for (label, report) in &reports {
        let path = out.join(format!("report_{label}.txt"));
        fs::write(&path, report.to_text())
            .map_err(|e| DehazeError::io(path.display().to_string(), e))?;
    }
    let table = compare_table(&reports)?;
    let table_path = out.join("comparison.txt");
    fs::write(&table_path, &table)
        .map_err(|e| DehazeError::io(table_path.display().to_string(), e))?;
    print!("{table}");
    println!("report: {}", table_path.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let out = out_dir(&args.train.out_dir)?;
    let mut rows = Vec::new();
    for plan in [Plan::A, Plan::B] {
        let run_dir = out.join(format!("plan{}", plan.as_str()));
        fs::create_dir_all(&run_dir)
            .map_err(|e| DehazeError::io(run_dir.display().to_string(), e))?;
        let ckpt = run_train(&args.train, Some(plan), &run_dir)?;
        let restorer = Restorer::from_checkpoint(&ckpt)?;
        let manifest = DatasetManifest::load(&args.train.manifest)?;
        let mut reports = evaluate(&restorer, &manifest, Split::Test, Which::Fine)?;
        let (_, report) = reports.remove(0);
        rows.push((format!("plan{}", plan.as_str()), report));
    }
    let table = compare_table(&rows)?;
    let path = out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| DehazeError::io(path.display().to_string(), e))?;
    print!("{table}");
    println!("report: {}", path.display());
    Ok(())
}
