use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mimkit::data::Dataset;
use mimkit::diagnostics::grad_check_suite;
use mimkit::eval::{extract_features, mask_sweep, probe_accuracy, sweep_csv, FeatureSource, ProbeConfig, SweepSpec};
use mimkit::io::{
    load_checkpoint, load_config, load_teacher, save_checkpoint, trainer_from_config, write_atomic, Checkpoint,
    ExperimentConfig,
};
use mimkit::mask::MaskStrategy;
use mimkit::teacher::TeacherSpec;
use mimkit::tensor::DType;
use mimkit::train::{params_digest, pretrain_teacher_toy, ClassifierConfig};
use mimkit::vit::ViTConfig;
use mimkit::Error;

const SEED_VAR: &str = "MIMKIT_SEED";

#[derive(Parser, Debug)]
#[command(name = "mimkit", version, about = "Masked image modeling with feature distillation")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config file (key=value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; takes precedence over MIMKIT_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a student and write its checkpoint and loss record.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Override the number of optimisation steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "student.mimd")]
        checkpoint: PathBuf,
        /// RunRecord CSV (step,lr,loss).
        #[arg(long, default_value = "run_record.csv")]
        record: PathBuf,
    },
    /// Train a toy classifier to use as a frozen teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value = "teacher.mimd")]
        out: PathBuf,
    },
    /// Fit a linear probe on frozen checkpoint features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fraction of each class held out for scoring.
        #[arg(long, default_value_t = 0.25)]
        held_out: f64,
        #[arg(long, default_value = "mean_patches")]
        features: FeatureSource,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
    },
    /// Train one short run per (strategy, ratio, seed) cell and write a CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "blockwise,random")]
        strategies: Vec<MaskStrategy>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5,0.6,0.7,0.8")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        steps_per_cell: usize,
        #[arg(long, default_value_t = 0.25)]
        held_out: f64,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck,
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match dispatch(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::Pretrain {
            common,
            steps,
            checkpoint,
            record,
        } => pretrain(&common, steps, &checkpoint, &record)?,
        Command::PretrainTeacher { common, steps, lr, out } => pretrain_teacher(&common, steps, lr, &out)?,
        Command::Probe {
            common,
            checkpoint,
            held_out,
            features,
            l2,
        } => probe(&common, &checkpoint, held_out, features, l2)?,
        Command::Sweep {
            common,
            strategies,
            ratios,
            seeds,
            steps_per_cell,
            held_out,
            out,
        } => {
            let spec = SweepSpec {
                strategies,
                ratios,
                seeds,
                steps_per_cell,
            };
            sweep(&common, spec, held_out, &out)?
        }
        Command::GradCheck => return grad_check(),
        Command::Inspect { checkpoint } => inspect(&checkpoint)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Config from file (or defaults) with the seed resolved.
fn experiment(common: &Common) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let env_seed = match std::env::var(SEED_VAR) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_VAR} must be an unsigned integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn held_out_split(data: &Dataset<f32>, fraction: f64, seed: u64) -> CliResult<(Dataset<f32>, Dataset<f32>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("--held-out must be in (0, 1), got {fraction}")));
    }
    Ok(data.split(fraction, seed))
}

fn pretrain(common: &Common, steps: Option<usize>, checkpoint: &Path, record: &Path) -> CliResult<()> {
    let mut config = experiment(common)?;
    if steps.is_some() {
        config.train.steps = steps;
    }
    let data = config.data.load::<f32>()?;
    let mut trainer = trainer_from_config::<f32>(&config, data.len())?;
    info!(
        "pretraining {} steps, batch {}, {} images",
        trainer.schedule.total_steps,
        trainer.schedule.batch_size,
        data.len()
    );
    trainer.run_to_end(&data)?;
    let ck = Checkpoint::new(
        &trainer.params,
        Some(&trainer.opt),
        &config,
        &trainer.model,
        config.train.seed,
        trainer.opt.step,
    )?;
    save_checkpoint(checkpoint, &ck)?;
    write_atomic(record, trainer.record.to_csv().as_bytes())?;
    println!(
        "steps {} final_loss {} params_digest {}",
        trainer.opt.step,
        trainer.record.final_loss().unwrap_or(f64::NAN),
        trainer.record.params_digest
    );
    Ok(())
}

fn pretrain_teacher(common: &Common, steps: usize, lr: f64, out: &Path) -> CliResult<()> {
    let config = experiment(common)?;
    let data = config.data.load::<f32>()?;
    let model = ViTConfig {
        target_dim: data.num_classes,
        ..config.model.clone()
    };
    let cls = ClassifierConfig {
        steps,
        batch_size: config.train.batch_size.min(data.len()),
        peak_lr: lr,
        adam: config.train.adam(),
        grad_clip_norm: config.train.grad_clip_norm,
        seed: config.train.seed,
        ..ClassifierConfig::default()
    };
    let run = pretrain_teacher_toy(&data, &model, &cls)?;
    let ck = Checkpoint::new(&run.params, None, &config, &model, cls.seed, steps as u64)?;
    save_checkpoint(out, &ck)?;
    println!(
        "steps {} final_loss {} train_accuracy {} params_digest {}",
        steps,
        run.losses.last().copied().unwrap_or(f64::NAN),
        run.train_accuracy,
        params_digest(&run.params)
    );
    Ok(())
}

fn probe(common: &Common, checkpoint: &Path, held_out: f64, features: FeatureSource, l2: f64) -> CliResult<()> {
    let config = experiment(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.model()?;
    let params = ck.params::<f32>()?;
    let before = params_digest(&params);
    let data = config.data.load::<f32>()?;
    let (train, held) = held_out_split(&data, held_out, config.train.seed)?;
    let cfg = ProbeConfig {
        l2,
        feature_source: features,
        ..ProbeConfig::default()
    };
    let f_train = extract_features(&params, &model, &train.images, features)?;
    let f_held = extract_features(&params, &model, &held.images, features)?;
    let result = probe_accuracy((&f_train, &train.labels), (&f_held, &held.labels), &cfg)?;
    debug_assert_eq!(before, params_digest(&params));
    println!("feature_source {}", result.feature_source);
    println!("accuracy {}", result.accuracy);
    for (c, a) in result.per_class_accuracy.iter().enumerate() {
        println!("class {c} accuracy {a}");
    }
    Ok(())
}

fn sweep(common: &Common, spec: SweepSpec, held_out: f64, out: &Path) -> CliResult<()> {
    let config = experiment(common)?;
    let data = config.data.load::<f32>()?;
    let (train, held) = held_out_split(&data, held_out, config.train.seed)?;
    let frozen = match &config.train.teacher {
        TeacherSpec::Frozen {
            checkpoint: Some(path), ..
        } => Some(load_teacher::<f32>(path, &config.model)?),
        _ => None,
    };
    let model = config.resolved_model(frozen.as_ref().map(|(_, c)| c.hidden));
    info!("sweeping {} cells of {} steps", spec.num_cells(), spec.steps_per_cell);
    let rows = mask_sweep(
        &spec,
        &config.train,
        &model,
        frozen,
        &train,
        &held,
        &ProbeConfig::default(),
    )?;
    write_atomic(out, sweep_csv(&rows).as_bytes())?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn grad_check() -> CliResult<ExitCode> {
    let cases = grad_check_suite()?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<28} max_rel_err {:.3e} (tol {:.0e}, {} coords)",
            c.name, c.report.max_rel_err, c.tolerance, c.report.coordinates
        );
        failed += usize::from(!c.passed());
    }
    println!("{} of {} checks passed", cases.len() - failed, cases.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn inspect(path: &Path) -> CliResult<()> {
    let ck = load_checkpoint(path)?;
    let model = ck.model()?;
    println!("format_version {}", ck.version);
    println!("seed {}", ck.seed);
    println!("step {}", ck.step);
    println!(
        "model image_size={} channels={} patch_size={} layers={} hidden={} heads={} target_dim={}",
        model.image_size, model.channels, model.patch_size, model.layers, model.hidden, model.heads, model.target_dim
    );
    println!("tensors {} scalars {}", ck.tensors.len(), ck.num_scalars());
    if let Some(t) = ck.tensors.first() {
        println!("dtype {:?}", t.dtype);
    }
    match &ck.optimizer {
        Some(o) => println!("optimizer_state step {}", o.step),
        None => println!("optimizer_state none"),
    }
    let digest = match ck.tensors.first().map(|t| t.dtype) {
        Some(DType::F64) => params_digest(&ck.params::<f64>()?),
        _ => params_digest(&ck.params::<f32>()?),
    };
    println!("params_digest {digest}");
    Ok(())
}
