//! `randomout` command-line entry point.
//!
//! Settings resolve as: explicit flag, then `--config` file, then built-in default.
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use randomout::data;
use randomout::experiments::sweep::{self, default_grid, default_randomout};
use randomout::experiments::{train, Condition, DatasetSpec, RunArtifact, TrainConfig};
use randomout::gradcheck;
use randomout::models::{Architecture, ModelSpec};
use randomout::optim::OptimizerConfig;
use randomout::randomout::RandomOutConfig;

#[derive(Parser, Debug)]
#[command(name = "randomout", version, about = "Small-CNN trainer with per-filter gradient-norm telemetry and RandomOut filter resets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and report its final test accuracy
    Train(TrainArgs),
    /// Paired seed sweep over the base, RandomOut and BatchNorm conditions
    SweepSeeds(SweepArgs),
    /// Grid search over the RandomOut threshold and active fraction
    Grid(GridArgs),
    /// Base vs RandomOut CraterCNN over a range of conv widths
    WidthSweep(WidthArgs),
    /// Write the synthetic crater dataset as an IDX image/label pair
    GenData(GenDataArgs),
    /// Run the finite-difference gradient checks
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Cratercnn,
    MiniInception,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ConditionArg {
    Base,
    Randomout,
    Batchnorm,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Base => Condition::Base,
            ConditionArg::Randomout => Condition::RandomOut,
            ConditionArg::Batchnorm => Condition::Batchnorm,
        }
    }
}

/// Settings shared by every training subcommand.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run config; explicit flags override its fields
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model architecture [default: cratercnn]
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Conv width: filters per conv layer (CraterCNN) or base width (MiniInception) [default: 4]
    #[arg(long, value_name = "N")]
    width: Option<usize>,
    /// synth, idx:IMAGES,LABELS or cifar10:PATH [default: synth]
    #[arg(long, value_name = "SPEC")]
    dataset: Option<String>,
    /// Training epochs [default: 100]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Minibatch size [default: 32]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Learning rate [default: 0.05 for sgd, 0.001 for adam]
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    /// Optimizer [default: sgd]
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Enable RandomOut filter resets
    #[arg(long, conflicts_with = "batchnorm")]
    randomout: bool,
    /// Reset threshold: a filter resets when its gradient norm is strictly below it [default: 1e-12]
    #[arg(long, value_name = "TAU")]
    tau: Option<f64>,
    /// Fraction of training during which resets are allowed [default: 1.0]
    #[arg(long, value_name = "P")]
    p_active: Option<f64>,
    /// Insert BatchNorm after every conv layer
    #[arg(long)]
    batchnorm: bool,
    /// Output directory; each run is stored under its config hash
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run seed [default: 0]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: u64 = a.parse().map_err(|e| format!("bad range start `{a}`: {e}"))?;
    let b: u64 = b.parse().map_err(|e| format!("bad range end `{b}`: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Half-open seed range
    #[arg(long, value_name = "A..B", value_parser = parse_range, default_value = "0..20")]
    seeds: Range<u64>,
    /// Conditions to run, comma separated
    #[arg(long, value_enum, value_delimiter = ',', default_value = "base,randomout,batchnorm")]
    conditions: Vec<ConditionArg>,
    /// Worker threads; runs are distributed, each run stays sequential
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Half-open seed range
    #[arg(long, value_name = "A..B", value_parser = parse_range, default_value = "0..20")]
    seeds: Range<u64>,
    /// Thresholds to try, comma separated [default: 1e-14,1e-12,1e-10,1e-8,1e-6,1e-4]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    taus: Vec<f64>,
    /// Active fractions to try, comma separated [default: 0,0.25,0.5,0.75,1]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    ps: Vec<f64>,
    /// Worker threads
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct WidthArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Half-open seed range
    #[arg(long, value_name = "A..B", value_parser = parse_range, default_value = "0..5")]
    seeds: Range<u64>,
    /// Half-open width range
    #[arg(long, value_name = "A..B", value_parser = parse_range, default_value = "1..11")]
    widths: Range<u64>,
    /// Worker threads
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of crater images
    #[arg(long, value_name = "N", default_value_t = 458)]
    n_pos: usize,
    /// Number of non-crater images
    #[arg(long, value_name = "N", default_value_t = 765)]
    n_neg: usize,
    /// Generator seed
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Output directory for images.idx and labels.idx
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the random test networks and inputs
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<randomout::Error> for Failure {
    fn from(e: randomout::Error) -> Self {
        match e {
            randomout::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_dataset(spec: &str) -> Result<DatasetSpec, Failure> {
    if spec == "synth" {
        return Ok(DatasetSpec::synth(500, 500, 0));
    }
    if let Some(rest) = spec.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| Failure::Usage(format!("idx dataset needs idx:IMAGES,LABELS, got `{spec}`")))?;
        return Ok(DatasetSpec::Idx {
            images: images.into(),
            labels: labels.into(),
            split_seed: 0,
        });
    }
    if let Some(path) = spec.strip_prefix("cifar10:") {
        return Ok(DatasetSpec::Cifar10 {
            path: path.into(),
            max_per_class: usize::MAX,
            split_seed: 0,
        });
    }
    Err(Failure::Usage(format!("unknown dataset `{spec}`; expected synth, idx:IMAGES,LABELS or cifar10:PATH")))
}

fn default_model(arch: ModelArg, width: Option<usize>) -> ModelSpec {
    match arch {
        ModelArg::Cratercnn => ModelSpec::cratercnn(width.unwrap_or(4)),
        ModelArg::MiniInception => ModelSpec::mini_inception(width.unwrap_or(4), false),
    }
}

/// Resolves the run config from flags, an optional config file and defaults.
/// Also returns the RandomOut settings, which sweeps apply to their RandomOut runs.
fn resolve(args: &RunArgs, seed: Option<u64>) -> Result<(TrainConfig, RandomOutConfig), Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::crater_default(4, 0),
    };
    if let Some(arch) = args.model {
        let wanted = match arch {
            ModelArg::Cratercnn => Architecture::CraterCnn,
            ModelArg::MiniInception => Architecture::MiniInception,
        };
        if cfg.model.name != wanted {
            cfg.model = default_model(arch, args.width);
        }
    }
    if let Some(w) = args.width {
        cfg.model.conv_width = w;
    }
    if let Some(spec) = &args.dataset {
        cfg.dataset = parse_dataset(spec)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    match args.optimizer {
        Some(OptimizerArg::Sgd) if !matches!(cfg.optimizer, OptimizerConfig::Sgd { .. }) => {
            cfg.optimizer = OptimizerConfig::Sgd { lr: 0.05 }
        }
        Some(OptimizerArg::Adam) if !matches!(cfg.optimizer, OptimizerConfig::Adam { .. }) => {
            cfg.optimizer = OptimizerConfig::adam(1e-3)
        }
        _ => {}
    }
    if let Some(lr) = args.lr {
        match &mut cfg.optimizer {
            OptimizerConfig::Sgd { lr: l } | OptimizerConfig::Adam { lr: l, .. } => *l = lr,
        }
    }

    let mut ro = cfg.randomout.unwrap_or_else(default_randomout);
    if let Some(t) = args.tau {
        ro.tau = t;
    }
    if let Some(p) = args.p_active {
        ro.p_active = p;
    }
    ro.validate()?;
    let condition = if args.randomout {
        Condition::RandomOut
    } else if args.batchnorm {
        Condition::Batchnorm
    } else {
        cfg.condition
    };
    cfg = cfg.with_condition(condition, ro);
    cfg.validate()?;
    Ok((cfg, ro))
}

/// Base-condition config for a sweep, carrying the RandomOut settings to sweep with.
fn sweep_base(args: &RunArgs) -> Result<TrainConfig, Failure> {
    let (cfg, ro) = resolve(args, None)?;
    let mut base = cfg.with_condition(Condition::Base, ro);
    base.randomout = Some(ro);
    Ok(base)
}

fn print_run(run: &RunArtifact) {
    let s = &run.summary;
    for r in run.records.iter().filter(|r| r.test_acc.is_some() || r.diverged) {
        println!(
            "epoch {:>4}  loss {:.6}  train_acc {:.4}  test_acc {}  mean_cgn {:.3e}  below_thresh {}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.test_acc.map_or("-".to_string(), |a| format!("{a:.4}")),
            r.mean_cgn,
            r.below_thresh
        );
    }
    println!(
        "final_test_acc {:.4}  diverged {}  failed {}  resets {}",
        s.final_test_acc, s.diverged, s.failed, s.total_resets
    );
}

fn seeds_of(r: &Range<u64>) -> Vec<u64> {
    r.clone().collect()
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let (cfg, _) = resolve(&args.run, args.seed)?;
    println!("config hash: {}", cfg.hash());
    let run = match &args.run.out {
        Some(out) => {
            let dir = train::run_dir(out, &cfg);
            match train::load_run(&dir)? {
                Some(done) => done,
                None => {
                    let run = train::run_training(&cfg)?;
                    train::save_run(&run, &dir)?;
                    run
                }
            }
        }
        None => train::run_training(&cfg)?,
    };
    print_run(&run);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let base = sweep_base(&args.run)?;
    println!("config hash: {}", base.hash());
    let conditions: Vec<Condition> = args.conditions.iter().map(|&c| c.into()).collect();
    let result = sweep::seed_sweep(&base, &seeds_of(&args.seeds), &conditions, args.jobs, args.run.out.as_deref())?;
    let s = &result.summary;
    println!("condition   runs  mean    median  std     diverged  chance  failure_rate");
    for c in &s.conditions {
        println!(
            "{:<10}  {:>4}  {:.4}  {:.4}  {:.4}  {:>8}  {:>6}  {:.3}",
            c.condition.to_string(),
            c.runs,
            c.mean,
            c.median,
            c.std,
            c.diverged,
            c.chance_level,
            c.failure_rate
        );
    }
    if let Some(g) = &s.randomout_gain {
        println!(
            "randomout paired gain: median {:+.4}  mean {:+.4}  wins {}  losses {}",
            g.median, g.mean, g.wins, g.losses
        );
    }
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> Result<(), Failure> {
    let base = sweep_base(&args.run)?;
    println!("config hash: {}", base.hash());
    let (default_taus, default_ps) = default_grid();
    let taus = if args.taus.is_empty() { default_taus } else { args.taus.clone() };
    let ps = if args.ps.is_empty() {
        std::iter::once(0.0).chain(default_ps).collect()
    } else {
        args.ps.clone()
    };
    let g = sweep::grid_search(&base, &taus, &ps, &seeds_of(&args.seeds), args.jobs, args.run.out.as_deref())?;
    print!("{}", g.heatmap_csv());
    println!("base mean {:.4}  best cell tau={:e} p={}", g.base_mean, g.best_cell.0, g.best_cell.1);
    Ok(())
}

fn cmd_width(args: &WidthArgs) -> Result<(), Failure> {
    let base = sweep_base(&args.run)?;
    println!("config hash: {}", base.hash());
    let widths: Vec<usize> = args.widths.clone().map(|w| w as usize).collect();
    let w = sweep::width_sweep(&base, &widths, &seeds_of(&args.seeds), args.jobs, args.run.out.as_deref())?;
    print!("{}", w.table_csv());
    println!(
        "randomout >= base at {}/{} widths",
        w.randomout_at_least_base,
        w.rows.len()
    );
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let ds = data::synth_craters(args.n_pos, args.n_neg, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    let (images, labels) = (args.out.join("images.idx"), args.out.join("labels.idx"));
    data::write_idx(&ds, &images, &labels)?;
    println!("wrote {} images to {}", ds.len(), display(&images));
    println!("wrote {} labels to {}", ds.len(), display(&labels));
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool, Failure> {
    let reports = gradcheck::standard_suites(args.seed)?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed();
        ok &= pass;
        println!(
            "{:<20} max_rel_err {:.3e}  ({} values)  {}",
            r.name,
            r.max_error(),
            r.checked,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SweepSeeds(a) => cmd_sweep(a),
        Command::Grid(a) => cmd_grid(a),
        Command::WidthSweep(a) => cmd_width(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
