use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokenskill::config::{parse_config, parse_order, ConfigFile};
use tokenskill::demofile::{DemoFile, TaskDemos};
use tokenskill::gradcheck::{run_gradcheck, TOLERANCE};
use tokenskill::report::{self, RunArtifacts, SweepRow};
use tokenskill::seeds::derive_seed;
use tokenskill::tasksuite::make_suite;
use tokenskill::trainer::{demonstrations, LifelongRunConfig, Mode, RunOutcome, Runner, TrainError};

/// Output root used when neither `--out` nor this variable is set: `out`.
const OUT_ENV: &str = "TOKENSKILL_OUT";

#[derive(Parser)]
#[command(
    name = "tokenskill",
    version,
    about = "Lifelong behavior cloning with shared token pools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one lifelong run and write its tables, checkpoint and plots.
    Run(RunArgs),
    /// Run several settings of one parameter and compare their metrics.
    Sweep(SweepArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render the summary and plots of a run directory from its tables.
    Report { dir: PathBuf },
    /// Write expert demonstrations for every task to a file.
    DemoGen {
        #[command(flatten)]
        common: CommonArgs,
        /// Destination file; defaults to `<out>/demos-<suite>-<seed>.json`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat TOML config; command-line flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    mu: Option<f64>,
    /// Training order as comma-separated task ids, e.g. `2,0,1`.
    #[arg(long)]
    order: Option<String>,
    /// Evaluation episodes per task.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Mu,
    Order,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Settings: comma-separated μ values, or `;`-separated orders.
    #[arg(long)]
    values: Option<String>,
    /// Number of random task orders drawn from the seed (order sweeps only).
    #[arg(long)]
    shuffles: Option<usize>,
}

/// Errors that map to the numerical-failure exit code.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_file(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

fn effective_config(args: &RunArgs) -> Result<LifelongRunConfig> {
    let mut file = load_file(args.common.config.as_deref())?;
    if args.mode.is_some() {
        file.mode = args.mode;
    }
    if args.mu.is_some() {
        file.mu = args.mu;
    }
    if args.common.seed.is_some() {
        file.seed = args.common.seed;
    }
    if let Some(order) = &args.order {
        file.order = Some(parse_order(order)?);
    }
    if args.episodes.is_some() {
        file.eval_episodes = args.episodes;
    }
    if args.epochs.is_some() {
        file.epochs = args.epochs;
    }
    Ok(file.apply(&LifelongRunConfig::default())?)
}

fn train(config: &LifelongRunConfig) -> Result<(RunOutcome, Vec<u8>)> {
    let mut runner = Runner::new(config.clone())?;
    eprintln!(
        "run {} ({} mode, {} tasks, seed {})",
        runner.config_hash(),
        config.mode,
        runner.order().len(),
        config.seed
    );
    while !runner.is_done() {
        let r = runner.step().map_err(|e| match e {
            e @ TrainError::Divergence { .. } => anyhow::Error::new(NumericalFailure(e.to_string())),
            e => e.into(),
        })?;
        eprintln!(
            "  [{:>2}] task {:>2} success {:.2}  trainable {:>4}  shared {:>4}  {}",
            r.position, r.task, r.diagonal, r.trainable_tokens, r.shared_tokens, r.instruction
        );
    }
    let checkpoint = runner.checkpoint().encode();
    Ok((runner.finish()?, checkpoint))
}

fn run_one(config: &LifelongRunConfig, out: &Path) -> Result<(RunOutcome, PathBuf)> {
    let started = now();
    let (outcome, checkpoint) = train(config)?;
    let artifacts = RunArtifacts {
        outcome: &outcome,
        config,
        effective_config: ConfigFile::from_config(config).to_toml(),
        checkpoint,
        started_unix: started,
        finished_unix: now(),
    };
    let dir = report::write_run(out, &artifacts)?;
    Ok((outcome, dir))
}

fn print_metrics(outcome: &RunOutcome) {
    let m = &outcome.metrics;
    let nbt = m.nbt.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("fwt {:.4}  nbt {nbt}  auc {:.4}", m.fwt, m.auc);
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = effective_config(args)?;
    let (outcome, dir) = run_one(&config, &args.common.out)?;
    print_metrics(&outcome);
    println!("{}", dir.display());
    Ok(())
}

fn sweep_settings(args: &SweepArgs, base: &LifelongRunConfig) -> Result<Vec<(String, LifelongRunConfig)>> {
    let mut settings = Vec::new();
    match args.param {
        SweepParam::Mu => {
            if args.shuffles.is_some() {
                bail!("--shuffles only applies to order sweeps");
            }
            let values = args.values.as_deref().context("mu sweeps need --values")?;
            for v in values.split(',') {
                let mu: f64 = v.trim().parse().with_context(|| format!("mu value `{v}`"))?;
                let mut c = base.clone();
                c.policy.mu = mu;
                c.validate()?;
                settings.push((v.trim().to_string(), c));
            }
        }
        SweepParam::Order => {
            let mut orders = Vec::new();
            if let Some(values) = &args.values {
                for v in values.split(';') {
                    orders.push(parse_order(v)?);
                }
            }
            if let Some(n) = args.shuffles {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, &[b"order-sweep"]));
                for _ in 0..n {
                    let mut order = base.order();
                    order.shuffle(&mut rng);
                    orders.push(order);
                }
            }
            for order in orders {
                let mut c = base.clone();
                let name = order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
                c.order = Some(order);
                c.validate()?;
                settings.push((name, c));
            }
        }
    }
    if settings.len() < 2 {
        bail!("a sweep needs at least two settings, got {}", settings.len());
    }
    Ok(settings)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = effective_config(&args.run)?;
    let settings = sweep_settings(args, &base)?;
    let param = match args.param {
        SweepParam::Mu => "mu",
        SweepParam::Order => "order",
    };
    let key = format!(
        "{}|{param}|{}",
        base.hash(),
        settings.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join("|")
    );
    let sweep_hash = report::digest(key.as_bytes())[..16].to_string();
    let out = &args.run.common.out;
    let mut rows = Vec::new();
    for (setting, config) in &settings {
        eprintln!("{param} = {setting}");
        let (outcome, _) = run_one(config, out)?;
        rows.push(SweepRow::new(&sweep_hash, param, setting.clone(), &outcome));
    }
    let dir = out.join(format!("sweep-{sweep_hash}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(report::SWEEP_FILE), report::sweep_csv(&rows)?)?;
    if args.param == SweepParam::Mu {
        std::fs::write(dir.join(report::SWEEP_PLOT_FILE), report::render_mu_plot(&rows))?;
    }
    println!("{:<24} {:>8} {:>8} {:>8} {:>10}", param, "fwt", "nbt", "auc", "fwt@1ep");
    for r in &rows {
        let nbt = r.nbt.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<24} {:>8.4} {:>8} {:>8.4} {:>10.4}",
            r.setting, r.fwt, nbt, r.auc, r.fwt_one_epoch
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = run_gradcheck(seed)?;
    for c in &report.components {
        let shared = c
            .shared_grad_max
            .map_or(String::new(), |g| format!("  shared-row grad {g:e}"));
        println!(
            "{:<18} max rel err {:.3e}  {}{shared}",
            c.name,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        return Err(NumericalFailure(format!("gradient check failed (tolerance {TOLERANCE:e})")).into());
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let written = report::regenerate(dir)?;
    print!("{}", std::fs::read_to_string(dir.join(report::SUMMARY_FILE))?);
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_demo_gen(common: &CommonArgs, file: Option<&Path>) -> Result<()> {
    let args = RunArgs {
        common: common.clone(),
        mode: None,
        mu: None,
        order: None,
        episodes: None,
        epochs: None,
    };
    let config = effective_config(&args)?;
    let suite = make_suite(&config.suite, config.suite_seed)?;
    let tasks = suite
        .iter()
        .map(|t| {
            Ok(TaskDemos {
                task: t.id,
                instruction: t.instruction.clone(),
                demos: demonstrations(&config, t)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let demo = DemoFile::new(&config.suite, config.suite_seed, config.seed, tasks);
    let path = match file {
        Some(p) => p.to_path_buf(),
        None => common
            .out
            .join(format!("demos-{}-{}.json", &config.suite.digest()[..12], config.seed)),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, demo.encode()).with_context(|| format!("writing {}", path.display()))?;
    let count: usize = demo.tasks.iter().map(|t| t.demos.len()).sum();
    println!("{count} demonstrations for {} tasks", demo.tasks.len());
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::Report { dir } => cmd_report(dir),
        Command::DemoGen { common, file } => cmd_demo_gen(common, file.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NumericalFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
