use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ltnrl::agent::EpsilonPolicy;
use ltnrl::gridworld::{Scenario, Setting};
use ltnrl::harness::{
    apply_config, emit_csv, emit_svg, parse_csv, run_experiment, Condition, Experiment, ExperimentPlan, HarnessError,
};
use ltnrl::ltn::{parse_theory, satisfaction, train_groundings, RenderedCells, TrainConfig};

#[derive(Parser)]
#[command(name = "ltnrl", version, about = "Grid-world DQN experiments with symbolic priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate agents through a phase schedule.
    Run(RunArgs),
    /// Fit `goto`/`avoid` groundings for a theory file.
    LtnTrain(LtnArgs),
    /// Draw learning curves from one or more record files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// 1: settings change, 2: scenarios change.
    #[arg(long)]
    experiment: Experiment,
    #[arg(long)]
    condition: Condition,
    /// `reset` or `hold`.
    #[arg(long)]
    epsilon: EpsilonPolicy,
    /// Number of seeds, counted from 0.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    phase_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with `scenario1.ltn` … `scenario4.ltn`.
    #[arg(long)]
    theory_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LtnArgs {
    #[arg(long)]
    theory: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
    /// Scenario whose states are sampled for training.
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 1)]
    setting: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Invariant(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<HarnessError>() {
            Some(HarnessError::Invariant(_)) => Failure::Invariant(e),
            _ => Failure::Usage(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::LtnTrain(args) => ltn_train(args),
        Command::Plot(args) => plot(args),
    };
    match result.map_err(Failure::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn build_plan(args: &RunArgs) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::desk(args.experiment, args.condition, args.epsilon);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        apply_config(&mut plan, &text).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(dir) = &args.theory_dir {
        for n in 1..=4u8 {
            let path = dir.join(format!("scenario{n}.ltn"));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)?;
            let theory = parse_theory(&text).with_context(|| format!("in {}", path.display()))?;
            plan.theories.insert(n, theory);
        }
    }
    if let Some(n) = args.seeds {
        plan.seeds = (0..n).collect();
    }
    if let Some(k) = args.phase_steps {
        plan.set_phase_steps(k);
    }
    if let Some(e) = args.eval_every {
        plan.eval_every = e;
    }
    plan.validate()?;
    Ok(plan)
}

fn save(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let plan = build_plan(&args)?;
    fs::create_dir_all(args.out.join("checkpoints"))?;
    let meta: String = plan
        .metadata()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    fs::write(args.out.join("metadata.txt"), meta)?;

    eprintln!(
        "running experiment {} ({}, epsilon {}) for {} seeds x {} steps",
        plan.experiment,
        plan.condition,
        plan.epsilon.policy,
        plan.seeds.len(),
        plan.total_steps()
    );
    let report = run_experiment(&plan)?;
    let records = report.records();
    emit_csv(&records, &args.out.join("records.csv"))?;
    emit_svg(&records, &args.out.join("curve.svg"))?;

    for run in &report.runs {
        for (i, net) in run.checkpoints.iter().enumerate() {
            let path = args.out.join("checkpoints").join(format!("seed{}_phase{}.qnet", run.seed, i + 1));
            save(&path, |w| net.save(w))?;
        }
        for (i, g) in run.groundings.iter().enumerate() {
            let path = args.out.join("checkpoints").join(format!("seed{}_phase{}.gnd", run.seed, i + 1));
            save(&path, |w| g.save(w))?;
        }
    }
    if let Some(last) = records.iter().map(|r| r.phase).max() {
        let tail: Vec<f64> = records
            .iter()
            .filter(|r| r.phase == last)
            .map(|r| r.normalized_reward_mean)
            .collect();
        eprintln!(
            "wrote {} records; final-phase mean normalized reward {:.3}",
            records.len(),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok(())
}

fn ltn_train(args: LtnArgs) -> Result<()> {
    let text = fs::read_to_string(&args.theory).with_context(|| format!("reading {}", args.theory.display()))?;
    let theory = parse_theory(&text).with_context(|| format!("in {}", args.theory.display()))?;
    if args.iters == 0 {
        bail!("--iters must be positive");
    }
    let scenario = Scenario::preset(args.scenario).with_context(|| format!("no scenario {}", args.scenario))?;
    let setting = Setting::preset(args.setting).with_context(|| format!("no setting {}", args.setting))?;
    let config = TrainConfig {
        iterations: args.iters,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut source = RenderedCells { scenario, setting };
    let trained = train_groundings(&theory, &mut source, &config, &mut rng)?;
    let sat = satisfaction(&theory, &trained.groundings, &RenderedCells::CANONICAL)?;
    save(&args.out, |w| trained.groundings.save(w))?;
    println!(
        "iterations {}  final batch satisfaction {:.4}  canonical satisfaction {:.4}",
        args.iters,
        trained.trace.last().copied().unwrap_or(f64::NAN),
        sat
    );
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let mut records = Vec::new();
    for path in &args.inputs {
        records.extend(parse_csv(path).with_context(|| format!("reading {}", path.display()))?);
    }
    emit_svg(&records, &args.out).with_context(|| format!("writing {}", args.out.display()))
}
