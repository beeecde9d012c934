//! `nlwr`: simulate, reconstruct, train, evaluate and sweep nonlocal LWR
//! twin experiments from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nlwr_core::config::{ExperimentConfig, KernelChoice};
use nlwr_core::eval::export_report;
use nlwr_core::grid::Field;
use nlwr_core::io::{read_field, read_trajectories, write_field, write_text, write_trajectories};
use nlwr_core::pipeline::{
    alpha_sweep, best_row, build_problem, eta_sweep, evaluate, reconstruct, simulate_truth,
    sweep_table, synth_vehicles, train_and_evaluate, SweepRow, Truth,
};
use nlwr_core::train::TrainState;
use nlwr_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "nlwr",
    version,
    about = "Nonlocal LWR traffic simulation and kernel learning"
)]
struct Cli {
    /// Experiment config (TOML). Without it, defaults plus `--seed` are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.out_dir`, default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel jobs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate ground truth; writes truth_rho.csv, truth_v.csv and trajectories.csv.
    Simulate,
    /// Rebuild density and speed fields from a trajectory file by KDE.
    Reconstruct {
        /// Trajectory file (default: `paths.trajectories`, then `<out>/trajectories.csv`).
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Train on detectors subsampled from the truth field and write a report.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint against the truth fields.
    Evaluate {
        /// Checkpoint file (default `<out>/checkpoint.txt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One training per kernel length or per data weight.
    Sweep {
        /// Comma-separated kernel lengths in metres.
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "alpha_grid",
            required_unless_present = "alpha_grid"
        )]
        etas: Vec<f64>,
        /// Comma-separated data-loss weights.
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Vec<f64>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Kernel used by the learner: learned, constant, linear or local.
    #[arg(long)]
    kernel: Option<String>,
    /// Kernel length in metres for the learner.
    #[arg(long)]
    eta: Option<f64>,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match (&cli.config, cli.seed) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(seed)) => ExperimentConfig::from_toml(&format!("seed = {seed}"))?,
            (None, None) => {
                return Err(Error::Config(
                    "a seed is required: pass --config or --seed".into(),
                ))
            }
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { cfg, out })
    }

    fn echo_config(&self) -> Result<()> {
        write_text(&self.out.join("effective_config.toml"), &self.cfg.to_toml())
    }

    fn truth(&self) -> Result<Truth> {
        let grid = self.cfg.grid()?;
        let rho = self
            .cfg
            .paths
            .truth_rho
            .clone()
            .unwrap_or_else(|| self.out.join("truth_rho.csv"));
        let v = self
            .cfg
            .paths
            .truth_v
            .clone()
            .unwrap_or_else(|| self.out.join("truth_v.csv"));
        Ok(Truth {
            rho: read_field(&rho, &grid)?,
            v: read_field(&v, &grid)?,
        })
    }
}

fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    let truth = simulate_truth(&ctx.cfg)?;
    write_field(&ctx.out.join("truth_rho.csv"), &truth.rho)?;
    write_field(&ctx.out.join("truth_v.csv"), &truth.v)?;
    let traj = synth_vehicles(&ctx.cfg, &truth.v)?;
    write_trajectories(&ctx.out.join("trajectories.csv"), &traj)?;
    ctx.echo_config()?;
    eprintln!(
        "wrote truth_rho.csv, truth_v.csv and trajectories.csv ({} vehicles) to {}",
        ctx.cfg.kde.n_vehicles,
        ctx.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(ctx: &Ctx, trajectories: Option<PathBuf>) -> Result<()> {
    let path = trajectories
        .or_else(|| ctx.cfg.paths.trajectories.clone())
        .unwrap_or_else(|| ctx.out.join("trajectories.csv"));
    let traj = read_trajectories(&path, ctx.cfg.grid.ring_length_m)?;
    let (rho, speed) = reconstruct(&ctx.cfg, &traj)?;
    write_field(&ctx.out.join("kde_rho.csv"), &rho)?;
    write_field(&ctx.out.join("kde_v.csv"), &speed.field)?;
    let flags = Field::new(
        *rho.grid(),
        speed
            .fallback
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect(),
    )?;
    write_field(&ctx.out.join("kde_v_fallback.csv"), &flags)?;
    ctx.echo_config()?;
    eprintln!(
        "wrote kde_rho.csv and kde_v.csv to {} ({} speed cells used the fallback)",
        ctx.out.display(),
        speed.n_fallback()
    );
    Ok(())
}

fn cmd_train(mut ctx: Ctx, args: TrainArgs) -> Result<()> {
    if let Some(k) = &args.kernel {
        ctx.cfg.training.kernel = k.parse::<KernelChoice>()?;
    }
    if let Some(eta) = args.eta {
        ctx.cfg.training.eta_m = Some(eta);
    }
    ctx.cfg.validate()?;
    let truth = ctx.truth()?;
    ctx.echo_config()?;
    let ck = ctx.out.join("checkpoint.txt");
    let (state, report) = train_and_evaluate(&ctx.cfg, &truth, args.resume.as_deref(), Some(&ck))?;
    state.density.net.save(&ctx.out.join("density_net.txt"))?;
    state.fd.net.save(&ctx.out.join("fd_net.txt"))?;
    export_report(&report, &ctx.out.join("report"))?;
    println!(
        "e_rho_pct = {}\ne_v_pct = {}\nmass_fraction_4m = {}",
        report.e_rho_pct, report.e_v_pct, report.mass_fraction_4m
    );
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let truth = ctx.truth()?;
    let problem = build_problem(&ctx.cfg, &truth.rho)?;
    let mut state = TrainState::init(&problem, &ctx.cfg.train_config()?)?;
    let ck = checkpoint.unwrap_or_else(|| ctx.out.join("checkpoint.txt"));
    state.load_checkpoint(&ck)?;
    let report = evaluate(&ctx.cfg, &state, &truth)?;
    export_report(&report, &ctx.out.join("report"))?;
    println!(
        "e_rho_pct = {}\ne_v_pct = {}",
        report.e_rho_pct, report.e_v_pct
    );
    Ok(())
}

fn write_sweep(out: &Path, rows: &[SweepRow], prefix: &str) -> Result<()> {
    for r in rows {
        if let Ok(rep) = &r.outcome {
            export_report(
                rep,
                &out.join(format!("{prefix}_{}", r.value)).join("report"),
            )?;
        }
    }
    let table = sweep_table(rows);
    write_text(&out.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, etas: Vec<f64>, alphas: Vec<f64>, jobs: usize) -> Result<()> {
    let truth = ctx.truth()?;
    ctx.echo_config()?;
    if !etas.is_empty() {
        let rows = eta_sweep(&ctx.cfg, &truth, &etas, jobs)?;
        write_sweep(&ctx.out, &rows, "eta")?;
    } else {
        let rows = alpha_sweep(&ctx.cfg, &truth, &alphas, jobs)?;
        write_sweep(&ctx.out, &rows, "alpha")?;
        match best_row(&rows) {
            Some(i) => println!("best alpha = {}", rows[i].value),
            None => return Err(Error::Input("every sweep entry failed".into())),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.max(1);
    let ctx = Ctx::load(&cli)?;
    match cli.cmd {
        Cmd::Simulate => cmd_simulate(&ctx),
        Cmd::Reconstruct { trajectories } => cmd_reconstruct(&ctx, trajectories),
        Cmd::Train(args) => cmd_train(ctx, args),
        Cmd::Evaluate { checkpoint } => cmd_evaluate(&ctx, checkpoint),
        Cmd::Sweep { etas, alpha_grid } => cmd_sweep(&ctx, etas, alpha_grid, jobs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
