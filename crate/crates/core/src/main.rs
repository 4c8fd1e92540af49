use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use menkf::cli::{self, DivergenceInfo, Overrides, RunManifest};
use menkf::experiment::{self, ExperimentConfig, VelocityInit, Variant};
use menkf::filters::FilterScheme;
use menkf::obsmodel::ObservationKind;
use menkf::{Error, Result};

#[derive(Parser)]
#[command(name = "menkf", version, about = "Twin experiments for mollified ensemble Kalman filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the truth trajectory and its observations.
    Truth(Common),
    /// One twin experiment at fixed (scheme, r0, lambda).
    Run {
        #[command(flatten)]
        common: Common,
        /// Repeat the run recorded in a manifest.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Best-over-inflation RMSE for every (variant, r0).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `scheme` or `scheme:gamma` entries.
        #[arg(long, value_delimiter = ',', default_value = "enkf_standard,menkf")]
        variants: Vec<String>,
    },
    /// Free-model imbalance growth for several time-scale separations.
    BalanceStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.005,0.0025")]
        eps_list: Vec<f64>,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, value_enum, default_value_t = Velocity::Zero)]
        velocity: Velocity,
    },
    /// Verify the closed-form analysis identities.
    Check,
}

#[derive(Clone, Copy, ValueEnum)]
enum Velocity {
    Zero,
    Differentiated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Obs {
    X,
    Mixed,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    r0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    spinup_cycles: Option<usize>,
    #[arg(long, value_enum)]
    obs: Option<Obs>,
    #[arg(long)]
    seed_truth: Option<u64>,
    #[arg(long)]
    seed_obs: Option<u64>,
    #[arg(long)]
    seed_ens: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            delta: self.delta,
            gamma: self.gamma,
            r0: self.r0,
            lambda: self.lambda,
            scheme: self.scheme.as_deref().map(str::parse).transpose()?,
            cycles: self.cycles,
            spinup_cycles: self.spinup_cycles,
            observation: self.obs.map(|o| match o {
                Obs::X => ObservationKind::XEverySecond,
                Obs::Mixed => ObservationKind::MixedEverySecond,
            }),
            seed_truth: self.seed_truth,
            seed_obs: self.seed_obs,
            seed_ens: self.seed_ens,
        })
    }

    fn resolve(&self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut cfg = match (base, &self.config) {
            (Some(cfg), _) => cfg,
            (None, Some(path)) => cli::load_config(path)?,
            (None, None) => ExperimentConfig::default(),
        };
        self.overrides()?.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Outcome {
    Ok,
    Diverged,
    Failed,
}

fn parse_variant(s: &str) -> Result<Variant> {
    let (scheme, gamma) = match s.split_once(':') {
        Some((name, g)) => {
            let gamma = g.parse().map_err(|_| Error::Config(format!("bad gamma in variant {s:?}")))?;
            (name, gamma)
        }
        None => (s, 0.0),
    };
    Ok(Variant::new(scheme.trim().parse::<FilterScheme>()?, gamma))
}

fn finish(manifest: &mut RunManifest, out: &Path, started: Instant) -> Result<()> {
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    manifest.outputs.push("manifest.json".to_string());
    manifest.write(&out.join("manifest.json"))
}

fn truth(common: &Common) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = common.resolve(None)?;
    let setup = experiment::prepare_twin(&cfg)?;
    let mut manifest = RunManifest::new("truth", &cfg);
    cli::write_artifact(&common.out, "truth.csv", &cli::truth_csv(&setup.truth), &mut manifest.outputs)?;
    cli::write_artifact(&common.out, "observations.csv", &cli::observations_csv(&setup.obs), &mut manifest.outputs)?;
    finish(&mut manifest, &common.out, started)?;
    Ok(Outcome::Ok)
}

fn run(common: &Common, from_manifest: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let base = from_manifest.map(RunManifest::load).transpose()?.map(|m| m.config);
    let cfg = common.resolve(base)?;
    let result = experiment::run_twin(&cfg, cfg.scheme, cfg.r0, cfg.lambda)?;
    let mut manifest = RunManifest::new("run", &cfg);
    cli::write_artifact(&common.out, "series.csv", &cli::series_csv(&result), &mut manifest.outputs)?;
    cli::write_artifact(
        &common.out,
        "step_imbalance.csv",
        &cli::step_imbalance_csv(&result, cfg.dt),
        &mut manifest.outputs,
    )?;
    manifest.divergence =
        result.divergence.as_ref().map(|d| DivergenceInfo { cycle: d.cycle, time: d.time, max_abs: d.max_abs });
    finish(&mut manifest, &common.out, started)?;
    if let (Some(x), Some(h)) = (result.summary_x, result.summary_h) {
        println!("{}: rmse_x {x:.4}, rmse_h {h:.4}", cfg.scheme);
    }
    if let Some(d) = &result.divergence {
        eprintln!("diverged in cycle {} at t = {} (max |z| = {:.3e})", d.cycle, d.time, d.max_abs);
        return Ok(Outcome::Diverged);
    }
    Ok(Outcome::Ok)
}

fn sweep(common: &Common, variants: &[String]) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = common.resolve(None)?;
    let variants = variants.iter().map(|s| parse_variant(s)).collect::<Result<Vec<_>>>()?;
    let rows = experiment::sweep(&cfg, &variants, &cfg.localization_grid, &cfg.inflation_grid)?;
    let mut manifest = RunManifest::new("sweep", &cfg);
    cli::write_artifact(&common.out, "sweep.csv", &cli::sweep_csv(&rows), &mut manifest.outputs)?;
    finish(&mut manifest, &common.out, started)?;
    print!("{}", cli::sweep_csv(&rows));
    Ok(if rows.iter().any(|r| r.diverged) { Outcome::Diverged } else { Outcome::Ok })
}

fn balance_study(common: &Common, eps_list: &[f64], duration: f64, velocity: Velocity) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = common.resolve(None)?;
    let spun_up = ExperimentConfig { cycles: 0, ..cfg.clone() };
    let truth = experiment::make_truth(&spun_up, cfg.seed_truth)?;
    let velocity = match velocity {
        Velocity::Zero => VelocityInit::Zero,
        Velocity::Differentiated => VelocityInit::Differentiated,
    };
    let rows = experiment::balance_scaling_study(
        &cfg.model_params(0.0),
        cfg.stepper_config(),
        truth.initial().x(),
        eps_list,
        duration,
        velocity,
    )?;
    let mut manifest = RunManifest::new("balance-study", &cfg);
    cli::write_artifact(&common.out, "balance.csv", &cli::balance_csv(&rows), &mut manifest.outputs)?;
    cli::write_artifact(
        &common.out,
        "balance_series.csv",
        &cli::balance_series_csv(&rows, cfg.dt),
        &mut manifest.outputs,
    )?;
    finish(&mut manifest, &common.out, started)?;
    print!("{}", cli::balance_csv(&rows));
    Ok(Outcome::Ok)
}

fn check() -> Result<Outcome> {
    let mut ok = true;
    for c in cli::oracle_checks()? {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<48} error {:.3e} (tol {:.0e})", c.name, c.error, c.tolerance);
        ok &= c.passed();
    }
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let outcome = match &args.command {
        Command::Truth(common) => truth(common),
        Command::Run { common, from_manifest } => run(common, from_manifest.as_deref()),
        Command::Sweep { common, variants } => sweep(common, variants),
        Command::BalanceStudy { common, eps_list, duration, velocity } => {
            balance_study(common, eps_list, *duration, *velocity)
        }
        Command::Check => check(),
    };
    match outcome {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged | Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParameter { .. } | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
