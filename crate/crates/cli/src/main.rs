use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ilues::experiment::{
    build_model, fixture_from_recipe, parse_axis, run_experiment, sweep, write_sweep_csv,
    Algorithm, ExperimentConfig, MeasurementFixture,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ilues", version, about = "Ensemble smoother experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output` or runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run a grid of overrides, e.g. --param alpha=0.1,0.5 --param b=0,1.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Sample the posterior with the Metropolis reference sampler.
    Oracle(Common),
    /// Check or rebuild the committed measurement fixtures.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
}

#[derive(Subcommand)]
enum FixtureAction {
    /// Regenerate every fixture from its config recipe and compare.
    Verify {
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
        /// Largest accepted absolute difference.
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Rewrite every fixture from its config recipe.
    Regenerate {
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    Ok((cfg, out))
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> anyhow::Result<T> + Send,
) -> anyhow::Result<T> {
    match threads {
        None => f(),
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building the worker pool")?
            .install(f),
    }
}

fn run(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> anyhow::Result<()> {
    let summary = with_threads(threads, || Ok(run_experiment(cfg, out)?))?;
    let report = json!({
        "output": out.display().to_string(),
        "algorithm": summary.algorithm,
        "iterations_used": summary.iterations_used,
        "final_median_log_rmse": summary.final_median_log_rmse(),
        "wall_time_s": summary.wall_time_s,
    });
    println!("{report}");
    Ok(())
}

fn configs_with_fixtures(dir: &Path) -> anyhow::Result<Vec<(PathBuf, ExperimentConfig)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let cfg = ExperimentConfig::load(&p)?;
        if cfg.measurement.fixture.is_some() {
            out.push((p, cfg));
        }
    }
    Ok(out)
}

fn fixtures(action: FixtureAction) -> anyhow::Result<()> {
    match action {
        FixtureAction::Verify { configs, tolerance } => {
            let mut failed = 0;
            for (path, cfg) in configs_with_fixtures(&configs)? {
                let fixture_path = cfg.resolve(cfg.measurement.fixture.as_ref().expect("filtered"));
                let committed = MeasurementFixture::load(&fixture_path)?;
                let model = build_model(&cfg)?;
                let fresh = fixture_from_recipe(&cfg, model.as_ref())?;
                let diff = committed.max_abs_difference(&fresh);
                let ok = diff.is_some_and(|d| d <= tolerance) && committed.provenance == fresh.provenance;
                failed += usize::from(!ok);
                println!(
                    "{} {} max_abs_diff={}",
                    if ok { "OK  " } else { "FAIL" },
                    path.display(),
                    diff.map_or("shape mismatch".to_string(), |d| format!("{d:e}"))
                );
            }
            if failed > 0 {
                bail!("{failed} fixture(s) do not match their recipe");
            }
            Ok(())
        }
        FixtureAction::Regenerate { configs } => {
            for (path, cfg) in configs_with_fixtures(&configs)? {
                let fixture_path = cfg.resolve(cfg.measurement.fixture.as_ref().expect("filtered"));
                let model = build_model(&cfg)?;
                fixture_from_recipe(&cfg, model.as_ref())?.save(&fixture_path)?;
                println!("wrote {} from {}", fixture_path.display(), path.display());
            }
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = load(&common)?;
            run(&cfg, &out, common.threads)
        }
        Command::Oracle(common) => {
            let (mut cfg, out) = load(&common)?;
            cfg.algorithm = Algorithm::Mcmc;
            run(&cfg, &out, common.threads)
        }
        Command::Sweep {
            common,
            params,
            replicates,
        } => {
            let (cfg, out) = load(&common)?;
            let axes = params
                .iter()
                .map(|p| parse_axis(p))
                .collect::<Result<Vec<_>, _>>()?;
            let table = with_threads(common.threads, || Ok(sweep(&cfg, &axes, replicates)?))?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&path, &table)?;
            let failed = table.rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{}",
                json!({ "output": path.display().to_string(), "runs": table.rows.len(), "failed": failed })
            );
            Ok(())
        }
        Command::Fixtures { action } => fixtures(action),
    }
}

fn error_report(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<ilues::Error>())
        .map_or("other", |c| c.kind());
    let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
    json!({ "error": { "kind": kind, "message": e.to_string(), "causes": causes } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_report(&e));
            ExitCode::FAILURE
        }
    }
}
