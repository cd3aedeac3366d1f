//! Experiment harness: builds the model, prior and data named by an
//! [`ExperimentConfig`], runs the selected algorithm and persists the
//! ensembles, predictions and a summary.

mod config;
mod fixture;
pub mod io;
mod sweep;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    Algorithm, BimodalCheck, Diagnostics, EsBlock, ExperimentConfig, IluesBlock, McmcBlock,
    MeasurementBlock, ModelId, ModelOptions, NoiseSpec, PriorBlock, TruthTail,
};
pub use fixture::{
    fixture_from_recipe, generate_measurement, recipe_truth, FixtureKind, MeasurementFixture,
    Provenance,
};
pub use sweep::{
    parse_axis, replicate_seed, sweep, write_sweep_csv, SweepAxis, SweepCellResult, SweepRow, SweepTable,
};

use crate::error::{Error, Result};
use crate::ilues::{ilues_iterate, IluesConfig};
use crate::mcmc::{run_chains, ChainConfig};
use crate::models::groundwater::{self, Source108Model, Source5Model};
use crate::models::hymod::{Forcing, HymodModel, DEFAULT_WARMUP};
use crate::models::{evaluate_ensemble, ForwardModel, SumOfSquares};
use crate::priors::{sample_prior, PriorSpec};
use crate::random_field::{cached_basis, CovarianceModel};
use crate::rng::{substream, tag};
use crate::smoother::{iterative_es, EsConfig, IterationRecord};
use crate::stats::{log_rmse, median};

/// Groundwater grid in effect for a config, `None` for other models.
pub fn model_grid(cfg: &ExperimentConfig) -> Option<[usize; 2]> {
    let default = match cfg.model {
        ModelId::Source5 => groundwater::SOURCE5_GRID,
        ModelId::Source108 => groundwater::SOURCE108_GRID,
        _ => return None,
    };
    Some(cfg.model_options.grid.unwrap_or([default.0, default.1]))
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn ForwardModel>> {
    let n_params = cfg.prior_spec()?.len();
    let model: Box<dyn ForwardModel> = match cfg.model {
        ModelId::Ring2 => Box::new(SumOfSquares::new(2)),
        ModelId::Sphere100 => Box::new(SumOfSquares::new(100)),
        ModelId::Hymod => {
            let forcing = match &cfg.model_options.forcing {
                Some(p) => Forcing::load(&cfg.resolve(p))?,
                None => Forcing::shipped(),
            };
            let warmup = cfg.model_options.warmup.unwrap_or(DEFAULT_WARMUP);
            Box::new(HymodModel::new(forcing, warmup)?)
        }
        ModelId::Source5 => {
            let [nx, ny] = model_grid(cfg).expect("groundwater grid");
            Box::new(Source5Model::new(nx, ny)?)
        }
        ModelId::Source108 => {
            let [nx, ny] = model_grid(cfg).expect("groundwater grid");
            let n_src = groundwater::SOURCE108_RANGES.len();
            if n_params <= n_src {
                return Err(Error::Config(format!(
                    "source108 needs more than {n_src} parameters, prior has {n_params}"
                )));
            }
            let grid = groundwater::domain_grid(nx, ny)?;
            let cache = cfg.model_options.kl_cache.as_ref().map(|p| cfg.resolve(p));
            let basis = cached_basis(
                cache.as_deref(),
                &grid,
                &CovarianceModel::standard(),
                n_params - n_src,
            )?;
            Box::new(Source108Model::new(Arc::new(basis))?)
        }
    };
    if model.n_params() != n_params {
        return Err(Error::Dimension {
            context: "prior length vs model parameters",
            expected: model.n_params(),
            found: n_params,
        });
    }
    Ok(model)
}

/// The fixture a run conditions on: the committed file if named, else the
/// stated data or a freshly generated realization.
pub fn resolve_measurement(cfg: &ExperimentConfig, model: &dyn ForwardModel) -> Result<MeasurementFixture> {
    let fixture = match &cfg.measurement.fixture {
        Some(p) => MeasurementFixture::load(&cfg.resolve(p))?,
        None => fixture_from_recipe(cfg, model)?,
    };
    if fixture.d.len() != model.n_outputs() || fixture.sigma.len() != fixture.d.len() {
        return Err(Error::Dimension {
            context: "measurement length vs model outputs",
            expected: model.n_outputs(),
            found: fixture.d.len(),
        });
    }
    Ok(fixture)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    pub fraction_below: f64,
    pub fraction_above: f64,
    pub mean_below: f64,
    pub mean_above: f64,
    /// Pooled within-side standard deviation.
    pub pooled_std: f64,
    pub bimodal: bool,
}

pub const BIMODAL_MIN_FRACTION: f64 = 0.15;
pub const BIMODAL_MIN_SEPARATION: f64 = 4.0;
pub const BIMODAL_MIN_SAMPLES: usize = 50;

/// Two-cluster test around `split`: bimodal when each side holds at least
/// 15% of the samples and the side means are at least four pooled
/// within-side standard deviations apart.
pub fn bimodality_diagnostic(samples: &[f64], split: f64) -> Result<Bimodality> {
    if samples.len() < BIMODAL_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "bimodality diagnostic needs at least {BIMODAL_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) || !split.is_finite() {
        return Err(Error::NonFinite("bimodality samples"));
    }
    let (below, above): (Vec<f64>, Vec<f64>) = samples.iter().partition(|&&v| v < split);
    let n = samples.len() as f64;
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (mb, ma) = (mean(&below), mean(&above));
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let pooled_std = if below.is_empty() || above.is_empty() {
        f64::NAN
    } else {
        ((ss(&below, mb) + ss(&above, ma)) / (n - 2.0)).sqrt()
    };
    let fraction_below = below.len() as f64 / n;
    let fraction_above = above.len() as f64 / n;
    let bimodal = fraction_below >= BIMODAL_MIN_FRACTION
        && fraction_above >= BIMODAL_MIN_FRACTION
        && (ma - mb) >= BIMODAL_MIN_SEPARATION * pooled_std;
    Ok(Bimodality {
        fraction_below,
        fraction_above,
        mean_below: mb,
        mean_above: ma,
        pooled_std,
        bimodal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalityReport {
    pub param: String,
    pub split: f64,
    #[serde(flatten)]
    pub result: Bimodality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcReport {
    pub acceptance_rates: Vec<f64>,
    pub r_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub model: ModelId,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub n_members: usize,
    pub iterations_used: usize,
    pub converged: bool,
    /// Per stage, prior first.
    pub median_log_rmse: Vec<f64>,
    pub min_log_rmse: Vec<f64>,
    /// Normalized change per stage; `None` for the prior.
    pub convergence: Vec<Option<f64>>,
    pub wall_time_s: f64,
    pub parameters: Vec<ParameterSummary>,
    /// Ensemble mean and variance of each final prediction.
    pub prediction_mean: Vec<f64>,
    pub prediction_var: Vec<f64>,
    pub bimodality: Vec<BimodalityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcReport>,
}

impl RunSummary {
    pub fn final_median_log_rmse(&self) -> f64 {
        *self.median_log_rmse.last().expect("at least the prior stage")
    }

    pub fn final_min_log_rmse(&self) -> f64 {
        *self.min_log_rmse.last().expect("at least the prior stage")
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn bimodality_of(&self, name: &str) -> Option<&Bimodality> {
        self.bimodality.iter().find(|b| b.param == name).map(|b| &b.result)
    }
}

/// Everything a run produced, before anything is written.
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    /// Prior and every updated stage; a single pooled stage for MCMC.
    pub stages: Vec<IterationRecord>,
    pub fixture: MeasurementFixture,
}

fn ilues_config(cfg: &ExperimentConfig) -> IluesConfig {
    let b = &cfg.ilues;
    let mut c = IluesConfig::new(b.n_e, cfg.seed);
    c.alpha = b.alpha;
    c.b = b.b;
    c.max_iter = b.max_iter;
    c.conv_tol = b.conv_tol;
    c.selection = b.selection;
    c.best_reevaluate = b.best_reevaluate;
    c.bounds_policy = b.bounds;
    c.mda_inflation = b.mda_inflation;
    c
}

fn es_config(cfg: &ExperimentConfig) -> (usize, EsConfig) {
    let e = &cfg.es;
    let mut c = EsConfig::new(e.n_iter.unwrap_or(cfg.ilues.max_iter), cfg.seed);
    c.bounds_policy = e.bounds.unwrap_or(cfg.ilues.bounds);
    c.mda_inflation = e.mda_inflation.unwrap_or(cfg.ilues.mda_inflation);
    (e.n_e.unwrap_or(cfg.ilues.n_e), c)
}

fn chain_config(cfg: &ExperimentConfig, spec: &PriorSpec) -> ChainConfig {
    let m = &cfg.mcmc;
    let scales = m
        .proposal_scale
        .clone()
        .unwrap_or_else(|| ChainConfig::default_scales(spec));
    let mut c = ChainConfig::new(m.n_chains, m.chain_length, scales, cfg.seed);
    c.burn_in_fraction = m.burn_in_fraction;
    c.thin = m.thin;
    c
}

/// Runs the configured algorithm in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let spec = cfg.prior_spec()?;
    let model = build_model(cfg)?;
    let fixture = resolve_measurement(cfg, model.as_ref())?;
    let meas = fixture.measurement()?;
    let prior_rng = |n| sample_prior(&spec, n, &mut substream(cfg.seed, &[tag::PRIOR]));

    let (stages, converged, iterations_used, mcmc) = match cfg.algorithm {
        Algorithm::Ilues => {
            let c = ilues_config(cfg);
            let run = ilues_iterate(model.as_ref(), &prior_rng(c.n_e)?, &meas, &c, Some(&spec))?;
            (run.iterations, run.converged, run.iterations_used, None)
        }
        Algorithm::Es => {
            let (n_e, c) = es_config(cfg);
            let run = iterative_es(model.as_ref(), &prior_rng(n_e)?, &meas, &c, Some(&spec))?;
            (run.iterations, run.converged, run.iterations_used, None)
        }
        Algorithm::Mcmc => {
            let post = run_chains(model.as_ref(), &spec, &meas, &chain_config(cfg, &spec))?;
            let predictions = evaluate_ensemble(model.as_ref(), &post.pooled)?;
            let stage = IterationRecord {
                log_rmse: log_rmse(&predictions, meas.d())?,
                ensemble: post.pooled.clone(),
                predictions,
                metric: None,
            };
            let report = McmcReport {
                acceptance_rates: post.acceptance_rates(),
                r_hat: post.r_hat.clone(),
            };
            (vec![stage], true, 0, Some(report))
        }
    };
    let summary = summarize(cfg, &spec, &stages, converged, iterations_used, mcmc, start)?;
    Ok(ExperimentOutput {
        config: cfg.clone(),
        summary,
        stages,
        fixture,
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    spec: &PriorSpec,
    stages: &[IterationRecord],
    converged: bool,
    iterations_used: usize,
    mcmc: Option<McmcReport>,
    start: Instant,
) -> Result<RunSummary> {
    let last = stages.last().expect("at least one stage");
    let mean = last.ensemble.mean();
    let std = last.ensemble.std();
    let parameters = spec
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| ParameterSummary {
            name: name.clone(),
            mean: mean[i],
            std: std[i],
        })
        .collect();
    let out = last.predictions.outputs();
    let n = out.ncols() as f64;
    let prediction_mean: Vec<f64> = out.row_iter().map(|r| r.sum() / n).collect();
    let prediction_var = out
        .row_iter()
        .zip(&prediction_mean)
        .map(|(r, m)| r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let mut bimodality = Vec::new();
    for check in &cfg.diagnostics.bimodal {
        let i = spec.index_of(&check.param).ok_or_else(|| {
            Error::Config(format!("diagnostic parameter {:?} is not in the prior", check.param))
        })?;
        let samples: Vec<f64> = last.ensemble.params().row(i).iter().copied().collect();
        bimodality.push(BimodalityReport {
            param: check.param.clone(),
            split: check.split,
            result: bimodality_diagnostic(&samples, check.split)?,
        });
    }
    Ok(RunSummary {
        name: cfg.name.clone(),
        model: cfg.model,
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        n_members: last.ensemble.n_members(),
        iterations_used,
        converged,
        median_log_rmse: stages.iter().map(|s| median(&s.log_rmse)).collect(),
        min_log_rmse: stages
            .iter()
            .map(|s| s.log_rmse.iter().copied().fold(f64::INFINITY, f64::min))
            .collect(),
        convergence: stages.iter().map(|s| s.metric).collect(),
        wall_time_s: start.elapsed().as_secs_f64(),
        parameters,
        prediction_mean,
        prediction_var,
        bimodality,
        mcmc,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub version: String,
    pub config_sha256: String,
    pub measurement_sha256: String,
    /// Committed fixtures the run read, with their content hashes.
    pub fixtures: Vec<FixtureDigest>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Stage directory names: `iter_<k>` for smoothers, `posterior` for MCMC.
pub fn stage_dirs(out: &ExperimentOutput) -> Vec<String> {
    match out.config.algorithm {
        Algorithm::Mcmc => vec!["posterior".to_string()],
        _ => (0..out.stages.len()).map(|k| format!("iter_{k}")).collect(),
    }
}

/// Writes the artifacts of a finished run under `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (stage, name) in out.stages.iter().zip(stage_dirs(out)) {
        let sub = dir.join(name);
        create_dir(&sub)?;
        io::write_ensemble(&sub.join("ensemble.csv"), &stage.ensemble)?;
        io::write_predictions(&sub.join("predictions.csv"), &stage.predictions)?;
    }
    let measurement = out.fixture.to_json();
    write_text(&dir.join("measurement.json"), &measurement)?;

    // The copied config reads the data from the copied measurement and
    // carries absolute paths for any other inputs.
    let mut copy = out.config.clone();
    copy.measurement.fixture = Some(PathBuf::from("measurement.json"));
    copy.output = None;
    copy.model_options.kl_cache = None;
    if let Some(f) = &copy.model_options.forcing {
        copy.model_options.forcing = Some(out.config.resolve(f));
    }
    let config_text = copy.to_toml();
    write_text(&dir.join("config.toml"), &config_text)?;

    let mut fixtures = Vec::new();
    let cfg = &out.config;
    let inputs = [cfg.measurement.fixture.as_ref(), cfg.model_options.forcing.as_ref()];
    for p in inputs.into_iter().flatten() {
        let path = cfg.resolve(p);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        fixtures.push(FixtureDigest {
            path: p.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        name: cfg.name.clone(),
        seed: cfg.seed,
        algorithm: cfg.algorithm,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        measurement_sha256: sha256_hex(measurement.as_bytes()),
        fixtures,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&dir.join("manifest.json"), &text)?;
    let mut text = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    text.push('\n');
    write_text(&dir.join("summary.json"), &text)
}

/// Runs an experiment and writes its artifacts under `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let out = execute(cfg)?;
    write_outputs(&out, dir)?;
    Ok(out.summary)
}

/// Final-stage ensemble as an `N_m × N_e` matrix.
pub fn final_params(out: &ExperimentOutput) -> &DMatrix<f64> {
    out.stages.last().expect("at least one stage").ensemble.params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn one_sided_samples_are_not_bimodal() {
        let s: Vec<f64> = (0..100).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b = bimodality_diagnostic(&s, 5.0).unwrap();
        assert!(!b.bimodal);
        assert_eq!(b.fraction_below, 1.0);
    }

    #[test]
    fn separated_clusters_are_bimodal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..400)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                (if i % 2 == 0 { 4.0 } else { 6.0 }) + 0.1 * z
            })
            .collect();
        let b = bimodality_diagnostic(&s, 5.0).unwrap();
        assert!(b.bimodal, "{b:?}");
        assert!((b.mean_below - 4.0).abs() < 0.05 && (b.mean_above - 6.0).abs() < 0.05);
    }

    #[test]
    fn uniform_samples_are_not_bimodal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..2000).map(|_| rng.random_range(3.0..7.0)).collect();
        let b = bimodality_diagnostic(&s, 5.0).unwrap();
        // Side means 2 apart against a within-side std of about 0.58.
        assert!(!b.bimodal, "{b:?}");
        assert!(b.fraction_below > 0.4 && b.fraction_above > 0.4);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(bimodality_diagnostic(&[1.0; 49], 0.0).is_err());
    }
}
