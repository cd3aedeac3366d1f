//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilues::{Selection, DEFAULT_CONV_TOL};
use crate::priors::{BoundsPolicy, Marginal, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    /// `f(x) = x₁² + x₂²`.
    Ring2,
    /// `f(x) = Σ xᵢ²` over 100 parameters.
    Sphere100,
    Hymod,
    /// Single point source with constant release, five parameters.
    Source5,
    /// Stepwise source plus a KL-parameterized log-conductivity field.
    Source108,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Ring2 => "ring2",
            ModelId::Sphere100 => "sphere100",
            ModelId::Hymod => "hymod",
            ModelId::Source5 => "source5",
            ModelId::Source108 => "source108",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Ilues,
    Es,
    Mcmc,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ilues => "ilues",
            Algorithm::Es => "es",
            Algorithm::Mcmc => "mcmc",
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ilues" => Ok(Algorithm::Ilues),
            "es" => Ok(Algorithm::Es),
            "mcmc" => Ok(Algorithm::Mcmc),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// One or more parameters sharing a marginal. Either `name` or
/// `prefix` + `count` (names `prefix1..prefixN`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    pub distribution: Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Iid {
        sigma: f64,
    },
    /// `σ_k = factor·|f_k(m*)|`, floored at `floor`.
    Proportional {
        factor: f64,
        #[serde(default = "default_noise_floor")]
        floor: f64,
    },
}

fn default_noise_floor() -> f64 {
    1e-6
}

/// Extra truth components appended after `truth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthTail {
    /// KL coefficients of the seeded reference log-conductivity field.
    ReferenceField,
}

/// Where the data come from. Exactly one of: stated `d` + `sigma`, or a
/// truth + noise recipe. `fixture`, if set, names the committed JSON file
/// holding the realized measurement; the recipe is then used by
/// `fixtures verify`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_tail: Option<TruthTail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

impl MeasurementBlock {
    pub fn is_stated(&self) -> bool {
        self.d.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let stated = self.d.is_some() || self.sigma.is_some();
        let recipe = self.truth.is_some() || self.noise.is_some() || self.noise_seed.is_some();
        match (stated, recipe) {
            (true, true) => Err(Error::Config(
                "measurement: give either d/sigma or truth/noise/noise_seed, not both".into(),
            )),
            (false, false) if self.fixture.is_none() => Err(Error::Config(
                "measurement: needs d/sigma, a truth recipe, or a fixture".into(),
            )),
            (true, false) => match (&self.d, &self.sigma) {
                (Some(d), Some(s)) if d.len() == s.len() && !d.is_empty() => Ok(()),
                _ => Err(Error::Config(
                    "measurement: d and sigma must both be given with equal nonzero length".into(),
                )),
            },
            (false, true) => {
                if self.truth.is_none() || self.noise.is_none() || self.noise_seed.is_none() {
                    return Err(Error::Config(
                        "measurement: truth, noise and noise_seed are all required".into(),
                    ));
                }
                Ok(())
            }
            (false, false) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IluesBlock {
    pub n_e: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_conv_tol")]
    pub conv_tol: f64,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub best_reevaluate: bool,
    #[serde(default)]
    pub bounds: BoundsPolicy,
    #[serde(default)]
    pub mda_inflation: bool,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_b() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    3
}
fn default_conv_tol() -> f64 {
    DEFAULT_CONV_TOL
}

impl Default for IluesBlock {
    fn default() -> Self {
        Self {
            n_e: 100,
            alpha: default_alpha(),
            b: default_b(),
            max_iter: default_max_iter(),
            conv_tol: default_conv_tol(),
            selection: Selection::default(),
            best_reevaluate: false,
            bounds: BoundsPolicy::default(),
            mda_inflation: false,
        }
    }
}

/// Iterative ES settings. Unset fields fall back to the `[ilues]` block so
/// both algorithms can run on identical settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_e: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mda_inflation: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcBlock {
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default = "default_chain_length")]
    pub chain_length: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    /// Initial proposal scale per parameter; a tenth of each prior span if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_scale: Option<Vec<f64>>,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn default_chains() -> usize {
    8
}
fn default_chain_length() -> usize {
    2000
}
fn default_burn_in() -> f64 {
    0.5
}
fn default_thin() -> usize {
    1
}

impl Default for McmcBlock {
    fn default() -> Self {
        Self {
            n_chains: default_chains(),
            chain_length: default_chain_length(),
            burn_in_fraction: default_burn_in(),
            proposal_scale: None,
            thin: default_thin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Cells `[nx, ny]` for the groundwater models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    /// Directory for cached KL bases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_cache: Option<PathBuf>,
    /// HYMOD forcing file; the shipped series if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimodalCheck {
    pub param: String,
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bimodal: Vec<BimodalCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelId,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub prior: Vec<PriorBlock>,
    pub measurement: MeasurementBlock,
    #[serde(default)]
    pub ilues: IluesBlock,
    #[serde(default)]
    pub es: EsBlock,
    #[serde(default)]
    pub mcmc: McmcBlock,
    #[serde(default)]
    pub model_options: ModelOptions,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    /// Directory the config was read from; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.into();
        cfg.measurement.validate()?;
        cfg.prior_spec()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        let mut names = Vec::new();
        let mut marginals = Vec::new();
        for block in &self.prior {
            match (&block.name, &block.prefix, block.count) {
                (Some(name), None, None | Some(1)) => {
                    names.push(name.clone());
                    marginals.push(block.distribution.clone());
                }
                (None, Some(prefix), Some(count)) if count > 0 => {
                    for i in 1..=count {
                        names.push(format!("{prefix}{i}"));
                        marginals.push(block.distribution.clone());
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "each [[prior]] needs either name, or prefix and count".into(),
                    ))
                }
            }
        }
        PriorSpec::new(names, marginals)
    }

    /// Applies a `key=value` override as used by sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "alpha" => self.ilues.alpha = value.parse().map_err(|e| bad(&e))?,
            "b" => self.ilues.b = value.parse().map_err(|e| bad(&e))?,
            "n_e" => {
                let n: usize = value.parse().map_err(|e| bad(&e))?;
                self.ilues.n_e = n;
                if self.es.n_e.is_some() {
                    self.es.n_e = Some(n);
                }
            }
            "max_iter" => self.ilues.max_iter = value.parse().map_err(|e| bad(&e))?,
            "selection" => self.ilues.selection = value.parse()?,
            "algorithm" => self.algorithm = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
        Ok(())
    }
}
