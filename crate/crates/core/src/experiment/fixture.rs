//! Measurement fixtures: realized data plus the recipe that produced them.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MeasurementBlock, NoiseSpec, TruthTail};
use crate::error::{Error, Result};
use crate::models::groundwater::reference_xi;
use crate::models::ForwardModel;
use crate::rng::{substream, tag};
use crate::stats::Measurement;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Stated,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: FixtureKind,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFixture {
    pub d: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Noise-free model response `f(m*)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl MeasurementFixture {
    pub fn measurement(&self) -> Result<Measurement> {
        Measurement::diagonal(nalgebra::DVector::from_column_slice(&self.d), &self.sigma)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fixture serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Largest absolute difference in `d`, `sigma` and `clean`, or `None` when
    /// the shapes differ.
    pub fn max_abs_difference(&self, other: &Self) -> Option<f64> {
        fn diff(a: &[f64], b: &[f64]) -> Option<f64> {
            (a.len() == b.len()).then(|| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
        }
        let clean = match (&self.clean, &other.clean) {
            (Some(a), Some(b)) => diff(a, b)?,
            (None, None) => 0.0,
            _ => return None,
        };
        Some(diff(&self.d, &other.d)?.max(diff(&self.sigma, &other.sigma)?).max(clean))
    }
}

/// `d = f(m*) + ε` with a diagonal error model.
pub fn generate_measurement<R: Rng + ?Sized>(
    model: &dyn ForwardModel,
    m_star: &[f64],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let clean = model.evaluate(m_star)?;
    let sigma: Vec<f64> = match *noise {
        NoiseSpec::Iid { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be nonnegative, got {sigma}")));
            }
            vec![sigma; clean.len()]
        }
        NoiseSpec::Proportional { factor, floor } => {
            if !(factor >= 0.0 && floor > 0.0) {
                return Err(Error::Config("proportional noise needs factor ≥ 0 and floor > 0".into()));
            }
            let mut floored = 0;
            let s = clean
                .iter()
                .map(|f| {
                    let s = factor * f.abs();
                    if s < floor {
                        floored += 1;
                        floor
                    } else {
                        s
                    }
                })
                .collect();
            if floored > 0 && factor > 0.0 {
                log::warn!("proportional noise: {floored} of {} sigmas floored at {floor}", clean.len());
            }
            s
        }
    };
    let d = clean
        .iter()
        .zip(&sigma)
        .map(|(f, s)| {
            let z: f64 = rng.sample(StandardNormal);
            f + s * z
        })
        .collect();
    Ok((d, clean, sigma))
}

/// The full truth vector of a recipe.
pub fn recipe_truth(block: &MeasurementBlock) -> Result<Vec<f64>> {
    let mut truth = block
        .truth
        .clone()
        .ok_or_else(|| Error::Config("measurement recipe has no truth".into()))?;
    if let Some(TruthTail::ReferenceField) = block.truth_tail {
        truth.extend(reference_xi());
    }
    Ok(truth)
}

/// Builds the fixture described by the config's stated data or recipe,
/// ignoring any committed fixture file.
pub fn fixture_from_recipe(cfg: &ExperimentConfig, model: &dyn ForwardModel) -> Result<MeasurementFixture> {
    let block = &cfg.measurement;
    let grid = super::model_grid(cfg);
    if let (Some(d), Some(sigma)) = (&block.d, &block.sigma) {
        return Ok(MeasurementFixture {
            d: d.clone(),
            sigma: sigma.clone(),
            clean: None,
            truth: None,
            provenance: Provenance {
                kind: FixtureKind::Stated,
                model: cfg.model.to_string(),
                grid,
                noise: None,
                noise_seed: None,
            },
        });
    }
    let (Some(noise), Some(noise_seed)) = (block.noise, block.noise_seed) else {
        return Err(Error::Config(
            "measurement has neither stated data nor a generation recipe".into(),
        ));
    };
    let truth = recipe_truth(block)?;
    let spec = cfg.prior_spec()?;
    if truth.len() != spec.len() {
        return Err(Error::Dimension {
            context: "measurement truth",
            expected: spec.len(),
            found: truth.len(),
        });
    }
    if !spec.in_support(&truth) {
        return Err(Error::Config("measurement truth lies outside the prior support".into()));
    }
    let mut rng = substream(noise_seed, &[tag::NOISE]);
    let (d, clean, sigma) = generate_measurement(model, &truth, &noise, &mut rng)?;
    Ok(MeasurementFixture {
        d,
        sigma,
        clean: Some(clean),
        truth: Some(truth),
        provenance: Provenance {
            kind: FixtureKind::Generated,
            model: cfg.model.to_string(),
            grid,
            noise: Some(noise),
            noise_seed: Some(noise_seed),
        },
    })
}
