//! Independent prior marginals, sampling, log densities and the
//! parameter-bounds policy shared by every smoother.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Ensemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    StdNormal,
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        match self {
            Marginal::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Prior(format!("uniform needs lo < hi, got [{lo}, {hi}]")));
                }
            }
            Marginal::Gmm {
                weights,
                means,
                stds,
            } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len()
                {
                    return Err(Error::Prior(
                        "gmm weights, means and stds must have equal nonzero length".into(),
                    ));
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::Prior("gmm weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Prior(format!("gmm weights sum to {total}, not 1")));
                }
                if stds.iter().any(|&s| !(s > 0.0)) || means.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Prior("gmm stds must be positive, means finite".into()));
                }
            }
            Marginal::StdNormal => {}
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            Marginal::Gmm {
                weights,
                means,
                stds,
            } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z: f64 = rng.sample(StandardNormal);
                means[k] + stds[k] * z
            }
            Marginal::StdNormal => rng.sample(StandardNormal),
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
        match self {
            Marginal::Uniform { lo, hi } => {
                if (*lo..=*hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Marginal::Gmm {
                weights,
                means,
                stds,
            } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(stds)
                    .map(|((w, m), s)| w.ln() - s.ln() - LN_SQRT_2PI - 0.5 * ((x - m) / s).powi(2))
                    .collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return max;
                }
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            }
            Marginal::StdNormal => -LN_SQRT_2PI - 0.5 * x * x,
        }
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match self {
            Marginal::Uniform { lo, hi } => Some((*lo, *hi)),
            _ => None,
        }
    }

    /// A finite span describing the marginal's typical extent.
    pub fn span(&self) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => hi - lo,
            Marginal::Gmm { means, stds, .. } => {
                let lo = means
                    .iter()
                    .zip(stds)
                    .map(|(m, s)| m - 3.0 * s)
                    .fold(f64::INFINITY, f64::min);
                let hi = means
                    .iter()
                    .zip(stds)
                    .map(|(m, s)| m + 3.0 * s)
                    .fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            }
            Marginal::StdNormal => 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsPolicy {
    #[default]
    None,
    Clamp,
    Reflect,
}

impl std::str::FromStr for BoundsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "clamp" => Ok(Self::Clamp),
            "reflect" => Ok(Self::Reflect),
            other => Err(Error::Config(format!("unknown bounds policy {other:?}"))),
        }
    }
}

/// Named, mutually independent prior marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    names: Vec<String>,
    marginals: Vec<Marginal>,
}

impl PriorSpec {
    pub fn new(names: Vec<String>, marginals: Vec<Marginal>) -> Result<Self> {
        if names.len() != marginals.len() || names.is_empty() {
            return Err(Error::Prior(format!(
                "{} names for {} marginals",
                names.len(),
                marginals.len()
            )));
        }
        for (name, m) in names.iter().zip(&marginals) {
            m.validate()
                .map_err(|e| Error::Prior(format!("parameter {name}: {e}")))?;
        }
        Ok(Self { names, marginals })
    }

    /// The same marginal for every parameter, named `{prefix}1..{prefix}n`.
    pub fn repeated(prefix: &str, n: usize, marginal: Marginal) -> Result<Self> {
        let names = (1..=n).map(|i| format!("{prefix}{i}")).collect();
        Self::new(names, vec![marginal; n])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn in_support(&self, m: &[f64]) -> bool {
        self.marginals
            .iter()
            .zip(m)
            .all(|(marg, &x)| marg.bounds().is_none_or(|(lo, hi)| (lo..=hi).contains(&x)))
    }
}

/// Draws `n` independent prior samples, one column at a time.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, n: usize, rng: &mut R) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::TooFewMembers(n));
    }
    let mut params = DMatrix::zeros(spec.len(), n);
    for j in 0..n {
        for (i, m) in spec.marginals.iter().enumerate() {
            params[(i, j)] = m.sample(rng);
        }
    }
    Ensemble::new(params, spec.names.clone())
}

/// Folds `x` back into `[lo, hi]` by repeated mirroring at the bounds.
pub fn reflect_into(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        return x;
    }
    let width = hi - lo;
    let y = (x - lo).rem_euclid(2.0 * width);
    let folded = if y > width { 2.0 * width - y } else { y };
    (lo + folded).clamp(lo, hi)
}

pub fn apply_bounds_vec(m: &mut [f64], spec: &PriorSpec, policy: BoundsPolicy) {
    if policy == BoundsPolicy::None {
        return;
    }
    for (x, marg) in m.iter_mut().zip(&spec.marginals) {
        if let Some((lo, hi)) = marg.bounds() {
            *x = match policy {
                BoundsPolicy::Clamp => x.clamp(lo, hi),
                BoundsPolicy::Reflect => reflect_into(*x, lo, hi),
                BoundsPolicy::None => *x,
            };
        }
    }
}

pub fn apply_bounds(m: &Ensemble, spec: &PriorSpec, policy: BoundsPolicy) -> Result<Ensemble> {
    if m.n_params() != spec.len() {
        return Err(Error::Dimension {
            context: "apply_bounds parameter count",
            expected: spec.len(),
            found: m.n_params(),
        });
    }
    if m.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("apply_bounds input"));
    }
    let mut params = m.params().clone();
    for mut col in params.column_iter_mut() {
        apply_bounds_vec(col.as_mut_slice(), spec, policy);
    }
    m.with_params(params)
}

/// Joint log prior density; `-inf` outside bounded support.
pub fn gmm_log_pdf(spec: &PriorSpec, m: &[f64]) -> f64 {
    spec.marginals
        .iter()
        .zip(m)
        .map(|(marg, &x)| marg.log_pdf(x))
        .sum()
}
