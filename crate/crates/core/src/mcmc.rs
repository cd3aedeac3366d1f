//! Random-walk Metropolis sampler used as a reference posterior on
//! low-dimensional problems.
//!
//! Chains start from prior draws and use Gaussian proposals with a
//! per-parameter scale. During burn-in a global step factor is tuned towards
//! an acceptance rate of 0.234 and, once the chain has moved, the proposal
//! switches to the covariance of its recent history. Everything is frozen at
//! the end of burn-in so the kept samples come from a fixed Markov kernel.
//! The likelihood is tempered over the first half of burn-in to help chains
//! leave poor starting regions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ForwardModel;
use crate::priors::{gmm_log_pdf, sample_prior, PriorSpec};
use crate::rng::{substream, tag};
use crate::stats::{Ensemble, Measurement};

const TARGET_ACCEPTANCE: f64 = 0.234;
const ADAPT_BATCH: usize = 50;
const ADAPT_GAIN: f64 = 2.0;
const START_CANDIDATES: usize = 50;
/// Burn-in step after which the proposal follows the chain's own covariance.
const COVARIANCE_START: usize = 500;

/// Scaled Cholesky factor `2.38/√n · chol(Σ)` of the recent chain history,
/// or `None` while the history has not moved in every direction.
fn proposal_factor(history: &[DVector<f64>], base: &[f64]) -> Option<DMatrix<f64>> {
    let n = base.len();
    let count = history.len();
    if count < 2 * n + 2 {
        return None;
    }
    let mean = history.iter().fold(DVector::zeros(n), |acc, h| acc + h) / count as f64;
    let mut cov = DMatrix::zeros(n, n);
    for h in history {
        let dev = h - &mean;
        cov += &dev * dev.transpose();
    }
    cov /= (count - 1) as f64;
    for k in 0..n {
        // A coordinate that never moved means the chain is still stuck.
        if cov[(k, k)] <= (1e-8 * base[k]).powi(2) {
            return None;
        }
        cov[(k, k)] += (1e-6 * base[k]).powi(2);
    }
    let l = nalgebra::Cholesky::new(cov)?.unpack();
    Some(l * (2.38 / (n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub chain_length: usize,
    /// Proposal standard deviation per parameter.
    pub proposal_scale: Vec<f64>,
    pub burn_in_fraction: f64,
    pub seed: u64,
    /// Tune the proposal scale during burn-in.
    pub adapt: bool,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
}

impl ChainConfig {
    pub fn new(n_chains: usize, chain_length: usize, proposal_scale: Vec<f64>, seed: u64) -> Self {
        Self {
            n_chains,
            chain_length,
            proposal_scale,
            burn_in_fraction: 0.5,
            seed,
            adapt: true,
            thin: 1,
        }
    }

    /// Proposal scales of a tenth of each marginal's span.
    pub fn default_scales(prior: &PriorSpec) -> Vec<f64> {
        prior.marginals().iter().map(|m| 0.1 * m.span()).collect()
    }

    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.chain_length < 100 {
            return Err(Error::Config(format!(
                "chain_length must be at least 100, got {}",
                self.chain_length
            )));
        }
        if self.proposal_scale.len() != n_params {
            return Err(Error::Dimension {
                context: "proposal scales",
                expected: n_params,
                found: self.proposal_scale.len(),
            });
        }
        if self.proposal_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("proposal scales must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config("burn_in_fraction must lie in [0, 1)".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    fn burn_in(&self) -> usize {
        (self.burn_in_fraction * self.chain_length as f64).floor() as usize
    }
}

/// Prior and likelihood parts of the log posterior.
#[derive(Debug, Clone, Copy)]
struct Terms {
    prior: f64,
    likelihood: f64,
}

impl Terms {
    fn total(self) -> f64 {
        self.prior + self.likelihood
    }

    fn tempered(self, beta: f64) -> f64 {
        self.prior + beta * self.likelihood
    }
}

/// Likelihood exponent at `step`: rises geometrically from `1e-3` to 1 over
/// the first half of burn-in, then stays at 1.
fn temperature(step: usize, burn_in: usize, adapt: bool) -> f64 {
    let ramp = burn_in / 2;
    if !adapt || step >= ramp {
        return 1.0;
    }
    1e-3f64.powf(1.0 - step as f64 / ramp as f64)
}

fn log_terms(
    model: &dyn ForwardModel,
    prior: &PriorSpec,
    meas: &Measurement,
    m: &[f64],
) -> Result<Terms> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MCMC state"));
    }
    if m.len() != prior.len() {
        return Err(Error::Dimension {
            context: "MCMC state",
            expected: prior.len(),
            found: m.len(),
        });
    }
    let lp = gmm_log_pdf(prior, m);
    if lp == f64::NEG_INFINITY {
        return Ok(Terms { prior: lp, likelihood: 0.0 });
    }
    let f = model.evaluate(m)?;
    if f.len() != meas.len() {
        return Err(Error::Dimension {
            context: "model outputs",
            expected: meas.len(),
            found: f.len(),
        });
    }
    Ok(Terms { prior: lp, likelihood: -0.5 * meas.misfit(&f) })
}

/// Log prior plus Gaussian log likelihood, up to an additive constant;
/// `−∞` outside the prior support, where the model is not evaluated.
pub fn log_posterior(
    model: &dyn ForwardModel,
    prior: &PriorSpec,
    meas: &Measurement,
    m: &[f64],
) -> Result<f64> {
    Ok(log_terms(model, prior, meas, m)?.total())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    /// Kept states, `N_m × n_kept`.
    pub samples: DMatrix<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    pub final_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub chains: Vec<ChainResult>,
    /// All kept states, chain by chain.
    pub pooled: Ensemble,
    pub r_hat: Vec<f64>,
}

impl PosteriorSamples {
    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.chains.iter().map(|c| c.acceptance_rate).collect()
    }
}

fn run_chain(
    model: &dyn ForwardModel,
    prior: &PriorSpec,
    meas: &Measurement,
    cfg: &ChainConfig,
    chain: usize,
) -> Result<ChainResult> {
    let mut rng = substream(cfg.seed, &[tag::CHAIN, chain as u64]);
    let n = prior.len();
    // Start from the best of a batch of prior draws.
    let mut state: Option<(DVector<f64>, Terms)> = None;
    let mut tried = 0;
    while tried < 1000 && (tried < START_CANDIDATES || state.is_none()) {
        tried += 1;
        let draw = sample_prior(prior, 2, &mut rng)?.member(0);
        let t = log_terms(model, prior, meas, draw.as_slice())?;
        if t.total().is_finite() && state.as_ref().is_none_or(|(_, best)| t.total() > best.total()) {
            state = Some((draw, t));
        }
    }
    let (mut x, mut terms) = state.ok_or_else(|| {
        Error::Config(format!("chain {chain}: no prior draw with finite posterior density"))
    })?;

    let burn_in = cfg.burn_in();
    let base: Vec<f64> = cfg.proposal_scale.clone();
    // Global log step multiplier, tuned in both proposal modes.
    let mut log_g = 0.0f64;
    // Lower Cholesky factor of the adapted proposal covariance, once available.
    let mut factor: Option<DMatrix<f64>> = None;
    let mut history: Vec<DVector<f64>> = Vec::new();
    let mut batch_accepts = 0usize;
    let mut batch_index = 0usize;
    let mut accepted_after = 0usize;
    let mut kept = Vec::new();
    for step in 0..cfg.chain_length {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = log_g.exp();
        let proposal = match &factor {
            Some(l) => &x + (l * &z) * g,
            None => DVector::from_fn(n, |k, _| x[k] + g * base[k] * z[k]),
        };
        let t_new = log_terms(model, prior, meas, proposal.as_slice())?;
        let beta = temperature(step, burn_in, cfg.adapt);
        let u: f64 = rng.random();
        let accept = t_new.total().is_finite() && u.ln() < t_new.tempered(beta) - terms.tempered(beta);
        if accept {
            x = proposal;
            terms = t_new;
        }
        if step < burn_in {
            batch_accepts += accept as usize;
            if cfg.adapt {
                history.push(x.clone());
                if (step + 1) % ADAPT_BATCH == 0 {
                    batch_index += 1;
                    let rate = batch_accepts as f64 / ADAPT_BATCH as f64;
                    log_g += ADAPT_GAIN * (rate - TARGET_ACCEPTANCE) / (batch_index as f64).sqrt();
                    batch_accepts = 0;
                    if step + 1 >= COVARIANCE_START.max(20 * n) {
                        if let Some(l) = proposal_factor(&history[history.len() / 2..], &base) {
                            if factor.is_none() {
                                log_g = 0.0;
                            }
                            factor = Some(l);
                        }
                    }
                }
            }
        } else {
            accepted_after += accept as usize;
            if (step - burn_in) % cfg.thin == 0 {
                kept.push(x.clone());
            }
        }
    }
    let acceptance_rate = accepted_after as f64 / (cfg.chain_length - burn_in) as f64;
    if !(0.05..=0.7).contains(&acceptance_rate) {
        log::warn!(
            "chain {chain}: acceptance rate {acceptance_rate:.3} outside [0.05, 0.7]; consider retuning the proposal scale"
        );
    }
    let g = log_g.exp();
    let final_scale = match &factor {
        Some(l) => (0..n).map(|k| g * l.row(k).norm()).collect(),
        None => base.iter().map(|b| g * b).collect(),
    };
    Ok(ChainResult {
        samples: DMatrix::from_columns(&kept),
        acceptance_rate,
        final_scale,
    })
}

pub fn run_chains(
    model: &dyn ForwardModel,
    prior: &PriorSpec,
    meas: &Measurement,
    cfg: &ChainConfig,
) -> Result<PosteriorSamples> {
    cfg.validate(prior.len())?;
    if model.n_params() != prior.len() {
        return Err(Error::Dimension {
            context: "model parameters",
            expected: prior.len(),
            found: model.n_params(),
        });
    }
    let chains: Vec<ChainResult> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, prior, meas, cfg, c))
        .collect::<Result<_>>()?;
    let columns: Vec<DVector<f64>> = chains
        .iter()
        .flat_map(|c| c.samples.column_iter().map(|s| s.into_owned()))
        .collect();
    let pooled = Ensemble::new(DMatrix::from_columns(&columns), prior.names().to_vec())?;
    let samples: Vec<DMatrix<f64>> = chains.iter().map(|c| c.samples.clone()).collect();
    let r_hat = if cfg.n_chains >= 2 {
        gelman_rubin(&samples)?
    } else {
        vec![f64::NAN; prior.len()]
    };
    Ok(PosteriorSamples {
        chains,
        pooled,
        r_hat,
    })
}

/// Potential scale reduction factor per parameter from equally long chains.
pub fn gelman_rubin(chains: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::TooFewMembers(m));
    }
    let (n_par, n) = chains[0].shape();
    if n < 2 || chains.iter().any(|c| c.shape() != (n_par, n)) {
        return Err(Error::Config("chains must share a shape with at least 2 samples".into()));
    }
    Ok((0..n_par)
        .map(|p| {
            let means: Vec<f64> = chains.iter().map(|c| c.row(p).mean()).collect();
            let vars: Vec<f64> = chains
                .iter()
                .zip(&means)
                .map(|(c, mu)| c.row(p).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
                .collect();
            let grand = means.iter().sum::<f64>() / m as f64;
            let b = n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
            let w = vars.iter().sum::<f64>() / m as f64;
            let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
            (var_plus / w).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearModel, SumOfSquares};
    use crate::priors::Marginal;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn uniform(n: usize, lo: f64, hi: f64) -> PriorSpec {
        PriorSpec::repeated("x", n, Marginal::Uniform { lo, hi }).unwrap()
    }

    #[test]
    fn log_posterior_examples() {
        let prior = uniform(2, -2.0, 2.0);
        let meas = Measurement::diagonal(dvector![1.0], &[0.01]).unwrap();
        let model = SumOfSquares::new(2);
        assert_eq!(
            log_posterior(&model, &prior, &meas, &[3.0, 0.0]).unwrap(),
            f64::NEG_INFINITY
        );
        let at_ring = log_posterior(&model, &prior, &meas, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(at_ring, -(4.0f64).ln() * 2.0, epsilon = 1e-12);
        let off = log_posterior(&model, &prior, &meas, &[0.5, 0.0]).unwrap();
        assert!(off < at_ring);
    }

    #[test]
    fn conjugate_gaussian_moments() {
        let prior = PriorSpec::repeated("m", 1, Marginal::StdNormal).unwrap();
        let meas = Measurement::new(dvector![1.0], dmatrix![1.0]).unwrap();
        let cfg = ChainConfig::new(4, 40_000, vec![1.0], 11);
        let post = run_chains(&LinearModel::identity(1), &prior, &meas, &cfg).unwrap();
        let e = &post.pooled;
        assert!((e.mean()[0] - 0.5).abs() < 0.05 * 0.5, "{}", e.mean()[0]);
        assert!((e.std()[0].powi(2) - 0.5).abs() < 0.05 * 0.5, "{}", e.std()[0]);
        assert!(post.r_hat[0] < 1.1);
        for rate in post.acceptance_rates() {
            assert!((0.1..0.6).contains(&rate), "{rate}");
        }
    }

    #[test]
    fn histogram_matches_target() {
        // Prior U(−3, 3), f(m) = m, d = 0.5, σ = 1: a truncated normal.
        let prior = uniform(1, -3.0, 3.0);
        let meas = Measurement::diagonal(dvector![0.5], &[1.0]).unwrap();
        let mut cfg = ChainConfig::new(1, 1_000_000, vec![1.5], 2);
        cfg.burn_in_fraction = 0.01;
        let post = run_chains(&LinearModel::identity(1), &prior, &meas, &cfg).unwrap();
        let bins = 30;
        let width = 6.0 / bins as f64;
        let mut hist = vec![0.0; bins];
        for &v in post.pooled.params().iter() {
            hist[(((v + 3.0) / width) as usize).min(bins - 1)] += 1.0;
        }
        let total: f64 = hist.iter().sum();
        let density: Vec<f64> = (0..bins)
            .map(|b| {
                // Simpson's rule on each bin.
                let a = -3.0 + b as f64 * width;
                let f = |x: f64| (-0.5 * (x - 0.5f64).powi(2)).exp();
                width / 6.0 * (f(a) + 4.0 * f(a + width / 2.0) + f(a + width))
            })
            .collect();
        let norm: f64 = density.iter().sum();
        let tv: f64 = hist
            .iter()
            .zip(&density)
            .map(|(h, d)| (h / total - d / norm).abs())
            .sum::<f64>()
            * 0.5;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn ring_radius_concentrates() {
        let prior = uniform(2, -2.0, 2.0);
        let meas = Measurement::diagonal(dvector![1.0], &[0.01]).unwrap();
        let cfg = ChainConfig::new(4, 20_000, vec![0.05, 0.05], 5);
        let post = run_chains(&SumOfSquares::new(2), &prior, &meas, &cfg).unwrap();
        let radii: Vec<f64> = post
            .pooled
            .params()
            .column_iter()
            .map(|c| c.norm())
            .collect();
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let sd = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        // y ~ N(1, 0.01²) and r = √y give sd(r) ≈ 0.005.
        assert!((mean - 1.0).abs() < 0.002, "{mean}");
        assert!((sd - 0.005).abs() < 0.0015, "{sd}");
    }

    #[test]
    fn deterministic_and_schedule_free() {
        let prior = PriorSpec::repeated("m", 2, Marginal::StdNormal).unwrap();
        let meas = Measurement::new(dvector![1.0], dmatrix![0.5]).unwrap();
        let model = LinearModel::new(dmatrix![1.0, 2.0]);
        let cfg = ChainConfig::new(3, 500, vec![0.5, 0.5], 9);
        let a = run_chains(&model, &prior, &meas, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_chains(&model, &prior, &meas, &cfg).unwrap());
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.pooled.n_members(), 3 * 250);
    }

    #[test]
    fn gelman_rubin_examples() {
        let same = dmatrix![1.0, 2.0, 3.0, 4.0];
        let r = gelman_rubin(&[same.clone(), same.clone()]).unwrap();
        assert!(r[0] < 1.0);
        let apart = gelman_rubin(&[same.clone(), same.add_scalar(100.0)]).unwrap();
        assert!(apart[0] > 10.0);
        assert!(gelman_rubin(&[same]).is_err());
    }

    #[test]
    fn config_validation() {
        let prior = uniform(2, 0.0, 1.0);
        assert_eq!(ChainConfig::default_scales(&prior), vec![0.1, 0.1]);
        assert!(ChainConfig::new(1, 50, vec![0.1, 0.1], 0).validate(2).is_err());
        assert!(ChainConfig::new(1, 200, vec![0.1], 0).validate(2).is_err());
        assert!(ChainConfig::new(1, 200, vec![0.1, 0.0], 0).validate(2).is_err());
        assert!(ChainConfig::new(1, 200, vec![0.1, 0.1], 0).validate(2).is_ok());
    }
}
