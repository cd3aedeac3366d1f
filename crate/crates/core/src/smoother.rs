//! The global ensemble smoother update and its multiple-assimilation loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ilues::{convergence_metric, parameter_scale};
use crate::models::{evaluate_ensemble, ForwardModel};
use crate::priors::{apply_bounds, BoundsPolicy, PriorSpec};
use crate::rng::{substream, tag};
use crate::stats::{
    auto_covariance, cross_covariance, log_rmse, Ensemble, Measurement, PredictionSet, SpdFactor,
};

/// Measurement realizations `d_j = d + ε_j`, one column per member.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedMeasurements {
    pub realizations: DMatrix<f64>,
}

pub fn perturb_measurements<R: Rng + ?Sized>(
    meas: &Measurement,
    n: usize,
    rng: &mut R,
) -> Result<PerturbedMeasurements> {
    if n == 0 {
        return Err(Error::TooFewMembers(0));
    }
    let mut realizations = DMatrix::zeros(meas.len(), n);
    for j in 0..n {
        let eps = meas.draw_noise(rng);
        realizations.set_column(j, &(meas.d() + eps));
    }
    Ok(PerturbedMeasurements { realizations })
}

/// The realization used by the update of `member` inside the local ensemble
/// of `anchor` at `iteration`. The global smoother uses `anchor == member`.
pub fn keyed_realization(
    meas: &Measurement,
    seed: u64,
    iteration: usize,
    anchor: u64,
    member: u64,
) -> DVector<f64> {
    let mut rng = substream(seed, &[tag::PERTURB, iteration as u64, anchor, member]);
    meas.d() + meas.draw_noise(&mut rng)
}

/// `C_MD·(C_DD + C_D)⁻¹` in factored form, built from a set of paired
/// parameter and prediction columns.
#[derive(Debug, Clone)]
pub struct KalmanGain {
    c_md: DMatrix<f64>,
    system: SpdFactor,
}

impl KalmanGain {
    pub fn new(m: &Ensemble, p: &PredictionSet, meas: &Measurement) -> Result<Self> {
        if m.n_members() != p.n_members() {
            return Err(Error::Dimension {
                context: "gain member count",
                expected: m.n_members(),
                found: p.n_members(),
            });
        }
        if p.n_outputs() != meas.len() {
            return Err(Error::Dimension {
                context: "gain data length",
                expected: meas.len(),
                found: p.n_outputs(),
            });
        }
        let c_md = cross_covariance(m, p)?;
        let a = auto_covariance(p)? + meas.c_d();
        let system = SpdFactor::new(&a, 0.0)?;
        Ok(Self { c_md, system })
    }

    pub fn c_md(&self) -> &DMatrix<f64> {
        &self.c_md
    }

    pub fn jitter(&self) -> f64 {
        self.system.jitter()
    }

    /// `m + C_MD (C_DD + C_D)⁻¹ (d_j − f(m))`.
    pub fn update(
        &self,
        m: &DVector<f64>,
        prediction: &DVector<f64>,
        realization: &DVector<f64>,
    ) -> DVector<f64> {
        let x = self.system.solve_vec(&(realization - prediction));
        m + &self.c_md * x
    }
}

/// One global update with caller-supplied realizations.
pub fn es_update_with(
    m: &Ensemble,
    p: &PredictionSet,
    meas: &Measurement,
    perturbed: &PerturbedMeasurements,
) -> Result<Ensemble> {
    let ne = m.n_members();
    if perturbed.realizations.shape() != (meas.len(), ne) {
        return Err(Error::Dimension {
            context: "perturbed measurement columns",
            expected: ne,
            found: perturbed.realizations.ncols(),
        });
    }
    let gain = KalmanGain::new(m, p, meas)?;
    let cols: Vec<DVector<f64>> = (0..ne)
        .into_par_iter()
        .map(|j| {
            gain.update(
                &m.member(j),
                &p.outputs().column(j).into_owned(),
                &perturbed.realizations.column(j).into_owned(),
            )
        })
        .collect();
    m.with_params(DMatrix::from_columns(&cols))
}

/// One global update, drawing `d_j` from `rng` in member order.
pub fn es_update<R: Rng + ?Sized>(
    m: &Ensemble,
    p: &PredictionSet,
    meas: &Measurement,
    rng: &mut R,
) -> Result<Ensemble> {
    let perturbed = perturb_measurements(meas, m.n_members(), rng)?;
    es_update_with(m, p, meas, &perturbed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EsConfig {
    pub n_iter: usize,
    /// Multiply `C_D` by `n_iter` in every assimilation.
    pub mda_inflation: bool,
    pub seed: u64,
    pub bounds_policy: BoundsPolicy,
}

impl EsConfig {
    pub fn new(n_iter: usize, seed: u64) -> Self {
        Self {
            n_iter,
            mda_inflation: false,
            seed,
            bounds_policy: BoundsPolicy::None,
        }
    }
}

/// State after one stage of a smoother run. Stage 0 is the prior.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub ensemble: Ensemble,
    pub predictions: PredictionSet,
    pub log_rmse: Vec<f64>,
    /// Normalized change from the previous stage; `None` for the prior.
    pub metric: Option<f64>,
}

impl IterationRecord {
    pub(crate) fn new(
        ensemble: Ensemble,
        predictions: PredictionSet,
        meas: &Measurement,
        metric: Option<f64>,
    ) -> Result<Self> {
        let log_rmse = log_rmse(&predictions, meas.d())?;
        Ok(Self {
            ensemble,
            predictions,
            log_rmse,
            metric,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl RunRecord {
    pub fn final_stage(&self) -> &IterationRecord {
        self.iterations.last().expect("run record holds the prior stage")
    }
}

pub type SmootherRunRecord = RunRecord;

pub(crate) fn check_bounds_spec(
    policy: BoundsPolicy,
    bounds: Option<&PriorSpec>,
    n_params: usize,
) -> Result<()> {
    match (policy, bounds) {
        (BoundsPolicy::None, _) => Ok(()),
        (_, None) => Err(Error::Config(
            "a bounds policy other than none needs the prior specification".into(),
        )),
        (_, Some(spec)) if spec.len() != n_params => Err(Error::Dimension {
            context: "bounds prior parameter count",
            expected: n_params,
            found: spec.len(),
        }),
        _ => Ok(()),
    }
}

/// Member keys `0..n`, the default substream identities.
pub fn default_keys(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Repeats the global update `n_iter` times on the same data, re-running
/// the model and redrawing the realizations every time.
pub fn iterative_es(
    model: &dyn ForwardModel,
    prior: &Ensemble,
    meas: &Measurement,
    cfg: &EsConfig,
    bounds: Option<&PriorSpec>,
) -> Result<RunRecord> {
    iterative_es_keyed(model, prior, meas, cfg, bounds, &default_keys(prior.n_members()))
}

/// [`iterative_es`] with explicit per-member substream keys.
pub fn iterative_es_keyed(
    model: &dyn ForwardModel,
    prior: &Ensemble,
    meas: &Measurement,
    cfg: &EsConfig,
    bounds: Option<&PriorSpec>,
    keys: &[u64],
) -> Result<RunRecord> {
    if cfg.n_iter == 0 {
        return Err(Error::Config("n_iter must be at least 1".into()));
    }
    if keys.len() != prior.n_members() {
        return Err(Error::Dimension {
            context: "member keys",
            expected: prior.n_members(),
            found: keys.len(),
        });
    }
    check_bounds_spec(cfg.bounds_policy, bounds, prior.n_params())?;
    let assim = if cfg.mda_inflation {
        meas.scaled(cfg.n_iter as f64)?
    } else {
        meas.clone()
    };
    let scale = parameter_scale(prior);
    let wrap = |iteration: usize| move |e: Error| Error::Iteration {
        iteration,
        source: Box::new(e),
    };

    let predictions = evaluate_ensemble(model, prior).map_err(wrap(0))?;
    let mut stages = vec![IterationRecord::new(prior.clone(), predictions, meas, None)?];
    for it in 1..=cfg.n_iter {
        let last = stages.last().expect("prior stage present");
        let ne = last.ensemble.n_members();
        let mut realizations = DMatrix::zeros(meas.len(), ne);
        for (j, &key) in keys.iter().enumerate() {
            realizations.set_column(j, &keyed_realization(&assim, cfg.seed, it, key, key));
        }
        let perturbed = PerturbedMeasurements { realizations };
        let mut updated = es_update_with(&last.ensemble, &last.predictions, &assim, &perturbed)
            .map_err(wrap(it))?;
        if let Some(spec) = bounds {
            updated = apply_bounds(&updated, spec, cfg.bounds_policy)?;
        }
        let metric = convergence_metric(&last.ensemble, &updated, &scale)?;
        let predictions = evaluate_ensemble(model, &updated).map_err(wrap(it))?;
        stages.push(IterationRecord::new(updated, predictions, meas, Some(metric))?);
    }
    Ok(RunRecord {
        iterations: stages,
        converged: false,
        iterations_used: cfg.n_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{evaluate_ensemble, LinearModel};
    use crate::priors::{sample_prior, Marginal};
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_meas(d: f64, var: f64) -> Measurement {
        Measurement::new(dvector![d], dmatrix![var]).unwrap()
    }

    #[test]
    fn vanishing_noise_reproduces_data() {
        let meas = Measurement::diagonal(dvector![1.0, -2.0], &[1e-15, 1e-15]).unwrap();
        let p = perturb_measurements(&meas, 20, &mut substream(1, &[])).unwrap();
        for col in p.realizations.column_iter() {
            assert!((col - meas.d()).amax() < 1e-10);
        }
    }

    #[test]
    fn perturbation_moments() {
        let meas = scalar_meas(3.0, 1.0);
        let p = perturb_measurements(&meas, 100_000, &mut substream(2, &[])).unwrap();
        let v = p.realizations.row(0);
        let mean = v.mean();
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
        assert!((mean - 3.0).abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let meas = Measurement::diagonal(dvector![0.0, 1.0], &[0.1, 0.2]).unwrap();
        let a = perturb_measurements(&meas, 5, &mut substream(3, &[])).unwrap();
        let b = perturb_measurements(&meas, 5, &mut substream(3, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_with_correlated_errors() {
        let c = dmatrix![1.0, 0.8; 0.8, 1.0];
        let meas = Measurement::new(dvector![0.0, 0.0], c.clone()).unwrap();
        let p = perturb_measurements(&meas, 50_000, &mut substream(4, &[])).unwrap();
        let cov = crate::stats::sample_cross_covariance(&p.realizations, &p.realizations).unwrap();
        assert!((cov - c).amax() < 0.03);
    }

    #[test]
    fn zero_gain_when_parameters_uncorrelated_with_outputs() {
        // Outputs vary but are orthogonal to the centered parameters.
        let m = Ensemble::from_matrix(dmatrix![1.0, 1.0, 1.0, 1.0]).unwrap();
        let p = PredictionSet::new(dmatrix![0.0, 1.0, 0.0, 1.0]).unwrap();
        let meas = scalar_meas(5.0, 1.0);
        let out = es_update(&m, &p, &meas, &mut substream(5, &[])).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn two_member_hand_expansion() {
        // m = [0, 2], f = [0, 4]: C_MD = 4, C_DD = 8, C_D = 1 → gain 4/9.
        let m = Ensemble::from_matrix(dmatrix![0.0, 2.0]).unwrap();
        let p = PredictionSet::new(dmatrix![0.0, 4.0]).unwrap();
        let meas = scalar_meas(1.0, 1.0);
        let perturbed = PerturbedMeasurements {
            realizations: dmatrix![1.5, 0.5],
        };
        let out = es_update_with(&m, &p, &meas, &perturbed).unwrap();
        let gain = 4.0 / (8.0 + 1.0);
        assert_relative_eq!(out.params()[(0, 0)], 0.0 + gain * (1.5 - 0.0), epsilon = 1e-14);
        assert_relative_eq!(out.params()[(0, 1)], 2.0 + gain * (0.5 - 4.0), epsilon = 1e-14);
    }

    #[test]
    fn linear_gaussian_matches_conjugate_posterior() {
        // Prior N(0,1), f(m) = m, d = 1, C_D = 1 → posterior N(0.5, 0.5).
        let spec = PriorSpec::repeated("m", 1, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 100_000, &mut substream(6, &[])).unwrap();
        let model = LinearModel::identity(1);
        let p = evaluate_ensemble(&model, &prior).unwrap();
        let post = es_update(&prior, &p, &scalar_meas(1.0, 1.0), &mut substream(7, &[])).unwrap();
        assert!((post.mean()[0] - 0.5).abs() < 0.02);
        assert!((post.std()[0].powi(2) - 0.5).abs() < 0.02);
    }

    #[test]
    fn single_iteration_equals_single_update() {
        let spec = PriorSpec::repeated("m", 2, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 30, &mut substream(8, &[])).unwrap();
        let model = LinearModel::new(dmatrix![1.0, 2.0; -1.0, 0.5]);
        let meas = Measurement::diagonal(dvector![0.3, 1.0], &[0.5, 0.5]).unwrap();
        let run = iterative_es(&model, &prior, &meas, &EsConfig::new(1, 42), None).unwrap();
        let p = evaluate_ensemble(&model, &prior).unwrap();
        let mut realizations = DMatrix::zeros(2, 30);
        for j in 0..30u64 {
            realizations.set_column(j as usize, &keyed_realization(&meas, 42, 1, j, j));
        }
        let direct =
            es_update_with(&prior, &p, &meas, &PerturbedMeasurements { realizations }).unwrap();
        assert_eq!(run.iterations.len(), 2);
        assert_eq!(run.final_stage().ensemble, direct);
    }

    #[test]
    fn repeated_conditioning_contracts_spread() {
        let spec = PriorSpec::repeated("m", 1, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 2000, &mut substream(9, &[])).unwrap();
        let run = iterative_es(
            &LinearModel::identity(1),
            &prior,
            &scalar_meas(1.0, 1.0),
            &EsConfig::new(3, 10),
            None,
        )
        .unwrap();
        let spreads: Vec<f64> = run.iterations.iter().map(|s| s.ensemble.std()[0]).collect();
        assert!(spreads.windows(2).all(|w| w[1] < w[0]), "{spreads:?}");
    }

    #[test]
    fn affine_equivariance() {
        let spec = PriorSpec::repeated("m", 2, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 40, &mut substream(11, &[])).unwrap();
        let model = LinearModel::new(dmatrix![1.0, -0.5]);
        let meas = scalar_meas(0.7, 0.2);
        let p = evaluate_ensemble(&model, &prior).unwrap();
        let perturbed = perturb_measurements(&meas, 40, &mut substream(12, &[])).unwrap();
        let out = es_update_with(&prior, &p, &meas, &perturbed).unwrap();

        let a = dmatrix![2.0, 1.0; -0.5, 3.0];
        let b = dvector![10.0, -4.0];
        let shift = |x: &DMatrix<f64>| {
            let mut y = &a * x;
            for mut c in y.column_iter_mut() {
                c += &b;
            }
            y
        };
        let moved = prior.with_params(shift(prior.params())).unwrap();
        let out_moved = es_update_with(&moved, &p, &meas, &perturbed).unwrap();
        assert!((out_moved.params() - shift(out.params())).amax() < 1e-8);
    }

    #[test]
    fn no_information_limit() {
        let spec = PriorSpec::repeated("m", 2, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 25, &mut substream(13, &[])).unwrap();
        let model = LinearModel::new(dmatrix![1.0, 1.0]);
        let p = evaluate_ensemble(&model, &prior).unwrap();
        let rel = |t: f64| {
            let meas = scalar_meas(3.0, 1.0).scaled(t).unwrap();
            let out = es_update(&prior, &p, &meas, &mut substream(14, &[])).unwrap();
            (out.params() - prior.params()).amax() / prior.params().amax()
        };
        // The perturbed-data term shrinks like t^(-1/2).
        let (r12, r14) = (rel(1e12), rel(1e14));
        assert!(r12 < 1e-5, "rel change {r12}");
        assert!(r14 < 1e-6, "rel change {r14}");
        assert!((r12 / r14 - 10.0).abs() < 1.0, "{r12} {r14}");
    }

    #[test]
    fn deterministic_runs() {
        let spec = PriorSpec::repeated("m", 2, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 25, &mut substream(15, &[])).unwrap();
        let model = LinearModel::new(dmatrix![1.0, 1.0]);
        let meas = scalar_meas(3.0, 1.0);
        let a = iterative_es(&model, &prior, &meas, &EsConfig::new(2, 1), None).unwrap();
        let b = iterative_es(&model, &prior, &meas, &EsConfig::new(2, 1), None).unwrap();
        assert_eq!(a.final_stage().ensemble, b.final_stage().ensemble);
    }

    #[test]
    fn mda_inflation_scales_error_covariance() {
        let spec = PriorSpec::repeated("m", 1, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 20_000, &mut substream(16, &[])).unwrap();
        let mut cfg = EsConfig::new(4, 2);
        cfg.mda_inflation = true;
        // ES-MDA on a linear-Gaussian problem reproduces the single-step posterior.
        let run = iterative_es(&LinearModel::identity(1), &prior, &scalar_meas(1.0, 1.0), &cfg, None)
            .unwrap();
        let post = &run.final_stage().ensemble;
        assert!((post.mean()[0] - 0.5).abs() < 0.03);
        assert!((post.std()[0].powi(2) - 0.5).abs() < 0.03);
    }

    #[test]
    fn bounds_policy_requires_spec() {
        let spec = PriorSpec::repeated("m", 1, Marginal::StdNormal).unwrap();
        let prior = sample_prior(&spec, 5, &mut substream(17, &[])).unwrap();
        let mut cfg = EsConfig::new(1, 0);
        cfg.bounds_policy = BoundsPolicy::Clamp;
        let err = iterative_es(&LinearModel::identity(1), &prior, &scalar_meas(0.0, 1.0), &cfg, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
