//! Iterative local updating ensemble smoother.
//!
//! Every member `m_j` of the forecast ensemble (the *anchor*) gets its own
//! local ensemble: the `N_l = round(α·N_e)` members with the smallest
//! combined score
//!
//! ```text
//! J(m) = J₁(m)/J₁ᵐᵃˣ + b·J₂(m)/J₂ᵐᵃˣ
//! J₁(m) = (f(m) − d)ᵀ C_D⁻¹ (f(m) − d)
//! J₂(m) = (m − m_j)ᵀ C_MM⁻¹ (m − m_j)
//! ```
//!
//! The local ensemble is updated with the ordinary smoother equations using
//! covariances of the local members only, and one of the updated local
//! members replaces the anchor. The whole procedure repeats on the new
//! ensemble until it stops moving or the iteration budget runs out.
//!
//! Per-anchor work within an iteration is independent and runs on the rayon
//! pool. All randomness comes from substreams keyed by (seed, iteration,
//! anchor, member), so results do not depend on the schedule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{evaluate_columns, evaluate_ensemble, ForwardModel};
use crate::priors::{apply_bounds, BoundsPolicy, PriorSpec};
use crate::rng::{substream, tag};
use crate::smoother::{
    check_bounds_spec, default_keys, keyed_realization, IterationRecord, KalmanGain,
    PerturbedMeasurements, RunRecord,
};
use crate::stats::{sample_cross_covariance, Ensemble, Measurement, PredictionSet, SpdFactor};

/// How the replacement for an anchor is chosen from its updated local
/// ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Uniformly random updated member.
    #[default]
    Random,
    /// Updated copy of the local member with the smallest score. Ranked by
    /// forecast scores unless [`IluesConfig::best_reevaluate`] is set.
    Best,
    /// The updated copy of the anchor itself.
    Identity,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "best" => Ok(Self::Best),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown selection policy {other:?}"))),
        }
    }
}

pub const DEFAULT_CONV_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IluesConfig {
    pub n_e: usize,
    pub alpha: f64,
    pub b: f64,
    pub max_iter: usize,
    pub conv_tol: f64,
    pub selection: Selection,
    pub bounds_policy: BoundsPolicy,
    pub mda_inflation: bool,
    pub seed: u64,
    /// With [`Selection::Best`], re-run the model on the updated local
    /// ensemble and rank by the updated scores. Costs one extra model run per
    /// local member.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub best_reevaluate: bool,
}

impl IluesConfig {
    pub fn new(n_e: usize, seed: u64) -> Self {
        Self {
            n_e,
            alpha: 0.1,
            b: 1.0,
            max_iter: 3,
            conv_tol: DEFAULT_CONV_TOL,
            selection: Selection::Random,
            bounds_policy: BoundsPolicy::None,
            mda_inflation: false,
            seed,
            best_reevaluate: false,
        }
    }

    /// `round(α·N_e)`, floored at 2.
    pub fn local_size(&self) -> usize {
        ((self.alpha * self.n_e as f64).round() as usize).clamp(2, self.n_e.max(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_e < 2 {
            return Err(Error::Config(format!("n_e must be at least 2, got {}", self.n_e)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::Config(format!("b must be positive, got {}", self.b)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.conv_tol >= 0.0) {
            return Err(Error::Config("conv_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Members of one anchor's local ensemble, sorted by substream key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalEnsembleIndex {
    pub anchor: usize,
    pub members: Vec<usize>,
}

impl LocalEnsembleIndex {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn anchor_position(&self) -> Option<usize> {
        self.members.iter().position(|&i| i == self.anchor)
    }
}

/// Score components of every member relative to one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub anchor: usize,
    pub j1: Vec<f64>,
    pub j2: Vec<f64>,
    pub j1_max: f64,
    pub j2_max: f64,
    pub j: Vec<f64>,
}

fn combine(j1: &[f64], j2: &[f64], b: f64) -> (f64, f64, Vec<f64>) {
    let j1_max = j1.iter().copied().fold(0.0, f64::max);
    let j2_max = j2.iter().copied().fold(0.0, f64::max);
    let j = j1
        .iter()
        .zip(j2)
        .map(|(&a, &c)| {
            let t1 = if j1_max > 0.0 { a / j1_max } else { 0.0 };
            let t2 = if j2_max > 0.0 { c / j2_max } else { 0.0 };
            t1 + b * t2
        })
        .collect();
    (j1_max, j2_max, j)
}

/// Sample parameter covariance and its factor, used as the `J₂` metric.
#[derive(Debug, Clone)]
pub struct ParameterMetric {
    covariance: DMatrix<f64>,
    factor: SpdFactor,
}

impl ParameterMetric {
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter()
    }

    /// `L⁻¹·x` column-wise, so that `J₂` becomes a squared Euclidean
    /// distance between whitened columns.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve_lower(x)
    }

    /// `(a − b)ᵀ C_MM⁻¹ (a − b)`.
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let diff = DMatrix::from_column_slice(a.len(), 1, (a - b).as_slice());
        self.whiten(&diff).norm_squared()
    }
}

/// `C_MM` of the current ensemble, jittered until it factors.
pub fn param_autocovariance(m: &Ensemble, jitter: f64) -> Result<ParameterMetric> {
    let params = m.params();
    let degenerate = params
        .column_iter()
        .skip(1)
        .all(|c| c == params.column(0));
    if degenerate {
        return Err(Error::DegenerateEnsemble(
            "all ensemble members are identical, parameter covariance is zero".into(),
        ));
    }
    let mut covariance = sample_cross_covariance(params, params)?;
    covariance.fill_lower_triangle_with_upper_triangle();
    let factor = SpdFactor::new(&covariance, jitter)?;
    Ok(ParameterMetric { covariance, factor })
}

/// Per-iteration quantities shared by every anchor: data misfits `J₁` and
/// whitened parameters.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    j1: Vec<f64>,
    whitened: DMatrix<f64>,
}

impl ScoreContext {
    pub fn new(
        m: &Ensemble,
        p: &PredictionSet,
        meas: &Measurement,
        metric: &ParameterMetric,
    ) -> Result<Self> {
        if m.n_members() != p.n_members() {
            return Err(Error::Dimension {
                context: "score member count",
                expected: m.n_members(),
                found: p.n_members(),
            });
        }
        if p.n_outputs() != meas.len() {
            return Err(Error::Dimension {
                context: "score data length",
                expected: meas.len(),
                found: p.n_outputs(),
            });
        }
        let j1: Vec<f64> = p
            .outputs()
            .column_iter()
            .map(|c| meas.misfit(c.as_slice()))
            .collect();
        if j1.iter().all(|&v| v == 0.0) {
            log::info!("every member fits the data exactly; misfit term dropped from scores");
        }
        Ok(Self {
            j1,
            whitened: metric.whiten(m.params()),
        })
    }

    pub fn j1(&self) -> &[f64] {
        &self.j1
    }

    pub fn n_members(&self) -> usize {
        self.j1.len()
    }

    fn j2(&self, anchor: usize) -> Vec<f64> {
        let a = self.whitened.column(anchor);
        self.whitened
            .column_iter()
            .map(|c| {
                c.iter()
                    .zip(a.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect()
    }

    pub fn score(&self, anchor: usize, b: f64) -> ScoreBreakdown {
        let j2 = self.j2(anchor);
        let (j1_max, j2_max, j) = combine(&self.j1, &j2, b);
        ScoreBreakdown {
            anchor,
            j1: self.j1.clone(),
            j2,
            j1_max,
            j2_max,
            j,
        }
    }
}

pub fn score_members(
    m: &Ensemble,
    p: &PredictionSet,
    meas: &Measurement,
    anchor: usize,
    metric: &ParameterMetric,
    b: f64,
) -> Result<ScoreBreakdown> {
    if anchor >= m.n_members() {
        return Err(Error::Dimension {
            context: "anchor index",
            expected: m.n_members(),
            found: anchor,
        });
    }
    Ok(ScoreContext::new(m, p, meas, metric)?.score(anchor, b))
}

/// The `n_l` members with the smallest combined score, ties broken by
/// ascending member index. The anchor is always included: if it does not
/// rank on its own it displaces the last-ranked member.
pub fn select_local(scores: &ScoreBreakdown, n_l: usize) -> Result<LocalEnsembleIndex> {
    select_local_keyed(scores, n_l, &default_keys(scores.j.len()))
}

pub(crate) fn select_local_keyed(
    scores: &ScoreBreakdown,
    n_l: usize,
    keys: &[u64],
) -> Result<LocalEnsembleIndex> {
    let ne = scores.j.len();
    if n_l < 1 || n_l > ne {
        return Err(Error::Config(format!(
            "local ensemble size {n_l} outside [1, {ne}]"
        )));
    }
    let mut order: Vec<usize> = (0..ne).collect();
    let cmp = |a: &usize, b: &usize| {
        scores.j[*a]
            .total_cmp(&scores.j[*b])
            .then(keys[*a].cmp(&keys[*b]))
    };
    if n_l < ne {
        order.select_nth_unstable_by(n_l - 1, cmp);
        order.truncate(n_l);
    }
    order.sort_by(cmp);
    if !order.contains(&scores.anchor) {
        *order.last_mut().expect("n_l >= 1") = scores.anchor;
    }
    order.sort_by_key(|&i| keys[i]);
    Ok(LocalEnsembleIndex {
        anchor: scores.anchor,
        members: order,
    })
}

fn local_columns(
    m: &Ensemble,
    p: &PredictionSet,
    idx: &LocalEnsembleIndex,
) -> Result<(Ensemble, PredictionSet)> {
    if let Some(&bad) = idx.members.iter().find(|&&i| i >= m.n_members()) {
        return Err(Error::Dimension {
            context: "local member index",
            expected: m.n_members(),
            found: bad,
        });
    }
    let lm = Ensemble::new_unchecked(m.params().select_columns(&idx.members), m.names().to_vec());
    let lp = PredictionSet::new(p.outputs().select_columns(&idx.members))?;
    Ok((lm, lp))
}

/// Realizations `d_i` for every member of a local ensemble.
pub fn local_realizations(
    meas: &Measurement,
    seed: u64,
    iteration: usize,
    idx: &LocalEnsembleIndex,
    keys: &[u64],
) -> PerturbedMeasurements {
    let mut realizations = DMatrix::zeros(meas.len(), idx.len());
    for (col, &i) in idx.members.iter().enumerate() {
        realizations.set_column(
            col,
            &keyed_realization(meas, seed, iteration, keys[idx.anchor], keys[i]),
        );
    }
    PerturbedMeasurements { realizations }
}

/// Smoother update restricted to the local members; returns the updated
/// local ensemble in the order of `idx.members`.
pub fn local_update(
    m: &Ensemble,
    p: &PredictionSet,
    idx: &LocalEnsembleIndex,
    meas: &Measurement,
    perturbed: &PerturbedMeasurements,
) -> Result<Ensemble> {
    if idx.len() < 2 {
        return Err(Error::TooFewMembers(idx.len()));
    }
    if perturbed.realizations.ncols() != idx.len() {
        return Err(Error::Dimension {
            context: "local realizations",
            expected: idx.len(),
            found: perturbed.realizations.ncols(),
        });
    }
    let (lm, lp) = local_columns(m, p, idx)?;
    let gain = KalmanGain::new(&lm, &lp, meas).map_err(|e| Error::Anchor {
        anchor: idx.anchor,
        source: Box::new(e),
    })?;
    let cols: Vec<DVector<f64>> = (0..idx.len())
        .map(|i| {
            gain.update(
                &lm.member(i),
                &lp.outputs().column(i).into_owned(),
                &perturbed.realizations.column(i).into_owned(),
            )
        })
        .collect();
    Ok(Ensemble::new_unchecked(
        DMatrix::from_columns(&cols),
        m.names().to_vec(),
    ))
}

fn pick_position<R: Rng + ?Sized>(
    n_l: usize,
    idx: &LocalEnsembleIndex,
    scores_after: Option<&[f64]>,
    policy: Selection,
    rng: &mut R,
) -> Result<usize> {
    if n_l == 1 {
        return Ok(0);
    }
    match policy {
        Selection::Random => Ok(rng.random_range(0..n_l)),
        Selection::Identity => idx.anchor_position().ok_or_else(|| {
            Error::Config(format!("anchor {} missing from its local ensemble", idx.anchor))
        }),
        Selection::Best => {
            let s = scores_after.ok_or_else(|| {
                Error::Config("best selection needs scores of the updated members".into())
            })?;
            if s.len() != n_l {
                return Err(Error::Dimension {
                    context: "updated member scores",
                    expected: n_l,
                    found: s.len(),
                });
            }
            Ok(s
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("n_l >= 2"))
        }
    }
}

/// Chooses the anchor's replacement from its updated local ensemble.
pub fn pick_updated<R: Rng + ?Sized>(
    local_a: &Ensemble,
    idx: &LocalEnsembleIndex,
    scores_after: Option<&[f64]>,
    policy: Selection,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n_l = local_a.n_members();
    if n_l == 0 {
        return Err(Error::TooFewMembers(0));
    }
    let pos = pick_position(n_l, idx, scores_after, policy, rng)?;
    Ok(local_a.member(pos))
}

/// Mean over members and parameters of `|Δ|/scale`.
pub fn convergence_metric(prev: &Ensemble, curr: &Ensemble, scale: &[f64]) -> Result<f64> {
    if prev.params().shape() != curr.params().shape() {
        return Err(Error::Dimension {
            context: "convergence metric shapes",
            expected: prev.n_members(),
            found: curr.n_members(),
        });
    }
    if scale.len() != prev.n_params() {
        return Err(Error::Dimension {
            context: "convergence metric scale",
            expected: prev.n_params(),
            found: scale.len(),
        });
    }
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("convergence scale must be positive".into()));
    }
    let total: f64 = prev
        .params()
        .column_iter()
        .zip(curr.params().column_iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .zip(scale)
                .map(|((x, y), s)| (x - y).abs() / s)
                .sum::<f64>()
        })
        .sum();
    Ok(total / (prev.n_params() * prev.n_members()) as f64)
}

/// Per-parameter range of an ensemble, with 1 substituted for zero ranges.
pub fn parameter_scale(ensemble: &Ensemble) -> Vec<f64> {
    ensemble
        .params()
        .row_iter()
        .map(|r| {
            let range = r.max() - r.min();
            if range > 0.0 {
                range
            } else {
                1.0
            }
        })
        .collect()
}

pub type IluesRunRecord = RunRecord;

pub fn ilues_iterate(
    model: &dyn ForwardModel,
    prior: &Ensemble,
    meas: &Measurement,
    cfg: &IluesConfig,
    bounds: Option<&PriorSpec>,
) -> Result<IluesRunRecord> {
    ilues_iterate_keyed(model, prior, meas, cfg, bounds, &default_keys(prior.n_members()))
}

struct AnchorSnapshot<'a> {
    ensemble: &'a Ensemble,
    predictions: &'a PredictionSet,
    scores: &'a ScoreContext,
    metric: &'a ParameterMetric,
    assim: &'a Measurement,
    meas: &'a Measurement,
    keys: &'a [u64],
    iteration: usize,
}

fn update_anchor(
    model: &dyn ForwardModel,
    snap: &AnchorSnapshot<'_>,
    cfg: &IluesConfig,
    n_l: usize,
    anchor: usize,
) -> Result<DVector<f64>> {
    let scores = snap.scores.score(anchor, cfg.b);
    let idx = select_local_keyed(&scores, n_l, snap.keys)?;
    let anchor_key = snap.keys[anchor];
    let mut pick_rng = substream(cfg.seed, &[tag::PICK, snap.iteration as u64, anchor_key]);
    let wrap = |e: Error| Error::Anchor {
        anchor,
        source: Box::new(e),
    };

    match (cfg.selection, cfg.best_reevaluate) {
        (Selection::Best, true) => {
            let perturbed = local_realizations(snap.assim, cfg.seed, snap.iteration, &idx, snap.keys);
            let local_a =
                local_update(snap.ensemble, snap.predictions, &idx, snap.assim, &perturbed)?;
            let fresh = evaluate_columns(model, local_a.params()).map_err(wrap)?;
            let j1: Vec<f64> = fresh
                .outputs()
                .column_iter()
                .map(|c| snap.meas.misfit(c.as_slice()))
                .collect();
            let origin = snap.ensemble.member(anchor);
            let j2: Vec<f64> = (0..local_a.n_members())
                .map(|i| snap.metric.distance(&local_a.member(i), &origin))
                .collect();
            let (_, _, after) = combine(&j1, &j2, cfg.b);
            pick_updated(&local_a, &idx, Some(&after), Selection::Best, &mut pick_rng)
        }
        (policy, _) => {
            // Only the chosen member's update is needed; its realization is
            // keyed, so this matches updating the full local ensemble.
            let forecast: Vec<f64>;
            let scores_before = if policy == Selection::Best {
                forecast = idx.members.iter().map(|&i| scores.j[i]).collect();
                Some(forecast.as_slice())
            } else {
                None
            };
            let pos = pick_position(idx.len(), &idx, scores_before, policy, &mut pick_rng)?;
            let member = idx.members[pos];
            let (lm, lp) = local_columns(snap.ensemble, snap.predictions, &idx)?;
            let gain = KalmanGain::new(&lm, &lp, snap.assim).map_err(wrap)?;
            let realization = keyed_realization(
                snap.assim,
                cfg.seed,
                snap.iteration,
                anchor_key,
                snap.keys[member],
            );
            Ok(gain.update(
                &lm.member(pos),
                &lp.outputs().column(pos).into_owned(),
                &realization,
            ))
        }
    }
}

/// [`ilues_iterate`] with explicit per-member substream keys. Permuting the
/// prior columns together with `keys` permutes the result.
pub fn ilues_iterate_keyed(
    model: &dyn ForwardModel,
    prior: &Ensemble,
    meas: &Measurement,
    cfg: &IluesConfig,
    bounds: Option<&PriorSpec>,
    keys: &[u64],
) -> Result<IluesRunRecord> {
    cfg.validate()?;
    if prior.n_members() != cfg.n_e {
        return Err(Error::Dimension {
            context: "prior ensemble size",
            expected: cfg.n_e,
            found: prior.n_members(),
        });
    }
    if keys.len() != cfg.n_e {
        return Err(Error::Dimension {
            context: "member keys",
            expected: cfg.n_e,
            found: keys.len(),
        });
    }
    check_bounds_spec(cfg.bounds_policy, bounds, prior.n_params())?;
    let n_l = cfg.local_size();
    if n_l < prior.n_params() + 1 {
        log::warn!(
            "local ensemble size {n_l} is below N_m + 1 = {}; local covariances are rank deficient",
            prior.n_params() + 1
        );
    }
    let assim = if cfg.mda_inflation {
        meas.scaled(cfg.max_iter as f64)?
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
    let mut converged = false;
    for it in 1..=cfg.max_iter {
        let last = stages.last().expect("prior stage present");
        let metric = param_autocovariance(&last.ensemble, 0.0).map_err(wrap(it))?;
        let scores =
            ScoreContext::new(&last.ensemble, &last.predictions, meas, &metric).map_err(wrap(it))?;
        let snap = AnchorSnapshot {
            ensemble: &last.ensemble,
            predictions: &last.predictions,
            scores: &scores,
            metric: &metric,
            assim: &assim,
            meas,
            keys,
            iteration: it,
        };
        let cols: Vec<DVector<f64>> = (0..cfg.n_e)
            .into_par_iter()
            .map(|j| update_anchor(model, &snap, cfg, n_l, j))
            .collect::<Result<_>>()
            .map_err(wrap(it))?;
        let raw = DMatrix::from_columns(&cols);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(wrap(it)(Error::NonFinite("updated ensemble")));
        }
        let mut updated = last.ensemble.with_params(raw)?;
        if let Some(spec) = bounds {
            updated = apply_bounds(&updated, spec, cfg.bounds_policy)?;
        }
        let change = convergence_metric(&last.ensemble, &updated, &scale)?;
        let predictions = evaluate_ensemble(model, &updated).map_err(wrap(it))?;
        stages.push(IterationRecord::new(updated, predictions, meas, Some(change))?);
        log::debug!("iteration {it}: change {change:.3e}");
        if change < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    let iterations_used = stages.len() - 1;
    Ok(RunRecord {
        iterations: stages,
        converged,
        iterations_used,
    })
}
