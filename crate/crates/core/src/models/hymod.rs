//! HYMOD conceptual rainfall-runoff model.
//!
//! A probability-distributed soil-moisture store (capacities distributed as
//! `F(c) = 1 − (1 − c/c_max)^b_exp`) produces rainfall excess. A fraction
//! `beta` of the excess is routed through three quick linear reservoirs in
//! series, the rest through one slow linear reservoir. Reservoir rates are
//! drainage fractions per daily step.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::models::ForwardModel;
use crate::rng::{substream, tag};

pub const PARAM_NAMES: [&str; 5] = ["c_max", "b_exp", "beta", "r_s", "r_q"];
pub const PARAM_RANGES: [(f64, f64); 5] = [
    (1.0, 500.0),
    (0.1, 2.0),
    (0.1, 0.99),
    (0.0, 0.1),
    (0.1, 0.99),
];
pub const TRUE_PARAMS: [f64; 5] = [409.1018, 1.5430, 0.8998, 0.0233, 0.7232];

pub const DEFAULT_WARMUP: usize = 65;
pub const FORCING_STEPS: usize = 365;
pub const FORCING_SEED: u64 = 20_170_301;

const SHIPPED_FORCING: &str = include_str!("../../data/hymod_forcing.txt");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HymodParams {
    pub c_max: f64,
    pub b_exp: f64,
    pub beta: f64,
    pub r_s: f64,
    pub r_q: f64,
}

impl HymodParams {
    pub fn from_slice(m: &[f64]) -> Result<Self> {
        if m.len() != 5 {
            return Err(Error::Dimension {
                context: "hymod parameters",
                expected: 5,
                found: m.len(),
            });
        }
        let p = Self {
            c_max: m[0],
            b_exp: m[1],
            beta: m[2],
            r_s: m[3],
            r_q: m[4],
        };
        p.validate()?;
        Ok(p)
    }

    /// Projects each parameter onto its admissible range.
    pub fn clamped(m: &[f64]) -> Result<Self> {
        if m.len() != 5 {
            return Err(Error::Dimension {
                context: "hymod parameters",
                expected: 5,
                found: m.len(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hymod parameters"));
        }
        let c: Vec<f64> = m
            .iter()
            .zip(PARAM_RANGES)
            .map(|(&v, (lo, hi))| v.clamp(lo, hi))
            .collect();
        Self::from_slice(&c)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.c_max, self.b_exp, self.beta, self.r_s, self.r_q]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, v), (lo, hi)) in PARAM_NAMES.iter().zip(self.to_vec()).zip(PARAM_RANGES) {
            if !(v >= lo && v <= hi) {
                return Err(Error::model(format!(
                    "hymod {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Largest storage the distributed store can hold, `c_max/(b_exp+1)`.
    pub fn max_storage(&self) -> f64 {
        self.c_max / (self.b_exp + 1.0)
    }
}

/// Daily precipitation and potential evapotranspiration.
#[derive(Debug, Clone, PartialEq)]
pub struct Forcing {
    precip: Vec<f64>,
    pet: Vec<f64>,
}

impl Forcing {
    pub fn new(precip: Vec<f64>, pet: Vec<f64>) -> Result<Self> {
        if precip.len() != pet.len() {
            return Err(Error::Dimension {
                context: "forcing series",
                expected: precip.len(),
                found: pet.len(),
            });
        }
        if precip.iter().chain(&pet).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::model("forcing must be finite and nonnegative"));
        }
        Ok(Self { precip, pet })
    }

    pub fn precip(&self) -> &[f64] {
        &self.precip
    }

    pub fn pet(&self) -> &[f64] {
        &self.pet
    }

    pub fn n_steps(&self) -> usize {
        self.precip.len()
    }

    /// Seeded synthetic year: wet days more likely in the cool season,
    /// gamma-distributed wet amounts, sinusoidal PET.
    pub fn synthetic(n_steps: usize, seed: u64) -> Self {
        let mut rng = substream(seed, &[tag::FORCING]);
        let amount = Gamma::new(0.7, 12.0).expect("valid gamma");
        let mut precip = Vec::with_capacity(n_steps);
        let mut pet = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - 100.0) / 365.0;
            let p_wet = 0.35 - 0.15 * phase.sin();
            let wet = rng.random::<f64>() < p_wet;
            let depth: f64 = amount.sample(&mut rng);
            precip.push(if wet { depth } else { 0.0 });
            pet.push(3.0 + 2.0 * phase.sin());
        }
        Self { precip, pet }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# precip pet\n");
        for (p, e) in self.precip.iter().zip(&self.pet) {
            s.push_str(&format!("{p:?} {e:?}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut precip = Vec::new();
        let mut pet = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse {
                path: "forcing".into(),
                message: format!("line {}: expected two numbers, got {line:?}", n + 1),
            };
            if cols.len() != 2 {
                return Err(bad());
            }
            precip.push(cols[0].parse::<f64>().map_err(|_| bad())?);
            pet.push(cols[1].parse::<f64>().map_err(|_| bad())?);
        }
        Self::new(precip, pet)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// The committed forcing fixture.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_FORCING).expect("shipped forcing fixture is valid")
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.precip.iter().map(|p| p * factor).collect(),
            self.pet.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcessStep {
    pub storage: f64,
    pub excess: f64,
    pub et: f64,
}

/// One step of the distributed store. `storage` is the spatially averaged
/// soil moisture, in `[0, c_max/(b_exp+1)]`.
pub fn rainfall_excess_step(
    storage: f64,
    precip: f64,
    pet: f64,
    c_max: f64,
    b_exp: f64,
) -> Result<ExcessStep> {
    if !(c_max > 0.0 && b_exp > 0.0) {
        return Err(Error::model(format!(
            "invalid store parameters c_max={c_max}, b_exp={b_exp}"
        )));
    }
    let b1 = b_exp + 1.0;
    let s_max = c_max / b1;
    if !(storage >= 0.0 && storage <= s_max * (1.0 + 1e-12)) {
        return Err(Error::model(format!(
            "storage {storage} outside [0, {s_max}]"
        )));
    }
    let storage = storage.min(s_max);

    let (after_rain, excess) = if precip > 0.0 {
        // Critical capacity below which every point is saturated.
        let c_prev = c_max * (1.0 - (1.0 - storage / s_max).max(0.0).powf(1.0 / b1));
        let er1 = (precip - (c_max - c_prev)).max(0.0);
        let infil = precip - er1;
        let c_new = ((c_prev + infil) / c_max).min(1.0);
        let mut s_new = s_max * (1.0 - (1.0 - c_new).powf(b1));
        let mut er2 = infil - (s_new - storage);
        if er2 < 0.0 {
            s_new = storage + infil;
            er2 = 0.0;
        }
        (s_new, er1 + er2)
    } else {
        (storage, 0.0)
    };

    let et = (pet * after_rain / s_max).min(after_rain);
    Ok(ExcessStep {
        storage: after_rain - et,
        excess,
        et,
    })
}

/// Levels of the three quick reservoirs and the slow reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cascade {
    pub quick: [f64; 3],
    pub slow: f64,
}

impl Cascade {
    pub fn total(&self) -> f64 {
        self.quick.iter().sum::<f64>() + self.slow
    }
}

fn linear_reservoir(level: f64, inflow: f64, rate: f64) -> (f64, f64) {
    let water = level + inflow;
    ((1.0 - rate) * water, rate * water)
}

/// Routes one step of excess; returns the new levels and the streamflow.
pub fn reservoir_cascade_step(
    states: Cascade,
    excess: f64,
    beta: f64,
    r_q: f64,
    r_s: f64,
) -> (Cascade, f64) {
    let mut next = states;
    let mut inflow = beta * excess;
    for level in next.quick.iter_mut() {
        let (l, out) = linear_reservoir(*level, inflow, r_q);
        *level = l;
        inflow = out;
    }
    let (slow, slow_out) = linear_reservoir(states.slow, (1.0 - beta) * excess, r_s);
    next.slow = slow;
    (next, inflow + slow_out)
}

/// Full simulation record, before warmup is discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct HymodTrace {
    pub streamflow: Vec<f64>,
    pub et: Vec<f64>,
    pub final_storage: f64,
    pub final_cascade: Cascade,
}

impl HymodTrace {
    /// Water stored in the soil and all reservoirs at the end of the run.
    pub fn final_water(&self) -> f64 {
        self.final_storage + self.final_cascade.total()
    }
}

/// Runs from empty stores over the whole forcing.
pub fn hymod_simulate(params: &HymodParams, forcing: &Forcing) -> Result<HymodTrace> {
    params.validate()?;
    let mut storage = 0.0;
    let mut cascade = Cascade::default();
    let mut streamflow = Vec::with_capacity(forcing.n_steps());
    let mut et = Vec::with_capacity(forcing.n_steps());
    for (&p, &e) in forcing.precip.iter().zip(&forcing.pet) {
        let step = rainfall_excess_step(storage, p, e, params.c_max, params.b_exp)?;
        storage = step.storage;
        let (next, q) = reservoir_cascade_step(cascade, step.excess, params.beta, params.r_q, params.r_s);
        cascade = next;
        streamflow.push(q);
        et.push(step.et);
    }
    Ok(HymodTrace {
        streamflow,
        et,
        final_storage: storage,
        final_cascade: cascade,
    })
}

/// Streamflow after discarding the first `warmup` steps.
pub fn hymod_run(params: &HymodParams, forcing: &Forcing, warmup: usize) -> Result<Vec<f64>> {
    if warmup >= forcing.n_steps() {
        return Err(Error::model(format!(
            "warmup {warmup} must be shorter than the forcing ({} steps)",
            forcing.n_steps()
        )));
    }
    let mut q = hymod_simulate(params, forcing)?.streamflow;
    q.drain(..warmup);
    Ok(q)
}

/// HYMOD as a forward model. Parameters are projected onto their admissible
/// ranges before simulation, since mixture priors are unbounded.
#[derive(Debug, Clone)]
pub struct HymodModel {
    forcing: Arc<Forcing>,
    warmup: usize,
}

impl HymodModel {
    pub fn new(forcing: Forcing, warmup: usize) -> Result<Self> {
        if warmup >= forcing.n_steps() {
            return Err(Error::model(format!(
                "warmup {warmup} must be shorter than the forcing ({} steps)",
                forcing.n_steps()
            )));
        }
        Ok(Self {
            forcing: Arc::new(forcing),
            warmup,
        })
    }

    pub fn shipped() -> Self {
        Self::new(Forcing::shipped(), DEFAULT_WARMUP).expect("shipped forcing is long enough")
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }
}

impl ForwardModel for HymodModel {
    fn n_params(&self) -> usize {
        5
    }

    fn n_outputs(&self) -> usize {
        self.forcing.n_steps() - self.warmup
    }

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>> {
        hymod_run(&HymodParams::clamped(params)?, &self.forcing, self.warmup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn truth() -> HymodParams {
        HymodParams::from_slice(&TRUE_PARAMS).unwrap()
    }

    #[test]
    fn dry_step_keeps_storage() {
        let s = rainfall_excess_step(40.0, 0.0, 0.0, 300.0, 1.0).unwrap();
        assert_eq!(s.storage, 40.0);
        assert_eq!(s.excess, 0.0);
        assert_eq!(s.et, 0.0);
    }

    #[test]
    fn saturated_store_passes_all_rain() {
        let (c_max, b) = (300.0, 0.7);
        let full = c_max / (b + 1.0);
        let s = rainfall_excess_step(full, 12.5, 0.0, c_max, b).unwrap();
        assert_relative_eq!(s.excess, 12.5, epsilon = 1e-9);
        assert_relative_eq!(s.storage, full, epsilon = 1e-9);
    }

    #[test]
    fn step_rejects_bad_state() {
        assert!(rainfall_excess_step(-1.0, 1.0, 1.0, 100.0, 1.0).is_err());
        assert!(rainfall_excess_step(60.0, 1.0, 1.0, 100.0, 1.0).is_err());
        assert!(rainfall_excess_step(1.0, 1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn cascade_zero_in_zero_out() {
        let (next, q) = reservoir_cascade_step(Cascade::default(), 0.0, 0.5, 0.5, 0.05);
        assert_eq!(next, Cascade::default());
        assert_eq!(q, 0.0);
    }

    #[test]
    fn slow_reservoir_recession_is_geometric() {
        let r_s = 0.04;
        let x0 = 10.0;
        let mut c = Cascade {
            quick: [0.0; 3],
            slow: x0,
        };
        for t in 0..50 {
            let (next, q) = reservoir_cascade_step(c, 0.0, 0.0, 0.5, r_s);
            assert_relative_eq!(q, r_s * x0 * (1.0 - r_s).powi(t), max_relative = 1e-12);
            c = next;
        }
    }

    #[test]
    fn cascade_conserves_mass() {
        let mut rng = substream(4, &[]);
        let mut c = Cascade::default();
        let (mut q_sum, mut in_sum) = (0.0, 0.0);
        for _ in 0..100 {
            let excess = rng.random_range(0.0..5.0);
            in_sum += excess;
            let (next, q) = reservoir_cascade_step(c, excess, 0.7, 0.6, 0.03);
            c = next;
            q_sum += q;
        }
        assert!((q_sum + c.total() - in_sum).abs() < 1e-8);
    }

    #[test]
    fn cascade_is_linear() {
        let c = Cascade {
            quick: [1.0, 2.0, 3.0],
            slow: 4.0,
        };
        let doubled = Cascade {
            quick: [2.0, 4.0, 6.0],
            slow: 8.0,
        };
        let (a, qa) = reservoir_cascade_step(c, 1.5, 0.6, 0.4, 0.02);
        let (b, qb) = reservoir_cascade_step(doubled, 3.0, 0.6, 0.4, 0.02);
        assert_relative_eq!(qb, 2.0 * qa, max_relative = 1e-14);
        assert_relative_eq!(b.total(), 2.0 * a.total(), max_relative = 1e-14);
    }

    #[test]
    fn zero_forcing_gives_zero_flow() {
        let f = Forcing::new(vec![0.0; 100], vec![0.0; 100]).unwrap();
        let q = hymod_run(&truth(), &f, 10).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn response_is_nonlinear_in_forcing() {
        let f = Forcing::shipped();
        let p = HymodParams::from_slice(&[300.0, 1.0, 0.7, 0.03, 0.5]).unwrap();
        let q1: f64 = hymod_run(&p, &f, DEFAULT_WARMUP).unwrap().iter().sum();
        let q2: f64 = hymod_run(&p, &f.scaled(2.0).unwrap(), DEFAULT_WARMUP)
            .unwrap()
            .iter()
            .sum();
        assert!((q2 / q1 - 2.0).abs() > 0.05, "ratio {}", q2 / q1);
    }

    #[test]
    fn shipped_forcing_matches_generator() {
        let generated = Forcing::synthetic(FORCING_STEPS, FORCING_SEED);
        if std::env::var_os("ILUES_REGENERATE_FIXTURES").is_some() {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/hymod_forcing.txt");
            std::fs::write(path, generated.to_text()).unwrap();
            return;
        }
        assert_eq!(Forcing::shipped(), generated);
        assert_eq!(Forcing::parse(&generated.to_text()).unwrap(), generated);
    }

    #[test]
    fn shipped_forcing_has_wet_and_dry_days() {
        let f = Forcing::shipped();
        assert_eq!(f.n_steps(), FORCING_STEPS);
        let wet = f.precip().iter().filter(|&&p| p > 0.0).count();
        assert!(wet > 60 && wet < 200, "{wet} wet days");
        assert!(f.pet().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn model_output_shape_and_clamping() {
        let m = HymodModel::shipped();
        assert_eq!(m.n_outputs(), FORCING_STEPS - DEFAULT_WARMUP);
        let q = m.evaluate(&TRUE_PARAMS).unwrap();
        assert_eq!(q.len(), 300);
        assert!(q.iter().all(|&v| v >= 0.0));
        assert!(q.iter().any(|&v| v > 0.0));
        let outside = m.evaluate(&[900.0, 3.0, 0.5, 0.02, 0.5]).unwrap();
        let edge = m.evaluate(&[500.0, 2.0, 0.5, 0.02, 0.5]).unwrap();
        assert_eq!(outside, edge);
        assert!(HymodParams::from_slice(&[900.0, 1.0, 0.5, 0.02, 0.5]).is_err());
        assert!(hymod_run(&truth(), &Forcing::shipped(), 365).is_err());
    }

    fn random_forcing(rng: &mut crate::rng::StreamRng, n: usize) -> Forcing {
        let precip = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.4 {
                    rng.random_range(0.0..60.0)
                } else {
                    0.0
                }
            })
            .collect();
        let pet = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
        Forcing::new(precip, pet).unwrap()
    }

    fn random_params(rng: &mut crate::rng::StreamRng) -> HymodParams {
        let v: Vec<f64> = PARAM_RANGES
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect();
        HymodParams::from_slice(&v).unwrap()
    }

    proptest! {
        #[test]
        fn step_mass_balance(seed in 0u64..10_000) {
            let mut rng = substream(seed, &[1]);
            let p = random_params(&mut rng);
            let s0 = rng.random_range(0.0..=p.max_storage());
            let precip = rng.random_range(0.0..80.0);
            let pet = rng.random_range(0.0..10.0);
            let s = rainfall_excess_step(s0, precip, pet, p.c_max, p.b_exp).unwrap();
            prop_assert!((precip - (s.storage - s0) - s.excess - s.et).abs() < 1e-10);
            prop_assert!(s.storage >= 0.0 && s.storage <= p.max_storage() * (1.0 + 1e-12));
            prop_assert!(s.excess >= 0.0 && s.et >= 0.0);
        }

        #[test]
        fn run_mass_balance_and_positivity(seed in 0u64..10_000) {
            let mut rng = substream(seed, &[2]);
            let p = random_params(&mut rng);
            let f = random_forcing(&mut rng, 200);
            let t = hymod_simulate(&p, &f).unwrap();
            let total_p: f64 = f.precip().iter().sum();
            let out: f64 = t.streamflow.iter().sum::<f64>() + t.et.iter().sum::<f64>();
            prop_assert!((total_p - out - t.final_water()).abs() <= 1e-8 * total_p.max(1.0));
            prop_assert!(t.streamflow.iter().all(|&q| q >= 0.0));
        }

        #[test]
        fn wetter_forcing_gives_more_cumulative_flow(seed in 0u64..10_000) {
            let mut rng = substream(seed, &[3]);
            let p = random_params(&mut rng);
            let f = random_forcing(&mut rng, 120);
            let extra: Vec<f64> = f.precip().iter().map(|&v| v + rng.random_range(0.0..5.0)).collect();
            let wet = Forcing::new(extra, f.pet().to_vec()).unwrap();
            let a = hymod_simulate(&p, &f).unwrap().streamflow;
            let b = hymod_simulate(&p, &wet).unwrap().streamflow;
            let (mut ca, mut cb) = (0.0, 0.0);
            for (x, y) in a.iter().zip(&b) {
                ca += x;
                cb += y;
                prop_assert!(cb >= ca - 1e-9 * ca.max(1.0));
            }
        }
    }
}
