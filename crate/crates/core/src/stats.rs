//! Ensemble containers and the dense kernels shared by every smoother:
//! sample covariances, jittered SPD solves and misfit metrics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floor reported by [`log_rmse`] when a member matches the data exactly.
pub const LOG_RMSE_FLOOR: f64 = -300.0;

/// Relative diagonal jitter levels tried after a failed factorization.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// A set of parameter samples, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    params: DMatrix<f64>,
    names: Vec<String>,
}

impl Ensemble {
    pub fn new(params: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if params.nrows() == 0 {
            return Err(Error::Dimension {
                context: "ensemble parameter count",
                expected: 1,
                found: 0,
            });
        }
        if params.ncols() < 2 {
            return Err(Error::TooFewMembers(params.ncols()));
        }
        if names.len() != params.nrows() {
            return Err(Error::Dimension {
                context: "ensemble parameter names",
                expected: params.nrows(),
                found: names.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble parameters"));
        }
        Ok(Self { params, names })
    }

    /// Builds an ensemble with generated names `p1..pN`.
    pub fn from_matrix(params: DMatrix<f64>) -> Result<Self> {
        let names = (1..=params.nrows()).map(|i| format!("p{i}")).collect();
        Self::new(params, names)
    }

    /// Like [`Ensemble::new`] but allows a single column. Used for local
    /// sub-ensembles and in unit tests of degenerate edges.
    pub(crate) fn new_unchecked(params: DMatrix<f64>, names: Vec<String>) -> Self {
        Self { params, names }
    }

    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }

    pub fn into_params(self) -> DMatrix<f64> {
        self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.params.ncols()
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.params.column(j).into_owned()
    }

    pub fn with_params(&self, params: DMatrix<f64>) -> Result<Self> {
        Self::new(params, self.names.clone())
    }

    /// Per-parameter ensemble mean.
    pub fn mean(&self) -> DVector<f64> {
        self.params.column_mean()
    }

    /// Per-parameter sample standard deviation.
    pub fn std(&self) -> DVector<f64> {
        let n = self.n_members() as f64;
        let mean = self.mean();
        DVector::from_iterator(
            self.n_params(),
            self.params.row_iter().zip(mean.iter()).map(|(row, &mu)| {
                (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }),
        )
    }
}

/// Model outputs for an ensemble, one column per member.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    outputs: DMatrix<f64>,
}

impl PredictionSet {
    pub fn new(outputs: DMatrix<f64>) -> Result<Self> {
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model predictions"));
        }
        Ok(Self { outputs })
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.outputs.ncols()
    }
}

/// An observation vector with its Gaussian error covariance.
///
/// The Cholesky factor of `c_d` is kept so that perturbations and
/// Mahalanobis misfits do not refactor per call.
#[derive(Debug, Clone)]
pub struct Measurement {
    d: DVector<f64>,
    c_d: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    diag_std: Option<Vec<f64>>,
}

impl Measurement {
    pub fn new(d: DVector<f64>, c_d: DMatrix<f64>) -> Result<Self> {
        let n = d.len();
        if n == 0 {
            return Err(Error::Dimension {
                context: "measurement length",
                expected: 1,
                found: 0,
            });
        }
        if c_d.nrows() != n || c_d.ncols() != n {
            return Err(Error::Dimension {
                context: "measurement covariance",
                expected: n,
                found: c_d.nrows().max(c_d.ncols()),
            });
        }
        if d.iter().chain(c_d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement"));
        }
        let scale = c_d.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (c_d[(i, j)] - c_d[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "measurement covariance asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = Cholesky::new(c_d.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite("measurement covariance".to_string())
        })?;
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || c_d[(i, j)] == 0.0));
        let diag_std = is_diag.then(|| (0..n).map(|i| c_d[(i, i)].sqrt()).collect());
        Ok(Self {
            d,
            c_d,
            chol,
            diag_std,
        })
    }

    /// Independent errors with the given standard deviations.
    pub fn diagonal(d: DVector<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.len() != d.len() {
            return Err(Error::Dimension {
                context: "measurement sigma",
                expected: d.len(),
                found: sigma.len(),
            });
        }
        let c_d = DMatrix::from_diagonal(&DVector::from_iterator(
            sigma.len(),
            sigma.iter().map(|s| s * s),
        ));
        Self::new(d, c_d)
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn c_d(&self) -> &DMatrix<f64> {
        &self.c_d
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// The same data with the error covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.d.clone(), &self.c_d * factor)
    }

    /// One draw of `ε ~ N(0, C_D)`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        match &self.diag_std {
            Some(s) => DVector::from_fn(self.len(), |i, _| s[i] * z[i]),
            None => self.chol.l() * z,
        }
    }

    /// `(y − d)ᵀ C_D⁻¹ (y − d)`.
    pub fn misfit(&self, y: &[f64]) -> f64 {
        match &self.diag_std {
            Some(s) => y
                .iter()
                .zip(self.d.iter())
                .zip(s)
                .map(|((y, d), s)| ((y - d) / s).powi(2))
                .sum(),
            None => {
                let r = DVector::from_iterator(
                    self.len(),
                    y.iter().zip(self.d.iter()).map(|(y, d)| y - d),
                );
                let w = self
                    .chol
                    .l_dirty()
                    .solve_lower_triangular(&r)
                    .expect("cholesky factor has a nonzero diagonal");
                w.norm_squared()
            }
        }
    }
}

fn centered(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = a.column_mean();
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Sample cross-covariance of two column-paired sample matrices, normalized by
/// `1/(n − 1)`.
pub fn sample_cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension {
            context: "cross-covariance member count",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let n = a.ncols();
    if n < 2 {
        return Err(Error::TooFewMembers(n));
    }
    let ac = centered(a);
    let bc = centered(b);
    Ok(ac * bc.transpose() / (n as f64 - 1.0))
}

/// `C_MD`: covariance between parameters and predictions.
pub fn cross_covariance(m: &Ensemble, p: &PredictionSet) -> Result<DMatrix<f64>> {
    sample_cross_covariance(m.params(), p.outputs())
}

/// `C_DD`: covariance of the predictions.
pub fn auto_covariance(p: &PredictionSet) -> Result<DMatrix<f64>> {
    let n = p.n_members();
    if n < 2 {
        return Err(Error::TooFewMembers(n));
    }
    let c = centered(p.outputs());
    let mut cov = &c * c.transpose() / (n as f64 - 1.0);
    // Exact symmetry; the product above is symmetric only up to rounding.
    cov.fill_lower_triangle_with_upper_triangle();
    Ok(cov)
}

/// A Cholesky factorization of `a + jitter·mean(diag(a))·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Factors `a`, escalating through [`JITTER_LADDER`] when the plain
    /// factorization fails. `jitter` is the starting relative level.
    pub fn new(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension {
                context: "spd_solve matrix",
                expected: a.nrows(),
                found: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) || !jitter.is_finite() || jitter < 0.0 {
            return Err(Error::NonFinite("spd_solve input"));
        }
        let n = a.nrows();
        let mean_diag = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let levels =
            std::iter::once(jitter).chain(JITTER_LADDER.iter().copied().filter(|&l| l > jitter));
        let mut last = jitter;
        for level in levels {
            last = level;
            let mut shifted = a.clone();
            if level > 0.0 {
                for i in 0..n {
                    shifted[(i, i)] += level * mean_diag;
                }
            }
            if let Some(chol) = Cholesky::new(shifted) {
                if level > jitter {
                    log::debug!("spd factorization needed relative jitter {level:e}");
                }
                return Ok(Self { chol, jitter: level });
            }
        }
        Err(Error::SolveFailed { jitter: last })
    }

    /// Relative jitter level that was actually applied.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solves `L·x = rhs` with the lower factor.
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a nonzero diagonal")
    }
}

/// Solution of a jittered SPD system together with the jitter level used.
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: DMatrix<f64>,
    pub jitter: f64,
}

pub fn spd_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>, jitter: f64) -> Result<SpdSolution> {
    if rhs.nrows() != a.nrows() {
        return Err(Error::Dimension {
            context: "spd_solve right-hand side",
            expected: a.nrows(),
            found: rhs.nrows(),
        });
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spd_solve right-hand side"));
    }
    let factor = SpdFactor::new(a, jitter)?;
    Ok(SpdSolution {
        x: factor.solve(rhs),
        jitter: factor.jitter(),
    })
}

/// Per-member `log10(RMSE)` between predictions and the data vector.
pub fn log_rmse(p: &PredictionSet, d: &DVector<f64>) -> Result<Vec<f64>> {
    if p.n_outputs() != d.len() {
        return Err(Error::Dimension {
            context: "log_rmse data length",
            expected: p.n_outputs(),
            found: d.len(),
        });
    }
    let nd = d.len() as f64;
    Ok(p.outputs()
        .column_iter()
        .map(|col| {
            let mse = col
                .iter()
                .zip(d.iter())
                .map(|(y, d)| (y - d).powi(2))
                .sum::<f64>()
                / nd;
            if mse > 0.0 {
                (0.5 * mse.log10()).max(LOG_RMSE_FLOOR)
            } else {
                LOG_RMSE_FLOOR
            }
        })
        .collect())
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0))
    }

    /// Naive O(N_m·N_d·N_e) loop over centered products.
    fn loop_cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.ncols();
        let mut out = DMatrix::zeros(a.nrows(), b.nrows());
        for i in 0..a.nrows() {
            let ma: f64 = (0..n).map(|k| a[(i, k)]).sum::<f64>() / n as f64;
            for j in 0..b.nrows() {
                let mb: f64 = (0..n).map(|k| b[(j, k)]).sum::<f64>() / n as f64;
                let mut s = 0.0;
                for k in 0..n {
                    s += (a[(i, k)] - ma) * (b[(j, k)] - mb);
                }
                out[(i, j)] = s / (n as f64 - 1.0);
            }
        }
        out
    }

    fn ens(m: DMatrix<f64>) -> Ensemble {
        Ensemble::from_matrix(m).unwrap()
    }

    fn preds(m: DMatrix<f64>) -> PredictionSet {
        PredictionSet::new(m).unwrap()
    }

    #[test]
    fn cross_covariance_of_constant_ensemble_is_zero() {
        let m = ens(DMatrix::from_element(3, 5, 1.5));
        let p = preds(random_matrix(2, 5, &mut ChaCha8Rng::seed_from_u64(1)));
        let c = cross_covariance(&m, &p).unwrap();
        assert_eq!(c.shape(), (3, 2));
        assert!(c.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn two_sample_cross_covariance() {
        let c = cross_covariance(&ens(dmatrix![0.0, 2.0]), &preds(dmatrix![0.0, 4.0])).unwrap();
        assert_relative_eq!(c[(0, 0)], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_covariance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(3, 5, &mut rng);
        let b = random_matrix(2, 5, &mut rng);
        let fast = cross_covariance(&ens(a.clone()), &preds(b.clone())).unwrap();
        let slow = loop_cross_cov(&a, &b);
        assert_relative_eq!(fast, slow, epsilon = 1e-12, max_relative = 1e-10);
    }

    #[test]
    fn covariance_errors() {
        let a = DMatrix::<f64>::zeros(2, 3);
        let b = DMatrix::<f64>::zeros(2, 4);
        assert!(matches!(
            sample_cross_covariance(&a, &b),
            Err(Error::Dimension { .. })
        ));
        let one = DMatrix::<f64>::zeros(2, 1);
        assert!(matches!(
            sample_cross_covariance(&one, &one),
            Err(Error::TooFewMembers(1))
        ));
        assert!(matches!(
            auto_covariance(&PredictionSet::new(one).unwrap()),
            Err(Error::TooFewMembers(1))
        ));
    }

    #[test]
    fn auto_covariance_cases() {
        let c = auto_covariance(&preds(DMatrix::from_element(2, 4, 3.0))).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        let c = auto_covariance(&preds(dmatrix![1.0, 3.0])).unwrap();
        assert_relative_eq!(c[(0, 0)], 2.0);
    }

    #[test]
    fn auto_covariance_is_symmetric_psd() {
        let p = random_matrix(4, 20, &mut ChaCha8Rng::seed_from_u64(5));
        let c = auto_covariance(&preds(p)).unwrap();
        assert_relative_eq!(c.clone(), c.transpose(), epsilon = 1e-12);
        let eig = c.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-10 * c.trace()));
    }

    #[test]
    fn spd_solve_examples() {
        let rhs = dmatrix![1.0, -2.0; 3.0, 0.5; 7.0, 1.0];
        let sol = spd_solve(&DMatrix::identity(3, 3), &rhs, 0.0).unwrap();
        assert_eq!(sol.jitter, 0.0);
        assert_relative_eq!(sol.x, rhs, epsilon = 1e-15);

        let sol = spd_solve(&dmatrix![4.0], &dmatrix![2.0], 0.0).unwrap();
        assert_relative_eq!(sol.x[(0, 0)], 0.5);
    }

    #[test]
    fn spd_solve_escalates_jitter_on_singular_matrix() {
        // Rank one: plain Cholesky fails, the smallest jitter level suffices.
        let v = dvector![1.0, 2.0, 3.0];
        let a = &v * v.transpose();
        let sol = spd_solve(&a, &DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), 0.0).unwrap();
        assert!(sol.jitter > 0.0);
        assert!(JITTER_LADDER.contains(&sol.jitter));
    }

    #[test]
    fn spd_solve_rejects_bad_input() {
        let a = dmatrix![1.0, 0.0; 0.0, f64::NAN];
        assert!(matches!(
            spd_solve(&a, &DMatrix::zeros(2, 1), 0.0),
            Err(Error::NonFinite(_))
        ));
        let neg = dmatrix![-1.0, 0.0; 0.0, -1.0];
        assert!(matches!(
            spd_solve(&neg, &DMatrix::zeros(2, 1), 0.0),
            Err(Error::SolveFailed { .. })
        ));
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = random_matrix(n, n, rng);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn spd_solve_residual_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n = 1 + trial % 20;
            let a = random_spd(n, &mut rng);
            let rhs = random_matrix(n, 3, &mut rng);
            let sol = spd_solve(&a, &rhs, 0.0).unwrap();
            let resid = (&a * &sol.x - &rhs).norm();
            assert!(resid <= 1e-8 * rhs.norm().max(1.0), "n={n} resid={resid}");
        }
    }

    #[test]
    fn log_rmse_examples() {
        let d = dvector![1.0, 2.0, 3.0, 4.0];
        let p = preds(DMatrix::from_columns(&[d.clone(), d.add_scalar(1.0)]));
        let v = log_rmse(&p, &d).unwrap();
        assert_eq!(v[0], LOG_RMSE_FLOOR);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-15);

        let v = log_rmse(&preds(dmatrix![11.0]), &dvector![1.0]).unwrap();
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-15);

        assert!(log_rmse(&preds(dmatrix![1.0]), &dvector![1.0, 2.0]).is_err());
    }

    #[test]
    fn measurement_validation() {
        let asym = dmatrix![1.0, 0.5; 0.4, 1.0];
        assert!(Measurement::new(dvector![0.0, 0.0], asym).is_err());
        let indefinite = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(Measurement::new(dvector![0.0, 0.0], indefinite).is_err());
        let m = Measurement::diagonal(dvector![1.0, 2.0], &[0.5, 2.0]).unwrap();
        assert_relative_eq!(m.misfit(&[2.0, 0.0]), 4.0 + 1.0);
    }

    #[test]
    fn dense_and_diagonal_misfit_agree() {
        let d = dvector![1.0, -1.0, 0.5];
        let diag = Measurement::diagonal(d.clone(), &[0.3, 1.2, 2.0]).unwrap();
        // Same covariance but with a tiny off-diagonal so the dense path is used.
        let mut c = diag.c_d().clone();
        c[(0, 1)] = 1e-300;
        c[(1, 0)] = 1e-300;
        let dense = Measurement::new(d, c).unwrap();
        let y = [0.2, 0.4, -3.0];
        assert_relative_eq!(diag.misfit(&y), dense.misfit(&y), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn cross_covariance_transpose_symmetry(seed in 0u64..1000, nm in 1usize..5, nd in 1usize..5, ne in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(nm, ne, &mut rng);
            let b = random_matrix(nd, ne, &mut rng);
            let ab = sample_cross_covariance(&a, &b).unwrap();
            let ba = sample_cross_covariance(&b, &a).unwrap();
            prop_assert!((ab.transpose() - ba).amax() <= 1e-12);
            let slow = loop_cross_cov(&a, &b);
            prop_assert!((ab - &slow).amax() <= 1e-10 * slow.amax().max(1.0));
        }
    }
}
