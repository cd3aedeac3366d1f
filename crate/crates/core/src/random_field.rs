//! Karhunen–Loève parameterization of a stationary log-conductivity field
//! with separable exponential covariance
//! `C(p₁, p₂) = σ²·exp(−|x₁−x₂|/λ_x − |y₁−y₂|/λ_y)`.
//!
//! The covariance operator is discretized on cell centers with cell-area
//! weights (Nyström). Eigenfunctions are normalized so that
//! `Σ_cells s_i² · area = 1`, which makes `Σ τ_i s_i s_iᵀ` reconstruct the
//! covariance matrix.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const MEAN_LOG_K: f64 = 2.0;
pub const VARIANCE: f64 = 1.0;
pub const LAMBDA_X: f64 = 10.0;
pub const LAMBDA_Y: f64 = 5.0;

const CACHE_MAGIC: &[u8; 4] = b"ILKL";
const CACHE_VERSION: u32 = 1;

/// Cell-centered rectangular grid over `[0, lx] × [0, ly]`. Cell `(i, j)`
/// has flat index `i·ny + j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGrid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl FieldGrid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 || !(lx > 0.0 && ly > 0.0) {
            return Err(Error::Config(format!(
                "invalid field grid {nx}x{ny} over {lx}x{ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell / self.ny, cell % self.ny);
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceModel {
    pub variance: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
}

impl CovarianceModel {
    pub fn new(variance: f64, lambda_x: f64, lambda_y: f64) -> Result<Self> {
        if !(variance > 0.0 && lambda_x > 0.0 && lambda_y > 0.0) {
            return Err(Error::Config(format!(
                "invalid covariance: variance {variance}, lengths {lambda_x}, {lambda_y}"
            )));
        }
        Ok(Self {
            variance,
            lambda_x,
            lambda_y,
        })
    }

    pub fn standard() -> Self {
        Self {
            variance: VARIANCE,
            lambda_x: LAMBDA_X,
            lambda_y: LAMBDA_Y,
        }
    }
}

pub fn exp_covariance(p1: (f64, f64), p2: (f64, f64), variance: f64, lambda_x: f64, lambda_y: f64) -> f64 {
    variance * (-(p1.0 - p2.0).abs() / lambda_x - (p1.1 - p2.1).abs() / lambda_y).exp()
}

/// Covariance matrix between all pairs of cell centers.
pub fn covariance_matrix(grid: &FieldGrid, cov: &CovarianceModel) -> DMatrix<f64> {
    let n = grid.n_cells();
    let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.center(c)).collect();
    DMatrix::from_fn(n, n, |a, b| {
        exp_covariance(centers[a], centers[b], cov.variance, cov.lambda_x, cov.lambda_y)
    })
}

/// Truncated eigen-basis of the discretized covariance operator.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    grid: FieldGrid,
    cov: CovarianceModel,
    mean: f64,
    eigenvalues: Vec<f64>,
    /// `n_cells × n_kl`, column `i` is `s_i`.
    modes: DMatrix<f64>,
    total_variance: f64,
}

impl KlBasis {
    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn covariance(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn n_kl(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// `Σ_{retained} τ_i / Σ_all τ_i`.
    pub fn retained_fraction(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    /// Sum of all eigenvalues of the discretized operator, `σ²·lx·ly`.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }
}

fn fix_sign(v: &mut [f64]) {
    let (mut best, mut pos) = (0.0, 0);
    for (k, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            pos = k;
        }
    }
    if v[pos] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn sorted_eigen(a: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("covariance contains non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(a, 1e-14, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigen-solver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    Ok((values, vectors))
}

fn assemble(
    grid: FieldGrid,
    cov: CovarianceModel,
    eigenvalues: Vec<f64>,
    mut modes: DMatrix<f64>,
) -> KlBasis {
    for mut col in modes.column_iter_mut() {
        fix_sign(col.as_mut_slice());
    }
    KlBasis {
        grid,
        cov,
        mean: MEAN_LOG_K,
        eigenvalues,
        modes,
        total_variance: cov.variance * grid.lx * grid.ly,
    }
}

fn check_n_kl(grid: &FieldGrid, n_kl: usize) -> Result<()> {
    if n_kl == 0 || n_kl > grid.n_cells() {
        return Err(Error::Config(format!(
            "n_kl = {n_kl} must lie in [1, {}]",
            grid.n_cells()
        )));
    }
    Ok(())
}

/// Dense Nyström decomposition of the full `n_cells × n_cells` operator.
pub fn kl_decompose(grid: &FieldGrid, cov: &CovarianceModel, n_kl: usize) -> Result<KlBasis> {
    check_n_kl(grid, n_kl)?;
    let area = grid.cell_area();
    let (values, vectors) = sorted_eigen(covariance_matrix(grid, cov) * area)?;
    let modes = vectors.columns(0, n_kl) / area.sqrt();
    let eigenvalues = values[..n_kl].iter().map(|&t| t.max(0.0)).collect();
    Ok(assemble(*grid, *cov, eigenvalues, modes.into_owned()))
}

fn axis_eigen(n: usize, length: f64, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = length / n as f64;
    let a = DMatrix::from_fn(n, n, |p, q| (-((p as f64 - q as f64).abs() * d) / lambda).exp() * d);
    let (values, vectors) = sorted_eigen(a)?;
    Ok((values, vectors / d.sqrt()))
}

/// Same decomposition as [`kl_decompose`], computed from the two 1-D
/// operators: the separable kernel's eigenpairs are products of 1-D pairs.
pub fn kl_decompose_separable(
    grid: &FieldGrid,
    cov: &CovarianceModel,
    n_kl: usize,
) -> Result<KlBasis> {
    check_n_kl(grid, n_kl)?;
    let (tx, sx) = axis_eigen(grid.nx, grid.lx, cov.lambda_x)?;
    let (ty, sy) = axis_eigen(grid.ny, grid.ly, cov.lambda_y)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(grid.n_cells());
    for (a, &x) in tx.iter().enumerate() {
        for (b, &y) in ty.iter().enumerate() {
            pairs.push((cov.variance * x * y, a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    pairs.truncate(n_kl);
    let mut modes = DMatrix::zeros(grid.n_cells(), n_kl);
    for (k, &(_, a, b)) in pairs.iter().enumerate() {
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                modes[(i * grid.ny + j, k)] = sx[(i, a)] * sy[(j, b)];
            }
        }
    }
    let eigenvalues = pairs.iter().map(|p| p.0.max(0.0)).collect();
    Ok(assemble(*grid, *cov, eigenvalues, modes))
}

/// `Y = Ȳ + Σ √τ_i · s_i · ξ_i` on every cell.
pub fn synthesize_field(basis: &KlBasis, xi: &[f64]) -> Result<DVector<f64>> {
    if xi.len() != basis.n_kl() {
        return Err(Error::Dimension {
            context: "KL coefficients",
            expected: basis.n_kl(),
            found: xi.len(),
        });
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KL coefficients"));
    }
    let weights = DVector::from_iterator(
        xi.len(),
        xi.iter().zip(&basis.eigenvalues).map(|(x, t)| x * t.sqrt()),
    );
    Ok((&basis.modes * weights).add_scalar(basis.mean))
}

/// File name unique to the basis parameters, for use under a cache
/// directory.
pub fn cache_file_name(grid: &FieldGrid, cov: &CovarianceModel, n_kl: usize) -> String {
    format!(
        "kl_{}x{}_{:?}x{:?}_s{:?}_l{:?}x{:?}_n{}.bin",
        grid.nx, grid.ny, grid.lx, grid.ly, cov.variance, cov.lambda_x, cov.lambda_y, n_kl
    )
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_basis(basis: &KlBasis, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(basis.grid.nx as u64).to_le_bytes());
    out.extend_from_slice(&(basis.grid.ny as u64).to_le_bytes());
    out.extend_from_slice(&(basis.n_kl() as u64).to_le_bytes());
    for v in [
        basis.grid.lx,
        basis.grid.ly,
        basis.cov.variance,
        basis.cov.lambda_x,
        basis.cov.lambda_y,
        basis.mean,
        basis.total_variance,
    ] {
        put_f64(&mut out, v);
    }
    basis.eigenvalues.iter().for_each(|&v| put_f64(&mut out, v));
    basis.modes.iter().for_each(|&v| put_f64(&mut out, v));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_basis(path: &Path) -> Result<KlBasis> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut cursor = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(bad("truncated KL cache"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != CACHE_MAGIC {
        return Err(bad("not a KL cache file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(bad("unsupported KL cache version"));
    }
    let mut u64s = [0usize; 3];
    for v in u64s.iter_mut() {
        *v = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    }
    let [nx, ny, n_kl] = u64s;
    let mut f64s = [0.0; 7];
    for v in f64s.iter_mut() {
        *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    let [lx, ly, variance, lambda_x, lambda_y, mean, total_variance] = f64s;
    let grid = FieldGrid::new(nx, ny, lx, ly)?;
    check_n_kl(&grid, n_kl)?;
    let cov = CovarianceModel::new(variance, lambda_x, lambda_y)?;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))))
            .collect()
    };
    let eigenvalues = read_vec(n_kl)?;
    let modes = DMatrix::from_vec(grid.n_cells(), n_kl, read_vec(grid.n_cells() * n_kl)?);
    if !cursor.is_empty() {
        return Err(bad("trailing bytes in KL cache"));
    }
    Ok(KlBasis {
        grid,
        cov,
        mean,
        eigenvalues,
        modes,
        total_variance,
    })
}

/// Loads the basis from `cache_dir` if present, otherwise decomposes and
/// writes it there.
pub fn cached_basis(
    cache_dir: Option<&Path>,
    grid: &FieldGrid,
    cov: &CovarianceModel,
    n_kl: usize,
) -> Result<KlBasis> {
    let Some(dir) = cache_dir else {
        return kl_decompose_separable(grid, cov, n_kl);
    };
    let path: PathBuf = dir.join(cache_file_name(grid, cov, n_kl));
    if path.exists() {
        match load_basis(&path) {
            Ok(b) if b.grid == *grid && b.cov == *cov && b.n_kl() == n_kl => return Ok(b),
            Ok(_) => log::warn!("KL cache {} does not match its key; rebuilding", path.display()),
            Err(e) => log::warn!("unreadable KL cache {}: {e}; rebuilding", path.display()),
        }
    }
    let basis = kl_decompose_separable(grid, cov, n_kl)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_basis(&basis, &path)?;
    Ok(basis)
}
