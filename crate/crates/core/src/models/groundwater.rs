//! Steady 2-D saturated flow and transient advection–dispersion transport on
//! a cell-centered finite-volume grid.
//!
//! Flow: `∇·(K∇h) = 0` with fixed heads on the left and right edges and
//! no-flow top and bottom. Interface conductivities are harmonic means;
//! Dirichlet edges sit half a cell from the adjacent centers. The SPD system
//! is solved directly with a banded Cholesky factorization.
//!
//! Transport: `∂(θC)/∂t = −∇·(qC) + ∇·(θD∇C) + source`, explicit in time,
//! upwind advection, central dispersion with the full tensor. Clean water
//! enters on the left, the right edge is a zero-gradient outflow, the other
//! edges are closed. A point source adds its exact mass over each step to the
//! containing cell.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::ForwardModel;
use crate::random_field::{synthesize_field, FieldGrid, KlBasis};
use crate::rng::{substream, tag};

pub const LX: f64 = 20.0;
pub const LY: f64 = 10.0;
pub const H_LEFT: f64 = 12.0;
pub const H_RIGHT: f64 = 11.0;
pub const POROSITY: f64 = 0.25;
pub const K_HOMOGENEOUS: f64 = 8.0;
pub const ALPHA_L: f64 = 0.3;
pub const ALPHA_T: f64 = 0.03;
pub const V_FLOOR: f64 = 1e-9;

pub const SOURCE5_NAMES: [&str; 5] = ["x_s", "y_s", "s_s", "t_on", "t_off"];
pub const SOURCE5_RANGES: [(f64, f64); 5] =
    [(3.0, 5.0), (3.0, 7.0), (10.0, 13.0), (3.0, 5.0), (9.0, 11.0)];
pub const SOURCE5_TRUTH: [f64; 5] = [3.8537, 5.9994, 11.0442, 4.8966, 9.0745];
pub const SOURCE5_WELL: (f64, f64) = (10.0, 5.0);
pub const SOURCE5_TIMES: [f64; 5] = [6.0, 8.0, 10.0, 12.0, 14.0];
pub const SOURCE5_GRID: (usize, usize) = (80, 40);

pub const SOURCE108_RANGES: [(f64, f64); 8] = [
    (3.0, 5.0),
    (4.0, 6.0),
    (0.0, 8.0),
    (0.0, 8.0),
    (0.0, 8.0),
    (0.0, 8.0),
    (0.0, 8.0),
    (0.0, 8.0),
];
pub const SOURCE108_TRUTH: [f64; 8] = [
    3.5196, 4.4366, 5.6916, 7.8833, 6.3064, 1.4852, 6.8717, 5.5517,
];
pub const SOURCE108_WELL_X: [f64; 5] = [7.0, 9.5, 12.0, 14.5, 17.0];
pub const SOURCE108_WELL_Y: [f64; 3] = [2.5, 5.0, 7.5];
pub const SOURCE108_TIMES: [f64; 9] = [4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
pub const SOURCE108_GRID: (usize, usize) = (50, 25);
pub const SOURCE108_N_KL: usize = 100;
pub const SOURCE108_SEGMENTS: usize = 6;
/// Log-conductivity is clamped to `Ȳ ± 5σ` before the flow solve. Updated
/// members can overshoot far into the tails, where the stable time step
/// collapses; the prior mass outside the clamp is below 1e-6 per cell.
pub const LOGK_CLAMP_SIGMAS: f64 = 5.0;
/// Seed of the reference KL coefficients of the heterogeneous case.
pub const REFERENCE_FIELD_SEED: u64 = 3_000;

pub fn source108_names() -> Vec<String> {
    let mut names = vec!["x_s".to_string(), "y_s".to_string()];
    names.extend((1..=SOURCE108_SEGMENTS).map(|i| format!("s_s{i}")));
    names.extend((1..=SOURCE108_N_KL).map(|i| format!("xi{i}")));
    names
}

/// Reference KL coefficients `ξ*`, standard normal draws from a fixed seed.
pub fn reference_xi() -> Vec<f64> {
    let mut rng = substream(REFERENCE_FIELD_SEED, &[tag::TRUTH]);
    (0..SOURCE108_N_KL)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Full reference parameter vector of the heterogeneous case.
pub fn source108_truth() -> Vec<f64> {
    let mut m = SOURCE108_TRUTH.to_vec();
    m.extend(reference_xi());
    m
}

pub fn domain_grid(nx: usize, ny: usize) -> Result<FieldGrid> {
    if nx < 4 || ny < 4 {
        return Err(Error::Config(format!("grid {nx}x{ny} must be at least 4x4")));
    }
    FieldGrid::new(nx, ny, LX, LY)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDomain {
    pub grid: FieldGrid,
    pub h_left: f64,
    pub h_right: f64,
    pub porosity: f64,
    /// Per-cell conductivity, indexed `i·ny + j`.
    pub conductivity: Vec<f64>,
}

impl FlowDomain {
    pub fn new(grid: FieldGrid, conductivity: Vec<f64>) -> Result<Self> {
        if conductivity.len() != grid.n_cells() {
            return Err(Error::Dimension {
                context: "conductivity field",
                expected: grid.n_cells(),
                found: conductivity.len(),
            });
        }
        if conductivity.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Flow("conductivity must be positive and finite".into()));
        }
        Ok(Self {
            grid,
            h_left: H_LEFT,
            h_right: H_RIGHT,
            porosity: POROSITY,
            conductivity,
        })
    }

    pub fn homogeneous(grid: FieldGrid, k: f64) -> Result<Self> {
        Self::new(grid, vec![k; grid.n_cells()])
    }
}

/// Banded SPD matrix stored by rows of its lower band:
/// `band[r·(w+1) + d] = A[r][r−d]`.
struct BandedSpd {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, w: usize) -> Self {
        Self {
            n,
            w,
            band: vec![0.0; n * (w + 1)],
        }
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r >= c && r - c <= self.w);
        self.band[r * (self.w + 1) + (r - c)] += v;
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.w {
            0.0
        } else {
            self.band[r * (self.w + 1) + (r - c)]
        }
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.w);
                let hi = (r + self.w).min(self.n - 1);
                (lo..=hi).map(|c| self.get(r, c) * x[c]).sum()
            })
            .collect()
    }

    /// In-place Cholesky factor `L` in the same band layout.
    fn cholesky(&self) -> Result<Vec<f64>> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let mut l = self.band.clone();
        for r in 0..n {
            let lo = r.saturating_sub(w);
            for c in lo..=r {
                let mut s = l[r * stride + (r - c)];
                let k_lo = lo.max(c.saturating_sub(w));
                for k in k_lo..c {
                    s -= l[r * stride + (r - k)] * l[c * stride + (c - k)];
                }
                if c == r {
                    if !(s > 0.0) {
                        return Err(Error::Flow(format!(
                            "flow matrix not positive definite at row {r}"
                        )));
                    }
                    l[r * stride] = s.sqrt();
                } else {
                    l[r * stride + (r - c)] = s / l[c * stride];
                }
            }
        }
        Ok(l)
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let l = self.cholesky()?;
        let mut y = rhs.to_vec();
        for r in 0..n {
            let lo = r.saturating_sub(w);
            let mut s = y[r];
            for c in lo..r {
                s -= l[r * stride + (r - c)] * y[c];
            }
            y[r] = s / l[r * stride];
        }
        for r in (0..n).rev() {
            let hi = (r + w).min(n - 1);
            let mut s = y[r];
            for c in r + 1..=hi {
                s -= l[c * stride + (c - r)] * y[c];
            }
            y[r] = s / l[r * stride];
        }
        Ok(y)
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Heads and Darcy fluxes of a steady flow solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub grid: FieldGrid,
    pub porosity: f64,
    /// Cell heads, indexed `i·ny + j`.
    pub head: Vec<f64>,
    /// Darcy flux through x-faces, `(nx+1)·ny`, indexed `i·ny + j` where
    /// face `i` is the left edge of cell column `i`.
    pub qx: Vec<f64>,
    /// Darcy flux through y-faces, `nx·(ny+1)`, indexed `i·(ny+1) + j`.
    pub qy: Vec<f64>,
}

impl FlowSolution {
    /// Seepage velocity at an x-face.
    pub fn vx(&self, face: usize) -> f64 {
        self.qx[face] / self.porosity
    }

    pub fn vy(&self, face: usize) -> f64 {
        self.qy[face] / self.porosity
    }

    /// Net volumetric outflow of every cell.
    pub fn cell_imbalance(&self) -> Vec<f64> {
        let g = &self.grid;
        let (ny, dx, dy) = (g.ny, g.dx(), g.dy());
        (0..g.n_cells())
            .map(|cell| {
                let (i, j) = (cell / ny, cell % ny);
                (self.qx[(i + 1) * ny + j] - self.qx[i * ny + j]) * dy
                    + (self.qy[i * (ny + 1) + j + 1] - self.qy[i * (ny + 1) + j]) * dx
            })
            .collect()
    }

    pub fn max_face_flux(&self) -> f64 {
        let g = &self.grid;
        let fx = self.qx.iter().map(|q| q.abs() * g.dy()).fold(0.0, f64::max);
        let fy = self.qy.iter().map(|q| q.abs() * g.dx()).fold(0.0, f64::max);
        fx.max(fy)
    }

    pub fn head_at(&self, x: f64, y: f64) -> Result<f64> {
        bilinear(&self.grid, &self.head, x, y)
    }
}

pub fn solve_flow(domain: &FlowDomain) -> Result<FlowSolution> {
    let g = domain.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let k = &domain.conductivity;
    if k.len() != g.n_cells() {
        return Err(Error::Dimension {
            context: "conductivity field",
            expected: g.n_cells(),
            found: k.len(),
        });
    }
    let idx = |i: usize, j: usize| i * ny + j;
    let tx = dy / dx;
    let ty = dx / dy;

    let mut a = BandedSpd::zeros(g.n_cells(), ny);
    let mut b = vec![0.0; g.n_cells()];
    for i in 0..nx {
        for j in 0..ny {
            let c = idx(i, j);
            if i + 1 < nx {
                let t = harmonic(k[c], k[idx(i + 1, j)]) * tx;
                a.add(c, c, t);
                a.add(idx(i + 1, j), idx(i + 1, j), t);
                a.add(idx(i + 1, j), c, -t);
            }
            if j + 1 < ny {
                let t = harmonic(k[c], k[idx(i, j + 1)]) * ty;
                a.add(c, c, t);
                a.add(idx(i, j + 1), idx(i, j + 1), t);
                a.add(idx(i, j + 1), c, -t);
            }
        }
    }
    for j in 0..ny {
        let left = 2.0 * k[idx(0, j)] * tx;
        a.add(idx(0, j), idx(0, j), left);
        b[idx(0, j)] += left * domain.h_left;
        let right = 2.0 * k[idx(nx - 1, j)] * tx;
        a.add(idx(nx - 1, j), idx(nx - 1, j), right);
        b[idx(nx - 1, j)] += right * domain.h_right;
    }

    let head = a.solve(&b)?;
    let residual: f64 = a
        .mul(&head)
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(residual <= 1e-10 * scale) || head.iter().any(|h| !h.is_finite()) {
        return Err(Error::Flow(format!(
            "flow solve residual {residual:.3e} exceeds tolerance"
        )));
    }

    let mut qx = vec![0.0; (nx + 1) * ny];
    for j in 0..ny {
        qx[j] = 2.0 * k[idx(0, j)] * (domain.h_left - head[idx(0, j)]) / dx;
        qx[nx * ny + j] = 2.0 * k[idx(nx - 1, j)] * (head[idx(nx - 1, j)] - domain.h_right) / dx;
        for i in 1..nx {
            let kf = harmonic(k[idx(i - 1, j)], k[idx(i, j)]);
            qx[i * ny + j] = kf * (head[idx(i - 1, j)] - head[idx(i, j)]) / dx;
        }
    }
    let mut qy = vec![0.0; nx * (ny + 1)];
    for i in 0..nx {
        for j in 1..ny {
            let kf = harmonic(k[idx(i, j - 1)], k[idx(i, j)]);
            qy[i * (ny + 1) + j] = kf * (head[idx(i, j - 1)] - head[idx(i, j)]) / dy;
        }
    }
    Ok(FlowSolution {
        grid: g,
        porosity: domain.porosity,
        head,
        qx,
        qy,
    })
}

/// `(D_xx, D_yy, D_xy)` for seepage velocity `v`. Below `V_FLOOR` the
/// tensor is isotropic, `α_T·V_FLOOR`.
pub fn dispersion_tensor(v: (f64, f64), alpha_l: f64, alpha_t: f64) -> (f64, f64, f64) {
    let speed = v.0.hypot(v.1);
    if speed < V_FLOOR {
        let d = alpha_t * V_FLOOR;
        return (d, d, 0.0);
    }
    (
        (alpha_l * v.0 * v.0 + alpha_t * v.1 * v.1) / speed,
        (alpha_l * v.1 * v.1 + alpha_t * v.0 * v.0) / speed,
        (alpha_l - alpha_t) * v.0 * v.1 / speed,
    )
}

/// Bilinear interpolation of a cell-centered field. Points within half a
/// cell of an edge take the edge-adjacent values.
pub fn bilinear(grid: &FieldGrid, field: &[f64], x: f64, y: f64) -> Result<f64> {
    if !(x >= 0.0 && x <= grid.lx && y >= 0.0 && y <= grid.ly) {
        return Err(Error::Transport(format!(
            "observation point ({x}, {y}) outside the domain"
        )));
    }
    let axis = |p: f64, d: f64, n: usize| {
        let f = (p / d - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (f.floor() as usize).min(n.saturating_sub(2));
        (i0, f - i0 as f64)
    };
    let (i0, wx) = axis(x, grid.dx(), grid.nx);
    let (j0, wy) = axis(y, grid.dy(), grid.ny);
    let at = |i: usize, j: usize| field[i * grid.ny + j];
    Ok((1.0 - wx) * (1.0 - wy) * at(i0, j0)
        + wx * (1.0 - wy) * at(i0 + 1, j0)
        + (1.0 - wx) * wy * at(i0, j0 + 1)
        + wx * wy * at(i0 + 1, j0 + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Rate `rate` on `[t_on, t_off]`; empty when `t_off ≤ t_on`.
    Constant { rate: f64, t_on: f64, t_off: f64 },
    /// Rate `rates[i]` on `[start + i·width, start + (i+1)·width]`.
    Stepwise { rates: Vec<f64>, start: f64, width: f64 },
}

impl Schedule {
    /// Mass released over `[t0, t1]`.
    pub fn mass_between(&self, t0: f64, t1: f64) -> f64 {
        let overlap = |a: f64, b: f64| (t1.min(b) - t0.max(a)).max(0.0);
        match self {
            Self::Constant { rate, t_on, t_off } => rate * overlap(*t_on, *t_off),
            Self::Stepwise {
                rates,
                start,
                width,
            } => rates
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let a = start + i as f64 * width;
                    r * overlap(a, a + width)
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub x: f64,
    pub y: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportParams {
    pub alpha_l: f64,
    pub alpha_t: f64,
    /// Requested step; `None` uses the stability bound.
    pub dt: Option<f64>,
    /// Fraction of the stability bound used for automatic steps.
    pub safety: f64,
    pub max_halvings: u32,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            alpha_l: ALPHA_L,
            alpha_t: ALPHA_T,
            dt: None,
            safety: 0.9,
            max_halvings: 30,
        }
    }
}

/// Face coefficients of the transport operator, fixed for a flow field.
#[derive(Debug, Clone)]
struct TransportOperator {
    grid: FieldGrid,
    porosity: f64,
    qx: Vec<f64>,
    qy: Vec<f64>,
    /// Per x-face `θ·D_xx/dx` and `θ·D_xy/(4·dy)`.
    dxx: Vec<f64>,
    dxy_x: Vec<f64>,
    /// Per y-face `θ·D_yy/dy` and `θ·D_yx/(4·dx)`.
    dyy: Vec<f64>,
    dxy_y: Vec<f64>,
    dt_max: f64,
}

impl TransportOperator {
    fn new(flow: &FlowSolution, params: &TransportParams) -> Result<Self> {
        if !(params.alpha_l >= params.alpha_t && params.alpha_t > 0.0) {
            return Err(Error::Transport(format!(
                "dispersivities must satisfy alpha_l >= alpha_t > 0, got {} and {}",
                params.alpha_l, params.alpha_t
            )));
        }
        let g = flow.grid;
        let (nx, ny, dx, dy) = (g.nx, g.ny, g.dx(), g.dy());
        let theta = flow.porosity;
        let qy_at = |i: usize, j: usize| flow.qy[i * (ny + 1) + j];
        let qx_at = |i: usize, j: usize| flow.qx[i * ny + j];

        let mut dxx = vec![0.0; (nx + 1) * ny];
        let mut dxy_x = vec![0.0; (nx + 1) * ny];
        let mut rate: f64 = 0.0;
        for i in 0..=nx {
            for j in 0..ny {
                let sides: Vec<usize> = [i.checked_sub(1), (i < nx).then_some(i)]
                    .into_iter()
                    .flatten()
                    .collect();
                let vy = sides
                    .iter()
                    .map(|&c| 0.5 * (qy_at(c, j) + qy_at(c, j + 1)))
                    .sum::<f64>()
                    / sides.len() as f64
                    / theta;
                let vx = qx_at(i, j) / theta;
                let (d_xx, d_yy, d_xy) = dispersion_tensor((vx, vy), params.alpha_l, params.alpha_t);
                dxx[i * ny + j] = theta * d_xx / dx;
                dxy_x[i * ny + j] = theta * d_xy / (4.0 * dy);
                rate = rate.max(vx.abs() / dx + vy.abs() / dy + 2.0 * d_xx / (dx * dx) + 2.0 * d_yy / (dy * dy));
            }
        }
        let mut dyy = vec![0.0; nx * (ny + 1)];
        let mut dxy_y = vec![0.0; nx * (ny + 1)];
        for i in 0..nx {
            for j in 0..=ny {
                let sides: Vec<usize> = [j.checked_sub(1), (j < ny).then_some(j)]
                    .into_iter()
                    .flatten()
                    .collect();
                let vx = sides
                    .iter()
                    .map(|&c| 0.5 * (qx_at(i, c) + qx_at(i + 1, c)))
                    .sum::<f64>()
                    / sides.len() as f64
                    / theta;
                let vy = qy_at(i, j) / theta;
                let (d_xx, d_yy, d_xy) = dispersion_tensor((vx, vy), params.alpha_l, params.alpha_t);
                dyy[i * (ny + 1) + j] = theta * d_yy / dy;
                dxy_y[i * (ny + 1) + j] = theta * d_xy / (4.0 * dx);
                rate = rate.max(vx.abs() / dx + vy.abs() / dy + 2.0 * d_xx / (dx * dx) + 2.0 * d_yy / (dy * dy));
            }
        }
        Ok(Self {
            grid: g,
            porosity: theta,
            qx: flow.qx.clone(),
            qy: flow.qy.clone(),
            dxx,
            dxy_x,
            dyy,
            dxy_y,
            dt_max: 1.0 / rate,
        })
    }

    /// One explicit step without sources; `next` is scratch space. Returns
    /// the mass advected out through the left and right edges.
    fn step(&self, c: &mut [f64], next: &mut [f64], dt: f64) -> f64 {
        let g = &self.grid;
        let (nx, ny, dx, dy) = (g.nx, g.ny, g.dx(), g.dy());
        let at = |i: usize, j: usize| c[i * ny + j];
        let jm = |j: usize| j.saturating_sub(1);
        let jp = |j: usize| (j + 1).min(ny - 1);
        let im = |i: usize| i.saturating_sub(1);
        let ip = |i: usize| (i + 1).min(nx - 1);
        let scale = dt / (self.porosity * dx * dy);
        next.copy_from_slice(c);
        let mut exported = 0.0;

        for j in 0..ny {
            // Left edge: clean inflow, no dispersive flux.
            let q = self.qx[j];
            if q < 0.0 {
                next[j] += scale * q * at(0, j) * dy;
                exported -= dt * q * at(0, j) * dy;
            }
            let q = self.qx[nx * ny + j];
            if q > 0.0 {
                next[(nx - 1) * ny + j] -= scale * q * at(nx - 1, j) * dy;
                exported += dt * q * at(nx - 1, j) * dy;
            }
            for i in 1..nx {
                let f = i * ny + j;
                let q = self.qx[f];
                let adv = if q > 0.0 { q * at(i - 1, j) } else { q * at(i, j) };
                let grad_y = at(i - 1, jp(j)) + at(i, jp(j)) - at(i - 1, jm(j)) - at(i, jm(j));
                let disp = self.dxx[f] * (at(i, j) - at(i - 1, j)) + self.dxy_x[f] * grad_y;
                let flux = (adv - disp) * dy * scale;
                next[(i - 1) * ny + j] -= flux;
                next[i * ny + j] += flux;
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                let f = i * (ny + 1) + j;
                let q = self.qy[f];
                let adv = if q > 0.0 { q * at(i, j - 1) } else { q * at(i, j) };
                let grad_x = at(ip(i), j - 1) + at(ip(i), j) - at(im(i), j - 1) - at(im(i), j);
                let disp = self.dyy[f] * (at(i, j) - at(i, j - 1)) + self.dxy_y[f] * grad_x;
                let flux = (adv - disp) * dx * scale;
                next[i * ny + j - 1] -= flux;
                next[i * ny + j] += flux;
            }
        }
        c.copy_from_slice(next);
        exported
    }
}

/// Concentration state after transport, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportOutput {
    /// Readings indexed `time · n_points + point`.
    pub readings: Vec<f64>,
    /// Concentration field at the last observation time.
    pub final_field: Vec<f64>,
    /// Mass carried out through the domain edges up to the last time.
    pub exported_mass: f64,
    pub dt: f64,
}

impl TransportOutput {
    /// Dissolved mass `θ·Σ C·area` of the final field.
    pub fn final_mass(&self, grid: &FieldGrid, porosity: f64) -> f64 {
        porosity * grid.cell_area() * self.final_field.iter().sum::<f64>()
    }
}

fn locate(grid: &FieldGrid, x: f64, y: f64) -> Result<usize> {
    if !(x >= 0.0 && x <= grid.lx && y >= 0.0 && y <= grid.ly) {
        return Err(Error::Transport(format!("source ({x}, {y}) outside the domain")));
    }
    let i = ((x / grid.dx()) as usize).min(grid.nx - 1);
    let j = ((y / grid.dy()) as usize).min(grid.ny - 1);
    Ok(i * grid.ny + j)
}

fn check_times(obs_times: &[f64]) -> Result<()> {
    if obs_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || obs_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Transport(
            "observation times must be nonnegative and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn choose_dt(op: &TransportOperator, params: &TransportParams) -> Result<f64> {
    let bound = op.dt_max;
    match params.dt {
        None => Ok(params.safety * bound),
        Some(mut dt) => {
            if !(dt > 0.0) {
                return Err(Error::Transport(format!("time step {dt} must be positive")));
            }
            let mut halvings = 0;
            while dt > bound {
                if halvings == params.max_halvings {
                    return Err(Error::Transport(format!(
                        "time step still above stability bound {bound:.3e} after {halvings} halvings"
                    )));
                }
                dt *= 0.5;
                halvings += 1;
            }
            if halvings > 0 {
                log::debug!("time step halved {halvings} times to {dt:.3e}");
            }
            Ok(dt)
        }
    }
}

pub fn simulate_transport(
    flow: &FlowSolution,
    source: &SourceSpec,
    params: &TransportParams,
    obs_points: &[(f64, f64)],
    obs_times: &[f64],
) -> Result<TransportOutput> {
    let op = TransportOperator::new(flow, params)?;
    simulate_with(&op, source, params, obs_points, obs_times)
}

fn simulate_with(
    op: &TransportOperator,
    source: &SourceSpec,
    params: &TransportParams,
    obs_points: &[(f64, f64)],
    obs_times: &[f64],
) -> Result<TransportOutput> {
    check_times(obs_times)?;
    let g = op.grid;
    for &(x, y) in obs_points {
        bilinear(&g, &vec![0.0; g.n_cells()], x, y)?;
    }
    let src = locate(&g, source.x, source.y)?;
    let dt_max = choose_dt(op, params)?;
    let inject = 1.0 / (op.porosity * g.cell_area());

    let mut c = vec![0.0; g.n_cells()];
    let mut scratch = vec![0.0; g.n_cells()];
    let mut readings = Vec::with_capacity(obs_times.len() * obs_points.len());
    let mut t = 0.0;
    let mut exported = 0.0;
    for &t_obs in obs_times {
        let span = t_obs - t;
        let n = (span / dt_max).ceil().max(if span > 0.0 { 1.0 } else { 0.0 }) as usize;
        let dt = if n > 0 { span / n as f64 } else { 0.0 };
        for k in 0..n {
            let t0 = t + k as f64 * dt;
            let t1 = if k + 1 == n { t_obs } else { t0 + dt };
            exported += op.step(&mut c, &mut scratch, t1 - t0);
            c[src] += source.schedule.mass_between(t0, t1) * inject;
        }
        t = t_obs;
        for &(x, y) in obs_points {
            readings.push(bilinear(&g, &c, x, y)?);
        }
    }
    if readings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Transport("non-finite concentration".into()));
    }
    Ok(TransportOutput {
        readings,
        final_field: c,
        exported_mass: exported,
        dt: dt_max,
    })
}

fn clamp_to(m: &[f64], ranges: &[(f64, f64)]) -> Result<Vec<f64>> {
    if m.len() < ranges.len() {
        return Err(Error::Dimension {
            context: "source parameters",
            expected: ranges.len(),
            found: m.len(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("source parameters"));
    }
    Ok(m.iter()
        .enumerate()
        .map(|(k, &v)| match ranges.get(k) {
            Some(&(lo, hi)) => v.clamp(lo, hi),
            None => v,
        })
        .collect())
}

/// Constant-rate point source in homogeneous flow, observed at one well.
/// Parameters `[x_s, y_s, S_s, t_on, t_off]` are projected onto their prior
/// box before simulation.
#[derive(Debug, Clone)]
pub struct Source5Model {
    operator: Arc<TransportOperator>,
    params: TransportParams,
    wells: Vec<(f64, f64)>,
    times: Vec<f64>,
}

impl Source5Model {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        Self::with_observations(nx, ny, vec![SOURCE5_WELL], SOURCE5_TIMES.to_vec())
    }

    pub fn with_observations(
        nx: usize,
        ny: usize,
        wells: Vec<(f64, f64)>,
        times: Vec<f64>,
    ) -> Result<Self> {
        let grid = domain_grid(nx, ny)?;
        let flow = solve_flow(&FlowDomain::homogeneous(grid, K_HOMOGENEOUS)?)?;
        let params = TransportParams::default();
        check_times(&times)?;
        Ok(Self {
            operator: Arc::new(TransportOperator::new(&flow, &params)?),
            params,
            wells,
            times,
        })
    }

    pub fn shipped() -> Result<Self> {
        Self::new(SOURCE5_GRID.0, SOURCE5_GRID.1)
    }

    pub fn grid(&self) -> FieldGrid {
        self.operator.grid
    }
}

impl ForwardModel for Source5Model {
    fn n_params(&self) -> usize {
        5
    }

    fn n_outputs(&self) -> usize {
        self.wells.len() * self.times.len()
    }

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != 5 {
            return Err(Error::Dimension {
                context: "source5 parameters",
                expected: 5,
                found: params.len(),
            });
        }
        let m = clamp_to(params, &SOURCE5_RANGES)?;
        let source = SourceSpec {
            x: m[0],
            y: m[1],
            schedule: Schedule::Constant {
                rate: m[2],
                t_on: m[3],
                t_off: m[4],
            },
        };
        Ok(simulate_with(&self.operator, &source, &self.params, &self.wells, &self.times)?.readings)
    }
}

/// Stepwise source in a heterogeneous field `K = exp(Y(ξ))`. Parameters are
/// `[x_s, y_s, S_s1..S_s6, ξ_1..ξ_100]`; the source block is projected onto
/// its prior box. Outputs are concentrations (time-major over the wells)
/// followed by the steady heads at the wells.
#[derive(Debug, Clone)]
pub struct Source108Model {
    basis: Arc<KlBasis>,
    params: TransportParams,
    wells: Vec<(f64, f64)>,
    times: Vec<f64>,
}

impl Source108Model {
    pub fn new(basis: Arc<KlBasis>) -> Result<Self> {
        let g = basis.grid();
        domain_grid(g.nx, g.ny)?;
        if (g.lx, g.ly) != (LX, LY) {
            return Err(Error::Config("KL basis must cover the flow domain".into()));
        }
        let wells = SOURCE108_WELL_X
            .iter()
            .flat_map(|&x| SOURCE108_WELL_Y.iter().map(move |&y| (x, y)))
            .collect();
        Ok(Self {
            basis,
            params: TransportParams::default(),
            wells,
            times: SOURCE108_TIMES.to_vec(),
        })
    }

    pub fn basis(&self) -> &KlBasis {
        &self.basis
    }

    pub fn wells(&self) -> &[(f64, f64)] {
        &self.wells
    }

    pub fn n_concentrations(&self) -> usize {
        self.wells.len() * self.times.len()
    }

    /// Log-conductivity field of a parameter vector.
    pub fn log_conductivity(&self, params: &[f64]) -> Result<Vec<f64>> {
        let n_src = SOURCE108_RANGES.len();
        if params.len() != n_src + self.basis.n_kl() {
            return Err(Error::Dimension {
                context: "source108 parameters",
                expected: n_src + self.basis.n_kl(),
                found: params.len(),
            });
        }
        Ok(synthesize_field(&self.basis, &params[n_src..])?.as_slice().to_vec())
    }
}

impl ForwardModel for Source108Model {
    fn n_params(&self) -> usize {
        SOURCE108_RANGES.len() + self.basis.n_kl()
    }

    fn n_outputs(&self) -> usize {
        self.n_concentrations() + self.wells.len()
    }

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>> {
        let y = self.log_conductivity(params)?;
        let m = clamp_to(&params[..SOURCE108_RANGES.len()], &SOURCE108_RANGES)?;
        let half_width = LOGK_CLAMP_SIGMAS * self.basis.covariance().variance.sqrt();
        let (lo, hi) = (self.basis.mean() - half_width, self.basis.mean() + half_width);
        let k = y.iter().map(|v| v.clamp(lo, hi).exp()).collect();
        let domain = FlowDomain::new(*self.basis.grid(), k)?;
        let flow = solve_flow(&domain)?;
        let source = SourceSpec {
            x: m[0],
            y: m[1],
            schedule: Schedule::Stepwise {
                rates: m[2..].to_vec(),
                start: 1.0,
                width: 1.0,
            },
        };
        let mut out = simulate_transport(&flow, &source, &self.params, &self.wells, &self.times)?.readings;
        for &(x, y) in &self.wells {
            out.push(flow.head_at(x, y)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_field::{kl_decompose_separable, CovarianceModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn homogeneous(nx: usize, ny: usize) -> FlowSolution {
        solve_flow(&FlowDomain::homogeneous(domain_grid(nx, ny).unwrap(), K_HOMOGENEOUS).unwrap()).unwrap()
    }

    #[test]
    fn banded_solver_matches_dense() {
        let mut a = BandedSpd::zeros(6, 2);
        let mut rng = substream(1, &[]);
        for r in 0..6 {
            a.add(r, r, 10.0);
            for c in r.saturating_sub(2)..r {
                a.add(r, c, rng.random_range(-1.0..1.0));
            }
        }
        let dense = nalgebra::DMatrix::from_fn(6, 6, |r, c| a.get(r, c));
        let rhs: Vec<f64> = (0..6).map(|k| k as f64 - 2.0).collect();
        let x = a.solve(&rhs).unwrap();
        let expect = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(rhs));
        for (p, q) in x.iter().zip(expect.iter()) {
            assert_relative_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn homogeneous_flow_is_linear() {
        let f = homogeneous(20, 10);
        for cell in 0..f.grid.n_cells() {
            let (x, _) = f.grid.center(cell);
            assert_relative_eq!(f.head[cell], 12.0 - x / 20.0, epsilon = 1e-10);
        }
        for face in 0..f.qx.len() {
            assert_relative_eq!(f.vx(face), 1.6, epsilon = 1e-9);
        }
        assert!(f.qy.iter().all(|q| q.abs() < 1e-10));
    }

    #[test]
    fn doubling_conductivity_doubles_velocity() {
        let g = domain_grid(12, 6).unwrap();
        let mut rng = substream(5, &[]);
        let k: Vec<f64> = (0..g.n_cells()).map(|_| rng.random_range(1.0..20.0)).collect();
        let a = solve_flow(&FlowDomain::new(g, k.clone()).unwrap()).unwrap();
        let b = solve_flow(&FlowDomain::new(g, k.iter().map(|v| 2.0 * v).collect()).unwrap()).unwrap();
        for (x, y) in a.head.iter().zip(&b.head) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
        for (x, y) in a.qx.iter().zip(&b.qx) {
            assert_relative_eq!(2.0 * x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn checkerboard_flux_balance() {
        let g = domain_grid(16, 8).unwrap();
        let k = (0..g.n_cells())
            .map(|c| if (c / 8 + c % 8) % 2 == 0 { 1.0 } else { 50.0 })
            .collect();
        let f = solve_flow(&FlowDomain::new(g, k).unwrap()).unwrap();
        let max = f.max_face_flux();
        assert!(f.cell_imbalance().iter().all(|r| r.abs() < 1e-10 * max));
    }

    #[test]
    fn head_error_shrinks_with_refinement() {
        // K(x) = exp(x/8): constant flux q, h(x) = h_L − q·8·(1 − e^{−x/8}).
        let analytic = |x: f64| {
            let total = 8.0 * (1.0 - (-20.0f64 / 8.0).exp());
            12.0 - (12.0 - 11.0) * 8.0 * (1.0 - (-x / 8.0).exp()) / total
        };
        let error = |nx: usize| {
            let g = domain_grid(nx, 4).unwrap();
            let k = (0..g.n_cells()).map(|c| (g.center(c).0 / 8.0).exp()).collect();
            let f = solve_flow(&FlowDomain::new(g, k).unwrap()).unwrap();
            (0..g.n_cells())
                .map(|c| (f.head[c] - analytic(g.center(c).0)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (error(10), error(20), error(40));
        assert!(e1 / e2 > 2.0 && e2 / e3 > 2.0, "{e1} {e2} {e3}");
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_tensor((1.0, 0.0), 0.3, 0.03), (0.3, 0.03, 0.0));
        assert_eq!(dispersion_tensor((0.0, 1.0), 0.3, 0.03), (0.03, 0.3, 0.0));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (xx, yy, xy) = dispersion_tensor((s, s), 0.3, 0.03);
        assert_relative_eq!(xx, 0.165, epsilon = 1e-12);
        assert_relative_eq!(yy, 0.165, epsilon = 1e-12);
        assert_relative_eq!(xy, 0.135, epsilon = 1e-12);
        let (xx, yy, xy) = dispersion_tensor((0.0, 0.0), 0.3, 0.03);
        assert_eq!((xx, yy, xy), (0.03 * V_FLOOR, 0.03 * V_FLOOR, 0.0));
    }

    #[test]
    fn zero_source_reads_zero() {
        let f = homogeneous(20, 10);
        let src = SourceSpec {
            x: 4.0,
            y: 5.0,
            schedule: Schedule::Constant {
                rate: 0.0,
                t_on: 1.0,
                t_off: 5.0,
            },
        };
        let out = simulate_transport(&f, &src, &TransportParams::default(), &[(10.0, 5.0)], &[2.0, 6.0]).unwrap();
        assert!(out.readings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centerline_source_is_symmetric() {
        let f = homogeneous(40, 21);
        let src = SourceSpec {
            x: 4.2,
            y: 5.0,
            schedule: Schedule::Constant {
                rate: 11.0,
                t_on: 0.5,
                t_off: 6.0,
            },
        };
        let pts = [(9.0, 6.3), (9.0, 3.7), (12.0, 5.9), (12.0, 4.1)];
        let out = simulate_transport(&f, &src, &TransportParams::default(), &pts, &[5.0, 8.0]).unwrap();
        for pair in out.readings.chunks(2) {
            assert!((pair[0] - pair[1]).abs() < 1e-8, "{pair:?}");
        }
        assert!(out.readings.iter().any(|&v| v > 1e-3));
    }

    #[test]
    fn mass_is_conserved_before_breakthrough() {
        let f = homogeneous(40, 20);
        let sched = Schedule::Constant {
            rate: 10.0,
            t_on: 0.2,
            t_off: 2.5,
        };
        let src = SourceSpec {
            x: 3.1,
            y: 4.4,
            schedule: sched.clone(),
        };
        let out = simulate_transport(&f, &src, &TransportParams::default(), &[(10.0, 5.0)], &[1.0, 4.0]).unwrap();
        let injected = sched.mass_between(0.0, 4.0);
        assert_relative_eq!(injected, 23.0, epsilon = 1e-12);
        let mass = out.final_mass(&f.grid, f.porosity);
        assert!((mass - injected).abs() < 0.005 * injected, "{mass} vs {injected}");
    }

    #[test]
    fn exported_mass_closes_the_budget() {
        let f = homogeneous(40, 20);
        let sched = Schedule::Constant {
            rate: 5.0,
            t_on: 0.0,
            t_off: 3.0,
        };
        let src = SourceSpec {
            x: 12.0,
            y: 5.0,
            schedule: sched.clone(),
        };
        let out = simulate_transport(&f, &src, &TransportParams::default(), &[(10.0, 5.0)], &[20.0]).unwrap();
        assert!(out.exported_mass > 0.5 * 15.0, "plume should have left: {}", out.exported_mass);
        let total = out.final_mass(&f.grid, f.porosity) + out.exported_mass;
        assert_relative_eq!(total, sched.mass_between(0.0, 20.0), max_relative = 1e-10);
    }

    #[test]
    fn user_time_step_is_halved_to_stability() {
        let f = homogeneous(20, 10);
        let src = SourceSpec {
            x: 4.0,
            y: 5.0,
            schedule: Schedule::Constant {
                rate: 10.0,
                t_on: 0.0,
                t_off: 3.0,
            },
        };
        let params = TransportParams {
            dt: Some(10.0),
            ..Default::default()
        };
        let out = simulate_transport(&f, &src, &params, &[(8.0, 5.0)], &[4.0]).unwrap();
        let op = TransportOperator::new(&f, &params).unwrap();
        assert!(out.dt <= op.dt_max);
        let strict = TransportParams {
            dt: Some(10.0),
            max_halvings: 2,
            ..Default::default()
        };
        assert!(simulate_transport(&f, &src, &strict, &[(8.0, 5.0)], &[4.0]).is_err());
    }

    #[test]
    fn rejects_outside_points() {
        let f = homogeneous(20, 10);
        let src = SourceSpec {
            x: 4.0,
            y: 5.0,
            schedule: Schedule::Constant {
                rate: 1.0,
                t_on: 0.0,
                t_off: 1.0,
            },
        };
        let p = TransportParams::default();
        assert!(simulate_transport(&f, &src, &p, &[(21.0, 5.0)], &[1.0]).is_err());
        let outside = SourceSpec { x: -1.0, ..src.clone() };
        assert!(simulate_transport(&f, &outside, &p, &[(8.0, 5.0)], &[1.0]).is_err());
        assert!(simulate_transport(&f, &src, &p, &[(8.0, 5.0)], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn source5_mirror_and_empty_release() {
        let m = Source5Model::new(40, 20).unwrap();
        let truth = m.evaluate(&SOURCE5_TRUTH).unwrap();
        assert_eq!(truth.len(), 5);
        assert!(truth.iter().any(|&v| v > 0.01), "{truth:?}");
        let mut mirrored = SOURCE5_TRUTH;
        mirrored[1] = 10.0 - mirrored[1];
        let other = m.evaluate(&mirrored).unwrap();
        for (a, b) in truth.iter().zip(&other) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let schedule = Schedule::Constant {
            rate: 11.0,
            t_on: 4.0,
            t_off: 4.0,
        };
        assert_eq!(schedule.mass_between(0.0, 20.0), 0.0);
        // The model clamps t_off to [9, 11], so check the release directly.
        let f = homogeneous(40, 20);
        let src = SourceSpec {
            x: 4.0,
            y: 5.0,
            schedule,
        };
        let out = simulate_transport(&f, &src, &TransportParams::default(), &[SOURCE5_WELL], &SOURCE5_TIMES).unwrap();
        assert!(out.readings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stepwise_schedule_mass() {
        let s = Schedule::Stepwise {
            rates: vec![1.0, 2.0, 3.0],
            start: 1.0,
            width: 1.0,
        };
        assert_eq!(s.mass_between(0.0, 10.0), 6.0);
        assert_eq!(s.mass_between(1.5, 2.5), 0.5 + 1.0);
        assert_eq!(s.mass_between(0.0, 1.0), 0.0);
    }

    fn small108() -> Source108Model {
        let grid = domain_grid(20, 10).unwrap();
        let basis = kl_decompose_separable(&grid, &CovarianceModel::standard(), 100).unwrap();
        Source108Model::new(Arc::new(basis)).unwrap()
    }

    #[test]
    fn source108_mean_field() {
        let m = small108();
        assert_eq!(m.n_outputs(), 150);
        let mut p = SOURCE108_TRUTH.to_vec();
        p.extend(vec![0.0; 100]);
        let out = m.evaluate(&p).unwrap();
        for (k, &(x, _)) in m.wells().iter().enumerate() {
            assert_relative_eq!(out[135 + k], 12.0 - x / 20.0, epsilon = 1e-9);
        }
        let y = m.log_conductivity(&p).unwrap();
        assert!(y.iter().all(|&v| v == 2.0));

        let mut dry = p.clone();
        dry[2..8].iter_mut().for_each(|v| *v = 0.0);
        let out_dry = m.evaluate(&dry).unwrap();
        assert!(out_dry[..135].iter().all(|&v| v == 0.0));
        assert_eq!(&out_dry[135..], &out[135..]);
    }

    #[test]
    fn source108_reference_runs() {
        let m = small108();
        let out = m.evaluate(&source108_truth()).unwrap();
        assert!(out[..135].iter().any(|&v| v > 0.01));
        assert!(out[..135].iter().all(|&v| v >= -1e-6));
        assert_eq!(reference_xi(), reference_xi());
        assert_eq!(source108_names().len(), 108);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn random_field_flux_balance(seed in 0u64..100_000) {
            let mut rng = substream(seed, &[7]);
            let g = domain_grid(rng.random_range(4..16), rng.random_range(4..10)).unwrap();
            let k = (0..g.n_cells()).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let f = solve_flow(&FlowDomain::new(g, k).unwrap()).unwrap();
            let max = f.max_face_flux();
            prop_assert!(f.cell_imbalance().iter().all(|r| r.abs() <= 1e-10 * max));
        }

        #[test]
        fn uniform_flow_transport_conserves_and_stays_nonnegative(seed in 0u64..100_000) {
            let mut rng = substream(seed, &[8]);
            let f = homogeneous(20, 10);
            let t_on = rng.random_range(0.0..2.0);
            let sched = Schedule::Constant {
                rate: rng.random_range(1.0..15.0),
                t_on,
                t_off: t_on + rng.random_range(0.1..3.0),
            };
            let src = SourceSpec {
                x: rng.random_range(2.0..5.0),
                y: rng.random_range(2.0..8.0),
                schedule: sched.clone(),
            };
            let horizon = 5.0;
            let out = simulate_transport(&f, &src, &TransportParams::default(), &[(10.0, 5.0)], &[horizon]).unwrap();
            let injected = sched.mass_between(0.0, horizon);
            let mass = out.final_mass(&f.grid, f.porosity);
            prop_assert!((mass - injected).abs() <= 0.005 * injected);
            prop_assert!(out.final_field.iter().all(|&c| c >= -1e-12));
        }
    }
}
