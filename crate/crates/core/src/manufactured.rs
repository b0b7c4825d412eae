//! Manufactured-solution accuracy harness: a closed-form smooth solution of
//! the full coupled system, its source terms, a finite-difference check of
//! those sources, and the temporal convergence study.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{Discretization, FemError};
use crate::model::{carreau_viscosity, shear_rate_sq, Params};
use crate::scheme::{Forcing, InitialData, SchemeError, SchemeOptions, Simulation};

#[derive(Debug, Error)]
pub enum ManufacturedError {
    #[error("source terms fail the finite-difference check: residual {residual:.3e} at {point:?}")]
    SourceValidation { residual: f64, point: [f64; 3] },
    #[error("invalid study: {0}")]
    InvalidArgument(String),
    #[error("setup: {0}")]
    Fem(#[from] FemError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

type Mat2 = [[f64; 2]; 2];

/// Smooth two-species solution decaying like `exp(-t)`:
/// `c = 1.2 +- C`, `V = C / pi^2`, `p = C` with `C = cos(pi x) cos(pi y) e^-t`,
/// and a divergence-free cellular velocity vanishing on the boundary.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactSolution;

impl ExactSolution {
    fn cc(x: f64, y: f64, t: f64) -> f64 {
        (PI * x).cos() * (PI * y).cos() * (-t).exp()
    }

    fn grad_cc(x: f64, y: f64, t: f64) -> [f64; 2] {
        let s = (-t).exp();
        [-PI * (PI * x).sin() * (PI * y).cos() * s, -PI * (PI * x).cos() * (PI * y).sin() * s]
    }

    /// `+1` for the cation (species 0), `-1` for the anion.
    fn sign(i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn c(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        1.2 + Self::sign(i) * Self::cc(x, y, t)
    }

    pub fn grad_c(&self, i: usize, x: f64, y: f64, t: f64) -> [f64; 2] {
        let g = Self::grad_cc(x, y, t);
        [Self::sign(i) * g[0], Self::sign(i) * g[1]]
    }

    pub fn lap_c(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        -2.0 * PI * PI * Self::sign(i) * Self::cc(x, y, t)
    }

    pub fn dt_c(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        -Self::sign(i) * Self::cc(x, y, t)
    }

    pub fn v(&self, x: f64, y: f64, t: f64) -> f64 {
        Self::cc(x, y, t) / (PI * PI)
    }

    pub fn grad_v(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let g = Self::grad_cc(x, y, t);
        [g[0] / (PI * PI), g[1] / (PI * PI)]
    }

    pub fn lap_v(&self, x: f64, y: f64, t: f64) -> f64 {
        -2.0 * Self::cc(x, y, t)
    }

    pub fn p(&self, x: f64, y: f64, t: f64) -> f64 {
        Self::cc(x, y, t)
    }

    pub fn grad_p(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        Self::grad_cc(x, y, t)
    }

    pub fn u(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let (a, b, s) = (PI * x, PI * y, (-t).exp());
        [PI * a.sin().powi(2) * (2.0 * b).sin() * s, -PI * (2.0 * a).sin() * b.sin().powi(2) * s]
    }

    pub fn dt_u(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let u = self.u(x, y, t);
        [-u[0], -u[1]]
    }

    /// `g[i][j] = d u_i / d x_j`.
    pub fn grad_u(&self, x: f64, y: f64, t: f64) -> Mat2 {
        let (a, b, s) = (PI * x, PI * y, (-t).exp());
        let p2 = PI * PI;
        [
            [p2 * (2.0 * a).sin() * (2.0 * b).sin() * s, 2.0 * p2 * a.sin().powi(2) * (2.0 * b).cos() * s],
            [-2.0 * p2 * (2.0 * a).cos() * b.sin().powi(2) * s, -p2 * (2.0 * a).sin() * (2.0 * b).sin() * s],
        ]
    }

    /// `h[i][j][k] = d^2 u_i / dx_j dx_k`.
    pub fn hess_u(&self, x: f64, y: f64, t: f64) -> [Mat2; 2] {
        let (a, b, s) = (PI * x, PI * y, (-t).exp());
        let p3 = PI * PI * PI;
        let (s2a, c2a, s2b, c2b) = ((2.0 * a).sin(), (2.0 * a).cos(), (2.0 * b).sin(), (2.0 * b).cos());
        let u1xx = 2.0 * p3 * c2a * s2b * s;
        let u1xy = 2.0 * p3 * s2a * c2b * s;
        let u1yy = -4.0 * p3 * a.sin().powi(2) * s2b * s;
        let u2xx = 4.0 * p3 * s2a * b.sin().powi(2) * s;
        let u2xy = -2.0 * p3 * c2a * s2b * s;
        let u2yy = -2.0 * p3 * s2a * c2b * s;
        [[[u1xx, u1xy], [u1xy, u1yy]], [[u2xx, u2xy], [u2xy, u2yy]]]
    }

    pub fn div_u(&self, x: f64, y: f64, t: f64) -> f64 {
        let g = self.grad_u(x, y, t);
        g[0][0] + g[1][1]
    }

    /// Exact fields at `t = 0` (pressure included).
    pub fn initial_data(&self) -> InitialData {
        let e = *self;
        InitialData {
            c0: (0..2).map(|i| Box::new(move |x, y| e.c(i, x, y, 0.0)) as _).collect(),
            u0: Box::new(move |x, y| e.u(x, y, 0.0)),
            p0: Some(Box::new(move |x, y| e.p(x, y, 0.0))),
        }
    }
}

/// `d mu / d s` of the Carreau law with `s = 2 D:D`.
fn carreau_derivative(shear_sq: f64, p: &Params) -> f64 {
    let l2 = p.lambda1 * p.lambda1;
    (p.mu0 - p.mu_inf) * 0.5 * (p.k - 1.0) * l2 * (1.0 + l2 * shear_sq).powf(0.5 * (p.k - 3.0))
}

/// Source terms obtained by substituting [`ExactSolution`] into the model.
#[derive(Clone, Debug)]
pub struct SourceTerms {
    pub exact: ExactSolution,
    pub params: Params,
}

impl SourceTerms {
    pub fn new(params: Params) -> Result<Self, ManufacturedError> {
        if params.n_species() != 2 || params.z != [1, -1] {
            return Err(ManufacturedError::InvalidArgument("the exact solution needs valences (1, -1)".into()));
        }
        Ok(Self { exact: ExactSolution, params })
    }

    /// `sum_i z_i c_i`.
    fn charge(&self, x: f64, y: f64, t: f64) -> f64 {
        (0..2).map(|i| self.params.zf(i) * self.exact.c(i, x, y, t)).sum()
    }
}

impl Forcing for SourceTerms {
    fn f_u(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let (e, p) = (&self.exact, &self.params);
        let u = e.u(x, y, t);
        let g = e.grad_u(x, y, t);
        let h = e.hess_u(x, y, t);
        let d = [[g[0][0], 0.5 * (g[0][1] + g[1][0])], [0.5 * (g[0][1] + g[1][0]), g[1][1]]];
        // dd[k] = d D / d x_k
        let dd: [Mat2; 2] = std::array::from_fn(|k| {
            let off = 0.5 * (h[0][1][k] + h[1][0][k]);
            [[h[0][0][k], off], [off, h[1][1][k]]]
        });
        let s = shear_rate_sq(&g);
        let mu = carreau_viscosity(s, p);
        let dmu_ds = carreau_derivative(s, p);
        let grad_mu: [f64; 2] = std::array::from_fn(|k| {
            dmu_ds * 4.0 * (d[0][0] * dd[k][0][0] + 2.0 * d[0][1] * dd[k][0][1] + d[1][1] * dd[k][1][1])
        });
        let dt_u = e.dt_u(x, y, t);
        let gp = e.grad_p(x, y, t);
        let gv = e.grad_v(x, y, t);
        let q = self.charge(x, y, t);
        std::array::from_fn(|i| {
            let div_d: f64 = (0..2).map(|j| dd[j][i][j]).sum();
            let stress = 2.0 * mu * div_d + 2.0 * (0..2).map(|j| d[i][j] * grad_mu[j]).sum::<f64>();
            let adv = u[0] * g[i][0] + u[1] * g[i][1];
            dt_u[i] + adv - stress / p.re + gp[i] + p.co * q * gv[i]
        })
    }

    fn f_c(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        let (e, p) = (&self.exact, &self.params);
        let c = e.c(i, x, y, t);
        let gc = e.grad_c(i, x, y, t);
        let gv = e.grad_v(x, y, t);
        let u = e.u(x, y, t);
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let steric: f64 =
            (0..2).map(|j| p.w[i][j] * (dot(gc, e.grad_c(j, x, y, t)) + c * e.lap_c(j, x, y, t))).sum();
        let flux_div = e.lap_c(i, x, y, t) + p.zf(i) * (dot(gc, gv) + c * e.lap_v(x, y, t)) + steric;
        e.dt_c(i, x, y, t) + dot(u, gc) - flux_div / p.pe
    }

    fn f_sigma(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        self.f_c(i, x, y, t) / self.exact.c(i, x, y, t)
    }

    fn f_v(&self, x: f64, y: f64, t: f64) -> f64 {
        -self.params.lambda * self.exact.lap_v(x, y, t) - self.charge(x, y, t)
    }

    fn c_exact(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        self.exact.c(i, x, y, t)
    }
}

// truncation of the nested stress difference dominates above ~1e-3
const FD_STEP: f64 = 5e-4;

/// Fourth-order central difference of `f` at `s`.
fn fd(f: impl Fn(f64) -> f64, s: f64) -> f64 {
    let h = FD_STEP;
    (-f(s + 2.0 * h) + 8.0 * f(s + h) - 8.0 * f(s - h) + f(s - 2.0 * h)) / (12.0 * h)
}

fn fd_grad(f: impl Fn(f64, f64) -> f64, x: f64, y: f64) -> [f64; 2] {
    [fd(|s| f(s, y), x), fd(|s| f(x, s), y)]
}

/// Residuals of every equation for the exact solution, with all space and
/// time derivatives taken by finite differences of the exact fields:
/// `[momentum x, momentum y, cation, anion, Poisson]`.
pub fn fd_residuals(src: &SourceTerms, x: f64, y: f64, t: f64) -> [f64; 5] {
    let (e, p) = (&src.exact, &src.params);
    let grad_u = |x: f64, y: f64| -> Mat2 {
        let gx = fd_grad(|a, b| e.u(a, b, t)[0], x, y);
        let gy = fd_grad(|a, b| e.u(a, b, t)[1], x, y);
        [gx, gy]
    };
    let stress = |x: f64, y: f64, i: usize, j: usize| -> f64 {
        let g = grad_u(x, y);
        2.0 * carreau_viscosity(shear_rate_sq(&g), p) * 0.5 * (g[i][j] + g[j][i])
    };
    let u = e.u(x, y, t);
    let g = grad_u(x, y);
    let gp = fd_grad(|a, b| e.p(a, b, t), x, y);
    let gv = fd_grad(|a, b| e.v(a, b, t), x, y);
    let q = src.charge(x, y, t);
    let fu = src.f_u(x, y, t);
    let mut out = [0.0; 5];
    for i in 0..2 {
        let dt_u = fd(|s| e.u(x, y, s)[i], t);
        let div_tau = fd(|s| stress(s, y, i, 0), x) + fd(|s| stress(x, s, i, 1), y);
        let lhs = dt_u + u[0] * g[i][0] + u[1] * g[i][1] - div_tau / p.re + gp[i] + p.co * q * gv[i];
        out[i] = lhs - fu[i];
    }
    for i in 0..2 {
        // c_i grad g_i with g_i = log c_i + z_i V + sum_j w_ij c_j
        let flux = |a: f64, b: f64, k: usize| -> f64 {
            let gg = fd_grad(
                |a, b| {
                    e.c(i, a, b, t).ln()
                        + p.zf(i) * e.v(a, b, t)
                        + (0..2).map(|j| p.w[i][j] * e.c(j, a, b, t)).sum::<f64>()
                },
                a,
                b,
            );
            e.c(i, a, b, t) * gg[k]
        };
        let div_flux = fd(|s| flux(s, y, 0), x) + fd(|s| flux(x, s, 1), y);
        let gc = fd_grad(|a, b| e.c(i, a, b, t), x, y);
        let lhs = fd(|s| e.c(i, x, y, s), t) + u[0] * gc[0] + u[1] * gc[1] - div_flux / p.pe;
        out[2 + i] = lhs - src.f_c(i, x, y, t);
    }
    let lap_v = fd(|s| fd(|r| e.v(r, y, t), s), x) + fd(|s| fd(|r| e.v(x, r, t), s), y);
    out[4] = -p.lambda * lap_v - q - src.f_v(x, y, t);
    out
}

/// Largest finite-difference residual of the sources over `n` random
/// space-time points in `[0,1]^2 x [0, t_max]`.
pub fn validate_sources(src: &SourceTerms, n: usize, t_max: f64, seed: u64, tol: f64) -> Result<f64, ManufacturedError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let pt = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * t_max];
        let r = fd_residuals(src, pt[0], pt[1], pt[2]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(r <= tol) {
            return Err(ManufacturedError::SourceValidation { residual: r, point: pt });
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Parameters of the accuracy test.
pub fn manufactured_params() -> Params {
    Params {
        re: 1.0,
        pe: 2.0,
        co: 5.0,
        lambda: 1.0,
        mu0: 1.0,
        mu_inf: 0.5,
        lambda1: 1.0,
        k: 0.5,
        z: vec![1, -1],
        w: vec![vec![2.0, 1.0], vec![1.0, 2.0]],
        b: None,
        dt: 0.5 / 8.0,
        t_final: 0.5,
    }
}

/// L2 errors at the final time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSet {
    pub u: f64,
    pub p: f64,
    pub cp: f64,
    pub cn: f64,
    pub v: f64,
}

impl ErrorSet {
    pub fn as_array(&self) -> [f64; 5] {
        [self.u, self.p, self.cp, self.cn, self.v]
    }

    /// `log2(coarse / self)` componentwise.
    pub fn orders_from(&self, coarse: &ErrorSet) -> [f64; 5] {
        let (c, f) = (coarse.as_array(), self.as_array());
        std::array::from_fn(|k| (c[k] / f[k]).log2())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub n_steps: usize,
    pub dt: f64,
    pub errors: ErrorSet,
    /// Observed orders against the previous row.
    pub orders: Option<[f64; 5]>,
}

/// Runs the manufactured problem with `n_steps` steps on an `n_cells`
/// square mesh and returns the errors at the final time.
pub fn run_manufactured(n_cells: usize, n_steps: usize, params: &Params) -> Result<ErrorSet, ManufacturedError> {
    if n_steps == 0 {
        return Err(ManufacturedError::InvalidArgument("need at least one step".into()));
    }
    let mut params = params.clone();
    params.dt = params.t_final / n_steps as f64;
    let src = SourceTerms::new(params.clone())?;
    let exact = src.exact;
    let disc = Discretization::unit_square(n_cells)?;
    let mut sim =
        Simulation::new(disc, params, SchemeOptions::default(), &exact.initial_data(), Some(Box::new(src)))?;
    sim.run(|_, _| Ok(()))?;
    let (disc, lv) = (&sim.disc, &sim.curr);
    let t = lv.t;
    let u = lv.u.eval_qp(disc)?;
    Ok(ErrorSet {
        u: disc.l2_error_qp_vec(&u, |x, y| exact.u(x, y, t)),
        p: disc.error_norm_l2(&lv.p, |x, y| exact.p(x, y, t))?,
        cp: disc.l2_error_qp(&lv.c_qp[0], |x, y| exact.c(0, x, y, t)),
        cn: disc.l2_error_qp(&lv.c_qp[1], |x, y| exact.c(1, x, y, t)),
        v: disc.error_norm_l2(&lv.v, |x, y| exact.v(x, y, t))?,
    })
}

/// Temporal convergence table: one run per entry of `n_list` (executed
/// concurrently), orders between consecutive rows. The sources are checked
/// by finite differences first.
pub fn convergence_study(n_list: &[usize], n_cells: usize, params: &Params) -> Result<Vec<StudyRow>, ManufacturedError> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ManufacturedError::InvalidArgument("step counts must be increasing".into()));
    }
    let src = SourceTerms::new(params.clone())?;
    let worst = validate_sources(&src, 100, params.t_final, 7, 1e-6)?;
    log::info!("source terms validated, largest residual {worst:.2e}");
    let errors: Vec<ErrorSet> =
        n_list.par_iter().map(|&n| run_manufactured(n_cells, n, params)).collect::<Result<_, _>>()?;
    Ok(n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| StudyRow {
            n_steps: n,
            dt: params.t_final / n as f64,
            errors: errors[k],
            orders: (k > 0).then(|| errors[k].orders_from(&errors[k - 1])),
        })
        .collect())
}

/// Table as CSV with columns `N,dt,err_u,ord_u,...,err_V,ord_V`; the order
/// cells of the first row are empty.
pub fn convergence_csv(rows: &[StudyRow]) -> String {
    let mut s = String::from("N,dt,err_u,ord_u,err_p,ord_p,err_cp,ord_cp,err_cn,ord_cn,err_V,ord_V\n");
    for r in rows {
        let _ = write!(s, "{},{:e}", r.n_steps, r.dt);
        for (k, e) in r.errors.as_array().iter().enumerate() {
            match r.orders {
                Some(o) => {
                    let _ = write!(s, ",{e:e},{:.4}", o[k]);
                }
                None => {
                    let _ = write!(s, ",{e:e},");
                }
            }
        }
        s.push('\n');
    }
    s
}
