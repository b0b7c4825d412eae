//! Dimensionless parameters, the Carreau viscosity law, chemical
//! potentials, free energies and per-step diagnostics.

use thiserror::Error;

use crate::fem::{Discretization, QpScalar, QpVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` out of range: {reason}")]
    Range { name: &'static str, reason: String },
    #[error("concentration of species {species} not positive ({value:e}) at quadrature point {point}")]
    Positivity { species: usize, point: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Complete dimensionless parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// Reynolds number.
    pub re: f64,
    /// Peclet number.
    pub pe: f64,
    /// Coupling constant of the electric body force.
    pub co: f64,
    /// Dielectric coefficient of the Poisson equation.
    pub lambda: f64,
    /// Zero-shear viscosity.
    pub mu0: f64,
    /// Infinite-shear viscosity.
    pub mu_inf: f64,
    /// Carreau relaxation constant.
    pub lambda1: f64,
    /// Carreau power index.
    pub k: f64,
    /// Valence per species.
    pub z: Vec<i32>,
    /// Steric interaction matrix, row-major `N x N`.
    pub w: Vec<Vec<f64>>,
    /// SAV shift; `None` selects `1 + max(0, -E(initial))`.
    pub b: Option<f64>,
    pub dt: f64,
    pub t_final: f64,
}

impl Params {
    pub fn n_species(&self) -> usize {
        self.z.len()
    }

    pub fn zf(&self, i: usize) -> f64 {
        self.z[i] as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ModelError::Range { name, reason: format!("must be positive, got {v}") })
            }
        };
        positive("Re", self.re)?;
        positive("Pe", self.pe)?;
        positive("Co", self.co)?;
        positive("lambda", self.lambda)?;
        positive("mu_inf", self.mu_inf)?;
        positive("k", self.k)?;
        positive("dt", self.dt)?;
        positive("T", self.t_final)?;
        if !(self.mu0.is_finite() && self.mu0 > self.mu_inf) {
            return Err(ModelError::Range {
                name: "mu0",
                reason: format!("must exceed mu_inf = {}, got {}", self.mu_inf, self.mu0),
            });
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(ModelError::Range { name: "lambda1", reason: format!("must be >= 0, got {}", self.lambda1) });
        }
        if let Some(b) = self.b {
            positive("B", b)?;
        }
        let n = self.n_species();
        if n == 0 {
            return Err(ModelError::Range { name: "z", reason: "at least one species required".into() });
        }
        if self.w.len() != n || self.w.iter().any(|r| r.len() != n) {
            return Err(ModelError::Range { name: "W", reason: format!("must be {n}x{n}") });
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.w[i][j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ModelError::Range { name: "W", reason: format!("entry ({i},{j}) = {v} is negative") });
                }
                if v != self.w[j][i] {
                    return Err(ModelError::Range { name: "W", reason: "must be symmetric".into() });
                }
            }
        }
        if !is_positive_semidefinite(&self.w) {
            return Err(ModelError::Range { name: "W", reason: "must be positive semidefinite".into() });
        }
        Ok(())
    }
}

/// Cholesky test with a tiny relative shift, so the zero matrix passes.
fn is_positive_semidefinite(w: &[Vec<f64>]) -> bool {
    let n = w.len();
    let trace: f64 = (0..n).map(|i| w[i][i]).sum();
    let shift = 1e-12 * trace.max(1.0);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = w[i][i] + shift - s;
                if d <= 0.0 {
                    return false;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (w[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

/// Carreau law `mu = mu_inf + (mu0 - mu_inf) (1 + lambda1^2 s)^((k-1)/2)`
/// with `s = 2 D(u):D(u)`. Returns `mu0` exactly when `k == 1`.
pub fn carreau_viscosity(shear_sq: f64, p: &Params) -> f64 {
    if p.k == 1.0 {
        return p.mu0;
    }
    p.mu_inf + (p.mu0 - p.mu_inf) * (1.0 + p.lambda1 * p.lambda1 * shear_sq).powf(0.5 * (p.k - 1.0))
}

/// `2 D(u):D(u)` from a velocity gradient `g[i][j] = d u_i / d x_j`.
pub fn shear_rate_sq(g: &[[f64; 2]; 2]) -> f64 {
    let d12 = 0.5 * (g[0][1] + g[1][0]);
    2.0 * (g[0][0] * g[0][0] + 2.0 * d12 * d12 + g[1][1] * g[1][1])
}

fn check_positive(c: &[QpScalar]) -> Result<(), ModelError> {
    for (species, ci) in c.iter().enumerate() {
        if let Some((point, &value)) = ci.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(ModelError::Positivity { species, point, value });
        }
    }
    Ok(())
}

/// `g_i = log c_i + z_i V + sum_j w_ij c_j` at quadrature points.
pub fn chemical_potential_bar(c: &[QpScalar], v: &[f64], p: &Params) -> Result<Vec<QpScalar>, ModelError> {
    check_positive(c)?;
    let n = p.n_species();
    if c.len() != n {
        return Err(ModelError::InvalidArgument(format!("{} concentrations for {n} species", c.len())));
    }
    Ok((0..n)
        .map(|i| {
            (0..v.len())
                .map(|q| {
                    let mut g = c[i][q].ln() + p.zf(i) * v[q];
                    for j in 0..n {
                        g += p.w[i][j] * c[j][q];
                    }
                    g
                })
                .collect()
        })
        .collect())
}

/// Free energy `(lambda Co/2)|grad V|^2 + Co sum (c, log c - 1) + (Co/2) sum w_ij (c_i, c_j)`.
pub fn energy_spnp(
    disc: &Discretization,
    c: &[QpScalar],
    grad_v: &QpVector,
    p: &Params,
) -> Result<f64, ModelError> {
    check_positive(c)?;
    let n = p.n_species();
    let mut e = 0.0;
    for (q, w) in disc.jxw.iter().enumerate() {
        let g = grad_v[q];
        let mut local = 0.5 * p.lambda * (g[0] * g[0] + g[1] * g[1]);
        for i in 0..n {
            let ci = c[i][q];
            local += ci * (ci.ln() - 1.0);
            for j in 0..n {
                local += 0.5 * p.w[i][j] * ci * c[j][q];
            }
        }
        e += w * local;
    }
    Ok(p.co * e)
}

/// Components of the discrete energy of the two-level scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub pressure: f64,
    pub sav: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.kinetic + self.pressure + self.sav
    }
}

/// `1/4 (|u1|^2 + |2u1 - u0|^2) + (dt^2/3)|grad p1|^2 + 1/2 (r1^2 + (2r1 - r0)^2)`.
///
/// `u_new`/`u_old` are quadrature values; `grad_p` is the cellwise constant
/// pressure gradient.
pub fn discrete_energy(
    disc: &Discretization,
    u_new: &QpVector,
    u_old: &QpVector,
    grad_p: &[[f64; 2]],
    r_new: f64,
    r_old: f64,
    dt: f64,
) -> EnergyParts {
    let nq = disc.nq();
    let mut kin = 0.0;
    let mut pres = 0.0;
    for (q, w) in disc.jxw.iter().enumerate() {
        let (a, b) = (u_new[q], u_old[q]);
        let e = [2.0 * a[0] - b[0], 2.0 * a[1] - b[1]];
        kin += w * (a[0] * a[0] + a[1] * a[1] + e[0] * e[0] + e[1] * e[1]);
        let g = grad_p[q / nq];
        pres += w * (g[0] * g[0] + g[1] * g[1]);
    }
    let er = 2.0 * r_new - r_old;
    EnergyParts { kinetic: 0.25 * kin, pressure: dt * dt / 3.0 * pres, sav: 0.5 * (r_new * r_new + er * er) }
}

/// Energy of the one-step (backward Euler) start: `1/2|u|^2 + (dt^2/2)|grad p|^2 + r^2`.
pub fn first_order_energy(disc: &Discretization, u: &QpVector, grad_p: &[[f64; 2]], r: f64, dt: f64) -> EnergyParts {
    let nq = disc.nq();
    let mut kin = 0.0;
    let mut pres = 0.0;
    for (q, w) in disc.jxw.iter().enumerate() {
        let a = u[q];
        kin += w * (a[0] * a[0] + a[1] * a[1]);
        let g = grad_p[q / nq];
        pres += w * (g[0] * g[0] + g[1] * g[1]);
    }
    EnergyParts { kinetic: 0.5 * kin, pressure: 0.5 * dt * dt * pres, sav: r * r }
}

/// Physical constants feeding the dimensionless groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalConstants {
    /// Fluid density.
    pub rho: f64,
    /// Characteristic velocity.
    pub velocity: f64,
    /// Characteristic length.
    pub length: f64,
    /// Characteristic viscosity.
    pub viscosity: f64,
    /// Characteristic concentration.
    pub concentration: f64,
    /// Thermal energy `k_B T`.
    pub thermal_energy: f64,
    /// Elementary charge.
    pub charge: f64,
    /// Ion diffusivity.
    pub diffusivity: f64,
    /// Permittivity.
    pub permittivity: f64,
}

/// Dimensionless groups `(Re, Co, Pe, lambda)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dimensionless {
    pub re: f64,
    pub co: f64,
    pub pe: f64,
    pub lambda: f64,
}

pub fn nondimensionalize(k: &PhysicalConstants) -> Result<Dimensionless, ModelError> {
    let all = [
        ("rho", k.rho),
        ("velocity", k.velocity),
        ("length", k.length),
        ("viscosity", k.viscosity),
        ("concentration", k.concentration),
        ("thermal_energy", k.thermal_energy),
        ("charge", k.charge),
        ("diffusivity", k.diffusivity),
        ("permittivity", k.permittivity),
    ];
    for (name, v) in all {
        if !(v.is_finite() && v > 0.0) {
            return Err(ModelError::Range { name, reason: format!("must be positive, got {v}") });
        }
    }
    Ok(Dimensionless {
        re: k.rho * k.velocity * k.length / k.viscosity,
        co: k.concentration * k.thermal_energy / (k.rho * k.velocity * k.velocity * k.charge),
        pe: k.length * k.velocity / k.diffusivity,
        lambda: k.permittivity * k.thermal_energy / (k.length * k.length * k.concentration * k.charge),
    })
}

/// Integral of a concentration given at quadrature points.
pub fn species_mass(disc: &Discretization, c: &[f64]) -> f64 {
    disc.integrate_qp(c)
}

/// Minimum over quadrature values and nodal values.
pub fn min_concentration(c_qp: &[f64], c_nodal: &[f64]) -> f64 {
    c_qp.iter().chain(c_nodal).copied().fold(f64::INFINITY, f64::min)
}

/// One row of the per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    /// Discrete energy of the two-level scheme.
    pub e_h: f64,
    pub e_spnp: f64,
    pub mass: Vec<f64>,
    pub min_c: Vec<f64>,
    pub xi: f64,
    pub r: f64,
    /// `(1/Re) |sqrt(2 mu*) D(u~)|^2`.
    pub visc_dissip: f64,
    /// `xi^2 (Co/Pe) sum |sqrt(c) grad g|^2`.
    pub ionic_dissip: f64,
}
