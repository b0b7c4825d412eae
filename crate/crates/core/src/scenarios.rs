//! Preset problems: Coulomb-driven cavity (energy decay and mass), steric
//! matrix sweep, and the shear-exponent study with a Dirichlet potential.

use std::f64::consts::PI;

use thiserror::Error;

use crate::fem::{
    apply_dirichlet, BilinearTerm, Coef, CompatibilityPolicy, Discretization, FemError, Field, LinearTerm, SpaceKind,
};
use crate::model::Params;
use crate::scheme::{InitialData, PotentialBc, SchemeError, SchemeOptions, Simulation, Velocity};
use crate::sparse::solve_direct;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}` (try `list-scenarios`)")]
    Unknown(String),
    #[error("invalid scenario argument: {0}")]
    InvalidArgument(String),
}

/// Which structural properties a scenario run is expected to satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expectations {
    pub mass_conservation: bool,
    pub positivity: bool,
    pub energy_decay: bool,
}

pub struct Scenario {
    pub name: String,
    pub params: Params,
    pub init: InitialData,
    pub opts: SchemeOptions,
    /// Cells per side of the unit square (`h = sqrt(2)/n_cells`).
    pub n_cells: usize,
    pub snapshot_times: Vec<f64>,
    pub expectations: Expectations,
}

/// Mesh/time overrides for cheaper runs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub n_cells: Option<usize>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
}

impl Scenario {
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(n) = o.n_cells {
            self.n_cells = n;
        }
        if let Some(dt) = o.dt {
            self.params.dt = dt;
        }
        if let Some(t) = o.t_final {
            self.params.t_final = t;
        }
        self
    }

    /// Default reduced profile: `h = sqrt(2)/20` and a shortened final time.
    pub fn desk(self) -> Self {
        let t_final = match self.name.split(':').next() {
            Some("energy-decay") => 0.5,
            Some("steric") => 0.2,
            _ => 1.0,
        };
        self.with_overrides(&Overrides { n_cells: Some(20), dt: None, t_final: Some(t_final) })
    }

    pub fn discretization(&self) -> Result<Discretization, FemError> {
        Discretization::unit_square(self.n_cells)
    }

    /// Smallest initial concentration over the quadrature points and dof
    /// points of the scenario mesh.
    pub fn min_initial_concentration(&self, disc: &Discretization) -> f64 {
        let dofs = disc.p2.dofmap.dof_points(&disc.mesh);
        self.init
            .c0
            .iter()
            .flat_map(|c| disc.qp_points.iter().chain(&dofs).map(move |p| c(p[0], p[1])))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn build(&self) -> Result<Simulation, SchemeError> {
        let disc = self.discretization().map_err(|e| SchemeError::Setup(e.to_string()))?;
        if !(self.min_initial_concentration(&disc) > 0.0) {
            return Err(SchemeError::Setup(format!("{}: initial concentration not positive", self.name)));
        }
        Simulation::new(disc, self.params.clone(), self.opts, &self.init, None)
    }
}

fn cos_cos(x: f64, y: f64) -> f64 {
    (PI * x).cos() * (PI * y).cos()
}

/// SAV shift from the pointwise bound `c (log c - 1) >= -1`: the free
/// energy of `N` species on the unit square never drops below `-Co N`.
pub fn entropy_floor_shift(p: &Params) -> f64 {
    1.0 + p.co * p.n_species() as f64
}

fn two_species(w: [[f64; 2]; 2]) -> Params {
    Params {
        re: 1.0,
        pe: 1.0,
        co: 1.0,
        lambda: 1.0,
        mu0: 1.0,
        mu_inf: 0.5,
        lambda1: 1.0,
        k: 1.0,
        z: vec![1, -1],
        w: w.iter().map(|r| r.to_vec()).collect(),
        b: None,
        dt: 1e-3,
        t_final: 1.0,
    }
}

/// Coulomb-driven flow in a cavity.
pub fn scenario_energy_decay() -> Scenario {
    let params = Params {
        re: 1.0,
        pe: 50.0,
        co: 0.6,
        lambda: 0.2,
        mu0: 1.5,
        mu_inf: 0.5,
        lambda1: 0.1,
        k: 0.2,
        dt: 1e-2,
        t_final: 2.0,
        ..two_species([[2.0, 0.0], [0.0, 2.0]])
    };
    Scenario {
        name: "energy-decay".into(),
        params,
        init: InitialData {
            c0: vec![Box::new(|x, y| 12.0 + 10.0 * cos_cos(x, y)), Box::new(|x, y| 12.0 - 10.0 * cos_cos(x, y))],
            u0: Box::new(|_, _| [0.0, 0.0]),
            p0: None,
        },
        opts: SchemeOptions::default(),
        n_cells: 40,
        snapshot_times: vec![],
        expectations: Expectations { mass_conservation: true, positivity: true, energy_decay: true },
    }
}

/// Steric matrices of the sweep, indexed 0..=4.
pub const STERIC_MATRICES: [[[f64; 2]; 2]; 5] = [
    [[0.0, 0.0], [0.0, 0.0]],
    [[4.0, 1.0], [1.0, 4.0]],
    [[8.0, 1.0], [1.0, 8.0]],
    [[8.0, 4.0], [4.0, 8.0]],
    [[8.0, 7.0], [7.0, 8.0]],
];

fn step_profile(s: f64) -> f64 {
    0.5 * (1.0 + (s / 0.04).tanh())
}

pub fn steric_cp0(x: f64, y: f64) -> f64 {
    1e-6 + (1.0 - 1e-6) * step_profile(x - 0.75) * step_profile(y - 0.55)
}

pub fn steric_cn0(x: f64, y: f64) -> f64 {
    1e-6 + (1.0 - 1e-6) * step_profile(x - 0.75) * step_profile(0.45 - y)
}

/// Ion layers under steric matrix number `index`.
pub fn scenario_steric(index: usize) -> Result<Scenario, ScenarioError> {
    let w = *STERIC_MATRICES
        .get(index)
        .ok_or_else(|| ScenarioError::InvalidArgument(format!("steric index {index} not in 0..=4")))?;
    let params = Params {
        re: 5.0,
        pe: 50.0,
        co: 5.0,
        lambda: 0.1,
        mu0: 1.0,
        mu_inf: 0.5,
        lambda1: 1.0,
        k: 0.5,
        dt: 1e-3,
        t_final: 1.0,
        ..two_species(w)
    };
    let params = Params { b: Some(entropy_floor_shift(&params)), ..params };
    Ok(Scenario {
        name: format!("steric:{index}"),
        params,
        init: InitialData { c0: vec![Box::new(steric_cp0), Box::new(steric_cn0)], u0: Box::new(|_, _| [0.0, 0.0]), p0: None },
        opts: SchemeOptions { charge_policy: CompatibilityPolicy::SubtractMean, ..SchemeOptions::default() },
        n_cells: 40,
        snapshot_times: vec![0.002, 0.1, 1.0],
        // the mean-charge subtraction changes the Poisson problem, so the
        // energy identity is not asserted; mass and positivity still are
        expectations: Expectations { mass_conservation: true, positivity: true, energy_decay: false },
    })
}

fn disk_profile(x: f64, y: f64, cx: f64, cy: f64) -> f64 {
    1.0 + 1e-6 - (100.0 * ((x - cx).powi(2) + (y - cy).powi(2) - 0.05 * 0.05)).tanh()
}

pub fn exponent_cp0(x: f64, y: f64) -> f64 {
    disk_profile(x, y, 0.4, 0.4)
}

pub fn exponent_cn0(x: f64, y: f64) -> f64 {
    disk_profile(x, y, 0.6, 0.6)
}

/// Two charged blobs in an applied field, Carreau exponent `k`.
pub fn scenario_exponent_k(k: f64) -> Result<Scenario, ScenarioError> {
    if !(k.is_finite() && k > 0.0) {
        return Err(ScenarioError::InvalidArgument(format!("power index must be positive, got {k}")));
    }
    let params = Params {
        re: 50.0,
        pe: 50.0,
        co: 100.0,
        lambda: 0.1,
        mu0: 1.0,
        mu_inf: 0.1,
        lambda1: 0.1,
        k,
        dt: 1e-3,
        t_final: 5.0,
        ..two_species([[0.0; 2]; 2])
    };
    let params = Params { b: Some(entropy_floor_shift(&params)), ..params };
    Ok(Scenario {
        name: format!("exponent-k:{k}"),
        params,
        init: InitialData {
            c0: vec![Box::new(exponent_cp0), Box::new(exponent_cn0)],
            u0: Box::new(|_, _| [0.0, 0.0]),
            p0: None,
        },
        opts: SchemeOptions { potential_bc: PotentialBc::DirichletLr, check_energy: false, ..SchemeOptions::default() },
        n_cells: 60,
        snapshot_times: vec![0.005, 0.075, 0.1, 0.2, 0.3, 5.0],
        expectations: Expectations { mass_conservation: true, positivity: true, energy_decay: false },
    })
}

pub fn scenario_names() -> [&'static str; 3] {
    ["energy-decay", "steric:<0..4>", "exponent-k:<value>"]
}

/// Resolves `energy-decay`, `steric:<i>` or `exponent-k:<k>`.
pub fn by_name(name: &str) -> Result<Scenario, ScenarioError> {
    match name.split_once(':') {
        None if name == "energy-decay" => Ok(scenario_energy_decay()),
        Some(("steric", i)) => {
            let i = i.parse::<usize>().map_err(|_| ScenarioError::InvalidArgument(format!("bad steric index `{i}`")))?;
            scenario_steric(i)
        }
        Some(("exponent-k", k)) => {
            let k = k.parse::<f64>().map_err(|_| ScenarioError::InvalidArgument(format!("bad power index `{k}`")))?;
            scenario_exponent_k(k)
        }
        _ => Err(ScenarioError::Unknown(name.into())),
    }
}

/// Stream function `psi` with `-lap psi = curl u`, `psi = 0` on the boundary.
pub fn stream_function(disc: &Discretization, u: &Velocity) -> Result<Field, FemError> {
    let g = u.grad_qp(disc)?;
    let omega: Vec<f64> = g.iter().map(|g| g[1][0] - g[0][1]).collect();
    let mut k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2)?;
    let mut b = disc.assemble_vector(&[LinearTerm::Source(Coef::Qp(&omega))], SpaceKind::P2)?;
    let dofs = disc.p2.dofmap.boundary_dofs.clone();
    let zeros = vec![0.0; dofs.len()];
    apply_dirichlet(&mut k, &mut b, &dofs, &zeros, true)?;
    let (x, _) = solve_direct(&k, &b)?;
    Ok(Field { space: SpaceKind::P2, coeffs: x })
}

/// Strict local extrema of a P2 field sampled at the interior mesh vertices
/// (8-neighbourhood), ignoring values below `rel_floor * max|f|`.
pub fn count_interior_extrema(disc: &Discretization, f: &Field, rel_floor: f64) -> usize {
    let (nx, ny) = (disc.mesh.nx, disc.mesh.ny);
    let at = |i: usize, j: usize| f.coeffs[j * (nx + 1) + i];
    let fmax = f.coeffs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut count = 0;
    for j in 1..ny {
        for i in 1..nx {
            let v = at(i, j);
            if v.abs() < rel_floor * fmax {
                continue;
            }
            let neighbours = [
                at(i - 1, j - 1),
                at(i, j - 1),
                at(i + 1, j - 1),
                at(i - 1, j),
                at(i + 1, j),
                at(i - 1, j + 1),
                at(i, j + 1),
                at(i + 1, j + 1),
            ];
            if neighbours.iter().all(|&w| v > w) || neighbours.iter().all(|&w| v < w) {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_decay_initial_data() {
        let s = scenario_energy_decay();
        let disc = Discretization::unit_square(20).unwrap();
        for (i, c0) in s.init.c0.iter().enumerate() {
            let m = disc.integrate_fn(c0);
            assert!((m - 12.0).abs() < 1e-10, "species {i}: {m}");
        }
        let net = disc.integrate_fn(|x, y| (s.init.c0[0])(x, y) - (s.init.c0[1])(x, y));
        assert!(net.abs() < 1e-10);
        assert!((s.min_initial_concentration(&disc) - 2.0).abs() < 1e-12);
        assert!(s.params.validate().is_ok());
    }

    #[test]
    fn steric_presets() {
        let s = scenario_steric(0).unwrap();
        assert!(s.params.w.iter().flatten().all(|v| *v == 0.0));
        assert!((steric_cp0(1.0, 1.0) - 1.0).abs() < 1e-3);
        let disc = Discretization::unit_square(10).unwrap();
        for i in 0..5 {
            let s = scenario_steric(i).unwrap();
            assert!(s.params.validate().is_ok());
            assert!(s.min_initial_concentration(&disc) >= 1e-6);
        }
        assert!(scenario_steric(5).is_err());
    }

    #[test]
    fn exponent_presets() {
        assert!((exponent_cp0(0.4, 0.4) - (1.0 + 1e-6 - (-0.25f64).tanh())).abs() < 1e-14);
        assert!((exponent_cp0(0.4, 0.4) - 1.2449).abs() < 1e-4);
        assert!(exponent_cp0(1.0, 0.0) < 2e-6);
        assert!(scenario_exponent_k(0.0).is_err());
        assert_eq!(by_name("exponent-k:1.8").unwrap().params.k, 1.8);
        assert_eq!(by_name("steric:3").unwrap().params.w[0][1], 4.0);
        assert!(matches!(by_name("nope"), Err(ScenarioError::Unknown(_))));
    }

    #[test]
    fn single_vortex_of_a_cell_flow() {
        let disc = Discretization::unit_square(16).unwrap();
        let u = Velocity {
            nodal: disc.interpolate_vec(|x, y| {
                [PI * (PI * x).sin().powi(2) * (2.0 * PI * y).sin(), -PI * (2.0 * PI * x).sin() * (PI * y).sin().powi(2)]
            }),
            correction: vec![[0.0; 2]; disc.n_cells()],
        };
        let psi = stream_function(&disc, &u).unwrap();
        // this velocity is the curl of sin^2(pi x) sin^2(pi y)
        let err = disc.error_norm_l2(&psi, |x, y| (PI * x).sin().powi(2) * (PI * y).sin().powi(2)).unwrap();
        assert!(err < 1e-3, "{err}");
        assert_eq!(count_interior_extrema(&disc, &psi, 1e-3), 1);
    }
}
