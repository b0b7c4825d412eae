//! Decoupled, linear, second-order time integrator for the Carreau-fluid /
//! steric PNP system.
//!
//! Each step solves, in order: one log-concentration equation per species,
//! the mass renormalization, the Poisson problem for the auxiliary
//! potential, two momentum problems sharing one matrix, the scalar update of
//! the auxiliary variable `xi`, a pressure Poisson problem and the
//! projection. The first step uses the one-step (backward Euler) analogue.
//!
//! Concentrations are represented as `c_i = s_i exp(sigma_i)` with
//! `sigma_i` in P2 and the constant `s_i` fixed by mass normalization; `c_i`
//! is evaluated pointwise at quadrature points. The end-of-step velocity is
//! kept exactly as `u~ - (dt/a) grad psi`: a continuous P2 part plus a
//! piecewise-constant correction.

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{
    apply_dirichlet, BilinearTerm, Coef, CompatibilityPolicy, Discretization, FemError, Field, LinearTerm,
    PreparedSystem, QpScalar, QpTensor, QpVector, SpaceKind, VecCoef, ZeroMeanSystem,
};
use crate::mesh::Side;
use crate::model::{
    carreau_viscosity, chemical_potential_bar, discrete_energy, energy_spnp, first_order_energy, min_concentration,
    shear_rate_sq, DiagnosticsRecord, EnergyParts, ModelError, Params,
};
use crate::sparse::{LuFactorization, LuSymbolic, SolverChoice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("step {step}: structural failure in {quantity}: {message}")]
    Structural { step: usize, quantity: &'static str, message: String },
    #[error("step {step}: linear solve failed in {stage}: {source}")]
    Solver { step: usize, stage: &'static str, source: FemError },
    #[error("invalid parameters: {0}")]
    Params(#[from] ModelError),
    #[error("invalid setup: {0}")]
    Setup(String),
}

impl SchemeError {
    /// Process exit code: 2 for structural failures, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SchemeError::Solver { .. } => 3,
            SchemeError::Params(_) | SchemeError::Setup(_) => 1,
            SchemeError::Structural { .. } => 2,
        }
    }
}

/// Boundary treatment of the electric potential.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialBc {
    /// Homogeneous Neumann on all sides, zero mean.
    ZeroMean,
    /// `V = 1` at `x = xmin`, `V = 0` at `x = xmax`, Neumann on top/bottom.
    DirichletLr,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchemeOptions {
    /// Clamp the extrapolated viscosity below at `mu_inf`.
    pub clamp_viscosity: bool,
    /// Use 1 instead of `1/Pe` as the diffusion coefficient of the
    /// log-concentration equation.
    pub sigma_diffusion_coeff_one: bool,
    /// Check discrete energy decay after every step.
    pub check_energy: bool,
    /// Make an energy increase a hard error instead of a warning.
    pub strict_energy: bool,
    /// In Dirichlet mode, set `V = xi Vbar` (otherwise `V = Vbar`).
    pub xi_scales_dirichlet_potential: bool,
    pub potential_bc: PotentialBc,
    /// Handling of net charge in zero-mean mode.
    pub charge_policy: CompatibilityPolicy,
    pub solver: SolverChoice,
    /// Check mass conservation after every step.
    pub check_mass: bool,
    /// Compute the divergence and split-consistency residuals each step.
    pub check_identities: bool,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self {
            clamp_viscosity: true,
            sigma_diffusion_coeff_one: false,
            check_energy: true,
            strict_energy: false,
            xi_scales_dirichlet_potential: true,
            potential_bc: PotentialBc::ZeroMean,
            charge_policy: CompatibilityPolicy::Strict,
            solver: SolverChoice::Direct,
            check_mass: true,
            check_identities: false,
        }
    }
}

/// External sources added to the equations (manufactured solutions).
pub trait Forcing: Send + Sync {
    /// Momentum source.
    fn f_u(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    /// Source of the concentration equation of species `i`.
    fn f_c(&self, i: usize, x: f64, y: f64, t: f64) -> f64;
    /// Source of the log-concentration equation, `f_c / c`.
    fn f_sigma(&self, i: usize, x: f64, y: f64, t: f64) -> f64;
    /// Poisson source.
    fn f_v(&self, x: f64, y: f64, t: f64) -> f64;
    /// Concentration of species `i`; its integral is the mass target.
    fn c_exact(&self, i: usize, x: f64, y: f64, t: f64) -> f64;
}

pub type ScalarFn = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type VectorFn = Box<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>;

/// Initial data.
pub struct InitialData {
    pub c0: Vec<ScalarFn>,
    pub u0: VectorFn,
    /// Initial pressure; zero when `None`.
    pub p0: Option<ScalarFn>,
}

/// Velocity `nodal + correction`, the correction constant on each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    pub nodal: Field,
    pub correction: Vec<[f64; 2]>,
}

impl Velocity {
    pub fn eval_qp(&self, disc: &Discretization) -> Result<QpVector, FemError> {
        let mut v = disc.eval_vec_qp(&self.nodal)?;
        let nq = disc.nq();
        for (i, vi) in v.iter_mut().enumerate() {
            let c = self.correction[i / nq];
            vi[0] += c[0];
            vi[1] += c[1];
        }
        Ok(v)
    }

    /// Cellwise gradient (the correction does not contribute).
    pub fn grad_qp(&self, disc: &Discretization) -> Result<QpTensor, FemError> {
        disc.eval_vec_grad_qp(&self.nodal)
    }

    pub fn combine(&self, a: f64, other: &Velocity, b: f64) -> Velocity {
        Velocity {
            nodal: self.nodal.combine(a, &other.nodal, b),
            correction: self
                .correction
                .iter()
                .zip(&other.correction)
                .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1]])
                .collect(),
        }
    }
}

/// All unknowns at one time level.
#[derive(Clone, Debug)]
pub struct Level {
    pub t: f64,
    pub u: Velocity,
    /// P1 pressure, zero mean.
    pub p: Field,
    /// P2 log-concentrations.
    pub sigma: Vec<Field>,
    /// `c_i = scale_i exp(sigma_i)`.
    pub scale: Vec<f64>,
    /// Concentrations at quadrature points.
    pub c_qp: Vec<QpScalar>,
    pub vbar: Field,
    pub v: Field,
    /// Viscosity at quadrature points.
    pub mu: QpScalar,
    pub r: f64,
    pub xi: f64,
    pub e_spnp: f64,
}

impl Level {
    /// Nodal concentration coefficients `scale * exp(sigma_d)`.
    pub fn c_nodal(&self, i: usize) -> Vec<f64> {
        self.sigma[i].coeffs.iter().map(|s| self.scale[i] * s.exp()).collect()
    }

    pub fn mass(&self, disc: &Discretization, i: usize) -> f64 {
        disc.integrate_qp(&self.c_qp[i])
    }
}

/// Everything measured during one step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub record: DiagnosticsRecord,
    pub zeta1: f64,
    pub zeta2: f64,
    pub denominator: f64,
    /// Change of the energy that the step's scheme dissipates (the
    /// one-step energy for the starting step, the two-level one otherwise).
    pub energy_increment: f64,
    /// `dt * (viscous + ionic dissipation)`.
    pub dissipation: f64,
    /// Largest `|(u^{n+1}, grad q)|` over P1 basis functions.
    pub divergence_residual: Option<f64>,
    /// `|K u~ - rhs| / |rhs|` of the un-split momentum equation.
    pub split_residual: Option<f64>,
    /// Mean subtracted from the Poisson right-hand side.
    pub subtracted_charge: f64,
}

struct Bdf {
    a: f64,
    hist: (f64, f64),
    extrap: (f64, f64),
    hist_r: (f64, f64),
}

const BDF1: Bdf = Bdf { a: 1.0, hist: (1.0, 0.0), extrap: (1.0, 0.0), hist_r: (1.0, 0.0) };
const BDF2: Bdf = Bdf { a: 1.5, hist: (2.0, -0.5), extrap: (2.0, -1.0), hist_r: (2.0, -0.5) };

enum PotentialSolver {
    ZeroMean(ZeroMeanSystem),
    Dirichlet { system: PreparedSystem, dofs: Vec<usize>, values: Vec<f64> },
}

/// Time-stepping driver owning the discretization and the two most recent
/// time levels.
pub struct Simulation {
    pub disc: Discretization,
    pub params: Params,
    pub opts: SchemeOptions,
    /// SAV shift `B`.
    pub b_shift: f64,
    pub prev: Level,
    pub curr: Level,
    pub steps_done: usize,
    /// Masses of the initial concentrations.
    pub initial_mass: Vec<f64>,
    /// Two-level discrete energy of the initial state.
    pub e_h0: f64,
    forcing: Option<Box<dyn Forcing>>,
    potential: PotentialSolver,
    pressure: ZeroMeanSystem,
    velocity_dofs: Vec<usize>,
    scalar_symbolic: Option<LuSymbolic>,
    vector_symbolic: Option<LuSymbolic>,
}

fn solver_err(step: usize, stage: &'static str) -> impl Fn(FemError) -> SchemeError {
    move |source| match source {
        FemError::Incompatible { integral, tolerance } => SchemeError::Structural {
            step,
            quantity: "charge compatibility",
            message: format!("net charge {integral:.3e} exceeds tolerance {tolerance:.3e}"),
        },
        source => SchemeError::Solver { step, stage, source },
    }
}

fn model_err(step: usize) -> impl Fn(ModelError) -> SchemeError {
    move |e| SchemeError::Structural { step, quantity: "positivity", message: e.to_string() }
}

fn sum_qp(a: &[f64], wa: f64, b: &[f64], wb: f64) -> QpScalar {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

fn sum_qp_vec(a: &[[f64; 2]], wa: f64, b: &[[f64; 2]], wb: f64) -> QpVector {
    a.iter().zip(b).map(|(x, y)| [wa * x[0] + wb * y[0], wa * x[1] + wb * y[1]]).collect()
}

fn dot_qp(disc: &Discretization, a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).zip(&disc.jxw).map(|((x, y), w)| w * (x[0] * y[0] + x[1] * y[1])).sum()
}

/// `(u . grad) u` at quadrature points.
fn convection(u: &[[f64; 2]], g: &[[[f64; 2]; 2]]) -> QpVector {
    u.iter()
        .zip(g)
        .map(|(u, g)| [u[0] * g[0][0] + u[1] * g[0][1], u[0] * g[1][0] + u[1] * g[1][1]])
        .collect()
}

impl Simulation {
    pub fn new(
        disc: Discretization,
        params: Params,
        opts: SchemeOptions,
        init: &InitialData,
        forcing: Option<Box<dyn Forcing>>,
    ) -> Result<Self, SchemeError> {
        params.validate()?;
        let n = params.n_species();
        if init.c0.len() != n {
            return Err(SchemeError::Setup(format!("{} initial concentrations for {n} species", init.c0.len())));
        }
        let potential = Self::build_potential(&disc, &params, &opts).map_err(solver_err(0, "potential setup"))?;
        let kp = disc
            .assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P1, SpaceKind::P1)
            .map_err(solver_err(0, "pressure setup"))?;
        let pressure = ZeroMeanSystem::new(&kp, &disc.basis_integrals(SpaceKind::P1), opts.solver)
            .map_err(solver_err(0, "pressure setup"))?;
        let nv = disc.n_dofs(SpaceKind::P2);
        let velocity_dofs: Vec<usize> =
            disc.p2.dofmap.boundary_dofs.iter().flat_map(|&d| [d, nv + d]).collect();

        // initial concentrations
        let mut sigma = Vec::with_capacity(n);
        let mut scale = Vec::with_capacity(n);
        let mut c_qp = Vec::with_capacity(n);
        for (i, c0) in init.c0.iter().enumerate() {
            let exact: QpScalar = disc.qp_points.iter().map(|p| c0(p[0], p[1])).collect();
            if let Some(bad) = exact.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(SchemeError::Setup(format!("initial concentration {i} not positive: {bad}")));
            }
            let s = disc.interpolate(SpaceKind::P2, |x, y| c0(x, y).ln());
            let es: QpScalar = disc.eval_qp(&s).map_err(solver_err(0, "init"))?.iter().map(|v| v.exp()).collect();
            let k = disc.integrate_qp(&exact) / disc.integrate_qp(&es);
            c_qp.push(es.iter().map(|v| k * v).collect::<QpScalar>());
            sigma.push(s);
            scale.push(k);
        }
        let u = Velocity { nodal: disc.interpolate_vec(|x, y| (init.u0)(x, y)), correction: vec![[0.0; 2]; disc.n_cells()] };
        let mut p = match &init.p0 {
            Some(f) => disc.interpolate(SpaceKind::P1, f),
            None => Field::zeros(&disc, SpaceKind::P1),
        };
        disc.remove_mean(&mut p).map_err(solver_err(0, "init"))?;

        let mut sim = Self {
            initial_mass: c_qp.iter().map(|c| disc.integrate_qp(c)).collect(),
            curr: Level {
                t: 0.0,
                u,
                p,
                sigma,
                scale,
                c_qp,
                vbar: Field::zeros(&disc, SpaceKind::P2),
                v: Field::zeros(&disc, SpaceKind::P2),
                mu: Vec::new(),
                r: 0.0,
                xi: 1.0,
                e_spnp: 0.0,
            },
            prev: Level {
                t: 0.0,
                u: Velocity { nodal: Field::zeros(&disc, SpaceKind::P2Vec), correction: Vec::new() },
                p: Field::zeros(&disc, SpaceKind::P1),
                sigma: Vec::new(),
                scale: Vec::new(),
                c_qp: Vec::new(),
                vbar: Field::zeros(&disc, SpaceKind::P2),
                v: Field::zeros(&disc, SpaceKind::P2),
                mu: Vec::new(),
                r: 0.0,
                xi: 1.0,
                e_spnp: 0.0,
            },
            disc,
            params,
            opts,
            b_shift: 0.0,
            steps_done: 0,
            e_h0: 0.0,
            forcing,
            potential,
            pressure,
            velocity_dofs,
            scalar_symbolic: None,
            vector_symbolic: None,
        };
        let (vbar, sub) = sim.solve_potential(0, &sim.curr.c_qp, 0.0)?;
        if sub != 0.0 {
            log::info!("initial potential solve: subtracted mean charge density {sub:.6e}");
        }
        let gv = sim.disc.eval_grad_qp(&vbar).map_err(solver_err(0, "init"))?;
        let e0 = energy_spnp(&sim.disc, &sim.curr.c_qp, &gv, &sim.params).map_err(model_err(0))?;
        sim.b_shift = sim.params.b.unwrap_or(1.0 + (-e0).max(0.0));
        if e0 + sim.b_shift <= 0.0 {
            return Err(SchemeError::Structural {
                step: 0,
                quantity: "SAV radicand",
                message: format!("E + B = {} is not positive", e0 + sim.b_shift),
            });
        }
        let ug = sim.curr.u.grad_qp(&sim.disc).map_err(solver_err(0, "init"))?;
        sim.curr.mu = ug.iter().map(|g| carreau_viscosity(shear_rate_sq(g), &sim.params)).collect();
        sim.curr.r = (e0 + sim.b_shift).sqrt();
        sim.curr.e_spnp = e0;
        sim.curr.v = vbar.clone();
        sim.curr.vbar = vbar;
        sim.prev = sim.curr.clone();
        sim.e_h0 = sim.energy_two_level().map_err(solver_err(0, "init"))?.total();
        Ok(sim)
    }

    fn build_potential(
        disc: &Discretization,
        params: &Params,
        opts: &SchemeOptions,
    ) -> Result<PotentialSolver, FemError> {
        let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(params.lambda))], SpaceKind::P2, SpaceKind::P2)?;
        match opts.potential_bc {
            PotentialBc::ZeroMean => Ok(PotentialSolver::ZeroMean(ZeroMeanSystem::new(
                &k,
                &disc.basis_integrals(SpaceKind::P2),
                opts.solver,
            )?)),
            PotentialBc::DirichletLr => {
                let left = disc.p2.dofmap.dofs_on(Side::Left);
                let right = disc.p2.dofmap.dofs_on(Side::Right);
                let dofs: Vec<usize> = left.iter().chain(&right).copied().collect();
                let values: Vec<f64> = left.iter().map(|_| 1.0).chain(right.iter().map(|_| 0.0)).collect();
                let mut k = k;
                let mut dummy = vec![0.0; k.n_rows];
                apply_dirichlet(&mut k, &mut dummy, &dofs, &values, false)?;
                Ok(PotentialSolver::Dirichlet { system: PreparedSystem::new(k, opts.solver, false)?, dofs, values })
            }
        }
    }

    pub fn is_manufactured(&self) -> bool {
        self.forcing.is_some()
    }

    /// Number of steps needed to reach `T`.
    pub fn total_steps(&self) -> usize {
        ((self.params.t_final / self.params.dt) - 1e-9).ceil().max(0.0) as usize
    }

    /// Two-level discrete energy of (`curr`, `prev`).
    pub fn energy_two_level(&self) -> Result<EnergyParts, FemError> {
        let un = self.curr.u.eval_qp(&self.disc)?;
        let uo = self.prev.u.eval_qp(&self.disc)?;
        let gp = self.disc.cell_gradients_p1(&self.curr.p)?;
        Ok(discrete_energy(&self.disc, &un, &uo, &gp, self.curr.r, self.prev.r, self.params.dt))
    }

    fn energy_first_order(&self, level: &Level) -> Result<EnergyParts, FemError> {
        let u = level.u.eval_qp(&self.disc)?;
        let gp = self.disc.cell_gradients_p1(&level.p)?;
        Ok(first_order_energy(&self.disc, &u, &gp, level.r, self.params.dt))
    }

    /// Diagnostics of the current level (dissipation terms zero).
    pub fn initial_record(&self) -> DiagnosticsRecord {
        let n = self.params.n_species();
        DiagnosticsRecord {
            t: self.curr.t,
            e_h: self.e_h0,
            e_spnp: self.curr.e_spnp,
            mass: (0..n).map(|i| self.curr.mass(&self.disc, i)).collect(),
            min_c: (0..n).map(|i| min_concentration(&self.curr.c_qp[i], &self.curr.c_nodal(i))).collect(),
            xi: self.curr.xi,
            r: self.curr.r,
            visc_dissip: 0.0,
            ionic_dissip: 0.0,
        }
    }

    fn solve_potential(&self, step: usize, c: &[QpScalar], t: f64) -> Result<(Field, f64), SchemeError> {
        let disc = &self.disc;
        let mut rho: QpScalar = vec![0.0; disc.n_qp()];
        for (i, ci) in c.iter().enumerate() {
            let z = self.params.zf(i);
            rho.iter_mut().zip(ci).for_each(|(r, v)| *r += z * v);
        }
        if let Some(f) = &self.forcing {
            rho.iter_mut().zip(&disc.qp_points).for_each(|(r, p)| *r += f.f_v(p[0], p[1], t));
        }
        let b = disc
            .assemble_vector(&[LinearTerm::Source(Coef::Qp(&rho))], SpaceKind::P2)
            .map_err(solver_err(step, "potential"))?;
        match &self.potential {
            PotentialSolver::ZeroMean(sys) => {
                let (x, sub) = sys.solve(&b, self.opts.charge_policy).map_err(solver_err(step, "potential"))?;
                Ok((Field { space: SpaceKind::P2, coeffs: x }, sub))
            }
            PotentialSolver::Dirichlet { system, dofs, values } => {
                let mut b = b;
                for (&d, &v) in dofs.iter().zip(values) {
                    b[d] = v;
                }
                let (x, _) = system.solve(&b).map_err(solver_err(step, "potential"))?;
                Ok((Field { space: SpaceKind::P2, coeffs: x }, 0.0))
            }
        }
    }

    fn factor(
        symbolic: &mut Option<LuSymbolic>,
        a: crate::sparse::CsrMatrix,
        choice: SolverChoice,
        spd: bool,
    ) -> Result<PreparedSystem, FemError> {
        match choice {
            SolverChoice::Direct => {
                if symbolic.as_ref().is_none_or(|s| !s.matches(&a)) {
                    *symbolic = Some(LuSymbolic::new(&a)?);
                }
                let lu = LuFactorization::with_symbolic(symbolic.as_ref().unwrap(), &a)?;
                Ok(PreparedSystem::from_lu(a, lu))
            }
            SolverChoice::Iterative { .. } => PreparedSystem::new(a, choice, spd),
        }
    }

    /// Advances one step (Steps 1-8). The first call performs the one-step start.
    pub fn step(&mut self) -> Result<StepReport, SchemeError> {
        let step = self.steps_done + 1;
        let bdf = if self.steps_done == 0 { BDF1 } else { BDF2 };
        let p = self.params.clone();
        let dt = p.dt;
        let t_new = self.curr.t + dt;
        let n = p.n_species();
        let disc = &self.disc;
        let (cur, old) = (&self.curr, &self.prev);
        let (e0, e1) = bdf.extrap;
        let (h0, h1) = bdf.hist;
        let e = solver_err(step, "evaluation");

        // extrapolated quantities
        let u_cur = cur.u.eval_qp(disc).map_err(&e)?;
        let u_old = old.u.eval_qp(disc).map_err(&e)?;
        let u_star = sum_qp_vec(&u_cur, e0, &u_old, e1);
        let u_star_field = cur.u.combine(e0, &old.u, e1);
        let grad_u_star = u_star_field.grad_qp(disc).map_err(&e)?;
        let conv = convection(&u_star, &grad_u_star);
        let c_star: Vec<QpScalar> = (0..n).map(|i| sum_qp(&cur.c_qp[i], e0, &old.c_qp[i], e1)).collect();
        let grad_sigma_star: Vec<QpVector> = (0..n)
            .map(|i| disc.eval_grad_qp(&cur.sigma[i].combine(e0, &old.sigma[i], e1)))
            .collect::<Result<_, _>>()
            .map_err(&e)?;
        let grad_v_star = disc.eval_grad_qp(&cur.v.combine(e0, &old.v, e1)).map_err(&e)?;
        let mut mu_star = sum_qp(&cur.mu, e0, &old.mu, e1);
        if self.opts.clamp_viscosity {
            mu_star.iter_mut().for_each(|m| *m = m.max(p.mu_inf));
        }

        // Step 1: log-concentrations
        let d_sigma = if self.opts.sigma_diffusion_coeff_one { 1.0 } else { 1.0 / p.pe };
        let sigma_mats: Vec<(crate::sparse::CsrMatrix, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<_, FemError> {
                let zi = p.zf(i);
                let mut b = vec![[0.0; 2]; disc.n_qp()];
                let mut g = vec![[0.0; 2]; disc.n_qp()];
                for q in 0..disc.n_qp() {
                    let mut drift = [
                        grad_sigma_star[i][q][0] + zi * grad_v_star[q][0],
                        grad_sigma_star[i][q][1] + zi * grad_v_star[q][1],
                    ];
                    let mut cross = [-zi * grad_v_star[q][0], -zi * grad_v_star[q][1]];
                    for j in 0..n {
                        let wc = p.w[i][j] * c_star[j][q];
                        drift[0] += wc * grad_sigma_star[j][q][0];
                        drift[1] += wc * grad_sigma_star[j][q][1];
                        if j != i {
                            cross[0] -= wc * grad_sigma_star[j][q][0];
                            cross[1] -= wc * grad_sigma_star[j][q][1];
                        }
                    }
                    b[q] = [u_star[q][0] - drift[0] / p.pe, u_star[q][1] - drift[1] / p.pe];
                    g[q] = [cross[0] / p.pe, cross[1] / p.pe];
                }
                let kappa: QpScalar = c_star[i].iter().map(|c| d_sigma + p.w[i][i] * c / p.pe).collect();
                let a = disc.assemble(
                    &[
                        BilinearTerm::Mass(Coef::Const(bdf.a / dt)),
                        BilinearTerm::Advection(VecCoef::Qp(&b)),
                        BilinearTerm::Stiffness(Coef::Qp(&kappa)),
                    ],
                    SpaceKind::P2,
                    SpaceKind::P2,
                )?;
                let hist = cur.sigma[i].combine(h0, &old.sigma[i], h1).scaled(1.0 / dt);
                let mut src = disc.eval_qp(&hist)?;
                if let Some(f) = &self.forcing {
                    src.iter_mut().zip(&disc.qp_points).for_each(|(s, x)| *s += f.f_sigma(i, x[0], x[1], t_new));
                }
                let rhs =
                    disc.assemble_vector(&[LinearTerm::Source(Coef::Qp(&src)), LinearTerm::GradSource(VecCoef::Qp(&g))], SpaceKind::P2)?;
                Ok((a, rhs))
            })
            .collect::<Result<_, _>>()
            .map_err(solver_err(step, "sigma assembly"))?;
        let mut sigma_new = Vec::with_capacity(n);
        for (a, rhs) in sigma_mats {
            let sys = Self::factor(&mut self.scalar_symbolic, a, self.opts.solver, false)
                .map_err(solver_err(step, "sigma"))?;
            let (x, _) = sys.solve(&rhs).map_err(solver_err(step, "sigma"))?;
            sigma_new.push(Field { space: SpaceKind::P2, coeffs: x });
        }
        let disc = &self.disc;
        let cur = &self.curr;

        // Step 2: exponentiate and renormalize the mass
        let mut scale_new = Vec::with_capacity(n);
        let mut c_new = Vec::with_capacity(n);
        for i in 0..n {
            let cbar: QpScalar = disc.eval_qp(&sigma_new[i]).map_err(&e)?.iter().map(|s| s.exp()).collect();
            let target = match &self.forcing {
                Some(f) => disc.integrate_fn(|x, y| f.c_exact(i, x, y, t_new)),
                None => cur.mass(disc, i),
            };
            let k = target / disc.integrate_qp(&cbar);
            if !k.is_finite() || cbar.iter().any(|v| !v.is_finite()) {
                return Err(SchemeError::Structural {
                    step,
                    quantity: "concentration",
                    message: format!("exp(sigma) of species {i} overflowed"),
                });
            }
            c_new.push(cbar.iter().map(|v| k * v).collect::<QpScalar>());
            scale_new.push(k);
        }

        // Step 3: potential
        let (vbar, subtracted_charge) = self.solve_potential(step, &c_new, t_new)?;
        if subtracted_charge != 0.0 {
            log::info!("step {step}: subtracted mean charge density {subtracted_charge:.6e}");
        }
        let grad_vbar = disc.eval_grad_qp(&vbar).map_err(&e)?;

        // Step 4: split momentum
        let two_mu: QpScalar = mu_star.iter().map(|m| 2.0 * m / p.re).collect();
        let mut kmat = disc
            .assemble(
                &[BilinearTerm::VectorMass(Coef::Const(bdf.a / dt)), BilinearTerm::Deformation(Coef::Qp(&two_mu))],
                SpaceKind::P2Vec,
                SpaceKind::P2Vec,
            )
            .map_err(solver_err(step, "momentum assembly"))?;
        let k_raw = if self.opts.check_identities { Some(kmat.clone()) } else { None };
        let hist_u: QpVector = u_cur.iter().zip(&u_old).map(|(a, b)| [(h0 * a[0] + h1 * b[0]) / dt, (h0 * a[1] + h1 * b[1]) / dt]).collect();
        let mut f1 = hist_u;
        if let Some(f) = &self.forcing {
            f1.iter_mut().zip(&disc.qp_points).for_each(|(s, x)| {
                let v = f.f_u(x[0], x[1], t_new);
                s[0] += v[0];
                s[1] += v[1];
            });
        }
        let p_cur = disc.eval_qp(&cur.p).map_err(&e)?;
        let mut force = vec![[0.0; 2]; disc.n_qp()];
        for q in 0..disc.n_qp() {
            let mut rho = 0.0;
            for i in 0..n {
                rho += p.zf(i) * c_new[i][q];
            }
            force[q] = [p.co * rho * grad_vbar[q][0], p.co * rho * grad_vbar[q][1]];
        }
        let f2: QpVector = conv.iter().zip(&force).map(|(a, b)| [-a[0] - b[0], -a[1] - b[1]]).collect();
        let mut rhs1 = disc
            .assemble_vector(&[LinearTerm::VecSource(VecCoef::Qp(&f1)), LinearTerm::DivSource(Coef::Qp(&p_cur))], SpaceKind::P2Vec)
            .map_err(solver_err(step, "momentum assembly"))?;
        let mut rhs2 =
            disc.assemble_vector(&[LinearTerm::VecSource(VecCoef::Qp(&f2))], SpaceKind::P2Vec).map_err(solver_err(step, "momentum assembly"))?;
        let rhs1_raw = rhs1.clone();
        let rhs2_raw = rhs2.clone();
        let zeros = vec![0.0; self.velocity_dofs.len()];
        {
            let mut dummy = vec![0.0; kmat.n_rows];
            apply_dirichlet(&mut kmat, &mut dummy, &self.velocity_dofs, &zeros, true).map_err(solver_err(step, "momentum"))?;
        }
        for &d in &self.velocity_dofs {
            rhs1[d] = 0.0;
            rhs2[d] = 0.0;
        }
        let ksys = Self::factor(&mut self.vector_symbolic, kmat, self.opts.solver, true).map_err(solver_err(step, "momentum"))?;
        let disc = &self.disc;
        let (cur, old) = (&self.curr, &self.prev);
        let (u1, _) = ksys.solve(&rhs1).map_err(solver_err(step, "momentum"))?;
        let (u2, _) = ksys.solve(&rhs2).map_err(solver_err(step, "momentum"))?;
        let u1 = Field { space: SpaceKind::P2Vec, coeffs: u1 };
        let u2 = Field { space: SpaceKind::P2Vec, coeffs: u2 };
        let u1q = disc.eval_vec_qp(&u1).map_err(&e)?;
        let u2q = disc.eval_vec_qp(&u2).map_err(&e)?;

        // Step 5: xi
        let e_bar = energy_spnp(disc, &c_new, &grad_vbar, &p).map_err(model_err(step))?;
        let radicand = e_bar + self.b_shift;
        if !(radicand > 0.0) {
            return Err(SchemeError::Structural {
                step,
                quantity: "SAV radicand",
                message: format!("E + B = {radicand:e} is not positive"),
            });
        }
        let s = radicand.sqrt();
        let coupling: QpVector = force.iter().zip(&conv).map(|(a, b)| [a[0] + b[0], a[1] + b[1]]).collect();
        let mut n1 = dot_qp(disc, &coupling, &u1q);
        let n2 = dot_qp(disc, &coupling, &u2q);
        let gbar = chemical_potential_bar(&c_new, &disc.eval_qp(&vbar).map_err(&e)?, &p).map_err(model_err(step))?;
        let grad_sigma_new: Vec<QpVector> =
            sigma_new.iter().map(|f| disc.eval_grad_qp(f)).collect::<Result<_, _>>().map_err(&e)?;
        let mut g_sum = 0.0;
        for i in 0..n {
            let zi = p.zf(i);
            for q in 0..disc.n_qp() {
                // grad g_i = grad sigma_i + z_i grad Vbar + sum_j w_ij c_j grad sigma_j
                let mut g = [
                    grad_sigma_new[i][q][0] + zi * grad_vbar[q][0],
                    grad_sigma_new[i][q][1] + zi * grad_vbar[q][1],
                ];
                for j in 0..n {
                    let wc = p.w[i][j] * c_new[j][q];
                    g[0] += wc * grad_sigma_new[j][q][0];
                    g[1] += wc * grad_sigma_new[j][q][1];
                }
                g_sum += disc.jxw[q] * c_new[i][q] * (g[0] * g[0] + g[1] * g[1]);
            }
        }
        let g_sum = p.co / p.pe * g_sum;
        if let Some(f) = &self.forcing {
            for (i, gi) in gbar.iter().enumerate() {
                let fc: QpScalar = disc.qp_points.iter().map(|x| f.f_c(i, x[0], x[1], t_new)).collect();
                n1 += p.co * fc.iter().zip(gi).zip(&disc.jxw).map(|((a, b), w)| w * a * b).sum::<f64>();
            }
        }
        let zeta1 = n1 / (2.0 * s);
        let zeta2 = (g_sum - n2) / (2.0 * s);
        if zeta2 < -1e-12 {
            return Err(SchemeError::Structural { step, quantity: "zeta2", message: format!("zeta2 = {zeta2:e} < 0") });
        }
        let denominator = bdf.a * s + dt * zeta2;
        if !(denominator > 0.0) {
            return Err(SchemeError::Structural {
                step,
                quantity: "xi denominator",
                message: format!("denominator {denominator:e} not positive"),
            });
        }
        let xi = (bdf.hist_r.0 * cur.r + bdf.hist_r.1 * old.r + dt * zeta1) / denominator;
        if !xi.is_finite() {
            return Err(SchemeError::Structural { step, quantity: "xi", message: format!("xi = {xi}") });
        }

        // Step 6
        let r_new = xi * s;
        let v_new = match self.opts.potential_bc {
            PotentialBc::DirichletLr if !self.opts.xi_scales_dirichlet_potential => vbar.clone(),
            _ => vbar.scaled(xi),
        };
        let u_tilde = u1.combine(1.0, &u2, xi);
        let ut_q = sum_qp_vec(&u1q, 1.0, &u2q, xi);

        let split_residual = match k_raw {
            Some(k) => {
                let ku = k.spmv(&u_tilde.coeffs).map_err(|s| solver_err(step, "check")(s.into()))?;
                let mut num = 0.0;
                let mut den = 0.0;
                let mut fixed = vec![false; ku.len()];
                self.velocity_dofs.iter().for_each(|&d| fixed[d] = true);
                for d in 0..ku.len() {
                    if fixed[d] {
                        continue;
                    }
                    let r = rhs1_raw[d] + xi * rhs2_raw[d];
                    num += (ku[d] - r).powi(2);
                    den += r * r;
                }
                Some(num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE))
            }
            None => None,
        };

        // Step 7: pressure increment
        let psi_src: QpVector = ut_q.iter().map(|v| [bdf.a / dt * v[0], bdf.a / dt * v[1]]).collect();
        let bpsi = disc
            .assemble_vector(&[LinearTerm::GradSource(VecCoef::Qp(&psi_src))], SpaceKind::P1)
            .map_err(solver_err(step, "pressure"))?;
        let (psi, _) = self.pressure.solve(&bpsi, CompatibilityPolicy::Strict).map_err(solver_err(step, "pressure"))?;
        let psi = Field { space: SpaceKind::P1, coeffs: psi };

        // Step 8: projection, pressure and viscosity update
        let gpsi = disc.cell_gradients_p1(&psi).map_err(&e)?;
        let u_new = Velocity {
            nodal: u_tilde.clone(),
            correction: gpsi.iter().map(|g| [-dt / bdf.a * g[0], -dt / bdf.a * g[1]]).collect(),
        };
        let mut p_new = cur.p.combine(1.0, &psi, 1.0);
        disc.remove_mean(&mut p_new).map_err(&e)?;
        let grad_ut = disc.eval_vec_grad_qp(&u_tilde).map_err(&e)?;
        let mu_new: QpScalar = grad_ut.iter().map(|g| carreau_viscosity(shear_rate_sq(g), &p)).collect();

        let divergence_residual = if self.opts.check_identities {
            let uq = u_new.eval_qp(disc).map_err(&e)?;
            let d = disc
                .assemble_vector(&[LinearTerm::GradSource(VecCoef::Qp(&uq))], SpaceKind::P1)
                .map_err(&e)?;
            Some(d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        } else {
            None
        };

        // dissipation terms
        let mut visc = 0.0;
        for q in 0..disc.n_qp() {
            let g = &grad_ut[q];
            visc += disc.jxw[q] * 2.0 * mu_star[q] * 0.5 * shear_rate_sq(g);
        }
        let visc = visc / p.re;
        let ionic = xi * xi * g_sum;

        let new_level = Level {
            t: t_new,
            u: u_new,
            p: p_new,
            sigma: sigma_new,
            scale: scale_new,
            c_qp: c_new,
            vbar,
            v: v_new,
            mu: mu_new,
            r: r_new,
            xi,
            e_spnp: e_bar,
        };
        let bootstrap = self.steps_done == 0;
        let before = if bootstrap {
            self.energy_first_order(&self.curr).map_err(&e)?.total()
        } else {
            self.energy_two_level().map_err(&e)?.total()
        };
        let old_level = std::mem::replace(&mut self.curr, new_level);
        self.prev = old_level;
        self.steps_done += 1;
        let after_first = if bootstrap { Some(self.energy_first_order(&self.curr).map_err(&e)?.total()) } else { None };
        let e_h = self.energy_two_level().map_err(&e)?.total();
        let energy_increment = after_first.unwrap_or(e_h) - before;

        let record = DiagnosticsRecord {
            t: t_new,
            e_h,
            e_spnp: e_bar,
            mass: (0..n).map(|i| self.curr.mass(&self.disc, i)).collect(),
            min_c: (0..n).map(|i| min_concentration(&self.curr.c_qp[i], &self.curr.c_nodal(i))).collect(),
            xi,
            r: r_new,
            visc_dissip: visc,
            ionic_dissip: ionic,
        };
        self.check_structure(step, &record, energy_increment)?;
        Ok(StepReport {
            step,
            record,
            zeta1,
            zeta2,
            denominator,
            energy_increment,
            dissipation: dt * (visc + ionic),
            divergence_residual,
            split_residual,
            subtracted_charge,
        })
    }

    fn check_structure(&self, step: usize, rec: &DiagnosticsRecord, increment: f64) -> Result<(), SchemeError> {
        for (i, &m) in rec.min_c.iter().enumerate() {
            if !(m > 0.0) {
                return Err(SchemeError::Structural {
                    step,
                    quantity: "positivity",
                    message: format!("min concentration of species {i} is {m:e}"),
                });
            }
        }
        if self.opts.check_mass && self.forcing.is_none() {
            for (i, (&m, &m0)) in rec.mass.iter().zip(&self.initial_mass).enumerate() {
                if (m - m0).abs() > 1e-10 * m0.abs() {
                    return Err(SchemeError::Structural {
                        step,
                        quantity: "mass",
                        message: format!("species {i} mass {m} drifted from {m0}"),
                    });
                }
            }
        }
        if self.opts.check_energy && self.forcing.is_none() && increment > 1e-10 * self.e_h0.abs() {
            let message = format!("discrete energy increased by {increment:e}");
            if self.opts.strict_energy {
                return Err(SchemeError::Structural { step, quantity: "energy", message });
            }
            log::warn!("step {step}: {message}");
        }
        Ok(())
    }

    /// Runs to the final time, calling `observer` after every step.
    pub fn run(
        &mut self,
        mut observer: impl FnMut(&Simulation, &StepReport) -> Result<(), SchemeError>,
    ) -> Result<Vec<DiagnosticsRecord>, SchemeError> {
        let mut records = vec![self.initial_record()];
        for _ in self.steps_done..self.total_steps() {
            let rep = self.step()?;
            observer(self, &rep)?;
            records.push(rep.record);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manufactured::manufactured_params;

    fn params(dt: f64, steps: usize) -> Params {
        Params { dt, t_final: dt * steps as f64, ..manufactured_params() }
    }

    fn uniform(u0: VectorFn) -> InitialData {
        InitialData { c0: vec![Box::new(|_, _| 1.0), Box::new(|_, _| 1.0)], u0, p0: None }
    }

    fn sim(n: usize, p: Params, init: &InitialData, opts: SchemeOptions) -> Simulation {
        Simulation::new(Discretization::unit_square(n).unwrap(), p, opts, init, None).unwrap()
    }

    fn cell_flow(x: f64, y: f64) -> [f64; 2] {
        use std::f64::consts::PI;
        let (sx, sy) = ((PI * x).sin(), (PI * y).sin());
        [sx * sx * (2.0 * PI * y).sin(), -(2.0 * PI * x).sin() * sy * sy]
    }

    fn ion_pair() -> InitialData {
        use std::f64::consts::PI;
        InitialData {
            c0: vec![
                Box::new(|x, y| 1.2 + (PI * x).cos() * (PI * y).cos()),
                Box::new(|x, y| 1.2 - (PI * x).cos() * (PI * y).cos()),
            ],
            u0: Box::new(|_, _| [0.0, 0.0]),
            p0: None,
        }
    }

    #[test]
    fn neutral_rest_state_is_stationary() {
        let mut s = sim(4, params(0.05, 5), &uniform(Box::new(|_, _| [0.0, 0.0])), SchemeOptions::default());
        s.run(|s, rep| {
            assert!((rep.record.xi - 1.0).abs() < 1e-12, "xi = {}", rep.record.xi);
            assert!(s.curr.u.nodal.coeffs.iter().all(|v| v.abs() < 1e-14));
            assert!(s.curr.u.correction.iter().all(|v| v[0].abs() < 1e-14 && v[1].abs() < 1e-14));
            for c in &s.curr.c_qp {
                assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
            }
            assert!(s.curr.vbar.coeffs.iter().all(|v| v.abs() < 1e-12));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn unit_power_index_keeps_newtonian_viscosity() {
        let p = Params { k: 1.0, ..params(0.02, 3) };
        let mut s = sim(4, p, &uniform(Box::new(cell_flow)), SchemeOptions::default());
        s.run(|s, _| {
            assert!(s.curr.mu.iter().all(|&m| m == s.params.mu0));
            Ok(())
        })
        .unwrap();
        assert!(s.curr.u.nodal.coeffs.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn flow_decays_and_xi_stays_near_one() {
        let opts = SchemeOptions { strict_energy: true, check_identities: true, ..Default::default() };
        let mut s = sim(6, params(0.01, 10), &uniform(Box::new(cell_flow)), opts);
        let e0 = s.initial_record().e_h;
        let recs = s
            .run(|_, rep| {
                assert!(rep.energy_increment <= 1e-10 * e0.abs(), "increment {}", rep.energy_increment);
                assert!(rep.zeta2 >= -1e-12);
                assert!(rep.divergence_residual.unwrap() < 1e-9);
                assert!(rep.split_residual.unwrap() < 1e-9);
                Ok(())
            })
            .unwrap();
        assert!(recs.last().unwrap().e_h < e0);
        assert!(recs.iter().all(|r| (r.xi - 1.0).abs() < 0.05));
    }

    #[test]
    fn renormalization_conserves_mass_of_nonuniform_ions() {
        let mut s = sim(6, params(0.01, 5), &ion_pair(), SchemeOptions::default());
        let m0 = s.initial_mass.clone();
        let recs = s.run(|_, _| Ok(())).unwrap();
        for r in &recs {
            for (m, m0) in r.mass.iter().zip(&m0) {
                assert!((m - m0).abs() <= 1e-12 * m0);
            }
            assert!(r.min_c.iter().all(|&c| c > 0.0));
        }
        // exp of a P2 field has the wrong mass; the scale factor restores it
        assert!(s.curr.scale.iter().all(|k| k.is_finite() && *k > 0.0 && (k - 1.0).abs() > 1e-14));
    }

    #[test]
    fn rejects_mismatched_initial_data() {
        let one = InitialData { c0: vec![Box::new(|_, _| 1.0)], u0: Box::new(|_, _| [0.0, 0.0]), p0: None };
        let r = Simulation::new(Discretization::unit_square(2).unwrap(), params(0.1, 1), SchemeOptions::default(), &one, None);
        assert!(matches!(r, Err(SchemeError::Setup(_))));
        let neg = InitialData {
            c0: vec![Box::new(|_, _| 1.0), Box::new(|_, _| -1.0)],
            u0: Box::new(|_, _| [0.0, 0.0]),
            p0: None,
        };
        let r = Simulation::new(Discretization::unit_square(2).unwrap(), params(0.1, 1), SchemeOptions::default(), &neg, None);
        assert!(matches!(r, Err(SchemeError::Setup(_))));
    }

    #[test]
    fn negative_radicand_is_structural() {
        // the entropy of c near 1.2 is negative, so a tiny shift leaves E + B < 0
        let p = Params { b: Some(1e-3), ..params(0.1, 1) };
        let r = Simulation::new(Discretization::unit_square(3).unwrap(), p, SchemeOptions::default(), &ion_pair(), None);
        match r {
            Err(e @ SchemeError::Structural { .. }) => assert_eq!(e.exit_code(), 2),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("accepted a negative radicand"),
        }
    }
}
