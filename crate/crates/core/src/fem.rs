//! Lagrange P1/P2 elements on triangles: quadrature, basis tabulation,
//! quadrature-point evaluation of fields and generic assembly of the
//! bilinear and linear forms the scheme needs.
//!
//! Vector fields live on the P2 space with component-blocked coefficients
//! `[u_x (n dofs) | u_y (n dofs)]`. Nonlinear coefficients are passed to
//! the assembler as values at quadrature points, indexed `cell * nq + q`.

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{build_rect_mesh, dof_map, DofMap, Mesh, MeshError};
use crate::sparse::{CsrMatrix, LuFactorization, SolveReport, SolverChoice, SparseError, TripletBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible right-hand side: integral {integral:.3e} exceeds tolerance {tolerance:.3e}")]
    Incompatible { integral: f64, tolerance: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Symmetric quadrature rule on the reference triangle.
#[derive(Clone, Debug)]
pub struct QuadRule {
    /// Barycentric coordinates of the points.
    pub points: Vec<[f64; 3]>,
    /// Positive weights summing to the reference area 1/2.
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn orbit3(a: f64) -> [[f64; 3]; 3] {
    let b = 1.0 - 2.0 * a;
    [[a, a, b], [a, b, a], [b, a, a]]
}

fn orbit6(a: f64, b: f64) -> [[f64; 3]; 6] {
    let c = 1.0 - a - b;
    [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

/// Smallest tabulated symmetric rule exact for polynomials of `min_degree`.
pub fn quad_rule(min_degree: usize) -> Result<QuadRule, FemError> {
    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let degree = match min_degree {
        0 | 1 => {
            points.push([1.0 / 3.0; 3]);
            weights.push(1.0);
            1
        }
        2 => {
            points.extend(orbit3(1.0 / 6.0));
            weights.extend([1.0 / 3.0; 3]);
            2
        }
        3 | 4 => {
            points.extend(orbit3(0.445_948_490_915_964_9));
            weights.extend([0.223_381_589_678_011_47; 3]);
            points.extend(orbit3(0.091_576_213_509_770_74));
            weights.extend([0.109_951_743_655_321_87; 3]);
            4
        }
        5 => {
            let s15 = 15f64.sqrt();
            points.push([1.0 / 3.0; 3]);
            weights.push(0.225);
            points.extend(orbit3((6.0 - s15) / 21.0));
            weights.extend([(155.0 - s15) / 1200.0; 3]);
            points.extend(orbit3((6.0 + s15) / 21.0));
            weights.extend([(155.0 + s15) / 1200.0; 3]);
            5
        }
        6 => {
            points.extend(orbit3(0.063_089_014_491_502_23));
            weights.extend([0.050_844_906_370_206_82; 3]);
            points.extend(orbit3(0.249_286_745_170_910_43));
            weights.extend([0.116_786_275_726_379_37; 3]);
            points.extend(orbit6(
                0.053_145_049_844_816_945,
                0.310_352_451_033_784_4,
            ));
            weights.extend([0.082_851_075_618_373_57; 6]);
            6
        }
        d => return Err(FemError::InvalidArgument(format!("no quadrature rule of degree {d}"))),
    };
    let total: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| 0.5 * w / total).collect();
    Ok(QuadRule { points, weights, degree })
}

/// Lagrange basis of order 1 or 2 tabulated at the points of a rule.
#[derive(Clone, Debug)]
pub struct RefElement {
    pub order: usize,
    pub n_local: usize,
    /// `values[q][a]` = basis `a` at point `q`.
    pub values: Vec<Vec<f64>>,
    /// `dbary[q][a][k]` = derivative of basis `a` w.r.t. barycentric `k`.
    pub dbary: Vec<Vec<[f64; 3]>>,
}

const P2_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

impl RefElement {
    pub fn new(order: usize, rule: &QuadRule) -> Result<Self, FemError> {
        let n_local = match order {
            1 => 3,
            2 => 6,
            o => return Err(FemError::InvalidArgument(format!("unsupported element order {o}"))),
        };
        let mut values = Vec::with_capacity(rule.len());
        let mut dbary = Vec::with_capacity(rule.len());
        for l in &rule.points {
            let (v, d) = Self::eval(order, *l);
            values.push(v);
            dbary.push(d);
        }
        Ok(Self { order, n_local, values, dbary })
    }

    /// Basis values and barycentric derivatives at barycentric point `l`.
    pub fn eval(order: usize, l: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
        if order == 1 {
            let d = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            return (l.to_vec(), d);
        }
        let mut v = Vec::with_capacity(6);
        let mut d = Vec::with_capacity(6);
        for a in 0..3 {
            v.push(l[a] * (2.0 * l[a] - 1.0));
            let mut g = [0.0; 3];
            g[a] = 4.0 * l[a] - 1.0;
            d.push(g);
        }
        for &(i, j) in &P2_EDGES {
            v.push(4.0 * l[i] * l[j]);
            let mut g = [0.0; 3];
            g[i] = 4.0 * l[j];
            g[j] = 4.0 * l[i];
            d.push(g);
        }
        (v, d)
    }
}

/// Which finite element space a field or form argument lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    P1,
    P2,
    /// Two-component P2 (velocity).
    P2Vec,
}

impl SpaceKind {
    pub fn components(self) -> usize {
        match self {
            SpaceKind::P2Vec => 2,
            _ => 1,
        }
    }
}

/// Coefficient vector of a finite element function.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub space: SpaceKind,
    pub coeffs: Vec<f64>,
}

impl Field {
    pub fn zeros(disc: &Discretization, space: SpaceKind) -> Self {
        Field { space, coeffs: vec![0.0; disc.n_coeffs(space)] }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Field {
        assert_eq!(self.space, other.space);
        Field {
            space: self.space,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field { space: self.space, coeffs: self.coeffs.iter().map(|x| a * x).collect() }
    }
}

/// Quadrature-point values of a scalar, indexed `cell * nq + q`.
pub type QpScalar = Vec<f64>;
/// Quadrature-point values of a vector.
pub type QpVector = Vec<[f64; 2]>;
/// Quadrature-point values of a 2x2 tensor, `t[i][j]`.
pub type QpTensor = Vec<[[f64; 2]; 2]>;

/// Per-order precomputed data: dof map, tabulated basis and physical
/// gradients on every cell.
#[derive(Clone, Debug)]
pub struct Space {
    pub dofmap: DofMap,
    pub element: RefElement,
    /// `grads[(cell * nq + q) * n_local + a]`.
    grads: Vec<[f64; 2]>,
}

/// Mesh, both Lagrange spaces and the quadrature used everywhere.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub mesh: Mesh,
    pub quad: QuadRule,
    pub p1: Space,
    pub p2: Space,
    /// Gradients of the barycentric coordinates per cell.
    pub grad_lambda: Vec<[[f64; 2]; 3]>,
    /// Physical quadrature points, `cell * nq + q`.
    pub qp_points: Vec<[f64; 2]>,
    /// Quadrature weight times Jacobian, `cell * nq + q`.
    pub jxw: Vec<f64>,
}

fn barycentric_gradients(p: [[f64; 2]; 3]) -> [[f64; 2]; 3] {
    let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    [
        [(p[1][1] - p[2][1]) / two_a, (p[2][0] - p[1][0]) / two_a],
        [(p[2][1] - p[0][1]) / two_a, (p[0][0] - p[2][0]) / two_a],
        [(p[0][1] - p[1][1]) / two_a, (p[1][0] - p[0][0]) / two_a],
    ]
}

impl Discretization {
    pub fn new(mesh: Mesh) -> Result<Self, FemError> {
        Self::with_quadrature(mesh, 6)
    }

    pub fn with_quadrature(mesh: Mesh, degree: usize) -> Result<Self, FemError> {
        let quad = quad_rule(degree)?;
        let nq = quad.len();
        let nt = mesh.n_triangles();
        let mut grad_lambda = Vec::with_capacity(nt);
        let mut qp_points = Vec::with_capacity(nt * nq);
        let mut jxw = Vec::with_capacity(nt * nq);
        for t in 0..nt {
            let p = mesh.triangles[t].map(|v| mesh.nodes[v]);
            grad_lambda.push(barycentric_gradients(p));
            let area = mesh.signed_area(t);
            for (l, w) in quad.points.iter().zip(&quad.weights) {
                qp_points.push([
                    l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                    l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
                ]);
                jxw.push(2.0 * w * area);
            }
        }
        let build = |order: usize| -> Result<Space, FemError> {
            let dofmap = dof_map(&mesh, order)?;
            let element = RefElement::new(order, &quad)?;
            let nl = element.n_local;
            let mut grads = Vec::with_capacity(nt * nq * nl);
            for gl in &grad_lambda {
                for q in 0..nq {
                    for a in 0..nl {
                        let d = element.dbary[q][a];
                        grads.push([
                            d[0] * gl[0][0] + d[1] * gl[1][0] + d[2] * gl[2][0],
                            d[0] * gl[0][1] + d[1] * gl[1][1] + d[2] * gl[2][1],
                        ]);
                    }
                }
            }
            Ok(Space { dofmap, element, grads })
        };
        let p1 = build(1)?;
        let p2 = build(2)?;
        Ok(Self { mesh, quad, p1, p2, grad_lambda, qp_points, jxw })
    }

    /// Unit square split into `n x n` cells.
    pub fn unit_square(n: usize) -> Result<Self, FemError> {
        Self::new(build_rect_mesh(0.0, 1.0, 0.0, 1.0, n, n)?)
    }

    pub fn nq(&self) -> usize {
        self.quad.len()
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_triangles()
    }

    pub fn n_qp(&self) -> usize {
        self.n_cells() * self.nq()
    }

    pub fn space(&self, kind: SpaceKind) -> &Space {
        match kind {
            SpaceKind::P1 => &self.p1,
            _ => &self.p2,
        }
    }

    pub fn n_dofs(&self, kind: SpaceKind) -> usize {
        self.space(kind).dofmap.n_dofs
    }

    pub fn n_coeffs(&self, kind: SpaceKind) -> usize {
        self.n_dofs(kind) * kind.components()
    }

    /// Physical gradient of local basis `a` at `(cell, q)`.
    #[inline]
    pub fn grad(&self, kind: SpaceKind, cell: usize, q: usize, a: usize) -> [f64; 2] {
        let s = self.space(kind);
        s.grads[(cell * self.nq() + q) * s.element.n_local + a]
    }

    fn check(&self, f: &Field) -> Result<(), FemError> {
        if f.coeffs.len() != self.n_coeffs(f.space) {
            return Err(FemError::InvalidArgument(format!(
                "field has {} coefficients, {:?} space on this mesh needs {}",
                f.coeffs.len(),
                f.space,
                self.n_coeffs(f.space)
            )));
        }
        Ok(())
    }

    /// Nodal interpolant of a scalar function.
    pub fn interpolate(&self, kind: SpaceKind, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_ne!(kind, SpaceKind::P2Vec, "use interpolate_vec");
        let pts = self.space(kind).dofmap.dof_points(&self.mesh);
        Field { space: kind, coeffs: pts.iter().map(|p| f(p[0], p[1])).collect() }
    }

    /// Nodal interpolant of a vector function into the P2 vector space.
    pub fn interpolate_vec(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Field {
        let pts = self.p2.dofmap.dof_points(&self.mesh);
        let n = pts.len();
        let mut coeffs = vec![0.0; 2 * n];
        for (d, p) in pts.iter().enumerate() {
            let v = f(p[0], p[1]);
            coeffs[d] = v[0];
            coeffs[n + d] = v[1];
        }
        Field { space: SpaceKind::P2Vec, coeffs }
    }

    /// Values of a scalar field at all quadrature points.
    pub fn eval_qp(&self, f: &Field) -> Result<QpScalar, FemError> {
        self.check(f)?;
        if f.space == SpaceKind::P2Vec {
            return Err(FemError::InvalidArgument("eval_qp needs a scalar field".into()));
        }
        let s = self.space(f.space);
        let nq = self.nq();
        let mut out = Vec::with_capacity(self.n_qp());
        for dofs in &s.dofmap.cell_to_dofs {
            for q in 0..nq {
                let phi = &s.element.values[q];
                out.push(dofs.iter().zip(phi).map(|(&d, v)| f.coeffs[d] * v).sum());
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar field at all quadrature points.
    pub fn eval_grad_qp(&self, f: &Field) -> Result<QpVector, FemError> {
        self.check(f)?;
        if f.space == SpaceKind::P2Vec {
            return Err(FemError::InvalidArgument("eval_grad_qp needs a scalar field".into()));
        }
        let s = self.space(f.space);
        let nq = self.nq();
        let mut out = Vec::with_capacity(self.n_qp());
        for (c, dofs) in s.dofmap.cell_to_dofs.iter().enumerate() {
            for q in 0..nq {
                let mut g = [0.0; 2];
                for (a, &d) in dofs.iter().enumerate() {
                    let ga = self.grad(f.space, c, q, a);
                    g[0] += f.coeffs[d] * ga[0];
                    g[1] += f.coeffs[d] * ga[1];
                }
                out.push(g);
            }
        }
        Ok(out)
    }

    /// Values of a P2 vector field at all quadrature points.
    pub fn eval_vec_qp(&self, f: &Field) -> Result<QpVector, FemError> {
        self.check(f)?;
        if f.space != SpaceKind::P2Vec {
            return Err(FemError::InvalidArgument("eval_vec_qp needs a vector field".into()));
        }
        let n = self.p2.dofmap.n_dofs;
        let nq = self.nq();
        let mut out = Vec::with_capacity(self.n_qp());
        for dofs in &self.p2.dofmap.cell_to_dofs {
            for q in 0..nq {
                let phi = &self.p2.element.values[q];
                let mut v = [0.0; 2];
                for (&d, p) in dofs.iter().zip(phi) {
                    v[0] += f.coeffs[d] * p;
                    v[1] += f.coeffs[n + d] * p;
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Gradient `g[i][j] = d u_i / d x_j` of a P2 vector field.
    pub fn eval_vec_grad_qp(&self, f: &Field) -> Result<QpTensor, FemError> {
        self.check(f)?;
        if f.space != SpaceKind::P2Vec {
            return Err(FemError::InvalidArgument("eval_vec_grad_qp needs a vector field".into()));
        }
        let n = self.p2.dofmap.n_dofs;
        let nq = self.nq();
        let mut out = Vec::with_capacity(self.n_qp());
        for (c, dofs) in self.p2.dofmap.cell_to_dofs.iter().enumerate() {
            for q in 0..nq {
                let mut g = [[0.0; 2]; 2];
                for (a, &d) in dofs.iter().enumerate() {
                    let ga = self.grad(SpaceKind::P2, c, q, a);
                    for j in 0..2 {
                        g[0][j] += f.coeffs[d] * ga[j];
                        g[1][j] += f.coeffs[n + d] * ga[j];
                    }
                }
                out.push(g);
            }
        }
        Ok(out)
    }

    /// Constant gradient of a P1 field on each cell.
    pub fn cell_gradients_p1(&self, f: &Field) -> Result<Vec<[f64; 2]>, FemError> {
        self.check(f)?;
        if f.space != SpaceKind::P1 {
            return Err(FemError::InvalidArgument("cell_gradients_p1 needs a P1 field".into()));
        }
        Ok(self
            .mesh
            .triangles
            .iter()
            .zip(&self.grad_lambda)
            .map(|(tri, gl)| {
                let mut g = [0.0; 2];
                for k in 0..3 {
                    g[0] += f.coeffs[tri[k]] * gl[k][0];
                    g[1] += f.coeffs[tri[k]] * gl[k][1];
                }
                g
            })
            .collect())
    }

    /// Quadrature sum of point values.
    pub fn integrate_qp(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.jxw).map(|(a, w)| a * w).sum()
    }

    pub fn integrate_fn(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.qp_points.iter().zip(&self.jxw).map(|(p, w)| w * f(p[0], p[1])).sum()
    }

    pub fn integrate(&self, f: &Field) -> Result<f64, FemError> {
        Ok(self.integrate_qp(&self.eval_qp(f)?))
    }

    /// `m_d = integral of basis function d` (row sums of the mass matrix).
    pub fn basis_integrals(&self, kind: SpaceKind) -> Vec<f64> {
        let s = self.space(kind);
        let nq = self.nq();
        let mut m = vec![0.0; s.dofmap.n_dofs];
        for (c, dofs) in s.dofmap.cell_to_dofs.iter().enumerate() {
            for q in 0..nq {
                let w = self.jxw[c * nq + q];
                for (a, &d) in dofs.iter().enumerate() {
                    m[d] += w * s.element.values[q][a];
                }
            }
        }
        m
    }

    /// Shifts a scalar field by a constant so its integral vanishes.
    pub fn remove_mean(&self, f: &mut Field) -> Result<f64, FemError> {
        let mean = self.integrate(f)? / self.mesh.domain_area();
        // Lagrange bases reproduce constants, so shifting coefficients shifts the function
        f.coeffs.iter_mut().for_each(|c| *c -= mean);
        Ok(mean)
    }

    /// Square root of a quadrature sum of squares.
    pub fn l2_norm_qp(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.jxw).map(|(a, w)| w * a * a).sum::<f64>().sqrt()
    }

    pub fn l2_norm_qp_vec(&self, v: &[[f64; 2]]) -> f64 {
        v.iter().zip(&self.jxw).map(|(a, w)| w * (a[0] * a[0] + a[1] * a[1])).sum::<f64>().sqrt()
    }
}

/// Scalar coefficient of a form: a constant or quadrature-point values.
#[derive(Clone, Copy, Debug)]
pub enum Coef<'a> {
    Const(f64),
    Qp(&'a [f64]),
}

impl Coef<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Coef::Const(c) => *c,
            Coef::Qp(v) => v[i],
        }
    }
}

/// Vector coefficient of a form.
#[derive(Clone, Copy, Debug)]
pub enum VecCoef<'a> {
    Const([f64; 2]),
    Qp(&'a [[f64; 2]]),
}

impl VecCoef<'_> {
    #[inline]
    fn at(&self, i: usize) -> [f64; 2] {
        match self {
            VecCoef::Const(c) => *c,
            VecCoef::Qp(v) => v[i],
        }
    }
}

/// Bilinear form terms `a(trial, test)`; `phi` is the trial function and
/// `psi` the test function.
#[derive(Clone, Copy, Debug)]
pub enum BilinearTerm<'a> {
    /// `(w phi, psi)`, scalar spaces.
    Mass(Coef<'a>),
    /// `(w grad phi, grad psi)`, scalar spaces.
    Stiffness(Coef<'a>),
    /// `(b . grad phi, psi)`, scalar spaces.
    Advection(VecCoef<'a>),
    /// `(w u, v)`, vector spaces.
    VectorMass(Coef<'a>),
    /// `(w D(u) : D(v))` with `D` the symmetric gradient, vector spaces.
    Deformation(Coef<'a>),
    /// `(u, grad q)`: vector trial, scalar test.
    VelocityGradient,
    /// `(p, div v)`: scalar trial, vector test.
    PressureDivergence,
}

/// Linear functionals `l(test)`.
#[derive(Clone, Copy, Debug)]
pub enum LinearTerm<'a> {
    /// `(f, psi)`, scalar test.
    Source(Coef<'a>),
    /// `(g, grad psi)`, scalar test.
    GradSource(VecCoef<'a>),
    /// `(f, v)`, vector test.
    VecSource(VecCoef<'a>),
    /// `(f, div v)`, vector test.
    DivSource(Coef<'a>),
}

fn need(ok: bool, what: &str) -> Result<(), FemError> {
    if ok {
        Ok(())
    } else {
        Err(FemError::InvalidArgument(format!("form term {what} used with incompatible spaces")))
    }
}

impl Discretization {
    /// Assembles the sum of `terms` into a `test x trial` sparse matrix.
    pub fn assemble(
        &self,
        terms: &[BilinearTerm],
        trial: SpaceKind,
        test: SpaceKind,
    ) -> Result<CsrMatrix, FemError> {
        let tv = trial == SpaceKind::P2Vec;
        let sv = test == SpaceKind::P2Vec;
        for t in terms {
            match t {
                BilinearTerm::Mass(Coef::Qp(v)) | BilinearTerm::Stiffness(Coef::Qp(v)) => {
                    need(v.len() == self.n_qp(), "coefficient length")?
                }
                BilinearTerm::VectorMass(Coef::Qp(v)) | BilinearTerm::Deformation(Coef::Qp(v)) => {
                    need(v.len() == self.n_qp(), "coefficient length")?
                }
                BilinearTerm::Advection(VecCoef::Qp(v)) => need(v.len() == self.n_qp(), "coefficient length")?,
                _ => {}
            }
            match t {
                BilinearTerm::Mass(_) | BilinearTerm::Stiffness(_) | BilinearTerm::Advection(_) => {
                    need(!tv && !sv, "scalar")?
                }
                BilinearTerm::VectorMass(_) | BilinearTerm::Deformation(_) => need(tv && sv, "vector")?,
                BilinearTerm::VelocityGradient => need(tv && !sv, "(u, grad q)")?,
                BilinearTerm::PressureDivergence => need(!tv && sv, "(p, div v)")?,
            }
        }
        let trial_s = self.space(trial);
        let test_s = self.space(test);
        let (ntr, nte) = (trial_s.element.n_local, test_s.element.n_local);
        let (ctr, cte) = (trial.components(), test.components());
        let (ltr, lte) = (ntr * ctr, nte * cte);
        let nq = self.nq();

        let locals: Vec<Vec<f64>> = (0..self.n_cells())
            .into_par_iter()
            .map(|c| {
                let mut loc = vec![0.0; lte * ltr];
                for q in 0..nq {
                    let iq = c * nq + q;
                    let w = self.jxw[iq];
                    let phi = &trial_s.element.values[q];
                    let psi = &test_s.element.values[q];
                    let gphi: Vec<[f64; 2]> = (0..ntr).map(|a| self.grad(trial, c, q, a)).collect();
                    let gpsi: Vec<[f64; 2]> = (0..nte).map(|a| self.grad(test, c, q, a)).collect();
                    for term in terms {
                        match term {
                            BilinearTerm::Mass(k) => {
                                let kw = k.at(iq) * w;
                                for i in 0..nte {
                                    for j in 0..ntr {
                                        loc[i * ltr + j] += kw * phi[j] * psi[i];
                                    }
                                }
                            }
                            BilinearTerm::Stiffness(k) => {
                                let kw = k.at(iq) * w;
                                for i in 0..nte {
                                    for j in 0..ntr {
                                        loc[i * ltr + j] +=
                                            kw * (gphi[j][0] * gpsi[i][0] + gphi[j][1] * gpsi[i][1]);
                                    }
                                }
                            }
                            BilinearTerm::Advection(b) => {
                                let b = b.at(iq);
                                for i in 0..nte {
                                    for j in 0..ntr {
                                        loc[i * ltr + j] += w * (b[0] * gphi[j][0] + b[1] * gphi[j][1]) * psi[i];
                                    }
                                }
                            }
                            BilinearTerm::VectorMass(k) => {
                                let kw = k.at(iq) * w;
                                for d in 0..2 {
                                    for i in 0..nte {
                                        for j in 0..ntr {
                                            loc[(d * nte + i) * ltr + d * ntr + j] += kw * phi[j] * psi[i];
                                        }
                                    }
                                }
                            }
                            BilinearTerm::Deformation(k) => {
                                // D(phi e_c) : D(psi e_d) = (delta_cd grad phi . grad psi + d_d phi d_c psi) / 2
                                let kw = 0.5 * k.at(iq) * w;
                                for d in 0..2 {
                                    for i in 0..nte {
                                        for cc in 0..2 {
                                            for j in 0..ntr {
                                                let mut v = gphi[j][d] * gpsi[i][cc];
                                                if cc == d {
                                                    v += gphi[j][0] * gpsi[i][0] + gphi[j][1] * gpsi[i][1];
                                                }
                                                loc[(d * nte + i) * ltr + cc * ntr + j] += kw * v;
                                            }
                                        }
                                    }
                                }
                            }
                            BilinearTerm::VelocityGradient => {
                                for i in 0..nte {
                                    for cc in 0..2 {
                                        for j in 0..ntr {
                                            loc[i * ltr + cc * ntr + j] += w * phi[j] * gpsi[i][cc];
                                        }
                                    }
                                }
                            }
                            BilinearTerm::PressureDivergence => {
                                for d in 0..2 {
                                    for i in 0..nte {
                                        for j in 0..ntr {
                                            loc[(d * nte + i) * ltr + j] += w * phi[j] * gpsi[i][d];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                loc
            })
            .collect();

        let (ntr_g, nte_g) = (trial_s.dofmap.n_dofs, test_s.dofmap.n_dofs);
        let mut b = TripletBuilder::with_capacity(nte_g * cte, ntr_g * ctr, self.n_cells() * lte * ltr);
        for (c, loc) in locals.iter().enumerate() {
            let dtr = &trial_s.dofmap.cell_to_dofs[c];
            let dte = &test_s.dofmap.cell_to_dofs[c];
            for ci in 0..cte {
                for i in 0..nte {
                    let row = ci * nte_g + dte[i];
                    for cj in 0..ctr {
                        for j in 0..ntr {
                            b.push(row, cj * ntr_g + dtr[j], loc[(ci * nte + i) * ltr + cj * ntr + j]);
                        }
                    }
                }
            }
        }
        Ok(b.to_csr())
    }

    /// Assembles the sum of linear `terms` against the `test` space.
    pub fn assemble_vector(&self, terms: &[LinearTerm], test: SpaceKind) -> Result<Vec<f64>, FemError> {
        let sv = test == SpaceKind::P2Vec;
        for t in terms {
            match t {
                LinearTerm::Source(_) | LinearTerm::GradSource(_) => need(!sv, "scalar source")?,
                LinearTerm::VecSource(_) | LinearTerm::DivSource(_) => need(sv, "vector source")?,
            }
            let len_ok = match t {
                LinearTerm::Source(Coef::Qp(v)) | LinearTerm::DivSource(Coef::Qp(v)) => v.len() == self.n_qp(),
                LinearTerm::GradSource(VecCoef::Qp(v)) | LinearTerm::VecSource(VecCoef::Qp(v)) => {
                    v.len() == self.n_qp()
                }
                _ => true,
            };
            need(len_ok, "coefficient length")?;
        }
        let s = self.space(test);
        let nl = s.element.n_local;
        let n = s.dofmap.n_dofs;
        let nq = self.nq();
        let mut out = vec![0.0; n * test.components()];
        for (c, dofs) in s.dofmap.cell_to_dofs.iter().enumerate() {
            for q in 0..nq {
                let iq = c * nq + q;
                let w = self.jxw[iq];
                let psi = &s.element.values[q];
                for term in terms {
                    match term {
                        LinearTerm::Source(f) => {
                            let fw = f.at(iq) * w;
                            for a in 0..nl {
                                out[dofs[a]] += fw * psi[a];
                            }
                        }
                        LinearTerm::GradSource(g) => {
                            let g = g.at(iq);
                            for a in 0..nl {
                                let ga = self.grad(test, c, q, a);
                                out[dofs[a]] += w * (g[0] * ga[0] + g[1] * ga[1]);
                            }
                        }
                        LinearTerm::VecSource(f) => {
                            let f = f.at(iq);
                            for a in 0..nl {
                                out[dofs[a]] += w * f[0] * psi[a];
                                out[n + dofs[a]] += w * f[1] * psi[a];
                            }
                        }
                        LinearTerm::DivSource(f) => {
                            let fw = f.at(iq) * w;
                            for a in 0..nl {
                                let ga = self.grad(test, c, q, a);
                                out[dofs[a]] += fw * ga[0];
                                out[n + dofs[a]] += fw * ga[1];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Discrete L2 error `||f - exact||` by quadrature.
    pub fn error_norm_l2(&self, f: &Field, exact: impl Fn(f64, f64) -> f64) -> Result<f64, FemError> {
        let v = self.eval_qp(f)?;
        Ok(self.l2_error_qp(&v, exact))
    }

    /// Discrete L2 error of a vector field.
    pub fn error_norm_l2_vec(&self, f: &Field, exact: impl Fn(f64, f64) -> [f64; 2]) -> Result<f64, FemError> {
        let v = self.eval_vec_qp(f)?;
        Ok(self.l2_error_qp_vec(&v, exact))
    }

    pub fn l2_error_qp(&self, v: &[f64], exact: impl Fn(f64, f64) -> f64) -> f64 {
        v.iter()
            .zip(&self.qp_points)
            .zip(&self.jxw)
            .map(|((a, p), w)| {
                let e = a - exact(p[0], p[1]);
                w * e * e
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_error_qp_vec(&self, v: &[[f64; 2]], exact: impl Fn(f64, f64) -> [f64; 2]) -> f64 {
        v.iter()
            .zip(&self.qp_points)
            .zip(&self.jxw)
            .map(|((a, p), w)| {
                let e = exact(p[0], p[1]);
                w * ((a[0] - e[0]).powi(2) + (a[1] - e[1]).powi(2))
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Replaces the rows of `dofs` by identity rows and sets `b[d] = values[k]`.
///
/// With `symmetric`, the columns are eliminated too and their contribution
/// moved to the right-hand side.
pub fn apply_dirichlet(
    a: &mut CsrMatrix,
    b: &mut [f64],
    dofs: &[usize],
    values: &[f64],
    symmetric: bool,
) -> Result<(), FemError> {
    if dofs.len() != values.len() {
        return Err(FemError::InvalidArgument(format!(
            "{} Dirichlet dofs but {} values",
            dofs.len(),
            values.len()
        )));
    }
    if dofs.is_empty() {
        return Ok(());
    }
    if !a.is_square() || b.len() != a.n_rows || dofs.iter().any(|&d| d >= a.n_rows) {
        return Err(FemError::InvalidArgument("Dirichlet dofs out of range".into()));
    }
    let mut fixed: Vec<Option<f64>> = vec![None; a.n_rows];
    for (&d, &v) in dofs.iter().zip(values) {
        fixed[d] = Some(v);
    }
    if dofs.iter().any(|&d| a.row(d).all(|(j, _)| j != d)) {
        // pattern lacks some diagonals: add explicit zeros
        let id = CsrMatrix::identity(a.n_rows);
        *a = a.linear_combination(1.0, &id, 0.0);
    }
    for i in 0..a.n_rows {
        let range = a.row_offsets[i]..a.row_offsets[i + 1];
        if let Some(v) = fixed[i] {
            for k in range {
                a.values[k] = if a.col_indices[k] == i { 1.0 } else { 0.0 };
            }
            b[i] = v;
        } else if symmetric {
            for k in range {
                if let Some(v) = fixed[a.col_indices[k]] {
                    b[i] -= a.values[k] * v;
                    a.values[k] = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// What to do when a pure-Neumann right-hand side has nonzero integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompatibilityPolicy {
    /// Fail with [`FemError::Incompatible`].
    Strict,
    /// Subtract the mean of the right-hand side and continue.
    SubtractMean,
}

/// Relative tolerance of the compatibility test.
pub const COMPATIBILITY_TOL: f64 = 1e-8;

/// A linear system prepared once and solved for many right-hand sides.
pub struct PreparedSystem {
    matrix: CsrMatrix,
    lu: Option<LuFactorization>,
    choice: SolverChoice,
    spd: bool,
}

impl PreparedSystem {
    pub fn new(matrix: CsrMatrix, choice: SolverChoice, spd: bool) -> Result<Self, FemError> {
        let lu = match choice {
            SolverChoice::Direct => Some(LuFactorization::new(&matrix)?),
            SolverChoice::Iterative { .. } => None,
        };
        Ok(Self { matrix, lu, choice, spd })
    }

    /// Wraps an existing factorization of `matrix`.
    pub fn from_lu(matrix: CsrMatrix, lu: LuFactorization) -> Self {
        Self { matrix, lu: Some(lu), choice: SolverChoice::Direct, spd: false }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveReport), FemError> {
        Ok(match (&self.lu, self.choice) {
            (Some(lu), _) => lu.solve(b)?,
            (None, SolverChoice::Iterative { tol, maxit }) => {
                crate::sparse::solve_iterative(&self.matrix, b, self.spd, tol, maxit)?
            }
            (None, SolverChoice::Direct) => crate::sparse::solve_direct(&self.matrix, b)?,
        })
    }
}

/// Pure-Neumann system `A x = b` with the side condition `m . x = 0`.
///
/// The kernel of `A` is the constants, so dof 0 is pinned to zero (its row
/// and column replaced by the identity) and the mean is removed afterwards.
/// A bordered multiplier row would be dense and wreck the LU fill.
pub struct ZeroMeanSystem {
    system: PreparedSystem,
    m: Vec<f64>,
}

impl ZeroMeanSystem {
    pub fn new(a: &CsrMatrix, m: &[f64], choice: SolverChoice) -> Result<Self, FemError> {
        let n = a.n_rows;
        if !a.is_square() || m.len() != n || n == 0 {
            return Err(FemError::InvalidArgument("zero-mean system dimensions".into()));
        }
        if m.iter().sum::<f64>() <= 0.0 {
            return Err(FemError::InvalidArgument("zero-mean weights must have positive sum".into()));
        }
        let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
        b.push(0, 0, 1.0);
        for i in 1..n {
            for (j, v) in a.row(i).filter(|&(j, _)| j != 0) {
                b.push(i, j, v);
            }
        }
        Ok(Self { system: PreparedSystem::new(b.to_csr(), choice, false)?, m: m.to_vec() })
    }

    /// Returns the solution and the mean that was subtracted from `b`
    /// (zero unless the policy allowed it).
    pub fn solve(&self, b: &[f64], policy: CompatibilityPolicy) -> Result<(Vec<f64>, f64), FemError> {
        let n = self.m.len();
        if b.len() != n {
            return Err(FemError::InvalidArgument("zero-mean right-hand side length".into()));
        }
        let integral: f64 = b.iter().sum();
        let scale: f64 = b.iter().map(|v| v.abs()).sum();
        let tolerance = COMPATIBILITY_TOL * scale;
        let mut rhs = b.to_vec();
        let mut subtracted = 0.0;
        if integral.abs() > tolerance {
            match policy {
                CompatibilityPolicy::Strict => return Err(FemError::Incompatible { integral, tolerance }),
                CompatibilityPolicy::SubtractMean => {
                    let area: f64 = self.m.iter().sum();
                    subtracted = integral / area;
                    rhs.iter_mut().zip(&self.m).for_each(|(r, m)| *r -= subtracted * m);
                }
            }
        }
        rhs[0] = 0.0;
        let (mut x, _) = self.system.solve(&rhs)?;
        let area: f64 = self.m.iter().sum();
        let mean = x.iter().zip(&self.m).map(|(a, b)| a * b).sum::<f64>() / area;
        x.iter_mut().for_each(|v| *v -= mean);
        Ok((x, subtracted))
    }
}

/// One-shot zero-mean solve; see [`ZeroMeanSystem`].
pub fn solve_zero_mean(
    a: &CsrMatrix,
    b: &[f64],
    m: &[f64],
    policy: CompatibilityPolicy,
) -> Result<Vec<f64>, FemError> {
    Ok(ZeroMeanSystem::new(a, m, SolverChoice::Direct)?.solve(b, policy)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fact(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    // exact integral of x^a y^b over the reference triangle (0,0),(1,0),(0,1)
    fn monomial(a: u32, b: u32) -> f64 {
        fact(a) * fact(b) / fact(a + b + 2)
    }

    fn ref_integral(rule: &QuadRule, a: i32, b: i32) -> f64 {
        rule.points.iter().zip(&rule.weights).map(|(l, w)| w * l[1].powi(a) * l[2].powi(b)).sum()
    }

    #[test]
    fn quadrature_exactness() {
        for deg in 0..=6 {
            let rule = quad_rule(deg).unwrap();
            assert!(rule.degree >= deg);
            assert!(rule.weights.iter().all(|w| *w > 0.0));
            assert!((rule.weights.iter().sum::<f64>() - 0.5).abs() < 1e-15);
            for a in 0..=rule.degree as u32 {
                for b in 0..=(rule.degree as u32 - a) {
                    let q = ref_integral(&rule, a as i32, b as i32);
                    assert!((q - monomial(a, b)).abs() < 1e-14, "deg {deg} x^{a} y^{b}");
                }
            }
        }
        let r6 = quad_rule(6).unwrap();
        assert_eq!(r6.len(), 12);
        assert!((ref_integral(&r6, 2, 2) - 1.0 / 180.0).abs() < 1e-14);
        assert!((ref_integral(&r6, 6, 0) - 1.0 / 56.0).abs() < 1e-14);
        assert!(quad_rule(7).is_err());
    }

    #[test]
    fn basis_partition_of_unity() {
        let disc = Discretization::unit_square(3).unwrap();
        for kind in [SpaceKind::P1, SpaceKind::P2] {
            let s = disc.space(kind);
            for q in 0..disc.nq() {
                assert!((s.element.values[q].iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
            for c in 0..disc.n_cells() {
                for q in 0..disc.nq() {
                    let mut g = [0.0; 2];
                    for a in 0..s.element.n_local {
                        let ga = disc.grad(kind, c, q, a);
                        g[0] += ga[0];
                        g[1] += ga[1];
                    }
                    assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn p2_basis_is_nodal() {
        let nodes = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
        ];
        for (i, l) in nodes.iter().enumerate() {
            let (v, _) = RefElement::eval(2, *l);
            for (a, va) in v.iter().enumerate() {
                assert!((va - if a == i { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    fn one_triangle() -> Discretization {
        let mesh = Mesh {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            edges: vec![
                crate::mesh::Edge { vertices: (0, 1), triangles: [Some(0), None], side: Some(crate::mesh::Side::Bottom) },
                crate::mesh::Edge { vertices: (1, 2), triangles: [Some(0), None], side: None },
                crate::mesh::Edge { vertices: (0, 2), triangles: [Some(0), None], side: Some(crate::mesh::Side::Left) },
            ],
            triangle_edges: vec![[0, 1, 2]],
            boundary_edges: vec![0, 2],
            node_sides: vec![crate::mesh::SideSet::empty(); 3],
            nx: 1,
            ny: 1,
            bounds: [0.0, 1.0, 0.0, 1.0],
        };
        Discretization::new(mesh).unwrap()
    }

    #[test]
    fn p1_matrices_on_unit_right_triangle() {
        let disc = one_triangle();
        let m = disc.assemble(&[BilinearTerm::Mass(Coef::Const(1.0))], SpaceKind::P1, SpaceKind::P1).unwrap();
        let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P1, SpaceKind::P1).unwrap();
        let me = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]];
        let ke = [[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.get(i, j) - 0.5 / 12.0 * me[i][j]).abs() < 1e-15);
                assert!((k.get(i, j) - 0.5 * ke[i][j]).abs() < 1e-15);
            }
        }
        let z = disc.assemble(&[BilinearTerm::Mass(Coef::Const(0.0))], SpaceKind::P1, SpaceKind::P1).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn assembly_rejects_bad_spaces() {
        let disc = Discretization::unit_square(1).unwrap();
        assert!(disc.assemble(&[BilinearTerm::VectorMass(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2).is_err());
        assert!(disc.assemble(&[BilinearTerm::Mass(Coef::Qp(&[1.0]))], SpaceKind::P2, SpaceKind::P2).is_err());
        let f = Field { space: SpaceKind::P2, coeffs: vec![0.0; 3] };
        assert!(disc.eval_qp(&f).is_err());
    }

    #[test]
    fn mass_row_sums_and_stiffness_kernel() {
        let disc = Discretization::unit_square(4).unwrap();
        for kind in [SpaceKind::P1, SpaceKind::P2] {
            let m = disc.assemble(&[BilinearTerm::Mass(Coef::Const(1.0))], kind, kind).unwrap();
            let rows = m.spmv(&vec![1.0; m.n_cols]).unwrap();
            let bi = disc.basis_integrals(kind);
            for (r, b) in rows.iter().zip(&bi) {
                assert!((r - b).abs() < 1e-15);
            }
            assert!((rows.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], kind, kind).unwrap();
            assert!(k.spmv(&vec![1.0; k.n_cols]).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn load_vector_cases() {
        let disc = Discretization::unit_square(2).unwrap();
        let b = disc.assemble_vector(&[LinearTerm::Source(Coef::Const(1.0))], SpaceKind::P1).unwrap();
        let mut adj = vec![0.0; disc.n_dofs(SpaceKind::P1)];
        for (t, tri) in disc.mesh.triangles.iter().enumerate() {
            for &v in tri {
                adj[v] += disc.mesh.signed_area(t) / 3.0;
            }
        }
        for (x, y) in b.iter().zip(&adj) {
            assert!((x - y).abs() < 1e-15);
        }
        let z = disc.assemble_vector(&[LinearTerm::Source(Coef::Const(0.0))], SpaceKind::P2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));

        // (grad V, grad psi) for V = x equals K * interp(x)
        let v = disc.interpolate(SpaceKind::P2, |x, _| x);
        let gv = disc.eval_grad_qp(&v).unwrap();
        let lhs = disc.assemble_vector(&[LinearTerm::GradSource(VecCoef::Qp(&gv))], SpaceKind::P2).unwrap();
        let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2).unwrap();
        let rhs = k.spmv(&v.coeffs).unwrap();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn advection_is_skew_for_solenoidal_field() {
        let disc = Discretization::unit_square(6).unwrap();
        // b = curl of x(1-x)y(1-y): polynomial, solenoidal, tangential on the boundary,
        // so the form is integrated exactly and is skew
        let b: QpVector = disc
            .qp_points
            .iter()
            .map(|p| {
                let (x, y) = (p[0], p[1]);
                [x * (1.0 - x) * (1.0 - 2.0 * y), -(1.0 - 2.0 * x) * y * (1.0 - y)]
            })
            .collect();
        let a = disc.assemble(&[BilinearTerm::Advection(VecCoef::Qp(&b))], SpaceKind::P2, SpaceKind::P2).unwrap();
        let x = disc.interpolate(SpaceKind::P2, |x, y| (3.0 * x).sin() + y * y - x * y);
        let ax = a.spmv(&x.coeffs).unwrap();
        let xax: f64 = x.coeffs.iter().zip(&ax).map(|(p, q)| p * q).sum();
        let nx: f64 = x.coeffs.iter().map(|p| p * p).sum();
        assert!(xax.abs() <= 1e-10 * nx, "{xax} vs {nx}");
    }

    #[test]
    fn dirichlet_rows() {
        let disc = Discretization::unit_square(4).unwrap();
        let k0 = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2).unwrap();
        let b0 = vec![0.0; k0.n_rows];
        let (mut k, mut b) = (k0.clone(), b0.clone());
        apply_dirichlet(&mut k, &mut b, &[], &[], false).unwrap();
        assert_eq!(k, k0);
        assert_eq!(b, b0);

        // Laplace with V = 1 on the left, 0 on the right, natural elsewhere
        let left = disc.p2.dofmap.dofs_on(crate::mesh::Side::Left);
        let right = disc.p2.dofmap.dofs_on(crate::mesh::Side::Right);
        let dofs: Vec<usize> = left.iter().chain(&right).copied().collect();
        let vals: Vec<f64> = left.iter().map(|_| 1.0).chain(right.iter().map(|_| 0.0)).collect();
        for symmetric in [false, true] {
            let (mut k, mut b) = (k0.clone(), b0.clone());
            apply_dirichlet(&mut k, &mut b, &dofs, &vals, symmetric).unwrap();
            let (x, _) = crate::sparse::solve_direct(&k, &b).unwrap();
            let f = Field { space: SpaceKind::P2, coeffs: x };
            assert!(disc.error_norm_l2(&f, |x, _| 1.0 - x).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_mean_poisson() {
        let disc = Discretization::unit_square(8).unwrap();
        let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2).unwrap();
        let m = disc.basis_integrals(SpaceKind::P2);
        let x = solve_zero_mean(&k, &vec![0.0; m.len()], &m, CompatibilityPolicy::Strict).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));

        let rho: QpScalar = disc.qp_points.iter().map(|p| (PI * p[0]).cos() * (PI * p[1]).cos()).collect();
        let b = disc.assemble_vector(&[LinearTerm::Source(Coef::Qp(&rho))], SpaceKind::P2).unwrap();
        let x = solve_zero_mean(&k, &b, &m, CompatibilityPolicy::Strict).unwrap();
        let f = Field { space: SpaceKind::P2, coeffs: x };
        assert!(disc.integrate(&f).unwrap().abs() < 1e-12);
        let err = disc.error_norm_l2(&f, |x, y| (PI * x).cos() * (PI * y).cos() / (2.0 * PI * PI)).unwrap();
        assert!(err < 1e-4, "{err}");

        let ones = disc.assemble_vector(&[LinearTerm::Source(Coef::Const(1.0))], SpaceKind::P2).unwrap();
        assert!(matches!(
            solve_zero_mean(&k, &ones, &m, CompatibilityPolicy::Strict),
            Err(FemError::Incompatible { .. })
        ));
        let sys = ZeroMeanSystem::new(&k, &m, SolverChoice::Direct).unwrap();
        let (x, sub) = sys.solve(&ones, CompatibilityPolicy::SubtractMean).unwrap();
        assert!((sub - 1.0).abs() < 1e-12);
        assert!(x.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn l2_error_cases() {
        let disc = Discretization::unit_square(3).unwrap();
        let quad = |x: f64, y: f64| 1.0 + x - 2.0 * y + x * y + 3.0 * y * y;
        let f = disc.interpolate(SpaceKind::P2, quad);
        assert!(disc.error_norm_l2(&f, quad).unwrap() < 1e-13);
        let z = Field::zeros(&disc, SpaceKind::P1);
        assert!((disc.error_norm_l2(&z, |_, _| 1.0).unwrap() - 1.0).abs() < 1e-14);

        let s = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin();
        let e: Vec<f64> = [8, 16]
            .iter()
            .map(|&n| {
                let d = Discretization::unit_square(n).unwrap();
                d.error_norm_l2(&d.interpolate(SpaceKind::P2, s), s).unwrap()
            })
            .collect();
        let ratio = e[0] / e[1];
        assert!((7.0..9.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn vector_evaluation() {
        let disc = Discretization::unit_square(2).unwrap();
        let u = disc.interpolate_vec(|x, y| [x * y, x - y * y]);
        let v = disc.eval_vec_qp(&u).unwrap();
        let g = disc.eval_vec_grad_qp(&u).unwrap();
        for ((p, vi), gi) in disc.qp_points.iter().zip(&v).zip(&g) {
            let (x, y) = (p[0], p[1]);
            assert!((vi[0] - x * y).abs() < 1e-14 && (vi[1] - (x - y * y)).abs() < 1e-14);
            assert!((gi[0][0] - y).abs() < 1e-13 && (gi[0][1] - x).abs() < 1e-13);
            assert!((gi[1][0] - 1.0).abs() < 1e-13 && (gi[1][1] + 2.0 * y).abs() < 1e-13);
        }
    }
}
