//! Brute-force dense oracles shared by the integration tests.
#![allow(dead_code)]

use spnp_core::fem::{BilinearTerm, Coef, Discretization, SpaceKind, VecCoef};
use spnp_core::mesh::build_rect_mesh;

/// Gauss-Legendre nodes and weights on `[0, 1]` (Newton on `P_n`).
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            (0.5 * (1.0 + x), 0.5 * w)
        })
        .collect()
}

/// Collapsed-square rule on a physical triangle: `(point, weight)`.
pub fn duffy_rule(v: &[[f64; 2]; 3], n: usize) -> Vec<([f64; 2], f64)> {
    let gl = gauss_legendre(n);
    let det = ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1])).abs();
    let mut out = Vec::new();
    for &(u, wu) in &gl {
        for &(s, ws) in &gl {
            let (xi, eta) = (u, s * (1.0 - u));
            let p = [
                v[0][0] + xi * (v[1][0] - v[0][0]) + eta * (v[2][0] - v[0][0]),
                v[0][1] + xi * (v[1][1] - v[0][1]) + eta * (v[2][1] - v[0][1]),
            ];
            out.push((p, wu * ws * (1.0 - u) * det));
        }
    }
    out
}

fn monomials(order: usize, p: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (x, y) = (p[0], p[1]);
    if order == 1 {
        (vec![1.0, x, y], vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    } else {
        (
            vec![1.0, x, y, x * x, x * y, y * y],
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0 * x, 0.0], [y, x], [0.0, 2.0 * y]],
        )
    }
}

pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (b[i] - (i + 1..n).map(|j| a[i][j] * x[j]).sum::<f64>()) / a[i][i];
    }
    x
}

/// Nodal Lagrange basis of one triangle built from a monomial Vandermonde
/// system, with the global index of each local node found by coordinates.
pub struct LocalBasis {
    pub order: usize,
    pub global: Vec<usize>,
    coeffs: Vec<Vec<f64>>,
}

impl LocalBasis {
    pub fn new(order: usize, v: &[[f64; 2]; 3], global_points: &[[f64; 2]]) -> Self {
        let mut nodes: Vec<[f64; 2]> = v.to_vec();
        if order == 2 {
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                nodes.push([0.5 * (v[a][0] + v[b][0]), 0.5 * (v[a][1] + v[b][1])]);
            }
        }
        let global = nodes
            .iter()
            .map(|p| {
                global_points
                    .iter()
                    .position(|q| (q[0] - p[0]).abs() < 1e-13 && (q[1] - p[1]).abs() < 1e-13)
                    .expect("node not found among global dof points")
            })
            .collect();
        let vand: Vec<Vec<f64>> = nodes.iter().map(|p| monomials(order, *p).0).collect();
        let coeffs = (0..nodes.len())
            .map(|a| {
                let mut e = vec![0.0; nodes.len()];
                e[a] = 1.0;
                solve_dense(vand.clone(), e)
            })
            .collect();
        Self { order, global, coeffs }
    }

    pub fn eval(&self, p: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let (m, dm) = monomials(self.order, p);
        let vals = self.coeffs.iter().map(|c| c.iter().zip(&m).map(|(a, b)| a * b).sum()).collect();
        let grads = self
            .coeffs
            .iter()
            .map(|c| {
                let gx = c.iter().zip(&dm).map(|(a, b)| a * b[0]).sum();
                let gy = c.iter().zip(&dm).map(|(a, b)| a * b[1]).sum();
                [gx, gy]
            })
            .collect();
        (vals, grads)
    }
}

pub fn w_fn(p: [f64; 2]) -> f64 {
    1.0 + p[0] + 2.0 * p[1]
}

pub fn b_fn(p: [f64; 2]) -> [f64; 2] {
    [1.0 + p[1], p[0] - 2.0]
}

/// Largest entrywise difference between every assembled kernel and its
/// dense oracle on the two-triangle mesh of `[0,lx] x [0,ly]`.
pub fn kernel_oracle_errors(lx: f64, ly: f64) -> Vec<(&'static str, f64)> {
    let disc = Discretization::new(build_rect_mesh(0.0, lx, 0.0, ly, 1, 1).unwrap()).unwrap();
    assert_eq!(disc.mesh.n_triangles(), 2);
    let p2_pts = disc.p2.dofmap.dof_points(&disc.mesh);
    let p1_pts = disc.p1.dofmap.dof_points(&disc.mesh);
    let (n2, n1) = (p2_pts.len(), p1_pts.len());
    let w_qp: Vec<f64> = disc.qp_points.iter().map(|p| w_fn(*p)).collect();
    let b_qp: Vec<[f64; 2]> = disc.qp_points.iter().map(|p| b_fn(*p)).collect();

    let tris: Vec<[[f64; 2]; 3]> = disc
        .mesh
        .triangles
        .iter()
        .map(|t| [disc.mesh.nodes[t[0]], disc.mesh.nodes[t[1]], disc.mesh.nodes[t[2]]])
        .collect();

    // oracle accumulators, indexed [test][trial]
    let mut mass1 = vec![vec![0.0; n1]; n1];
    let mut mass2 = vec![vec![0.0; n2]; n2];
    let mut stiff1 = vec![vec![0.0; n1]; n1];
    let mut stiff2 = vec![vec![0.0; n2]; n2];
    let mut adv2 = vec![vec![0.0; n2]; n2];
    let mut vmass = vec![vec![0.0; 2 * n2]; 2 * n2];
    let mut deform = vec![vec![0.0; 2 * n2]; 2 * n2];
    let mut ugradq = vec![vec![0.0; 2 * n2]; n1];
    let mut pdivv = vec![vec![0.0; n1]; 2 * n2];

    for v in &tris {
        let b1 = LocalBasis::new(1, v, &p1_pts);
        let b2 = LocalBasis::new(2, v, &p2_pts);
        for (p, wq) in duffy_rule(v, 8) {
            let (w, b) = (w_fn(p), b_fn(p));
            let (f1, g1) = b1.eval(p);
            let (f2, g2) = b2.eval(p);
            for a in 0..3 {
                for c in 0..3 {
                    let (i, j) = (b1.global[a], b1.global[c]);
                    mass1[i][j] += wq * w * f1[c] * f1[a];
                    stiff1[i][j] += wq * w * (g1[c][0] * g1[a][0] + g1[c][1] * g1[a][1]);
                }
            }
            for a in 0..6 {
                for c in 0..6 {
                    let (i, j) = (b2.global[a], b2.global[c]);
                    mass2[i][j] += wq * w * f2[c] * f2[a];
                    stiff2[i][j] += wq * w * (g2[c][0] * g2[a][0] + g2[c][1] * g2[a][1]);
                    adv2[i][j] += wq * (b[0] * g2[c][0] + b[1] * g2[c][1]) * f2[a];
                    for cd in 0..2 {
                        vmass[cd * n2 + i][cd * n2 + j] += wq * 2.0 * f2[c] * f2[a];
                    }
                    // D(phi e_r) : D(psi e_s)
                    for r in 0..2 {
                        for s in 0..2 {
                            let mut dd = 0.0;
                            for k in 0..2 {
                                for l in 0..2 {
                                    let du = 0.5 * ((k == r) as u8 as f64 * g2[c][l] + (l == r) as u8 as f64 * g2[c][k]);
                                    let dv = 0.5 * ((k == s) as u8 as f64 * g2[a][l] + (l == s) as u8 as f64 * g2[a][k]);
                                    dd += du * dv;
                                }
                            }
                            deform[s * n2 + i][r * n2 + j] += wq * w * dd;
                        }
                    }
                }
            }
            for a in 0..3 {
                for c in 0..6 {
                    let (q, u) = (b1.global[a], b2.global[c]);
                    for r in 0..2 {
                        ugradq[q][r * n2 + u] += wq * f2[c] * g1[a][r];
                        pdivv[r * n2 + u][q] += wq * f1[a] * g2[c][r];
                    }
                }
            }
        }
    }

    let check = |term: BilinearTerm, trial: SpaceKind, test: SpaceKind, oracle: &Vec<Vec<f64>>| -> f64 {
        let m = disc.assemble(&[term], trial, test).unwrap().to_dense();
        assert_eq!(m.len(), oracle.len());
        m.iter()
            .zip(oracle)
            .flat_map(|(r, o)| {
                assert_eq!(r.len(), o.len());
                r.iter().zip(o).map(|(a, b)| (a - b).abs())
            })
            .fold(0.0, f64::max)
    };
    use SpaceKind::*;
    vec![
        ("mass P1", check(BilinearTerm::Mass(Coef::Qp(&w_qp)), P1, P1, &mass1)),
        ("mass P2", check(BilinearTerm::Mass(Coef::Qp(&w_qp)), P2, P2, &mass2)),
        ("stiffness P1", check(BilinearTerm::Stiffness(Coef::Qp(&w_qp)), P1, P1, &stiff1)),
        ("stiffness P2", check(BilinearTerm::Stiffness(Coef::Qp(&w_qp)), P2, P2, &stiff2)),
        ("advection P2", check(BilinearTerm::Advection(VecCoef::Qp(&b_qp)), P2, P2, &adv2)),
        ("vector mass", check(BilinearTerm::VectorMass(Coef::Const(2.0)), P2Vec, P2Vec, &vmass)),
        ("weighted deformation", check(BilinearTerm::Deformation(Coef::Qp(&w_qp)), P2Vec, P2Vec, &deform)),
        ("velocity-gradient coupling", check(BilinearTerm::VelocityGradient, P2Vec, P1, &ugradq)),
        ("pressure-divergence coupling", check(BilinearTerm::PressureDivergence, P1, P2Vec, &pdivv)),
    ]
}

/// L2 errors of the P2 pure-Neumann Poisson solve for
/// `u = cos(pi x) cos(pi y)` on `n x n` meshes, with observed orders.
pub fn neumann_poisson_orders(ns: &[usize]) -> (Vec<f64>, Vec<f64>) {
    use spnp_core::fem::{solve_zero_mean, CompatibilityPolicy, LinearTerm};
    use std::f64::consts::PI;
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let disc = Discretization::unit_square(n).unwrap();
            let f: Vec<f64> = disc
                .qp_points
                .iter()
                .map(|p| 2.0 * PI * PI * (PI * p[0]).cos() * (PI * p[1]).cos())
                .collect();
            let a = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P2, SpaceKind::P2).unwrap();
            let b = disc.assemble_vector(&[LinearTerm::Source(Coef::Qp(&f))], SpaceKind::P2).unwrap();
            let m = disc.basis_integrals(SpaceKind::P2);
            let x = solve_zero_mean(&a, &b, &m, CompatibilityPolicy::Strict).unwrap();
            let u = spnp_core::fem::Field { space: SpaceKind::P2, coeffs: x };
            disc.error_norm_l2(&u, |x, y| (PI * x).cos() * (PI * y).cos()).unwrap()
        })
        .collect();
    let orders = errs.windows(2).zip(ns.windows(2)).map(|(e, n)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln()).collect();
    (errs, orders)
}
