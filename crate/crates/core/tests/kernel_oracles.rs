mod common;

use common::{kernel_oracle_errors, neumann_poisson_orders, solve_dense};
use spnp_core::fem::{solve_zero_mean, BilinearTerm, Coef, CompatibilityPolicy, Discretization, LinearTerm, SpaceKind};
use spnp_core::sparse::{solve_direct, TripletBuilder};

#[test]
fn kernels_match_dense_oracle_on_unit_square() {
    for (name, err) in kernel_oracle_errors(1.0, 1.0) {
        assert!(err <= 1e-12, "{name}: {err:e}");
    }
}

#[test]
fn kernels_match_dense_oracle_on_stretched_cell() {
    for (name, err) in kernel_oracle_errors(2.0, 0.5) {
        assert!(err <= 1e-12, "{name}: {err:e}");
    }
}

#[test]
fn oracle_quadrature_is_exact_for_monomials() {
    let rule = common::duffy_rule(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 8);
    // integral of x^a y^b over the unit right triangle is a! b! / (a+b+2)!
    let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
    for a in 0..8u32 {
        for b in 0..(8 - a) {
            let q: f64 = rule.iter().map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32)).sum();
            assert!((q - fact(a) * fact(b) / fact(a + b + 2)).abs() < 1e-15);
        }
    }
}

#[test]
fn p2_neumann_poisson_converges_at_third_order() {
    let (errs, orders) = neumann_poisson_orders(&[4, 8, 16, 32]);
    assert!(errs.windows(2).all(|e| e[1] < e[0]));
    for o in orders {
        assert!((2.7..=3.3).contains(&o), "order {o}, errors {errs:?}");
    }
}

#[test]
fn p1_neumann_with_mean_constraint_matches_dense_solve() {
    let disc = Discretization::unit_square(6).unwrap();
    let f: Vec<f64> = disc.qp_points.iter().map(|p| (3.0 * p[0]).sin() - (3.0 * p[1]).cos() + p[0] * p[1]).collect();
    let k = disc.assemble(&[BilinearTerm::Stiffness(Coef::Const(1.0))], SpaceKind::P1, SpaceKind::P1).unwrap();
    let mut b = disc.assemble_vector(&[LinearTerm::Source(Coef::Qp(&f))], SpaceKind::P1).unwrap();
    let m = disc.basis_integrals(SpaceKind::P1);
    let n = b.len();
    // make the load compatible
    let mean = b.iter().sum::<f64>() / m.iter().sum::<f64>();
    for (bi, mi) in b.iter_mut().zip(&m) {
        *bi -= mean * mi;
    }
    let mut t = TripletBuilder::new(n + 1, n + 1);
    for i in 0..n {
        for (j, v) in k.row(i) {
            t.push(i, j, v);
        }
        t.push(i, n, m[i]);
        t.push(n, i, m[i]);
    }
    let aug = t.to_csr();
    let mut rhs = b.clone();
    rhs.push(0.0);
    let (x, _) = solve_direct(&aug, &rhs).unwrap();
    let dense = solve_dense(aug.to_dense(), rhs.clone());
    let diff = x.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-9, "{diff:e}");
    let y = solve_zero_mean(&k, &b, &m, CompatibilityPolicy::Strict).unwrap();
    let diff = y.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-9, "{diff:e}");
}
