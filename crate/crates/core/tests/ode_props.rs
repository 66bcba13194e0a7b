//! Solver-order, reversibility, and gradient-through-solver properties.

use phymotion::error::Result;
use phymotion::ode::{ode_solve, rollout, Method};
use phymotion::tensor::check::{check_gradients, FD_STEP};
use phymotion::tensor::{Graph, Tensor, Val};

fn exp_flow(g: &mut Graph<f64>, z: Val, _t: f64) -> Result<Val> {
    Ok(g.scale(z, 1.0))
}

fn solve_exp(h: f64, method: Method) -> f64 {
    let mut g = Graph::new();
    let z0 = g.leaf(Tensor::scalar(1.0f64));
    let states = ode_solve(&mut g, &exp_flow, z0, 0.0, 1.0, h, method).unwrap();
    g.value(*states.last().unwrap()).item()
}

#[test]
fn rk4_empirical_order_is_four() {
    let e = std::f64::consts::E;
    let err1 = (solve_exp(0.1, Method::Rk4) - e).abs();
    let err2 = (solve_exp(0.05, Method::Rk4) - e).abs();
    let ratio = err1 / err2;
    assert!((14.0..=18.0).contains(&ratio), "halving ratio {ratio}");
    let order = ratio.log2();
    assert!((3.7..=4.3).contains(&order), "order {order}");
}

#[test]
fn euler_empirical_order_is_one() {
    let e = std::f64::consts::E;
    let err1 = (solve_exp(0.01, Method::Euler) - e).abs();
    let err2 = (solve_exp(0.005, Method::Euler) - e).abs();
    let order = (err1 / err2).log2();
    assert!((0.8..=1.2).contains(&order), "order {order}");
}

#[test]
fn constant_acceleration_is_exact() {
    // dx/dt = v, dv/dt = -1 from (x, v) = (0, 2): x(2) = 2, v(2) = 0.
    let field = |g: &mut Graph<f64>, z: Val, _t: f64| -> Result<Val> {
        let v = g.slice_cols(z, 1, 2)?;
        let ones = g.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let a = g.scale(ones, -1.0);
        g.concat_cols(&[v, a])
    };
    let mut g = Graph::new();
    let z0 = g.leaf(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap());
    let states = ode_solve(&mut g, &field, z0, 0.0, 2.0, 0.1, Method::Rk4).unwrap();
    let end = g.value(*states.last().unwrap());
    assert!((end.data()[0] - 2.0).abs() < 1e-12, "x = {}", end.data()[0]);
    assert!(end.data()[1].abs() < 1e-12, "v = {}", end.data()[1]);
}

#[test]
fn forward_then_negated_backward_returns_to_start() {
    // planar rotation field, smooth and norm-preserving
    let rot = |g: &mut Graph<f64>, z: Val, _t: f64| -> Result<Val> {
        let x = g.slice_cols(z, 0, 1)?;
        let y = g.slice_cols(z, 1, 2)?;
        let negy = g.scale(y, -1.0);
        g.concat_cols(&[negy, x])
    };
    let neg_rot = |g: &mut Graph<f64>, z: Val, t: f64| -> Result<Val> {
        let d = rot(g, z, t)?;
        Ok(g.scale(d, -1.0))
    };
    let mut g = Graph::new();
    let z0 = g.leaf(Tensor::matrix(1, 2, vec![0.8, -0.4]).unwrap());
    let fwd = ode_solve(&mut g, &rot, z0, 0.0, 1.0, 0.01, Method::Rk4).unwrap();
    let back = ode_solve(&mut g, &neg_rot, *fwd.last().unwrap(), 1.0, 1.0, 0.01, Method::Rk4)
        .unwrap();
    let end = g.value(*back.last().unwrap());
    assert!((end.data()[0] - 0.8).abs() < 1e-5);
    assert!((end.data()[1] + 0.4).abs() < 1e-5);
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let a = solve_exp(0.1, Method::Rk4);
    let b = solve_exp(0.1, Method::Rk4);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn linear_rollout_negates_with_initial_state() {
    let m = Tensor::matrix(2, 2, vec![0.2, -0.9, 0.7, -0.1]).unwrap();
    let run = |z0v: Vec<f64>| -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.leaf(m.clone());
        let lin = |g: &mut Graph<f64>, z: Val, _t: f64| g.matmul(z, a);
        let z0 = g.leaf(Tensor::matrix(1, 2, z0v).unwrap());
        let frames = rollout(&mut g, &lin, z0, 0.0, 3, 0.1, 4, Method::Rk4).unwrap();
        frames.iter().map(|&f| g.value(f).data().to_vec()).collect()
    };
    let pos = run(vec![0.5, -1.2]);
    let neg = run(vec![-0.5, 1.2]);
    for (p, n) in pos.iter().zip(&neg) {
        for (a, b) in p.iter().zip(n) {
            assert!((a + b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

/// exp(A * t) by plain series; converges fast for the small test matrices.
fn expm(a: &[f64], n: usize, t: f64) -> Vec<f64> {
    let mut result = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    let mut term = result.clone();
    for k in 1..60 {
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..n {
                    s += term[i * n + l] * a[l * n + j];
                }
                next[i * n + j] = s * t / k as f64;
            }
        }
        for (r, v) in result.iter_mut().zip(&next) {
            *r += v;
        }
        term = next;
    }
    result
}

#[test]
fn gradient_through_solver_matches_matrix_exponential() {
    // loss = |z(tau)|^2 on dz/dt = z A (row-state convention); closed form
    // d loss / d z0 = 2 z0 E E^T with E = expm(A tau).
    let n = 4;
    let a_data = vec![
        0.1, -0.6, 0.3, 0.0, //
        0.5, 0.0, -0.2, 0.4, //
        -0.3, 0.2, 0.1, -0.5, //
        0.0, 0.4, -0.1, -0.2,
    ];
    let z0_data = vec![0.7, -0.3, 0.5, 0.2];
    let tau = 0.6;
    let h = 0.05;

    let mut g = Graph::new();
    let a = g.leaf(Tensor::matrix(n, n, a_data.clone()).unwrap());
    let lin = |g: &mut Graph<f64>, z: Val, _t: f64| g.matmul(z, a);
    let z0 = g.var(Tensor::matrix(1, n, z0_data.clone()).unwrap());
    let states = ode_solve(&mut g, &lin, z0, 0.0, tau, h, Method::Rk4).unwrap();
    let zt = *states.last().unwrap();
    let sq = g.mul(zt, zt).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    let analytic = g.grad(z0).unwrap().data().to_vec();

    // closed form: grad_i = 2 * sum_j (z0 E)_j * E_ij
    let e = expm(&a_data, n, tau);
    let mut ze = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            ze[j] += z0_data[i] * e[i * n + j];
        }
    }
    for i in 0..n {
        let closed: f64 = 2.0 * (0..n).map(|j| ze[j] * e[i * n + j]).sum::<f64>();
        let rel = (analytic[i] - closed).abs() / closed.abs().max(1e-9);
        assert!(rel < 1e-3, "component {i}: graph {} vs closed {closed}", analytic[i]);
    }

    // independent check: finite differences of the discrete solve
    let a_t = Tensor::matrix(n, n, a_data.clone()).unwrap();
    let report = check_gradients(
        &[Tensor::matrix(1, n, z0_data).unwrap()],
        FD_STEP,
        move |g, vars| {
            let am = g.leaf(a_t.clone());
            let lin = |g: &mut Graph<f64>, z: Val, _t: f64| g.matmul(z, am);
            let states = ode_solve(g, &lin, vars[0], 0.0, tau, h, Method::Rk4)?;
            let zt = *states.last().unwrap();
            let sq = g.mul(zt, zt)?;
            Ok(g.sum_all(sq))
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "fd rel err {}", report.max_rel_err);
}
