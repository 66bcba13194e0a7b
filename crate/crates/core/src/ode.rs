//! Differentiable fixed-step ODE integration.
//!
//! Solving happens on the compute graph, so gradients with respect to the
//! dynamics parameters and the initial state come from backpropagating
//! through the unrolled solver steps (discretize-then-optimize).

use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamSet};
use crate::tensor::{Graph, Scalar, Val};
use serde::{Deserialize, Serialize};

/// Integration scheme. RK4 is the production solver; Euler exists as the
/// first-order baseline for convergence tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Euler,
}

/// A parameterized time derivative `(z, t) -> dz/dt`, evaluated on the graph.
pub trait Dynamics<S: Scalar> {
    fn eval(&self, g: &mut Graph<S>, z: Val, t: f64) -> Result<Val>;
}

impl<S: Scalar, F> Dynamics<S> for F
where
    F: Fn(&mut Graph<S>, Val, f64) -> Result<Val>,
{
    fn eval(&self, g: &mut Graph<S>, z: Val, t: f64) -> Result<Val> {
        self(g, z, t)
    }
}

/// MLP-backed dynamics over the latent state.
///
/// With `structured` set, the state is read as `[x-block, v-block]`,
/// `dx/dt = v` is hard-wired, and the network only produces the
/// acceleration block. `append_time` feeds `t * time_scale` as an extra
/// input column; off by default (autonomous system).
pub struct MlpDynamics<'a, S> {
    pub mlp: &'a Mlp,
    pub ps: &'a ParamSet<S>,
    pub structured: bool,
    pub append_time: bool,
    pub time_scale: f64,
}

impl<'a, S: Scalar> MlpDynamics<'a, S> {
    pub fn new(mlp: &'a Mlp, ps: &'a ParamSet<S>) -> Self {
        MlpDynamics { mlp, ps, structured: false, append_time: false, time_scale: 1.0 }
    }
}

impl<S: Scalar> Dynamics<S> for MlpDynamics<'_, S> {
    fn eval(&self, g: &mut Graph<S>, z: Val, t: f64) -> Result<Val> {
        let (rows, d) = (g.value(z).rows(), g.value(z).cols());
        let input = if self.append_time {
            let tv = S::from_f64(t * self.time_scale);
            let col = g.leaf(crate::tensor::Tensor::new(vec![rows, 1], vec![tv; rows])?);
            g.concat_cols(&[z, col])?
        } else {
            z
        };
        let out = self.mlp.apply(g, self.ps, input)?;
        if self.structured {
            if d % 2 != 0 {
                return Err(Error::Contract(format!(
                    "structured dynamics needs an even state dimension, got {d}"
                )));
            }
            if g.value(out).cols() != d / 2 {
                return Err(Error::Shape(format!(
                    "structured dynamics expects acceleration width {}, got {}",
                    d / 2,
                    g.value(out).cols()
                )));
            }
            let v_block = g.slice_cols(z, d / 2, d)?;
            g.concat_cols(&[v_block, out])
        } else {
            if g.value(out).cols() != d {
                return Err(Error::Shape(format!(
                    "dynamics output width {} does not match state width {d}",
                    g.value(out).cols()
                )));
            }
            Ok(out)
        }
    }
}

fn check_finite<S: Scalar>(g: &Graph<S>, z: Val, step: usize) -> Result<()> {
    if g.value(z).all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, detail: "non-finite state component".into() })
    }
}

fn rk4_step<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl Dynamics<S>,
    z: Val,
    t: f64,
    h: f64,
) -> Result<Val> {
    let k1 = f.eval(g, z, t)?;
    let half_k1 = g.scale(k1, h / 2.0);
    let z2 = g.add(z, half_k1)?;
    let k2 = f.eval(g, z2, t + h / 2.0)?;
    let half_k2 = g.scale(k2, h / 2.0);
    let z3 = g.add(z, half_k2)?;
    let k3 = f.eval(g, z3, t + h / 2.0)?;
    let full_k3 = g.scale(k3, h);
    let z4 = g.add(z, full_k3)?;
    let k4 = f.eval(g, z4, t + h)?;

    let s12 = g.add(k1, k2)?;
    let s12 = g.add(s12, k2)?;
    let s34 = g.add(k3, k3)?;
    let s34 = g.add(s34, k4)?;
    let total = g.add(s12, s34)?;
    let incr = g.scale(total, h / 6.0);
    g.add(z, incr)
}

fn euler_step<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl Dynamics<S>,
    z: Val,
    t: f64,
    h: f64,
) -> Result<Val> {
    let k = f.eval(g, z, t)?;
    let incr = g.scale(k, h);
    g.add(z, incr)
}

/// Integrate `dz/dt = f(z, t)` from `t0` over a horizon `tau` with fixed
/// step `h`. Returns the state after every step; the last entry is
/// `z(t0 + tau)`. `tau` must be a positive integer multiple of `h`.
pub fn ode_solve<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl Dynamics<S>,
    z0: Val,
    t0: f64,
    tau: f64,
    h: f64,
    method: Method,
) -> Result<Vec<Val>> {
    if h <= 0.0 {
        return Err(Error::Param(format!("step size must be positive, got {h}")));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("horizon must be positive, got {tau}")));
    }
    let steps = (tau / h).round();
    if (tau - steps * h).abs() > 1e-9 || steps < 1.0 {
        return Err(Error::Param(format!(
            "horizon {tau} is not an integer multiple of step {h}"
        )));
    }
    let steps = steps as usize;
    let mut states = Vec::with_capacity(steps);
    let mut z = z0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        z = match method {
            Method::Rk4 => rk4_step(g, f, z, t, h)?,
            Method::Euler => euler_step(g, f, z, t, h)?,
        };
        check_finite(g, z, i)?;
        states.push(z);
    }
    Ok(states)
}

/// Advance `z_t` across `n_frames` frame boundaries of length `frame_dt`,
/// chaining `ode_solve` per frame with `substeps` internal steps. Returns
/// the state at each frame boundary.
pub fn rollout<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl Dynamics<S>,
    z_t: Val,
    t0: f64,
    n_frames: usize,
    frame_dt: f64,
    substeps: usize,
    method: Method,
) -> Result<Vec<Val>> {
    if n_frames < 1 {
        return Err(Error::Param("rollout needs at least one frame".into()));
    }
    if substeps < 1 {
        return Err(Error::Param("rollout needs at least one substep per frame".into()));
    }
    let h = frame_dt / substeps as f64;
    let mut frames = Vec::with_capacity(n_frames);
    let mut z = z_t;
    for k in 0..n_frames {
        let t = t0 + k as f64 * frame_dt;
        let states = ode_solve(g, f, z, t, frame_dt, h, method)?;
        z = *states.last().expect("ode_solve returns at least one state");
        frames.push(z);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn identity_flow(g: &mut Graph<f64>, z: Val, _t: f64) -> Result<Val> {
        Ok(g.scale(z, 1.0))
    }

    #[test]
    fn zero_dynamics_is_identity_flow() {
        let zero = |g: &mut Graph<f64>, z: Val, _t: f64| Ok(g.scale(z, 0.0));
        for method in [Method::Rk4, Method::Euler] {
            let mut g = Graph::new();
            let z0 = g.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
            let states = ode_solve(&mut g, &zero, z0, 0.0, 1.0, 0.25, method).unwrap();
            assert_eq!(states.len(), 4);
            assert_eq!(g.value(*states.last().unwrap()).data(), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn exponential_growth_matches_e() {
        let mut g = Graph::new();
        let z0 = g.leaf(Tensor::scalar(1.0f64));
        let states =
            ode_solve(&mut g, &identity_flow, z0, 0.0, 1.0, 0.1, Method::Rk4).unwrap();
        let z1 = g.value(*states.last().unwrap()).item();
        assert!((z1 - std::f64::consts::E).abs() < 5e-6, "got {z1}");
    }

    #[test]
    fn non_multiple_horizon_rejected() {
        let mut g = Graph::new();
        let z0 = g.leaf(Tensor::scalar(1.0f64));
        let err = ode_solve(&mut g, &identity_flow, z0, 0.0, 1.0, 0.3, Method::Rk4);
        assert!(matches!(err, Err(Error::Param(_))));
    }

    #[test]
    fn divergence_reports_step_index() {
        let blowup = |g: &mut Graph<f64>, z: Val, _t: f64| Ok(g.scale(z, 1e300));
        let mut g = Graph::new();
        let z0 = g.leaf(Tensor::scalar(1.0f64));
        match ode_solve(&mut g, &blowup, z0, 0.0, 1.0, 0.5, Method::Rk4) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rollout_single_frame_equals_ode_solve() {
        let mut g = Graph::new();
        let z0 = g.leaf(Tensor::scalar(1.0f64));
        let direct = ode_solve(&mut g, &identity_flow, z0, 0.0, 0.1, 0.025, Method::Rk4).unwrap();
        let mut g2 = Graph::new();
        let z0b = g2.leaf(Tensor::scalar(1.0f64));
        let rolled =
            rollout(&mut g2, &identity_flow, z0b, 0.0, 1, 0.1, 4, Method::Rk4).unwrap();
        assert_eq!(
            g.value(*direct.last().unwrap()).data(),
            g2.value(rolled[0]).data()
        );
    }

    #[test]
    fn rollout_prefix_consistency_is_bitwise() {
        let run = |n: usize| -> Vec<f64> {
            let mut g = Graph::new();
            let z0 = g.leaf(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
            let frames =
                rollout(&mut g, &identity_flow, z0, 0.0, n, 0.1, 4, Method::Rk4).unwrap();
            g.value(frames[1]).data().to_vec()
        };
        assert_eq!(run(3), run(2));
    }
}
