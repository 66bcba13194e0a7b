//! Synthetic observation model.
//!
//! Stands in for rendered frames plus a visual backbone: each frame's
//! kinematic state is mixed with a per-episode appearance code through a
//! fixed random affine map and a pointwise nonlinearity, entangling motion
//! with appearance the way textures and lighting entangle it in video.

use super::Trajectory;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const STATE_DIM: usize = 4; // (x, y, vx, vy)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Tanh,
}

/// Fixed affine mixing from (scaled state, appearance code) to observation
/// space. Created once per dataset and serialized in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingMap {
    pub d_obs: usize,
    pub d_app: usize,
    /// Row-major `[d_obs, STATE_DIM]`.
    pub state_weights: Vec<f32>,
    /// Row-major `[d_obs, d_app]`.
    pub app_weights: Vec<f32>,
    pub bias: Vec<f32>,
    /// Per-component scaling of (x, y, vx, vy) before mixing, keeping the
    /// nonlinearity in its sensitive range for typical episode extents.
    pub state_gain: [f64; 4],
    pub app_gain: f64,
    pub nonlinearity: Nonlinearity,
    /// Strength of the per-episode contrast modulation the appearance code
    /// applies to the state contribution (lighting surrogate); 0 disables.
    pub contrast_mod: f64,
    /// Fixed projection from the appearance code to the contrast factor.
    pub contrast_weights: Vec<f32>,
}

impl Default for MixingMap {
    fn default() -> Self {
        MixingMap::identity_state()
    }
}

impl MixingMap {
    pub fn random(
        d_obs: usize,
        d_app: usize,
        state_gain: [f64; 4],
        app_gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (STATE_DIM + d_app) as f64;
        let std = 1.0 / fan_in.sqrt();
        let state_weights =
            (0..d_obs * STATE_DIM).map(|_| (rng.normal() * std) as f32).collect();
        let app_weights = (0..d_obs * d_app).map(|_| (rng.normal() * std) as f32).collect();
        let bias = (0..d_obs).map(|_| (rng.normal() * 0.1) as f32).collect();
        let contrast_weights = (0..d_app)
            .map(|_| (rng.normal() / (d_app.max(1) as f64).sqrt()) as f32)
            .collect();
        MixingMap {
            d_obs,
            d_app,
            state_weights,
            app_weights,
            bias,
            state_gain,
            app_gain,
            nonlinearity: Nonlinearity::Tanh,
            contrast_mod: 0.0,
            contrast_weights,
        }
    }

    pub fn with_contrast_mod(mut self, strength: f64) -> Self {
        self.contrast_mod = strength;
        self
    }

    /// Observation = raw state, no appearance, no nonlinearity. Test wiring.
    pub fn identity_state() -> Self {
        let mut state_weights = vec![0.0f32; STATE_DIM * STATE_DIM];
        for i in 0..STATE_DIM {
            state_weights[i * STATE_DIM + i] = 1.0;
        }
        MixingMap {
            d_obs: STATE_DIM,
            d_app: 0,
            state_weights,
            app_weights: Vec::new(),
            bias: vec![0.0; STATE_DIM],
            state_gain: [1.0; 4],
            app_gain: 1.0,
            nonlinearity: Nonlinearity::Identity,
            contrast_mod: 0.0,
            contrast_weights: Vec::new(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.state_weights.len() != self.d_obs * STATE_DIM
            || self.app_weights.len() != self.d_obs * self.d_app
            || self.bias.len() != self.d_obs
        {
            return Err(Error::Shape(format!(
                "mixing map buffers inconsistent with d_obs={} d_app={}",
                self.d_obs, self.d_app
            )));
        }
        Ok(())
    }
}

/// Mixing map plus the episode's appearance code and the noise level.
/// The appearance code is constant across all frames of the episode.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub map: MixingMap,
    pub appearance_code: Vec<f32>,
    pub noise_std: f64,
}

impl ObservationModel {
    pub fn new(map: MixingMap, appearance_code: Vec<f32>, noise_std: f64) -> Self {
        ObservationModel { map, appearance_code, noise_std }
    }
}

/// Render the per-frame observation matrix `[T, d_obs]` for one episode.
/// Deterministic in (trajectory, model, seed).
pub fn render_observations(
    traj: &Trajectory,
    model: &ObservationModel,
    seed: u64,
) -> Result<Tensor<f32>> {
    model.map.check()?;
    if model.appearance_code.len() != model.map.d_app {
        return Err(Error::Shape(format!(
            "appearance code length {} vs d_app {}",
            model.appearance_code.len(),
            model.map.d_app
        )));
    }
    if model.noise_std < 0.0 {
        return Err(Error::Param(format!("noise_std must be >= 0, got {}", model.noise_std)));
    }
    let m = &model.map;
    // the appearance contribution is frame-independent: precompute it
    let mut app_term = vec![0.0f64; m.d_obs];
    for o in 0..m.d_obs {
        let mut s = 0.0f64;
        for a in 0..m.d_app {
            s += m.app_weights[o * m.d_app + a] as f64 * model.appearance_code[a] as f64;
        }
        app_term[o] = m.app_gain * s + m.bias[o] as f64;
    }
    // per-episode contrast applied to the state contribution
    let contrast = if m.contrast_mod != 0.0 {
        if m.contrast_weights.len() != m.d_app {
            return Err(Error::Shape(format!(
                "contrast projection length {} vs d_app {}",
                m.contrast_weights.len(),
                m.d_app
            )));
        }
        let z: f64 = m
            .contrast_weights
            .iter()
            .zip(&model.appearance_code)
            .map(|(w, c)| *w as f64 * *c as f64)
            .sum();
        (m.contrast_mod * z.tanh()).exp()
    } else {
        1.0
    };

    let t_len = traj.len();
    let mut data = Vec::with_capacity(t_len * m.d_obs);
    for (fi, frame) in traj.frames.iter().enumerate() {
        let state = [
            frame.position.x * m.state_gain[0],
            frame.position.y * m.state_gain[1],
            frame.velocity.x * m.state_gain[2],
            frame.velocity.y * m.state_gain[3],
        ];
        let mut noise = Rng::from_parts(seed, traj.id, fi as u64);
        for o in 0..m.d_obs {
            let mut v = app_term[o];
            for (k, sv) in state.iter().enumerate() {
                v += contrast * m.state_weights[o * STATE_DIM + k] as f64 * sv;
            }
            v = match m.nonlinearity {
                Nonlinearity::Identity => v,
                Nonlinearity::Tanh => v.tanh(),
            };
            if model.noise_std > 0.0 {
                v += model.noise_std * noise.normal();
            }
            data.push(v as f32);
        }
    }
    Tensor::matrix(t_len, m.d_obs, data)
}
