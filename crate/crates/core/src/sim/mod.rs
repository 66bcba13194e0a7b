//! Synthetic rigid-body motion episodes with exact ground-truth kinematics.
//!
//! Five motion classes over a fixed 2-D plane (x horizontal, y vertical).
//! Uniform, accelerated, decelerated, and parabolic motion use closed-form
//! kinematics; rebound resolves floor impacts by solving the exact impact
//! time inside each frame interval and reflecting the vertical velocity,
//! so no frame is ever recorded below the floor.

mod dataset;
mod observe;

pub use dataset::{
    generate_dataset, manifest_path, read_episode_file, write_episode_file, Dataset,
    DatasetSpec, Episode, Manifest, ManifestEntry, Split,
};
pub use observe::{render_observations, MixingMap, Nonlinearity, ObservationModel};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};

pub const MIN_FRAMES: usize = 20;
pub const MAX_FRAMES: usize = 600;

/// The five motion classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Uniform,
    Accelerated,
    Decelerated,
    Parabolic,
    Rebound,
}

impl MotionClass {
    pub const ALL: [MotionClass; 5] = [
        MotionClass::Uniform,
        MotionClass::Accelerated,
        MotionClass::Decelerated,
        MotionClass::Parabolic,
        MotionClass::Rebound,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("class listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Uniform => "uniform",
            MotionClass::Accelerated => "accelerated",
            MotionClass::Decelerated => "decelerated",
            MotionClass::Parabolic => "parabolic",
            MotionClass::Rebound => "rebound",
        }
    }

    pub fn from_index(i: usize) -> Option<MotionClass> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn zero() -> Self {
        Vec2 { x: 0.0, y: 0.0 }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

/// Ground-truth state of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub t: f64,
    pub position: Vec2,
    pub velocity: Vec2,
}

impl KinematicState {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Mechanical energy per unit mass: v^2/2 + g*y.
    pub fn energy(&self, gravity: f64) -> f64 {
        0.5 * self.velocity.norm().powi(2) + gravity * self.position.y
    }
}

/// Physical parameters of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysParams {
    /// Gravitational acceleration, m/s^2 (>= 0).
    pub gravity: f64,
    pub initial_position: Vec2,
    pub initial_velocity: Vec2,
    /// Signed acceleration along the velocity direction (accelerated > 0,
    /// decelerated < 0); unused by the other classes.
    pub accel: f64,
    /// Restitution coefficient in (0, 1]; rebound only.
    pub restitution: f64,
    /// Floor height, meters; rebound only.
    pub floor: f64,
    /// Seconds per frame.
    pub dt: f64,
}

impl Default for PhysParams {
    fn default() -> Self {
        PhysParams {
            gravity: 9.8,
            initial_position: Vec2::zero(),
            initial_velocity: Vec2::new(1.0, 0.0),
            accel: 0.0,
            restitution: 1.0,
            floor: 0.0,
            dt: 0.1,
        }
    }
}

/// Ground-truth state sequence of one synthetic episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    pub class_label: MotionClass,
    pub dt: f64,
    pub frames: Vec<KinematicState>,
    pub params: PhysParams,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn validate(class: MotionClass, params: &PhysParams, n_frames: usize) -> Result<()> {
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&n_frames) {
        return Err(Error::Range(format!(
            "n_frames {n_frames} outside [{MIN_FRAMES}, {MAX_FRAMES}]"
        )));
    }
    if params.dt <= 0.0 {
        return Err(Error::Param(format!("dt must be positive, got {}", params.dt)));
    }
    if params.gravity < 0.0 {
        return Err(Error::Param(format!("gravity must be >= 0, got {}", params.gravity)));
    }
    match class {
        MotionClass::Accelerated => {
            if params.accel <= 0.0 {
                return Err(Error::Param(format!(
                    "accelerated motion needs accel > 0, got {}",
                    params.accel
                )));
            }
            if params.initial_velocity.norm() == 0.0 {
                return Err(Error::Param(
                    "accelerated motion needs a nonzero initial velocity".into(),
                ));
            }
        }
        MotionClass::Decelerated => {
            if params.accel >= 0.0 {
                return Err(Error::Param(format!(
                    "decelerated motion needs accel < 0, got {}",
                    params.accel
                )));
            }
            if params.initial_velocity.norm() == 0.0 {
                return Err(Error::Param(
                    "decelerated motion needs a nonzero initial velocity".into(),
                ));
            }
        }
        MotionClass::Parabolic | MotionClass::Rebound => {
            if params.gravity == 0.0 {
                return Err(Error::Param(format!(
                    "{} motion needs gravity > 0",
                    class.name()
                )));
            }
            if class == MotionClass::Rebound {
                if !(params.restitution > 0.0 && params.restitution <= 1.0) {
                    return Err(Error::Param(format!(
                        "restitution must be in (0, 1], got {}",
                        params.restitution
                    )));
                }
                if params.initial_position.y < params.floor {
                    return Err(Error::Param(
                        "rebound initial height is below the floor".into(),
                    ));
                }
            }
        }
        MotionClass::Uniform => {}
    }
    Ok(())
}

/// Generate one episode. Kinematics are a pure function of the inputs;
/// `_seed` is reserved for stochastic extensions and currently unused.
pub fn generate_trajectory(
    class: MotionClass,
    params: &PhysParams,
    n_frames: usize,
    _seed: u64,
) -> Result<Trajectory> {
    validate(class, params, n_frames)?;
    let dt = params.dt;
    let frames = match class {
        MotionClass::Uniform => closed_form(params, n_frames, |t| {
            (params.initial_position + params.initial_velocity * t, params.initial_velocity)
        }),
        MotionClass::Accelerated | MotionClass::Decelerated => {
            let v0 = params.initial_velocity.norm();
            let dir = params.initial_velocity * (1.0 / v0);
            let a = params.accel;
            let n = if class == MotionClass::Decelerated {
                // keep every frame before the velocity would reverse sign
                let t_stop = v0 / (-a);
                let last = (t_stop / dt + 1e-9).floor() as usize;
                let n = n_frames.min(last + 1);
                if n < MIN_FRAMES {
                    return Err(Error::Param(format!(
                        "deceleration stops after {n} frame(s), below the minimum of {MIN_FRAMES}"
                    )));
                }
                n
            } else {
                n_frames
            };
            closed_form(params, n, |t| {
                let s = v0 * t + 0.5 * a * t * t;
                let speed = v0 + a * t;
                (params.initial_position + dir * s, dir * speed)
            })
        }
        MotionClass::Parabolic => {
            let g = params.gravity;
            closed_form(params, n_frames, |t| {
                let p = Vec2::new(
                    params.initial_position.x + params.initial_velocity.x * t,
                    params.initial_position.y + params.initial_velocity.y * t
                        - 0.5 * g * t * t,
                );
                let v = Vec2::new(
                    params.initial_velocity.x,
                    params.initial_velocity.y - g * t,
                );
                (p, v)
            })
        }
        MotionClass::Rebound => rebound_frames(params, n_frames),
    };
    Ok(Trajectory { id: 0, class_label: class, dt, frames, params: *params })
}

fn closed_form(
    params: &PhysParams,
    n_frames: usize,
    state_at: impl Fn(f64) -> (Vec2, Vec2),
) -> Vec<KinematicState> {
    (0..n_frames)
        .map(|i| {
            let t = i as f64 * params.dt;
            let (position, velocity) = state_at(t);
            KinematicState { t, position, velocity }
        })
        .collect()
}

const REST_SPEED: f64 = 1e-6;
const MAX_IMPACTS_PER_FRAME: usize = 64;

/// Event-stepped bouncing under gravity. Inside each frame interval the
/// exact impact time is the positive root of y(s) = floor; the vertical
/// velocity reflects scaled by the restitution. A ball whose bounce speed
/// drops under `REST_SPEED` (or that exceeds the per-frame impact budget in
/// a Zeno cascade) is set to rest on the floor.
fn rebound_frames(params: &PhysParams, n_frames: usize) -> Vec<KinematicState> {
    let g = params.gravity;
    let e = params.restitution;
    let floor = params.floor;
    let dt = params.dt;

    let mut frames = Vec::with_capacity(n_frames);
    let mut t_cur = 0.0f64;
    let mut y = params.initial_position.y;
    let mut vy = params.initial_velocity.y;
    let mut at_rest = y == floor && vy.abs() < REST_SPEED;

    for i in 0..n_frames {
        let t_frame = i as f64 * dt;
        let mut impacts = 0usize;
        while !at_rest {
            let tau = t_frame - t_cur;
            if tau <= 0.0 {
                break;
            }
            // first time y(s) = floor: positive root of y + vy s - g/2 s^2 = floor
            let disc = vy * vy + 2.0 * g * (y - floor);
            let tau_impact = (vy + disc.max(0.0).sqrt()) / g;
            if tau_impact > tau {
                y += vy * tau - 0.5 * g * tau * tau;
                vy -= g * tau;
                t_cur = t_frame;
                break;
            }
            let v_pre = vy - g * tau_impact;
            t_cur += tau_impact;
            y = floor;
            vy = -e * v_pre;
            impacts += 1;
            if vy.abs() < REST_SPEED || impacts > MAX_IMPACTS_PER_FRAME {
                vy = 0.0;
                at_rest = true;
            }
        }
        if at_rest {
            y = floor;
            vy = 0.0;
            t_cur = t_frame;
        }
        let x = params.initial_position.x + params.initial_velocity.x * t_frame;
        frames.push(KinematicState {
            t: t_frame,
            position: Vec2::new(x, y),
            velocity: Vec2::new(params.initial_velocity.x, vy),
        });
    }
    frames
}
