//! Dual-branch architecture: shared backbone over observations, a strictly
//! per-frame appearance head, a motion head with temporal self-attention,
//! the latent mapping into ODE state space, the learned dynamics, the
//! readout back to motion-feature space, and a classification head
//! consuming both branches.

use crate::error::{Error, Result};
use crate::nn::{Act, AttentionBlock, Linear, Mlp, ParamId, ParamSet};
use crate::ode::{rollout, Method, MlpDynamics};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Val};
use serde::{Deserialize, Serialize};

/// Architecture of the latent mapping and readout pair. `Mlp` is the
/// production shape; `Linear` exists so tests can wire the pair to identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMapKind {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Observation dimension consumed by the backbone.
    pub d_obs: usize,
    /// Backbone feature width.
    pub d_h: usize,
    /// Motion feature width.
    pub d_m: usize,
    /// Appearance feature width.
    pub d_a: usize,
    /// Latent ODE state width.
    pub d_z: usize,
    pub attn_blocks: usize,
    pub attn_ffn_hidden: usize,
    pub dynamics_hidden: usize,
    /// Prediction horizon in frames.
    pub n_pred: usize,
    /// Latent seconds per frame boundary.
    pub frame_dt: f64,
    /// Solver substeps per frame.
    pub substeps: usize,
    pub method: Method,
    /// Hard-wire dx/dt = v in the latent state and learn only acceleration.
    pub structured_dynamics: bool,
    /// Feed normalized time into the dynamics network.
    pub append_time: bool,
    pub latent_map: LatentMapKind,
    /// Positional-embedding table length (maximum sequence length).
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_obs: 32,
            d_h: 64,
            d_m: 32,
            d_a: 16,
            d_z: 32,
            attn_blocks: 2,
            attn_ffn_hidden: 64,
            dynamics_hidden: 64,
            n_pred: 3,
            frame_dt: 0.1,
            substeps: 4,
            method: Method::Rk4,
            structured_dynamics: false,
            append_time: false,
            latent_map: LatentMapKind::Mlp,
            max_frames: 600,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("d_obs", self.d_obs),
            ("d_h", self.d_h),
            ("d_m", self.d_m),
            ("d_a", self.d_a),
            ("d_z", self.d_z),
            ("attn_blocks", self.attn_blocks),
            ("n_pred", self.n_pred),
            ("substeps", self.substeps),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return Err(Error::Param(format!("{what} must be positive")));
            }
        }
        if self.structured_dynamics && self.d_z % 2 != 0 {
            return Err(Error::Param(format!(
                "structured dynamics needs an even d_z, got {}",
                self.d_z
            )));
        }
        if self.frame_dt <= 0.0 {
            return Err(Error::Param("frame_dt must be positive".into()));
        }
        Ok(())
    }

    /// Minimum sequence length the physics-loss window requires.
    pub fn min_frames(&self) -> usize {
        2 * self.n_pred + 1
    }
}

/// Per-frame features of one encoded clip, on the graph.
pub struct FeatureSeq {
    /// Backbone features `[T, d_h]`.
    pub h: Val,
    /// Appearance features `[T, d_a]`, strictly per-frame.
    pub f_app: Val,
    /// Motion features `[T, d_m]` from the temporal-attention head.
    pub f_mot: Val,
    /// Attention weights of each block, `[T, T]`.
    pub attn: Vec<Val>,
}

pub struct DualBranchModel {
    pub config: ModelConfig,
    backbone: Mlp,
    app_head: Mlp,
    motion_norm: crate::nn::LayerNorm,
    pos_emb: ParamId,
    blocks: Vec<AttentionBlock>,
    motion_proj: Linear,
    motion_out_norm: crate::nn::LayerNorm,
    phi: Mlp,
    dynamics: Mlp,
    readout: Mlp,
    classifier: Linear,
}

pub const N_CLASSES: usize = 5;

impl DualBranchModel {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut Rng,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let backbone =
            Mlp::new(ps, rng, "backbone", &[c.d_obs, c.d_h, c.d_h], false)?;
        let app_head = Mlp::new(ps, rng, "appearance", &[c.d_h, c.d_h / 2, c.d_a], false)?;
        let motion_norm = crate::nn::LayerNorm::new(ps, "motion.norm", c.d_h)?;
        let pos_emb = ps.add(
            "motion.pos",
            crate::nn::normal_init(rng, c.max_frames, c.d_h, 0.3),
        )?;
        let mut blocks = Vec::with_capacity(c.attn_blocks);
        for i in 0..c.attn_blocks {
            blocks.push(AttentionBlock::new(
                ps,
                rng,
                &format!("motion.blk{i}"),
                c.d_h,
                c.attn_ffn_hidden,
            )?);
        }
        let motion_proj = Linear::new(ps, rng, "motion.proj", c.d_h, c.d_m, true)?;
        let motion_out_norm = crate::nn::LayerNorm::new(ps, "motion.out_norm", c.d_m)?;
        let (phi, readout) = match c.latent_map {
            LatentMapKind::Mlp => (
                Mlp::new(ps, rng, "latent_map", &[c.d_m, c.d_h, c.d_z], true)?,
                Mlp::new(ps, rng, "readout", &[c.d_z, c.d_h, c.d_m], false)?,
            ),
            LatentMapKind::Linear => (
                Mlp::new(ps, rng, "latent_map", &[c.d_m, c.d_z], false)?,
                Mlp::new(ps, rng, "readout", &[c.d_z, c.d_m], false)?,
            ),
        };
        let dyn_out = if c.structured_dynamics { c.d_z / 2 } else { c.d_z };
        let dyn_in = if c.append_time { c.d_z + 1 } else { c.d_z };
        let dynamics = Mlp::with_activation(
            ps,
            rng,
            "dynamics",
            &[dyn_in, c.dynamics_hidden, dyn_out],
            false,
            Act::Tanh,
        )?;
        let classifier = Linear::new(ps, rng, "classifier", c.d_m + c.d_a, N_CLASSES, true)?;
        // the prediction pathway starts inert: zero dynamics (identity flow)
        // and zero readout keep the initial prediction loss at its natural
        // copy-level floor instead of shocking the encoder
        dynamics.zero_init_output(ps);
        readout.zero_init_output(ps);
        Ok(DualBranchModel {
            config: config.clone(),
            backbone,
            app_head,
            motion_norm,
            pos_emb,
            blocks,
            motion_proj,
            motion_out_norm,
            phi,
            dynamics,
            readout,
            classifier,
        })
    }

    /// Parameter ids of the dynamics function (the gradient-clipping group).
    pub fn dynamics_param_ids<S: Scalar>(&self, ps: &ParamSet<S>) -> Vec<ParamId> {
        ps.ids_with_prefix("dynamics.")
    }

    /// Encode one clip of observations `[T, d_obs]` into per-frame features.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        obs: Val,
    ) -> Result<FeatureSeq> {
        let c = &self.config;
        let t_len = g.value(obs).rows();
        if g.value(obs).cols() != c.d_obs {
            return Err(Error::Shape(format!(
                "encode expects [T, {}] observations, got {:?}",
                c.d_obs,
                g.value(obs).shape()
            )));
        }
        if t_len < c.min_frames() {
            return Err(Error::Contract(format!(
                "encode needs at least {} frames (2 * n_pred + 1), got {t_len}",
                c.min_frames()
            )));
        }
        if t_len > c.max_frames {
            return Err(Error::Range(format!(
                "clip length {t_len} exceeds the positional table ({})",
                c.max_frames
            )));
        }
        let h = self.backbone.apply(g, ps, obs)?;
        let f_app = self.app_head.apply(g, ps, h)?;
        let normed = self.motion_norm.apply(g, ps, h)?;
        let pos_all = ps.bind(g, self.pos_emb);
        let pos = g.slice_rows(pos_all, 0, t_len)?;
        let mut x = g.add(normed, pos)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.apply(g, ps, x)?;
            x = y;
            attn.push(a);
        }
        let proj = self.motion_proj.apply(g, ps, x)?;
        let f_mot = self.motion_out_norm.apply(g, ps, proj)?;
        Ok(FeatureSeq { h, f_app, f_mot, attn })
    }

    fn dynamics_fn<'a, S: Scalar>(&'a self, ps: &'a ParamSet<S>) -> MlpDynamics<'a, S> {
        MlpDynamics {
            mlp: &self.dynamics,
            ps,
            structured: self.config.structured_dynamics,
            append_time: self.config.append_time,
            time_scale: 1.0,
        }
    }

    /// Map motion-feature rows `[M, d_m]` into latent states `[M, d_z]`.
    pub fn to_latent<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        f_mot_rows: Val,
    ) -> Result<Val> {
        self.phi.apply(g, ps, f_mot_rows)
    }

    /// Roll latent states forward `n` frames and read out predicted motion
    /// features after each frame: returns `n` values of shape `[M, d_m]`.
    pub fn rollout_features<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        z0: Val,
        t0: f64,
        n: usize,
    ) -> Result<Vec<Val>> {
        let c = &self.config;
        let f = self.dynamics_fn(ps);
        let states = rollout(g, &f, z0, t0, n, c.frame_dt, c.substeps, c.method)?;
        states.into_iter().map(|z| self.readout.apply(g, ps, z)).collect()
    }

    /// Predict motion features for frames `t+1 ..= t+n` from the state at
    /// frame `t` (0-based). Returns `n` rows of shape `[1, d_m]`.
    pub fn predict_motion<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        f_mot: Val,
        t: usize,
        n: usize,
    ) -> Result<Vec<Val>> {
        if n < 1 {
            return Err(Error::Param("prediction horizon must be at least 1".into()));
        }
        let t_len = g.value(f_mot).rows();
        if t + n >= t_len + 1 {
            return Err(Error::Range(format!(
                "horizon t={t} + n={n} overruns the {t_len}-frame sequence"
            )));
        }
        let row = g.slice_rows(f_mot, t, t + 1)?;
        let z0 = self.to_latent(g, ps, row)?;
        self.rollout_features(g, ps, z0, t as f64 * self.config.frame_dt, n)
    }

    /// Mean-pooled concatenated clip features `[1, d_m + d_a]`.
    pub fn pooled_features<S: Scalar>(&self, g: &mut Graph<S>, seq: &FeatureSeq) -> Result<Val> {
        let pm = g.mean_rows(seq.f_mot);
        let pa = g.mean_rows(seq.f_app);
        g.concat_cols(&[pm, pa])
    }

    /// Class logits `[B, 5]` from pooled feature rows `[B, d_m + d_a]`.
    pub fn classify_pooled<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        pooled: Val,
    ) -> Result<Val> {
        self.classifier.apply(g, ps, pooled)
    }

    /// Logits for a single encoded clip.
    pub fn classify<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        seq: &FeatureSeq,
    ) -> Result<Val> {
        let pooled = self.pooled_features(g, seq)?;
        self.classify_pooled(g, ps, pooled)
    }

    /// Zero every temporal pathway of the motion head: attention
    /// projections and the positional embedding. The motion features become
    /// a per-frame function of the backbone features.
    pub fn frame_wise_ablation<S: Scalar>(&self, ps: &mut ParamSet<S>) {
        ps.zero_value(self.pos_emb);
        for block in &self.blocks {
            for linear in [&block.wq, &block.wk, &block.wv, &block.wo] {
                ps.zero_value(linear.w);
                if let Some(b) = linear.b {
                    ps.zero_value(b);
                }
            }
        }
    }
}

/// Build a model plus its parameter set from a seed, in one deterministic
/// construction order.
pub fn build_model<S: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<(DualBranchModel, ParamSet<S>)> {
    let mut ps = ParamSet::new();
    let mut rng = Rng::from_parts(seed, 0, 42);
    let model = DualBranchModel::new(&mut ps, &mut rng, config)?;
    Ok((model, ps))
}

/// Tensor helper: detached copy of a graph value as a constant leaf.
pub fn detached<S: Scalar>(g: &mut Graph<S>, v: Val) -> Val {
    let t: Tensor<S> = g.value(v).clone();
    g.leaf(t)
}
