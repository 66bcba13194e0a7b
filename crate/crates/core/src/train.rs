//! Loss assembly and the optimization loop.
//!
//! The total objective is the classification cross-entropy plus the
//! lambda-weighted trajectory-prediction loss and the lambda-weighted
//! motion/appearance independence loss, with the prediction and
//! independence terms individually toggleable for ablations. Gradient
//! clipping applies to the dynamics parameter group only. Runs are fully
//! reproducible from the seed in single-threaded mode.

use crate::error::{Error, Result};
use crate::hsic::{hsic_loss, KernelSpec};
use crate::model::{build_model, detached, DualBranchModel, ModelConfig};
use crate::nn::{save_checkpoint, AdamW, ParamSet};
use crate::rng::Rng;
use crate::sim::{Dataset, Episode, Split};
use crate::tensor::{Graph, Scalar, Tensor, Val};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

// substream namespaces for training-time randomness
const SUB_SHUFFLE: u64 = 300;
const SUB_CROP: u64 = 301;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Shared weight of the two auxiliary losses.
    pub lambda: f64,
    /// Optional separate weight for the independence term; defaults to
    /// `lambda` when absent.
    pub lambda_app: Option<f64>,
    /// Prediction-loss toggle (ablation arms).
    pub use_phys: bool,
    /// Independence-loss toggle (ablation arms).
    pub use_app: bool,
    /// Prediction horizon in frames.
    pub n_pred: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Max global gradient norm of the dynamics parameter group.
    pub clip_max_norm: f64,
    pub seed: u64,
    /// Fixed-length temporal crop per clip per step.
    pub crop_frames: usize,
    /// Cut the gradient into the encoder through prediction targets.
    pub detach_targets: bool,
    /// Average the prediction loss over its terms instead of summing.
    pub phys_loss_mean: bool,
    /// Linear learning-rate warmup steps (0 = constant).
    pub warmup_steps: usize,
    /// Linear ramp-in of the auxiliary loss weights over this many steps
    /// (0 = full strength from the first step).
    pub aux_warmup_steps: usize,
    pub kernel: KernelSpec,
    /// Estimate the independence loss over per-frame feature rows instead
    /// of per-clip pooled rows.
    pub hsic_per_frame: bool,
    /// Sample cap for the per-frame estimator (frames are strided to fit).
    pub hsic_max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lambda_app: None,
            use_phys: true,
            use_app: true,
            n_pred: 3,
            batch_size: 8,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.01,
            clip_max_norm: 1.0,
            seed: 0,
            crop_frames: 40,
            detach_targets: true,
            phys_loss_mean: true,
            warmup_steps: 0,
            aux_warmup_steps: 0,
            kernel: KernelSpec::default(),
            hsic_per_frame: false,
            hsic_max_samples: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(la) = self.lambda_app {
            if la < 0.0 {
                return Err(Error::Param(format!("lambda_app must be >= 0, got {la}")));
            }
        }
        if self.n_pred < 1 {
            return Err(Error::Param("n_pred must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Param("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.clip_max_norm <= 0.0 {
            return Err(Error::Param("clip_max_norm must be positive".into()));
        }
        if self.crop_frames < 2 * self.n_pred + 1 {
            return Err(Error::Param(format!(
                "crop_frames {} is shorter than the loss window (2 * n_pred + 1 = {})",
                self.crop_frames,
                2 * self.n_pred + 1
            )));
        }
        Ok(())
    }

    pub fn lambda_app_effective(&self) -> f64 {
        self.lambda_app.unwrap_or(self.lambda)
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task: f64,
    pub l_phys: f64,
    pub l_app: f64,
    pub total: f64,
}

/// One line of the step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_task: f64,
    pub l_phys: f64,
    pub l_app: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Trajectory-prediction loss over the valid window of one clip.
///
/// For a `T`-frame clip and horizon `n`, rollouts start at every frame
/// `t` with indices `n-1 ..= T-n-1` (0-based) and predict `n` steps, so
/// `(T - 2n + 1) * n` squared-error terms enter the sum. Targets are the
/// encoder's own features, detached when `detach_targets` is set.
/// Returns the loss value and the number of terms.
pub fn physics_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &DualBranchModel,
    ps: &ParamSet<S>,
    f_mot: Val,
    n: usize,
    detach_targets: bool,
    mean_mode: bool,
) -> Result<(Val, usize)> {
    let t_len = g.value(f_mot).rows();
    if n < 1 {
        return Err(Error::Param("horizon must be at least 1".into()));
    }
    if t_len < 2 * n + 1 {
        return Err(Error::Contract(format!(
            "physics loss needs at least {} frames for horizon {n}, got {t_len}",
            2 * n + 1
        )));
    }
    let starts = g.slice_rows(f_mot, n - 1, t_len - n)?;
    let m = t_len - 2 * n + 1;
    let z0 = model.to_latent(g, ps, starts)?;
    let t0 = (n - 1) as f64 * model.config.frame_dt;
    let preds = model.rollout_features(g, ps, z0, t0, n)?;
    let mut total: Option<Val> = None;
    for (tau, pred) in preds.iter().enumerate() {
        let lo = n - 1 + tau + 1;
        let hi = t_len - n + tau + 1;
        let target_rows = g.slice_rows(f_mot, lo, hi)?;
        let target = if detach_targets { detached(g, target_rows) } else { target_rows };
        let diff = g.sub(*pred, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum_all(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let mut loss = total.expect("n >= 1 guarantees at least one term");
    let n_terms = m * n;
    if mean_mode {
        loss = g.scale(loss, 1.0 / n_terms as f64);
    }
    Ok((loss, n_terms))
}

/// Number of (start, horizon-step) pairs in the valid window.
pub fn physics_loss_terms(t_len: usize, n: usize) -> usize {
    if t_len < 2 * n + 1 {
        0
    } else {
        (t_len - 2 * n + 1) * n
    }
}

#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub id: u64,
    pub label: usize,
    pub observations: Tensor<f32>,
}

/// Load every episode of a split into memory as f32 observation matrices.
pub fn load_split(dataset: &Dataset, split: Split) -> Result<Vec<LoadedClip>> {
    let mut clips = Vec::new();
    for entry in dataset.entries(Some(split)) {
        let ep: Episode = dataset.load_episode(entry)?;
        clips.push(LoadedClip {
            id: ep.id,
            label: ep.class.index(),
            observations: ep.observations,
        });
    }
    Ok(clips)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: LossBreakdown,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy_per_epoch: Vec<f64>,
    pub dropped_rollouts: usize,
    pub param_count: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Outputs of [`train`] kept in memory alongside the on-disk artifacts.
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub model: DualBranchModel,
    pub params: ParamSet<f32>,
}

fn crop_window(rng: &mut Rng, t_len: usize, crop: usize) -> (usize, usize) {
    if t_len <= crop {
        (0, t_len)
    } else {
        let offset = rng.below(t_len - crop + 1);
        (offset, offset + crop)
    }
}

/// Fraction of clips whose argmax logit matches the label (lowest-index
/// tie-breaking), unweighted over classes is applied by the caller when
/// needed; here plain accuracy on the given clips.
fn split_accuracy(model: &DualBranchModel, ps: &ParamSet<f32>, clips: &[LoadedClip]) -> f64 {
    if clips.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for clip in clips {
        let mut g = Graph::new();
        let obs = g.leaf(clip.observations.clone());
        let Ok(seq) = model.encode(&mut g, ps, obs) else { continue };
        let Ok(logits) = model.classify(&mut g, ps, &seq) else { continue };
        let row = g.value(logits).data();
        let pred = argmax(row);
        if pred == clip.label {
            hits += 1;
        }
    }
    hits as f64 / clips.len() as f64
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Run the optimization loop; writes `metrics.jsonl`, `final.ckpt`,
/// `best.ckpt`, and `train_summary.json` into `out_dir`.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model_config = model_config.clone();
    model_config.n_pred = config.n_pred;
    std::fs::create_dir_all(out_dir)?;

    let (model, mut ps) = build_model::<f32>(&model_config, config.seed)?;
    let dynamics_ids = model.dynamics_param_ids(&ps);
    let all_ids: Vec<usize> = (0..ps.len()).collect();
    let param_count = ps.total_values();

    let train_clips = load_split(dataset, Split::Train)?;
    let val_clips = load_split(dataset, Split::Val)?;
    if train_clips.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");

    let opt_base = AdamW::new(config.lr, config.weight_decay);
    let base_lambda = config.lambda;
    let base_lambda_app = config.lambda_app_effective();

    let mut step = 0usize;
    let mut dropped_rollouts = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut val_curve = Vec::with_capacity(config.epochs);
    let mut last_loss = LossBreakdown { l_task: 0.0, l_phys: 0.0, l_app: 0.0, total: 0.0 };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        Rng::from_parts(config.seed, epoch as u64, SUB_SHUFFLE).shuffle(&mut order);

        for batch_ids in order.chunks(config.batch_size) {
            let mut g = Graph::<f32>::new();
            let mut pooled_rows = Vec::with_capacity(batch_ids.len());
            let mut labels = Vec::with_capacity(batch_ids.len());
            let mut mot_rows = Vec::with_capacity(batch_ids.len());
            let mut app_rows = Vec::with_capacity(batch_ids.len());
            let mut frame_mot_rows: Vec<Val> = Vec::new();
            let mut frame_app_rows: Vec<Val> = Vec::new();
            let mut phys_terms: Vec<Val> = Vec::new();

            for &ci in batch_ids {
                let clip = &train_clips[ci];
                let mut crop_rng =
                    Rng::from_parts(config.seed, (epoch as u64) << 32 | clip.id, SUB_CROP);
                let (lo, hi) =
                    crop_window(&mut crop_rng, clip.observations.rows(), config.crop_frames);
                let d = clip.observations.cols();
                let window = Tensor::matrix(
                    hi - lo,
                    d,
                    clip.observations.data()[lo * d..hi * d].to_vec(),
                )?;
                let obs = g.leaf(window);
                let seq = model.encode(&mut g, &ps, obs)?;
                let pm = g.mean_rows(seq.f_mot);
                let pa = g.mean_rows(seq.f_app);
                let pooled = g.concat_cols(&[pm, pa])?;
                pooled_rows.push(pooled);
                mot_rows.push(pm);
                app_rows.push(pa);
                labels.push(clip.label);

                if config.use_app && config.hsic_per_frame {
                    let t_len = hi - lo;
                    let per_clip = (config.hsic_max_samples / batch_ids.len()).max(1);
                    let stride = t_len.div_ceil(per_clip);
                    let mut f = 0;
                    while f < t_len {
                        frame_mot_rows.push(g.slice_rows(seq.f_mot, f, f + 1)?);
                        frame_app_rows.push(g.slice_rows(seq.f_app, f, f + 1)?);
                        f += stride;
                    }
                }

                if config.use_phys {
                    match physics_loss(
                        &mut g,
                        &model,
                        &ps,
                        seq.f_mot,
                        config.n_pred,
                        config.detach_targets,
                        config.phys_loss_mean,
                    ) {
                        Ok((loss, _)) => phys_terms.push(loss),
                        Err(Error::Divergence { .. }) => dropped_rollouts += 1,
                        Err(e) => return Err(e),
                    }
                }
            }

            let pooled_batch = g.concat_rows(&pooled_rows)?;
            let logits = model.classify_pooled(&mut g, &ps, pooled_batch)?;
            let l_task = g.cross_entropy(logits, &labels)?;

            let l_phys = if config.use_phys && !phys_terms.is_empty() {
                let mut acc = phys_terms[0];
                for &t in &phys_terms[1..] {
                    acc = g.add(acc, t)?;
                }
                Some(g.scale(acc, 1.0 / phys_terms.len() as f64))
            } else {
                None
            };

            let l_app = if config.use_app && batch_ids.len() >= 2 {
                let (mot_batch, app_batch) = if config.hsic_per_frame {
                    (g.concat_rows(&frame_mot_rows)?, g.concat_rows(&frame_app_rows)?)
                } else {
                    (g.concat_rows(&mot_rows)?, g.concat_rows(&app_rows)?)
                };
                Some(hsic_loss(&mut g, mot_batch, app_batch, &config.kernel)?)
            } else {
                None
            };

            let aux_ramp = if config.aux_warmup_steps > 0 {
                ((step + 1) as f64 / config.aux_warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let lambda = base_lambda * aux_ramp;
            let lambda_app = base_lambda_app * aux_ramp;
            let mut total = l_task;
            if let Some(lp) = l_phys {
                let scaled = g.scale(lp, lambda);
                total = g.add(total, scaled)?;
            }
            if let Some(la) = l_app {
                let scaled = g.scale(la, lambda_app);
                total = g.add(total, scaled)?;
            }

            let breakdown = LossBreakdown {
                l_task: g.value(l_task).item().to_f64(),
                l_phys: l_phys.map(|v| g.value(v).item().to_f64()).unwrap_or(0.0),
                l_app: l_app.map(|v| g.value(v).item().to_f64()).unwrap_or(0.0),
                total: g.value(total).item().to_f64(),
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss {:?}", breakdown),
                });
            }

            ps.backward(&mut g, total)?;
            let grad_norm = ps.grad_norm(&all_ids);
            let clip_scale = ps.clip_grad_norm(&dynamics_ids, config.clip_max_norm);
            let lr_scale = if config.warmup_steps > 0 {
                ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let opt = AdamW { lr: opt_base.lr * lr_scale, ..opt_base };
            opt.step(&mut ps)?;
            ps.zero_grads();

            let record = MetricsRecord {
                step,
                l_task: breakdown.l_task,
                l_phys: breakdown.l_phys,
                l_app: breakdown.l_app,
                total: breakdown.total,
                grad_norm,
                clip_scale,
            };
            serde_json::to_writer(&mut metrics, &record)?;
            metrics.write_all(b"\n")?;
            last_loss = breakdown;
            step += 1;
        }

        let val_acc = split_accuracy(&model, &ps, &val_clips);
        val_curve.push(val_acc);
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            save_checkpoint(&best_path, &ps)?;
        }
    }

    metrics.flush()?;
    save_checkpoint(&final_path, &ps)?;
    let summary = TrainSummary {
        steps: step,
        epochs: config.epochs,
        final_loss: last_loss,
        best_epoch,
        best_val_accuracy: best_val.max(0.0),
        val_accuracy_per_epoch: val_curve,
        dropped_rollouts,
        param_count,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(out_dir.join("train_summary.json"), json)?;
    Ok(TrainOutcome { summary, model, params: ps })
}
