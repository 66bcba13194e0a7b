//! Evaluation harness: per-class accuracy reports, the four-arm ablation
//! grid, the prediction-similarity heatmap, and the copy-last-frame
//! baseline comparator.

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig, N_CLASSES};
use crate::nn::ParamSet;
use crate::sim::{Dataset, MotionClass, Split};
use crate::tensor::{Graph, Tensor};
use crate::train::{argmax, load_split, train, LoadedClip, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Provenance stamp recorded in every report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunStamp {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent accuracy per class, indexed like [`MotionClass::ALL`].
    pub per_class_accuracy: [f64; N_CLASSES],
    /// Unweighted mean of the per-class accuracies, percent.
    pub average_accuracy: f64,
    /// Rows are true classes, columns are predictions.
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    pub split: Split,
    pub stamp: RunStamp,
}

/// Confusion matrix and accuracies from (label, prediction) pairs.
pub fn metrics_from_pairs(
    pairs: &[(usize, usize)],
    split: Split,
    stamp: RunStamp,
) -> MetricsReport {
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for &(label, pred) in pairs {
        confusion[label][pred] += 1;
    }
    let mut per_class = [0.0f64; N_CLASSES];
    for c in 0..N_CLASSES {
        let total: usize = confusion[c].iter().sum();
        per_class[c] = if total == 0 {
            0.0
        } else {
            100.0 * confusion[c][c] as f64 / total as f64
        };
    }
    let average = per_class.iter().sum::<f64>() / N_CLASSES as f64;
    MetricsReport {
        per_class_accuracy: per_class,
        average_accuracy: average,
        confusion,
        split,
        stamp,
    }
}

fn classify_clip(model: &DualBranchModel, ps: &ParamSet<f32>, clip: &LoadedClip) -> Result<usize> {
    let mut g = Graph::new();
    let obs = g.leaf(clip.observations.clone());
    let seq = model.encode(&mut g, ps, obs)?;
    let logits = model.classify(&mut g, ps, &seq)?;
    Ok(argmax(g.value(logits).data()))
}

/// Classify every episode of a held-out split. Refuses the training split.
pub fn evaluate(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    stamp: RunStamp,
) -> Result<MetricsReport> {
    if split == Split::Train {
        return Err(Error::SplitLeakage(
            "evaluation on the training split is refused; use val or test".into(),
        ));
    }
    let clips = load_split(dataset, split)?;
    if clips.is_empty() {
        return Err(Error::Contract(format!("split {} is empty", split.name())));
    }
    let pairs: Result<Vec<(usize, usize)>> = clips
        .par_iter()
        .map(|clip| Ok((clip.label, classify_clip(model, ps, clip)?)))
        .collect();
    Ok(metrics_from_pairs(&pairs?, split, stamp))
}

/// Binary accuracy between two classes with the argmax restricted to their
/// two logits, over held-out clips of those classes only.
pub fn binary_accuracy(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    a: MotionClass,
    b: MotionClass,
) -> Result<f64> {
    if split == Split::Train {
        return Err(Error::SplitLeakage("binary accuracy on the training split is refused".into()));
    }
    let clips = load_split(dataset, split)?;
    let subset: Vec<&LoadedClip> = clips
        .iter()
        .filter(|c| c.label == a.index() || c.label == b.index())
        .collect();
    if subset.is_empty() {
        return Err(Error::Contract("no clips of the requested classes".into()));
    }
    let hits: Result<Vec<bool>> = subset
        .par_iter()
        .map(|clip| {
            let mut g = Graph::new();
            let obs = g.leaf(clip.observations.clone());
            let seq = model.encode(&mut g, ps, obs)?;
            let logits = model.classify(&mut g, ps, &seq)?;
            let row = g.value(logits).data();
            let pred = if row[a.index()] >= row[b.index()] { a.index() } else { b.index() };
            Ok(pred == clip.label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

// ---- ablation grid ----

pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("base", false, false),
    ("+L_phys", true, false),
    ("+L_app", false, true),
    ("full", true, true),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub use_phys: bool,
    pub use_app: bool,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub dataset_hash: String,
    pub arms: Vec<AblationArm>,
}

/// Train all four arms with identical seeds and configs except the loss
/// toggles, then evaluate each best checkpoint on the test split. A
/// diverging arm is reported as failed without aborting the others.
pub fn run_ablation(
    dataset: &Dataset,
    model_config: &ModelConfig,
    base: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let dataset_hash = dataset.manifest_hash()?;
    let arms: Vec<AblationArm> = ABLATION_ARMS
        .par_iter()
        .map(|&(name, use_phys, use_app)| {
            let config = TrainConfig { use_phys, use_app, ..base.clone() };
            let arm_dir = out_dir.join(name.replace('+', "plus_"));
            let outcome = train(dataset, model_config, &config, &arm_dir).and_then(|out| {
                let mut best = crate::model::build_model::<f32>(
                    &ModelConfig { n_pred: config.n_pred, ..model_config.clone() },
                    config.seed,
                )?;
                crate::nn::load_checkpoint(&out.summary.best_checkpoint, &mut best.1)?;
                evaluate(
                    &best.0,
                    &best.1,
                    dataset,
                    Split::Test,
                    RunStamp {
                        seed: config.seed,
                        config_hash: String::new(),
                        checkpoint: out.summary.best_checkpoint.display().to_string(),
                    },
                )
            });
            match outcome {
                Ok(report) => AblationArm {
                    name: name.to_string(),
                    use_phys,
                    use_app,
                    report: Some(report),
                    error: None,
                },
                Err(e) => AblationArm {
                    name: name.to_string(),
                    use_phys,
                    use_app,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(AblationOutcome { dataset_hash, arms })
}

impl AblationOutcome {
    pub fn arm(&self, name: &str) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Aligned plain-text table in the four-arm comparison shape.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>9} {:>12} {:>12} {:>10} {:>8}\n",
            "arm", "avg", "uniform", "accelerated", "decelerated", "parabolic", "rebound"
        ));
        for arm in &self.arms {
            match (&arm.report, &arm.error) {
                (Some(r), _) => {
                    out.push_str(&format!(
                        "{:<10} {:>8.2} {:>9.2} {:>12.2} {:>12.2} {:>10.2} {:>8.2}\n",
                        arm.name,
                        r.average_accuracy,
                        r.per_class_accuracy[0],
                        r.per_class_accuracy[1],
                        r.per_class_accuracy[2],
                        r.per_class_accuracy[3],
                        r.per_class_accuracy[4],
                    ));
                }
                (None, Some(e)) => {
                    out.push_str(&format!("{:<10} failed: {e}\n", arm.name));
                }
                (None, None) => out.push_str(&format!("{:<10} missing\n", arm.name)),
            }
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out =
            String::from("arm,avg,uniform,accelerated,decelerated,parabolic,rebound\n");
        for arm in &self.arms {
            if let Some(r) = &arm.report {
                out.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    arm.name,
                    r.average_accuracy,
                    r.per_class_accuracy[0],
                    r.per_class_accuracy[1],
                    r.per_class_accuracy[2],
                    r.per_class_accuracy[3],
                    r.per_class_accuracy[4],
                ));
            } else {
                out.push_str(&format!("{},failed,,,,,\n", arm.name));
            }
        }
        out
    }
}

// ---- prediction-similarity heatmap ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityHeatmap {
    /// Predicted steps (rows) by ground-truth frames (columns), averaged
    /// over episodes; cosine similarity in [-1, 1].
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub context: usize,
    pub episodes_used: usize,
    pub episodes_skipped: usize,
}

impl SimilarityHeatmap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Ground-truth column that matches predicted row `r`.
    pub fn matching_col(&self, r: usize) -> usize {
        self.context + r
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> =
                (0..self.cols).map(|c| format!("{:.6}", self.get(r, c))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// ASCII PGM image, [-1, 1] mapped to [0, 255].
    pub fn render_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| {
                    let v = ((self.get(r, c) + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0);
                    format!("{}", v as u8)
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Heatmap over explicit clips (exact-duplication invariance is testable
/// at this level).
pub fn prediction_heatmap_from_clips(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    clips: &[LoadedClip],
    context: usize,
    horizon: usize,
) -> Result<SimilarityHeatmap> {
    if context < model.config.min_frames() {
        return Err(Error::Param(format!(
            "context {context} is shorter than the encoder minimum {}",
            model.config.min_frames()
        )));
    }
    let cols = context + horizon;
    let per_clip: Result<Vec<Option<Vec<f64>>>> = clips
        .par_iter()
        .map(|clip| {
            if clip.observations.rows() < cols {
                return Ok(None);
            }
            let d = clip.observations.cols();
            let window = |lo: usize, hi: usize| -> Result<Tensor<f32>> {
                Tensor::matrix(hi - lo, d, clip.observations.data()[lo * d..hi * d].to_vec())
            };
            let mut g = Graph::new();
            let full_obs = g.leaf(window(0, cols)?);
            let gt = model.encode(&mut g, ps, full_obs)?;
            let ctx_obs = g.leaf(window(0, context)?);
            let ctx = model.encode(&mut g, ps, ctx_obs)?;
            // roll out past the end of the context window
            let last = g.slice_rows(ctx.f_mot, context - 1, context)?;
            let z0 = model.to_latent(&mut g, ps, last)?;
            let t0 = (context - 1) as f64 * model.config.frame_dt;
            let preds = model.rollout_features(&mut g, ps, z0, t0, horizon)?;
            let d_m = model.config.d_m;
            let mut cell = vec![0.0f64; horizon * cols];
            for (r, pred) in preds.iter().enumerate() {
                let pv = g.value(*pred).data();
                for c in 0..cols {
                    let gv = &g.value(gt.f_mot).data()[c * d_m..(c + 1) * d_m];
                    cell[r * cols + c] = cosine(pv, gv);
                }
            }
            Ok(Some(cell))
        })
        .collect();
    let per_clip = per_clip?;
    let used: Vec<&Vec<f64>> = per_clip.iter().flatten().collect();
    let skipped = per_clip.len() - used.len();
    if used.is_empty() {
        return Err(Error::Contract(format!(
            "no clip is long enough for context {context} + horizon {horizon}"
        )));
    }
    let mut values = vec![0.0f64; horizon * cols];
    for cell in &used {
        for (v, c) in values.iter_mut().zip(cell.iter()) {
            *v += c;
        }
    }
    for v in values.iter_mut() {
        *v /= used.len() as f64;
    }
    Ok(SimilarityHeatmap {
        values,
        rows: horizon,
        cols,
        context,
        episodes_used: used.len(),
        episodes_skipped: skipped,
    })
}

/// Heatmap over a dataset split (too-short clips are skipped and counted).
pub fn prediction_heatmap(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    context: usize,
    horizon: usize,
) -> Result<SimilarityHeatmap> {
    let clips = load_split(dataset, split)?;
    prediction_heatmap_from_clips(model, ps, &clips, context, horizon)
}

// ---- copy-last baseline ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionMse {
    /// Mean squared error per class over all valid windows, indexed like
    /// [`MotionClass::ALL`]; NaN-free, 0.0 for absent classes.
    pub per_class: [f64; N_CLASSES],
    pub overall: f64,
}

fn mse_rows(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s / a.len() as f64
}

fn windowed_mse(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    clips: &[LoadedClip],
    horizon: usize,
    use_rollout: bool,
) -> Result<PredictionMse> {
    let per_clip: Result<Vec<(usize, f64, usize)>> = clips
        .par_iter()
        .map(|clip| {
            let t_len = clip.observations.rows();
            if t_len < 2 * horizon + 1 {
                return Ok((clip.label, 0.0, 0));
            }
            let mut g = Graph::new();
            let obs = g.leaf(clip.observations.clone());
            let seq = model.encode(&mut g, ps, obs)?;
            let d_m = model.config.d_m;
            let fm = g.value(seq.f_mot).clone();
            let row = |i: usize| &fm.data()[i * d_m..(i + 1) * d_m];
            let m = t_len - 2 * horizon + 1;

            let mut total = 0.0f64;
            let mut count = 0usize;
            if use_rollout {
                let starts = g.slice_rows(seq.f_mot, horizon - 1, t_len - horizon)?;
                let z0 = model.to_latent(&mut g, ps, starts)?;
                let t0 = (horizon - 1) as f64 * model.config.frame_dt;
                let preds = model.rollout_features(&mut g, ps, z0, t0, horizon)?;
                for (tau, pred) in preds.iter().enumerate() {
                    let pv = g.value(*pred).clone();
                    for k in 0..m {
                        let target = row(horizon - 1 + k + tau + 1);
                        let p = &pv.data()[k * d_m..(k + 1) * d_m];
                        total += mse_rows(p, target);
                        count += 1;
                    }
                }
            } else {
                for k in 0..m {
                    let start = horizon - 1 + k;
                    for tau in 1..=horizon {
                        total += mse_rows(row(start), row(start + tau));
                        count += 1;
                    }
                }
            }
            Ok((clip.label, total, count))
        })
        .collect();

    let mut sums = [0.0f64; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    let mut all_sum = 0.0;
    let mut all_count = 0usize;
    for (label, total, count) in per_clip? {
        sums[label] += total;
        counts[label] += count;
        all_sum += total;
        all_count += count;
    }
    let mut per_class = [0.0f64; N_CLASSES];
    for c in 0..N_CLASSES {
        per_class[c] = if counts[c] == 0 { 0.0 } else { sums[c] / counts[c] as f64 };
    }
    let overall = if all_count == 0 { 0.0 } else { all_sum / all_count as f64 };
    Ok(PredictionMse { per_class, overall })
}

/// MSE of repeating the start-frame motion feature across the horizon.
pub fn copy_last_baseline(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    horizon: usize,
) -> Result<PredictionMse> {
    let clips = load_split(dataset, split)?;
    windowed_mse(model, ps, &clips, horizon, false)
}

/// MSE of the latent-rollout predictions over the same windows.
pub fn rollout_mse(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    horizon: usize,
) -> Result<PredictionMse> {
    let clips = load_split(dataset, split)?;
    windowed_mse(model, ps, &clips, horizon, true)
}

/// Baseline over explicit clips (test support).
pub fn copy_last_baseline_from_clips(
    model: &DualBranchModel,
    ps: &ParamSet<f32>,
    clips: &[LoadedClip],
    horizon: usize,
) -> Result<PredictionMse> {
    windowed_mse(model, ps, clips, horizon, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::rng::Rng;

    #[test]
    fn oracle_stub_scores_hundred_percent() {
        let pairs: Vec<(usize, usize)> = (0..1000).map(|i| (i % 5, i % 5)).collect();
        let report = metrics_from_pairs(&pairs, Split::Test, RunStamp::default());
        assert_eq!(report.average_accuracy, 100.0);
        for acc in report.per_class_accuracy {
            assert_eq!(acc, 100.0);
        }
    }

    #[test]
    fn uniform_random_stub_scores_chance() {
        let mut rng = Rng::new(99);
        let pairs: Vec<(usize, usize)> =
            (0..1000).map(|i| (i % 5, rng.below(5))).collect();
        let report = metrics_from_pairs(&pairs, Split::Test, RunStamp::default());
        assert!(
            (report.average_accuracy - 20.0).abs() < 4.0,
            "avg {}",
            report.average_accuracy
        );
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let mut rng = Rng::new(101);
        let pairs: Vec<(usize, usize)> =
            (0..500).map(|i| (i % 5, rng.below(5))).collect();
        let report = metrics_from_pairs(&pairs, Split::Test, RunStamp::default());
        for c in 0..N_CLASSES {
            let row_sum: usize = report.confusion[c].iter().sum();
            assert_eq!(row_sum, 100);
        }
        // trace / total equals average accuracy on balanced pairs
        let trace: usize = (0..N_CLASSES).map(|c| report.confusion[c][c]).sum();
        let avg = 100.0 * trace as f64 / 500.0;
        assert!((avg - report.average_accuracy).abs() < 1e-9);
    }

    #[test]
    fn heatmap_is_invariant_under_exact_duplication() {
        let config = ModelConfig {
            d_obs: 6,
            d_h: 8,
            d_m: 6,
            d_a: 4,
            d_z: 6,
            attn_blocks: 1,
            attn_ffn_hidden: 8,
            dynamics_hidden: 8,
            max_frames: 64,
            ..ModelConfig::default()
        };
        let (model, ps) = build_model::<f32>(&config, 7).unwrap();
        let mut rng = Rng::new(8);
        let obs = crate::nn::normal_init::<f32>(&mut rng, 16, 6, 1.0);
        let clip = LoadedClip { id: 0, label: 0, observations: obs };
        let twin = LoadedClip { id: 1, label: 0, observations: clip.observations.clone() };
        let single =
            prediction_heatmap_from_clips(&model, &ps, &[clip.clone()], 9, 3).unwrap();
        let doubled =
            prediction_heatmap_from_clips(&model, &ps, &[clip, twin], 9, 3).unwrap();
        assert_eq!(single.values, doubled.values);
        for v in &single.values {
            assert!((-1.0..=1.0).contains(v));
        }
        assert_eq!(single.rows, 3);
        assert_eq!(single.cols, 12);
        assert_eq!(single.matching_col(0), 9);
    }

    #[test]
    fn horizon_one_baseline_is_one_step_feature_difference() {
        let config = ModelConfig {
            d_obs: 6,
            d_h: 8,
            d_m: 6,
            d_a: 4,
            d_z: 6,
            attn_blocks: 1,
            attn_ffn_hidden: 8,
            dynamics_hidden: 8,
            max_frames: 64,
            n_pred: 1,
            ..ModelConfig::default()
        };
        let (model, ps) = build_model::<f32>(&config, 9).unwrap();
        let mut rng = Rng::new(10);
        let obs = crate::nn::normal_init::<f32>(&mut rng, 10, 6, 1.0);
        let clip = LoadedClip { id: 0, label: 2, observations: obs.clone() };
        let baseline = copy_last_baseline_from_clips(&model, &ps, &[clip], 1).unwrap();

        // direct computation from the encoded features
        let mut g = Graph::new();
        let o = g.leaf(obs);
        let seq = model.encode(&mut g, &ps, o).unwrap();
        let fm = g.value(seq.f_mot);
        let d_m = 6;
        let mut total = 0.0;
        let mut count = 0;
        for t in 0..9 {
            let a = &fm.data()[t * d_m..(t + 1) * d_m];
            let b = &fm.data()[(t + 1) * d_m..(t + 2) * d_m];
            total += mse_rows(a, b);
            count += 1;
        }
        let expected = total / count as f64;
        assert!((baseline.per_class[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn pgm_and_csv_render() {
        let hm = SimilarityHeatmap {
            values: vec![1.0, 0.0, -1.0, 0.5, -0.5, 0.25],
            rows: 2,
            cols: 3,
            context: 1,
            episodes_used: 1,
            episodes_skipped: 0,
        };
        let pgm = hm.render_pgm();
        assert!(pgm.starts_with("P2\n3 2\n255\n"));
        assert!(pgm.contains("255 128 0"));
        let csv = hm.render_csv();
        assert_eq!(csv.lines().count(), 2);
    }
}
