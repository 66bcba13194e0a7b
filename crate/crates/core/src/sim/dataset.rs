//! Dataset generation and on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one binary file per
//! episode. The manifest records the generation spec, the seed, the
//! serialized mixing map, and a split tag per episode, so regeneration
//! from (spec, seed) is bit-identical and split hygiene is checkable.
//!
//! Episode file layout (little-endian): magic `PMEP`, version u32, id u64,
//! class u8, dt f64, n_frames u32, state_dim u32 (= 4), d_obs u32, then
//! ground-truth states as f64 rows (x, y, vx, vy) and observations as f32
//! rows.

use super::observe::{render_observations, MixingMap, ObservationModel};
use super::{generate_trajectory, KinematicState, MotionClass, PhysParams, Trajectory, Vec2};
use crate::error::{Error, Result};
use crate::rng::{content_hash, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const EPISODE_MAGIC: &[u8; 4] = b"PMEP";
const EPISODE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

// substream namespaces for per-episode derivations
const SUB_PARAMS: u64 = 100;
const SUB_APPEARANCE: u64 = 101;
const SUB_SPLIT: u64 = 200;
const STREAM_MIXING: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generation recipe: per-class episode counts, frame-count range, and the
/// kinematic/observation parameter ranges episodes are sampled from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub episodes_per_class: usize,
    /// Inclusive frame-count range sampled per episode.
    pub frames: [usize; 2],
    pub dt: f64,
    pub gravity: f64,
    pub d_obs: usize,
    pub d_app: usize,
    pub noise_std: f64,
    /// Scaling of (x, y, vx, vy) ahead of the mixing nonlinearity.
    pub state_gain: [f64; 4],
    pub app_gain: f64,
    /// Train/val/test fractions, applied per class.
    pub split: [f64; 3],
    pub uniform_speed: [f64; 2],
    pub accel_speed: [f64; 2],
    pub accel_mag: [f64; 2],
    /// Hard cap on any sampled speed for accelerated episodes.
    pub max_speed: f64,
    pub decel_speed: [f64; 2],
    /// Fraction of the initial speed shed by the end of a decelerated
    /// episode; keeps the label valid for the whole clip.
    pub decel_fraction: [f64; 2],
    pub parabolic_vx: [f64; 2],
    pub rebound_height: [f64; 2],
    pub rebound_restitution: [f64; 2],
    pub rebound_vx: [f64; 2],
    pub heading_angle: f64,
    /// Start-position scatter (camera-framing surrogate): x uniform in
    /// this range for every class, y for the horizontal classes.
    pub x0_range: [f64; 2],
    pub y0_range: [f64; 2],
    /// Per-episode contrast modulation of motion cues by appearance.
    pub contrast_mod: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            episodes_per_class: 125,
            frames: [20, 45],
            dt: 0.1,
            gravity: 9.8,
            d_obs: 32,
            d_app: 8,
            noise_std: 0.02,
            state_gain: [0.04, 0.05, 0.4, 0.08],
            app_gain: 1.5,
            split: [0.8, 0.1, 0.1],
            uniform_speed: [0.5, 2.5],
            accel_speed: [0.3, 1.2],
            accel_mag: [0.15, 0.8],
            max_speed: 4.0,
            decel_speed: [1.5, 3.5],
            decel_fraction: [0.5, 0.95],
            parabolic_vx: [0.5, 2.0],
            rebound_height: [2.0, 6.0],
            rebound_restitution: [0.75, 0.95],
            rebound_vx: [0.2, 1.2],
            heading_angle: 0.35,
            x0_range: [-6.0, 6.0],
            y0_range: [0.0, 3.0],
            contrast_mod: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_class == 0 {
            return Err(Error::Param("episodes_per_class must be positive".into()));
        }
        if self.frames[0] < super::MIN_FRAMES
            || self.frames[1] > super::MAX_FRAMES
            || self.frames[0] > self.frames[1]
        {
            return Err(Error::Param(format!(
                "frame range {:?} outside [{}, {}]",
                self.frames,
                super::MIN_FRAMES,
                super::MAX_FRAMES
            )));
        }
        if self.dt <= 0.0 || self.gravity <= 0.0 || self.d_obs == 0 {
            return Err(Error::Param("dt, gravity, and d_obs must be positive".into()));
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f < 0.0) {
            return Err(Error::Param(format!("split fractions {:?} must sum to 1", self.split)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Param("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub class: MotionClass,
    pub split: Split,
    pub file: String,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub library_version: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub mixing_map: MixingMap,
    pub episodes: Vec<ManifestEntry>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn episode_file_name(id: u64) -> String {
    format!("ep{id:06}.bin")
}

/// Sampled parameters for one episode (pure function of the stream).
fn sample_params(
    spec: &DatasetSpec,
    class: MotionClass,
    rng: &mut Rng,
) -> (PhysParams, usize) {
    let n_frames = spec.frames[0] + rng.below(spec.frames[1] - spec.frames[0] + 1);
    let duration = (n_frames - 1) as f64 * spec.dt;
    let heading = rng.range(-spec.heading_angle, spec.heading_angle);
    let mut params = PhysParams {
        gravity: spec.gravity,
        dt: spec.dt,
        initial_position: Vec2::new(
            rng.range(spec.x0_range[0], spec.x0_range[1]),
            rng.range(spec.y0_range[0], spec.y0_range[1]),
        ),
        ..PhysParams::default()
    };
    match class {
        MotionClass::Uniform => {
            let speed = rng.range(spec.uniform_speed[0], spec.uniform_speed[1]);
            params.gravity = 0.0;
            params.initial_velocity = Vec2::new(speed * heading.cos(), speed * heading.sin());
        }
        MotionClass::Accelerated => {
            let v0 = rng.range(spec.accel_speed[0], spec.accel_speed[1]);
            let cap = (spec.max_speed - v0) / duration;
            let a = rng.range(spec.accel_mag[0], spec.accel_mag[1]).min(cap).max(0.05);
            params.gravity = 0.0;
            params.initial_velocity = Vec2::new(v0 * heading.cos(), v0 * heading.sin());
            params.accel = a;
        }
        MotionClass::Decelerated => {
            let v0 = rng.range(spec.decel_speed[0], spec.decel_speed[1]);
            let frac = rng.range(spec.decel_fraction[0], spec.decel_fraction[1]);
            params.gravity = 0.0;
            params.initial_velocity = Vec2::new(v0 * heading.cos(), v0 * heading.sin());
            params.accel = -frac * v0 / duration;
        }
        MotionClass::Parabolic => {
            let vx = rng.range(spec.parabolic_vx[0], spec.parabolic_vx[1]);
            let u = rng.range(0.85, 1.05);
            let vy = 0.5 * spec.gravity * duration * u;
            params.initial_position.y = 0.0;
            params.initial_velocity = Vec2::new(vx, vy);
        }
        MotionClass::Rebound => {
            let y0 = rng.range(spec.rebound_height[0], spec.rebound_height[1]);
            let vx = rng.range(spec.rebound_vx[0], spec.rebound_vx[1]);
            let e = rng.range(spec.rebound_restitution[0], spec.rebound_restitution[1]);
            params.initial_position.y = y0;
            params.initial_velocity = Vec2::new(vx, 0.0);
            params.restitution = e;
            params.floor = 0.0;
        }
    }
    (params, n_frames)
}

fn build_episode(
    spec: &DatasetSpec,
    mixing: &MixingMap,
    seed: u64,
    class: MotionClass,
    id: u64,
) -> Result<(Trajectory, Tensor<f32>)> {
    let mut rng = Rng::from_parts(seed, id, SUB_PARAMS);
    let (params, n_frames) = sample_params(spec, class, &mut rng);
    let mut traj = generate_trajectory(class, &params, n_frames, seed)?;
    traj.id = id;
    let mut app_rng = Rng::from_parts(seed, id, SUB_APPEARANCE);
    let code: Vec<f32> = (0..spec.d_app).map(|_| app_rng.normal() as f32).collect();
    let model = ObservationModel::new(mixing.clone(), code, spec.noise_std);
    let obs = render_observations(&traj, &model, seed)?;
    Ok((traj, obs))
}

fn encode_episode(traj: &Trajectory, obs: &Tensor<f32>) -> Vec<u8> {
    let n = traj.len();
    let d_obs = obs.cols();
    let mut out = Vec::with_capacity(4 + 4 + 8 + 1 + 8 + 12 + n * (4 * 8 + d_obs * 4));
    out.extend_from_slice(EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    out.extend_from_slice(&traj.id.to_le_bytes());
    out.push(traj.class_label.index() as u8);
    out.extend_from_slice(&traj.dt.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&(d_obs as u32).to_le_bytes());
    for f in &traj.frames {
        out.extend_from_slice(&f.position.x.to_le_bytes());
        out.extend_from_slice(&f.position.y.to_le_bytes());
        out.extend_from_slice(&f.velocity.x.to_le_bytes());
        out.extend_from_slice(&f.velocity.y.to_le_bytes());
    }
    for v in obs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// One episode loaded back from disk.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: u64,
    pub class: MotionClass,
    pub split: Split,
    pub dt: f64,
    pub states: Vec<KinematicState>,
    pub observations: Tensor<f32>,
}

impl Episode {
    pub fn n_frames(&self) -> usize {
        self.states.len()
    }
}

fn decode_episode(bytes: &[u8], split: Split) -> Result<Episode> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(Error::Format("episode file truncated".into()));
        }
        let (head, rest) = r.split_at(n);
        r = rest;
        Ok(head)
    };
    if take(4)? != EPISODE_MAGIC {
        return Err(Error::Format("not an episode file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != EPISODE_VERSION {
        return Err(Error::Format(format!("unsupported episode version {version}")));
    }
    let id = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let class_idx = take(1)?[0] as usize;
    let class = MotionClass::from_index(class_idx)
        .ok_or_else(|| Error::Format(format!("unknown class index {class_idx}")))?;
    let dt = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let state_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if state_dim != 4 {
        return Err(Error::Format(format!("unexpected state dimension {state_dim}")));
    }
    let d_obs = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let mut vals = [0.0f64; 4];
        for v in vals.iter_mut() {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        states.push(KinematicState {
            t: i as f64 * dt,
            position: Vec2::new(vals[0], vals[1]),
            velocity: Vec2::new(vals[2], vals[3]),
        });
    }
    let mut obs = Vec::with_capacity(n * d_obs);
    for _ in 0..n * d_obs {
        obs.push(f32::from_le_bytes(take(4)?.try_into().unwrap()));
    }
    Ok(Episode {
        id,
        class,
        split,
        dt,
        states,
        observations: Tensor::matrix(n, d_obs, obs)?,
    })
}

/// Generate a dataset on disk. Episodes are pure functions of (spec, seed,
/// id), generated in parallel and written in id order, so the directory
/// contents are bit-identical across runs and thread counts.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut mixing_rng = Rng::from_parts(seed, STREAM_MIXING, 0);
    let mixing =
        MixingMap::random(spec.d_obs, spec.d_app, spec.state_gain, spec.app_gain, &mut mixing_rng)
            .with_contrast_mod(spec.contrast_mod);

    let per_class = spec.episodes_per_class;
    let jobs: Vec<(MotionClass, u64)> = MotionClass::ALL
        .iter()
        .enumerate()
        .flat_map(|(ci, &class)| {
            (0..per_class).map(move |k| (class, (ci * per_class + k) as u64))
        })
        .collect();

    let built: Result<Vec<(u64, MotionClass, usize, Vec<u8>)>> = jobs
        .par_iter()
        .map(|&(class, id)| {
            let (traj, obs) = build_episode(spec, &mixing, seed, class, id)?;
            Ok((id, class, traj.len(), encode_episode(&traj, &obs)))
        })
        .collect();
    let mut built = built?;
    built.sort_by_key(|(id, ..)| *id);

    // stratified split per class
    let mut split_of = vec![Split::Train; built.len()];
    for (ci, _) in MotionClass::ALL.iter().enumerate() {
        let mut order: Vec<usize> = (0..per_class).collect();
        Rng::from_parts(seed, ci as u64, SUB_SPLIT).shuffle(&mut order);
        let n_train = (per_class as f64 * spec.split[0]).floor() as usize;
        let n_val = (per_class as f64 * spec.split[1]).floor() as usize;
        for (rank, &k) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            split_of[ci * per_class + k] = split;
        }
    }

    let mut episodes = Vec::with_capacity(built.len());
    for (id, class, n_frames, bytes) in &built {
        let file = episode_file_name(*id);
        std::fs::write(out_dir.join(&file), bytes)?;
        episodes.push(ManifestEntry {
            id: *id,
            class: *class,
            split: split_of[*id as usize],
            file,
            n_frames: *n_frames,
        });
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        spec: spec.clone(),
        mixing_map: mixing,
        episodes,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(manifest_path(out_dir), json)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = manifest_path(dir);
        let file = std::fs::File::open(&path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(file))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        Ok(Dataset { dir: dir.to_path_buf(), manifest })
    }

    pub fn entries(&self, split: Option<Split>) -> Vec<&ManifestEntry> {
        self.manifest
            .episodes
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .collect()
    }

    pub fn load_episode(&self, entry: &ManifestEntry) -> Result<Episode> {
        let bytes = std::fs::read(self.dir.join(&entry.file))?;
        let ep = decode_episode(&bytes, entry.split)?;
        if ep.id != entry.id || ep.class != entry.class {
            return Err(Error::Format(format!(
                "episode file {} does not match its manifest entry",
                entry.file
            )));
        }
        Ok(ep)
    }

    /// Hash of the manifest bytes as written on disk.
    pub fn manifest_hash(&self) -> Result<String> {
        let bytes = std::fs::read(manifest_path(&self.dir))?;
        Ok(content_hash(&bytes))
    }
}

/// Write an episode file directly (test support for hand-built episodes).
pub fn write_episode_file(path: &Path, traj: &Trajectory, obs: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&encode_episode(traj, obs))?;
    w.flush()?;
    Ok(())
}

/// Read an episode file directly.
pub fn read_episode_file(path: &Path, split: Split) -> Result<Episode> {
    let mut bytes = Vec::new();
    BufReader::new(std::fs::File::open(path)?).read_to_end(&mut bytes)?;
    decode_episode(&bytes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("phymotion_ds_{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_spec() -> DatasetSpec {
        DatasetSpec { episodes_per_class: 10, d_obs: 12, d_app: 4, ..DatasetSpec::default() }
    }

    #[test]
    fn balanced_counts_and_split() {
        let dir = tmp_dir("counts");
        let manifest = generate_dataset(&small_spec(), 11, &dir).unwrap();
        assert_eq!(manifest.episodes.len(), 50);
        for class in MotionClass::ALL {
            let n = manifest.episodes.iter().filter(|e| e.class == class).count();
            assert_eq!(n, 10, "{}", class.name());
            let train = manifest
                .episodes
                .iter()
                .filter(|e| e.class == class && e.split == Split::Train)
                .count();
            assert_eq!(train, 8, "train split of {}", class.name());
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let dir_a = tmp_dir("rega");
        let dir_b = tmp_dir("regb");
        generate_dataset(&small_spec(), 42, &dir_a).unwrap();
        generate_dataset(&small_spec(), 42, &dir_b).unwrap();
        let ds_a = Dataset::load(&dir_a).unwrap();
        let ds_b = Dataset::load(&dir_b).unwrap();
        assert_eq!(ds_a.manifest_hash().unwrap(), ds_b.manifest_hash().unwrap());
        for entry in &ds_a.manifest.episodes {
            let a = std::fs::read(dir_a.join(&entry.file)).unwrap();
            let b = std::fs::read(dir_b.join(&entry.file)).unwrap();
            assert_eq!(a, b, "{}", entry.file);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let dir_a = tmp_dir("seeda");
        let dir_b = tmp_dir("seedb");
        generate_dataset(&small_spec(), 1, &dir_a).unwrap();
        generate_dataset(&small_spec(), 2, &dir_b).unwrap();
        let ha = Dataset::load(&dir_a).unwrap().manifest_hash().unwrap();
        let hb = Dataset::load(&dir_b).unwrap().manifest_hash().unwrap();
        assert_ne!(ha, hb);
    }

    #[test]
    fn episode_roundtrip_preserves_states_and_observations() {
        let dir = tmp_dir("rt");
        let manifest = generate_dataset(&small_spec(), 3, &dir).unwrap();
        let ds = Dataset::load(&dir).unwrap();
        for entry in manifest.episodes.iter().take(10) {
            let ep = ds.load_episode(entry).unwrap();
            assert_eq!(ep.n_frames(), entry.n_frames);
            assert_eq!(ep.class, entry.class);
            assert_eq!(ep.observations.rows(), entry.n_frames);
            assert!(ep.observations.all_finite());
        }
    }

    #[test]
    fn class_invariants_hold_across_the_dataset() {
        let dir = tmp_dir("inv");
        generate_dataset(&small_spec(), 29, &dir).unwrap();
        let ds = Dataset::load(&dir).unwrap();
        for entry in ds.entries(None) {
            let ep = ds.load_episode(entry).unwrap();
            match ep.class {
                MotionClass::Uniform => {
                    let s0 = ep.states[0].speed();
                    for s in &ep.states {
                        assert!((s.speed() - s0).abs() <= 1e-9);
                    }
                }
                MotionClass::Accelerated => {
                    for w in ep.states.windows(2) {
                        assert!(w[1].speed() > w[0].speed(), "episode {}", ep.id);
                    }
                }
                MotionClass::Decelerated => {
                    for w in ep.states.windows(2) {
                        assert!(w[1].speed() < w[0].speed(), "episode {}", ep.id);
                    }
                }
                MotionClass::Parabolic => {
                    let g = ds.manifest.spec.gravity;
                    let dt = ep.dt;
                    for w in ep.states.windows(3) {
                        let dd = w[2].position.y - 2.0 * w[1].position.y + w[0].position.y;
                        assert!(((dd + g * dt * dt) / (g * dt * dt)).abs() < 1e-6);
                    }
                }
                MotionClass::Rebound => {
                    for s in &ep.states {
                        assert!(s.position.y >= -1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let spec = small_spec();
        let err = generate_dataset(&spec, 1, Path::new("/proc/nonexistent/dataset"));
        assert!(err.is_err());
    }
}
