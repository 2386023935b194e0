//! Deterministic synthetic RGB + depth scenes, sparse input sampling, and
//! the on-disk dataset layout.
//!
//! Per-frame seeds come from the master seed through [`frame_seed`], so any
//! frame can be regenerated alone and generation parallelises freely.

pub mod dmap;

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::sparse_tensor::{DenseMap, DepthMap, ImageTensor};

pub use dmap::{read_dmap, write_dmap, DmapError};

/// SplitMix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` in stream `stream`: `splitmix64(splitmix64(master ^ stream) ^ index)`.
pub fn frame_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream) ^ index)
}

/// Stream tags for the derived seeds.
pub mod stream {
    pub const TRAIN: u64 = 0x7472_6169_6e00_0001;
    pub const VAL: u64 = 0x7661_6c00_0000_0002;
    pub const TRAIN_SPARSE: u64 = 0x7370_7273_0000_0003;
    pub const EVAL_SPARSE: u64 = 0x6576_616c_0000_0004;
    pub const SHUFFLE: u64 = 0x7368_7566_0000_0005;
    pub const INIT: u64 = 0x696e_6974_0000_0006;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Amplitude of per-object colour offsets; pixel noise is half of it.
    pub noise: f64,
    /// Probability that a ground-truth pixel is marked invalid.
    pub invalid_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 64,
            height: 64,
            min_objects: 2,
            max_objects: 6,
            min_depth: 2.0,
            max_depth: 40.0,
            noise: 0.15,
            invalid_fraction: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, scales: usize, d_min: f64, d_max: f64) -> Result<()> {
        let d = 1usize << scales;
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(d) || !self.height.is_multiple_of(d) {
            return Err(Error::Config(format!("scene extent {}x{} must be divisible by {d}", self.width, self.height)));
        }
        if !(self.min_depth > d_min && self.max_depth < d_max && self.min_depth < self.max_depth) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] must lie inside ({d_min}, {d_max})",
                self.min_depth, self.max_depth
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) || self.noise < 0.0 {
            return Err(Error::Config("invalid_fraction must be in [0, 1) and noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { u0: f64, v0: f64, u1: f64, v1: f64 },
    Disk { cu: f64, cv: f64, r: f64 },
}

/// A constant-depth occluder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub depth: f64,
    pub tint: [f64; 3],
}

impl SceneObject {
    pub fn covers(&self, u: f64, v: f64) -> bool {
        match self.shape {
            Shape::Rect { u0, v0, u1, v1 } => u >= u0 && u < u1 && v >= v0 && v < v1,
            Shape::Disk { cu, cv, r } => (u - cu).powi(2) + (v - cv).powi(2) < r * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor<f32>,
    pub depth: DepthMap<f32>,
    pub objects: Vec<SceneObject>,
}

/// One image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageTensor<f32>,
    pub depth: DepthMap<f32>,
}

/// Hue colour ramp over `t` in `[0, 1]`.
fn ramp(t: f64) -> [f64; 3] {
    let h = 0.75 * t.clamp(0.0, 1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        _ => [x, 0.0, 1.0],
    }
}

/// Ground plane plus occluding rectangles and disks; colour is a hue ramp
/// over log depth with per-object tints and pixel noise.
pub fn gen_scene(spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let (lo, hi) = (spec.min_depth, spec.max_depth);
    let far = rng.gen_range(0.6..1.0) * hi;
    let near = (rng.gen_range(1.0..1.5) * lo).min(far);
    let tilt = rng.gen_range(-0.3..0.3);
    let n_obj = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let depth = (rng.gen_range(lo.ln()..hi.ln())).exp();
        let size = rng.gen_range(0.1..0.4) * w.min(h) as f64;
        let (cu, cv) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let shape = if rng.gen_bool(0.5) {
            let aspect = rng.gen_range(0.5..2.0);
            let (hw, hh) = (0.5 * size * aspect, 0.5 * size / aspect);
            Shape::Rect { u0: cu - hw, v0: cv - hh, u1: cu + hw, v1: cv + hh }
        } else {
            Shape::Disk { cu, cv, r: 0.5 * size }
        };
        let tint = [0; 3].map(|_| rng.gen_range(-spec.noise..=spec.noise));
        objects.push(SceneObject { shape, depth, tint });
    }
    let plane_tint = [0; 3].map(|_| rng.gen_range(-spec.noise..=spec.noise));
    let (log_lo, log_span) = (lo.ln(), hi.ln() - lo.ln());
    let mut depth = Vec::with_capacity(w * h);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for v in 0..h {
        for u in 0..w {
            let (pu, pv) = (u as f64 + 0.5, v as f64 + 0.5);
            let covering = objects.iter().filter(|o| o.covers(pu, pv)).min_by(|a, b| a.depth.total_cmp(&b.depth));
            let (d, tint) = match covering {
                Some(o) => (o.depth, o.tint),
                None => {
                    let t = (v as f64 / (h - 1).max(1) as f64 + tilt * (u as f64 / (w - 1).max(1) as f64 - 0.5)).clamp(0.0, 1.0);
                    let inv = 1.0 / far + (1.0 / near - 1.0 / far) * t;
                    (1.0 / inv, plane_tint)
                }
            };
            let base = ramp((d.ln() - log_lo) / log_span);
            for c in 0..3 {
                let px = base[c] + tint[c] + rng.gen_range(-0.5..=0.5) * spec.noise;
                rgb.push(px.clamp(0.0, 1.0) as f32);
            }
            let valid = !rng.gen_bool(spec.invalid_fraction);
            depth.push(if valid { d as f32 } else { 0.0 });
        }
    }
    Scene {
        image: ImageTensor(DenseMap { width: w, height: h, channels: 3, data: rgb }),
        depth: DepthMap(DenseMap { width: w, height: h, channels: 1, data: depth }),
        objects,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityMode {
    /// Keep `round(fraction * valid)` pixels.
    Fraction(f64),
    /// Keep `min(count, valid)` pixels.
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySpec {
    pub mode: SparsityMode,
    pub seed: u64,
}

impl SparsitySpec {
    pub fn fraction(f: f64, seed: u64) -> Self {
        SparsitySpec { mode: SparsityMode::Fraction(f), seed }
    }

    pub fn count(n: usize, seed: u64) -> Self {
        SparsitySpec { mode: SparsityMode::Count(n), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let SparsityMode::Fraction(f) = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("sparsity fraction must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Keeps a uniformly drawn subset of the valid pixels, zeros elsewhere.
///
/// Valid pixels are shuffled once with the spec's seed and a prefix is kept,
/// so for a fixed seed smaller samples are subsets of larger ones.
pub fn sample_sparse(d: &DepthMap<f32>, spec: &SparsitySpec) -> Result<DepthMap<f32>> {
    spec.validate()?;
    let mut valid = d.valid_indices();
    let k = match spec.mode {
        SparsityMode::Fraction(f) => (f * valid.len() as f64).round() as usize,
        SparsityMode::Count(n) => {
            if n > valid.len() {
                warn!("requested {n} sparse points but only {} are valid; keeping all", valid.len());
            }
            n.min(valid.len())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    valid.shuffle(&mut rng);
    let mut out = DepthMap::invalid(d.width(), d.height());
    for &i in &valid[..k] {
        out.values_mut()[i] = d.values()[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train_frames: usize,
    pub val_frames: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 0, train_frames: 512, val_frames: 64, scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
}

fn gen_split(cfg: &DataConfig, stream: u64, n: usize, exec: ExecMode) -> Vec<Frame> {
    exec.map_range(n, |i| {
        let spec = SceneSpec { seed: frame_seed(cfg.seed, stream, i as u64), ..cfg.scene.clone() };
        let s = gen_scene(&spec);
        Frame { image: s.image, depth: s.depth }
    })
}

/// Generates the train and validation splits.
pub fn generate_dataset(cfg: &DataConfig, exec: ExecMode) -> Dataset {
    Dataset { train: gen_split(cfg, stream::TRAIN, cfg.train_frames, exec), val: gen_split(cfg, stream::VAL, cfg.val_frames, exec) }
}

pub const SPLITS: [&str; 2] = ["train", "val"];

/// Writes `{split}/{index:06}.rgb.dmap` and `{split}/{index:06}.depth.dmap`.
pub fn write_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    for (name, frames) in SPLITS.iter().zip([&ds.train, &ds.val]) {
        let dir = root.as_ref().join(name);
        fs::create_dir_all(&dir)?;
        for (i, f) in frames.iter().enumerate() {
            write_dmap(&f.image.0, dir.join(format!("{i:06}.rgb.dmap")))?;
            write_dmap(&f.depth.0, dir.join(format!("{i:06}.depth.dmap")))?;
        }
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    if !dir.exists() {
        return Ok(frames);
    }
    for i in 0.. {
        let rgb = dir.join(format!("{i:06}.rgb.dmap"));
        if !rgb.exists() {
            break;
        }
        let image = ImageTensor::from_dense(read_dmap(&rgb)?)?;
        let depth = DepthMap::from_dense(read_dmap(dir.join(format!("{i:06}.depth.dmap")))?)?;
        if (image.width(), image.height()) != (depth.width(), depth.height()) {
            return Err(Error::Shape(format!("frame {i} in {}: image and depth extents differ", dir.display())));
        }
        frames.push(Frame { image, depth });
    }
    Ok(frames)
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    Ok(Dataset { train: read_split(&root.join("train"))?, val: read_split(&root.join("val"))? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, width: 32, height: 32, ..SceneSpec::default() }
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(gen_scene(&spec(3)), gen_scene(&spec(3)));
        assert_ne!(gen_scene(&spec(3)).depth, gen_scene(&spec(4)).depth);
    }

    #[test]
    fn depths_within_range_and_some_invalid() {
        let s = SceneSpec { width: 64, height: 64, ..SceneSpec::default() };
        let mut invalid = 0;
        for seed in 0..10 {
            let sc = gen_scene(&SceneSpec { seed, ..s.clone() });
            for &d in sc.depth.values() {
                if d > 0.0 {
                    assert!(d as f64 >= s.min_depth * 0.999 && d as f64 <= s.max_depth * 1.001, "{d}");
                } else {
                    invalid += 1;
                }
            }
            assert!(sc.image.0.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let frac = invalid as f64 / (10.0 * 64.0 * 64.0);
        assert!((0.04..0.06).contains(&frac), "{frac}");
    }

    #[test]
    fn nearer_object_occludes() {
        for seed in 0..20 {
            let sc = gen_scene(&SceneSpec { min_objects: 4, max_objects: 8, ..spec(seed) });
            for v in 0..32 {
                for u in 0..32 {
                    let (pu, pv) = (u as f64 + 0.5, v as f64 + 0.5);
                    let cover: Vec<f64> = sc.objects.iter().filter(|o| o.covers(pu, pv)).map(|o| o.depth).collect();
                    let d = sc.depth.get(u, v);
                    if cover.len() >= 2 && d > 0.0 {
                        let nearest = cover.iter().cloned().fold(f64::INFINITY, f64::min);
                        assert_eq!(d, nearest as f32);
                    }
                }
            }
        }
    }

    fn map_with_valid(n: usize) -> DepthMap<f32> {
        let mut d = vec![0.0; 64 * 64];
        for i in 0..n {
            d[(i * 37) % (64 * 64)] = 1.0 + i as f32;
        }
        DepthMap::new(64, 64, d).unwrap()
    }

    #[test]
    fn full_fraction_is_identity() {
        let d = map_with_valid(500);
        assert_eq!(sample_sparse(&d, &SparsitySpec::fraction(1.0, 9)).unwrap(), d);
    }

    #[test]
    fn zero_count_is_empty() {
        let d = map_with_valid(500);
        assert_eq!(sample_sparse(&d, &SparsitySpec::count(0, 9)).unwrap().valid_count(), 0);
        assert_eq!(sample_sparse(&d, &SparsitySpec::count(10_000, 9)).unwrap(), d);
    }

    #[test]
    fn fraction_keeps_exact_subset() {
        let d = map_with_valid(1000);
        let s = sample_sparse(&d, &SparsitySpec::fraction(0.2, 5)).unwrap();
        assert_eq!(s.valid_count(), 200);
        for i in s.valid_indices() {
            assert_eq!(s.values()[i], d.values()[i]);
        }
        // nested across levels for the same seed
        let small = sample_sparse(&d, &SparsitySpec::fraction(0.05, 5)).unwrap();
        assert!(small.valid_indices().iter().all(|&i| s.values()[i] > 0.0));
    }

    #[test]
    fn single_draw_is_uniform() {
        let d = map_with_valid(100);
        let idx = d.valid_indices();
        let mut counts = vec![0usize; d.values().len()];
        let draws = 10_000;
        for seed in 0..draws {
            let s = sample_sparse(&d, &SparsitySpec::count(1, frame_seed(1, 2, seed))).unwrap();
            counts[s.valid_indices()[0]] += 1;
        }
        let p = 1.0 / 100.0;
        let (mean, sigma) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
        for &i in &idx {
            assert!((counts[i] as f64 - mean).abs() <= 4.0 * sigma, "pixel {i}: {}", counts[i]);
        }
    }

    #[test]
    fn dataset_is_reproducible_and_round_trips() {
        let cfg = DataConfig { seed: 3, train_frames: 4, val_frames: 2, scene: spec(0) };
        let a = generate_dataset(&cfg, ExecMode::Sequential);
        let b = generate_dataset(&cfg, ExecMode::Parallel);
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        assert!(dir.path().join("train/000003.depth.dmap").exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), a);
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        assert_ne!(frame_seed(0, stream::TRAIN, 0), frame_seed(0, stream::VAL, 0));
        assert_ne!(frame_seed(0, stream::TRAIN, 0), frame_seed(0, stream::TRAIN, 1));
        assert_eq!(frame_seed(7, 1, 2), frame_seed(7, 1, 2));
    }
}
