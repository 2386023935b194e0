//! Compact RGB encoder-decoder with skip connections, exposing a prediction
//! entry point (image only) and a completion entry point (image plus sparse
//! depth) over the same RGB parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{ParamId, ParamKind, ParamStore, Tape, Var};
use crate::kernels::{sigmoid, ConvGeom};
use crate::scalar::Scalar;
use crate::sparse_conv::NormMode;
use crate::sparse_tensor::{DepthMap, ImageTensor};
use crate::srb_san::{init_uniform, BnUpdate, SanParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder channel width per scale; its length is the number of skips.
    pub widths: Vec<usize>,
    pub d_min: f64,
    pub d_max: f64,
    /// Depth the untrained head starts at.
    pub init_depth: f64,
    pub srb_branches: usize,
    /// Modulate skips with `w_i`, `b_i`; otherwise skips are `K + P`.
    pub use_wb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { widths: vec![16, 32, 64, 128], d_min: 0.1, d_max: 100.0, init_depth: 10.0, srb_branches: 3, use_wb: true }
    }
}

impl ModelConfig {
    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("model widths must be non-empty and positive".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config(format!("need 0 < d_min < d_max, got {} / {}", self.d_min, self.d_max)));
        }
        if !(self.init_depth > self.d_min && self.init_depth < self.d_max) {
            return Err(Error::Config("init_depth must lie inside (d_min, d_max)".into()));
        }
        if !(1..=3).contains(&self.srb_branches) {
            return Err(Error::Config(format!("srb_branches must be 1, 2 or 3, got {}", self.srb_branches)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    cin: usize,
    cout: usize,
}

impl Conv {
    fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize, gain: f64, bias: T) -> Result<Self> {
        let k = 3;
        let w = store.add(&format!("{name}.w"), &[k, k, cin, cout], init_uniform(rng, k * k * cin * cout, k * k * cin, gain), ParamKind::Trainable)?;
        let b = store.add(&format!("{name}.b"), &[cout], vec![bias; cout], ParamKind::Trainable)?;
        Ok(Conv { w, b, k, cin, cout })
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        if store.entry(w).shape != [3, 3, cin, cout] {
            return Err(Error::Shape(format!("{name}.w has shape {:?}, expected [3, 3, {cin}, {cout}]", store.entry(w).shape)));
        }
        Ok(Conv { w, b: store.id(&format!("{name}.b"))?, k: 3, cin, cout })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: usize, h: usize, stride: usize) -> Result<Var> {
        let (wv, bv) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.conv2d(x, wv, bv, ConvGeom { in_w: w, in_h: h, cin: self.cin, cout: self.cout, k: self.k, stride })
    }
}

/// Skip maps `K_1 .. K_S` of one image, with their extents.
#[derive(Debug, Clone)]
pub struct Skips {
    pub maps: Vec<Var>,
    pub dims: Vec<(usize, usize, usize)>,
}

/// Handles into a [`ParamStore`] for the RGB network and its SAN.
///
/// Parameter names: `enc.*` (RGB encoder), `dec.*` (shared decoder and
/// head), `san.*` (sparse encoder and skip modulation).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    pub cfg: ModelConfig,
    enc: Vec<[Conv; 2]>,
    /// `dec[i]` fuses scale `i + 1` into scale `i`, for `i = 0 .. S - 2`.
    dec: Vec<Conv>,
    dec_full: Conv,
    head: Conv,
    pub san: SanParams,
}

impl DepthNet {
    /// Registers freshly initialised parameters.
    pub fn init<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in w.iter().enumerate() {
            let a = Conv::register(store, rng, &format!("enc.{}.a", i + 1), cin, c, 1.0, T::zero())?;
            let b = Conv::register(store, rng, &format!("enc.{}.b", i + 1), c, c, 1.0, T::zero())?;
            enc.push([a, b]);
            cin = c;
        }
        let mut dec = Vec::new();
        for i in 0..w.len() - 1 {
            dec.push(Conv::register(store, rng, &format!("dec.{}", i + 1), w[i + 1] + w[i], w[i], 1.0, T::zero())?);
        }
        let dec_full = Conv::register(store, rng, "dec.full", w[0], w[0], 1.0, T::zero())?;
        let head_bias = T::of(head_logit(cfg.init_depth, cfg.d_min, cfg.d_max));
        let head = Conv::register(store, rng, "dec.head", w[0], 1, 0.1, head_bias)?;
        let san = SanParams::register(store, rng, w, cfg.srb_branches)?;
        Ok(DepthNet { cfg: cfg.clone(), enc, dec, dec_full, head, san })
    }

    /// Looks up the parameters of an existing store (e.g. a loaded checkpoint).
    pub fn bind<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in w.iter().enumerate() {
            enc.push([Conv::bind(store, &format!("enc.{}.a", i + 1), cin, c)?, Conv::bind(store, &format!("enc.{}.b", i + 1), c, c)?]);
            cin = c;
        }
        let mut dec = Vec::new();
        for i in 0..w.len() - 1 {
            dec.push(Conv::bind(store, &format!("dec.{}", i + 1), w[i + 1] + w[i], w[i])?);
        }
        Ok(DepthNet {
            cfg: cfg.clone(),
            enc,
            dec,
            dec_full: Conv::bind(store, "dec.full", w[0], w[0])?,
            head: Conv::bind(store, "dec.head", w[0], 1)?,
            san: SanParams::bind(store, w, cfg.srb_branches)?,
        })
    }

    pub fn check_extent(&self, width: usize, height: usize) -> Result<()> {
        let d = 1 << self.cfg.scales();
        if width == 0 || height == 0 || !width.is_multiple_of(d) || !height.is_multiple_of(d) {
            return Err(Error::Shape(format!("extent {width}x{height} is not divisible by 2^{}", self.cfg.scales())));
        }
        Ok(())
    }

    /// RGB encoder: strided conv + conv per scale, each output is a skip map.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &ImageTensor<T>) -> Result<Skips> {
        self.check_extent(image.width(), image.height())?;
        let (mut w, mut h) = (image.width(), image.height());
        let mut x = tape.constant(image.0.data.clone());
        let mut skips = Skips { maps: Vec::new(), dims: Vec::new() };
        for [a, b] in &self.enc {
            x = a.apply(tape, store, x, w, h, 2)?;
            x = tape.relu(x);
            w /= 2;
            h /= 2;
            x = b.apply(tape, store, x, w, h, 1)?;
            x = tape.relu(x);
            skips.maps.push(x);
            skips.dims.push((w, h, b.cout));
        }
        Ok(skips)
    }

    /// Shared decoder: upsample, concatenate the next skip, convolve; then
    /// a full-resolution conv and the bounded inverse-depth head.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, skips: &[Var], dims: &[(usize, usize, usize)]) -> Result<Var> {
        let s = self.cfg.scales();
        if skips.len() != s || dims.len() != s {
            return Err(Error::Shape(format!("decoder needs {s} skip maps, got {}", skips.len())));
        }
        let mut z = skips[s - 1];
        let (mut w, mut h, mut c) = dims[s - 1];
        for i in (0..s - 1).rev() {
            z = tape.upsample2x(z, w, h, c)?;
            let (sw, sh, sc) = dims[i];
            debug_assert_eq!((sw, sh), (2 * w, 2 * h));
            z = tape.concat(z, c, skips[i], sc)?;
            z = self.dec[i].apply(tape, store, z, sw, sh, 1)?;
            z = tape.relu(z);
            (w, h, c) = (sw, sh, self.dec[i].cout);
        }
        z = tape.upsample2x(z, w, h, c)?;
        let (fw, fh) = (2 * w, 2 * h);
        z = self.dec_full.apply(tape, store, z, fw, fh, 1)?;
        z = tape.relu(z);
        z = self.head.apply(tape, store, z, fw, fh, 1)?;
        Ok(tape.inv_depth(z, T::of(self.cfg.d_min), T::of(self.cfg.d_max)))
    }

    /// Replaces each skip by `w_i * K_i + b_i + P_i` (or `K_i + P_i` without w/b).
    pub fn augment<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, skips: &Skips, sparse: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(skips.maps.len());
        for (i, (&k, &p)) in skips.maps.iter().zip(sparse).enumerate() {
            if tape.value(k).len() != tape.value(p).len() {
                return Err(Error::Shape(format!("scale {}: skip and sparse features differ in size", i + 1)));
            }
            let base = if self.cfg.use_wb {
                let (w, b) = (tape.param(store, self.san.skip_w[i]), tape.param(store, self.san.skip_b[i]));
                tape.channel_affine(k, w, b)?
            } else {
                k
            };
            out.push(tape.add(base, p)?);
        }
        Ok(out)
    }

    /// Prediction forward on a tape; reads only RGB parameters.
    pub fn forward_predict<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &ImageTensor<T>) -> Result<Var> {
        let skips = self.encode(tape, store, image)?;
        self.decode(tape, store, &skips.maps, &skips.dims)
    }

    /// Completion forward from precomputed skips. Returns `None` when the
    /// sparse input has no valid pixel (the caller falls back to prediction).
    pub fn forward_complete_from<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        skips: &Skips,
        sparse: &DepthMap<T>,
        mode: NormMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Option<Var>> {
        let Some(feats) = self.san.encode_tape(tape, store, sparse, mode, updates)? else {
            return Ok(None);
        };
        let augmented = self.augment(tape, store, skips, &feats)?;
        Ok(Some(self.decode(tape, store, &augmented, &skips.dims)?))
    }

    /// Completion forward on a tape; with an empty sparse input this is
    /// exactly [`forward_predict`](Self::forward_predict).
    pub fn forward_complete<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
        sparse: &DepthMap<T>,
        mode: NormMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        if (sparse.width(), sparse.height()) != (image.width(), image.height()) {
            return Err(Error::Shape(format!(
                "image {}x{} vs sparse depth {}x{}",
                image.width(),
                image.height(),
                sparse.width(),
                sparse.height()
            )));
        }
        let skips = self.encode(tape, store, image)?;
        match self.forward_complete_from(tape, store, &skips, sparse, mode, updates)? {
            Some(v) => Ok(v),
            None => self.decode(tape, store, &skips.maps, &skips.dims),
        }
    }

    fn to_depth<T: Scalar>(tape: &Tape<T>, v: Var, w: usize, h: usize) -> Result<DepthMap<T>> {
        DepthMap::new(w, h, tape.value(v).to_vec())
    }

    /// Dense predicted depth from an image.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &ImageTensor<T>) -> Result<DepthMap<T>> {
        let mut tape = Tape::new();
        let v = self.forward_predict(&mut tape, store, image)?;
        Self::to_depth(&tape, v, image.width(), image.height())
    }

    /// Dense completed depth (evaluation-mode batch norm).
    pub fn complete<T: Scalar>(&self, store: &ParamStore<T>, image: &ImageTensor<T>, sparse: &DepthMap<T>) -> Result<DepthMap<T>> {
        let mut tape = Tape::new();
        let v = self.forward_complete(&mut tape, store, image, sparse, NormMode::Eval, &mut Vec::new())?;
        Self::to_depth(&tape, v, image.width(), image.height())
    }

    /// Name prefixes of the parameter groups.
    pub const ENCODER: &'static str = "enc.";
    pub const DECODER: &'static str = "dec.";
    pub const SAN: &'static str = "san.";
}

/// Logit that makes the bounded head emit `depth`.
pub fn head_logit(depth: f64, d_min: f64, d_max: f64) -> f64 {
    let s = (1.0 / depth - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max);
    (s / (1.0 - s)).ln()
}

/// Inverse of the head's activation for a single value, for tests.
pub fn head_depth(logit: f64, d_min: f64, d_max: f64) -> f64 {
    1.0 / (sigmoid(logit) * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_tensor::DenseMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn small() -> ModelConfig {
        ModelConfig { widths: vec![4, 6, 8], ..ModelConfig::default() }
    }

    fn image(w: usize, h: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_dense(DenseMap::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()).unwrap()
    }

    fn sparse(w: usize, h: usize, n: usize, seed: u64) -> DepthMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![0.0; w * h];
        for _ in 0..n {
            d[rng.gen_range(0..w * h)] = rng.gen_range(1.0..40.0);
        }
        DepthMap::new(w, h, d).unwrap()
    }

    fn net() -> (ParamStore<f64>, DepthNet) {
        let mut store = ParamStore::new();
        let net = DepthNet::init(&small(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, net)
    }

    #[test]
    fn head_logit_round_trips() {
        for d in [0.5, 10.0, 80.0] {
            assert!((head_depth(head_logit(d, 0.1, 100.0), 0.1, 100.0) - d).abs() < 1e-9 * d);
        }
    }

    #[test]
    fn output_is_bounded_and_deterministic() {
        let (store, net) = net();
        let img = image(16, 16, 3);
        let a = net.predict(&store, &img).unwrap();
        let b = net.predict(&store, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|&d| d > 0.1 && d < 100.0));
    }

    #[test]
    fn extreme_logits_stay_in_range() {
        let (mut store, net) = net();
        let head_b = store.id("dec.head.b").unwrap();
        for bias in [-30.0, 30.0] {
            store.entry_mut(head_b).value = vec![bias];
            let d = net.predict(&store, &image(16, 16, 4)).unwrap();
            assert!(d.values().iter().all(|x| x.is_finite() && *x >= 0.1 && *x <= 100.0));
        }
    }

    #[test]
    fn extent_checks() {
        let (store, net) = net();
        assert!(net.predict(&store, &image(12, 16, 0)).is_err());
        assert!(net.complete(&store, &image(16, 16, 0), &DepthMap::invalid(8, 16)).is_err());
    }

    #[test]
    fn empty_sparse_input_falls_back_bitwise() {
        let (store, net) = net();
        let img = image(16, 16, 5);
        let p = net.predict(&store, &img).unwrap();
        let c = net.complete(&store, &img, &DepthMap::invalid(16, 16)).unwrap();
        assert_eq!(p.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), c.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn prediction_reads_strict_subset_of_completion_params() {
        let (store, net) = net();
        let img = image(16, 16, 6);
        let mut tp = Tape::new();
        net.forward_predict(&mut tp, &store, &img).unwrap();
        let mut tc = Tape::new();
        net.forward_complete(&mut tc, &store, &img, &sparse(16, 16, 20, 1), NormMode::Eval, &mut Vec::new()).unwrap();
        let p: BTreeSet<_> = tp.params_read().into_iter().collect();
        let c: BTreeSet<_> = tc.params_read().into_iter().collect();
        assert!(p.is_subset(&c) && p.len() < c.len());
        assert!(p.iter().all(|&id| !store.entry(id).name.starts_with("san.")));
        assert!(c.contains(&store.id("san.skip1.w").unwrap()));
    }

    #[test]
    fn without_wb_skips_are_not_read() {
        let mut store = ParamStore::<f64>::new();
        let cfg = ModelConfig { use_wb: false, ..small() };
        let net = DepthNet::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tc = Tape::new();
        net.forward_complete(&mut tc, &store, &image(16, 16, 1), &sparse(16, 16, 20, 2), NormMode::Eval, &mut Vec::new()).unwrap();
        let read = tc.params_read();
        assert!(!read.contains(&store.id("san.skip1.w").unwrap()));
    }

    #[test]
    fn sparse_input_changes_output() {
        let (store, net) = net();
        let img = image(16, 16, 7);
        let p = net.predict(&store, &img).unwrap();
        let c = net.complete(&store, &img, &sparse(16, 16, 30, 3)).unwrap();
        assert_ne!(p, c);
    }

    #[test]
    fn bind_recovers_same_handles() {
        let (store, net) = net();
        assert_eq!(DepthNet::bind(&small(), &store).unwrap(), net);
        let other = ModelConfig { widths: vec![4, 6, 9], ..small() };
        assert!(DepthNet::bind(&other, &store).is_err());
    }
}
