//! Sparse residual blocks and the sparse auxiliary network (SAN).
//!
//! Each block max-pools its input to half resolution, runs up to three
//! parallel branches of (sparse conv, batch norm, ReLU) units of depth 1, 2
//! and 3, and sums the branch outputs. The chain of blocks produces one
//! sparse feature tensor per RGB skip scale; each is densified and added
//! into the matching skip connection as `w * K + b + P`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{ParamId, ParamKind, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::sparse_conv::{build_kernel_map, build_pool_map, update_running_stats, NormMode, BN_EPS, BN_MOMENTUM};
use crate::sparse_tensor::{sparsify, Coord, DenseFeatureMap, DenseMap, DepthMap, SparseTensor};

/// Depth of each branch, in (conv, BN, ReLU) units.
pub const BRANCH_DEPTHS: [usize; 3] = [1, 2, 3];

/// Initial BN scale of the last unit of every branch. Keeps the injected
/// features small when stage 2 starts, so completion begins near the
/// trained prediction path instead of swamping its skips.
pub const OUT_GAMMA: f64 = 0.1;

/// He-style uniform initialisation with bound `sqrt(6 / fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize, gain: f64) -> Vec<T> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}

/// Parameter handles of one (sparse conv, BN, ReLU) unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
}

impl ConvUnit {
    fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize, gamma: f64) -> Result<Self> {
        let t = ParamKind::Trainable;
        Ok(ConvUnit {
            cin,
            cout,
            weight: store.add(&format!("{name}.w"), &[3, 3, cin, cout], init_uniform(rng, 9 * cin * cout, 9 * cin, 1.0), t)?,
            bias: store.add(&format!("{name}.b"), &[cout], vec![T::zero(); cout], t)?,
            bn_gamma: store.add(&format!("{name}.bn_g"), &[cout], vec![T::of(gamma); cout], t)?,
            bn_beta: store.add(&format!("{name}.bn_b"), &[cout], vec![T::zero(); cout], t)?,
            bn_mean: store.add(&format!("{name}.bn_rm"), &[cout], vec![T::zero(); cout], ParamKind::Buffer)?,
            bn_var: store.add(&format!("{name}.bn_rv"), &[cout], vec![T::one(); cout], ParamKind::Buffer)?,
        })
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let unit = ConvUnit {
            cin,
            cout,
            weight: store.id(&format!("{name}.w"))?,
            bias: store.id(&format!("{name}.b"))?,
            bn_gamma: store.id(&format!("{name}.bn_g"))?,
            bn_beta: store.id(&format!("{name}.bn_b"))?,
            bn_mean: store.id(&format!("{name}.bn_rm"))?,
            bn_var: store.id(&format!("{name}.bn_rv"))?,
        };
        if store.entry(unit.weight).shape != [3, 3, cin, cout] {
            return Err(Error::Shape(format!("{name}.w has shape {:?}, expected [3, 3, {cin}, {cout}]", store.entry(unit.weight).shape)));
        }
        Ok(unit)
    }
}

/// Pending running-statistics update produced by a training-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

/// Applies updates in order with the standard momentum.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        let mut rm = store.value(u.mean_id).to_vec();
        let mut rv = store.value(u.var_id).to_vec();
        update_running_stats(&mut rm, &mut rv, &u.mean, &u.var, u.rows, T::of(BN_MOMENTUM));
        store.entry_mut(u.mean_id).value = rm;
        store.entry_mut(u.var_id).value = rv;
    }
}

/// A sparse tensor whose features live on a tape.
#[derive(Debug, Clone)]
pub struct SparseVar {
    pub feats: Var,
    pub coords: Arc<Vec<Coord>>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl SparseVar {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Parameters of one sparse residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct SrbParams {
    pub cin: usize,
    pub cout: usize,
    /// One entry per active branch; branch `j` holds `BRANCH_DEPTHS[j]` units.
    pub branches: Vec<Vec<ConvUnit>>,
}

impl SrbParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        n_branches: usize,
    ) -> Result<Self> {
        check_branches(n_branches)?;
        let mut branches = Vec::new();
        for (j, &depth) in BRANCH_DEPTHS.iter().take(n_branches).enumerate() {
            let mut units = Vec::new();
            for u in 0..depth {
                let ci = if u == 0 { cin } else { cout };
                let gamma = if u + 1 == depth { OUT_GAMMA } else { 1.0 };
                units.push(ConvUnit::register(store, rng, &format!("{name}.br{j}.u{u}"), ci, cout, gamma)?);
            }
            branches.push(units);
        }
        Ok(SrbParams { cin, cout, branches })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, cin: usize, cout: usize, n_branches: usize) -> Result<Self> {
        check_branches(n_branches)?;
        let mut branches = Vec::new();
        for (j, &depth) in BRANCH_DEPTHS.iter().take(n_branches).enumerate() {
            let mut units = Vec::new();
            for u in 0..depth {
                let ci = if u == 0 { cin } else { cout };
                units.push(ConvUnit::bind(store, &format!("{name}.br{j}.u{u}"), ci, cout)?);
            }
            branches.push(units);
        }
        Ok(SrbParams { cin, cout, branches })
    }

    /// Pool, run every branch on the pooled tensor, and sum.
    pub fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SparseVar,
        mode: NormMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<SparseVar> {
        if input.channels != self.cin {
            return Err(Error::Shape(format!("SRB expects {} channels, got {}", self.cin, input.channels)));
        }
        let pool = build_pool_map(&input.coords, input.width, input.height)?;
        let coords = Arc::new(pool.out_coords.clone());
        let (w, h) = (pool.out_width, pool.out_height);
        if input.is_empty() {
            let feats = tape.constant(Vec::new());
            return Ok(SparseVar { feats, coords, width: w, height: h, channels: self.cout });
        }
        let pooled = tape.max_pool(input.feats, &pool, self.cin)?;
        let kmap = Arc::new(build_kernel_map(&coords, 3, 1, w, h)?);
        let mut sum: Option<Var> = None;
        for branch in &self.branches {
            let mut x = pooled;
            for unit in branch {
                let wv = tape.param(store, unit.weight);
                let bv = tape.param(store, unit.bias);
                x = tape.sparse_conv(x, wv, bv, kmap.clone(), unit.cin, unit.cout)?;
                let g = tape.param(store, unit.bn_gamma);
                let b = tape.param(store, unit.bn_beta);
                x = match mode {
                    NormMode::Train => {
                        let (y, mean, var) = tape.batch_norm(x, g, b, None, T::of(BN_EPS))?;
                        updates.push(BnUpdate { mean_id: unit.bn_mean, var_id: unit.bn_var, mean, var, rows: coords.len() });
                        y
                    }
                    NormMode::Eval => {
                        let stats = (store.value(unit.bn_mean), store.value(unit.bn_var));
                        tape.batch_norm(x, g, b, Some(stats), T::of(BN_EPS))?.0
                    }
                };
                x = tape.relu(x);
            }
            sum = Some(match sum {
                None => x,
                Some(s) => tape.add(s, x)?,
            });
        }
        Ok(SparseVar { feats: sum.expect("at least one branch"), coords, width: w, height: h, channels: self.cout })
    }
}

fn check_branches(n: usize) -> Result<()> {
    if !(1..=BRANCH_DEPTHS.len()).contains(&n) {
        return Err(Error::Config(format!("SRB branch count must be 1, 2 or 3, got {n}")));
    }
    Ok(())
}

fn run_on_tape<T: Scalar>(
    s: &SparseTensor<T>,
    f: impl FnOnce(&mut Tape<T>, SparseVar) -> Result<SparseVar>,
) -> Result<SparseTensor<T>> {
    let mut tape = Tape::new();
    let feats = tape.constant(s.feats.clone());
    let input = SparseVar { feats, coords: Arc::new(s.coords.clone()), width: s.width, height: s.height, channels: s.channels };
    let out = f(&mut tape, input)?;
    Ok(SparseTensor {
        coords: out.coords.to_vec(),
        feats: tape.value(out.feats).to_vec(),
        width: out.width,
        height: out.height,
        channels: out.channels,
        batch: s.batch,
    })
}

/// Value-level block forward. In training mode the running statistics in
/// `store` are updated.
pub fn srb_forward<T: Scalar>(store: &mut ParamStore<T>, p: &SrbParams, s: &SparseTensor<T>, mode: NormMode) -> Result<SparseTensor<T>> {
    let mut updates = Vec::new();
    let snapshot = store.clone();
    let out = run_on_tape(s, |tape, x| p.forward_tape(tape, &snapshot, &x, mode, &mut updates))?;
    apply_bn_updates(store, &updates);
    Ok(out)
}

/// The sparse encoder plus the per-scale skip modulation `w_i`, `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SanParams {
    pub blocks: Vec<SrbParams>,
    pub skip_w: Vec<ParamId>,
    pub skip_b: Vec<ParamId>,
    pub widths: Vec<usize>,
}

impl SanParams {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, widths: &[usize], n_branches: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let (mut skip_w, mut skip_b) = (Vec::new(), Vec::new());
        let mut cin = 1;
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(SrbParams::register(store, rng, &format!("san.srb{}", i + 1), cin, c, n_branches)?);
            skip_w.push(store.add(&format!("san.skip{}.w", i + 1), &[c], vec![T::one(); c], ParamKind::Trainable)?);
            skip_b.push(store.add(&format!("san.skip{}.b", i + 1), &[c], vec![T::zero(); c], ParamKind::Trainable)?);
            cin = c;
        }
        Ok(SanParams { blocks, skip_w, skip_b, widths: widths.to_vec() })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, widths: &[usize], n_branches: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let (mut skip_w, mut skip_b) = (Vec::new(), Vec::new());
        let mut cin = 1;
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(SrbParams::bind(store, &format!("san.srb{}", i + 1), cin, c, n_branches)?);
            skip_w.push(store.id(&format!("san.skip{}.w", i + 1))?);
            skip_b.push(store.id(&format!("san.skip{}.b", i + 1))?);
            cin = c;
        }
        Ok(SanParams { blocks, skip_w, skip_b, widths: widths.to_vec() })
    }

    pub fn scales(&self) -> usize {
        self.blocks.len()
    }

    fn check_extent(&self, width: usize, height: usize) -> Result<()> {
        let d = 1 << self.scales();
        if !width.is_multiple_of(d) || !height.is_multiple_of(d) || width == 0 || height == 0 {
            return Err(Error::Shape(format!("raster {width}x{height} is not divisible by 2^{}", self.scales())));
        }
        Ok(())
    }

    /// Runs the block chain and densifies each scale onto the tape.
    ///
    /// Returns `None` for an input without valid pixels: the SAN is then
    /// not evaluated at all and no SAN parameter is read.
    pub fn encode_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        depth: &DepthMap<T>,
        mode: NormMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Option<Vec<Var>>> {
        self.check_extent(depth.width(), depth.height())?;
        let s = sparsify(depth)?;
        if s.is_empty() {
            return Ok(None);
        }
        let feats = tape.constant(s.feats.clone());
        let mut x = SparseVar { feats, coords: Arc::new(s.coords), width: s.width, height: s.height, channels: 1 };
        let mut dense = Vec::with_capacity(self.scales());
        for block in &self.blocks {
            x = block.forward_tape(tape, store, &x, mode, updates)?;
            let pixel = x.coords.iter().map(|c| c.v as usize * x.width + c.u as usize).collect();
            dense.push(tape.densify(x.feats, pixel, x.channels, x.width * x.height)?);
        }
        Ok(Some(dense))
    }
}

/// Value-level SAN encoding: densified features `P_1 .. P_S`.
///
/// An input with no valid pixel yields all-zero maps without any arithmetic.
pub fn san_encode<T: Scalar>(store: &mut ParamStore<T>, p: &SanParams, depth: &DepthMap<T>, mode: NormMode) -> Result<Vec<DenseFeatureMap<T>>> {
    p.check_extent(depth.width(), depth.height())?;
    let dims: Vec<(usize, usize, usize)> =
        p.widths.iter().enumerate().map(|(i, &c)| (depth.width() >> (i + 1), depth.height() >> (i + 1), c)).collect();
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let snapshot = store.clone();
    let Some(vars) = p.encode_tape(&mut tape, &snapshot, depth, mode, &mut updates)? else {
        return Ok(dims.iter().map(|&(w, h, c)| DenseMap::zeros(w, h, c)).collect());
    };
    apply_bn_updates(store, &updates);
    vars.iter().zip(&dims).map(|(&v, &(w, h, c))| DenseMap::from_vec(w, h, c, tape.value(v).to_vec())).collect()
}

/// `w * K + b + P` with per-channel `w` and `b`.
pub fn augment_skip<T: Scalar>(k: &DenseFeatureMap<T>, p: &DenseFeatureMap<T>, w: &[T], b: &[T]) -> Result<DenseFeatureMap<T>> {
    if (k.width, k.height, k.channels) != (p.width, p.height, p.channels) {
        return Err(Error::Shape(format!(
            "skip map {}x{}x{} vs sparse features {}x{}x{}",
            k.width, k.height, k.channels, p.width, p.height, p.channels
        )));
    }
    if w.len() != k.channels || b.len() != k.channels {
        return Err(Error::Shape(format!("w/b need {} channels, got {} / {}", k.channels, w.len(), b.len())));
    }
    let mut tape = Tape::new();
    let (kv, pv) = (tape.constant(k.data.clone()), tape.constant(p.data.clone()));
    let (wv, bv) = (tape.constant(w.to_vec()), tape.constant(b.to_vec()));
    let a = tape.channel_affine(kv, wv, bv)?;
    let out = tape.add(a, pv)?;
    DenseMap::from_vec(k.width, k.height, k.channels, tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_srb(cin: usize, cout: usize, branches: usize) -> (ParamStore<f64>, SrbParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SrbParams::register(&mut store, &mut rng, "srb", cin, cout, branches).unwrap();
        (store, p)
    }

    #[test]
    fn branch_structure() {
        let (store, p) = store_with_srb(1, 4, 3);
        assert_eq!(p.branches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(p.branches[2][1].cin, 4);
        assert!(store.id("srb.br2.u2.w").is_ok());
        let (_, p1) = store_with_srb(1, 4, 1);
        assert_eq!(p1.branches.len(), 1);
        let mut s = ParamStore::<f64>::new();
        assert!(SrbParams::register(&mut s, &mut ChaCha8Rng::seed_from_u64(0), "x", 1, 2, 4).is_err());
    }

    #[test]
    fn empty_input_empty_output() {
        let (mut store, p) = store_with_srb(1, 4, 3);
        let out = srb_forward(&mut store, &p, &SparseTensor::empty(16, 16, 1), NormMode::Train).unwrap();
        assert!(out.is_empty());
        assert_eq!((out.width, out.height, out.channels), (8, 8, 4));
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let (mut store, p) = store_with_srb(1, 3, 3);
        for e in store.entries_mut() {
            if e.name.ends_with(".w") || e.name.ends_with(".b") || e.name.ends_with(".bn_g") || e.name.ends_with(".bn_b") {
                e.value.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let s = SparseTensor { coords: vec![Coord::new(1, 1), Coord::new(6, 2)], feats: vec![3.0, 9.0], width: 8, height: 8, channels: 1, batch: 1 };
        let out = srb_forward(&mut store, &p, &s, NormMode::Train).unwrap();
        assert_eq!(out.coords, vec![Coord::new(0, 0), Coord::new(3, 1)]);
        assert!(out.feats.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_pixel_pools_to_half_coordinate() {
        let (mut store, p) = store_with_srb(1, 2, 3);
        let s = SparseTensor { coords: vec![Coord::new(4, 4)], feats: vec![5.0], width: 16, height: 16, channels: 1, batch: 1 };
        let out = srb_forward(&mut store, &p, &s, NormMode::Eval).unwrap();
        assert_eq!(out.coords, vec![Coord::new(2, 2)]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (mut store, p) = store_with_srb(2, 2, 1);
        let s = SparseTensor { coords: vec![Coord::new(0, 0)], feats: vec![5.0], width: 4, height: 4, channels: 1, batch: 1 };
        assert!(srb_forward(&mut store, &p, &s, NormMode::Eval).is_err());
    }

    fn san(widths: &[usize]) -> (ParamStore<f64>, SanParams) {
        let mut store = ParamStore::new();
        let p = SanParams::register(&mut store, &mut ChaCha8Rng::seed_from_u64(5), widths, 3).unwrap();
        (store, p)
    }

    #[test]
    fn empty_depth_gives_exact_zero_maps() {
        let (mut store, p) = san(&[2, 3, 4, 5]);
        let maps = san_encode(&mut store, &p, &DepthMap::invalid(64, 64), NormMode::Train).unwrap();
        let shapes: Vec<_> = maps.iter().map(|m| (m.width, m.height, m.channels)).collect();
        assert_eq!(shapes, vec![(32, 32, 2), (16, 16, 3), (8, 8, 4), (4, 4, 5)]);
        assert!(maps.iter().all(|m| m.data.iter().all(|x| x.to_bits() == 0)));
    }

    #[test]
    fn first_scale_nonzero_rows_bounded_by_valid_count() {
        let (mut store, p) = san(&[2, 3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data = vec![0.0; 64 * 64];
        let m = 37;
        for _ in 0..m {
            let i = rng.gen_range(0..data.len());
            data[i] = rng.gen_range(1.0..50.0);
        }
        let d = DepthMap::new(64, 64, data).unwrap();
        let valid = d.valid_count();
        let maps = san_encode(&mut store, &p, &d, NormMode::Eval).unwrap();
        let nonzero_rows = maps[0].data.chunks(2).filter(|r| r.iter().any(|&x| x != 0.0)).count();
        // oracle: distinct pooled cells of the valid pixels
        let cells: std::collections::HashSet<_> = d.valid_indices().iter().map(|&i| ((i % 64) / 2, (i / 64) / 2)).collect();
        assert!(nonzero_rows <= cells.len());
        assert!(cells.len() <= valid);
    }

    #[test]
    fn extent_must_divide() {
        let (mut store, p) = san(&[2, 2]);
        assert!(san_encode(&mut store, &p, &DepthMap::invalid(6, 8), NormMode::Eval).is_err());
    }

    #[test]
    fn augment_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k: DenseMap<f64> = DenseMap::from_vec(2, 2, 1, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = DenseMap::from_vec(2, 2, 1, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let zero = DenseMap::zeros(2, 2, 1);
        assert_eq!(augment_skip(&k, &zero, &[1.0], &[0.0]).unwrap(), k);
        assert_eq!(augment_skip(&k, &p, &[0.0], &[0.0]).unwrap(), p);
        let out = augment_skip(&k, &p, &[2.0], &[1.0]).unwrap();
        for i in 0..4 {
            assert!((out.data[i] - (2.0 * k.data[i] + 1.0 + p.data[i])).abs() < 1e-15);
        }
        assert!(augment_skip(&k, &DenseMap::zeros(2, 1, 1), &[1.0], &[0.0]).is_err());
    }
}
