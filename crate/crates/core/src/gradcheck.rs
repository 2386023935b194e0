//! Central finite-difference checks of every differentiable op, in f64.
//!
//! Each op output is reduced with a fixed random projection so that no
//! gradient component can cancel by symmetry. The error is the norm-based
//! `|a - n| / (|a| + |n|)` over all checked components.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_scene, sample_sparse, SceneSpec, SparsitySpec};
use crate::depthnet::{DepthNet, ModelConfig};
use crate::error::{Error, Result};
use crate::grad::{ParamId, ParamStore, Tape, Var};
use crate::kernels::ConvGeom;
use crate::sparse_conv::{build_kernel_map, build_pool_map, NormMode, BN_EPS};
use crate::sparse_tensor::{Coord, DepthMap};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub op: String,
    /// Number of gradient components compared.
    pub checked: usize,
    /// Components dropped because a ReLU or max-pool switch fell inside the
    /// difference stencil (only the network check can hit one).
    pub skipped: usize,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE && self.skipped * 10 <= self.checked + self.skipped
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares the tape gradient of `proj . f(inputs)` with central differences
/// with respect to every input component.
pub fn check_op(name: &str, inputs: &[Vec<f64>], seed: u64, f: &Build) -> Result<CheckRow> {
    let eval = |xs: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |xs: &[Vec<f64>]| -> Result<f64> {
        let (mut t, _, o) = eval(xs)?;
        let l = t.dot(o, proj.clone())?;
        Ok(t.value(l)[0])
    };
    let mut tape = tape;
    let root = tape.dot(out, proj.clone())?;
    let grads = tape.backward(root)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let x0 = xs[k][i];
            xs[k][i] = x0 + STEP;
            let up = loss(&xs)?;
            xs[k][i] = x0 - STEP;
            let down = loss(&xs)?;
            xs[k][i] = x0;
            analytic.push(g[i]);
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(CheckRow { op: name.to_string(), checked: analytic.len(), skipped: 0, rel_err: rel_err(&analytic, &numeric) })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, with random signs.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.2..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn random_coords(rng: &mut ChaCha8Rng, w: usize, h: usize, keep: f64) -> Vec<Coord> {
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if rng.gen_bool(keep) {
                out.push(Coord::new(u as u32, v as u32));
            }
        }
    }
    out
}

/// Every op of the engine, each on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    for stride in [1, 2] {
        let g = ConvGeom { in_w: 5, in_h: 4, cin: 2, cout: 3, k: 3, stride };
        let ins = [uniform(&mut rng, 5 * 4 * 2, -1.0, 1.0), uniform(&mut rng, g.weight_len(), -1.0, 1.0), uniform(&mut rng, 3, -1.0, 1.0)];
        rows.push(check_op(&format!("conv2d/stride{stride}"), &ins, seed, &|t, v| t.conv2d(v[0], v[1], v[2], g))?);
    }

    for stride in [1, 2] {
        let coords = random_coords(&mut rng, 6, 5, 0.5);
        let map = Arc::new(build_kernel_map(&coords, 3, stride, 6, 5)?);
        let (cin, cout) = (2, 3);
        let ins = [uniform(&mut rng, coords.len() * cin, -1.0, 1.0), uniform(&mut rng, 9 * cin * cout, -1.0, 1.0), uniform(&mut rng, cout, -1.0, 1.0)];
        rows.push(check_op(&format!("sparse_conv/stride{stride}"), &ins, seed, &|t, v| t.sparse_conv(v[0], v[1], v[2], map.clone(), cin, cout))?);
    }

    let c = 3;
    let bn_in = [uniform(&mut rng, 7 * c, -2.0, 2.0), uniform(&mut rng, c, 0.5, 1.5), uniform(&mut rng, c, -0.5, 0.5)];
    rows.push(check_op("sparse_bn/train", &bn_in, seed, &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, BN_EPS)?.0))?);
    let (rm, rv) = (uniform(&mut rng, c, -0.5, 0.5), uniform(&mut rng, c, 0.5, 2.0));
    rows.push(check_op("sparse_bn/eval", &bn_in, seed, &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), BN_EPS)?.0))?);

    rows.push(check_op("relu", &[off_zero(&mut rng, 12)], seed, &|t, v| Ok(t.relu(v[0])))?);

    // Distinct values per channel so every pooling cell has a unique maximum.
    let coords = random_coords(&mut rng, 6, 6, 0.6);
    let pool = build_pool_map(&coords, 6, 6)?;
    let mut feats: Vec<f64> = (0..coords.len() * 2).map(|i| i as f64 * 0.37).collect();
    use rand::seq::SliceRandom;
    feats.shuffle(&mut rng);
    rows.push(check_op("sparse_max_pool", &[feats], seed, &|t, v| t.max_pool(v[0], &pool, 2))?);

    // Skip augmentation w * K + b + P.
    let ins = [uniform(&mut rng, 4 * 4 * c, -1.0, 1.0), uniform(&mut rng, c, 0.5, 1.5), uniform(&mut rng, c, -0.5, 0.5), uniform(&mut rng, 4 * 4 * c, -1.0, 1.0)];
    rows.push(check_op("skip_augment", &ins, seed, &|t, v| {
        let k = t.channel_affine(v[0], v[1], v[2])?;
        t.add(k, v[3])
    })?);

    let gt: Vec<f64> = (0..10).map(|i| if i % 4 == 3 { 0.0 } else { rng.gen_range(1.0..20.0) }).collect();
    let pred = uniform(&mut rng, 10, 1.0, 20.0);
    for lambda in [0.0, 0.85, 1.0] {
        rows.push(check_op(&format!("silog/lambda{lambda}"), std::slice::from_ref(&pred), seed, &|t, v| t.silog(v[0], &gt, lambda))?);
    }

    rows.push(check_op("concat", &[uniform(&mut rng, 6 * 2, -1.0, 1.0), uniform(&mut rng, 6 * 3, -1.0, 1.0)], seed, &|t, v| t.concat(v[0], 2, v[1], 3))?);
    rows.push(check_op("upsample2x", &[uniform(&mut rng, 3 * 2 * 2, -1.0, 1.0)], seed, &|t, v| t.upsample2x(v[0], 3, 2, 2))?);
    let pixel = vec![4, 0, 7];
    rows.push(check_op("densify", &[uniform(&mut rng, 3 * 2, -1.0, 1.0)], seed, &|t, v| t.densify(v[0], pixel.clone(), 2, 9))?);
    rows.push(check_op("inv_depth_head", &[uniform(&mut rng, 8, -4.0, 4.0)], seed, &|t, v| Ok(t.inv_depth(v[0], 0.1, 100.0)))?);
    rows.push(check_op("add_scale_sum", &[uniform(&mut rng, 5, -1.0, 1.0), uniform(&mut rng, 5, -1.0, 1.0)], seed, &|t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.scale(a, 1.7);
        Ok(t.sum(s))
    })?);
    Ok(rows)
}

/// Gradient of the joint loss of a tiny network with respect to every
/// parameter, against central differences on a random subset of `samples`
/// components.
pub fn network_check(seed: u64, samples: usize) -> Result<CheckRow> {
    let cfg = ModelConfig { widths: vec![2, 3], ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = DepthNet::init(&cfg, &mut store, &mut rng)?;
    // Move w and b away from their identity init so every term contributes.
    for e in store.entries_mut().iter_mut().filter(|e| e.name.starts_with("san.skip")) {
        e.value.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
    }
    let scene = gen_scene(&SceneSpec { seed, width: 16, height: 16, ..SceneSpec::default() });
    let image = scene.image.cast::<f64>();
    let gt = scene.depth.cast::<f64>();
    let sparse: DepthMap<f64> = sample_sparse(&scene.depth, &SparsitySpec::fraction(0.5, seed))?.cast();
    let loss = |store: &ParamStore<f64>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let skips = net.encode(&mut tape, store, &image)?;
        let p = net.decode(&mut tape, store, &skips.maps, &skips.dims)?;
        let c = net
            .forward_complete_from(&mut tape, store, &skips, &sparse, NormMode::Train, &mut Vec::new())?
            .ok_or_else(|| Error::Invariant("sparse sample is empty".into()))?;
        let lp = tape.silog(p, gt.values(), 0.85)?;
        let lc = tape.silog(c, gt.values(), 0.85)?;
        let root = tape.add(lp, lc)?;
        Ok((tape, root))
    };
    let (tape, root) = loss(&store)?;
    let grads = tape.backward(root)?;
    let by_id: std::collections::HashMap<ParamId, Vec<f64>> = grads.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
    let mut slots: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids().filter(|&id| store.entry(id).is_trainable()).collect::<Vec<_>>() {
        for i in 0..store.entry(id).len() {
            slots.push((id, i));
        }
    }
    use rand::seq::SliceRandom;
    slots.shuffle(&mut rng);
    slots.truncate(samples);
    let mut central = |id: ParamId, i: usize, h: f64| -> Result<f64> {
        let x0 = store.entry(id).value[i];
        store.entry_mut(id).value[i] = x0 + h;
        let (t, r) = loss(&store)?;
        let up = t.value(r)[0];
        store.entry_mut(id).value[i] = x0 - h;
        let (t, r) = loss(&store)?;
        let down = t.value(r)[0];
        store.entry_mut(id).value[i] = x0;
        Ok((up - down) / (2.0 * h))
    };
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (id, i) in slots {
        let n = central(id, i, STEP)?;
        // On a smooth stretch the two estimates agree to O(h^2); across a
        // kink they do not.
        let fine = central(id, i, STEP / 4.0)?;
        if (n - fine).abs() > 1e-7 * (n.abs() + fine.abs() + 1e-3) {
            skipped += 1;
            continue;
        }
        analytic.push(by_id.get(&id).map_or(0.0, |g| g[i]));
        numeric.push(n);
    }
    Ok(CheckRow { op: "network/joint".into(), checked: analytic.len(), skipped, rel_err: rel_err(&analytic, &numeric) })
}

/// Op suite plus the network check.
pub fn full_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = op_suite(seed)?;
    rows.push(network_check(seed, 400)?);
    Ok(rows)
}
