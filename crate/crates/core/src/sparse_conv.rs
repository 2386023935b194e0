//! Generalized sparse 2D convolution over valid coordinates, plus the
//! sparse batch norm, ReLU and max-pool layers that accompany it.
//!
//! A [`KernelMap`] lists, for each kernel offset, the `(input, output)` row
//! pairs that the offset connects. Building it is a hash lookup per output
//! and offset, so cost scales with the number of valid points rather than
//! the raster area.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::scalar::Scalar;
use crate::sparse_tensor::{Coord, SparseTensor};

/// Row pairs connected by one kernel offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffsetPairs {
    pub inputs: Vec<u32>,
    pub outputs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMap {
    pub k: usize,
    pub stride: usize,
    pub in_coords: Vec<Coord>,
    pub in_len: usize,
    pub out_coords: Vec<Coord>,
    pub out_width: usize,
    pub out_height: usize,
    /// Indexed by `ky * k + kx`; matches the weight layout `k x k x Cin x Cout`.
    pub offsets: Vec<OffsetPairs>,
}

impl KernelMap {
    pub fn pair_count(&self) -> usize {
        self.offsets.iter().map(|p| p.inputs.len()).sum()
    }

    /// Number of (offset, input) pairs feeding each output row.
    pub fn fan_in(&self) -> Vec<usize> {
        let mut n = vec![0; self.out_coords.len()];
        for p in &self.offsets {
            for &j in &p.outputs {
                n[j as usize] += 1;
            }
        }
        n
    }
}

fn check_coords(coords: &[Coord], width: usize, height: usize) -> Result<HashMap<Coord, u32>> {
    let mut index = HashMap::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        if c.u as usize >= width || c.v as usize >= height {
            return Err(Error::Invariant(format!("coordinate ({}, {}) outside {width}x{height}", c.u, c.v)));
        }
        if index.insert(*c, i as u32).is_some() {
            return Err(Error::Invariant(format!("duplicate coordinate ({}, {}, {})", c.u, c.v, c.s)));
        }
    }
    Ok(index)
}

/// Unique `floor(c / 2)` cells in canonical row-major order.
fn halved(coords: &[Coord]) -> Vec<Coord> {
    let mut out: Vec<Coord> = coords.iter().map(|c| Coord { u: c.u / 2, v: c.v / 2, s: c.s }).collect();
    out.sort_by_key(|c| c.canonical_key());
    out.dedup();
    out
}

/// Builds the offset → (input, output) pair lists for a `k x k` kernel.
///
/// Stride 1 keeps the input coordinate set (and order) as outputs; stride 2
/// emits the unique halved coordinates on the half-resolution grid.
pub fn build_kernel_map(coords: &[Coord], k: usize, stride: usize, width: usize, height: usize) -> Result<KernelMap> {
    if k.is_multiple_of(2) {
        return Err(Error::Contract(format!("kernel size must be odd, got {k}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Contract(format!("stride must be 1 or 2, got {stride}")));
    }
    let index = check_coords(coords, width, height)?;
    let (out_coords, out_width, out_height) = if stride == 1 {
        (coords.to_vec(), width, height)
    } else {
        (halved(coords), width.div_ceil(2), height.div_ceil(2))
    };
    let r = (k / 2) as i64;
    let mut offsets = vec![OffsetPairs::default(); k * k];
    for ky in 0..k {
        for kx in 0..k {
            let pairs = &mut offsets[ky * k + kx];
            for (j, c) in out_coords.iter().enumerate() {
                let u = stride as i64 * c.u as i64 + kx as i64 - r;
                let v = stride as i64 * c.v as i64 + ky as i64 - r;
                if u < 0 || v < 0 {
                    continue;
                }
                if let Some(&i) = index.get(&Coord { u: u as u32, v: v as u32, s: c.s }) {
                    pairs.inputs.push(i);
                    pairs.outputs.push(j as u32);
                }
            }
        }
    }
    Ok(KernelMap {
        k,
        stride,
        in_coords: coords.to_vec(),
        in_len: coords.len(),
        out_coords,
        out_width,
        out_height,
        offsets,
    })
}

/// Assignment of input rows to 2x2 pooling cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMap {
    pub out_coords: Vec<Coord>,
    pub out_width: usize,
    pub out_height: usize,
    /// Output row for every input row.
    pub cell_of: Vec<u32>,
}

pub fn build_pool_map(coords: &[Coord], width: usize, height: usize) -> Result<PoolMap> {
    check_coords(coords, width, height)?;
    let out_coords = halved(coords);
    let lookup: HashMap<Coord, u32> = out_coords.iter().enumerate().map(|(j, c)| (*c, j as u32)).collect();
    let cell_of = coords.iter().map(|c| lookup[&Coord { u: c.u / 2, v: c.v / 2, s: c.s }]).collect();
    Ok(PoolMap { out_coords, out_width: width.div_ceil(2), out_height: height.div_ceil(2), cell_of })
}

/// Weights `k x k x Cin x Cout` and bias `Cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvParams<T> {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> SparseConvParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::Contract(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.weights.len() != self.k * self.k * self.cin * self.cout || self.bias.len() != self.cout {
            return Err(Error::Shape("sparse conv parameter lengths do not match k, cin, cout".into()));
        }
        if !self.weights.iter().chain(&self.bias).all(|x| x.is_finite()) {
            return Err(Error::DataValidation("non-finite sparse conv parameter".into()));
        }
        Ok(())
    }
}

fn with_feats<T: Scalar>(like: &SparseTensor<T>, coords: Vec<Coord>, feats: Vec<T>, channels: usize, width: usize, height: usize) -> SparseTensor<T> {
    SparseTensor { coords, feats, width, height, channels, batch: like.batch }
}

/// Sparse convolution: `out_j = bias + sum over (o, i -> j) of W_o^T f_i`.
pub fn sparse_conv2d<T: Scalar>(s: &SparseTensor<T>, p: &SparseConvParams<T>, km: &Arc<KernelMap>) -> Result<SparseTensor<T>> {
    p.validate()?;
    if s.channels != p.cin {
        return Err(Error::Contract(format!("tensor has {} channels, conv expects {}", s.channels, p.cin)));
    }
    if km.k != p.k || km.in_coords != s.coords {
        return Err(Error::Contract("kernel map was not built from this tensor's coordinates".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(s.feats.clone());
    let w = tape.constant(p.weights.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.sparse_conv(x, w, b, km.clone(), p.cin, p.cout)?;
    Ok(with_feats(s, km.out_coords.clone(), tape.value(y).to_vec(), p.cout, km.out_width, km.out_height))
}

pub fn sparse_relu<T: Scalar>(s: &SparseTensor<T>) -> SparseTensor<T> {
    let feats = s.feats.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    SparseTensor { feats, ..s.clone() }
}

/// 2x2 / stride-2 channel-wise max pooling.
pub fn sparse_max_pool<T: Scalar>(s: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    let map = build_pool_map(&s.coords, s.width, s.height)?;
    let mut tape = Tape::new();
    let x = tape.constant(s.feats.clone());
    let y = tape.max_pool(x, &map, s.channels)?;
    Ok(with_feats(s, map.out_coords.clone(), tape.value(y).to_vec(), s.channels, map.out_width, map.out_height))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// What a batch-norm call did with its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOutcome {
    Normalized,
    /// Training mode on an empty tensor: identity, statistics untouched.
    SkippedEmpty,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over valid rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> SparseBatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        SparseBatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    pub fn forward(&mut self, s: &SparseTensor<T>, mode: NormMode) -> Result<(SparseTensor<T>, NormOutcome)> {
        let c = self.gamma.len();
        if s.channels != c {
            return Err(Error::Shape(format!("batch norm has {c} channels, tensor {}", s.channels)));
        }
        if s.is_empty() {
            return Ok((s.clone(), NormOutcome::SkippedEmpty));
        }
        let mut tape = Tape::new();
        let x = tape.constant(s.feats.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let stats = match mode {
            NormMode::Train => None,
            NormMode::Eval => Some((self.running_mean.as_slice(), self.running_var.as_slice())),
        };
        let (y, mean, var) = tape.batch_norm(x, g, b, stats, self.eps)?;
        if mode == NormMode::Train {
            update_running_stats(&mut self.running_mean, &mut self.running_var, &mean, &var, s.len(), self.momentum);
        }
        Ok((SparseTensor { feats: tape.value(y).to_vec(), ..s.clone() }, NormOutcome::Normalized))
    }
}

/// Exponential moving average of batch statistics; the variance uses the
/// unbiased estimate and is left alone for single-row batches.
pub fn update_running_stats<T: Scalar>(rm: &mut [T], rv: &mut [T], mean: &[T], var: &[T], n: usize, momentum: T) {
    let keep = T::one() - momentum;
    for (r, &m) in rm.iter_mut().zip(mean) {
        *r = keep * *r + momentum * m;
    }
    if n > 1 {
        let unbias = T::of(n as f64 / (n as f64 - 1.0));
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = keep * *r + momentum * v * unbias;
        }
    }
}
