//! Reverse-mode tape over flat feature arrays.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` walks it once in reverse. Sparse
//! tensors live on the tape as their `N x C` feature matrix; coordinates
//! are carried by the kernel/pool maps attached to the ops.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::params::{ParamId, ParamStore};
use crate::kernels::{col2im_acc, im2col, sigmoid, ConvGeom};
use crate::scalar::{gemm_acc, Scalar};
use crate::sparse_conv::{KernelMap, PoolMap};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Var, g: ConvGeom, cols: Vec<T> },
    SparseConv { x: Var, w: Var, b: Var, map: Arc<KernelMap>, cin: usize, cout: usize },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Dot(Var, Vec<T>),
    ChannelAffine { x: Var, scale: Var, shift: Var, c: usize },
    Concat { a: Var, b: Var, ca: usize, cb: usize },
    Upsample2x { x: Var, w: usize, h: usize, c: usize },
    MaxPool { x: Var, src: Vec<u32>, c: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, c: usize, batch_stats: bool },
    Densify { x: Var, pixel: Vec<usize>, c: usize },
    InvDepth { x: Var, sig: Vec<T>, span: T },
    Silog { pred: Var, idx: Vec<usize>, diff: Vec<T>, lambda: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-forward record of values and the ops that produced them.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters read by this forward, in id order.
    pub fn params_read(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that collects a gradient.
    pub fn leaf(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter; repeated reads on one tape share the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = store.entry(id);
        let v = self.push(e.value.clone(), Op::Param, e.is_trainable());
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, g: ConvGeom) -> Result<Var> {
        if self.value(x).len() != g.in_w * g.in_h * g.cin {
            return shape_err(format!("conv2d input has {} values, geometry expects {}", self.value(x).len(), g.in_w * g.in_h * g.cin));
        }
        if self.value(w).len() != g.weight_len() || self.value(b).len() != g.cout {
            return shape_err(format!("conv2d weights/bias do not match {}x{}x{}x{}", g.k, g.k, g.cin, g.cout));
        }
        let cols = im2col(&g, self.value(x));
        let p = g.out_pixels();
        let bias = self.value(b);
        let mut out = Vec::with_capacity(p * g.cout);
        for _ in 0..p {
            out.extend_from_slice(bias);
        }
        gemm_acc(p, g.patch_len(), g.cout, &cols, false, self.value(w), false, &mut out);
        let rg = self.rg(&[x, w, b]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, g, cols }, rg))
    }

    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Var, map: Arc<KernelMap>, cin: usize, cout: usize) -> Result<Var> {
        if self.value(x).len() != map.in_len * cin {
            return Err(Error::Contract(format!(
                "kernel map built for {} inputs, tensor has {} rows of {} channels",
                map.in_len,
                self.value(x).len() / cin.max(1),
                cin
            )));
        }
        let kk = map.k * map.k;
        if self.value(w).len() != kk * cin * cout || self.value(b).len() != cout {
            return shape_err(format!("sparse conv weights do not match {}x{}x{}x{}", map.k, map.k, cin, cout));
        }
        let n_out = map.out_coords.len();
        let mut out = Vec::with_capacity(n_out * cout);
        for _ in 0..n_out {
            out.extend_from_slice(self.value(b));
        }
        let xs = self.value(x);
        let ws = self.value(w);
        let mut gathered = Vec::new();
        let mut prod = Vec::new();
        for (o, pairs) in map.offsets.iter().enumerate() {
            let n = pairs.inputs.len();
            if n == 0 {
                continue;
            }
            gathered.clear();
            for &i in &pairs.inputs {
                gathered.extend_from_slice(&xs[i as usize * cin..(i as usize + 1) * cin]);
            }
            prod.clear();
            prod.resize(n * cout, T::zero());
            gemm_acc(n, cin, cout, &gathered, false, &ws[o * cin * cout..(o + 1) * cin * cout], false, &mut prod);
            for (r, &j) in pairs.outputs.iter().enumerate() {
                let dst = &mut out[j as usize * cout..(j as usize + 1) * cout];
                for (d, &s) in dst.iter_mut().zip(&prod[r * cout..(r + 1) * cout]) {
                    *d += s;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::SparseConv { x, w, b, map, cin, cout }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return shape_err(format!("add of {} and {} values", self.value(a).len(), self.value(b).len()));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * k).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], Op::Sum(x), rg)
    }

    /// `sum_i w[i] * x[i]` against constant weights.
    pub fn dot(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return shape_err(format!("dot: {} weights for {} values", w.len(), self.value(x).len()));
        }
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s], Op::Dot(x, w), rg))
    }

    /// Per-channel `scale[c] * x + shift[c]` on an `N x C` layout.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.value(scale).len();
        if c == 0 || self.value(shift).len() != c || !self.value(x).len().is_multiple_of(c) {
            return shape_err(format!(
                "channel affine: {} values with scale {} / shift {}",
                self.value(x).len(),
                c,
                self.value(shift).len()
            ));
        }
        let (s, t) = (self.value(scale), self.value(shift));
        let out = self.value(x).chunks(c).flat_map(|row| row.iter().zip(s).zip(t).map(|((&v, &s), &t)| s * v + t)).collect();
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift, c }, rg))
    }

    /// Channel concatenation of two maps with the same pixel count.
    pub fn concat(&mut self, a: Var, ca: usize, b: Var, cb: usize) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if ca == 0 || cb == 0 || la % ca != 0 || lb % cb != 0 || la / ca != lb / cb {
            return shape_err(format!("concat of {la}/{ca} and {lb}/{cb}"));
        }
        let mut out = Vec::with_capacity(la + lb);
        for (ra, rb) in self.value(a).chunks(ca).zip(self.value(b).chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b, ca, cb }, rg))
    }

    /// Nearest-neighbour 2x upsampling of a `h x w x c` map.
    pub fn upsample2x(&mut self, x: Var, w: usize, h: usize, c: usize) -> Result<Var> {
        if self.value(x).len() != w * h * c {
            return shape_err(format!("upsample input has {} values, expected {}", self.value(x).len(), w * h * c));
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); 4 * w * h * c];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((oy / 2) * w + ox / 2) * c;
                let dst = (oy * 2 * w + ox) * c;
                out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x { x, w, h, c }, rg))
    }

    /// Channel-wise max over the input rows pooled into each output cell.
    pub fn max_pool(&mut self, x: Var, map: &PoolMap, c: usize) -> Result<Var> {
        if self.value(x).len() != map.cell_of.len() * c {
            return shape_err(format!("max pool: {} values for {} rows of {c}", self.value(x).len(), map.cell_of.len()));
        }
        let n_out = map.out_coords.len();
        let xs = self.value(x);
        let mut out = vec![T::neg_infinity(); n_out * c];
        let mut src = vec![u32::MAX; n_out * c];
        for (i, &j) in map.cell_of.iter().enumerate() {
            for ch in 0..c {
                let v = xs[i * c + ch];
                let slot = j as usize * c + ch;
                if src[slot] == u32::MAX || v > out[slot] {
                    out[slot] = v;
                    src[slot] = i as u32;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, src, c }, rg))
    }

    /// Batch normalization over the rows of an `N x C` matrix.
    ///
    /// With `stats = None` the batch statistics are used (training mode) and
    /// returned as `(mean, population variance)`; with `Some((mean, var))`
    /// the given statistics are treated as constants (evaluation mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = self.value(gamma).len();
        let len = self.value(x).len();
        if c == 0 || self.value(beta).len() != c || !len.is_multiple_of(c) {
            return shape_err(format!("batch norm: {len} values with {c} channels"));
        }
        let n = len / c;
        let xs = self.value(x);
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("batch norm running stats have wrong length".into());
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if n == 0 {
                    return Err(Error::Contract("batch statistics over zero rows".into()));
                }
                let nn = T::of(n as f64);
                let mut mean = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nn);
                let mut var = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nn);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xs
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(|(ch, &v)| (v - mean[ch]) * inv_std[ch]).collect::<Vec<_>>())
            .collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let out = xhat.chunks(c.max(1)).flat_map(|row| row.iter().zip(g).zip(bt).map(|((&h, &g), &b)| g * h + b)).collect();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, c, batch_stats }, rg);
        Ok((v, mean, var))
    }

    /// Scatters `N x c` rows into a zero raster with `pixels` cells.
    pub fn densify(&mut self, x: Var, pixel: Vec<usize>, c: usize, pixels: usize) -> Result<Var> {
        if self.value(x).len() != pixel.len() * c {
            return shape_err(format!("densify: {} values for {} rows of {c}", self.value(x).len(), pixel.len()));
        }
        if let Some(&p) = pixel.iter().find(|&&p| p >= pixels) {
            return Err(Error::Invariant(format!("densify target pixel {p} outside raster of {pixels}")));
        }
        let mut out = vec![T::zero(); pixels * c];
        let xs = self.value(x);
        for (r, &p) in pixel.iter().enumerate() {
            out[p * c..(p + 1) * c].copy_from_slice(&xs[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Densify { x, pixel, c }, rg))
    }

    /// Bounded inverse-depth head: `d = 1 / (sigmoid(x) * (1/dmin - 1/dmax) + 1/dmax)`.
    pub fn inv_depth(&mut self, x: Var, dmin: T, dmax: T) -> Var {
        let span = T::one() / dmin - T::one() / dmax;
        let inv_max = T::one() / dmax;
        let sig: Vec<T> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let out = sig.iter().map(|&s| T::one() / (s * span + inv_max)).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::InvDepth { x, sig, span }, rg)
    }

    /// Scale-invariant log loss against the valid (`> 0`) pixels of `gt`.
    pub fn silog(&mut self, pred: Var, gt: &[T], lambda: T) -> Result<Var> {
        let ps = self.value(pred);
        if ps.len() != gt.len() {
            return shape_err(format!("silog: prediction {} vs ground truth {}", ps.len(), gt.len()));
        }
        let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > T::zero()).collect();
        if idx.is_empty() {
            return Err(Error::EmptyGroundTruth);
        }
        if idx.iter().any(|&i| ps[i] <= T::zero()) {
            return Err(Error::Contract("silog needs strictly positive predictions".into()));
        }
        let diff: Vec<T> = idx.iter().map(|&i| gt[i].ln() - ps[i].ln()).collect();
        let loss = crate::losses::silog_from_diffs(&diff, lambda);
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![loss], Op::Silog { pred, idx, diff, lambda }, rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, has {} values", self.value(root).len())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, g, cols } => {
                let p = g.out_pixels();
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_acc(g.patch_len(), p, g.cout, cols, true, gy, false, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gy.chunks(g.cout) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); p * g.patch_len()];
                    gemm_acc(p, g.cout, g.patch_len(), gy, false, self.value(*w), true, &mut dcols);
                    let gx = self.slot(grads, *x).expect("requires grad");
                    col2im_acc(g, &dcols, gx);
                }
            }
            Op::SparseConv { x, w, b, map, cin, cout } => {
                let (cin, cout) = (*cin, *cout);
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gy.chunks(cout) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let xs = self.value(*x);
                let ws = self.value(*w);
                let mut gw_acc = if need_w { vec![T::zero(); ws.len()] } else { Vec::new() };
                let mut gx_acc = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                let mut g_out = Vec::new();
                let mut g_in = Vec::new();
                for (o, pairs) in map.offsets.iter().enumerate() {
                    let n = pairs.inputs.len();
                    if n == 0 {
                        continue;
                    }
                    g_out.clear();
                    for &j in &pairs.outputs {
                        g_out.extend_from_slice(&gy[j as usize * cout..(j as usize + 1) * cout]);
                    }
                    if need_w {
                        g_in.clear();
                        for &i in &pairs.inputs {
                            g_in.extend_from_slice(&xs[i as usize * cin..(i as usize + 1) * cin]);
                        }
                        gemm_acc(cin, n, cout, &g_in, true, &g_out, false, &mut gw_acc[o * cin * cout..(o + 1) * cin * cout]);
                    }
                    if need_x {
                        let mut dg = vec![T::zero(); n * cin];
                        gemm_acc(n, cout, cin, &g_out, false, &ws[o * cin * cout..(o + 1) * cin * cout], true, &mut dg);
                        for (r, &i) in pairs.inputs.iter().enumerate() {
                            let dst = &mut gx_acc[i as usize * cin..(i as usize + 1) * cin];
                            for (d, &s) in dst.iter_mut().zip(&dg[r * cin..(r + 1) * cin]) {
                                *d += s;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    add_into(gw, &gw_acc);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, &gx_acc);
                }
            }
            Op::Relu(x) => {
                let xs = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &g), &v) in gx.iter_mut().zip(gy).zip(xs) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, gy);
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &g) in gx.iter_mut().zip(gy) {
                        *d += g * *k;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Dot(x, w) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(w).for_each(|(d, &w)| *d += gy[0] * w);
                }
            }
            Op::ChannelAffine { x, scale, shift, c } => {
                let c = *c;
                let xs = &self.nodes[x.0].value;
                if let Some(gs) = self.slot(grads, *scale) {
                    for (gr, xr) in gy.chunks(c).zip(xs.chunks(c)) {
                        for ((s, &g), &v) in gs.iter_mut().zip(gr).zip(xr) {
                            *s += g * v;
                        }
                    }
                }
                if let Some(gt) = self.slot(grads, *shift) {
                    for gr in gy.chunks(c) {
                        add_into(gt, gr);
                    }
                }
                let sv = &self.nodes[scale.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (dr, gr) in gx.chunks_mut(c).zip(gy.chunks(c)) {
                        for ((d, &g), &s) in dr.iter_mut().zip(gr).zip(sv) {
                            *d += g * s;
                        }
                    }
                }
            }
            Op::Concat { a, b, ca, cb } => {
                let (ca, cb) = (*ca, *cb);
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, g) in ga.chunks_mut(ca).zip(gy.chunks(ca + cb)) {
                        add_into(d, &g[..ca]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, g) in gb.chunks_mut(cb).zip(gy.chunks(ca + cb)) {
                        add_into(d, &g[ca..]);
                    }
                }
            }
            Op::Upsample2x { x, w, h, c } => {
                let (w, h, c) = (*w, *h, *c);
                if let Some(gx) = self.slot(grads, *x) {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            let dst = ((oy / 2) * w + ox / 2) * c;
                            let src = (oy * 2 * w + ox) * c;
                            add_into(&mut gx[dst..dst + c], &gy[src..src + c]);
                        }
                    }
                }
            }
            Op::MaxPool { x, src, c } => {
                let c = *c;
                if let Some(gx) = self.slot(grads, *x) {
                    for (slot, &i) in src.iter().enumerate() {
                        gx[i as usize * c + slot % c] += gy[slot];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, c, batch_stats } => {
                let c = *c;
                let n = xhat.len() / c;
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for ((s, &g), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *s += g * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in gy.chunks(c) {
                        add_into(gb, gr);
                    }
                }
                let gam = &self.nodes[gamma.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    if *batch_stats {
                        let nn = T::of(n as f64);
                        let mut sum_g = vec![T::zero(); c];
                        let mut sum_gh = vec![T::zero(); c];
                        for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                sum_g[ch] += gr[ch];
                                sum_gh[ch] += gr[ch] * hr[ch];
                            }
                        }
                        for ((dr, gr), hr) in gx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch] / nn;
                                dr[ch] += k * (nn * gr[ch] - sum_g[ch] - hr[ch] * sum_gh[ch]);
                            }
                        }
                    } else {
                        for (dr, gr) in gx.chunks_mut(c).zip(gy.chunks(c)) {
                            for ch in 0..c {
                                dr[ch] += gr[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                }
            }
            Op::Densify { x, pixel, c } => {
                let c = *c;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &p) in pixel.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &gy[p * c..(p + 1) * c]);
                    }
                }
            }
            Op::InvDepth { x, sig, span } => {
                let ys = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (((d, &g), &y), &s) in gx.iter_mut().zip(gy).zip(ys).zip(sig) {
                        *d += -g * y * y * *span * s * (T::one() - s);
                    }
                }
            }
            Op::Silog { pred, idx, diff, lambda } => {
                let n = T::of(idx.len() as f64);
                let total: T = diff.iter().copied().sum();
                let ps = &self.nodes[pred.0].value;
                if let Some(gp) = self.slot(grads, *pred) {
                    let two = T::of(2.0);
                    for (&i, &dd) in idx.iter().zip(diff) {
                        // d(loss)/d(diff) = 2 dd / N - 2 lambda total / N^2, d(diff)/d(pred) = -1/pred
                        let dl = two * dd / n - two * *lambda * total / (n * n);
                        gp[i] += -gy[0] * dl / ps[i];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients that reached parameter leaves, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.params.iter().filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g))).collect()
    }
}
