//! Two-stage training, evaluation, sparsity sweeps and checkpoints.
//!
//! Stage 1 trains the RGB network on prediction alone. Stage 2 trains the
//! SAN (and whatever RGB groups the freeze policy leaves open) on the joint
//! or completion-only objective, with sparse inputs drawn per sample.
//!
//! All randomness is derived from `(seed, stream, epoch, index)`, so an
//! epoch depends only on the parameters at its start. Per-sample gradients
//! are reduced in sample order, which makes sequential and parallel runs
//! bit-identical.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{frame_seed, sample_sparse, stream, Dataset, Frame, SparsitySpec};
use crate::depthnet::DepthNet;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::grad::{adamw_step, decay_lr, ParamId, ParamKind, ParamStore, Tape};
use crate::losses::{eval_metrics, MetricReport};
use crate::scalar::Scalar;
use crate::sparse_conv::NormMode;
use crate::srb_san::{apply_bn_updates, BnUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Prediction,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn of<T: Scalar>() -> Self {
        if T::NAME == "f64" {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation in prediction mode.
    pub val: MetricReport,
    /// Validation in completion mode at the configured validation sparsity.
    pub val_completion: MetricReport,
}

impl EpochLog {
    pub fn csv_header() -> String {
        let comp: Vec<String> = MetricReport::CSV_HEADER.split(',').map(|c| format!("comp_{c}")).collect();
        format!("epoch,stage,lr,train_loss,{},{}", MetricReport::CSV_HEADER, comp.join(","))
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.stage, self.lr, self.train_loss, self.val.csv_row(), self.val_completion.csv_row())
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = EpochLog::csv_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Losses of one training sample; `pred` and `comp` are the two terms of
/// the joint objective when present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub pred: Option<f64>,
    pub comp: Option<f64>,
}

struct SampleOut<T> {
    loss: SampleLoss,
    grads: Vec<(ParamId, Vec<T>)>,
    bn: Vec<BnUpdate<T>>,
}

/// Parameters, optimizer state and position in the schedule.
///
/// Values are held in f64 and written at the training precision, so an
/// f32 run round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Master seed every per-epoch stream is derived from.
    pub rng_seed: u64,
    pub precision: Precision,
    pub store: ParamStore<f64>,
}

const CKPT_MAGIC: &[u8; 4] = b"SANC";
const CKPT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn values(&mut self, n: usize, p: Precision) -> Result<Vec<f64>> {
        Ok(match p {
            Precision::F32 => self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            Precision::F64 => self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, xs: &[f64], p: Precision) {
    for &x in xs {
        match p {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(match self.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        });
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for e in self.store.entries() {
            put_str(&mut out, &e.name);
            out.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.push(e.frozen as u8);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.t.to_le_bytes());
            put_values(&mut out, &e.value, self.precision);
            put_values(&mut out, &e.m, self.precision);
            put_values(&mut out, &e.v, self.precision);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let precision = match r.u8()? {
            4 => Precision::F32,
            8 => Precision::F64,
            b => return Err(Error::Checkpoint(format!("unknown precision tag {b}"))),
        };
        let epoch = r.u64()? as usize;
        let rng_seed = r.u64()?;
        let config = TrainConfig::from_text(&r.string()?)?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                b => return Err(Error::Checkpoint(format!("{name}: unknown kind {b}"))),
            };
            let frozen = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let t = r.u64()?;
            let value = r.values(len, precision)?;
            let id = store.add(&name, &shape, value, kind).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let e = store.entry_mut(id);
            e.frozen = frozen;
            e.t = t;
            e.m = r.values(len, precision)?;
            e.v = r.values(len, precision)?;
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config, epoch, rng_seed, precision, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Network handles and parameters at precision `T`.
    pub fn model<T: Scalar>(&self) -> Result<(DepthNet, ParamStore<T>)> {
        let store = self.store.cast::<T>();
        let net = DepthNet::bind(&self.config.model, &store)?;
        Ok((net, store))
    }
}

/// Owns the parameters for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub net: DepthNet,
    pub store: ParamStore<T>,
    /// Epochs completed.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, stream::INIT, 0));
        let net = DepthNet::init(&cfg.model, &mut store, &mut rng)?;
        let mut t = Trainer { cfg: cfg.clone(), net, store, epoch: 0 };
        t.apply_freeze(1);
        Ok(t)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.precision != Precision::of::<T>() {
            return Err(Error::Checkpoint(format!("checkpoint precision {:?} differs from {}", ck.precision, T::NAME)));
        }
        ck.config.validate()?;
        let (net, store) = ck.model::<T>()?;
        Ok(Trainer { cfg: ck.config.clone(), net, store, epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), epoch: self.epoch, rng_seed: self.cfg.seed, precision: Precision::of::<T>(), store: self.store.cast() }
    }

    pub fn stage_of(&self, epoch: usize) -> u8 {
        if epoch < self.cfg.stage1_epochs {
            1
        } else {
            2
        }
    }

    pub fn lr_for(&self, epoch: usize) -> f64 {
        let e = if self.cfg.reset_lr_decay && epoch >= self.cfg.stage1_epochs { epoch - self.cfg.stage1_epochs } else { epoch };
        decay_lr(&self.cfg.optim, e)
    }

    /// Sets freeze flags for a stage. Unused skip modulation parameters stay frozen.
    pub fn apply_freeze(&mut self, stage: u8) {
        let c = &self.cfg;
        let (enc, dec, san) = if stage == 1 { (false, false, true) } else { (c.freeze_pred_encoder, c.freeze_pred_decoder, false) };
        self.store.set_frozen_prefix(DepthNet::ENCODER, enc);
        self.store.set_frozen_prefix(DepthNet::DECODER, dec);
        self.store.set_frozen_prefix(DepthNet::SAN, san);
        if !c.model.use_wb {
            for i in 0..self.net.san.scales() {
                self.store.set_frozen(self.net.san.skip_w[i], true);
                self.store.set_frozen(self.net.san.skip_b[i], true);
            }
        }
    }

    /// Training input density for one sample.
    pub fn train_sparsity(&self, epoch: usize, index: usize) -> SparsitySpec {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(self.cfg.seed, stream::TRAIN_SPARSE, ((epoch as u64) << 32) | index as u64));
        let f = rng.gen_range(self.cfg.train_sparsity_min..=self.cfg.train_sparsity_max);
        SparsitySpec::fraction(f, rng.gen())
    }

    /// Forward and backward for one frame against the current parameters.
    /// `Ok(None)` when the ground truth has no valid pixel.
    fn sample_step(&self, frame: &Frame, epoch: usize, index: usize) -> Result<Option<SampleOut<T>>> {
        if frame.depth.valid_count() == 0 {
            return Ok(None);
        }
        let stage = self.stage_of(epoch);
        let image = frame.image.cast::<T>();
        let gt = frame.depth.cast::<T>();
        let lambda = T::of(self.cfg.lambda);
        let mut tape = Tape::new();
        let mut bn = Vec::new();
        let skips = self.net.encode(&mut tape, &self.store, &image)?;
        let pred = self.net.decode(&mut tape, &self.store, &skips.maps, &skips.dims)?;
        let (root, loss) = if stage == 1 {
            let lp = tape.silog(pred, gt.values(), lambda)?;
            let v = tape.value(lp)[0].as_f64();
            (lp, SampleLoss { total: v, pred: Some(v), comp: None })
        } else {
            let sparse = sample_sparse(&frame.depth, &self.train_sparsity(epoch, index))?.cast::<T>();
            let comp = self.net.forward_complete_from(&mut tape, &self.store, &skips, &sparse, NormMode::Train, &mut bn)?.unwrap_or(pred);
            let lc = tape.silog(comp, gt.values(), lambda)?;
            let c = tape.value(lc)[0].as_f64();
            if self.cfg.joint {
                let lp = tape.silog(pred, gt.values(), lambda)?;
                let p = tape.value(lp)[0].as_f64();
                let root = tape.add(lp, lc)?;
                (root, SampleLoss { total: tape.value(root)[0].as_f64(), pred: Some(p), comp: Some(c) })
            } else {
                (lc, SampleLoss { total: c, pred: None, comp: Some(c) })
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Divergence { epoch, sample: index, loss: loss.total });
        }
        let grads = if tape.requires_grad(root) {
            let g = tape.backward(root)?;
            g.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect()
        } else {
            Vec::new()
        };
        Ok(Some(SampleOut { loss, grads, bn }))
    }

    /// Losses of the given training frames at the current parameters, for
    /// the epoch's sparse draws. Does not modify anything.
    pub fn sample_losses(&self, frames: &[Frame], epoch: usize, exec: ExecMode) -> Result<Vec<Option<SampleLoss>>> {
        exec.map(frames, |i, f| self.sample_step(f, epoch, i).map(|o| o.map(|o| o.loss))).into_iter().collect()
    }

    /// Runs the next epoch and returns its log row.
    pub fn run_epoch(&mut self, ds: &Dataset, exec: ExecMode) -> Result<EpochLog> {
        if ds.train.is_empty() {
            return Err(Error::DataValidation("training split is empty".into()));
        }
        let epoch = self.epoch;
        let stage = self.stage_of(epoch);
        let lr = self.lr_for(epoch);
        self.apply_freeze(stage);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(frame_seed(self.cfg.seed, stream::SHUFFLE, epoch as u64)));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let this = &*self;
            let outs = exec.map(batch, |_, &i| this.sample_step(&ds.train[i], epoch, i));
            let outs: Vec<SampleOut<T>> = outs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            if outs.is_empty() {
                continue;
            }
            self.store.zero_grads();
            let scale = T::one() / T::of(outs.len() as f64);
            for o in &outs {
                for (id, g) in &o.grads {
                    self.store.accumulate_grad(*id, g, scale)?;
                }
                loss_sum += o.loss.total;
                seen += 1;
            }
            for o in &outs {
                apply_bn_updates(&mut self.store, &o.bn);
            }
            adamw_step(&mut self.store, &self.cfg.optim, lr)?;
        }
        self.epoch += 1;
        let eval_seed = frame_seed(self.cfg.seed, stream::EVAL_SPARSE, 0);
        let cap = self.cfg.eval_cap;
        let val = evaluate(&self.net, &self.store, &ds.val, EvalMode::Prediction, 0.0, eval_seed, cap, exec)?;
        let val_completion = evaluate(&self.net, &self.store, &ds.val, EvalMode::Completion, self.cfg.val_sparsity, eval_seed, cap, exec)?;
        let row = EpochLog { epoch, stage, lr, train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 }, val, val_completion };
        info!("epoch {epoch} stage {stage} lr {lr:.3e} loss {:.5} val rmse {:.4} comp rmse {:.4}", row.train_loss, row.val.rmse, row.val_completion.rmse);
        Ok(row)
    }

    /// Trains until `until_epoch` epochs are complete, calling `on_epoch` after each.
    pub fn run_until(&mut self, ds: &Dataset, exec: ExecMode, until_epoch: usize, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<()> {
        while self.epoch < until_epoch {
            let row = self.run_epoch(ds, exec)?;
            on_epoch(self, &row)?;
        }
        Ok(())
    }
}

/// Result of a full two-stage run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Snapshot at the stage boundary, i.e. the prediction-only model.
    pub boundary: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Runs the configured schedule from scratch.
pub fn train<T: Scalar>(cfg: &TrainConfig, ds: &Dataset, exec: ExecMode) -> Result<TrainOutcome> {
    let mut t = Trainer::<T>::new(cfg)?;
    let mut log = Vec::new();
    t.run_until(ds, exec, cfg.stage1_epochs, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    let boundary = t.checkpoint();
    t.run_until(ds, exec, cfg.total_epochs(), |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { checkpoint: t.checkpoint(), boundary, log })
}

/// Continues a checkpoint to its configured total epoch count.
pub fn resume<T: Scalar>(ck: &Checkpoint, ds: &Dataset, exec: ExecMode) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut t = Trainer::<T>::from_checkpoint(ck)?;
    let mut log = Vec::new();
    let total = t.cfg.total_epochs();
    t.run_until(ds, exec, total, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((t.checkpoint(), log))
}

/// Mean metrics over `frames`. Completion inputs are drawn with a per-frame
/// seed derived from `eval_seed`, so different levels and models see paired
/// samples. Frames without valid ground truth are skipped.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    net: &DepthNet,
    store: &ParamStore<T>,
    frames: &[Frame],
    mode: EvalMode,
    sparsity: f64,
    eval_seed: u64,
    cap: f64,
    exec: ExecMode,
) -> Result<MetricReport> {
    if frames.is_empty() {
        return Err(Error::DataValidation("evaluation split is empty".into()));
    }
    SparsitySpec::fraction(sparsity, 0).validate()?;
    let reports = exec.map(frames, |i, f| -> Result<Option<MetricReport>> {
        let image = f.image.cast::<T>();
        let out = match mode {
            EvalMode::Prediction => net.predict(store, &image)?,
            EvalMode::Completion => {
                let spec = SparsitySpec::fraction(sparsity, frame_seed(eval_seed, stream::EVAL_SPARSE, i as u64));
                net.complete(store, &image, &sample_sparse(&f.depth, &spec)?.cast::<T>())?
            }
        };
        match eval_metrics(&f.depth.cast::<T>(), &out, cap) {
            Ok(r) => Ok(Some(r)),
            Err(Error::EmptyGroundTruth) => {
                debug!("frame {i}: no valid ground truth under the cap, skipped");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let reports: Vec<MetricReport> = reports.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if reports.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    MetricReport::mean(&reports)
}

/// Completion metrics at each level with one shared evaluation seed.
/// Level 0 is the prediction baseline.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_sweep<T: Scalar>(
    net: &DepthNet,
    store: &ParamStore<T>,
    frames: &[Frame],
    levels: &[f64],
    eval_seed: u64,
    cap: f64,
    exec: ExecMode,
) -> Result<Vec<(f64, MetricReport)>> {
    for &l in levels {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Config(format!("sparsity level {l} outside [0, 1]")));
        }
    }
    levels.iter().map(|&l| Ok((l, evaluate(net, store, frames, EvalMode::Completion, l, eval_seed, cap, exec)?))).collect()
}

pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut s = format!("level,{}\n", MetricReport::CSV_HEADER);
    for (l, r) in rows {
        writeln!(s, "{l},{}", r.csv_row()).expect("write to String");
    }
    s
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Sum of absolute value changes over entries whose names start with `prefix`.
pub fn param_delta(a: &ParamStore<f64>, b: &ParamStore<f64>, prefix: &str) -> Result<f64> {
    let mut total = 0.0;
    for e in a.entries().iter().filter(|e| e.name.starts_with(prefix)) {
        let other = b.entry(b.id(&e.name)?);
        total += e.value.iter().zip(&other.value).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total)
}
