//! Per-seed evaluation harness shared by the acceptance suite and `ablate`.
//!
//! One seed means one dataset and one initialization: the config's seed is
//! replaced, the dataset is regenerated, and a full two-stage run is scored
//! on the validation split.

use std::fmt::Write as _;

use log::info;

use crate::config::TrainConfig;
use crate::data::{frame_seed, generate_dataset, stream, Dataset};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::scalar::Scalar;
use crate::trainer::{evaluate, sparsity_sweep, spearman, train, Checkpoint, EvalMode, TrainOutcome};

/// Levels of the monotonicity sweep.
pub const SWEEP_LEVELS: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
/// Input density of the completion-vs-prediction comparison.
pub const COMPARE_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    /// Prediction RMSE of the final (jointly trained) model.
    pub pred_rmse: f64,
    /// Completion RMSE of the final model at `COMPARE_LEVEL`.
    pub comp_rmse: f64,
    /// Prediction RMSE of the stage-boundary (prediction-only) model.
    pub pred_only_rmse: f64,
    /// Completion RMSE at each of `SWEEP_LEVELS`.
    pub sweep_rmse: Vec<f64>,
    pub spearman: f64,
}

/// Prediction and completion RMSE of a checkpoint on the validation split.
pub fn score<T: Scalar>(ck: &Checkpoint, ds: &Dataset, exec: ExecMode) -> Result<(f64, f64)> {
    let cfg = &ck.config;
    let (net, store) = ck.model::<T>()?;
    let seed = frame_seed(cfg.seed, stream::EVAL_SPARSE, 0);
    let pred = evaluate(&net, &store, &ds.val, EvalMode::Prediction, 0.0, seed, cfg.eval_cap, exec)?;
    let comp = evaluate(&net, &store, &ds.val, EvalMode::Completion, COMPARE_LEVEL, seed, cfg.eval_cap, exec)?;
    Ok((pred.rmse, comp.rmse))
}

/// A scored run together with what produced it.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub report: SeedReport,
    pub outcome: TrainOutcome,
    pub dataset: Dataset,
}

/// Trains `base` under `seed` and scores it.
pub fn run_seed<T: Scalar>(base: &TrainConfig, seed: u64, exec: ExecMode) -> Result<SeedRun> {
    let mut cfg = base.clone();
    cfg.set("seed", &seed.to_string())?;
    cfg.validate()?;
    let ds = generate_dataset(&cfg.data, exec);
    let out = train::<T>(&cfg, &ds, exec)?;
    let (pred_rmse, comp_rmse) = score::<T>(&out.checkpoint, &ds, exec)?;
    let (pred_only_rmse, _) = score::<T>(&out.boundary, &ds, exec)?;
    let (net, store) = out.checkpoint.model::<T>()?;
    let eval_seed = frame_seed(cfg.seed, stream::EVAL_SPARSE, 0);
    let sweep = sparsity_sweep(&net, &store, &ds.val, &SWEEP_LEVELS, eval_seed, cfg.eval_cap, exec)?;
    let sweep_rmse: Vec<f64> = sweep.iter().map(|(_, r)| r.rmse).collect();
    let rho = spearman(&SWEEP_LEVELS, &sweep_rmse);
    info!("seed {seed}: pred {pred_rmse:.4} comp {comp_rmse:.4} pred-only {pred_only_rmse:.4} spearman {rho:.3}");
    let report = SeedReport { seed, pred_rmse, comp_rmse, pred_only_rmse, sweep_rmse, spearman: rho };
    Ok(SeedRun { report, outcome: out, dataset: ds })
}

/// One row of the ablation grid: a name and the overrides applied to the base config.
pub struct Variant {
    pub name: &'static str,
    pub overrides: &'static [(&'static str, &'static str)],
}

pub const ABLATIONS: &[Variant] = &[
    Variant { name: "joint", overrides: &[] },
    Variant { name: "prediction", overrides: &[("stage2_epochs", "0")] },
    Variant { name: "completion", overrides: &[("joint", "false")] },
    Variant { name: "unfreeze_encoder", overrides: &[("freeze_pred_encoder", "false")] },
    Variant { name: "freeze_decoder", overrides: &[("freeze_pred_decoder", "true")] },
    Variant { name: "without_wb", overrides: &[("use_wb", "false")] },
    Variant { name: "srb_1_branch", overrides: &[("srb_branches", "1")] },
    Variant { name: "srb_2_branches", overrides: &[("srb_branches", "2")] },
];

pub const ABLATION_HEADER: &str = "variant,seed,pred_rmse,comp_rmse";

/// Trains every variant under every seed. The prediction row scores
/// completion too; it then runs through an untrained SAN.
pub fn ablate<T: Scalar>(base: &TrainConfig, variants: &[Variant], seeds: &[u64], exec: ExecMode) -> Result<String> {
    let mut out = format!("{ABLATION_HEADER}\n");
    for v in variants {
        let mut cfg = base.clone();
        for (k, val) in v.overrides {
            cfg.set(k, val)?;
        }
        cfg.validate()?;
        for &seed in seeds {
            let mut c = cfg.clone();
            c.set("seed", &seed.to_string())?;
            let ds = generate_dataset(&c.data, exec);
            let ck = train::<T>(&c, &ds, exec)?.checkpoint;
            let (p, q) = score::<T>(&ck, &ds, exec)?;
            info!("{} seed {seed}: pred {p:.4} comp {q:.4}", v.name);
            writeln!(out, "{},{seed},{p},{q}", v.name).expect("write to String");
        }
    }
    Ok(out)
}
