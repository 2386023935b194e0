//! Command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure. Every
//! failure also prints one tab-separated line `sandepth-error <kind> <message>`
//! on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::TrainConfig;
use crate::data::dmap::{read_dmap, write_dmap};
use crate::data::{frame_seed, generate_dataset, read_dataset, stream, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::gradcheck;
use crate::losses::MetricReport;
use crate::scalar::Scalar;
use crate::sparse_tensor::{DepthMap, ImageTensor};
use crate::study;
use crate::trainer::{evaluate, log_csv, sparsity_sweep, sweep_csv, Checkpoint, EvalMode, Precision, Trainer};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sandepth", version, about = "Joint depth prediction and completion on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the reduced 32x32 benchmark instead of the defaults.
    #[arg(long, global = true)]
    pub compact: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; overrides both the data and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Prediction,
    Completion,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/val splits as DMAP files.
    GenData,
    /// Run the two-stage schedule; writes checkpoints and metrics.csv.
    Train {
        /// Dataset directory from gen-data; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue this checkpoint to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "prediction")]
        mode: ModeArg,
        /// Fraction of valid pixels given as input in completion mode.
        #[arg(long, default_value_t = 0.2)]
        sparsity: f64,
    },
    /// Dense depth from one RGB raster.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
    },
    /// Dense depth from one RGB raster plus a sparse depth raster.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
    },
    /// Completion metrics over a list of input densities.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.2,0.5,1")]
        levels: Vec<f64>,
    },
    /// Finite-difference check of every differentiable op and the full network.
    Gradcheck,
    /// Train the ablation grid and tabulate prediction and completion RMSE.
    Ablate {
        /// Number of seeds, starting at the master seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma list of variant names; all when absent.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("sandepth-error\tconfig\t{}", first_line(&e.to_string()));
            }
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = if e.is_config() { ("config", EXIT_CONFIG) } else { ("runtime", EXIT_RUNTIME) };
            eprintln!("sandepth-error\t{kind}\t{}", first_line(&e.to_string()));
            code
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().replace('\t', " ")
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = if c.compact { TrainConfig::compact() } else { TrainConfig::default() };
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_of(c: &Common) -> ExecMode {
    if c.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn precision_or(c: &Common, fallback: Precision) -> Precision {
    match c.precision {
        Some(PrecisionArg::F32) => Precision::F32,
        Some(PrecisionArg::F64) => Precision::F64,
        None => fallback,
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn dataset(cfg: &TrainConfig, dir: Option<&Path>, exec: ExecMode) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let ds = read_dataset(d)?;
            if ds.train.is_empty() && ds.val.is_empty() {
                return Err(Error::DataValidation(format!("no frames under {}", d.display())));
            }
            Ok(ds)
        }
        None => Ok(generate_dataset(&cfg.data, exec)),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn read_input(path: &Path) -> Result<crate::sparse_tensor::DenseMap<f32>> {
    read_dmap(path).map_err(|e| match e {
        crate::data::dmap::DmapError::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => Error::Dmap(other),
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let exec = exec_of(c);
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(c)?;
            create_out(&c.out)?;
            let ds = generate_dataset(&cfg.data, exec);
            write_dataset(&ds, &c.out)?;
            fs::write(c.out.join("config.txt"), cfg.to_text())?;
            info!("wrote {} train and {} val frames to {}", ds.train.len(), ds.val.len(), c.out.display());
            Ok(())
        }
        Command::Train { data, resume } => {
            let p = precision_or(c, Precision::F32);
            match p {
                Precision::F32 => cmd_train::<f32>(c, data.as_deref(), resume.as_deref(), exec),
                Precision::F64 => cmd_train::<f64>(c, data.as_deref(), resume.as_deref(), exec),
            }
        }
        Command::Eval { checkpoint, data, mode, sparsity } => {
            let ck = load_checkpoint(checkpoint)?;
            let mode = match mode {
                ModeArg::Prediction => EvalMode::Prediction,
                ModeArg::Completion => EvalMode::Completion,
            };
            let report = match precision_or(c, ck.precision) {
                Precision::F32 => cmd_eval::<f32>(&ck, data.as_deref(), mode, *sparsity, exec)?,
                Precision::F64 => cmd_eval::<f64>(&ck, data.as_deref(), mode, *sparsity, exec)?,
            };
            create_out(&c.out)?;
            fs::write(c.out.join("eval.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Predict { checkpoint, rgb } => {
            let ck = load_checkpoint(checkpoint)?;
            let image = read_input(rgb)?;
            let depth = match precision_or(c, ck.precision) {
                Precision::F32 => infer::<f32>(&ck, image, None)?,
                Precision::F64 => infer::<f64>(&ck, image, None)?,
            };
            create_out(&c.out)?;
            write_dmap(&depth.0, c.out.join("depth.dmap"))?;
            Ok(())
        }
        Command::Complete { checkpoint, rgb, sparse } => {
            let ck = load_checkpoint(checkpoint)?;
            let image = read_input(rgb)?;
            let sparse = read_input(sparse)?;
            let depth = match precision_or(c, ck.precision) {
                Precision::F32 => infer::<f32>(&ck, image, Some(sparse))?,
                Precision::F64 => infer::<f64>(&ck, image, Some(sparse))?,
            };
            create_out(&c.out)?;
            write_dmap(&depth.0, c.out.join("depth.dmap"))?;
            Ok(())
        }
        Command::Sweep { checkpoint, data, levels } => {
            let ck = load_checkpoint(checkpoint)?;
            let csv = match precision_or(c, ck.precision) {
                Precision::F32 => cmd_sweep::<f32>(&ck, data.as_deref(), levels, exec)?,
                Precision::F64 => cmd_sweep::<f64>(&ck, data.as_deref(), levels, exec)?,
            };
            create_out(&c.out)?;
            fs::write(c.out.join("sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck => {
            if matches!(c.precision, Some(PrecisionArg::F32)) {
                return Err(Error::Config("gradcheck runs in f64 only".into()));
            }
            let seed = c.seed.unwrap_or(0);
            let rows = gradcheck::full_suite(seed)?;
            let mut csv = String::from("op,checked,skipped,max_rel_err,pass\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{:e},{}\n", r.op, r.checked, r.skipped, r.rel_err, r.passed()));
            }
            print!("{csv}");
            create_out(&c.out)?;
            fs::write(c.out.join("gradcheck.csv"), &csv)?;
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Invariant(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Ablate { seeds, variants } => {
            let cfg = load_config(c)?;
            let chosen: Vec<&study::Variant> = if variants.is_empty() {
                study::ABLATIONS.iter().collect()
            } else {
                variants
                    .iter()
                    .map(|n| study::ABLATIONS.iter().find(|v| v.name == n).ok_or_else(|| Error::Config(format!("unknown variant {n:?}"))))
                    .collect::<Result<_>>()?
            };
            if *seeds == 0 {
                return Err(Error::Config("ablate needs at least one seed".into()));
            }
            create_out(&c.out)?;
            let seed_list: Vec<u64> = (0..*seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
            let mut table = format!("{}\n", study::ABLATION_HEADER);
            for v in chosen {
                let part = match precision_or(c, Precision::F32) {
                    Precision::F32 => study::ablate::<f32>(&cfg, std::slice::from_ref(v), &seed_list, exec)?,
                    Precision::F64 => study::ablate::<f64>(&cfg, std::slice::from_ref(v), &seed_list, exec)?,
                };
                table.extend(part.lines().skip(1).map(|l| format!("{l}\n")));
                fs::write(c.out.join("ablation.csv"), &table)?;
            }
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_train<T: Scalar>(c: &Common, data: Option<&Path>, resume: Option<&Path>, exec: ExecMode) -> Result<()> {
    let mut t = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.precision != Precision::of::<T>() {
                return Err(Error::Config(format!("checkpoint was trained at {:?}; pass the same --precision", ck.precision)));
            }
            Trainer::<T>::from_checkpoint(&ck)?
        }
        None => Trainer::<T>::new(&load_config(c)?)?,
    };
    let cfg = t.cfg.clone();
    let ds = dataset(&cfg, data, exec)?;
    create_out(&c.out)?;
    fs::write(c.out.join("config.txt"), cfg.to_text())?;
    let mut log = Vec::new();
    let out = c.out.clone();
    let stage1 = cfg.stage1_epochs;
    if t.epoch == 0 && stage1 == 0 {
        t.checkpoint().save(out.join("boundary.sanc"))?;
    }
    t.run_until(&ds, exec, cfg.total_epochs(), |tr, row| {
        log.push(row.clone());
        let ck = tr.checkpoint();
        ck.save(out.join("last.sanc"))?;
        if tr.epoch == stage1 {
            ck.save(out.join("boundary.sanc"))?;
        }
        fs::write(out.join("metrics.csv"), log_csv(&log))?;
        Ok(())
    })?;
    t.checkpoint().save(out.join("final.sanc"))?;
    fs::write(out.join("metrics.csv"), log_csv(&log))?;
    Ok(())
}

fn eval_dataset(ck: &Checkpoint, data: Option<&Path>, exec: ExecMode) -> Result<Dataset> {
    let ds = dataset(&ck.config, data, exec)?;
    if ds.val.is_empty() {
        return Err(Error::DataValidation("validation split is empty".into()));
    }
    Ok(ds)
}

fn cmd_eval<T: Scalar>(ck: &Checkpoint, data: Option<&Path>, mode: EvalMode, sparsity: f64, exec: ExecMode) -> Result<MetricReport> {
    let (net, store) = ck.model::<T>()?;
    let ds = eval_dataset(ck, data, exec)?;
    let seed = frame_seed(ck.config.seed, stream::EVAL_SPARSE, 0);
    evaluate(&net, &store, &ds.val, mode, sparsity, seed, ck.config.eval_cap, exec)
}

fn cmd_sweep<T: Scalar>(ck: &Checkpoint, data: Option<&Path>, levels: &[f64], exec: ExecMode) -> Result<String> {
    if levels.is_empty() {
        return Err(Error::Config("sweep needs at least one level".into()));
    }
    let (net, store) = ck.model::<T>()?;
    let ds = eval_dataset(ck, data, exec)?;
    let seed = frame_seed(ck.config.seed, stream::EVAL_SPARSE, 0);
    Ok(sweep_csv(&sparsity_sweep(&net, &store, &ds.val, levels, seed, ck.config.eval_cap, exec)?))
}

fn infer<T: Scalar>(ck: &Checkpoint, image: crate::sparse_tensor::DenseMap<f32>, sparse: Option<crate::sparse_tensor::DenseMap<f32>>) -> Result<DepthMap<f32>> {
    let (net, store) = ck.model::<T>()?;
    let image = ImageTensor::from_dense(image)?;
    net.check_extent(image.width(), image.height())?;
    let out = match sparse {
        None => net.predict(&store, &image.cast::<T>())?,
        Some(s) => {
            let s = DepthMap::from_dense(s)?;
            if (s.width(), s.height()) != (image.width(), image.height()) {
                return Err(Error::Shape("sparse depth and image extents differ".into()));
            }
            net.complete(&store, &image.cast::<T>(), &s.cast::<T>())?
        }
    };
    Ok(out.cast::<f32>())
}

