//! Command-line front end: `match`, `eval`, `gradcheck`, `train-toy`, `bench`.
//!
//! Settings resolve in three layers: per-command defaults, then an optional
//! `--config` JSON file, then explicit flags. The effective configuration is
//! echoed to stderr as JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport, DEFAULT_ABS_FLOOR, DEFAULT_TOL};
use crate::io::{read_disparity, read_image, read_mask, read_weights, write_disparity, write_pfm, write_ppm, write_weights};
use crate::metrics::{evaluate, BadRule};
use crate::model::{FilterKind, Model, ModelConfig};
use crate::tensor::{Tensor, WindowSpec};
use crate::train::{train_pipeline_with, StereogramSpec, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub s: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SabfSigmas {
    pub sigma_s: f64,
    pub sigma_r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    pub init: u64,
    /// Synthetic data generation.
    pub data: u64,
}

/// Settings shared by the commands, as read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub filter: FilterKind,
    pub max_disp: usize,
    pub downsample: usize,
    pub window: WindowConfig,
    pub sabf: SabfSigmas,
    pub bad_rule: BadRule,
    pub weights: Option<PathBuf>,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            filter: m.filter,
            max_disp: m.max_disp,
            downsample: m.downsample,
            window: WindowConfig {
                s: m.window.size(),
                dilation: m.window.dilation(),
            },
            sabf: SabfSigmas {
                sigma_s: m.sigma_s,
                sigma_r: m.sigma_r,
            },
            bad_rule: BadRule::Or,
            weights: None,
            seeds: Seeds { init: 7, data: 7 },
        }
    }
}

impl RunConfig {
    /// Defaults of `train-toy`: the desk-scale training setup.
    pub fn training() -> Self {
        let t = TrainConfig::standard(FilterKind::default());
        RunConfig {
            max_disp: t.model.max_disp,
            downsample: t.model.downsample,
            seeds: Seeds {
                init: t.init_seed,
                data: t.stereogram.seed,
            },
            ..RunConfig::default()
        }
    }

    /// Overlays a JSON document; keys absent from it keep their current value.
    pub fn merge_json(&self, text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?;
        if !overlay.is_object() {
            return Err(Error::config("config JSON must be an object"));
        }
        let mut base = serde_json::to_value(self).map_err(|e| Error::config(e.to_string()))?;
        merge_value(&mut base, overlay);
        serde_json::from_value(base).map_err(|e| Error::config(format!("config JSON: {e}")))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            filter: self.filter,
            max_disp: self.max_disp,
            downsample: self.downsample,
            window: WindowSpec::new(self.window.s, self.window.dilation)?,
            sigma_s: self.sabf.sigma_s,
            sigma_r: self.sabf.sigma_r,
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model with the weights file loaded, or freshly initialized for the
    /// untrained `none` filter.
    pub fn load_model(&self) -> Result<Model<f32>> {
        let mc = self.model()?;
        match &self.weights {
            Some(p) => Model::from_weights(mc, &read_weights(p)?),
            None if self.filter.is_learned() => Err(Error::config(format!(
                "filter {} needs trained weights (--weights)",
                self.filter
            ))),
            None => Model::init(mc, self.seeds.init),
        }
    }
}

fn merge_value(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_value(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Parser)]
#[command(name = "costfilter", version, about = "Stereo matching with content-adaptive cost-volume filtering")]
pub struct Cli {
    /// Worker threads for the compute kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON file with run settings; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override [`RunConfig`] fields.
#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub filter: Option<FilterKind>,
    #[arg(long)]
    pub max_disp: Option<usize>,
    /// Feature downsampling factor k.
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Filter window size s.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub dilation: Option<usize>,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    #[arg(long)]
    pub sigma_r: Option<f64>,
    /// Seed of the parameter initialization.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

impl ModelFlags {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.filter {
            c.filter = v;
        }
        if let Some(v) = self.max_disp {
            c.max_disp = v;
        }
        if let Some(v) = self.downsample {
            c.downsample = v;
        }
        if let Some(v) = self.window {
            c.window.s = v;
        }
        if let Some(v) = self.dilation {
            c.window.dilation = v;
        }
        if let Some(v) = self.sigma_s {
            c.sabf.sigma_s = v;
        }
        if let Some(v) = self.sigma_r {
            c.sabf.sigma_r = v;
        }
        if let Some(v) = self.init_seed {
            c.seeds.init = v;
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimates a disparity map for a rectified image pair.
    Match {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output disparity: KITTI PNG if it ends in .png, PFM otherwise.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Scores a predicted disparity map against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Image whose nonzero pixels are evaluated.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        bad_rule: Option<BadRule>,
        /// Ground-truth values at or above this are ignored.
        #[arg(long)]
        max_disp: Option<f32>,
    },
    /// Certifies analytic gradients against finite differences.
    Gradcheck {
        /// Op name, `all`, or the `corrupted` sentinel.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_ABS_FLOOR)]
        abs_floor: f64,
    },
    /// Trains the pipeline end to end on a random-dot stereogram.
    TrainToy {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Seed of the stereogram.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Disparity of the square.
        #[arg(long, default_value_t = 6)]
        disparity: usize,
        #[arg(long)]
        out_weights: Option<PathBuf>,
        /// CSV loss curve with header `step,loss`.
        #[arg(long)]
        out_curve: Option<PathBuf>,
        /// Directory for left.ppm, right.ppm, gt.pfm and config.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Times every pipeline stage on random inputs.
    Bench {
        #[arg(long)]
        filter: Option<FilterKind>,
        /// Image size as HxW.
        #[arg(long, default_value = "96x320")]
        size: String,
        /// Disparity range at input resolution.
        #[arg(long, default_value_t = 48)]
        disp: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Training { .. } => EXIT_CHECK,
        Error::Domain(_) | Error::Index(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    if cli.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn resolve(cli: &Cli, base: RunConfig) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => base.merge_json(&fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => Ok(base),
    }
}

fn echo(cfg: &RunConfig) {
    if let Ok(s) = serde_json::to_string(cfg) {
        eprintln!("effective config: {s}");
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Match {
            left,
            right,
            out,
            weights,
            model,
        } => {
            let mut cfg = resolve(cli, RunConfig::default())?;
            model.apply(&mut cfg);
            if weights.is_some() {
                cfg.weights = weights.clone();
            }
            echo(&cfg);
            cmd_match(&cfg, left, right, out)
        }
        Command::Eval {
            pred,
            gt,
            mask,
            bad_rule,
            max_disp,
        } => {
            let mut cfg = resolve(cli, RunConfig::default())?;
            if let Some(r) = bad_rule {
                cfg.bad_rule = *r;
            }
            echo(&cfg);
            cmd_eval(&cfg, pred, gt, mask.as_deref(), max_disp.unwrap_or(f32::INFINITY))
        }
        Command::Gradcheck {
            op,
            seeds,
            tol,
            abs_floor,
        } => cmd_gradcheck(op, *seeds, *tol, *abs_floor),
        Command::TrainToy {
            model,
            steps,
            seed,
            lr,
            momentum,
            height,
            width,
            disparity,
            out_weights,
            out_curve,
            out_dir,
        } => {
            let mut cfg = resolve(cli, RunConfig::training())?;
            model.apply(&mut cfg);
            if let Some(s) = seed {
                cfg.seeds.data = *s;
            }
            echo(&cfg);
            let train = TrainConfig {
                model: cfg.model()?,
                steps: *steps,
                lr: *lr,
                momentum: *momentum,
                init_seed: cfg.seeds.init,
                stereogram: StereogramSpec {
                    seed: cfg.seeds.data,
                    height: *height,
                    width: *width,
                    disparity: *disparity,
                    ..StereogramSpec::default()
                },
            };
            cmd_train_toy(&cfg, &train, out_weights.as_deref(), out_curve.as_deref(), out_dir.as_deref())
        }
        Command::Bench {
            filter,
            size,
            disp,
            iters,
        } => {
            let mut cfg = resolve(cli, RunConfig::default())?;
            if let Some(f) = filter {
                cfg.filter = *f;
            }
            cfg.max_disp = *disp;
            echo(&cfg);
            cmd_bench(&cfg, size, *iters)
        }
    }
}

fn cmd_match(cfg: &RunConfig, left: &Path, right: &Path, out: &Path) -> Result<i32> {
    let l = read_image(left)?;
    let r = read_image(right)?;
    if l.shape() != r.shape() {
        return Err(Error::config(format!(
            "left image is {:?}, right image is {:?}",
            &l.shape()[1..],
            &r.shape()[1..]
        )));
    }
    let model = cfg.load_model()?;
    let disp = model.predict(&l, &r)?;
    write_disparity(&disp, out)?;
    eprintln!("wrote {}x{} disparity to {}", disp.width(), disp.height(), out.display());
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path, mask: Option<&Path>, max_disp: f32) -> Result<i32> {
    let p = read_disparity(pred, f32::INFINITY)?;
    let g = read_disparity(gt, max_disp)?;
    if !p.same_dims(&g) {
        return Err(Error::config(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            p.width(),
            p.height(),
            g.width(),
            g.height()
        )));
    }
    let m = match mask {
        Some(path) => {
            let (w, h, m) = read_mask(path)?;
            if (w, h) != (g.width(), g.height()) {
                return Err(Error::config(format!("mask is {w}x{h}, ground truth is {}x{}", g.width(), g.height())));
            }
            Some(m)
        }
        None => None,
    };
    let report = evaluate(&p, &g, m.as_deref(), cfg.bad_rule)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::config(e.to_string()))?);
    Ok(EXIT_OK)
}

fn format_report(r: &GradCheckReport) -> String {
    let status = if r.pass { "PASS" } else { "FAIL" };
    let jitter = if r.jitter { "jitter" } else { "-" };
    let mut line = format!("{:<20} {:>4} {status} {jitter:<6}", r.op, r.seed);
    for i in &r.inputs {
        line.push_str(&format!(" {}:rel={:.2e},abs={:.2e}", i.name, i.max_rel, i.max_abs));
    }
    if let Some(e) = &r.error {
        line.push_str(&format!(" error: {e}"));
    }
    line
}

fn cmd_gradcheck(op: &str, seeds: u64, tol: f64, abs_floor: f64) -> Result<i32> {
    let ops = if op == "all" {
        gradcheck::registry()
    } else {
        vec![gradcheck::lookup(op).ok_or_else(|| {
            let names: Vec<_> = gradcheck::registry().iter().map(|o| o.name()).collect();
            Error::config(format!("unknown op {op:?} (expected all, corrupted or one of {})", names.join(", ")))
        })?]
    };
    let jobs: Vec<(usize, u64)> = (0..ops.len()).flat_map(|o| (0..seeds).map(move |s| (o, s))).collect();
    let reports: Vec<GradCheckReport> = jobs
        .par_iter()
        .map(|&(o, s)| gradcheck::check(ops[o].as_ref(), s, tol, abs_floor))
        .collect();
    for r in &reports {
        println!("{}", format_report(r));
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK })
}

/// PFM-ready copy with invalid pixels set to +inf.
fn gt_tensor(gt: &DisparityMap<f32>) -> Tensor<f32> {
    let mut t = gt.to_tensor();
    for (v, &ok) in t.data_mut().iter_mut().zip(gt.valid()) {
        if !ok {
            *v = f32::INFINITY;
        }
    }
    t
}

fn cmd_train_toy(
    cfg: &RunConfig,
    train: &TrainConfig,
    out_weights: Option<&Path>,
    out_curve: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let every = (train.steps / 20).max(1);
    let outcome = train_pipeline_with(train, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    if let Some(p) = out_weights {
        write_weights(&outcome.model.to_weights()?, p)?;
    }
    if let Some(p) = out_curve {
        let mut csv = String::from("step,loss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        fs::write(p, csv).map_err(io_err(p))?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_ppm(&outcome.data.left, dir.join("left.ppm"))?;
        write_ppm(&outcome.data.right, dir.join("right.ppm"))?;
        write_pfm(&gt_tensor(&outcome.data.gt), dir.join("gt.pfm"))?;
        let saved = RunConfig {
            weights: out_weights.map(Path::to_path_buf),
            ..cfg.clone()
        };
        let p = dir.join("config.json");
        let json = serde_json::to_string_pretty(&saved).map_err(|e| Error::config(e.to_string()))?;
        fs::write(&p, json + "\n").map_err(io_err(&p))?;
    }
    let summary = serde_json::json!({
        "filter": train.model.filter,
        "steps": train.steps,
        "initial_loss": outcome.losses.first(),
        "final_loss": outcome.losses.last(),
        "final_epe": outcome.final_epe,
    });
    println!("{summary}");
    Ok(EXIT_OK)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_bench(cfg: &RunConfig, size: &str, iters: usize) -> Result<i32> {
    let (h, w) = parse_size(size)?;
    if iters == 0 {
        return Err(Error::config("--iters must be at least 1"));
    }
    let model = Model::<f32>::init(cfg.model()?, cfg.seeds.init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let mut image = || Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0f32..1.0));
    let (left, right) = (image(), image());
    let mut stages: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for _ in 0..iters {
        let (_, times) = model.predict_profiled(&left, &right)?;
        let total: Duration = times.iter().map(|t| t.1).sum();
        for (k, (name, d)) in times.into_iter().chain([("total", total)]).enumerate() {
            if stages.len() <= k {
                stages.push((name, Vec::new()));
            }
            stages[k].1.push(d.as_secs_f64() * 1e3);
        }
    }
    println!("filter {} size {h}x{w} disp {} iters {iters}", cfg.filter, cfg.max_disp);
    println!("{:<12} {:>10} {:>10}", "stage", "median_ms", "max_ms");
    for (name, mut ms) in stages {
        let max = ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{name:<12} {:>10.3} {max:>10.3}", median(&mut ms));
    }
    Ok(EXIT_OK)
}
