//! Command-line entry point.
//!
//! Every command reads an optional JSON config (`--config`), applies `--set key=value`
//! overrides and command flags on top, and embeds the merged config in `manifest.json`,
//! which is written after all other outputs.

pub mod manifest;
pub mod toy;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::net::gradcheck::check_gradient;
use crate::net::mlp::random_batch;
use crate::net::{toy_dims, Checkpoint, Network};
use crate::rng::{stream, Purpose};
use crate::sampling::{self, initial_noise, Diffusion, Method, SamplerConfig, DEFAULT_EPSILON_B, DEFAULT_EPSILON_K};
use crate::slowflow::{self, Pairing};
use crate::training::{prepare_checkpoint, train_loop, GaussianMixtureSpec, LossLog, TrainConfig};
use manifest::{load_config, Override, RunRecorder};
use toy::{ToyConfig, ToyModels};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mixflow", version, about = "Slowed-interpolation flow matching on a 1D toy")]
pub struct Cli {
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// JSON config for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, e.g. `--set iterations=100` or `--set data.means=[-1,1]`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a velocity network.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        t_start: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Constant SDE diffusion coefficient.
        #[arg(long)]
        diffusion: Option<f64>,
        #[arg(long)]
        epsilon_k: Option<f64>,
        #[arg(long)]
        epsilon_b: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        trajectory: bool,
    },
    /// Slowed-timestep envelope of a checkpoint.
    Slowflow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        t_start: Option<f64>,
        #[arg(long)]
        pairing: Option<String>,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Train (or reuse) both toy models and compare generated and analytic marginals.
    ToyReproduce {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Central-difference check of the reverse-mode gradient.
    GradCheck {
        /// Comma-separated layer widths.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
        /// Number of coordinates to check; 0 checks all.
        #[arg(long)]
        coords: Option<usize>,
        /// Perturb the analytic gradient before comparing (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Input Perturbation training and Epsilon Scaling sampling against the toy models.
    CompareBaselines {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } | Error::Integration { .. } | Error::Singularity { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // A pool may already exist when commands run in-process (tests); that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn base_overrides(cli: &Cli) -> Result<Vec<Override>> {
    let mut out = cli.overrides.iter().map(|s| s.parse()).collect::<Result<Vec<Override>>>()?;
    if let Some(seed) = cli.seed {
        out.push(Override::new("seed", seed));
    }
    Ok(out)
}

fn push<T: Into<Value>>(list: &mut Vec<Override>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        list.push(Override::new(key, v));
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    configure_threads(cli.threads)?;
    let mut overrides = base_overrides(cli)?;
    let config_path = cli.config.as_deref();
    match &cli.command {
        Command::Train { resume } => cmd_train(config_path, &overrides, resume.as_deref(), &cli.out_dir),
        Command::Sample {
            checkpoint,
            method,
            steps,
            t_start,
            t_end,
            diffusion,
            epsilon_k,
            epsilon_b,
            n,
            trajectory,
        } => {
            push(&mut overrides, "method", method.clone());
            push(&mut overrides, "steps", *steps);
            push(&mut overrides, "t_start", *t_start);
            push(&mut overrides, "t_end", *t_end);
            push(&mut overrides, "diffusion", *diffusion);
            push(&mut overrides, "epsilon_k", *epsilon_k);
            push(&mut overrides, "epsilon_b", *epsilon_b);
            push(&mut overrides, "n", *n);
            if *trajectory {
                overrides.push(Override::new("record_trajectory", true));
            }
            cmd_sample(config_path, &overrides, checkpoint, &cli.out_dir)
        }
        Command::Slowflow {
            checkpoint,
            population,
            steps,
            t_start,
            pairing,
            tag,
        } => {
            push(&mut overrides, "population", *population);
            push(&mut overrides, "steps", *steps);
            push(&mut overrides, "t_start", *t_start);
            push(&mut overrides, "pairing", pairing.clone());
            push(&mut overrides, "tag", tag.clone());
            cmd_slowflow(config_path, &overrides, checkpoint, &cli.out_dir)
        }
        Command::ToyReproduce { cache_dir } => {
            let cache = cache_dir.clone().unwrap_or_else(|| cli.out_dir.join("cache"));
            cmd_toy_reproduce(config_path, &overrides, &cache, &cli.out_dir)
        }
        Command::GradCheck {
            dims,
            batch,
            coords,
            corrupt,
        } => {
            if let Some(d) = dims {
                let parsed = d
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("--dims {d:?} is not a comma-separated list of widths")))?;
                overrides.push(Override::new("dims", parsed));
            }
            push(&mut overrides, "batch", *batch);
            push(&mut overrides, "coords", *coords);
            cmd_grad_check(config_path, &overrides, *corrupt, &cli.out_dir)
        }
        Command::CompareBaselines { cache_dir } => {
            let cache = cache_dir.clone().unwrap_or_else(|| cli.out_dir.join("cache"));
            cmd_compare_baselines(config_path, &overrides, &cache, &cli.out_dir)
        }
    }
}

fn seed_of(effective: &Value) -> u64 {
    effective.get("seed").and_then(Value::as_u64).unwrap_or(0)
}

pub fn cmd_train(config_path: Option<&Path>, overrides: &[Override], resume: Option<&Path>, out_dir: &Path) -> Result<i32> {
    let (config, effective): (TrainConfig, Value) = load_config(config_path, overrides)?;
    config.validate()?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let mut checkpoint = prepare_checkpoint(&config, resumed)?;
    let mut rec = RunRecorder::new(out_dir, "train", effective.clone(), seed_of(&effective))?;
    if let Some(p) = resume {
        rec.input(p);
    }
    let mut log = LossLog::default();
    let mut snapshot_names = Vec::new();
    let result = train_loop(&config, &mut checkpoint, &mut log, |c| {
        let name = format!("snapshot_{}.json", c.iteration);
        c.save(&out_dir.join(&name))?;
        snapshot_names.push(name);
        Ok(())
    });
    for name in &snapshot_names {
        rec.record(name);
    }
    if let Err(e) = result {
        // The in-memory checkpoint is the last one whose update was finite.
        checkpoint.save(&out_dir.join("checkpoint_last_good.json"))?;
        std::fs::write(out_dir.join("loss.csv"), log.to_csv()).map_err(|io| Error::io(out_dir.join("loss.csv"), io))?;
        return Err(e);
    }
    checkpoint.save(&rec.path("checkpoint.json"))?;
    rec.record("checkpoint.json");
    rec.write("loss.csv", &log.to_csv())?;
    rec.finish()?;
    match log.entries.last() {
        Some((i, l)) => println!(
            "trained {} to iteration {}; loss {l} at iteration {i}",
            checkpoint.train_variant.as_str(),
            checkpoint.iteration
        ),
        None => println!("trained {} to iteration {}", checkpoint.train_variant.as_str(), checkpoint.iteration),
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub method: Method,
    pub steps: usize,
    pub t_start: f64,
    /// Defaults to 1, or to the latest admissible time for the SDE.
    pub t_end: Option<f64>,
    pub diffusion: f64,
    pub epsilon_k: f64,
    pub epsilon_b: f64,
    pub record_trajectory: bool,
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            method: Method::Euler,
            steps: 5,
            t_start: 0.0,
            t_end: None,
            diffusion: 0.0,
            epsilon_k: DEFAULT_EPSILON_K,
            epsilon_b: DEFAULT_EPSILON_B,
            record_trajectory: false,
            n: 10_000,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn sampler(&self) -> SamplerConfig {
        let base = SamplerConfig::new(self.method, self.steps);
        SamplerConfig {
            t_start: self.t_start,
            t_end: self.t_end.unwrap_or(base.t_end),
            diffusion: Diffusion::Constant { value: self.diffusion },
            epsilon_k: self.epsilon_k,
            epsilon_b: self.epsilon_b,
            record_trajectory: self.record_trajectory,
            seed: self.seed,
            ..base
        }
    }
}

pub fn batch_csv(x: &Batch) -> String {
    let mut out = String::new();
    for j in 0..x.dim() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "x_{j}");
    }
    out.push('\n');
    for row in x.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_sample(config_path: Option<&Path>, overrides: &[Override], checkpoint: &Path, out_dir: &Path) -> Result<i32> {
    let method_override = overrides.iter().rev().find(|o| o.path == ["method"]).cloned();
    let mut overrides = overrides.to_vec();
    if let Some(Override { value: Value::String(s), .. }) = method_override {
        let method: Method = s.parse()?;
        overrides.push(Override::new("method", serde_json::to_value(method).expect("enum serialises")));
    }
    let (config, effective): (SampleConfig, Value) = load_config(config_path, &overrides)?;
    if config.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let sampler = config.sampler();
    sampler.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let noise = initial_noise(config.seed, config.n, ckpt.network.data_dim());
    let (samples, traj) = sampling::sample(&ckpt.network, ckpt.schedule, &sampler, &noise)?;
    let mut rec = RunRecorder::new(out_dir, "sample", effective.clone(), config.seed)?;
    rec.input(checkpoint);
    rec.write("samples.csv", &batch_csv(&samples))?;
    if let Some(traj) = traj {
        rec.write("trajectory.csv", &traj.to_csv())?;
    }
    rec.write_json("sampler.json", &sampler)?;
    rec.finish()?;
    println!("wrote {} samples with {:?} ({} steps)", config.n, sampler.method, sampler.steps);
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowflowConfig {
    pub population: usize,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub method: Method,
    pub pairing: Pairing,
    pub grid_n: usize,
    pub data: GaussianMixtureSpec,
    pub tag: Option<String>,
    pub seed: u64,
}

impl Default for SlowflowConfig {
    fn default() -> Self {
        let s = SamplerConfig::slowflow_default();
        Self {
            population: slowflow::DEFAULT_POPULATION,
            steps: s.steps,
            t_start: s.t_start,
            t_end: s.t_end,
            method: s.method,
            pairing: Pairing::default(),
            grid_n: slowflow::DEFAULT_GRID_N,
            data: GaussianMixtureSpec::toy(),
            tag: None,
            seed: 0,
        }
    }
}

pub fn cmd_slowflow(config_path: Option<&Path>, overrides: &[Override], checkpoint: &Path, out_dir: &Path) -> Result<i32> {
    let (config, effective): (SlowflowConfig, Value) = load_config(config_path, overrides)?;
    if config.population == 0 {
        return Err(Error::Config("slow flow population must be positive".into()));
    }
    config.data.validate()?;
    let sampler = SamplerConfig {
        method: config.method,
        steps: config.steps,
        t_start: config.t_start,
        t_end: config.t_end,
        record_trajectory: true,
        seed: config.seed,
        ..SamplerConfig::slowflow_default()
    };
    sampler.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.network.data_dim() != 1 {
        return Err(Error::Config("slow flow envelopes are measured on one-dimensional mixture data".into()));
    }
    let tag = config.tag.clone().unwrap_or_else(|| ckpt.train_variant.as_str().to_string());
    let (noise, data) = toy::slowflow_pairs(&config.data, config.pairing, config.seed, config.population)?;
    let report = slowflow::slowflow_envelope(&ckpt.network, ckpt.schedule, &data, &noise, &sampler, config.grid_n, &tag)?;
    let mut rec = RunRecorder::new(out_dir, "slowflow", effective, config.seed)?;
    rec.input(checkpoint);
    rec.write("slowflow.csv", &report.to_csv())?;
    rec.write_json("slowflow.json", &report)?;
    rec.finish()?;
    let end = report.sampling_times.len() - 1;
    println!(
        "{tag}: width at t=1 {:.4}, median at t=1 {:.4}, clamped {:.2}%",
        report.width(end),
        report.median_m[end],
        100.0 * report.overall_clamped_fraction()
    );
    Ok(EXIT_OK)
}

pub fn cmd_toy_reproduce(config_path: Option<&Path>, overrides: &[Override], cache: &Path, out_dir: &Path) -> Result<i32> {
    let (config, effective): (ToyConfig, Value) = load_config(config_path, overrides)?;
    config.validate()?;
    let models = ToyModels::train(cache, &config)?;
    let results = toy::evaluate(&config, &models)?;
    let mut rec = RunRecorder::new(out_dir, "toy-reproduce", effective, config.seed)?;
    toy::write_toy_outputs(&mut rec, &models, &results)?;
    rec.finish()?;
    println!("t      L1 standard   L1 mixflow");
    for row in &results.comparison {
        println!("{:.1}    {:.6}      {:.6}", row.t, row.l1_standard_vs_gt, row.l1_mixflow_vs_gt);
    }
    Ok(EXIT_OK)
}

pub fn cmd_compare_baselines(config_path: Option<&Path>, overrides: &[Override], cache: &Path, out_dir: &Path) -> Result<i32> {
    let (config, effective): (ToyConfig, Value) = load_config(config_path, overrides)?;
    config.validate()?;
    let models = ToyModels::train(cache, &config)?;
    let perturbed = models.input_perturbation(cache, &config)?;
    let rows = toy::compare_baselines(&config, &models, &perturbed)?;
    let mut rec = RunRecorder::new(out_dir, "compare-baselines", effective, config.seed)?;
    rec.write("loss_input_perturbation.csv", &models.full_log(&perturbed).to_csv())?;
    rec.write_json("baselines.json", &rows)?;
    for run in [&models.head, &models.standard, &models.mixflow, &perturbed] {
        rec.input(&run.path);
    }
    rec.finish()?;
    println!("t      standard    mixflow     input-pert  eps-scaling");
    for r in &rows {
        println!(
            "{:.1}    {:.6}    {:.6}    {:.6}    {:.6}",
            r.t, r.l1_standard_vs_gt, r.l1_mixflow_vs_gt, r.l1_input_perturbation_vs_gt, r.l1_epsilon_scaling_vs_gt
        );
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub dims: Vec<usize>,
    pub batch: usize,
    /// Coordinates checked; 0 means all of them.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dims: toy_dims(1),
            batch: 4,
            coords: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub dims: Vec<usize>,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check(config: &GradCheckConfig, corrupt: bool) -> Result<GradCheckResult> {
    let net = Network::init(&config.dims, config.seed)?;
    let mut rng = stream(config.seed, Purpose::GradCheck, 0);
    let (x, t, y) = random_batch(&mut rng, config.batch.max(1), net.data_dim());
    let (_, mut grad) = net.loss_and_grad(&x, &t, &y)?;
    if corrupt {
        // Nudge the final output bias, which every subset includes.
        if let Some(b) = grad.layers.last_mut().and_then(|l| l.bias.last_mut()) {
            *b += 1e-2 * (b.abs() + 1.0);
        }
    }
    let coords = (config.coords > 0).then_some(config.coords);
    let report = check_gradient(&net, &x, &t, &y, &grad, coords, &mut rng)?;
    Ok(GradCheckResult {
        dims: config.dims.clone(),
        max_relative_error: report.max_relative_error,
        worst_index: report.worst_index,
        checked: report.checked,
        tolerance: GRAD_TOLERANCE,
        passed: report.max_relative_error <= GRAD_TOLERANCE,
    })
}

pub fn cmd_grad_check(config_path: Option<&Path>, overrides: &[Override], corrupt: bool, out_dir: &Path) -> Result<i32> {
    let (config, effective): (GradCheckConfig, Value) = load_config(config_path, overrides)?;
    let result = grad_check(&config, corrupt)?;
    let mut rec = RunRecorder::new(out_dir, "grad-check", effective, config.seed)?;
    rec.write_json("grad_check.json", &result)?;
    rec.finish()?;
    println!(
        "max relative error {:e} over {} coordinates (worst index {})",
        result.max_relative_error, result.checked, result.worst_index
    );
    Ok(if result.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}
