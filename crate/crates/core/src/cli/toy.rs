//! The two-Gaussian toy experiment: cached training chain, density comparison, envelopes, baselines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::manifest::{config_hash, RunRecorder};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::eval::{self, ComparisonRow, DensityGrid, COMPARISON_TIMES};
use crate::net::checkpoint::FORMAT_VERSION;
use crate::net::{toy_dims, Checkpoint};
use crate::rng::{stream, Purpose};
use crate::sampling::{self, initial_noise, Method, SamplerConfig, Trajectory, DEFAULT_EPSILON_B, DEFAULT_EPSILON_K};
use crate::schedules::Schedule;
use crate::slowflow::{self, Pairing, SlowFlowReport};
use crate::training::{
    prepare_checkpoint, train_loop, GaussianMixtureSpec, LossLog, TrainConfig, TrainVariant, DEFAULT_LOG_EVERY,
    DEFAULT_PERTURBATION_STRENGTH, TOY_GAMMA,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub schedule: Schedule,
    pub data: GaussianMixtureSpec,
    pub layer_dims: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Total iterations of every toy model.
    pub iterations: u64,
    /// Standard iterations before the MixFlow and Input Perturbation fine-tunes branch off.
    pub branch_at: u64,
    pub gamma: f64,
    pub perturbation_strength: f64,
    pub log_every: u64,
    pub samples: usize,
    pub sampling_steps: usize,
    pub slowflow_population: usize,
    pub slowflow_steps: usize,
    pub slowflow_t_start: f64,
    pub pairing: Pairing,
    pub epsilon_k: f64,
    pub epsilon_b: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: Schedule::Linear,
            data: GaussianMixtureSpec::toy(),
            layer_dims: toy_dims(1),
            lr: 1e-3,
            batch_size: 2048,
            iterations: 26_000,
            branch_at: 20_000,
            gamma: TOY_GAMMA,
            perturbation_strength: DEFAULT_PERTURBATION_STRENGTH,
            log_every: DEFAULT_LOG_EVERY,
            samples: 50_000,
            sampling_steps: 5,
            slowflow_population: slowflow::DEFAULT_POPULATION,
            slowflow_steps: 50,
            slowflow_t_start: 0.05,
            pairing: Pairing::default(),
            epsilon_k: DEFAULT_EPSILON_K,
            epsilon_b: DEFAULT_EPSILON_B,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_at > self.iterations {
            return Err(Error::Config(format!(
                "branch_at {} exceeds iterations {}",
                self.branch_at, self.iterations
            )));
        }
        if self.samples < 2 {
            return Err(Error::Config("toy comparison needs at least two samples".into()));
        }
        if self.slowflow_population == 0 {
            return Err(Error::Config("slow flow population must be positive".into()));
        }
        self.train_config(TrainVariant::Standard, self.branch_at).validate()?;
        self.train_config(TrainVariant::MixFlow, 0).validate()?;
        self.sampler(Method::Euler).validate()?;
        self.sampler(Method::EpsilonScaledEuler).validate()
    }

    pub fn train_config(&self, variant: TrainVariant, iterations: u64) -> TrainConfig {
        TrainConfig {
            variant,
            gamma: self.gamma,
            perturbation_strength: self.perturbation_strength,
            lr: self.lr,
            batch_size: self.batch_size,
            iterations,
            seed: self.seed,
            schedule: self.schedule,
            data: self.data.clone(),
            layer_dims: self.layer_dims.clone(),
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }

    pub fn sampler(&self, method: Method) -> SamplerConfig {
        SamplerConfig {
            epsilon_k: self.epsilon_k,
            epsilon_b: self.epsilon_b,
            record_trajectory: true,
            seed: self.seed,
            ..SamplerConfig::new(method, self.sampling_steps)
        }
    }

    pub fn slowflow_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            t_start: self.slowflow_t_start,
            steps: self.slowflow_steps,
            seed: self.seed,
            ..SamplerConfig::slowflow_default()
        }
    }
}

/// A trained checkpoint together with the loss log of its own segment.
#[derive(Debug, Clone)]
pub struct CachedRun {
    pub key: String,
    pub path: PathBuf,
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    pub cache_hit: bool,
}

fn parse_loss_csv(text: &str) -> Result<LossLog> {
    let mut log = LossLog::default();
    for line in text.lines().skip(1) {
        let parsed = line
            .split_once(',')
            .and_then(|(i, l)| Some((i.parse().ok()?, l.parse().ok()?)));
        match parsed {
            Some(entry) => log.entries.push(entry),
            None => return Err(Error::Config(format!("malformed loss log line {line:?}"))),
        }
    }
    Ok(log)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cache key of a training segment: its config (snapshot list excluded) and its parent's key.
pub fn segment_key(config: &TrainConfig, parent: Option<&str>) -> String {
    let mut config = config.clone();
    config.snapshots.clear();
    config_hash(&json!({
        "format_version": FORMAT_VERSION,
        "train": serde_json::to_value(&config).expect("config serialises"),
        "parent": parent,
    }))
}

/// Train `config` on top of `parent` unless the cache already holds the result.
pub fn train_cached(cache_dir: &Path, config: &TrainConfig, parent: Option<&CachedRun>) -> Result<CachedRun> {
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let key = segment_key(config, parent.map(|p| p.key.as_str()));
    let path = cache_dir.join(format!("{key}.json"));
    let log_path = cache_dir.join(format!("{key}.loss.csv"));
    if path.exists() && log_path.exists() {
        let checkpoint = Checkpoint::load(&path)?;
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        return Ok(CachedRun {
            key,
            path,
            checkpoint,
            log: parse_loss_csv(&text)?,
            cache_hit: true,
        });
    }
    let mut checkpoint = prepare_checkpoint(config, parent.map(|p| p.checkpoint.clone()))?;
    let mut log = LossLog::default();
    eprintln!(
        "training {} for {} iterations from iteration {} (cache key {})",
        config.variant.as_str(),
        config.iterations,
        checkpoint.iteration,
        &key[..12]
    );
    train_loop(config, &mut checkpoint, &mut log, |_| Ok(()))?;
    write_atomic(&log_path, &log.to_csv())?;
    write_atomic(&path, &checkpoint.to_json()?)?;
    Ok(CachedRun {
        key,
        path,
        checkpoint,
        log,
        cache_hit: false,
    })
}

/// The toy models, each a standard head followed by a variant-specific tail.
pub struct ToyModels {
    pub head: CachedRun,
    pub standard: CachedRun,
    pub mixflow: CachedRun,
}

impl ToyModels {
    pub fn train(cache_dir: &Path, config: &ToyConfig) -> Result<Self> {
        let tail = config.iterations - config.branch_at;
        let head = train_cached(cache_dir, &config.train_config(TrainVariant::Standard, config.branch_at), None)?;
        let standard = train_cached(cache_dir, &config.train_config(TrainVariant::Standard, tail), Some(&head))?;
        let mixflow = train_cached(cache_dir, &config.train_config(TrainVariant::MixFlow, tail), Some(&head))?;
        Ok(Self { head, standard, mixflow })
    }

    pub fn input_perturbation(&self, cache_dir: &Path, config: &ToyConfig) -> Result<CachedRun> {
        let tail = config.iterations - config.branch_at;
        train_cached(cache_dir, &config.train_config(TrainVariant::InputPerturbation, tail), Some(&self.head))
    }

    /// Full loss trace of `tail` including the shared head.
    pub fn full_log(&self, tail: &CachedRun) -> LossLog {
        LossLog {
            entries: self.head.log.entries.iter().chain(&tail.log.entries).copied().collect(),
        }
    }
}

fn states_at(traj: &Trajectory, t: f64) -> Result<Vec<f64>> {
    let k = traj.nearest_index(t);
    if (traj.times[k] - t).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "sampling grid has no point at t = {t}; choose steps so that {t} is on the grid"
        )));
    }
    Ok(traj.states[k].as_slice().to_vec())
}

/// KDE of the recorded states at each comparison time.
pub fn trajectory_densities(traj: &Trajectory, grid: &[f64]) -> Result<Vec<DensityGrid>> {
    COMPARISON_TIMES
        .iter()
        .map(|&t| eval::kde_density(&states_at(traj, t)?, grid))
        .collect()
}

pub fn ground_truth_densities(config: &ToyConfig, grid: &[f64]) -> Result<Vec<DensityGrid>> {
    COMPARISON_TIMES
        .iter()
        .map(|&t| eval::mixture_marginal_density(&config.data, config.schedule, t, grid))
        .collect()
}

pub fn sample_trajectory(checkpoint: &Checkpoint, sampler: &SamplerConfig, noise: &Batch) -> Result<Trajectory> {
    let (_, traj) = sampling::sample(&checkpoint.network, checkpoint.schedule, sampler, noise)?;
    Ok(traj.expect("trajectory recorded"))
}

/// Noise and data endpoints for envelope paths.
pub fn slowflow_pairs(spec: &GaussianMixtureSpec, pairing: Pairing, seed: u64, population: usize) -> Result<(Batch, Batch)> {
    let noise = initial_noise_for(seed, Purpose::SlowFlow, population);
    let data = match pairing {
        Pairing::Quantile => slowflow::quantile_coupling(spec, &noise)?,
        Pairing::Independent => spec.sample_batch(&mut stream(seed, Purpose::SlowFlow, 1), population),
    };
    Ok((noise, data))
}

fn initial_noise_for(seed: u64, purpose: Purpose, rows: usize) -> Batch {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = stream(seed, purpose, 0);
    Batch::from_scalars((0..rows).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn envelope(config: &ToyConfig, run: &CachedRun, tag: &str) -> Result<SlowFlowReport> {
    let (noise, data) = slowflow_pairs(&config.data, config.pairing, config.seed, config.slowflow_population)?;
    slowflow::slowflow_envelope(
        &run.checkpoint.network,
        run.checkpoint.schedule,
        &data,
        &noise,
        &config.slowflow_sampler(),
        slowflow::DEFAULT_GRID_N,
        tag,
    )
}

/// Everything `toy-reproduce` measures.
pub struct ToyResults {
    pub comparison: Vec<ComparisonRow>,
    pub standard_densities: Vec<DensityGrid>,
    pub mixflow_densities: Vec<DensityGrid>,
    pub truth: Vec<DensityGrid>,
    pub slowflow_standard: SlowFlowReport,
    pub slowflow_mixflow: SlowFlowReport,
}

pub fn evaluate(config: &ToyConfig, models: &ToyModels) -> Result<ToyResults> {
    let grid = eval::default_grid();
    let noise = initial_noise(config.seed, config.samples, 1);
    let sampler = config.sampler(Method::Euler);
    let std_traj = sample_trajectory(&models.standard.checkpoint, &sampler, &noise)?;
    let mix_traj = sample_trajectory(&models.mixflow.checkpoint, &sampler, &noise)?;
    let standard_densities = trajectory_densities(&std_traj, &grid)?;
    let mixflow_densities = trajectory_densities(&mix_traj, &grid)?;
    let truth = ground_truth_densities(config, &grid)?;
    let comparison = COMPARISON_TIMES
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            Ok(ComparisonRow {
                t,
                l1_standard_vs_gt: eval::l1_distance(&standard_densities[k], &truth[k])?,
                l1_mixflow_vs_gt: eval::l1_distance(&mixflow_densities[k], &truth[k])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyResults {
        comparison,
        standard_densities,
        mixflow_densities,
        truth,
        slowflow_standard: envelope(config, &models.standard, "standard")?,
        slowflow_mixflow: envelope(config, &models.mixflow, "mixflow")?,
    })
}

fn time_label(t: f64) -> String {
    format!("{t:.1}")
}

pub fn write_toy_outputs(rec: &mut RunRecorder, models: &ToyModels, results: &ToyResults) -> Result<()> {
    rec.write("loss_standard.csv", &models.full_log(&models.standard).to_csv())?;
    rec.write("loss_mixflow.csv", &models.full_log(&models.mixflow).to_csv())?;
    for (k, &t) in COMPARISON_TIMES.iter().enumerate() {
        let label = time_label(t);
        rec.write(&format!("density_standard_t{label}.csv"), &results.standard_densities[k].to_csv())?;
        rec.write(&format!("density_mixflow_t{label}.csv"), &results.mixflow_densities[k].to_csv())?;
        rec.write(&format!("density_gt_t{label}.csv"), &results.truth[k].to_csv())?;
    }
    rec.write_json("comparison.json", &results.comparison)?;
    rec.write("slowflow_standard.csv", &results.slowflow_standard.to_csv())?;
    rec.write_json("slowflow_standard.json", &results.slowflow_standard)?;
    rec.write("slowflow_mixflow.csv", &results.slowflow_mixflow.to_csv())?;
    rec.write_json("slowflow_mixflow.json", &results.slowflow_mixflow)?;
    for run in [&models.head, &models.standard, &models.mixflow] {
        rec.input(&run.path);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub t: f64,
    pub l1_standard_vs_gt: f64,
    pub l1_mixflow_vs_gt: f64,
    pub l1_input_perturbation_vs_gt: f64,
    pub l1_epsilon_scaling_vs_gt: f64,
}

pub fn compare_baselines(config: &ToyConfig, models: &ToyModels, perturbed: &CachedRun) -> Result<Vec<BaselineRow>> {
    let grid = eval::default_grid();
    let noise = initial_noise(config.seed, config.samples, 1);
    let euler = config.sampler(Method::Euler);
    let eps = config.sampler(Method::EpsilonScaledEuler);
    let truth = ground_truth_densities(config, &grid)?;
    let densities = [
        trajectory_densities(&sample_trajectory(&models.standard.checkpoint, &euler, &noise)?, &grid)?,
        trajectory_densities(&sample_trajectory(&models.mixflow.checkpoint, &euler, &noise)?, &grid)?,
        trajectory_densities(&sample_trajectory(&perturbed.checkpoint, &euler, &noise)?, &grid)?,
        trajectory_densities(&sample_trajectory(&models.standard.checkpoint, &eps, &noise)?, &grid)?,
    ];
    COMPARISON_TIMES
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let l1 = |d: &[DensityGrid]| eval::l1_distance(&d[k], &truth[k]);
            Ok(BaselineRow {
                t,
                l1_standard_vs_gt: l1(&densities[0])?,
                l1_mixflow_vs_gt: l1(&densities[1])?,
                l1_input_perturbation_vs_gt: l1(&densities[2])?,
                l1_epsilon_scaling_vs_gt: l1(&densities[3])?,
            })
        })
        .collect()
}

pub fn effective_value(config: &ToyConfig) -> Value {
    serde_json::to_value(config).expect("toy config serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyConfig {
        ToyConfig {
            layer_dims: vec![2, 16, 16, 1],
            batch_size: 64,
            iterations: 30,
            branch_at: 20,
            log_every: 5,
            samples: 500,
            slowflow_population: 50,
            slowflow_steps: 10,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn defaults_match_toy_setup() {
        let c = ToyConfig::default();
        assert_eq!((c.iterations, c.branch_at), (26_000, 20_000));
        assert_eq!((c.samples, c.sampling_steps), (50_000, 5));
        assert_eq!((c.slowflow_population, c.slowflow_steps, c.slowflow_t_start), (2000, 50, 0.05));
        assert_eq!((c.epsilon_k, c.epsilon_b), (1e-4, 1.005));
        c.validate().unwrap();
        assert!(ToyConfig { branch_at: 30_000, ..c }.validate().is_err());
    }

    #[test]
    fn cache_reuses_identical_segments() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let first = ToyModels::train(dir.path(), &config).unwrap();
        assert!(!first.head.cache_hit && !first.standard.cache_hit && !first.mixflow.cache_hit);
        assert_eq!(first.standard.checkpoint.iteration, 30);
        assert_eq!(first.mixflow.checkpoint.train_variant, TrainVariant::MixFlow);
        let second = ToyModels::train(dir.path(), &config).unwrap();
        assert!(second.head.cache_hit && second.standard.cache_hit && second.mixflow.cache_hit);
        assert_eq!(first.mixflow.checkpoint, second.mixflow.checkpoint);
        assert_eq!(first.full_log(&first.standard), second.full_log(&second.standard));

        // An uninterrupted standard run equals head + tail.
        let mut whole = prepare_checkpoint(&config.train_config(TrainVariant::Standard, 30), None).unwrap();
        train_loop(&config.train_config(TrainVariant::Standard, 30), &mut whole, &mut LossLog::default(), |_| Ok(())).unwrap();
        assert_eq!(whole, first.standard.checkpoint);

        let a = segment_key(&config.train_config(TrainVariant::Standard, 10), None);
        let b = segment_key(&config.train_config(TrainVariant::Standard, 10), Some(&a));
        assert_ne!(a, b);
    }

    #[test]
    fn evaluation_runs_on_tiny_models() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let models = ToyModels::train(dir.path(), &config).unwrap();
        let r = evaluate(&config, &models).unwrap();
        assert_eq!(r.comparison.len(), 5);
        assert!(r.comparison.iter().all(|row| (0.0..=2.0 + 1e-9).contains(&row.l1_standard_vs_gt)));
        assert_eq!(r.slowflow_standard.sampling_times, r.slowflow_mixflow.sampling_times);
        assert_eq!(r.slowflow_standard.population, 50);
        let ip = models.input_perturbation(dir.path(), &config).unwrap();
        assert_eq!(ip.checkpoint.train_variant, TrainVariant::InputPerturbation);
        let rows = compare_baselines(&config, &models, &ip).unwrap();
        assert_eq!(rows[4].t, 1.0);
        assert_eq!(rows[2].l1_standard_vs_gt, r.comparison[2].l1_standard_vs_gt);
    }

    #[test]
    fn loss_csv_round_trip() {
        let log = LossLog { entries: vec![(1, 0.5), (2, 1e-3)] };
        assert_eq!(parse_loss_csv(&log.to_csv()).unwrap(), log);
        assert!(parse_loss_csv("iteration,loss\nx,y\n").is_err());
    }
}
