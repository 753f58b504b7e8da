//! REINFORCE with a greedy rollout baseline.
//!
//! Every step draws a fresh batch, samples a tour per instance from the
//! policy, decodes a greedy tour with the frozen baseline, and takes one
//! Adam step on `Σ (L(π) - L(π_BL)) log p(π) / B`. After each epoch the
//! policy replaces the baseline when a one-sided paired t-test on a fixed
//! held-out set says it is better.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hpn_autograd::checkpoint::{CheckpointError, TensorFile};
use hpn_autograd::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecodeMode, HpnModel, ModelConfig, ModelError};
use crate::rng::{derive_seed, seeded};
use crate::stats::{paired_t_test_one_sided, StatsError};
use crate::tsp::{generate_uniform, Instance};

const STREAM_INIT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_SAMPLE: u64 = 4;

pub const METRICS_HEADER: &str = "epoch,mean_sampled_len,mean_greedy_len,baseline_refreshed,lr";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Resume(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// How the trained policy picks its tours during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRollout {
    Sample,
    /// Greedy decoding for the policy as well, which makes every advantage
    /// zero while the baseline equals the policy. Only for testing.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Baseline refresh threshold α for the t-test p-value.
    pub significance: f64,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub n_cities: usize,
    pub model: ModelConfig,
    pub seed: u64,
    /// Size of the held-out set the baseline test runs on.
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    #[serde(default = "default_policy_rollout")]
    pub policy_rollout: PolicyRollout,
}

fn default_eval_instances() -> usize {
    1000
}

fn default_policy_rollout() -> PolicyRollout {
    PolicyRollout::Sample
}

impl TrainConfig {
    /// TSP50 with the published small-scale hyperparameters.
    pub fn small() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 2500,
            batch_size: 512,
            significance: 0.05,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            n_cities: 50,
            model: ModelConfig::default(),
            seed: 1234,
            eval_instances: 1000,
            policy_rollout: PolicyRollout::Sample,
        }
    }

    /// TSP50 training meant for validation on larger instances.
    pub fn large() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            model: ModelConfig {
                tanh_clip: 100.0,
                ..ModelConfig::default()
            },
            ..Self::small()
        }
    }

    /// TSP10 desk run: 10 epochs of 50 steps.
    pub fn smoke() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            n_cities: 10,
            model: ModelConfig::smoke(),
            ..Self::small()
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "large" => Some(Self::large()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: &str| {
            Err(TrainError::Config {
                field,
                message: message.to_string(),
            })
        };
        if self.epochs == usize::MAX {
            return bad("epochs", "too large");
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be positive");
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                "must be at least 2: the baseline's paired t-test needs a sample variance",
            );
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return bad("significance", "must lie strictly between 0 and 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive and finite");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr_decay", "must be positive and finite");
        }
        if self.n_cities == 0 {
            return bad("n_cities", "must be positive");
        }
        if self.eval_instances < 2 {
            return bad("eval_instances", "must be at least 2 for the paired t-test");
        }
        self.model.validate().map_err(|e| match e {
            ModelError::Config { field, message } => TrainError::Config {
                field,
                message: format!("model.{field}: {message}"),
            },
            other => TrainError::Model(other),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub mean_advantage: f64,
    pub mean_sampled_len: f64,
    pub mean_baseline_len: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_sampled_len: f64,
    /// Policy's mean greedy length on the held-out set after the epoch.
    pub mean_greedy_len: f64,
    pub baseline_refreshed: bool,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub p_value: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.mean_sampled_len,
            self.mean_greedy_len,
            u8::from(self.baseline_refreshed),
            self.lr
        )
    }
}

/// Where [`Trainer::fit`] writes per-epoch artifacts.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    /// Append-only metrics CSV.
    pub metrics: Option<PathBuf>,
    /// Checkpoint overwritten after every epoch.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerMeta {
    format: String,
    model: ModelConfig,
    trainer: TrainerState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    epoch: usize,
    lr: f64,
    adam_step: u64,
}

pub struct Trainer {
    cfg: TrainConfig,
    policy: HpnModel,
    baseline: HpnModel,
    adam: Vec<AdamState>,
    epoch: usize,
    lr: f64,
    eval_set: Vec<Instance>,
    baseline_eval: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = HpnModel::new(cfg.model.clone(), derive_seed(cfg.seed, STREAM_INIT, 0))?;
        let baseline = policy.clone();
        let adam = AdamState::for_params(policy.params().tensors(), AdamConfig::default());
        let eval_set = eval_set(&cfg);
        let baseline_eval = greedy_lengths(&baseline, &eval_set)?;
        Ok(Self {
            lr: cfg.learning_rate,
            cfg,
            policy,
            baseline,
            adam,
            epoch: 0,
            eval_set,
            baseline_eval,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &HpnModel {
        &self.policy
    }

    pub fn baseline(&self) -> &HpnModel {
        &self.baseline
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn eval_set(&self) -> &[Instance] {
        &self.eval_set
    }

    pub fn into_policy(self) -> HpnModel {
        self.policy
    }

    /// One REINFORCE step on the batch for global step `index`.
    pub fn train_step(&mut self, index: u64) -> Result<StepSummary> {
        let batch = generate_uniform(
            self.cfg.n_cities,
            self.cfg.batch_size,
            derive_seed(self.cfg.seed, STREAM_BATCH, index),
        );
        let sample_seed = derive_seed(self.cfg.seed, STREAM_SAMPLE, index);
        let b = batch.len() as f64;
        let mode = self.cfg.policy_rollout;
        let chunk = (rayon::current_num_threads() * 2).max(1);

        let params = self.policy.params_mut();
        params.zero_grads();
        let mut sums = Vec::with_capacity(batch.len());
        for (c, instances) in batch.chunks(chunk).enumerate() {
            let results: Vec<Result<InstanceResult>> = instances
                .par_iter()
                .enumerate()
                .map(|(k, inst)| {
                    let i = (c * chunk + k) as u64;
                    instance_gradient(&self.policy, &self.baseline, inst, mode, derive_seed(sample_seed, 0, i), b)
                })
                .collect();
            let params = self.policy.params_mut().tensors_mut();
            for r in results {
                let r = r?;
                for (slot, g) in &r.grads {
                    params[*slot].accumulate_grad(g)?;
                }
                sums.push((r.sampled, r.baseline));
            }
        }
        adam_step(self.policy.params_mut().tensors_mut(), &mut self.adam, self.lr)?;

        let mean = |f: fn(&(f64, f64)) -> f64| sums.iter().map(f).sum::<f64>() / b;
        Ok(StepSummary {
            mean_advantage: mean(|(s, bl)| s - bl),
            mean_sampled_len: mean(|(s, _)| *s),
            mean_baseline_len: mean(|(_, bl)| *bl),
        })
    }

    /// Runs one epoch of steps and the baseline test.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let steps = self.cfg.steps_per_epoch;
        let mut sampled = 0.0;
        for s in 0..steps {
            let index = (self.epoch * steps + s) as u64;
            sampled += self.train_step(index)?.mean_sampled_len;
        }
        let candidate = greedy_lengths(&self.policy, &self.eval_set)?;
        let (refreshed, p_value) = should_refresh(&candidate, &self.baseline_eval, self.cfg.significance)?;
        let metrics = EpochMetrics {
            epoch: self.epoch + 1,
            mean_sampled_len: sampled / steps as f64,
            mean_greedy_len: mean(&candidate),
            baseline_refreshed: refreshed,
            lr: self.lr,
            p_value,
        };
        if refreshed {
            self.baseline.params_mut().copy_values_from(self.policy.params());
            self.baseline_eval = candidate;
        }
        self.epoch += 1;
        self.lr *= self.cfg.lr_decay;
        Ok(metrics)
    }

    /// Trains until `epochs` are complete, writing metrics and checkpoints
    /// after every epoch.
    pub fn fit(&mut self, out: &Outputs) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch()?;
            if let Some(path) = &out.metrics {
                append_metrics(path, &m)?;
            }
            if let Some(path) = &out.checkpoint {
                self.save_checkpoint(path)?;
            }
            all.push(m);
        }
        Ok(all)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let meta = TrainerMeta {
            format: "hpn-trainer".into(),
            model: self.cfg.model.clone(),
            trainer: TrainerState {
                config: self.cfg.clone(),
                epoch: self.epoch,
                lr: self.lr,
                adam_step: self.adam.first().map_or(0, |s| s.step),
            },
        };
        let mut file = TensorFile::new(serde_json::to_string(&meta)?);
        self.policy.write_entries(&mut file, "policy.");
        self.baseline.write_entries(&mut file, "baseline.");
        let names = self.policy.params().names();
        for (name, s) in names.iter().zip(&self.adam) {
            file.push(format!("adam.m.{name}"), Tensor::row(s.m.clone()));
            file.push(format!("adam.v.{name}"), Tensor::row(s.v.clone()));
        }
        file.push("baseline_eval", Tensor::row(self.baseline_eval.clone()));
        Ok(file)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        self.to_tensor_file()?.save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_str(&file.meta)?;
        if meta.format != "hpn-trainer" {
            return Err(TrainError::Resume(format!("not a trainer checkpoint: {}", meta.format)));
        }
        let st = meta.trainer;
        let mut t = Trainer::new(st.config)?;
        t.policy.read_entries(file, "policy.")?;
        t.baseline.read_entries(file, "baseline.")?;
        let names = t.policy.params().names().to_vec();
        for (name, s) in names.iter().zip(t.adam.iter_mut()) {
            let len = s.m.len();
            let get = |key: String| {
                file.get(&key)
                    .filter(|v| v.len() == len)
                    .map(|v| v.data().to_vec())
                    .ok_or(TrainError::Resume(format!("missing or misshapen {key}")))
            };
            s.m = get(format!("adam.m.{name}"))?;
            s.v = get(format!("adam.v.{name}"))?;
            s.step = st.adam_step;
        }
        let be = file
            .get("baseline_eval")
            .filter(|v| v.len() == t.eval_set.len())
            .ok_or(TrainError::Resume("missing baseline_eval".into()))?;
        t.baseline_eval = be.data().to_vec();
        t.epoch = st.epoch;
        t.lr = st.lr;
        Ok(t)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

struct InstanceResult {
    grads: Vec<(usize, Vec<f64>)>,
    sampled: f64,
    baseline: f64,
}

fn instance_gradient(
    policy: &HpnModel,
    baseline: &HpnModel,
    inst: &Instance,
    mode: PolicyRollout,
    seed: u64,
    batch: f64,
) -> Result<InstanceResult> {
    let mut tape = Tape::new();
    let mut rng = seeded(seed);
    let decode = match mode {
        PolicyRollout::Sample => DecodeMode::Sample(&mut rng),
        PolicyRollout::Greedy => DecodeMode::Greedy,
    };
    let r = policy.rollout(&mut tape, inst, decode)?;
    let bl = baseline.greedy_tour(inst)?;
    let advantage = r.tour.length - bl.length;
    let grads = if advantage == 0.0 {
        Vec::new()
    } else {
        tape.backward_scaled(r.log_prob, advantage / batch)?
            .param_grads()
            .map(|(slot, g)| (slot, g.to_vec()))
            .collect()
    };
    Ok(InstanceResult {
        grads,
        sampled: r.tour.length,
        baseline: bl.length,
    })
}

/// The surrogate loss `Σ advantages[i] · log p(tours[i]) / B` recorded on
/// `tape`, with the tours replayed rather than sampled.
pub fn surrogate_loss(
    model: &HpnModel,
    tape: &mut Tape,
    instances: &[Instance],
    tours: &[Vec<usize>],
    advantages: &[f64],
) -> Result<Var> {
    let b = instances.len() as f64;
    let mut terms = Vec::with_capacity(instances.len());
    for ((inst, tour), adv) in instances.iter().zip(tours).zip(advantages) {
        let r = model.rollout(tape, inst, DecodeMode::Forced(tour))?;
        terms.push(tape.scale(r.log_prob, adv / b));
    }
    Ok(tape.add_all(&terms)?)
}

/// The baseline is replaced iff the candidate's paired one-sided p-value is
/// below `alpha`. Returns the decision and the p-value.
pub fn should_refresh(candidate: &[f64], baseline: &[f64], alpha: f64) -> Result<(bool, f64)> {
    let p = paired_t_test_one_sided(candidate, baseline)?;
    Ok((p < alpha, p))
}

/// Greedy tour lengths of `model` on every instance, in order.
pub fn greedy_lengths(model: &HpnModel, instances: &[Instance]) -> Result<Vec<f64>> {
    instances
        .par_iter()
        .map(|inst| Ok(model.greedy_tour(inst)?.length))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn eval_set(cfg: &TrainConfig) -> Vec<Instance> {
    generate_uniform(cfg.n_cities, cfg.eval_instances, derive_seed(cfg.seed, STREAM_EVAL, 0))
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |md| md.len() == 0);
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    writeln!(w, "{}", m.csv_row())?;
    w.flush()?;
    Ok(())
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: TrainConfig) -> Result<(HpnModel, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(cfg)?;
    let metrics = t.fit(&Outputs::default())?;
    Ok((t.into_policy(), metrics))
}

/// Reads a metrics CSV written by [`Trainer::fit`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    use std::io::{BufRead, BufReader};
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |k: usize| -> Result<f64> {
            f.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TrainError::Resume(format!("bad metrics line {}: {line}", i + 1)))
        };
        out.push(EpochMetrics {
            epoch: parse(0)? as usize,
            mean_sampled_len: parse(1)?,
            mean_greedy_len: parse(2)?,
            baseline_refreshed: parse(3)? != 0.0,
            lr: parse(4)?,
            p_value: f64::NAN,
        });
    }
    Ok(out)
}
