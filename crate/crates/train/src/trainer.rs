//! REINFORCE loop with a greedy rollout baseline.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use tvrp_autodiff::{ParamGrads, Real};
use tvrp_core::generate::random_instance;
use tvrp_core::{derive_seed, EnvConfig, Instance};
use tvrp_policy::{BnObservation, Policy};

use crate::baseline::BaselineTracker;
use crate::config::{Precision, TrainConfig};
use crate::optim::Adam;
use crate::rollout::{cost, rollout, rollout_batch, sample_with_tape, Decode};
use crate::TrainError;

/// Seed streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_VALID: u64 = 3;

/// Episodes whose gradients are held at once; keeps memory bounded while
/// the reduction order stays fixed.
const CHUNK: usize = 16;

/// Strict margin for a validation win.
const WIN_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    /// Mean sampled cost.
    pub mean_cost: f64,
    pub mean_coverage: f64,
    pub mean_finish_time: f64,
    /// Mean greedy baseline cost on the same instances.
    pub baseline_cost: f64,
    pub lr: f64,
    /// Norm of the batch gradient before any clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean sampled training cost over the epoch.
    pub train_cost: f64,
    /// Fraction of validation instances where the live policy strictly
    /// beats the baseline, both decoded greedily.
    pub win_rate: f64,
    /// Mean greedy validation cost of the live policy.
    pub validation_cost: f64,
    pub baseline_updated: bool,
    pub lr: f64,
}

pub enum TrainEvent<'a> {
    Batch(&'a BatchStats),
    Epoch(&'a EpochStats, &'a Policy),
}

/// Greedy costs of `policy` on `instances`.
pub fn evaluate(policy: &Policy, instances: &[Arc<Instance>], config: &TrainConfig) -> Result<Vec<f64>, TrainError> {
    let seeds = vec![0; instances.len()];
    let env = env_config(config);
    let records = match config.precision {
        Precision::Single => rollout_batch::<f32>(policy, instances, env, Decode::Greedy, &seeds, config.b_coverage)?,
        Precision::Double => rollout_batch::<f64>(policy, instances, env, Decode::Greedy, &seeds, config.b_coverage)?,
    };
    Ok(records.iter().map(|r| cost(r, config.cost)).collect())
}

fn env_config(config: &TrainConfig) -> EnvConfig {
    EnvConfig { num_trucks: config.policy.num_trucks, max_steps: config.max_steps, record_events: false }
}

struct EntryResult {
    cost: f64,
    baseline_cost: f64,
    coverage: f64,
    finish_time: f64,
    grads: ParamGrads,
    bn_stats: Vec<BnObservation>,
}

pub struct Trainer {
    config: TrainConfig,
    policy: Policy,
    baseline: Policy,
    adam: Adam,
    tracker: BaselineTracker,
    validation: Vec<Arc<Instance>>,
    baseline_validation: Option<Vec<f64>>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let policy = Policy::new(config.policy.clone(), derive_seed(config.seed, STREAM_INIT, 0))?;
        Self::from_policy(config, policy)
    }

    /// Starts from existing parameters, which also seed the baseline.
    pub fn from_policy(config: TrainConfig, policy: Policy) -> Result<Self, TrainError> {
        config.validate()?;
        if policy.config() != &config.policy {
            return Err(TrainError::Config("policy architecture differs from the training config".into()));
        }
        let validation = (0..config.validation_size)
            .into_par_iter()
            .map(|i| random_instance(&config.instances, derive_seed(config.seed, STREAM_VALID, i as u64)).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            tracker: BaselineTracker::new(config.baseline),
            baseline: policy.clone(),
            policy,
            adam: Adam::default(),
            validation,
            baseline_validation: None,
            epoch: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn baseline(&self) -> &Policy {
        &self.baseline
    }

    pub fn validation_set(&self) -> &[Arc<Instance>] {
        &self.validation
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    /// Runs all remaining epochs.
    pub fn run(&mut self, mut on_event: impl FnMut(TrainEvent<'_>)) -> Result<Vec<EpochStats>, TrainError> {
        let mut history = Vec::new();
        while self.epoch < self.config.num_epochs {
            history.push(self.run_epoch(&mut on_event)?);
        }
        Ok(history)
    }

    pub fn run_epoch(&mut self, on_event: &mut impl FnMut(TrainEvent<'_>)) -> Result<EpochStats, TrainError> {
        let epoch = self.epoch;
        let lr = self.config.learning_rate(epoch);
        let mut train_cost = 0.0;
        for batch in 0..self.config.batches_per_epoch {
            let stats = self.train_batch(epoch, batch, lr)?;
            train_cost += stats.mean_cost / self.config.batches_per_epoch as f64;
            on_event(TrainEvent::Batch(&stats));
        }
        let live = evaluate(&self.policy, &self.validation, &self.config)?;
        if self.baseline_validation.is_none() {
            self.baseline_validation = Some(evaluate(&self.baseline, &self.validation, &self.config)?);
        }
        let base = self.baseline_validation.as_ref().expect("cached above");
        let wins = live.iter().zip(base).filter(|(l, b)| **l < **b - WIN_MARGIN).count();
        let win_rate = if live.is_empty() { 0.0 } else { wins as f64 / live.len() as f64 };
        let baseline_updated = self.tracker.record(win_rate);
        if baseline_updated {
            self.baseline = self.policy.clone();
            self.baseline_validation = Some(live.clone());
        }
        let stats = EpochStats { epoch, train_cost, win_rate, validation_cost: mean(&live), baseline_updated, lr };
        self.epoch += 1;
        on_event(TrainEvent::Epoch(&stats, &self.policy));
        Ok(stats)
    }

    fn train_batch(&mut self, epoch: usize, batch: usize, lr: f64) -> Result<BatchStats, TrainError> {
        let size = self.config.batch_size;
        let first = ((epoch * self.config.batches_per_epoch + batch) * size) as u64;
        let mut total = ParamGrads::zeros_like(self.policy.store());
        let mut bn = Vec::new();
        let (mut c, mut cb, mut eta, mut fin) = (0.0, 0.0, 0.0, 0.0);
        for start in (0..size).step_by(CHUNK) {
            let idx: Vec<u64> = (start..(start + CHUNK).min(size)).map(|i| first + i as u64).collect();
            let results = idx
                .par_iter()
                .map(|&i| match self.config.precision {
                    Precision::Single => self.entry::<f32>(i),
                    Precision::Double => self.entry::<f64>(i),
                })
                .collect::<Result<Vec<_>, _>>()?;
            for r in results {
                total.accumulate(&r.grads, 1.0);
                bn.extend(r.bn_stats);
                c += r.cost;
                cb += r.baseline_cost;
                eta += r.coverage;
                fin += r.finish_time;
            }
        }
        let grad_norm = total.norm();
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged(format!("non-finite gradient at epoch {epoch}, batch {batch}")));
        }
        if let Some(limit) = self.config.max_grad_norm {
            if grad_norm > limit {
                total.scale(limit / grad_norm);
            }
        }
        self.adam.step(self.policy.store_mut(), &total, lr);
        self.policy.update_running_stats(&bn, self.config.bn_momentum);
        let n = size as f64;
        Ok(BatchStats {
            epoch,
            batch,
            mean_cost: c / n,
            mean_coverage: eta / n,
            mean_finish_time: fin / n,
            baseline_cost: cb / n,
            lr,
            grad_norm,
        })
    }

    /// One training instance: greedy baseline, sampled episode, and the
    /// gradient of `(F - F_BL) * sum log pi / batch_size`.
    fn entry<T: Real>(&self, index: u64) -> Result<EntryResult, TrainError> {
        let cfg = &self.config;
        let inst = Arc::new(random_instance(&cfg.instances, derive_seed(cfg.seed, STREAM_TRAIN, index))?);
        let env = env_config(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLE, index));
        let base = rollout::<T>(&self.baseline, &inst, env, Decode::Greedy, &mut rng, cfg.b_coverage)?;
        let baseline_cost = cost(&base, cfg.cost);
        let ep = sample_with_tape::<T>(&self.policy, &inst, env, &mut rng, cfg.b_coverage)?;
        let sampled = cost(&ep.record, cfg.cost);
        let weight = (sampled - baseline_cost) / cfg.batch_size as f64;
        let grads = ep.tape.backward_seeded(ep.total_log_prob, T::of(weight))?;
        Ok(EntryResult {
            cost: sampled,
            baseline_cost,
            coverage: ep.record.eta,
            finish_time: ep.record.finish_time,
            grads: ep.tape.param_grads(&grads, self.policy.store()),
            bn_stats: ep.bn_stats,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
