//! Episode rollouts under a policy.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tvrp_autodiff::{Mat, Real, Tape, Var};
use tvrp_core::{Env, EnvConfig, EpisodeRecord, Instance};
use tvrp_policy::{Policy, RunMode};

use crate::config::CostMode;
use crate::TrainError;

/// How an action is chosen from the policy distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Sample,
    Greedy,
}

/// Chooses an allowed node from log-probabilities. Sampling inverts the
/// cumulative distribution at one uniform draw; greedy takes the most
/// probable node, ties to the lowest index.
pub fn select<T: Real>(log_probs: &[T], mask: &[bool], decode: Decode, rng: &mut ChaCha8Rng) -> usize {
    let allowed = || (0..log_probs.len()).filter(|&i| mask[i]);
    match decode {
        Decode::Greedy => allowed().fold(None, |best: Option<usize>, i| match best {
            Some(b) if log_probs[b] >= log_probs[i] => Some(b),
            _ => Some(i),
        }),
        Decode::Sample => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut last = None;
            for i in allowed() {
                cum += log_probs[i].f64().exp();
                last = Some(i);
                if u < cum {
                    return i;
                }
            }
            last
        }
    }
    .expect("at least one node is allowed")
}

/// Episode cost under `mode`.
pub fn cost(record: &EpisodeRecord, mode: CostMode) -> f64 {
    match mode {
        CostMode::Objective => record.objective,
        CostMode::RouteTime => record.finish_time,
    }
}

/// Runs one episode without keeping gradients.
pub fn rollout<T: Real>(
    policy: &Policy,
    instance: &Arc<Instance>,
    env_config: EnvConfig,
    decode: Decode,
    rng: &mut ChaCha8Rng,
    b_coverage: f64,
) -> Result<EpisodeRecord, TrainError> {
    Ok(rollout_env::<T>(policy, instance, env_config, decode, rng)?.record(b_coverage))
}

/// Like [`rollout`] but hands back the finished environment, which keeps
/// the arrival log when `env_config.record_events` is set.
pub fn rollout_env<T: Real>(
    policy: &Policy,
    instance: &Arc<Instance>,
    env_config: EnvConfig,
    decode: Decode,
    rng: &mut ChaCha8Rng,
) -> Result<Env, TrainError> {
    let mut env = Env::reset(instance.clone(), env_config)?;
    let mut tape = Tape::<T>::new();
    let mut mode = RunMode::default();
    let enc = policy.encode(&mut tape, instance, &mut mode)?;
    let keep = tape.len();
    while !env.is_done() {
        let obs = env.observe();
        let lp = policy.decode(&mut tape, &enc, &obs, &mut mode)?;
        let row = tape.value(lp).data();
        let a = select(row, &obs.mask, decode, rng);
        let logp = row[a].f64();
        tape.truncate(keep);
        env.step_with_log_prob(a, logp)?;
    }
    Ok(env)
}

/// One sampled episode whose tape still holds the graph of
/// `sum_t log pi_t`, ready for a backward pass.
pub struct TapedEpisode<T: Real> {
    pub tape: Tape<T>,
    pub total_log_prob: Var,
    pub record: EpisodeRecord,
    pub bn_stats: Vec<tvrp_policy::BnObservation>,
}

pub fn sample_with_tape<T: Real>(
    policy: &Policy,
    instance: &Arc<Instance>,
    env_config: EnvConfig,
    rng: &mut ChaCha8Rng,
    b_coverage: f64,
) -> Result<TapedEpisode<T>, TrainError> {
    let mut env = Env::reset(instance.clone(), env_config)?;
    let mut tape = Tape::<T>::new();
    let mut mode = RunMode { bn_stats: Some(Vec::new()), ..RunMode::default() };
    let enc = policy.encode(&mut tape, instance, &mut mode)?;
    let mut picks = Vec::new();
    while !env.is_done() {
        let obs = env.observe();
        let lp = policy.decode(&mut tape, &enc, &obs, &mut mode)?;
        let a = select(tape.value(lp).data(), &obs.mask, Decode::Sample, rng);
        let pick = tape.pick(lp, 0, a);
        env.step_with_log_prob(a, tape.scalar(pick).f64())?;
        picks.push(pick);
    }
    let total_log_prob = if picks.is_empty() {
        tape.constant(Mat::scalar(T::zero()))
    } else {
        let all = tape.concat_cols(&picks);
        tape.sum(all)
    };
    Ok(TapedEpisode { tape, total_log_prob, record: env.record(b_coverage), bn_stats: mode.bn_stats.unwrap_or_default() })
}

/// Rebuilds `sum_t log pi_t` of a recorded episode on a fresh tape.
pub fn replay_log_prob<T: Real>(
    policy: &Policy,
    instance: &Arc<Instance>,
    env_config: EnvConfig,
    record: &EpisodeRecord,
    tape: &mut Tape<T>,
) -> Result<Var, TrainError> {
    let mut env = Env::reset(instance.clone(), env_config)?;
    let mut mode = RunMode::default();
    let enc = policy.encode(tape, instance, &mut mode)?;
    let mut picks = Vec::new();
    for &a in &record.nodes {
        let lp = policy.decode(tape, &enc, &env.observe(), &mut mode)?;
        picks.push(tape.pick(lp, 0, a));
        env.step(a)?;
    }
    Ok(if picks.is_empty() {
        tape.constant(Mat::scalar(T::zero()))
    } else {
        let all = tape.concat_cols(&picks);
        tape.sum(all)
    })
}

/// Rollouts of many instances in parallel; entry `i` uses a generator
/// seeded with `seeds[i]`. Output order follows input order.
pub fn rollout_batch<T: Real>(
    policy: &Policy,
    instances: &[Arc<Instance>],
    env_config: EnvConfig,
    decode: Decode,
    seeds: &[u64],
    b_coverage: f64,
) -> Result<Vec<EpisodeRecord>, TrainError> {
    use rand::SeedableRng;
    assert_eq!(instances.len(), seeds.len());
    instances
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(inst, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rollout::<T>(policy, inst, env_config, decode, &mut rng, b_coverage)
        })
        .collect()
}
