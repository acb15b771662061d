//! Finite-difference check of the whole policy on one instance.

use std::sync::Arc;

use tvrp_autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape};
use tvrp_core::{Env, EnvConfig, Instance};

use crate::{Policy, PolicyError, RunMode};

/// Differentiates the summed log-probability of up to `max_actions` greedy
/// decisions (chosen once under the current parameters and then held fixed)
/// through encoder and decoder, and compares against central differences.
pub fn check_policy_gradients(
    policy: &Policy,
    instance: &Arc<Instance>,
    max_actions: usize,
    options: GradCheckOptions,
) -> Result<GradCheckReport, PolicyError> {
    let trucks = policy.config().num_trucks;
    let env_cfg = EnvConfig::with_trucks(trucks);
    let start = Env::reset(instance.clone(), env_cfg).map_err(|e| PolicyError::Config(e.to_string()))?;
    let mut env = start.clone();
    let mut actions = Vec::new();
    while actions.len() < max_actions && !env.is_done() {
        let probs = policy.probabilities(instance, &env.observe(), &mut RunMode::default())?;
        let a = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).expect("nonempty");
        env.step(a).map_err(|e| PolicyError::Config(e.to_string()))?;
        actions.push(a);
    }
    if actions.is_empty() {
        return Err(PolicyError::Config("instance admits no decision to differentiate".into()));
    }
    let loss = |t: &mut Tape<f64>, store: &ParamStore| {
        let mut p = policy.clone();
        p.set_store(store.clone()).expect("same layout");
        let mut mode = RunMode::default();
        let enc = p.encode(t, instance, &mut mode).expect("encodes");
        let mut env = start.clone();
        let mut picks = Vec::with_capacity(actions.len());
        for &a in &actions {
            let lp = p.decode(t, &enc, &env.observe(), &mut mode).expect("decodes");
            picks.push(t.pick(lp, 0, a));
            env.step(a).expect("replayed action is allowed");
        }
        let all = t.concat_cols(&picks);
        t.sum(all)
    };
    Ok(grad_check(policy.store(), loss, options))
}
