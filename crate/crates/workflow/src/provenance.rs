//! Attribution of satisfied volume to the demand entries it came from.

use std::collections::BTreeMap;

use tvrp_core::env::Arrival;
use tvrp_core::{Component, Instance};

/// Replays the transfers of `events` and returns, per demand entry of
/// `instance`, the volume that reached final satisfaction. Volume mixed in
/// one component is treated as homogeneous: every transfer out of a
/// component carries each origin's share pro rata.
pub fn satisfied_by_entry(instance: &Instance, events: &[Arrival]) -> Vec<f64> {
    let entries = instance.demand();
    let mut mix: BTreeMap<Component, BTreeMap<usize, f64>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let c = e.component().expect("validated entry");
        *mix.entry(c).or_default().entry(i).or_default() += e.volume;
    }
    let mut satisfied = vec![0.0; entries.len()];
    for a in events {
        for t in a.dropoff.transfers.iter().chain(&a.pickup.transfers) {
            let Some(src) = mix.get_mut(&t.from) else { continue };
            let total: f64 = src.values().sum();
            if total <= 0.0 {
                continue;
            }
            let frac = (t.volume / total).min(1.0);
            let moved: Vec<(usize, f64)> = src.iter_mut().map(|(&o, v)| {
                let m = *v * frac;
                *v -= m;
                (o, m)
            }).collect();
            if frac >= 1.0 {
                mix.remove(&t.from);
            }
            if t.to == Component::Satisfied {
                for (o, m) in moved {
                    satisfied[o] += m;
                }
            } else {
                let dst = mix.entry(t.to).or_default();
                for (o, m) in moved {
                    *dst.entry(o).or_default() += m;
                }
            }
        }
    }
    satisfied
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use tvrp_core::{DemandEntry, Env, EnvConfig};

    #[test]
    fn attribution_sums_to_the_satisfied_volume() {
        let demand = vec![
            DemandEntry::cyclic(&[0, 1], 0.3),
            DemandEntry::cyclic(&[2, 0, 1], 0.2),
            DemandEntry::cyclic(&[0, 1, 2], 0.4),
        ];
        let inst = Arc::new(Instance::euclidean(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 1.0, demand, f64::INFINITY, vec![]).unwrap());
        let cfg = EnvConfig { num_trucks: 1, max_steps: 1000, record_events: true };
        let mut env = Env::reset(inst.clone(), cfg).unwrap();
        for &a in &[1, 2, 0, 1, 0, 2, 0, 1, 2, 1, 0] {
            if env.is_done() {
                break;
            }
            let mask = env.mask();
            let a = if mask[a] { a } else { mask.iter().position(|&x| x).unwrap() };
            env.step(a).unwrap();
        }
        assert!(env.demand().satisfied() > 0.0);
        let s = satisfied_by_entry(&inst, env.events());
        let total: f64 = s.iter().sum();
        assert!((total - env.demand().satisfied()).abs() < 1e-12);
        for (v, e) in s.iter().zip(inst.demand()) {
            assert!(*v <= e.volume + 1e-12);
        }
    }

    #[test]
    fn a_single_cycle_is_attributed_to_its_entry() {
        let demand = vec![DemandEntry::cyclic(&[0, 1], 0.3), DemandEntry::cyclic(&[1, 2], 0.1)];
        let inst = Arc::new(Instance::euclidean(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 1.0, demand, f64::INFINITY, vec![]).unwrap());
        let cfg = EnvConfig { num_trucks: 1, max_steps: 1000, record_events: true };
        let mut env = Env::reset(inst.clone(), cfg).unwrap();
        // the first entry rides 0 -> 1, is reloaded at 1 and finishes back at
        // 0; the second is still on board
        env.step(1).unwrap();
        env.step(0).unwrap();
        let s = satisfied_by_entry(&inst, env.events());
        assert!((s[0] - 0.3).abs() < 1e-12, "{s:?}");
        assert_eq!(s[1], 0.0);
    }
}
