//! Scripted episodes checked against hand-traced ledgers.

use std::sync::Arc;

use tvrp_core::{Component, DemandEntry, DemandState, Env, EnvConfig, Instance};

/// Time matrix with every off-diagonal entry `base` except the listed legs.
fn times(n: usize, base: f64, legs: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut t: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { base }).collect()).collect();
    for &(i, j, v) in legs {
        t[i][j] = v;
    }
    t
}

/// Nonzero components outside `ignore`, plus the satisfied volume.
fn tracked(state: &DemandState, ignore: &dyn Fn(&Component) -> bool) -> (Vec<(Component, f64)>, f64) {
    let parts = state.nonzero_components().into_iter().filter(|(c, _)| !ignore(c)).collect();
    (parts, state.satisfied())
}

// Truck numbers and node labels below follow the narrative with trucks
// counted from zero: "truck 1" is index 0 and "truck 3" is index 2.

#[test]
fn rank2_cyclic_ledger() {
    // A filler triple at node 5 tops up truck 0 after its drop so that the
    // empty box is left for truck 2.
    let demand = vec![DemandEntry::cyclic(&[2, 5], 1.0), DemandEntry::cyclic(&[5, 0, 1], 1.0)];
    let t = times(8, 1.0, &[(0, 5, 5.0), (0, 6, 100.0), (5, 0, 100.0)]);
    let inst = Instance::new(vec![[0.0, 0.0]; 8], t, demand, f64::INFINITY, vec![2, 0, 0]).unwrap();
    let filler = |c: &Component| {
        matches!(c, Component::Cyclic3(5, 0, 1) | Component::Onboard3(_, 0, 1, 5) | Component::Direct3(0, 1, 5))
    };
    let mut ledger = Vec::new();
    ledger.push(tracked(&inst.initial_state(3), &filler));

    let mut env = Env::reset(Arc::new(inst), EnvConfig::with_trucks(3)).unwrap();
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(5).unwrap(); // truck 0 -> 5, arrives t=1
    env.step_unchecked(6).unwrap(); // truck 1 out of the way
    env.step_unchecked(5).unwrap(); // truck 2 -> 5, arrives t=5
    // truck 0 has arrived at 5 and dropped the box
    assert_eq!(env.active(), Some(0));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(0).unwrap();
    assert_eq!(env.active(), Some(2));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(2).unwrap();
    ledger.push(tracked(env.demand(), &filler));

    let expected = vec![
        (vec![(Component::Cyclic2(2, 5), 1.0)], 0.0),
        (vec![(Component::Onboard2(0, 5, 2), 1.0)], 0.0),
        (vec![(Component::Direct2(5, 2), 1.0)], 0.0),
        // the on-board component names only the next stop, not node 5
        (vec![(Component::Onboard1(2, 2), 1.0)], 0.0),
        (vec![], 1.0),
    ];
    assert_eq!(ledger, expected);
}

#[test]
fn rank3_cyclic_ledger() {
    let demand = vec![
        DemandEntry::cyclic(&[3, 7, 4], 1.0),
        DemandEntry::cyclic(&[7, 0, 1], 1.0),
        DemandEntry::cyclic(&[4, 0, 1], 1.0),
    ];
    let t = times(8, 1.0, &[(6, 7, 5.0), (5, 4, 10.0), (7, 0, 100.0), (4, 0, 100.0)]);
    let inst = Instance::new(vec![[0.0, 0.0]; 8], t, demand, f64::INFINITY, vec![6, 3, 5]).unwrap();
    let filler = |c: &Component| match *c {
        Component::Cyclic3(7, 0, 1) | Component::Cyclic3(4, 0, 1) => true,
        Component::Onboard3(_, 0, 1, k) => k == 7 || k == 4,
        _ => false,
    };
    let mut ledger = vec![tracked(&inst.initial_state(3), &filler)];
    let mut env = Env::reset(Arc::new(inst), EnvConfig::with_trucks(3)).unwrap();
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(7).unwrap(); // truck 0 -> 7, t=5
    env.step_unchecked(7).unwrap(); // truck 1 -> 7, t=1
    env.step_unchecked(4).unwrap(); // truck 2 -> 4, t=10
    assert_eq!((env.active(), env.now()), (Some(1), 1.0));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(0).unwrap();
    assert_eq!((env.active(), env.now()), (Some(0), 5.0));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(4).unwrap();
    assert_eq!((env.active(), env.now()), (Some(0), 6.0));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(0).unwrap();
    assert_eq!((env.active(), env.now()), (Some(2), 10.0));
    ledger.push(tracked(env.demand(), &filler));
    env.step_unchecked(3).unwrap();
    ledger.push(tracked(env.demand(), &filler));

    let expected = vec![
        (vec![(Component::Cyclic3(3, 7, 4), 1.0)], 0.0),
        (vec![(Component::Onboard3(1, 7, 4, 3), 1.0)], 0.0),
        (vec![(Component::Direct3(7, 4, 3), 1.0)], 0.0),
        (vec![(Component::Onboard2(0, 4, 3), 1.0)], 0.0),
        (vec![(Component::Direct2(4, 3), 1.0)], 0.0),
        (vec![(Component::Onboard1(2, 3), 1.0)], 0.0),
        (vec![], 1.0),
    ];
    assert_eq!(ledger, expected);
}

#[test]
fn cyclic_units_need_one_dropoff_per_leg() {
    for (nodes, legs) in [(vec![1, 2], 2usize), (vec![1, 2, 3], 3)] {
        let inst = Instance::new(
            vec![[0.0, 0.0]; 4],
            times(4, 1.0, &[]),
            vec![DemandEntry::cyclic(&nodes, 0.5)],
            f64::INFINITY,
            vec![nodes[0]],
        )
        .unwrap();
        let mut env = Env::reset(Arc::new(inst), EnvConfig { record_events: true, ..EnvConfig::with_trucks(1) }).unwrap();
        let mut drops = 0;
        for &v in nodes.iter().skip(1).chain(std::iter::once(&nodes[0])) {
            assert_eq!(env.demand().satisfied(), 0.0);
            env.step(v).unwrap();
            drops += 1;
        }
        assert_eq!(drops, legs);
        assert_eq!(env.demand().satisfied(), 0.5);
        let dropping = env.events().iter().filter(|a| a.dropoff.dropped > 0.0).count();
        assert_eq!(dropping, legs);
        assert!(env.is_done());
    }
}

/// Square 0-1-2-3 with unit sides and diagonals of 2.
fn square() -> Instance {
    let t = times(4, 1.0, &[(0, 2, 2.0), (2, 0, 2.0), (1, 3, 2.0), (3, 1, 2.0)]);
    let demand = vec![DemandEntry::cyclic(&[1, 2], 0.6), DemandEntry::cyclic(&[2, 3], 0.7)];
    Instance::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], t, demand, f64::INFINITY, vec![]).unwrap()
}

#[test]
fn four_node_two_truck_hand_trace() {
    let mut env = Env::reset(Arc::new(square()), EnvConfig::with_trucks(2)).unwrap();
    // (expected active truck, its clock, allowed nodes, action)
    let script: [(usize, f64, &[usize], usize); 9] = [
        (0, 0.0, &[1, 2], 1),
        (1, 0.0, &[1, 2], 2),
        (0, 1.0, &[2], 2),
        (0, 2.0, &[1, 3], 3),
        (1, 2.0, &[3], 3),
        (0, 3.0, &[1, 2], 1),
        (1, 3.0, &[2], 2),
        (1, 4.0, &[0, 1, 3], 0),
        (0, 5.0, &[2], 2),
    ];
    for (step, &(truck, clock, allowed, action)) in script.iter().enumerate() {
        assert_eq!(env.active(), Some(truck), "step {step}");
        assert_eq!(env.now(), clock, "step {step}");
        let mask: Vec<usize> = env.mask().iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect();
        assert_eq!(mask, allowed, "step {step}");
        match step {
            // after truck 0's first arrival at node 2: it carries 0.6 for
            // node 1 and the split 0.4 of the 2->3 cycle
            3 => {
                let d = env.demand();
                assert_eq!(d.get(Component::Onboard1(0, 1)), 0.6);
                assert_eq!(d.get(Component::Onboard2(0, 3, 2)), 0.4);
                assert_eq!(d.get(Component::Cyclic2(2, 3)), 0.7 - 0.4);
                assert_eq!(env.fleet().trucks[0].capacity_free, 0.0);
            }
            7 => assert_eq!(env.demand().satisfied(), 0.7 - 0.4),
            _ => {}
        }
        env.step(action).unwrap();
    }
    assert!(env.is_done());
    let rec = env.record(10.0);
    assert_eq!(rec.nodes, vec![1, 2, 2, 3, 3, 1, 2, 0, 2]);
    assert_eq!(rec.trucks, vec![0, 1, 0, 0, 1, 0, 1, 1, 0]);
    assert_eq!(rec.departs, vec![0.0, 0.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
    assert_eq!(rec.finish_time, 6.0);
    assert!((rec.eta - 1.0).abs() < 1e-12);
    assert!(!rec.truncated);
    // truck 1 was still driving when demand ran out
    assert_eq!(env.fleet().trucks[1].last_arrival, 4.0);
}

#[test]
fn finish_time_is_the_latest_truck() {
    // truck 0 finishes at t=2, truck 1 at t=3
    let t = times(3, 1.0, &[(0, 2, 3.0), (2, 0, 5.0)]);
    let demand = vec![DemandEntry::direct(&[0, 1], 0.5), DemandEntry::direct(&[0, 2], 0.6)];
    let inst = Instance::new(vec![[0.0, 0.0]; 3], t, demand, 8.0, vec![0, 0]).unwrap();
    let mut env = Env::reset(Arc::new(inst), EnvConfig::with_trucks(2)).unwrap();
    // truck 0 loaded 0.5 for node 1 and 0.5 for node 2; truck 1 the last 0.1
    assert_eq!(env.demand().onboard_of(1), 0.6 - 0.5);
    env.step(1).unwrap();
    env.step(2).unwrap();
    assert_eq!((env.active(), env.now()), (Some(0), 1.0));
    env.step(2).unwrap();
    // truck 0 delivered at t=2 and idles away on a long leg
    assert_eq!((env.active(), env.now()), (Some(0), 2.0));
    env.step(0).unwrap();
    assert!(env.is_done());
    let rec = env.record(10.0);
    let finishes: Vec<f64> = env.fleet().trucks.iter().map(|t| t.last_arrival).collect();
    assert_eq!(finishes, vec![2.0, 3.0]);
    assert_eq!(rec.finish_time, 3.0);
    assert_eq!(rec.objective, -10.0 * rec.eta + 3.0 / 8.0);
}
