//! Box simulation against a hand trace, simulator properties and the
//! execution loop's bookkeeping.

use proptest::prelude::*;
use tvrp_core::{DemandEntry, Instance, Node};
use tvrp_policy::{Policy, PolicyConfig};
use tvrp_workflow::*;

fn line(n: usize, t_max: f64, demand: Vec<DemandEntry>) -> Instance {
    let coords = (0..n).map(|i| [i as f64, 0.0]).collect();
    Instance::euclidean(coords, 1.0, demand, t_max, vec![]).unwrap()
}

fn route(nodes: &[Node]) -> TruckRoute {
    TruckRoute { nodes: nodes.to_vec(), departs: vec![0.0; nodes.len().saturating_sub(1)] }
}

fn twenty_boxes() -> BoxInventory {
    let mut boxes = Vec::new();
    let mut add = |count: usize, volume: f64, path: &[Node], cyclic: bool| {
        for _ in 0..count {
            boxes.push(BoxItem::new(boxes.len(), volume, path.to_vec(), cyclic));
        }
    };
    add(6, 0.1, &[0, 2], true); // 0-5
    add(4, 0.15, &[0, 4, 2], true); // 6-9
    add(5, 0.2, &[1, 3], true); // 10-14
    add(3, 0.3, &[4, 1], false); // 15-17
    add(2, 0.25, &[2, 3, 1], true); // 18-19
    BoxInventory { boxes }
}

#[test]
fn twenty_box_two_truck_schedule_matches_hand_trace() {
    let inst = line(5, 100.0, vec![DemandEntry::cyclic(&[0, 1], 0.1)]);
    let routes = SuggestedRoutes { trucks: vec![route(&[0, 2, 4, 2, 0]), route(&[1, 3, 1, 4, 1])], ..Default::default() };
    let r = full_scale_simulate(&twenty_boxes(), &routes, &inst, 100.0);

    let ids = |a: std::ops::Range<usize>| a.collect::<Vec<_>>();
    let expected: Vec<(f64, usize, Node, Vec<usize>, Vec<usize>)> = vec![
        (0.0, 0, 0, vec![], [ids(0..6), vec![6, 7]].concat()),
        (0.0, 1, 1, vec![], ids(10..15)),
        (2.0, 0, 2, ids(0..6), ids(0..6)),
        (2.0, 1, 3, ids(10..15), ids(10..15)),
        (4.0, 0, 4, vec![6, 7], vec![6, 7]),
        (4.0, 1, 1, ids(10..15), vec![]),
        (6.0, 0, 2, vec![6, 7], vec![6, 7]),
        (7.0, 1, 4, vec![], vec![15, 16, 17]),
        (8.0, 0, 0, ids(0..8), vec![]),
        (10.0, 1, 1, vec![15, 16, 17], vec![]),
    ];
    assert_eq!(r.schedule.len(), expected.len());
    for (got, want) in r.schedule.iter().zip(&expected) {
        assert_eq!((got.time, got.truck, got.node), (want.0, want.1, want.2));
        assert_eq!(got.unloaded, want.3, "unloaded at {want:?}");
        assert_eq!(got.loaded, want.4, "loaded at {want:?}");
    }
    assert_eq!(r.returned, 16);
    assert_eq!(r.fulfillment, 0.8);
    for id in [8, 9] {
        assert_eq!(r.boxes[id].location, BoxLocation::Node(0));
    }
    for id in [18, 19] {
        assert_eq!(r.boxes[id].location, BoxLocation::Node(2));
    }
    assert!(r.truncated_trucks.is_empty());
}

#[test]
fn window_truncates_the_hand_traced_routes() {
    let inst = line(5, 100.0, vec![DemandEntry::cyclic(&[0, 1], 0.1)]);
    let routes = SuggestedRoutes { trucks: vec![route(&[0, 2, 4, 2, 0]), route(&[1, 3, 1, 4, 1])], ..Default::default() };
    let r = full_scale_simulate(&twenty_boxes(), &routes, &inst, 7.5);
    assert_eq!(r.truncated_trucks, vec![0, 1]);
    // only the rank-2 boxes on truck 1 completed before the cut
    assert_eq!(r.returned, 5);
    assert!(r.schedule.iter().all(|e| e.time <= 7.5));
}

fn arb_case() -> impl Strategy<Value = (usize, Vec<(Vec<Node>, bool, f64)>, Vec<Vec<Node>>, f64)> {
    (4usize..7).prop_flat_map(|n| {
        let tuple = (prop::sample::subsequence((0..n).collect::<Vec<_>>(), 2..=3).prop_shuffle(), any::<bool>(), 0.05f64..0.6);
        let walk = prop::collection::vec(0..n, 1..10);
        (Just(n), prop::collection::vec(tuple, 1..15), prop::collection::vec(walk, 1..4), 0.0f64..30.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulation_keeps_boxes_on_their_paths((n, tuples, walks, t_max) in arb_case(), strict in any::<bool>()) {
        let inst = line(n, 100.0, vec![DemandEntry::cyclic(&[0, 1], 0.1)]);
        let boxes = BoxInventory {
            boxes: tuples.iter().enumerate().map(|(i, (p, c, v))| BoxItem::new(i, *v, p.clone(), *c)).collect(),
        };
        // collapse repeated stops so every leg moves
        let trucks: Vec<TruckRoute> = walks.iter().map(|w| {
            let mut nodes: Vec<Node> = Vec::new();
            for &x in w {
                if nodes.last() != Some(&x) {
                    nodes.push(x);
                }
            }
            route(&nodes)
        }).collect();
        let routes = SuggestedRoutes { trucks, ..Default::default() };
        let rule = if strict { LoadRule::Completable } else { LoadRule::NextStop };
        let r = full_scale_simulate_with(&boxes, &routes, &inst, t_max, rule);

        for b in &r.boxes {
            let path = b.path();
            prop_assert!(b.progress >= 1 && b.progress <= path.len());
            prop_assert_eq!(&b.visited()[..], &path[..b.progress]);
            prop_assert_eq!(b.returned, b.progress == path.len());
            if b.returned {
                prop_assert_eq!(b.location, BoxLocation::Node(*path.last().unwrap()));
            }
        }
        // replaying the schedule: capacity 1 is never exceeded and every
        // box is in exactly one place
        let mut on = vec![None::<usize>; boxes.len()];
        let mut load = vec![0.0f64; routes.trucks.len()];
        let mut last_time = 0.0;
        for e in &r.schedule {
            prop_assert!(e.time >= last_time && e.time <= t_max.max(0.0));
            last_time = e.time;
            for &id in &e.unloaded {
                prop_assert_eq!(on[id], Some(e.truck));
                on[id] = None;
                load[e.truck] -= boxes.boxes[id].volume;
            }
            for &id in &e.loaded {
                prop_assert_eq!(on[id], None);
                on[id] = Some(e.truck);
                load[e.truck] += boxes.boxes[id].volume;
            }
            prop_assert!(load[e.truck] <= 1.0 + 1e-6);
        }
        for (id, b) in r.boxes.iter().enumerate() {
            match on[id] {
                Some(m) => prop_assert_eq!(b.location, BoxLocation::Truck(m)),
                None => prop_assert!(matches!(b.location, BoxLocation::Node(_))),
            }
        }
    }
}

fn policy(trucks: usize) -> Policy {
    let config = PolicyConfig { num_trucks: trucks, embed_dim: 8, heads: 2, ff_hidden: 8, reducer_dim: 4, encoder_layers: 1, ..PolicyConfig::default() };
    Policy::new(config, 5).unwrap()
}

fn small_params(n_prime: usize, trucks: usize) -> ExecutionParams {
    ExecutionParams { n_prime, num_trucks: trucks, k_node_draws: 3, k_subset_attempts: 2, k_execution_trials: 4, seed: 3, ..Default::default() }
}

#[test]
fn demand_inside_one_subset_finishes_in_one_iteration() {
    let inst = line(6, f64::INFINITY, vec![DemandEntry::cyclic(&[0, 1, 2], 0.4), DemandEntry::cyclic(&[2, 1], 0.3)]);
    let res = execution_loop(&inst, &policy(1), &small_params(3, 1)).unwrap();
    assert_eq!(res.iterations.len(), 1);
    assert_eq!(res.iterations[0].subset, vec![0, 1, 2]);
    assert_eq!(res.coverage_trace, vec![1.0]);
    assert_eq!(res.total_trucks, 1);
    assert!(res.remaining.iter().all(|e| e.volume == 0.0));
}

#[test]
fn disjoint_groups_need_several_iterations_and_bookkeeping_balances() {
    let demand = vec![
        DemandEntry::cyclic(&[0, 1, 2], 0.4),
        DemandEntry::cyclic(&[1, 0], 1.7),
        DemandEntry::cyclic(&[4, 5, 6], 0.5),
        DemandEntry::cyclic(&[6, 4], 0.2),
    ];
    let inst = line(7, 9.0, demand);
    let res = execution_loop(&inst, &policy(2), &small_params(3, 2)).unwrap();
    assert!(res.iterations.len() >= 2);
    assert!(res.coverage_trace.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(res.coverage(), 1.0);
    assert_eq!(res.total_trucks, 2 * res.iterations.len());
    assert_eq!(res.routes.trucks.len(), res.total_trucks);
    // remaining after k iterations = initial - cumulative satisfied
    let initial = inst.initial_total();
    let mut cum = 0.0;
    for (it, &cov) in res.iterations.iter().zip(&res.coverage_trace) {
        cum += it.satisfied;
        assert!(((1.0 - cov) * initial - (initial - cum)).abs() < 1e-9);
        // clipping holds each iteration's removal to one unit per tuple
        assert!(it.satisfied <= 4.0 + 1e-12);
    }
    // every route leg starts where the previous one ended, inside the window
    for t in &res.routes.trucks {
        assert!(t.end_time(&inst) <= 9.0 + 1e-12);
        assert_eq!(t.departs.len() + 1, t.nodes.len());
    }
}

#[test]
fn execution_is_reproducible() {
    let inst = tvrp_core::generate::synthetic_avrp(&tvrp_core::generate::AvrpParams { n: 8, num_paths: 12, ..Default::default() }, 1).unwrap();
    let p = policy(2);
    let a = execution_loop(&inst, &p, &small_params(5, 2)).unwrap();
    let b = execution_loop(&inst, &p, &small_params(5, 2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_parameters_are_rejected() {
    let inst = line(4, f64::INFINITY, vec![DemandEntry::cyclic(&[0, 1], 0.4)]);
    assert!(execution_loop(&inst, &policy(1), &ExecutionParams { clip: 0.0, ..small_params(3, 1) }).is_err());
    assert!(execution_loop(&inst, &policy(1), &small_params(3, 2)).is_err());
    assert!(execution_loop(&inst, &policy(1), &small_params(4, 1)).is_err());
}
