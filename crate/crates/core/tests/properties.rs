use std::collections::BTreeMap;

use acnc_core::context::{run_demo, ContextCodebook};
use acnc_core::placement::{
    eligible_nodes, place_random, solve_exact, ExactLimits, ExactProblem, InstanceCatalog, Placement,
    PlacementObjective, Replication, TransitionRates,
};
use acnc_core::rng::{substream, Stream};
use acnc_core::routing::{
    encode_segments, enumerate_paths, simulate_forwarding, ResourceLedger, RoutingParams, SegmentMode, Usage,
};
use acnc_core::services::{generate_requests, synthetic_services, QosBounds};
use acnc_core::topology::{generate_topology, Metric, TierPlan, TopologyParams};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topologies_are_connected_and_port_bounded(v in 2usize..30, seed in 0u64..1000) {
        let params = TopologyParams::default();
        let t = generate_topology(v, &TierPlan::uniform(), &params, seed).unwrap();
        prop_assert_eq!(t.size(), v);
        prop_assert!(t.is_connected());
        prop_assert_eq!(t.poas().len(), params.poa_count(v));
        prop_assert!(t.links.len() <= v * (v - 1) / 2);
        for d in 0..v {
            prop_assert!(t.neighbors(d).len() < params.ports);
        }
        for l in &t.links {
            prop_assert!(l.endpoints.0 < l.endpoints.1);
            prop_assert_eq!(t.link_between(l.endpoints.0, l.endpoints.1), Some(l.id));
        }
    }

    #[test]
    fn shortest_paths_survive_segment_encoding(v in 2usize..20, seed in 0u64..500, a in 0usize..20, b in 0usize..20) {
        let t = generate_topology(v, &TierPlan::uniform(), &TopologyParams::default(), seed).unwrap();
        let (a, b) = (a % v, b % v);
        let p = t.shortest_path(a, b, Metric::Latency).unwrap();
        for mode in [SegmentMode::HopByHop, SegmentMode::Waypoint] {
            let s = encode_segments(&p.devices, mode, &t).unwrap();
            prop_assert_eq!(simulate_forwarding(&t, &s, a).unwrap(), p.devices.clone());
        }
    }

    #[test]
    fn random_placements_respect_node_capacity(v in 2usize..10, seed in 0u64..500) {
        let t = generate_topology(v, &TierPlan::uniform(), &TopologyParams::default(), seed).unwrap();
        let reg = synthetic_services(4, 3, &QosBounds::default(), 20.0, seed).unwrap();
        let catalog = InstanceCatalog::build(&reg, Replication::Fixed(2), &t).unwrap();
        let p = place_random(&t, &catalog, &mut substream(seed, Stream::Placement(0))).unwrap();
        prop_assert!(p.respects_capacity(&t));
        prop_assert_eq!(p.bindings.len(), catalog.len());
        for inst in &catalog.instances {
            prop_assert!(eligible_nodes(&t, inst.class).contains(&p.node_of(inst.id).unwrap()));
        }
        let back = Placement::from_text(&p.to_text(), &t, &catalog).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn ledger_never_overcommits(v in 2usize..8, seed in 0u64..300, count in 1usize..40) {
        let t = generate_topology(v, &TierPlan::uniform(), &TopologyParams::default(), seed).unwrap();
        let reg = synthetic_services(3, 3, &QosBounds::default(), 20.0, seed).unwrap();
        let catalog = InstanceCatalog::build(&reg, Replication::Fixed(1), &t).unwrap();
        let mut rng = substream(seed, Stream::Synthetic(seed));
        let placement = place_random(&t, &catalog, &mut rng).unwrap();
        let params = RoutingParams::default();
        let requests = generate_requests(0, &reg, &t.poas(), count, seed).unwrap();
        let mut ledger = ResourceLedger::new(&t, catalog.capacities());
        let mut committed: Vec<Usage> = Vec::new();
        for r in &requests {
            let chain: Vec<usize> = catalog.stages(r.service).iter().map(|s| s[rng.gen_range(0..s.len())]).collect();
            let hosts: Vec<usize> = chain.iter().map(|&i| placement.node_of(i).unwrap()).collect();
            for c in enumerate_paths(&t, r.user, &hosts, &params) {
                let u = Usage::of(&t, &c, &chain, r, &params);
                let before = ledger.clone();
                if ledger.apply(&u, r.latency_budget).is_feasible() {
                    committed.push(u);
                } else {
                    prop_assert_eq!(&ledger, &before);
                }
                prop_assert!(ledger.is_consistent());
            }
        }
        // the ledger equals the sum of what it accepted
        let mut links = vec![0.0; t.links.len()];
        let mut insts: BTreeMap<usize, f64> = BTreeMap::new();
        for u in &committed {
            for &(l, x) in &u.links {
                links[l] += x;
            }
            for &(i, x) in &u.instances {
                *insts.entry(i).or_default() += x;
            }
        }
        for (l, x) in links.iter().enumerate() {
            prop_assert!((ledger.link_used[l] - x).abs() < 1e-9);
        }
        for (i, x) in insts {
            prop_assert!((ledger.instance_used[&i] - x).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_optimum_dominates_rejecting_everything(v in 2usize..5, seed in 0u64..200, count in 0usize..6) {
        let t = generate_topology(v, &TierPlan::uniform(), &TopologyParams::default(), seed).unwrap();
        let reg = synthetic_services(2, 2, &QosBounds::default(), 20.0, seed).unwrap();
        let catalog = InstanceCatalog::build(&reg, Replication::Fixed(1), &t).unwrap();
        let requests = generate_requests(0, &reg, &t.poas(), count, seed).unwrap();
        let rates = TransitionRates::draw(&catalog, (100, 200), &mut substream(seed, Stream::TransitionRates));
        let routing = RoutingParams { k: 2, ..RoutingParams::default() };
        let pb = ExactProblem {
            topology: &t,
            registry: &reg,
            catalog: &catalog,
            requests: &requests,
            objective: PlacementObjective { profit_weight: 1.0, energy_weight: 0.01, include_transition: false },
            routing: &routing,
            previous: None,
            rates: &rates,
        };
        let sol = solve_exact(&pb, &ExactLimits::default()).unwrap();
        prop_assert!(sol.objective >= 0.0);
        prop_assert!(sol.placement.respects_capacity(&t));
        prop_assert!(sol.served() <= count);
        let value = pb.objective.value(sol.profit, sol.link_energy + sol.compute_energy);
        prop_assert!((value - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn higher_vigilance_never_merges_more(seed in 0u64..200, noise in 0.0f64..0.3, lo in 0.3f64..0.9, gap in 0.0f64..0.09) {
        let regimes: Vec<usize> = (0..24).map(|i| 1 + (i % 2)).collect();
        let count = |rho: f64| {
            let mut cb = ContextCodebook::new(rho, 0.1, regimes.len()).unwrap();
            run_demo(&regimes, &mut cb, noise, seed).unwrap();
            cb.len()
        };
        prop_assert!(count(lo) <= count(lo + gap));
    }
}
