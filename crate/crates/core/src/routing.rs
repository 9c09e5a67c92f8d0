//! Candidate paths through instance chains, QoS feasibility against a
//! resource ledger, and SRv6-style segment lists.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::placement::InstanceId;
use crate::services::Request;
use crate::topology::{DeviceId, Exclusions, LinkId, Metric, NodeId, Path, Topology};

/// Charging rule for chained requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageCharge {
    /// Every stage consumes the full capacity requirement.
    Full,
    /// The capacity requirement is split evenly across stages.
    Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams {
    /// Candidates kept per (PoA, chain hosts).
    pub k: usize,
    pub processing_latency: f64,
    pub include_return: bool,
    pub stage_charge: StageCharge,
}

impl Default for RoutingParams {
    fn default() -> Self {
        RoutingParams { k: 3, processing_latency: 0.2, include_return: true, stage_charge: StageCharge::Full }
    }
}

impl RoutingParams {
    pub fn stage_demand(&self, r: &Request, stages: usize) -> f64 {
        match self.stage_charge {
            StageCharge::Full => r.capacity_req,
            StageCharge::Split => r.capacity_req / stages.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathCandidate {
    pub hosts: Vec<NodeId>,
    pub hops: Vec<DeviceId>,
    /// Link latencies plus per-stage processing latency.
    pub latency: f64,
    pub min_residual_bandwidth: f64,
}

fn path_cost(t: &Topology, p: &Path, metric: Metric) -> f64 {
    match metric {
        Metric::Latency => p.latency,
        Metric::Hops => p.hops() as f64,
        Metric::Energy => p
            .devices
            .windows(2)
            .map(|w| t.links[t.link_between(w[0], w[1]).expect("adjacent")].energy_per_unit)
            .sum(),
    }
}

/// Yen's k-shortest loopless paths. `k = usize::MAX` enumerates every
/// loopless path in cost order.
pub fn k_shortest_paths(t: &Topology, a: DeviceId, b: DeviceId, k: usize, metric: Metric) -> Vec<Path> {
    if k == 0 {
        return Vec::new();
    }
    if a == b {
        return vec![Path { devices: vec![a], latency: 0.0 }];
    }
    let Some(first) = t.restricted_shortest_path(a, b, metric, &Exclusions::default()) else {
        return Vec::new();
    };
    let mut accepted = vec![first];
    let mut pending: Vec<(f64, Path)> = Vec::new();
    while accepted.len() < k {
        let prev = accepted.last().expect("nonempty").devices.clone();
        for i in 0..prev.len() - 1 {
            let spur = prev[i];
            let root = &prev[..=i];
            let mut ex = Exclusions::default();
            for p in &accepted {
                if p.devices.len() > i + 1 && &p.devices[..=i] == root {
                    if let Some(l) = t.link_between(p.devices[i], p.devices[i + 1]) {
                        ex.links.insert(l);
                    }
                }
            }
            ex.devices.extend(root[..i].iter().copied());
            let Some(spur_path) = t.restricted_shortest_path(spur, b, metric, &ex) else {
                continue;
            };
            let mut devices = root.to_vec();
            devices.extend_from_slice(&spur_path.devices[1..]);
            if accepted.iter().any(|p| p.devices == devices) || pending.iter().any(|(_, p)| p.devices == devices) {
                continue;
            }
            let latency = t.sequence_latency(&devices).expect("adjacent hops");
            let path = Path { devices, latency };
            pending.push((path_cost(t, &path, metric), path));
        }
        if pending.is_empty() {
            break;
        }
        let best = pending
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| x.0.total_cmp(&y.0).then_with(|| x.1.devices.cmp(&y.1.devices)))
            .map(|(i, _)| i)
            .expect("nonempty");
        accepted.push(pending.swap_remove(best).1);
    }
    accepted
}

/// Up to `params.k` candidates from `poa` through every chain host (and
/// back to `poa` when the return leg is enabled), built from per-leg
/// k-shortest paths, sorted by latency then hop ids.
pub fn enumerate_paths(t: &Topology, poa: DeviceId, hosts: &[NodeId], params: &RoutingParams) -> Vec<PathCandidate> {
    let mut waypoints = vec![poa];
    waypoints.extend(hosts.iter().map(|&n| t.nodes[n].attached_device));
    if params.include_return {
        waypoints.push(poa);
    }
    let legs: Vec<Vec<Path>> = waypoints
        .windows(2)
        .map(|w| k_shortest_paths(t, w[0], w[1], params.k, Metric::Latency))
        .collect();
    if legs.iter().any(|l| l.is_empty()) {
        return Vec::new();
    }
    let processing = params.processing_latency * hosts.len() as f64;
    let mut out: Vec<PathCandidate> = Vec::new();
    let mut index = vec![0usize; legs.len()];
    loop {
        let mut hops = vec![poa];
        for (leg, &i) in legs.iter().zip(&index) {
            hops.extend_from_slice(&leg[i].devices[1..]);
        }
        if legs.is_empty() {
            hops = vec![poa];
        }
        let link_latency = t.sequence_latency(&hops).expect("legs are adjacent");
        let min_residual_bandwidth = hops
            .windows(2)
            .map(|w| t.links[t.link_between(w[0], w[1]).expect("adjacent")].bandwidth)
            .fold(f64::INFINITY, f64::min);
        out.push(PathCandidate { hosts: hosts.to_vec(), hops, latency: link_latency + processing, min_residual_bandwidth });
        // odometer over leg choices
        let mut pos = 0;
        loop {
            if pos == legs.len() {
                out.sort_by(|a, b| a.latency.total_cmp(&b.latency).then_with(|| a.hops.cmp(&b.hops)));
                out.dedup_by(|a, b| a.hops == b.hops);
                out.truncate(params.k);
                return out;
            }
            index[pos] += 1;
            if index[pos] < legs[pos].len() {
                break;
            }
            index[pos] = 0;
            pos += 1;
        }
    }
}

/// Memoised `enumerate_paths` results keyed by `(poa, hosts)`. Only valid
/// for the topology and parameters it was filled with.
#[derive(Debug, Default, Clone)]
pub struct PathCache {
    map: HashMap<(DeviceId, Vec<NodeId>), Arc<Vec<PathCandidate>>>,
}

impl PathCache {
    pub fn get(&mut self, t: &Topology, poa: DeviceId, hosts: &[NodeId], params: &RoutingParams) -> Arc<Vec<PathCandidate>> {
        self.map
            .entry((poa, hosts.to_vec()))
            .or_insert_with(|| Arc::new(enumerate_paths(t, poa, hosts, params)))
            .clone()
    }
}

/// Resources one allocation would consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Usage {
    /// `(link, bandwidth)`; a link traversed twice appears with twice the demand.
    pub links: Vec<(LinkId, f64)>,
    pub nodes: Vec<(NodeId, f64)>,
    pub instances: Vec<(InstanceId, f64)>,
    pub latency: f64,
}

impl Usage {
    pub fn of(t: &Topology, c: &PathCandidate, instances: &[InstanceId], r: &Request, params: &RoutingParams) -> Usage {
        let mut links: BTreeMap<LinkId, f64> = BTreeMap::new();
        for w in c.hops.windows(2) {
            let l = t.link_between(w[0], w[1]).expect("candidate hops are adjacent");
            *links.entry(l).or_default() += r.bandwidth_req;
        }
        let demand = params.stage_demand(r, c.hosts.len());
        let mut nodes: BTreeMap<NodeId, f64> = BTreeMap::new();
        for &h in &c.hosts {
            *nodes.entry(h).or_default() += demand;
        }
        let mut inst: BTreeMap<InstanceId, f64> = BTreeMap::new();
        for &i in instances {
            *inst.entry(i).or_default() += demand;
        }
        Usage {
            links: links.into_iter().collect(),
            nodes: nodes.into_iter().collect(),
            instances: inst.into_iter().collect(),
            latency: c.latency,
        }
    }

    /// `(link energy, compute energy)` of this usage.
    pub fn energy(&self, t: &Topology) -> (f64, f64) {
        let link = self.links.iter().map(|&(l, bw)| t.links[l].energy_per_unit * bw).sum();
        let compute = self.nodes.iter().map(|&(n, load)| t.nodes[n].energy_per_unit * load).sum();
        (link, compute)
    }

    pub fn total_energy(&self, t: &Topology) -> f64 {
        let (l, c) = self.energy(t);
        l + c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Violation {
    Bandwidth { link: LinkId },
    Capacity { node: NodeId },
    Instance { instance: InstanceId },
    Latency { latency: f64, budget: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Feasible,
    Infeasible(Violation),
}

impl Verdict {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Verdict::Feasible)
    }
}

const SLACK: f64 = 1e-9;

/// Current link, node and instance commitments.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceLedger {
    pub link_capacity: Vec<f64>,
    pub node_capacity: Vec<f64>,
    pub instance_capacity: BTreeMap<InstanceId, f64>,
    pub link_used: Vec<f64>,
    pub node_used: Vec<f64>,
    pub instance_used: BTreeMap<InstanceId, f64>,
}

impl ResourceLedger {
    pub fn new(t: &Topology, instance_capacity: BTreeMap<InstanceId, f64>) -> Self {
        ResourceLedger {
            link_capacity: t.links.iter().map(|l| l.bandwidth).collect(),
            node_capacity: t.nodes.iter().map(|n| n.capacity).collect(),
            link_used: vec![0.0; t.links.len()],
            node_used: vec![0.0; t.nodes.len()],
            instance_used: instance_capacity.keys().map(|&i| (i, 0.0)).collect(),
            instance_capacity,
        }
    }

    pub fn link_residual(&self, l: LinkId) -> f64 {
        self.link_capacity[l] - self.link_used[l]
    }

    pub fn node_residual(&self, n: NodeId) -> f64 {
        self.node_capacity[n] - self.node_used[n]
    }

    pub fn instance_residual(&self, i: InstanceId) -> f64 {
        self.instance_capacity.get(&i).copied().unwrap_or(0.0) - self.instance_used.get(&i).copied().unwrap_or(0.0)
    }

    pub fn check(&self, u: &Usage, budget: f64) -> Verdict {
        for &(l, need) in &u.links {
            if self.link_used[l] + need > self.link_capacity[l] + SLACK {
                return Verdict::Infeasible(Violation::Bandwidth { link: l });
            }
        }
        for &(n, need) in &u.nodes {
            if self.node_used[n] + need > self.node_capacity[n] + SLACK {
                return Verdict::Infeasible(Violation::Capacity { node: n });
            }
        }
        for &(i, need) in &u.instances {
            if need > self.instance_residual(i) + SLACK {
                return Verdict::Infeasible(Violation::Instance { instance: i });
            }
        }
        if u.latency > budget + SLACK {
            return Verdict::Infeasible(Violation::Latency { latency: u.latency, budget });
        }
        Verdict::Feasible
    }

    /// Commits `u` if it is feasible; leaves the ledger untouched otherwise.
    pub fn apply(&mut self, u: &Usage, budget: f64) -> Verdict {
        let v = self.check(u, budget);
        if v.is_feasible() {
            for &(l, need) in &u.links {
                self.link_used[l] += need;
            }
            for &(n, need) in &u.nodes {
                self.node_used[n] += need;
            }
            for &(i, need) in &u.instances {
                *self.instance_used.entry(i).or_default() += need;
            }
        }
        v
    }

    pub fn reset(&mut self) {
        self.link_used.iter_mut().for_each(|x| *x = 0.0);
        self.node_used.iter_mut().for_each(|x| *x = 0.0);
        self.instance_used.values_mut().for_each(|x| *x = 0.0);
    }

    /// True when nothing is committed beyond its capacity.
    pub fn is_consistent(&self) -> bool {
        self.link_used.iter().zip(&self.link_capacity).all(|(u, c)| *u <= c + SLACK && *u >= -SLACK)
            && self.node_used.iter().zip(&self.node_capacity).all(|(u, c)| *u <= c + SLACK && *u >= -SLACK)
            && self.instance_used.keys().all(|&i| self.instance_residual(i) >= -SLACK)
    }
}

pub fn check_feasibility(
    t: &Topology,
    c: &PathCandidate,
    instances: &[InstanceId],
    r: &Request,
    ledger: &ResourceLedger,
    params: &RoutingParams,
) -> Verdict {
    ledger.check(&Usage::of(t, c, instances, r, params), r.latency_budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    HopByHop,
    Waypoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Reach the device along the shortest path.
    Node(DeviceId),
    /// Cross the direct link to the device.
    Adjacency(DeviceId),
}

impl Segment {
    pub fn device(self) -> DeviceId {
        match self {
            Segment::Node(d) | Segment::Adjacency(d) => d,
        }
    }
}

/// Segment stack; the first element is the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentList {
    pub mode: SegmentMode,
    pub segments: Vec<Segment>,
}

impl fmt::Display for SegmentList {
    /// `SL[a>b>c]`; in waypoint mode adjacency segments are parenthesised.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::from("SL[");
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                s.push('>');
            }
            match (self.mode, seg) {
                (SegmentMode::Waypoint, Segment::Adjacency(d)) => {
                    let _ = write!(s, "({d})");
                }
                (_, seg) => {
                    let _ = write!(s, "{}", seg.device());
                }
            }
        }
        s.push(']');
        f.write_str(&s)
    }
}

fn hops_are_adjacent(t: &Topology, p: &[DeviceId]) -> bool {
    p.iter().all(|&d| d < t.size()) && p.windows(2).all(|w| t.link_between(w[0], w[1]).is_some())
}

/// Hop-by-hop mode lists every device, origin included. Waypoint mode
/// greedily emits the farthest device whose latency-shortest path from the
/// current position reproduces the next stretch of `p`, falling back to an
/// adjacency segment where no shortest path does.
pub fn encode_segments(p: &[DeviceId], mode: SegmentMode, t: &Topology) -> Result<SegmentList> {
    if p.is_empty() || !hops_are_adjacent(t, p) {
        return Err(Error::Forwarding("hop sequence is not a walk in the topology".into()));
    }
    let segments = match mode {
        SegmentMode::HopByHop => p.iter().map(|&d| Segment::Adjacency(d)).collect(),
        SegmentMode::Waypoint => {
            let mut out = Vec::new();
            let mut i = 0;
            while i + 1 < p.len() {
                let mut best = None;
                for j in (i + 1..p.len()).rev() {
                    if p[j] == p[i] {
                        continue;
                    }
                    let sp = t.shortest_path(p[i], p[j], Metric::Latency)?;
                    if sp.devices == p[i..=j] {
                        best = Some(j);
                        break;
                    }
                }
                match best {
                    Some(j) => {
                        out.push(Segment::Node(p[j]));
                        i = j;
                    }
                    None => {
                        out.push(Segment::Adjacency(p[i + 1]));
                        i += 1;
                    }
                }
            }
            if out.is_empty() {
                out.push(Segment::Node(p[0]));
            }
            out
        }
    };
    Ok(SegmentList { mode, segments })
}

/// Pop-and-forward: a device matching the top segment pops it, then the
/// packet heads for the next segment directly or along the shortest path.
pub fn simulate_forwarding(t: &Topology, s: &SegmentList, origin: DeviceId) -> Result<Vec<DeviceId>> {
    if s.segments.is_empty() {
        return Err(Error::Forwarding("empty segment list".into()));
    }
    if origin >= t.size() {
        return Err(Error::Forwarding(format!("unknown origin {origin}")));
    }
    let mut cur = origin;
    let mut out = vec![origin];
    for seg in &s.segments {
        let target = seg.device();
        if target == cur {
            continue;
        }
        match seg {
            Segment::Adjacency(d) => {
                if t.link_between(cur, *d).is_none() {
                    return Err(Error::Forwarding(format!("no link from {cur} to {d}")));
                }
                out.push(*d);
            }
            Segment::Node(d) => {
                let p = t.shortest_path(cur, *d, Metric::Latency)?;
                out.extend_from_slice(&p.devices[1..]);
            }
        }
        cur = target;
    }
    Ok(out)
}

pub const CANDIDATE_CSV_HEADER: &str = "poa,service,rank,hosts,hops,latency_ms,min_residual_bw,segments";

pub fn candidates_to_csv(t: &Topology, rows: &[(DeviceId, usize, Vec<PathCandidate>)]) -> Result<String> {
    let mut s = String::from(CANDIDATE_CSV_HEADER);
    s.push('\n');
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for (poa, service, cands) in rows {
        for (rank, c) in cands.iter().enumerate() {
            let sl = encode_segments(&c.hops, SegmentMode::Waypoint, t)?;
            let _ = writeln!(
                s,
                "{poa},{service},{rank},{},{},{},{},{sl}",
                join(&c.hosts),
                join(&c.hops),
                c.latency,
                c.min_residual_bandwidth
            );
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::services::Role;
    use crate::topology::test_support::toy;

    fn request(cap: f64, bw: f64, budget: f64) -> Request {
        Request {
            id: 0,
            user: 0,
            service: 0,
            role: Role::Primary,
            capacity_req: cap,
            bandwidth_req: bw,
            latency_budget: budget,
            packet_size: 1,
            profit: 10.0,
            slot: 0,
            linked: None,
        }
    }

    fn all_simple_paths(t: &Topology, a: DeviceId, b: DeviceId) -> Vec<Vec<DeviceId>> {
        fn dfs(t: &Topology, cur: DeviceId, b: DeviceId, seen: &mut Vec<DeviceId>, out: &mut Vec<Vec<DeviceId>>) {
            if cur == b {
                out.push(seen.clone());
                return;
            }
            for l in &t.links {
                let (x, y) = l.endpoints;
                let n = if x == cur { y } else if y == cur { x } else { continue };
                if !seen.contains(&n) {
                    seen.push(n);
                    dfs(t, n, b, seen, out);
                    seen.pop();
                }
            }
        }
        let mut out = Vec::new();
        dfs(t, a, b, &mut vec![a], &mut out);
        out
    }

    #[test]
    fn host_on_poa_node_is_processing_only() {
        let t = toy(3, &[(0, 1, 0.3), (1, 2, 0.3)]);
        let c = enumerate_paths(&t, 0, &[0], &RoutingParams::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].hops, vec![0]);
        assert!((c[0].latency - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fig4_three_feasible_paths() {
        // U1's PoA 0 reaches the core datacenter (device 4) through three
        // aggregation devices; polishing happens on NE4 (device 5).
        let t = toy(
            6,
            &[(0, 1, 0.1), (0, 2, 0.1), (0, 3, 0.1), (1, 4, 0.1), (2, 4, 0.1), (3, 4, 0.1), (4, 5, 0.1)],
        );
        let params = RoutingParams { k: 10, include_return: false, ..RoutingParams::default() };
        let c = enumerate_paths(&t, 0, &[4, 5], &params);
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].hops, vec![0, 1, 4, 5]);
        assert_eq!(c[1].hops, vec![0, 2, 4, 5]);
        assert_eq!(c[2].hops, vec![0, 3, 4, 5]);
        let ledger = ResourceLedger::new(&t, BTreeMap::from([(0, 20.0), (1, 20.0)]));
        let r = request(6.0, 5.0, 1.0);
        assert!(c.iter().all(|p| check_feasibility(&t, p, &[0, 1], &r, &ledger, &params).is_feasible()));
    }

    #[test]
    fn unbounded_k_on_ring_matches_brute_force() {
        let t = toy(4, &[(0, 1, 0.1), (1, 2, 0.2), (2, 3, 0.3), (0, 3, 0.4)]);
        let params = RoutingParams { k: usize::MAX, ..RoutingParams::default() };
        for host in 0..4 {
            let c = enumerate_paths(&t, 0, &[host], &params);
            let out = all_simple_paths(&t, 0, host).len();
            let back = all_simple_paths(&t, host, 0).len();
            assert_eq!(c.len(), out * back, "host {host}");
            assert!(c.windows(2).all(|w| w[0].latency <= w[1].latency));
        }
    }

    #[test]
    fn yen_matches_brute_force_order() {
        let t = toy(5, &[(0, 1, 0.1), (1, 2, 0.25), (0, 2, 0.4), (2, 3, 0.15), (1, 3, 0.45), (3, 4, 0.2), (0, 4, 0.9)]);
        let mut brute: Vec<(f64, Vec<DeviceId>)> = all_simple_paths(&t, 0, 4)
            .into_iter()
            .map(|p| (t.sequence_latency(&p).unwrap(), p))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let yen = k_shortest_paths(&t, 0, 4, usize::MAX, Metric::Latency);
        assert_eq!(yen.len(), brute.len());
        for (y, (lat, p)) in yen.iter().zip(&brute) {
            assert!((y.latency - lat).abs() < 1e-12);
            assert_eq!(&y.devices, p);
        }
    }

    #[test]
    fn zero_demand_is_feasible() {
        let t = toy(3, &[(0, 1, 0.3), (1, 2, 0.3)]);
        let params = RoutingParams::default();
        let mut ledger = ResourceLedger::new(&t, BTreeMap::from([(0, 20.0)]));
        ledger.instance_used.insert(0, 20.0);
        ledger.link_used = vec![300.0, 300.0];
        let r = request(0.0, 0.0, f64::INFINITY);
        for c in enumerate_paths(&t, 0, &[2], &params) {
            assert!(check_feasibility(&t, &c, &[0], &r, &ledger, &params).is_feasible());
        }
    }

    #[test]
    fn bandwidth_violation_reported_first() {
        let t = toy(2, &[(0, 1, 0.3)]);
        let params = RoutingParams { include_return: false, ..RoutingParams::default() };
        let mut ledger = ResourceLedger::new(&t, BTreeMap::from([(0, 20.0)]));
        ledger.link_used[0] = 291.0; // residual 9
        let c = &enumerate_paths(&t, 0, &[1], &params)[0];
        let v = check_feasibility(&t, c, &[0], &request(4.0, 10.0, 3.0), &ledger, &params);
        assert_eq!(v, Verdict::Infeasible(Violation::Bandwidth { link: 0 }));
    }

    #[test]
    fn latency_budget_boundary() {
        let t = toy(3, &[(0, 1, 0.5), (1, 2, 0.85)]);
        let params = RoutingParams::default();
        let c = &enumerate_paths(&t, 0, &[2], &params)[0];
        assert_eq!(c.hops, vec![0, 1, 2, 1, 0]);
        // hand sum: 0.5 + 0.85 + 0.85 + 0.5 link ms + 0.2 processing
        assert!((c.latency - 2.9).abs() < 1e-12);
        let ledger = ResourceLedger::new(&t, BTreeMap::from([(0, 20.0)]));
        assert!(check_feasibility(&t, c, &[0], &request(4.0, 2.0, 3.0), &ledger, &params).is_feasible());
        assert!(matches!(
            check_feasibility(&t, c, &[0], &request(4.0, 2.0, 2.8), &ledger, &params),
            Verdict::Infeasible(Violation::Latency { .. })
        ));
    }

    #[test]
    fn return_leg_doubles_link_demand() {
        let t = toy(2, &[(0, 1, 0.3)]);
        let params = RoutingParams::default();
        let c = &enumerate_paths(&t, 0, &[1], &params)[0];
        assert_eq!(c.hops, vec![0, 1, 0]);
        let u = Usage::of(&t, c, &[0], &request(5.0, 4.0, 3.0), &params);
        assert_eq!(u.links, vec![(0, 8.0)]);
        assert_eq!(u.energy(&t), (80.0, 50.0));
    }

    #[test]
    fn apply_is_atomic() {
        let t = toy(2, &[(0, 1, 0.3)]);
        let params = RoutingParams::default();
        let mut ledger = ResourceLedger::new(&t, BTreeMap::from([(0, 20.0)]));
        let c = &enumerate_paths(&t, 0, &[1], &params)[0];
        let r = request(8.0, 4.0, 3.0);
        let u = Usage::of(&t, c, &[0], &r, &params);
        assert!(ledger.apply(&u, r.latency_budget).is_feasible());
        assert!(ledger.apply(&u, r.latency_budget).is_feasible());
        let before = ledger.clone();
        assert_eq!(ledger.apply(&u, r.latency_budget), Verdict::Infeasible(Violation::Instance { instance: 0 }));
        assert_eq!(ledger, before);
        assert!(ledger.is_consistent());
    }

    #[test]
    fn hop_by_hop_two_devices() {
        let t = toy(2, &[(0, 1, 0.3)]);
        let s = encode_segments(&[0, 1], SegmentMode::HopByHop, &t).unwrap();
        assert_eq!(s.segments.len(), 2);
        assert_eq!(simulate_forwarding(&t, &s, 0).unwrap(), vec![0, 1]);
        assert_eq!(s.to_string(), "SL[0>1]");
    }

    #[test]
    fn shortest_path_compresses_to_destination() {
        let t = toy(4, &[(0, 1, 0.1), (1, 2, 0.1), (2, 3, 0.1), (0, 3, 0.9)]);
        let s = encode_segments(&[0, 1, 2, 3], SegmentMode::Waypoint, &t).unwrap();
        assert_eq!(s.segments, vec![Segment::Node(3)]);
        assert_eq!(simulate_forwarding(&t, &s, 0).unwrap(), vec![0, 1, 2, 3]);
        // the slow direct link needs an adjacency segment
        let s = encode_segments(&[0, 3, 2], SegmentMode::Waypoint, &t).unwrap();
        assert_eq!(s.segments, vec![Segment::Adjacency(3), Segment::Node(2)]);
        assert_eq!(s.to_string(), "SL[(3)>2]");
        assert_eq!(simulate_forwarding(&t, &s, 0).unwrap(), vec![0, 3, 2]);
    }

    #[test]
    fn forwarding_edge_cases() {
        let t = toy(2, &[(0, 1, 0.3)]);
        let s = SegmentList { mode: SegmentMode::Waypoint, segments: vec![Segment::Node(0)] };
        assert_eq!(simulate_forwarding(&t, &s, 0).unwrap(), vec![0]);
        let empty = SegmentList { mode: SegmentMode::Waypoint, segments: vec![] };
        assert!(matches!(simulate_forwarding(&t, &empty, 0), Err(Error::Forwarding(_))));
        let single = encode_segments(&[1], SegmentMode::Waypoint, &t).unwrap();
        assert_eq!(simulate_forwarding(&t, &single, 1).unwrap(), vec![1]);
    }
}
