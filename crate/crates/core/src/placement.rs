//! Service-instance placement: catalog of instances, exact branch-and-bound
//! joint solver, greedy and random placement, and context-change accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{parse_err, Error, Result};
use crate::routing::{PathCache, PathCandidate, ResourceLedger, RoutingParams, Usage};
use crate::services::{CapacityClass, Request, ServiceId, ServiceRegistry};
use crate::topology::{Metric, NodeId, Topology};

pub type InstanceId = usize;

pub const PLACEMENT_FORMAT: &str = "# acnc-placement v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: InstanceId,
    pub service: ServiceId,
    pub stage: usize,
    pub replica: usize,
    pub label: String,
    pub class: CapacityClass,
    pub capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replication {
    /// The same number of replicas for every chain stage.
    Fixed(usize),
    /// Replicas sized from the services' expected demand, scaled down so the
    /// catalog fits in `fill` of the total node capacity.
    DemandDriven { mean_capacity_req: u32, fill_percent: u32 },
}

/// Every instance the registered services need, numbered densely.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceCatalog {
    pub instances: Vec<Instance>,
    /// `service -> stage -> replica instance ids`.
    stages: BTreeMap<ServiceId, Vec<Vec<InstanceId>>>,
}

impl InstanceCatalog {
    pub fn build(registry: &ServiceRegistry, replication: Replication, topology: &Topology) -> Result<Self> {
        let total_capacity: f64 = topology.nodes.iter().map(|n| n.capacity).sum();
        let replicas_for = |ic: f64, demand: f64| -> usize {
            match replication {
                Replication::Fixed(n) => n.max(1),
                Replication::DemandDriven { mean_capacity_req, .. } => {
                    ((demand * mean_capacity_req as f64) / ic).ceil().max(1.0) as usize
                }
            }
        };
        let mut wanted: Vec<(ServiceId, usize, usize)> = Vec::new();
        let mut need = 0.0;
        for d in registry.iter() {
            let r = replicas_for(d.instance_capacity, d.expected_demand);
            need += r as f64 * d.instance_capacity * d.chain.len() as f64;
            wanted.push((d.id, d.chain.len(), r));
        }
        if let Replication::DemandDriven { fill_percent, .. } = replication {
            let budget = total_capacity * fill_percent as f64 / 100.0;
            if need > budget {
                let scale = budget / need;
                for w in &mut wanted {
                    w.2 = ((w.2 as f64 * scale).floor() as usize).max(1);
                }
            }
        }
        let mut catalog = InstanceCatalog::default();
        for (service, len, replicas) in wanted {
            let d = registry.get(service).expect("registered");
            let mut per_stage = Vec::with_capacity(len);
            for (stage, spec) in d.chain.iter().enumerate() {
                let mut ids = Vec::with_capacity(replicas);
                for replica in 0..replicas {
                    let id = catalog.instances.len();
                    catalog.instances.push(Instance {
                        id,
                        service,
                        stage,
                        replica,
                        label: spec.label.clone(),
                        class: spec.class,
                        capacity: d.instance_capacity,
                    });
                    ids.push(id);
                }
                per_stage.push(ids);
            }
            catalog.stages.insert(service, per_stage);
        }
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn stages(&self, service: ServiceId) -> &[Vec<InstanceId>] {
        self.stages.get(&service).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn capacities(&self) -> BTreeMap<InstanceId, f64> {
        self.instances.iter().map(|i| (i.id, i.capacity)).collect()
    }
}

fn median_capacity(t: &Topology) -> f64 {
    let mut caps: Vec<f64> = t.nodes.iter().map(|n| n.capacity).collect();
    caps.sort_by(f64::total_cmp);
    let m = caps.len();
    if m % 2 == 1 {
        caps[m / 2]
    } else {
        (caps[m / 2 - 1] + caps[m / 2]) / 2.0
    }
}

/// Nodes allowed to host an instance of the given capacity class.
pub fn eligible_nodes(t: &Topology, class: CapacityClass) -> Vec<NodeId> {
    let median = median_capacity(t);
    t.nodes
        .iter()
        .filter(|n| match class {
            CapacityClass::Any => true,
            CapacityClass::High => n.capacity >= median,
            CapacityClass::Low => n.capacity <= median,
        })
        .map(|n| n.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Placement {
    pub bindings: BTreeMap<InstanceId, NodeId>,
    /// Instance capacity reserved on each node.
    pub committed: BTreeMap<NodeId, f64>,
}

impl Placement {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, t: &Topology, inst: &Instance, node: NodeId) -> Result<()> {
        if self.bindings.contains_key(&inst.id) {
            return Err(Error::Placement(format!("instance {} is already bound", inst.id)));
        }
        let n = t.nodes.get(node).ok_or_else(|| Error::Placement(format!("unknown node {node}")))?;
        let used = self.committed.get(&node).copied().unwrap_or(0.0);
        if used + inst.capacity > n.capacity + 1e-9 {
            return Err(Error::Placement(format!("node {node} cannot host instance {}", inst.id)));
        }
        self.bindings.insert(inst.id, node);
        *self.committed.entry(node).or_default() += inst.capacity;
        Ok(())
    }

    fn unbind(&mut self, inst: &Instance) {
        if let Some(node) = self.bindings.remove(&inst.id) {
            let c = self.committed.get_mut(&node).expect("committed entry");
            *c -= inst.capacity;
            if c.abs() < 1e-12 {
                self.committed.remove(&node);
            }
        }
    }

    pub fn node_of(&self, i: InstanceId) -> Option<NodeId> {
        self.bindings.get(&i).copied()
    }

    pub fn room(&self, t: &Topology, node: NodeId) -> f64 {
        t.nodes[node].capacity - self.committed.get(&node).copied().unwrap_or(0.0)
    }

    pub fn respects_capacity(&self, t: &Topology) -> bool {
        self.committed.iter().all(|(&n, &c)| c <= t.nodes[n].capacity + 1e-9)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{PLACEMENT_FORMAT}\n# bind <instance> <node>\n");
        for (i, n) in &self.bindings {
            let _ = writeln!(s, "bind {i} {n}");
        }
        s
    }

    pub fn from_text(text: &str, t: &Topology, catalog: &InstanceCatalog) -> Result<Placement> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == PLACEMENT_FORMAT => {}
            _ => return Err(parse_err(1, format!("expected header `{PLACEMENT_FORMAT}`"))),
        }
        let mut p = Placement::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let (inst, node) = match f.as_slice() {
                ["bind", a, b] => (
                    a.parse::<usize>().map_err(|e| parse_err(i + 1, e.to_string()))?,
                    b.parse::<usize>().map_err(|e| parse_err(i + 1, e.to_string()))?,
                ),
                _ => return Err(parse_err(i + 1, "expected `bind <instance> <node>`")),
            };
            let inst = catalog
                .instances
                .get(inst)
                .ok_or_else(|| parse_err(i + 1, format!("unknown instance {inst}")))?;
            p.bind(t, inst, node)?;
        }
        Ok(p)
    }
}

/// Energy charged when an instance is added, removed or migrated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionRates(pub BTreeMap<InstanceId, f64>);

impl TransitionRates {
    pub fn draw(catalog: &InstanceCatalog, range: (u32, u32), rng: &mut impl Rng) -> Self {
        TransitionRates(
            catalog
                .instances
                .iter()
                .map(|i| (i.id, rng.gen_range(range.0..=range.1) as f64))
                .collect(),
        )
    }

    pub fn rate(&self, i: InstanceId) -> f64 {
        self.0.get(&i).copied().unwrap_or(0.0)
    }
}

pub fn transition_cost(old: &Placement, new: &Placement, rates: &TransitionRates) -> f64 {
    let mut cost = 0.0;
    for (i, n) in &new.bindings {
        if old.bindings.get(i) != Some(n) {
            cost += rates.rate(*i);
        }
    }
    for i in old.bindings.keys() {
        if !new.bindings.contains_key(i) {
            cost += rates.rate(*i);
        }
    }
    cost
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementObjective {
    pub profit_weight: f64,
    /// Scalarisation weight on energy.
    pub energy_weight: f64,
    pub include_transition: bool,
}

impl Default for PlacementObjective {
    fn default() -> Self {
        PlacementObjective { profit_weight: 1.0, energy_weight: 0.01, include_transition: false }
    }
}

impl PlacementObjective {
    pub fn value(&self, profit: f64, energy: f64) -> f64 {
        self.profit_weight * profit - self.energy_weight * energy
    }
}

/// One way to serve a request: a replica per chain stage plus a path.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub instances: Vec<InstanceId>,
    pub candidate: PathCandidate,
}

/// Every (instance chain, path candidate) pair available to `r` under `p`,
/// ordered by instance ids then candidate rank.
pub fn enumerate_actions(
    t: &Topology,
    catalog: &InstanceCatalog,
    p: &Placement,
    r: &Request,
    routing: &RoutingParams,
    cache: &mut PathCache,
) -> Vec<Action> {
    let stages: Vec<Vec<InstanceId>> = catalog
        .stages(r.service)
        .iter()
        .map(|reps| reps.iter().copied().filter(|i| p.node_of(*i).is_some()).collect())
        .collect();
    if stages.is_empty() || stages.iter().any(|s| s.is_empty()) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; stages.len()];
    loop {
        let chain: Vec<InstanceId> = stages.iter().zip(&idx).map(|(s, &i)| s[i]).collect();
        let hosts: Vec<NodeId> = chain.iter().map(|&i| p.node_of(i).expect("filtered")).collect();
        for c in cache.get(t, r.user, &hosts, routing).iter() {
            out.push(Action { instances: chain.clone(), candidate: c.clone() });
        }
        let mut pos = stages.len();
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < stages[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactLimits {
    /// Upper bound on the size of the instance-placement search space.
    pub max_placements: u128,
    pub max_requests: usize,
}

impl Default for ExactLimits {
    fn default() -> Self {
        ExactLimits { max_placements: 250_000, max_requests: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SearchStats {
    pub placement_nodes: u64,
    pub placement_prunes: u64,
    pub assignment_nodes: u64,
    pub assignment_prunes: u64,
    pub leaves: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub placement: Placement,
    /// Chosen action per request, aligned with the input order.
    pub assignments: Vec<Option<Action>>,
    pub objective: f64,
    pub profit: f64,
    pub link_energy: f64,
    pub compute_energy: f64,
    pub transition_energy: f64,
    pub stats: SearchStats,
}

impl ExactSolution {
    pub fn served(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_some()).count()
    }
}

pub struct ExactProblem<'a> {
    pub topology: &'a Topology,
    pub registry: &'a ServiceRegistry,
    pub catalog: &'a InstanceCatalog,
    pub requests: &'a [Request],
    pub objective: PlacementObjective,
    pub routing: &'a RoutingParams,
    /// Placement being replaced; only used when transitions are charged.
    pub previous: Option<&'a Placement>,
    pub rates: &'a TransitionRates,
}

impl ExactProblem<'_> {
    /// Number of complete instance placements the search could visit.
    pub fn placement_space(&self) -> u128 {
        self.catalog
            .instances
            .iter()
            .map(|i| eligible_nodes(self.topology, i.class).len() as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX)
    }

    pub fn check_limits(&self, limits: &ExactLimits) -> Result<()> {
        if self.requests.len() > limits.max_requests {
            return Err(Error::Tractability(format!(
                "{} requests exceed the exact-solver limit of {}",
                self.requests.len(),
                limits.max_requests
            )));
        }
        let space = self.placement_space();
        if space > limits.max_placements {
            return Err(Error::Tractability(format!(
                "placement space {space} exceeds the exact-solver limit of {}",
                limits.max_placements
            )));
        }
        Ok(())
    }

    /// Transition energy already implied by the bound instances of a
    /// partial placement.
    fn partial_transition(&self, p: &Placement) -> f64 {
        match (self.objective.include_transition, self.previous) {
            (true, Some(old)) => p
                .bindings
                .iter()
                .filter(|(i, n)| old.bindings.get(i) != Some(n))
                .map(|(i, _)| self.rates.rate(*i))
                .sum(),
            _ => 0.0,
        }
    }

    fn transition(&self, p: &Placement) -> f64 {
        match (self.objective.include_transition, self.previous) {
            (true, Some(old)) => transition_cost(old, p, self.rates),
            _ => 0.0,
        }
    }
}

struct Scored {
    action: Action,
    usage: Usage,
    profit: f64,
    energy: (f64, f64),
    value: f64,
}

struct Search<'p, 'a> {
    pb: &'p ExactProblem<'a>,
    order: Vec<InstanceId>,
    eligible: Vec<Vec<NodeId>>,
    latency_lb: Vec<Vec<f64>>,
    link_rate_lb: Vec<Vec<f64>>,
    cache: PathCache,
    stats: SearchStats,
    best: Option<ExactSolution>,
}

fn slack(x: f64) -> f64 {
    1e-9 * x.abs().max(1.0)
}

fn by_ratio(items: &mut Vec<(f64, f64)>) {
    items.retain(|&(_, v)| v > 0.0);
    items.sort_by(|a, b| {
        let ra = if a.0 > 0.0 { a.1 / a.0 } else { f64::INFINITY };
        let rb = if b.0 > 0.0 { b.1 / b.0 } else { f64::INFINITY };
        rb.total_cmp(&ra)
    });
}

fn fractional(sorted: &[(f64, f64)], capacity: f64) -> f64 {
    let mut room = capacity;
    let mut total = 0.0;
    for &(w, v) in sorted {
        if w <= room {
            room -= w;
            total += v;
        } else {
            if w > 0.0 {
                total += v * (room / w).max(0.0);
            }
            break;
        }
    }
    total
}

/// Optimal 0/1 knapsack value, with the same capacity slack as the ledger.
fn knapsack_exact(mut items: Vec<(f64, f64)>, capacity: f64) -> f64 {
    fn go(items: &[(f64, f64)], room: f64, acc: f64, best: &mut f64) {
        *best = best.max(acc);
        let Some((&(w, v), rest)) = items.split_first() else { return };
        if acc + fractional(items, room + 1e-9) <= *best {
            return;
        }
        if w <= room + 1e-9 {
            go(rest, room - w, acc + v, best);
        }
        go(rest, room, acc, best);
    }
    by_ratio(&mut items);
    let mut best = 0.0;
    go(&items, capacity, 0.0, &mut best);
    best
}

impl<'p, 'a> Search<'p, 'a> {
    fn new(pb: &'p ExactProblem<'a>) -> Self {
        let t = pb.topology;
        let order: Vec<InstanceId> = pb.catalog.instances.iter().map(|i| i.id).collect();
        let eligible = pb.catalog.instances.iter().map(|i| eligible_nodes(t, i.class)).collect();
        let none = crate::topology::Exclusions::default();
        let latency_lb = (0..t.size()).map(|d| t.distances_to(d, Metric::Latency, &none)).collect();
        let link_rate_lb = (0..t.size()).map(|d| t.distances_to(d, Metric::Energy, &none)).collect();
        Search {
            pb,
            order,
            eligible,
            latency_lb,
            link_rate_lb,
            cache: PathCache::default(),
            stats: SearchStats::default(),
            best: None,
        }
    }

    fn incumbent(&self) -> f64 {
        self.best.as_ref().map(|b| b.objective).unwrap_or(f64::NEG_INFINITY)
    }

    /// Optimistic objective of any completion of the partial placement.
    fn placement_bound(&self, p: &Placement) -> f64 {
        let pb = self.pb;
        let t = pb.topology;
        let lambda = pb.objective.energy_weight;
        let mut total = 0.0;
        for d in pb.registry.iter() {
            let stages = pb.catalog.stages(d.id);
            if stages.is_empty() {
                continue;
            }
            let stage_capacity = stages
                .iter()
                .map(|reps| reps.iter().map(|&i| pb.catalog.instances[i].capacity).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            // devices that could host each stage under any completion
            let layers: Vec<Vec<(usize, f64)>> = stages
                .iter()
                .map(|reps| {
                    let mut nodes: Vec<NodeId> = Vec::new();
                    for &i in reps {
                        match p.node_of(i) {
                            Some(n) => nodes.push(n),
                            None => nodes.extend(&self.eligible[i]),
                        }
                    }
                    nodes.sort_unstable();
                    nodes.dedup();
                    nodes.iter().map(|&n| (t.nodes[n].attached_device, t.nodes[n].energy_per_unit)).collect()
                })
                .collect();
            let mut items = Vec::new();
            for r in pb.requests.iter().filter(|r| r.service == d.id) {
                let demand = pb.routing.stage_demand(r, stages.len());
                // min-plus sweeps along the chain, one for latency and one for energy
                let mut lat: Vec<(usize, f64)> = vec![(r.user, 0.0)];
                let mut en: Vec<(usize, f64)> = vec![(r.user, 0.0)];
                for layer in &layers {
                    lat = layer
                        .iter()
                        .map(|&(dv, _)| (dv, lat.iter().map(|&(a, c)| c + self.latency_lb[dv][a]).fold(f64::INFINITY, f64::min)))
                        .collect();
                    en = layer
                        .iter()
                        .map(|&(dv, rate)| {
                            let reach = en
                                .iter()
                                .map(|&(a, c)| c + self.link_rate_lb[dv][a] * r.bandwidth_req)
                                .fold(f64::INFINITY, f64::min);
                            (dv, reach + rate * demand)
                        })
                        .collect();
                }
                let close = |v: &[(usize, f64)], w: &dyn Fn(usize) -> f64| {
                    v.iter().map(|&(a, c)| c + if pb.routing.include_return { w(a) } else { 0.0 }).fold(f64::INFINITY, f64::min)
                };
                let latency_lb = close(&lat, &|a| self.latency_lb[r.user][a]) + pb.routing.processing_latency * stages.len() as f64;
                let energy_lb = close(&en, &|a| self.link_rate_lb[r.user][a] * r.bandwidth_req);
                if latency_lb > r.latency_budget + 1e-9 || !energy_lb.is_finite() {
                    continue;
                }
                let value = pb.objective.profit_weight * r.profit - lambda * energy_lb;
                items.push((demand, value));
            }
            total += knapsack_exact(items, stage_capacity);
        }
        total - lambda * pb.partial_transition(p)
    }

    fn place(&mut self, depth: usize, p: &mut Placement) {
        self.stats.placement_nodes += 1;
        if depth == self.order.len() {
            self.assign_all(p);
            return;
        }
        let inc = self.incumbent();
        if inc.is_finite() && self.placement_bound(p) < inc - slack(inc) {
            self.stats.placement_prunes += 1;
            return;
        }
        let inst = &self.pb.catalog.instances[self.order[depth]];
        for k in 0..self.eligible[depth].len() {
            let node = self.eligible[depth][k];
            if p.room(self.pb.topology, node) + 1e-9 < inst.capacity {
                continue;
            }
            p.bind(self.pb.topology, inst, node).expect("room checked");
            self.place(depth + 1, p);
            p.unbind(inst);
        }
    }

    fn assign_all(&mut self, p: &Placement) {
        let pb = self.pb;
        let t = pb.topology;
        let empty = ResourceLedger::new(t, pb.catalog.capacities());
        let mut options: Vec<Vec<Scored>> = Vec::with_capacity(pb.requests.len());
        for r in pb.requests {
            let mut opts: Vec<Scored> = enumerate_actions(t, pb.catalog, p, r, pb.routing, &mut self.cache)
                .into_iter()
                .filter_map(|a| {
                    let usage = Usage::of(t, &a.candidate, &a.instances, r, pb.routing);
                    if !empty.check(&usage, r.latency_budget).is_feasible() {
                        return None;
                    }
                    let energy = usage.energy(t);
                    let value = pb.objective.value(r.profit, energy.0 + energy.1);
                    Some(Scored { action: a, usage, profit: r.profit, energy, value })
                })
                .collect();
            opts.sort_by(|a, b| b.value.total_cmp(&a.value));
            options.push(opts);
        }
        let tail: Vec<(ServiceId, f64, f64)> = pb
            .requests
            .iter()
            .zip(&options)
            .map(|(r, o)| {
                let demand = pb.routing.stage_demand(r, pb.catalog.stages(r.service).len());
                (r.service, demand, o.first().map(|s| s.value.max(0.0)).unwrap_or(0.0))
            })
            .collect();
        let mut ledger = empty;
        let mut chosen: Vec<Option<usize>> = vec![None; options.len()];
        self.assign(0, &options, &tail, &mut ledger, &mut chosen, 0.0, p);
    }

    /// Best value the remaining requests could add: per service, a 0/1
    /// knapsack of their best option values within the residual capacity of
    /// the service's tightest stage.
    fn tail_bound(&self, tail: &[(ServiceId, f64, f64)], ledger: &ResourceLedger) -> f64 {
        let mut by_service: BTreeMap<ServiceId, Vec<(f64, f64)>> = BTreeMap::new();
        for &(s, w, v) in tail {
            if v > 0.0 {
                by_service.entry(s).or_default().push((w, v));
            }
        }
        by_service
            .into_iter()
            .map(|(s, items)| {
                let room = self
                    .pb
                    .catalog
                    .stages(s)
                    .iter()
                    .map(|reps| reps.iter().map(|&i| ledger.instance_residual(i).max(0.0)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                knapsack_exact(items, room)
            })
            .sum()
    }

    #[allow(clippy::too_many_arguments)]
    fn assign(
        &mut self,
        i: usize,
        options: &[Vec<Scored>],
        tail: &[(ServiceId, f64, f64)],
        ledger: &mut ResourceLedger,
        chosen: &mut Vec<Option<usize>>,
        approx: f64,
        p: &Placement,
    ) {
        self.stats.assignment_nodes += 1;
        let lambda = self.pb.objective.energy_weight;
        let transition = self.pb.transition(p);
        let inc = self.incumbent();
        let bound = approx - lambda * transition + self.tail_bound(&tail[i..], ledger);
        if inc.is_finite() && bound < inc - slack(inc) {
            self.stats.assignment_prunes += 1;
            return;
        }
        if i == options.len() {
            self.stats.leaves += 1;
            // canonical evaluation in request order
            let mut profit = 0.0;
            let mut link = 0.0;
            let mut compute = 0.0;
            for (r, c) in options.iter().zip(chosen.iter()) {
                if let Some(k) = c {
                    profit += r[*k].profit;
                    link += r[*k].energy.0;
                    compute += r[*k].energy.1;
                }
            }
            let objective = self.pb.objective.value(profit, link + compute + transition);
            if objective > inc {
                self.best = Some(ExactSolution {
                    placement: p.clone(),
                    assignments: options
                        .iter()
                        .zip(chosen.iter())
                        .map(|(r, c)| c.map(|k| r[k].action.clone()))
                        .collect(),
                    objective,
                    profit,
                    link_energy: link,
                    compute_energy: compute,
                    transition_energy: transition,
                    stats: SearchStats::default(),
                });
            }
            return;
        }
        let budget = self.pb.requests[i].latency_budget;
        for k in 0..options[i].len() {
            let s = &options[i][k];
            if !ledger.apply(&s.usage, budget).is_feasible() {
                continue;
            }
            chosen[i] = Some(k);
            self.assign(i + 1, options, tail, ledger, chosen, approx + s.value, p);
            chosen[i] = None;
            release(ledger, &s.usage);
        }
        self.assign(i + 1, options, tail, ledger, chosen, approx, p);
    }
}

fn release(ledger: &mut ResourceLedger, u: &Usage) {
    for &(l, x) in &u.links {
        ledger.link_used[l] -= x;
    }
    for &(n, x) in &u.nodes {
        ledger.node_used[n] -= x;
    }
    for &(i, x) in &u.instances {
        *ledger.instance_used.get_mut(&i).expect("applied") -= x;
    }
}

/// Certified-optimal joint placement and assignment. Instances are placed
/// by branch and bound (bound: per-service fractional knapsack of optimistic
/// request values under the partial placement); each complete placement is
/// followed by a branch-and-bound over request assignments.
pub fn solve_exact(pb: &ExactProblem<'_>, limits: &ExactLimits) -> Result<ExactSolution> {
    pb.check_limits(limits)?;
    let mut search = Search::new(pb);
    let mut p = Placement::new();
    search.place(0, &mut p);
    let stats = search.stats;
    let mut best = search.best.ok_or_else(|| {
        Error::Placement("no placement of the instance catalog fits the node capacities".into())
    })?;
    best.stats = stats;
    Ok(best)
}

/// Places instances in descending forecast-demand order, each on the
/// eligible node with room and the lowest compute energy rate.
pub fn place_greedy(
    t: &Topology,
    catalog: &InstanceCatalog,
    forecast: &BTreeMap<ServiceId, f64>,
) -> Result<Placement> {
    let mut order: Vec<&Instance> = catalog.instances.iter().collect();
    order.sort_by(|a, b| {
        let da = forecast.get(&a.service).copied().unwrap_or(0.0);
        let db = forecast.get(&b.service).copied().unwrap_or(0.0);
        db.total_cmp(&da).then(a.id.cmp(&b.id))
    });
    let mut p = Placement::new();
    for inst in order {
        let node = eligible_nodes(t, inst.class)
            .into_iter()
            .filter(|&n| p.room(t, n) + 1e-9 >= inst.capacity)
            .min_by(|&a, &b| t.nodes[a].energy_per_unit.total_cmp(&t.nodes[b].energy_per_unit).then(a.cmp(&b)))
            .ok_or_else(|| Error::Placement(format!("no node can host instance {} ({})", inst.id, inst.label)))?;
        p.bind(t, inst, node)?;
    }
    Ok(p)
}

/// Uniformly random eligible node with room for every instance.
pub fn place_random(t: &Topology, catalog: &InstanceCatalog, rng: &mut impl Rng) -> Result<Placement> {
    let mut p = Placement::new();
    for inst in &catalog.instances {
        let nodes: Vec<NodeId> = eligible_nodes(t, inst.class)
            .into_iter()
            .filter(|&n| p.room(t, n) + 1e-9 >= inst.capacity)
            .collect();
        if nodes.is_empty() {
            return Err(Error::Placement(format!("no node can host instance {} ({})", inst.id, inst.label)));
        }
        let node = nodes[rng.gen_range(0..nodes.len())];
        p.bind(t, inst, node)?;
    }
    Ok(p)
}
