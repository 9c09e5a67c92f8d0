//! Slot-by-slot closed loop: request admission, resource accounting, state
//! pipeline, context recognition, prediction and re-placement, plus the
//! experiment sweep and its report files.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::agents::{
    compute_reward, encode_features, feature_len, select_action, ActionSet, Agent, FeatureMode, Outcome, Policy,
    StateView,
};
use crate::config::ExperimentConfig;
use crate::context::{art_update, classify, context_of_placement, embed_state, ContextCodebook, ContextId, MinMaxNormalizer};
use crate::error::{Error, Result};
use crate::placement::{
    enumerate_actions, place_greedy, place_random, solve_exact, transition_cost, Action, ExactProblem,
    InstanceCatalog, InstanceId, Placement, PlacementObjective, TransitionRates,
};
use crate::predictor::{detect_infeasibility, predict_next};
use crate::rng::{substream, Stream};
use crate::routing::{PathCache, ResourceLedger, Usage};
use crate::services::{generate_requests, synthetic_services, Request, RequestId, ServiceId, ServiceRegistry, ServiceReport};
use crate::state::{
    build_system_state, computing_domain_state, network_domain_state, reduce_domain_state, reduce_resource_state,
    DomainState, Indicator, LoadSnapshot, LongTermResourceState, MemoryBank, Owner, ResourceDims,
    ShortTermResourceState, Slot, Statistic, SystemState, RESOURCE_METRICS,
};
use crate::topology::{generate_topology, DeviceId, NodeId, Topology};

/// Resource indicators: mean and peak offered mbps, mean latency budget.
pub const RESOURCE_INDICATORS: [Indicator; 3] =
    [Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 0), Indicator::new(Statistic::Mean, 2)];

/// Domain indicators: mean and peak utilization, mean offered mbps.
pub const DOMAIN_INDICATORS: [Indicator; 3] =
    [Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 0), Indicator::new(Statistic::Mean, 3)];

pub const STATE_WIDTH: usize = DOMAIN_INDICATORS.len();

/// Infrastructure and services of one experiment cell.
#[derive(Debug, Clone)]
pub struct World {
    pub topology: Topology,
    pub registry: ServiceRegistry,
    pub catalog: InstanceCatalog,
    pub rates: TransitionRates,
    pub poas: Vec<DeviceId>,
    pub cache: PathCache,
}

impl World {
    pub fn build(cfg: &ExperimentConfig, size: usize) -> Result<World> {
        let topology = generate_topology(size, &cfg.tier_plan(), &cfg.topology, cfg.seed)?;
        World::on(cfg, topology)
    }

    pub fn on(cfg: &ExperimentConfig, topology: Topology) -> Result<World> {
        let mut registry = synthetic_services(cfg.services, cfg.max_chain, &cfg.qos, cfg.instance_capacity, cfg.seed)?;
        let demand = cfg.requests_per_slot as f64 / cfg.services as f64;
        for id in registry.ids() {
            registry.get_mut(id).expect("listed id").expected_demand = demand;
        }
        World::with(cfg, topology, registry)
    }

    pub fn with(cfg: &ExperimentConfig, topology: Topology, registry: ServiceRegistry) -> Result<World> {
        let catalog = InstanceCatalog::build(&registry, cfg.replication, &topology)?;
        let rates = TransitionRates::draw(&catalog, cfg.context_change, &mut substream(cfg.seed, Stream::TransitionRates));
        let poas = topology.poas();
        Ok(World { topology, registry, catalog, rates, poas, cache: PathCache::default() })
    }

    pub fn requests(&self, cfg: &ExperimentConfig, slot: u64) -> Result<Vec<Request>> {
        let mut r = generate_requests(slot, &self.registry, &self.poas, cfg.requests_per_slot, cfg.seed)?;
        for x in &mut r {
            x.packet_size = cfg.packet_size;
        }
        Ok(r)
    }

    fn forecast(&self, requests: &[Request]) -> BTreeMap<ServiceId, f64> {
        let mut f: BTreeMap<ServiceId, f64> = self.registry.iter().map(|d| (d.id, d.expected_demand)).collect();
        if !requests.is_empty() {
            f.values_mut().for_each(|v| *v = 0.0);
            for r in requests {
                *f.entry(r.service).or_default() += 1.0;
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Warmup { index: usize, of: usize },
    Measured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub size: usize,
    pub policy: Policy,
    pub slot: u64,
    pub served: usize,
    pub rejected: usize,
    pub profit: f64,
    pub link_energy: f64,
    pub compute_energy: f64,
    pub transition_energy: f64,
    pub context: Option<ContextId>,
    pub contexts: usize,
    pub predicted_violations: usize,
    pub observed_violations: usize,
    pub replaced: bool,
}

impl SlotMetrics {
    pub fn total_energy(&self) -> f64 {
        self.link_energy + self.compute_energy + self.transition_energy
    }

    /// Absent when nothing was served.
    pub fn energy_per_served(&self) -> Option<f64> {
        (self.served > 0).then(|| self.total_energy() / self.served as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestLog {
    pub size: usize,
    pub policy: Policy,
    pub slot: u64,
    pub request: RequestId,
    pub service: ServiceId,
    pub served: bool,
    pub latency: f64,
    pub latency_budget: f64,
    pub profit: f64,
    pub bandwidth_req: f64,
    pub capacity_req: f64,
    pub hops: Vec<DeviceId>,
    pub hosts: Vec<NodeId>,
    pub instances: Vec<InstanceId>,
}

#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub metrics: SlotMetrics,
    pub logs: Vec<RequestLog>,
    pub ledger: ResourceLedger,
    pub state: SystemState,
}

/// One admitted allocation.
#[derive(Debug, Clone)]
struct Admitted {
    request: Request,
    action: Action,
    usage: Usage,
}

type HistKey = (u8, usize, usize, usize);

/// Everything one policy carries from slot to slot.
#[derive(Debug, Clone)]
pub struct PolicyRunner {
    pub policy: Policy,
    pub placement: Placement,
    placed: bool,
    pub codebook: ContextCodebook,
    normalizer: MinMaxNormalizer,
    pub context: Option<ContextId>,
    context_placements: BTreeMap<ContextId, Placement>,
    pub bank: MemoryBank,
    device_hist: Vec<VecDeque<ShortTermResourceState>>,
    node_hist: Vec<VecDeque<ShortTermResourceState>>,
    domain_hist: VecDeque<(DomainState, DomainState)>,
    last_seen: HashMap<HistKey, Slot>,
    pub agents: BTreeMap<(DeviceId, Option<ContextId>), Agent>,
    last_agent: BTreeMap<DeviceId, Option<ContextId>>,
    clock: Slot,
}

impl PolicyRunner {
    /// Computes the initial placement: random for RND, greedy on expected
    /// demand for the others. The exact policy places per slot.
    pub fn new(world: &World, cfg: &ExperimentConfig, policy: Policy) -> Result<Self> {
        let placement = match policy {
            Policy::Rnd => {
                place_random(&world.topology, &world.catalog, &mut substream(cfg.seed, Stream::Placement(u64::MAX)))?
            }
            Policy::Opt => Placement::new(),
            _ => place_greedy(&world.topology, &world.catalog, &world.forecast(&[]))?,
        };
        let mut r = PolicyRunner {
            policy,
            placement,
            placed: policy != Policy::Opt,
            codebook: ContextCodebook::new(cfg.vigilance, cfg.update_rate, cfg.contexts)?,
            normalizer: MinMaxNormalizer::new(),
            context: None,
            context_placements: BTreeMap::new(),
            bank: MemoryBank::new(cfg.memory_bank),
            device_hist: Vec::new(),
            node_hist: Vec::new(),
            domain_hist: VecDeque::new(),
            last_seen: HashMap::new(),
            agents: BTreeMap::new(),
            last_agent: BTreeMap::new(),
            clock: 0,
        };
        r.reset_history(world);
        Ok(r)
    }

    /// Drops every topology-shaped history; agents are kept.
    pub fn reset_history(&mut self, world: &World) {
        self.device_hist = vec![VecDeque::new(); world.topology.size()];
        self.node_hist = vec![VecDeque::new(); world.topology.nodes.len()];
        self.domain_hist.clear();
        self.last_seen.clear();
        self.normalizer = MinMaxNormalizer::new();
        self.codebook = ContextCodebook::new(self.codebook.vigilance, self.codebook.rate, self.codebook.capacity)
            .expect("parameters already validated");
        self.context = None;
        self.context_placements.clear();
        self.bank = MemoryBank::new(self.bank.capacity());
    }

    fn agent(&mut self, poa: DeviceId, mode: FeatureMode, cfg: &ExperimentConfig) -> &mut Agent {
        let key = (poa, self.context);
        if !self.agents.contains_key(&key) {
            let warm = self.last_agent.get(&poa).and_then(|c| self.agents.get(&(poa, *c))).map(|a| a.warm_start(&cfg.ddql));
            let fresh = warm.unwrap_or_else(|| Agent::new(mode, feature_len(STATE_WIDTH), &cfg.ddql));
            self.agents.insert(key, fresh);
        }
        self.last_agent.insert(poa, self.context);
        self.agents.get_mut(&key).expect("inserted")
    }

    /// Placement produced by this policy's placement engine for a workload
    /// like `requests`.
    fn replace(&self, world: &World, cfg: &ExperimentConfig, requests: &[Request], rng: &mut impl rand::Rng) -> Result<Placement> {
        match self.policy {
            Policy::Rnd => place_random(&world.topology, &world.catalog, rng),
            Policy::Greedy | Policy::Opt => place_greedy(&world.topology, &world.catalog, &world.forecast(requests)),
            Policy::Ddql | Policy::DdqlGnn => {
                let pb = ExactProblem {
                    topology: &world.topology,
                    registry: &world.registry,
                    catalog: &world.catalog,
                    requests,
                    objective: PlacementObjective {
                        profit_weight: 1.0,
                        energy_weight: cfg.energy_weight,
                        include_transition: cfg.include_transition,
                    },
                    routing: &cfg.routing,
                    previous: self.placed.then_some(&self.placement),
                    rates: &world.rates,
                };
                if pb.check_limits(&cfg.exact).is_ok() {
                    solve_exact(&pb, &cfg.exact).map(|s| s.placement)
                } else {
                    place_greedy(&world.topology, &world.catalog, &world.forecast(requests))
                }
            }
        }
    }

    pub fn run_slot(
        &mut self,
        world: &mut World,
        cfg: &ExperimentConfig,
        size: usize,
        slot: u64,
        requests: &[Request],
        phase: Phase,
    ) -> Result<SlotOutcome> {
        let mut rng = substream(cfg.seed, Stream::Policy { policy: self.policy.code(), slot });
        let mut ledger = ResourceLedger::new(&world.topology, world.catalog.capacities());
        let mut transition = 0.0;
        let mut admitted: Vec<Admitted> = Vec::new();
        let mut replaced = false;

        if self.policy == Policy::Opt {
            let prev = self.placed.then_some(&self.placement);
            let weight = opt_energy_weight(world, cfg, requests);
            let pb = ExactProblem {
                topology: &world.topology,
                registry: &world.registry,
                catalog: &world.catalog,
                requests,
                objective: PlacementObjective { profit_weight: 1.0, energy_weight: weight, include_transition: cfg.include_transition },
                routing: &cfg.routing,
                previous: prev,
                rates: &world.rates,
            };
            let sol = solve_exact(&pb, &cfg.exact)?;
            if let Some(p) = prev {
                transition += transition_cost(p, &sol.placement, &world.rates);
                replaced = *p != sol.placement;
            }
            self.placement = sol.placement;
            self.placed = true;
            for (r, a) in requests.iter().zip(sol.assignments) {
                if let Some(action) = a {
                    let usage = Usage::of(&world.topology, &action.candidate, &action.instances, r, &cfg.routing);
                    if ledger.apply(&usage, r.latency_budget).is_feasible() {
                        admitted.push(Admitted { request: r.clone(), action, usage });
                    }
                }
            }
        } else {
            let view_state = self.bank.latest().cloned().unwrap_or_else(|| SystemState::zeros(&world.topology, STATE_WIDTH));
            let mode = self.policy.feature_mode();
            let view = mode.map(|m| StateView::new(&view_state, m, cfg.depth));
            let epsilon = match phase {
                Phase::Warmup { index, of } => cfg.ddql.epsilon(index, of),
                Phase::Measured => cfg.measured_epsilon,
            };
            let mut order: Vec<&Request> = requests.iter().collect();
            order.sort_by_key(|r| r.id);
            for r in order {
                let World { topology, catalog, cache, .. } = &mut *world;
                let set = ActionSet::new(enumerate_actions(topology, catalog, &self.placement, r, &cfg.routing, cache));
                let usages: Vec<Usage> =
                    set.pairs.iter().map(|a| Usage::of(topology, &a.candidate, &a.instances, r, &cfg.routing)).collect();
                let feasible: Vec<bool> = usages.iter().map(|u| ledger.check(u, r.latency_budget).is_feasible()).collect();
                let energy: Vec<f64> = usages.iter().map(|u| u.total_energy(topology)).collect();
                let mut learned: Option<(Vec<Vec<f64>>, Vec<f64>)> = None;
                if let (Some(view), Some(mode)) = (&view, mode) {
                    let feats: Vec<Vec<f64>> = set
                        .pairs
                        .iter()
                        .zip(&energy)
                        .map(|(a, &e)| encode_features(view, r, a, e, cfg.energy_weight))
                        .collect();
                    let agent = self.agent(r.user, mode, cfg);
                    agent.observe_next(feats.iter().zip(&feasible).filter(|(_, ok)| **ok).map(|(f, _)| f.clone()).collect());
                    let q = agent.q.values(&feats);
                    learned = Some((feats, q));
                }
                let q = learned.as_ref().map(|(_, q)| q.as_slice());
                let choice = select_action(self.policy, &set, &feasible, &energy, q, epsilon, &mut rng)?;
                let Some(i) = choice else { continue };
                let usage = usages[i].clone();
                if !ledger.apply(&usage, r.latency_budget).is_feasible() {
                    return Err(Error::Agent("selected pair failed the ledger".into()));
                }
                let (le, ce) = usage.energy(topology);
                if let (Some((feats, _)), Some(mode)) = (learned, mode) {
                    let reward = compute_reward(
                        &Outcome::Served { profit: r.profit, link_energy: le, compute_energy: ce, violated: false },
                        cfg.energy_weight,
                    );
                    let ddql = cfg.ddql;
                    let agent = self.agent(r.user, mode, cfg);
                    agent.record(feats[i].clone(), reward);
                    agent.train(&ddql, &mut rng)?;
                }
                admitted.push(Admitted { request: r.clone(), action: set.pairs[i].clone(), usage });
            }
            for a in self.agents.values_mut() {
                a.end_episode();
            }
        }

        // post-hoc verification of what was admitted
        let mut observed = if ledger.is_consistent() { 0 } else { 1 };
        for a in &admitted {
            if !verify_allocation(world, cfg, &self.placement, a) {
                observed += 1;
            }
        }

        let t = &world.topology;
        let mut link_energy = 0.0;
        let mut compute_energy = 0.0;
        for a in &admitted {
            let (l, c) = a.usage.energy(t);
            link_energy += l;
            compute_energy += c;
        }

        let state = self.observe(world, cfg, slot as Slot, &admitted, &ledger)?;

        // context recognition
        let v = embed_state(&state, &mut self.normalizer, cfg.depth);
        let (ctx, created) = match classify(&v, &self.codebook) {
            Ok((id, m)) if m >= self.codebook.vigilance => (id, false),
            _ => art_update(&v, &mut self.codebook),
        };
        let mut state = state;
        state.context_label = Some(ctx);
        self.bank.push(state.clone());

        // prediction over the contiguous tail of the memory bank
        let mut window = self.bank.recent(cfg.prediction_window);
        while window.len() > 1 && window.windows(2).any(|w| w[1].slot != w[0].slot + 1) {
            window.remove(0);
        }
        let predicted = predict_next(&window, cfg.smoothing)?;
        let violations =
            detect_infeasibility(&predicted, t, &world.registry, &world.catalog.capacities(), cfg.headroom).len();

        if self.policy != Policy::Opt {
            let switch = (!created && self.context != Some(ctx))
                .then(|| self.context_placements.get(&ctx).cloned())
                .flatten()
                .filter(|p| *p != self.placement);
            let next = if created || violations > 0 {
                Some(self.replace(world, cfg, requests, &mut rng)?)
            } else {
                switch
            };
            if let Some(p) = next {
                if p != self.placement {
                    transition += transition_cost(&self.placement, &p, &world.rates);
                    replaced = true;
                }
                self.placement = p;
            }
            self.context_placements.insert(ctx, self.placement.clone());
        }
        let pairs: Vec<_> = self.placement.bindings.iter().map(|(&i, &n)| (n, i)).collect();
        self.codebook.set_key(ctx, context_of_placement(&pairs)?)?;
        self.context = Some(ctx);

        let served: BTreeMap<RequestId, &Admitted> = admitted.iter().map(|a| (a.request.id, a)).collect();
        let logs = requests
            .iter()
            .map(|r| {
                let a = served.get(&r.id);
                RequestLog {
                    size,
                    policy: self.policy,
                    slot,
                    request: r.id,
                    service: r.service,
                    served: a.is_some(),
                    latency: a.map(|a| a.usage.latency).unwrap_or(0.0),
                    latency_budget: r.latency_budget,
                    profit: r.profit,
                    bandwidth_req: r.bandwidth_req,
                    capacity_req: r.capacity_req,
                    hops: a.map(|a| a.action.candidate.hops.clone()).unwrap_or_default(),
                    hosts: a.map(|a| a.action.candidate.hosts.clone()).unwrap_or_default(),
                    instances: a.map(|a| a.action.instances.clone()).unwrap_or_default(),
                }
            })
            .collect();
        let metrics = SlotMetrics {
            size,
            policy: self.policy,
            slot,
            served: admitted.len(),
            rejected: requests.len() - admitted.len(),
            profit: admitted.iter().map(|a| a.request.profit).sum(),
            link_energy,
            compute_energy,
            transition_energy: transition,
            context: Some(ctx),
            contexts: self.codebook.len(),
            predicted_violations: violations,
            observed_violations: observed,
            replaced,
        };
        Ok(SlotOutcome { metrics, logs, ledger, state })
    }

    /// Resource samples, domain states and the system state of this slot.
    fn observe(&mut self, world: &World, cfg: &ExperimentConfig, slot: Slot, admitted: &[Admitted], ledger: &ResourceLedger) -> Result<SystemState> {
        let t = &world.topology;
        let services = world.registry.len();
        let users = world.poas.len().max(1);
        let per_user = cfg.requests_per_slot.max(1);
        let dev_dims = ResourceDims { users, services, requests: per_user, ports: t.devices.first().map(|d| d.ports).unwrap_or(1), metrics: RESOURCE_METRICS.len() };
        let node_dims = ResourceDims { ports: 1, ..dev_dims };
        let mut dev_now: Vec<ShortTermResourceState> = (0..t.size()).map(|d| ShortTermResourceState::new(slot, Owner::Device(d), dev_dims)).collect();
        let mut node_now: Vec<ShortTermResourceState> = (0..t.nodes.len()).map(|n| ShortTermResourceState::new(slot, Owner::Node(n), node_dims)).collect();
        let mut counters: HashMap<(usize, usize), usize> = HashMap::new();
        let mut link_service = vec![vec![0.0; t.links.len()]; services];
        let mut instance_paths: BTreeMap<usize, Vec<Vec<DeviceId>>> = BTreeMap::new();
        let mut latency: BTreeMap<ServiceId, (f64, f64)> = BTreeMap::new();
        for a in admitted {
            let r = &a.request;
            let u = world.poas.iter().position(|&p| p == r.user).unwrap_or(0);
            let s = world.registry.index_of(r.service).expect("registered service");
            let k = counters.entry((u, s)).or_default();
            let idx = (*k).min(per_user - 1);
            *k += 1;
            let mut aoi = |kind: u8, id: usize| -> f64 {
                let prev = self.last_seen.insert((kind, id, u, s), slot);
                prev.map(|p| (slot - p) as f64).unwrap_or(0.0)
            };
            for w in a.action.candidate.hops.windows(2) {
                let l = t.link_between(w[0], w[1]).expect("adjacent hops");
                link_service[s][l] += r.bandwidth_req;
                for d in [w[0], w[1]] {
                    let port = t.port_of(d, l).expect("incident");
                    let age = aoi(0, d);
                    dev_now[d].record_sample(u, s, idx, port, &[r.bandwidth_req, age, r.latency_budget])?;
                }
            }
            for &h in &a.action.candidate.hosts {
                let age = aoi(1, h);
                node_now[h].record_sample(u, s, idx, 0, &[r.bandwidth_req, age, r.latency_budget])?;
            }
            for &i in &a.action.instances {
                let paths = instance_paths.entry(i).or_default();
                if !paths.contains(&a.action.candidate.hops) {
                    paths.push(a.action.candidate.hops.clone());
                }
            }
            let e = latency.entry(r.service).or_default();
            e.0 += a.usage.latency;
            e.1 += 1.0;
        }
        let window = cfg.resource_window;
        let reduce = |hist: &mut VecDeque<ShortTermResourceState>, now: ShortTermResourceState| -> Result<crate::state::ReducedResourceState> {
            hist.push_back(now);
            while hist.len() > window + 1 {
                hist.pop_front();
            }
            let latest = hist.back().expect("pushed");
            let mut states: Vec<ShortTermResourceState> = Vec::with_capacity(window + 1);
            for k in (0..=window).rev() {
                let at = latest.slot - k as Slot;
                let found = hist.iter().find(|h| h.slot == at).cloned();
                states.push(found.unwrap_or_else(|| ShortTermResourceState::new(at, latest.owner, latest.dims)));
            }
            reduce_resource_state(&LongTermResourceState::new(states, window)?, &RESOURCE_INDICATORS)
        };
        let dev_red = dev_now
            .into_iter()
            .enumerate()
            .map(|(d, now)| reduce(&mut self.device_hist[d], now))
            .collect::<Result<Vec<_>>>()?;
        let node_red = node_now
            .into_iter()
            .enumerate()
            .map(|(n, now)| reduce(&mut self.node_hist[n], now))
            .collect::<Result<Vec<_>>>()?;

        let ids = world.registry.ids();
        let net = network_domain_state(slot, t, services, &link_service, &dev_red)?;
        let comp = computing_domain_state(slot, &world.catalog, &ids, &self.placement, &ledger.instance_used, &node_red)?;
        self.domain_hist.push_back((net, comp));
        while self.domain_hist.len() > cfg.domain_window.max(1) {
            self.domain_hist.pop_front();
        }
        let nets: Vec<DomainState> = self.domain_hist.iter().map(|d| d.0.clone()).collect();
        let comps: Vec<DomainState> = self.domain_hist.iter().map(|d| d.1.clone()).collect();
        let net_red = reduce_domain_state(&nets, &DOMAIN_INDICATORS)?;
        let comp_red = reduce_domain_state(&comps, &DOMAIN_INDICATORS)?;
        let loads = LoadSnapshot {
            link_load: ledger.link_used.clone(),
            node_load: ledger.node_used.clone(),
            instance_load: ledger.instance_used.clone(),
            service_latency: latency.into_iter().map(|(s, (sum, n))| (s, sum / n)).collect(),
            instance_paths,
        };
        self.clock = slot;
        build_system_state(&net_red, &comp_red, t, &world.catalog, &self.placement, &loads)
    }
}

/// Energy weight for the exact policy: the configured weight, shrunk when
/// needed so that the slot's whole energy bill stays below half a profit
/// unit. Integer profits then make the optimum maximise profit first and
/// energy second.
fn opt_energy_weight(world: &World, cfg: &ExperimentConfig, requests: &[Request]) -> f64 {
    let t = &world.topology;
    let node_rate = t.nodes.iter().map(|n| n.energy_per_unit).fold(0.0, f64::max);
    let link_rate = t.links.iter().map(|l| l.energy_per_unit).fold(0.0, f64::max);
    let mut bound: f64 = world.rates.0.values().sum();
    for r in requests {
        let stages = world.catalog.stages(r.service).len();
        let demand = cfg.routing.stage_demand(r, stages);
        // legs are loop-free, so each crosses a link at most once
        let legs = stages + cfg.routing.include_return as usize;
        bound += legs as f64 * t.links.len() as f64 * link_rate * r.bandwidth_req + stages as f64 * node_rate * demand;
    }
    let lambda = cfg.energy_weight;
    if bound <= 0.0 {
        lambda
    } else {
        lambda.min(0.5 / bound)
    }
}

fn verify_allocation(world: &World, cfg: &ExperimentConfig, placement: &Placement, a: &Admitted) -> bool {
    let t = &world.topology;
    let c = &a.action.candidate;
    let r = &a.request;
    let Some(links) = t.sequence_latency(&c.hops) else { return false };
    let latency = links + cfg.routing.processing_latency * c.hosts.len() as f64;
    if latency > r.latency_budget + 1e-9 || (latency - a.usage.latency).abs() > 1e-9 {
        return false;
    }
    if c.hops.first() != Some(&r.user) || (cfg.routing.include_return && c.hops.last() != Some(&r.user)) {
        return false;
    }
    let stages = world.catalog.stages(r.service);
    if a.action.instances.len() != stages.len() || c.hosts.len() != stages.len() {
        return false;
    }
    let mut pos = 0;
    for (k, (&i, &h)) in a.action.instances.iter().zip(&c.hosts).enumerate() {
        if !stages[k].contains(&i) || placement.node_of(i) != Some(h) {
            return false;
        }
        let dev = t.nodes[h].attached_device;
        match c.hops[pos..].iter().position(|&d| d == dev) {
            Some(p) => pos += p,
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub size: usize,
    pub policy: Policy,
    pub metrics: Vec<SlotMetrics>,
    pub logs: Vec<RequestLog>,
    pub runner: PolicyRunner,
}

/// Checks that the exact policy can run every slot of the cell.
pub fn opt_tractable(world: &World, cfg: &ExperimentConfig) -> Result<()> {
    let dummy: Vec<Request> = Vec::new();
    let pb = ExactProblem {
        topology: &world.topology,
        registry: &world.registry,
        catalog: &world.catalog,
        requests: &dummy,
        objective: PlacementObjective::default(),
        routing: &cfg.routing,
        previous: None,
        rates: &world.rates,
    };
    pb.check_limits(&cfg.exact)?;
    if cfg.requests_per_slot > cfg.exact.max_requests {
        return Err(Error::Tractability(format!(
            "{} requests per slot exceed the exact-solver limit of {}",
            cfg.requests_per_slot, cfg.exact.max_requests
        )));
    }
    Ok(())
}

/// Warm-up (learned policies only) followed by the measured slots. Returns
/// `None` for an exact policy that is out of limits when skipping is allowed.
pub fn run_cell(cfg: &ExperimentConfig, size: usize, policy: Policy) -> Result<Option<CellResult>> {
    let mut world = World::build(cfg, size)?;
    if policy == Policy::Opt {
        if let Err(e) = opt_tractable(&world, cfg) {
            return if cfg.allow_skip_opt { Ok(None) } else { Err(e) };
        }
    }
    let mut runner = PolicyRunner::new(&world, cfg, policy)?;
    let warmup = if policy.feature_mode().is_some() { cfg.warmup_slots } else { 0 };
    let mut metrics = Vec::with_capacity(cfg.slots);
    let mut logs = Vec::new();
    let total = cfg.warmup_slots + cfg.slots;
    for k in (cfg.warmup_slots - warmup)..total {
        let slot = k as u64;
        if cfg.redraw_topology_per_slot {
            let seed = cfg.seed ^ (slot + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let topology = generate_topology(size, &cfg.tier_plan(), &cfg.topology, seed)?;
            world = World::on(cfg, topology)?;
            runner.reset_history(&world);
            if policy != Policy::Opt && !runner.placement.respects_capacity(&world.topology) {
                runner.placement = place_greedy(&world.topology, &world.catalog, &world.forecast(&[]))?;
            }
        }
        let requests = world.requests(cfg, slot)?;
        let phase = if k < cfg.warmup_slots { Phase::Warmup { index: k - (cfg.warmup_slots - warmup), of: warmup } } else { Phase::Measured };
        let out = runner.run_slot(&mut world, cfg, size, slot, &requests, phase)?;
        if phase == Phase::Measured {
            let mut m = out.metrics;
            m.slot = (k - cfg.warmup_slots) as u64;
            metrics.push(m);
            logs.extend(out.logs.into_iter().map(|mut l| {
                l.slot = (k - cfg.warmup_slots) as u64;
                l
            }));
        }
    }
    Ok(Some(CellResult { size, policy, metrics, logs, runner }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub size: usize,
    pub policy: Policy,
    pub slots: usize,
    pub mean_profit: f64,
    pub profit_ci: f64,
    /// Mean over slots that served something.
    pub mean_energy_per_served: Option<f64>,
    pub energy_per_served_ci: Option<f64>,
    pub mean_served: f64,
    pub mean_rejected: f64,
    pub mean_total_energy: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub slots: Vec<SlotMetrics>,
    pub logs: Vec<RequestLog>,
    pub summary: Vec<SummaryRow>,
    /// Cells whose exact policy was omitted.
    pub skipped: Vec<(usize, Policy)>,
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cells: Vec<(usize, Policy)> =
        cfg.sizes().into_iter().flat_map(|v| cfg.policies.iter().map(move |&p| (v, p))).collect();
    let results: Vec<Result<Option<CellResult>>> = cells.par_iter().map(|&(v, p)| run_cell(cfg, v, p)).collect();
    let mut slots = Vec::new();
    let mut logs = Vec::new();
    let mut summary = Vec::new();
    let mut skipped = Vec::new();
    for (&(v, p), res) in cells.iter().zip(results) {
        let Some(cell) = res? else {
            skipped.push((v, p));
            continue;
        };
        let profits: Vec<f64> = cell.metrics.iter().map(|m| m.profit).collect();
        let eps: Vec<f64> = cell.metrics.iter().filter_map(|m| m.energy_per_served()).collect();
        let (mean_profit, profit_ci) = mean_ci(&profits);
        let (e, eci) = mean_ci(&eps);
        let n = cell.metrics.len().max(1) as f64;
        summary.push(SummaryRow {
            size: v,
            policy: p,
            slots: cell.metrics.len(),
            mean_profit,
            profit_ci,
            mean_energy_per_served: (!eps.is_empty()).then_some(e),
            energy_per_served_ci: (!eps.is_empty()).then_some(eci),
            mean_served: cell.metrics.iter().map(|m| m.served as f64).sum::<f64>() / n,
            mean_rejected: cell.metrics.iter().map(|m| m.rejected as f64).sum::<f64>() / n,
            mean_total_energy: cell.metrics.iter().map(|m| m.total_energy()).sum::<f64>() / n,
        });
        slots.extend(cell.metrics);
        logs.extend(cell.logs);
    }
    Ok(ExperimentReport { config: cfg.clone(), slots, logs, summary, skipped })
}

/// Served, rejected and latency statistics of one service over measured
/// slots `range.0..=range.1` of every cell in the log.
pub fn report_service(logs: &[RequestLog], registry: &ServiceRegistry, service: ServiceId, range: (u64, u64)) -> Result<ServiceReport> {
    if registry.get(service).is_none() {
        return Err(Error::Report(format!("unknown service {service}")));
    }
    let mut rep = ServiceReport { service, slots: range, served: 0, rejected: 0, mean_latency: 0.0, qos_violations: 0 };
    let mut sum = 0.0;
    for l in logs.iter().filter(|l| l.service == service && l.slot >= range.0 && l.slot <= range.1) {
        if l.served {
            rep.served += 1;
            sum += l.latency;
            if l.latency > l.latency_budget + 1e-9 {
                rep.qos_violations += 1;
            }
        } else {
            rep.rejected += 1;
        }
    }
    if rep.served > 0 {
        rep.mean_latency = sum / rep.served as f64;
    }
    Ok(rep)
}

pub const SLOTS_HEADER: &str = "v,policy,slot,served,rejected,profit,link_energy,compute_energy,transition_energy,energy_per_served,context,contexts,predicted_violations,observed_violations,replaced";
pub const SUMMARY_HEADER: &str = "v,policy,slots,mean_profit,profit_ci95,mean_energy_per_served,energy_per_served_ci95,mean_served,mean_rejected,mean_total_energy";

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NA".into())
}

impl ExperimentReport {
    pub fn slots_csv(&self) -> String {
        let mut s = format!("{SLOTS_HEADER}\n");
        for m in &self.slots {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                m.size,
                m.policy,
                m.slot,
                m.served,
                m.rejected,
                num(m.profit),
                num(m.link_energy),
                num(m.compute_energy),
                num(m.transition_energy),
                opt_num(m.energy_per_served()),
                m.context.map(|c| c.to_string()).unwrap_or_else(|| "NA".into()),
                m.contexts,
                m.predicted_violations,
                m.observed_violations,
                m.replaced as u8
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.size,
                r.policy,
                r.slots,
                num(r.mean_profit),
                num(r.profit_ci),
                opt_num(r.mean_energy_per_served),
                opt_num(r.energy_per_served_ci),
                num(r.mean_served),
                num(r.mean_rejected),
                num(r.mean_total_energy)
            );
        }
        s
    }

    fn dat(&self, title: &str, value: impl Fn(&SummaryRow) -> Option<f64>) -> String {
        let policies = &self.config.policies;
        let mut s = format!("# {title}\n# v");
        for p in policies {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
        for v in self.config.sizes() {
            let _ = write!(s, "{v}");
            for &p in policies {
                let x = self.summary.iter().find(|r| r.size == v && r.policy == p).and_then(&value);
                let _ = write!(s, " {}", x.map(num).unwrap_or_else(|| "NaN".into()));
            }
            s.push('\n');
        }
        s
    }

    /// Mean energy per served request against system size.
    pub fn fig6a(&self) -> String {
        self.dat("mean energy per served request", |r| r.mean_energy_per_served)
    }

    /// Mean per-slot total profit against system size.
    pub fn fig6b(&self) -> String {
        self.dat("total profit per slot", |r| Some(r.mean_profit))
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("slots.csv", self.slots_csv()),
            ("summary.csv", self.summary_csv()),
            ("fig6a.dat", self.fig6a()),
            ("fig6b.dat", self.fig6b()),
            ("config.ini", self.config.to_ini()),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            v_range: (3, 3),
            slots: 3,
            warmup_slots: 2,
            requests_per_slot: 6,
            max_chain: 1,
            policies: Policy::ALL.to_vec(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_requests_slot() {
        let cfg = small();
        let mut world = World::build(&cfg, 3).unwrap();
        for p in Policy::ALL {
            let mut r = PolicyRunner::new(&world, &cfg, p).unwrap();
            let out = r.run_slot(&mut world, &cfg, 3, 0, &[], Phase::Measured).unwrap();
            assert_eq!(out.metrics.profit, 0.0);
            assert_eq!(out.metrics.served, 0);
            assert_eq!(out.metrics.link_energy + out.metrics.compute_energy, 0.0);
            assert_eq!(out.metrics.energy_per_served(), None);
        }
    }

    #[test]
    fn opt_slot_matches_exact_solver() {
        let cfg = small();
        let mut world = World::build(&cfg, 3).unwrap();
        let requests = world.requests(&cfg, 0).unwrap();
        let mut runner = PolicyRunner::new(&world, &cfg, Policy::Opt).unwrap();
        let out = runner.run_slot(&mut world, &cfg, 3, 0, &requests, Phase::Measured).unwrap();
        // independent search: best profit over all placements is what the
        // profit-first weighting must reach
        let pb = ExactProblem {
            topology: &world.topology,
            registry: &world.registry,
            catalog: &world.catalog,
            requests: &requests,
            objective: PlacementObjective { profit_weight: 1.0, energy_weight: 0.0, include_transition: false },
            routing: &cfg.routing,
            previous: None,
            rates: &world.rates,
        };
        let best = solve_exact(&pb, &cfg.exact).unwrap();
        assert_eq!(out.metrics.profit, best.profit);
    }

    #[test]
    fn energy_matches_ledger() {
        let cfg = small();
        let mut world = World::build(&cfg, 3).unwrap();
        let requests = world.requests(&cfg, 4).unwrap();
        for p in [Policy::Rnd, Policy::Greedy, Policy::Ddql] {
            let mut r = PolicyRunner::new(&world, &cfg, p).unwrap();
            let out = r.run_slot(&mut world, &cfg, 3, 4, &requests, Phase::Measured).unwrap();
            let t = &world.topology;
            let link: f64 = out.ledger.link_used.iter().enumerate().map(|(l, u)| t.links[l].energy_per_unit * u).sum();
            let node: f64 = out.ledger.node_used.iter().enumerate().map(|(n, u)| t.nodes[n].energy_per_unit * u).sum();
            assert!((out.metrics.link_energy - link).abs() < 1e-9);
            assert!((out.metrics.compute_energy - node).abs() < 1e-9);
            assert_eq!(out.metrics.observed_violations, 0);
        }
    }

    #[test]
    fn single_cell_report() {
        let mut cfg = small();
        cfg.policies = vec![Policy::Rnd];
        cfg.slots = 1;
        let rep = run_experiment(&cfg).unwrap();
        assert_eq!(rep.slots.len(), 1);
        assert_eq!(rep.summary.len(), 1);
        assert_eq!(rep.slots_csv().lines().count(), 2);
    }

    #[test]
    fn service_reports_reconcile() {
        let mut cfg = small();
        cfg.policies = vec![Policy::Greedy];
        let rep = run_experiment(&cfg).unwrap();
        let world = World::build(&cfg, 3).unwrap();
        for s in world.registry.ids() {
            let r = report_service(&rep.logs, &world.registry, s, (0, 2)).unwrap();
            let offered = rep.logs.iter().filter(|l| l.service == s).count();
            assert_eq!(r.offered(), offered);
            let lat: Vec<f64> = rep.logs.iter().filter(|l| l.service == s && l.served).map(|l| l.latency).collect();
            if !lat.is_empty() {
                assert!((r.mean_latency - lat.iter().sum::<f64>() / lat.len() as f64).abs() < 1e-12);
            }
            assert_eq!(r.qos_violations, 0);
        }
        assert!(report_service(&rep.logs, &world.registry, 99, (0, 2)).is_err());
        let none = report_service(&[], &world.registry, 0, (0, 2)).unwrap();
        assert_eq!((none.served, none.rejected, none.mean_latency), (0, 0, 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.slots_csv(), b.slots_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
    }
}
