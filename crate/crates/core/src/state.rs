//! Hierarchical state pipeline: per-resource short-term samples, long-term
//! windows and their reductions, domain-level states, and the graph-shaped
//! end-to-end system state kept in the memory bank.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{parse_err, Error, Result};
use crate::placement::{InstanceCatalog, InstanceId, Placement};
use crate::services::ServiceId;
use crate::topology::{DeviceId, LinkId, NodeId, Topology};

pub type Slot = i64;

/// Default per-sample metrics: offered mbps, age of information in slots,
/// latency budget in ms.
pub const RESOURCE_METRICS: [&str; 3] = ["offered_mbps", "age_of_information", "latency_budget_ms"];

/// Availability metrics attached to every domain element.
pub const AVAILABILITY_METRICS: [&str; 3] = ["utilization", "uptime", "failures"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Device(DeviceId),
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceDims {
    pub users: usize,
    pub services: usize,
    pub requests: usize,
    pub ports: usize,
    pub metrics: usize,
}

impl ResourceDims {
    pub fn cells(&self) -> usize {
        self.users * self.services * self.requests * self.ports * self.metrics
    }
}

/// Sparse sample tensor indexed `(user, service, request, port, metric)`;
/// absent cells read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortTermResourceState {
    pub slot: Slot,
    pub owner: Owner,
    pub dims: ResourceDims,
    samples: BTreeMap<(usize, usize, usize, usize), Vec<f64>>,
}

impl ShortTermResourceState {
    pub fn new(slot: Slot, owner: Owner, dims: ResourceDims) -> Self {
        ShortTermResourceState { slot, owner, dims, samples: BTreeMap::new() }
    }

    /// Last write wins within a slot.
    pub fn record_sample(&mut self, user: usize, service: usize, request: usize, port: usize, metrics: &[f64]) -> Result<()> {
        let d = self.dims;
        if metrics.len() != d.metrics {
            return Err(Error::State(format!("expected {} metrics, got {}", d.metrics, metrics.len())));
        }
        if user >= d.users || service >= d.services || request >= d.requests || port >= d.ports {
            return Err(Error::State(format!("sample index ({user},{service},{request},{port}) out of bounds")));
        }
        if metrics.iter().any(|m| !m.is_finite()) {
            return Err(Error::State("non-finite metric value".into()));
        }
        self.samples.insert((user, service, request, port), metrics.to_vec());
        Ok(())
    }

    pub fn value(&self, user: usize, service: usize, request: usize, port: usize, metric: usize) -> f64 {
        self.samples.get(&(user, service, request, port)).map(|v| v[metric]).unwrap_or(0.0)
    }

    pub fn is_present(&self, user: usize, service: usize, request: usize, port: usize) -> bool {
        self.samples.contains_key(&(user, service, request, port))
    }

    /// Number of `(user, service, request, port)` cells holding a sample.
    pub fn occupied(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> impl Iterator<Item = (&(usize, usize, usize, usize), &Vec<f64>)> {
        self.samples.iter()
    }
}

/// Window of `history + 1` contiguous short-term states of one owner.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermResourceState {
    window: Vec<ShortTermResourceState>,
}

impl LongTermResourceState {
    pub fn new(window: Vec<ShortTermResourceState>, history: usize) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::State("empty resource window".into()));
        }
        if window.len() != history + 1 {
            return Err(Error::State(format!("window holds {} slots, expected {}", window.len(), history + 1)));
        }
        let first = &window[0];
        for (k, s) in window.iter().enumerate() {
            if s.slot != first.slot + k as Slot || s.owner != first.owner || s.dims != first.dims {
                return Err(Error::State("window slots must be contiguous and share owner and dimensions".into()));
            }
        }
        Ok(LongTermResourceState { window })
    }

    pub fn window(&self) -> &[ShortTermResourceState] {
        &self.window
    }

    pub fn latest(&self) -> &ShortTermResourceState {
        self.window.last().expect("nonempty window")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Mean,
    Max,
    /// Value at the most recent slot.
    Last,
    Sum,
}

impl Statistic {
    pub fn is_order_insensitive(self) -> bool {
        !matches!(self, Statistic::Last)
    }

    fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Max => "max",
            Statistic::Last => "last",
            Statistic::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Indicator {
    pub stat: Statistic,
    pub metric: usize,
}

impl Indicator {
    pub const fn new(stat: Statistic, metric: usize) -> Self {
        Indicator { stat, metric }
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.stat.name(), self.metric)
    }
}

/// Reduced resource indicators, a dense `services x ports x indicators` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedResourceState {
    pub owner: Owner,
    pub slot: Slot,
    pub services: usize,
    pub ports: usize,
    pub indicators: usize,
    pub values: Vec<f64>,
}

impl ReducedResourceState {
    pub fn zeros(owner: Owner, slot: Slot, services: usize, ports: usize, indicators: usize) -> Self {
        ReducedResourceState { owner, slot, services, ports, indicators, values: vec![0.0; services * ports * indicators] }
    }

    pub fn get(&self, service: usize, port: usize, indicator: usize) -> f64 {
        self.values[(service * self.ports + port) * self.indicators + indicator]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("owner,slot,service,port,indicator,value\n");
        let owner = match self.owner {
            Owner::Device(d) => format!("device{d}"),
            Owner::Node(n) => format!("node{n}"),
        };
        for sv in 0..self.services {
            for p in 0..self.ports {
                for i in 0..self.indicators {
                    let _ = writeln!(s, "{owner},{},{sv},{p},{i},{}", self.slot, self.get(sv, p, i));
                }
            }
        }
        s
    }
}

/// Maps a long-term resource window onto reduced indicators.
pub trait Projector {
    fn project(&self, long: &LongTermResourceState, indicators: &[Indicator]) -> Result<ReducedResourceState>;
}

/// Deterministic window statistics per (service, port) over users, requests
/// and time. Mean and max only consider present samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatisticsProjector;

impl Projector for StatisticsProjector {
    fn project(&self, long: &LongTermResourceState, indicators: &[Indicator]) -> Result<ReducedResourceState> {
        let dims = long.latest().dims;
        check_indicators(indicators, dims.metrics)?;
        let latest_slot = long.latest().slot;
        let mut out = ReducedResourceState::zeros(long.latest().owner, latest_slot, dims.services, dims.ports, indicators.len());
        // (service, port) -> per-metric (sum, count, max, last_sum, last_count)
        let mut acc: BTreeMap<(usize, usize), Vec<[f64; 5]>> = BTreeMap::new();
        for st in long.window() {
            let is_last = st.slot == latest_slot;
            for (&(_, s, _, p), m) in st.samples() {
                let e = acc.entry((s, p)).or_insert_with(|| vec![[0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0]; dims.metrics]);
                for (k, &v) in m.iter().enumerate() {
                    e[k][0] += v;
                    e[k][1] += 1.0;
                    e[k][2] = e[k][2].max(v);
                    if is_last {
                        e[k][3] += v;
                        e[k][4] += 1.0;
                    }
                }
            }
        }
        let slots = long.window().len() as f64;
        for ((s, p), e) in acc {
            for (i, ind) in indicators.iter().enumerate() {
                let a = e[ind.metric];
                let v = match ind.stat {
                    Statistic::Mean => a[0] / a[1],
                    Statistic::Max => a[2],
                    Statistic::Sum => a[0] / slots,
                    Statistic::Last => {
                        if a[4] > 0.0 {
                            a[3] / a[4]
                        } else {
                            0.0
                        }
                    }
                };
                out.values[(s * dims.ports + p) * indicators.len() + i] = v;
            }
        }
        Ok(out)
    }
}

fn check_indicators(indicators: &[Indicator], metrics: usize) -> Result<()> {
    if indicators.is_empty() {
        return Err(Error::State("indicator set is empty".into()));
    }
    if indicators.len() > metrics {
        return Err(Error::State(format!("{} indicators exceed the {metrics} available metrics", indicators.len())));
    }
    if let Some(i) = indicators.iter().find(|i| i.metric >= metrics) {
        return Err(Error::State(format!("indicator metric {} out of range", i.metric)));
    }
    Ok(())
}

pub fn reduce_resource_state(long: &LongTermResourceState, indicators: &[Indicator]) -> Result<ReducedResourceState> {
    StatisticsProjector.project(long, indicators)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Network,
    Computing,
}

/// Dense `services x elements x edges x metrics` tensor. For the network
/// domain elements are devices and edges are links; for the computing
/// domain elements are instances and edges are chain edges. Only incident
/// (element, edge) pairs carry values.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainState {
    pub domain: Domain,
    pub slot: Slot,
    pub services: usize,
    pub elements: usize,
    pub edges: usize,
    pub metrics: usize,
    pub values: Vec<f64>,
}

impl DomainState {
    pub fn zeros(domain: Domain, slot: Slot, services: usize, elements: usize, edges: usize, metrics: usize) -> Self {
        DomainState { domain, slot, services, elements, edges, metrics, values: vec![0.0; services * elements * edges * metrics] }
    }

    fn index(&self, s: usize, n: usize, l: usize, m: usize) -> usize {
        ((s * self.elements + n) * self.edges + l) * self.metrics + m
    }

    pub fn get(&self, s: usize, n: usize, l: usize, m: usize) -> f64 {
        self.values[self.index(s, n, l, m)]
    }

    pub fn set(&mut self, s: usize, n: usize, l: usize, m: usize, v: f64) {
        let i = self.index(s, n, l, m);
        self.values[i] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDomainState {
    pub domain: Domain,
    pub slot: Slot,
    pub services: usize,
    pub elements: usize,
    pub edges: usize,
    pub indicators: usize,
    pub values: Vec<f64>,
}

impl ReducedDomainState {
    pub fn get(&self, s: usize, n: usize, l: usize, i: usize) -> f64 {
        self.values[((s * self.elements + n) * self.edges + l) * self.indicators + i]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,slot,service,element,edge,indicator,value\n");
        let d = match self.domain {
            Domain::Network => "network",
            Domain::Computing => "computing",
        };
        for s in 0..self.services {
            for n in 0..self.elements {
                for l in 0..self.edges {
                    for i in 0..self.indicators {
                        let _ = writeln!(out, "{d},{},{s},{n},{l},{i},{}", self.slot, self.get(s, n, l, i));
                    }
                }
            }
        }
        out
    }
}

/// Window statistics per `(service, element, edge)` entry. `Last` takes the
/// state with the greatest slot, so every indicator is insensitive to the
/// order the window is given in.
pub fn reduce_domain_state(window: &[DomainState], indicators: &[Indicator]) -> Result<ReducedDomainState> {
    let first = window.first().ok_or_else(|| Error::State("empty domain window".into()))?;
    check_indicators(indicators, first.metrics)?;
    for w in window {
        if (w.domain, w.services, w.elements, w.edges, w.metrics)
            != (first.domain, first.services, first.elements, first.edges, first.metrics)
        {
            return Err(Error::State("domain window mixes dimensions".into()));
        }
    }
    let latest = window.iter().max_by_key(|w| w.slot).expect("nonempty");
    let entries = first.services * first.elements * first.edges;
    let k = indicators.len();
    let mut values = vec![0.0; entries * k];
    let n = window.len() as f64;
    for e in 0..entries {
        for (i, ind) in indicators.iter().enumerate() {
            let at = |w: &DomainState| w.values[e * first.metrics + ind.metric];
            values[e * k + i] = match ind.stat {
                Statistic::Mean => window.iter().map(at).sum::<f64>() / n,
                Statistic::Sum => window.iter().map(at).sum::<f64>(),
                Statistic::Max => window.iter().map(at).fold(f64::NEG_INFINITY, f64::max),
                Statistic::Last => at(latest),
            };
        }
    }
    Ok(ReducedDomainState {
        domain: first.domain,
        slot: latest.slot,
        services: first.services,
        elements: first.elements,
        edges: first.edges,
        indicators: k,
        values,
    })
}

/// Chain edges of the computing domain: for a chain of `k` stages there is
/// an ingress edge, `k - 1` inter-stage edges and an egress edge.
pub fn chain_edges(catalog: &InstanceCatalog, services: &[ServiceId]) -> BTreeMap<InstanceId, (usize, usize)> {
    let mut out = BTreeMap::new();
    let mut base = 0;
    for &s in services {
        let stages = catalog.stages(s);
        for (k, reps) in stages.iter().enumerate() {
            for &i in reps {
                out.insert(i, (base + k, base + k + 1));
            }
        }
        if !stages.is_empty() {
            base += stages.len() + 1;
        }
    }
    out
}

pub fn chain_edge_count(catalog: &InstanceCatalog, services: &[ServiceId]) -> usize {
    services.iter().map(|&s| catalog.stages(s).len()).filter(|&k| k > 0).map(|k| k + 1).sum()
}

/// Network domain state of one slot. `link_service_load[s][l]` is the
/// bandwidth service `s` commits on link `l`; `device_reduced[d]` are the
/// reduced resource states of the devices.
pub fn network_domain_state(
    slot: Slot,
    t: &Topology,
    services: usize,
    link_service_load: &[Vec<f64>],
    device_reduced: &[ReducedResourceState],
) -> Result<DomainState> {
    let rr = device_reduced.first().map(|r| r.indicators).unwrap_or(0);
    if device_reduced.len() != t.size() || link_service_load.len() != services {
        return Err(Error::State("network domain inputs do not match the topology".into()));
    }
    let metrics = AVAILABILITY_METRICS.len() + rr;
    let mut ds = DomainState::zeros(Domain::Network, slot, services, t.size(), t.links.len(), metrics);
    for l in &t.links {
        for d in [l.endpoints.0, l.endpoints.1] {
            let port = t.port_of(d, l.id).expect("incident link");
            let red = &device_reduced[d];
            for s in 0..services {
                ds.set(s, d, l.id, 0, link_service_load[s][l.id] / l.bandwidth);
                ds.set(s, d, l.id, 1, 1.0);
                ds.set(s, d, l.id, 2, 0.0);
                if port < red.ports {
                    for i in 0..rr {
                        ds.set(s, d, l.id, AVAILABILITY_METRICS.len() + i, red.get(s, port, i));
                    }
                }
            }
        }
    }
    Ok(ds)
}

/// Computing domain state of one slot; elements are catalog instances.
pub fn computing_domain_state(
    slot: Slot,
    catalog: &InstanceCatalog,
    service_ids: &[ServiceId],
    placement: &Placement,
    instance_load: &BTreeMap<InstanceId, f64>,
    node_reduced: &[ReducedResourceState],
) -> Result<DomainState> {
    let rr = node_reduced.first().map(|r| r.indicators).unwrap_or(0);
    let metrics = AVAILABILITY_METRICS.len() + rr;
    let edges = chain_edge_count(catalog, service_ids);
    let mut ds = DomainState::zeros(Domain::Computing, slot, service_ids.len(), catalog.len(), edges, metrics);
    let incidence = chain_edges(catalog, service_ids);
    for inst in &catalog.instances {
        let Some(s) = service_ids.iter().position(|&x| x == inst.service) else { continue };
        let Some(node) = placement.node_of(inst.id) else { continue };
        let red = node_reduced
            .get(node)
            .ok_or_else(|| Error::State(format!("missing reduced state for node {node}")))?;
        let (a, b) = incidence[&inst.id];
        let util = instance_load.get(&inst.id).copied().unwrap_or(0.0) / inst.capacity;
        for e in [a, b] {
            ds.set(s, inst.id, e, 0, util);
            ds.set(s, inst.id, e, 1, 1.0);
            ds.set(s, inst.id, e, 2, 0.0);
            for i in 0..rr {
                ds.set(s, inst.id, e, AVAILABILITY_METRICS.len() + i, red.get(s, 0, i));
            }
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingEntry {
    pub service: ServiceId,
    pub instance: InstanceId,
    pub node: NodeId,
    /// Distinct hop sequences routed through the instance this slot.
    pub paths: Vec<Vec<DeviceId>>,
}

/// Graph-shaped end-to-end state. Elements are numbered devices first, then
/// links, then computing nodes; each carries a reduced indicator vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub slot: Slot,
    pub width: usize,
    pub devices: Vec<Vec<f64>>,
    pub links: Vec<Vec<f64>>,
    pub nodes: Vec<Vec<f64>>,
    pub link_endpoints: Vec<(DeviceId, DeviceId)>,
    pub node_devices: Vec<DeviceId>,
    pub binding: Vec<BindingEntry>,
    pub link_load: Vec<f64>,
    pub node_load: Vec<f64>,
    pub instance_load: BTreeMap<InstanceId, f64>,
    /// Mean end-to-end latency of each service's served requests.
    pub service_latency: BTreeMap<ServiceId, f64>,
    pub context_label: Option<usize>,
}

/// Observed loads that accompany a system state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadSnapshot {
    pub link_load: Vec<f64>,
    pub node_load: Vec<f64>,
    pub instance_load: BTreeMap<InstanceId, f64>,
    pub service_latency: BTreeMap<ServiceId, f64>,
    pub instance_paths: BTreeMap<InstanceId, Vec<Vec<DeviceId>>>,
}

impl SystemState {
    pub fn element_count(&self) -> usize {
        self.devices.len() + self.links.len() + self.nodes.len()
    }

    pub fn element(&self, i: usize) -> &[f64] {
        let (d, l) = (self.devices.len(), self.links.len());
        if i < d {
            &self.devices[i]
        } else if i < d + l {
            &self.links[i - d]
        } else {
            &self.nodes[i - d - l]
        }
    }

    /// Neighbors in the element graph: devices touch their links and their
    /// attached computing node.
    pub fn element_neighbors(&self) -> Vec<Vec<usize>> {
        let (d, l) = (self.devices.len(), self.links.len());
        let mut adj = vec![Vec::new(); self.element_count()];
        for (k, &(a, b)) in self.link_endpoints.iter().enumerate() {
            for x in [a, b] {
                adj[x].push(d + k);
                adj[d + k].push(x);
            }
        }
        for (n, &dev) in self.node_devices.iter().enumerate() {
            adj[dev].push(d + l + n);
            adj[d + l + n].push(dev);
        }
        adj
    }

    pub fn link_element(&self, l: LinkId) -> usize {
        self.devices.len() + l
    }

    pub fn node_element(&self, n: NodeId) -> usize {
        self.devices.len() + self.links.len() + n
    }

    /// A state with every indicator and load at zero.
    pub fn zeros(t: &Topology, width: usize) -> Self {
        SystemState {
            slot: 0,
            width,
            devices: vec![vec![0.0; width]; t.size()],
            links: vec![vec![0.0; width]; t.links.len()],
            nodes: vec![vec![0.0; width]; t.nodes.len()],
            link_endpoints: t.links.iter().map(|l| l.endpoints).collect(),
            node_devices: t.nodes.iter().map(|n| n.attached_device).collect(),
            binding: Vec::new(),
            link_load: vec![0.0; t.links.len()],
            node_load: vec![0.0; t.nodes.len()],
            instance_load: BTreeMap::new(),
            service_latency: BTreeMap::new(),
            context_label: None,
        }
    }

    /// All numeric fields in a fixed order; used by predictors.
    pub fn numeric(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for e in self.devices.iter().chain(&self.links).chain(&self.nodes) {
            v.extend_from_slice(e);
        }
        v.extend_from_slice(&self.link_load);
        v.extend_from_slice(&self.node_load);
        v.extend(self.instance_load.values());
        v.extend(self.service_latency.values());
        v
    }

    /// Inverse of `numeric` over this state's structure.
    pub fn with_numeric(&self, v: &[f64]) -> Result<SystemState> {
        if v.len() != self.numeric().len() {
            return Err(Error::State("numeric vector does not match the state shape".into()));
        }
        let mut out = self.clone();
        let mut it = v.iter().copied();
        for e in out.devices.iter_mut().chain(out.links.iter_mut()).chain(out.nodes.iter_mut()) {
            for x in e.iter_mut() {
                *x = it.next().expect("length checked");
            }
        }
        for x in out.link_load.iter_mut().chain(out.node_load.iter_mut()) {
            *x = it.next().expect("length checked");
        }
        for x in out.instance_load.values_mut().chain(out.service_latency.values_mut()) {
            *x = it.next().expect("length checked");
        }
        Ok(out)
    }
}

fn mean_of(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut n = 0.0;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x;
        }
        n += 1.0;
    }
    if n > 0.0 {
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// Concatenates the reduced network and computing domain states with the
/// placement into the annotated topology and its service binding.
pub fn build_system_state(
    net: &ReducedDomainState,
    comp: &ReducedDomainState,
    t: &Topology,
    catalog: &InstanceCatalog,
    placement: &Placement,
    loads: &LoadSnapshot,
) -> Result<SystemState> {
    if net.slot != comp.slot {
        return Err(Error::State(format!("network slot {} differs from computing slot {}", net.slot, comp.slot)));
    }
    if net.indicators != comp.indicators {
        return Err(Error::State("domain indicator widths differ".into()));
    }
    if net.elements != t.size() || net.edges != t.links.len() {
        return Err(Error::State("network state does not match the topology".into()));
    }
    let w = net.indicators;
    let service_sum = |st: &ReducedDomainState, n: usize, l: usize| -> Vec<f64> {
        (0..w).map(|i| (0..st.services).map(|s| st.get(s, n, l, i)).sum()).collect()
    };
    let devices = (0..t.size())
        .map(|d| mean_of(t.neighbors(d).iter().map(|&(_, l)| service_sum(net, d, l)), w))
        .collect();
    let links = t
        .links
        .iter()
        .map(|l| mean_of([l.endpoints.0, l.endpoints.1].into_iter().map(|d| service_sum(net, d, l.id)), w))
        .collect();
    let service_ids: Vec<ServiceId> = {
        let mut v: Vec<ServiceId> = catalog.instances.iter().map(|i| i.service).collect();
        v.dedup();
        v
    };
    let incidence = chain_edges(catalog, &service_ids);
    let nodes = (0..t.nodes.len())
        .map(|n| {
            let hosted = placement.bindings.iter().filter(|(_, &h)| h == n).map(|(&i, _)| i);
            mean_of(
                hosted.map(|i| {
                    let (a, b) = incidence.get(&i).copied().unwrap_or((0, 0));
                    let ea = if a < comp.edges && i < comp.elements { service_sum(comp, i, a) } else { vec![0.0; w] };
                    let eb = if b < comp.edges && i < comp.elements { service_sum(comp, i, b) } else { vec![0.0; w] };
                    ea.iter().zip(&eb).map(|(x, y)| (x + y) / 2.0).collect()
                }),
                w,
            )
        })
        .collect();
    let binding = placement
        .bindings
        .iter()
        .map(|(&i, &n)| BindingEntry {
            service: catalog.instances[i].service,
            instance: i,
            node: n,
            paths: loads.instance_paths.get(&i).cloned().unwrap_or_default(),
        })
        .collect();
    let mut link_load = loads.link_load.clone();
    link_load.resize(t.links.len(), 0.0);
    let mut node_load = loads.node_load.clone();
    node_load.resize(t.nodes.len(), 0.0);
    let instance_load = catalog
        .instances
        .iter()
        .map(|i| (i.id, loads.instance_load.get(&i.id).copied().unwrap_or(0.0)))
        .collect();
    Ok(SystemState {
        slot: net.slot,
        width: w,
        devices,
        links,
        nodes,
        link_endpoints: t.links.iter().map(|l| l.endpoints).collect(),
        node_devices: t.nodes.iter().map(|n| n.attached_device).collect(),
        binding,
        link_load,
        node_load,
        instance_load,
        service_latency: loads.service_latency.clone(),
        context_label: None,
    })
}

pub const MEMORY_BANK_FORMAT: &str = "# acnc-memory-bank v1";

/// Keeps the most recent `capacity` system states, evicting oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    states: VecDeque<SystemState>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank { capacity: capacity.max(1), states: VecDeque::new() }
    }

    pub fn push(&mut self, s: SystemState) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn latest(&self) -> Option<&SystemState> {
        self.states.back()
    }

    /// Up to `n` most recent states, oldest first.
    pub fn recent(&self, n: usize) -> Vec<SystemState> {
        let skip = self.states.len().saturating_sub(n);
        self.states.iter().skip(skip).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SystemState> {
        self.states.iter()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = format!("{MEMORY_BANK_FORMAT}\ncapacity {}\n", self.capacity);
        for st in &self.states {
            let ctx = st.context_label.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "state {} {} {ctx}", st.slot, st.width);
            for (i, r) in st.devices.iter().enumerate() {
                let _ = writeln!(s, "device {i} {}", join(r));
            }
            for (i, r) in st.links.iter().enumerate() {
                let (a, b) = st.link_endpoints[i];
                let _ = writeln!(s, "link {i} {a} {b} {}", join(r));
            }
            for (i, r) in st.nodes.iter().enumerate() {
                let _ = writeln!(s, "node {i} {} {}", st.node_devices[i], join(r));
            }
            for b in &st.binding {
                let paths = b
                    .paths
                    .iter()
                    .map(|p| p.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-"))
                    .collect::<Vec<_>>()
                    .join(";");
                let paths = if paths.is_empty() { "-".to_string() } else { paths };
                let _ = writeln!(s, "bind {} {} {} {paths}", b.service, b.instance, b.node);
            }
            let _ = writeln!(s, "link_load {}", join(&st.link_load));
            let _ = writeln!(s, "node_load {}", join(&st.node_load));
            for (i, v) in &st.instance_load {
                let _ = writeln!(s, "instance_load {i} {v}");
            }
            for (sv, v) in &st.service_latency {
                let _ = writeln!(s, "service_latency {sv} {v}");
            }
            let _ = writeln!(s, "end");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<MemoryBank> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, h)) if h.trim() == MEMORY_BANK_FORMAT => {}
            _ => return Err(parse_err(1, format!("expected header `{MEMORY_BANK_FORMAT}`"))),
        }
        let mut bank: Option<MemoryBank> = None;
        let mut cur: Option<SystemState> = None;
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0].starts_with('#') {
                continue;
            }
            let floats = |xs: &[&str]| -> Result<Vec<f64>> {
                xs.iter().map(|x| x.parse::<f64>().map_err(|e| parse_err(n, e.to_string()))).collect()
            };
            let int = |x: &str| x.parse::<usize>().map_err(|e| parse_err(n, e.to_string()));
            fn state(cur: &mut Option<SystemState>, n: usize) -> Result<&mut SystemState> {
                cur.as_mut().ok_or_else(|| parse_err(n, "record outside a state block"))
            }
            match f[0] {
                "capacity" => bank = Some(MemoryBank::new(int(f.get(1).copied().unwrap_or(""))?)),
                "state" => {
                    if f.len() != 4 {
                        return Err(parse_err(n, "expected `state <slot> <width> <context>`"));
                    }
                    cur = Some(SystemState {
                        slot: f[1].parse().map_err(|_| parse_err(n, "bad slot"))?,
                        width: int(f[2])?,
                        devices: Vec::new(),
                        links: Vec::new(),
                        nodes: Vec::new(),
                        link_endpoints: Vec::new(),
                        node_devices: Vec::new(),
                        binding: Vec::new(),
                        link_load: Vec::new(),
                        node_load: Vec::new(),
                        instance_load: BTreeMap::new(),
                        service_latency: BTreeMap::new(),
                        context_label: if f[3] == "-" { None } else { Some(int(f[3])?) },
                    });
                }
                "device" | "link" | "node" => {
                    let st = state(&mut cur, n)?;
                    let skip = match f[0] {
                        "device" => 2,
                        "link" => 4,
                        _ => 3,
                    };
                    if f.len() < skip {
                        return Err(parse_err(n, "truncated element record"));
                    }
                    let row = floats(&f[skip..])?;
                    if row.len() != st.width {
                        return Err(parse_err(n, "indicator row width mismatch"));
                    }
                    match f[0] {
                        "device" => st.devices.push(row),
                        "link" => {
                            st.link_endpoints.push((int(f[2])?, int(f[3])?));
                            st.links.push(row)
                        }
                        _ => {
                            st.node_devices.push(int(f[2])?);
                            st.nodes.push(row)
                        }
                    }
                }
                "bind" => {
                    let st = state(&mut cur, n)?;
                    if f.len() != 5 {
                        return Err(parse_err(n, "expected `bind <service> <instance> <node> <paths>`"));
                    }
                    let paths = if f[4] == "-" {
                        Vec::new()
                    } else {
                        f[4].split(';')
                            .map(|p| p.split('-').map(int).collect::<Result<Vec<_>>>())
                            .collect::<Result<Vec<_>>>()?
                    };
                    st.binding.push(BindingEntry { service: int(f[1])?, instance: int(f[2])?, node: int(f[3])?, paths });
                }
                "link_load" => state(&mut cur, n)?.link_load = floats(&f[1..])?,
                "node_load" => state(&mut cur, n)?.node_load = floats(&f[1..])?,
                "instance_load" => {
                    let v = floats(&f[2..3])?[0];
                    state(&mut cur, n)?.instance_load.insert(int(f[1])?, v);
                }
                "service_latency" => {
                    let v = floats(&f[2..3])?[0];
                    state(&mut cur, n)?.service_latency.insert(int(f[1])?, v);
                }
                "end" => {
                    let st = cur.take().ok_or_else(|| parse_err(n, "`end` without a state"))?;
                    bank.as_mut().ok_or_else(|| parse_err(n, "state before capacity"))?.push(st);
                }
                other => return Err(parse_err(n, format!("unknown record `{other}`"))),
            }
        }
        bank.ok_or_else(|| parse_err(1, "missing capacity record"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::Replication;
    use crate::services::{ServiceDescriptor, ServiceRegistry, Stage};
    use crate::topology::test_support::toy;

    fn dims(users: usize, services: usize, requests: usize, ports: usize) -> ResourceDims {
        ResourceDims { users, services, requests, ports, metrics: 3 }
    }

    #[test]
    fn record_sample_writes_and_overwrites() {
        let mut st = ShortTermResourceState::new(0, Owner::Device(0), dims(2, 2, 3, 2));
        st.record_sample(0, 1, 2, 0, &[5.0, 1.0, 2.5]).unwrap();
        assert_eq!(st.value(0, 1, 2, 0, 0), 5.0);
        assert_eq!(st.value(0, 1, 2, 0, 2), 2.5);
        st.record_sample(0, 1, 2, 0, &[7.0, 0.0, 1.0]).unwrap();
        assert_eq!(st.value(0, 1, 2, 0, 0), 7.0);
        assert_eq!(st.occupied(), 1);
        assert!(matches!(st.record_sample(0, 1, 2, 0, &[1.0]), Err(Error::State(_))));
        assert!(st.record_sample(2, 0, 0, 0, &[1.0, 1.0, 1.0]).is_err());
        assert_eq!(st.dims.cells(), 2 * 2 * 3 * 2 * 3);
    }

    #[test]
    fn occupancy_counts_requests_times_ports() {
        let mut st = ShortTermResourceState::new(0, Owner::Device(0), dims(3, 3, 100, 4));
        for k in 0..300 {
            let (u, s, r) = (k % 3, (k / 3) % 3, k / 9);
            for p in [1, 3] {
                st.record_sample(u, s, r, p, &[4.0, 0.0, 2.0]).unwrap();
            }
        }
        assert_eq!(st.occupied(), 300 * 2);
    }

    fn window(owner: Owner, d: ResourceDims, slots: std::ops::Range<Slot>, fill: Option<f64>) -> LongTermResourceState {
        let w: Vec<_> = slots
            .map(|t| {
                let mut s = ShortTermResourceState::new(t, owner, d);
                if let Some(c) = fill {
                    for u in 0..d.users {
                        for sv in 0..d.services {
                            for r in 0..d.requests {
                                for p in 0..d.ports {
                                    s.record_sample(u, sv, r, p, &[c, c, c]).unwrap();
                                }
                            }
                        }
                    }
                }
                s
            })
            .collect();
        let n = w.len();
        LongTermResourceState::new(w, n - 1).unwrap()
    }

    #[test]
    fn zero_window_reduces_to_zero() {
        let long = window(Owner::Device(1), dims(2, 3, 2, 4), 0..9, None);
        let red = reduce_resource_state(&long, &[Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 1)]).unwrap();
        assert_eq!(red.values.len(), 3 * 4 * 2);
        assert!(red.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_window_reduces_to_constant() {
        let long = window(Owner::Node(0), dims(2, 3, 2, 4), 5..14, Some(3.25));
        let red = reduce_resource_state(&long, &[Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 2)]).unwrap();
        assert_eq!(red.values.len(), 24);
        assert!(red.values.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn window_validation() {
        assert!(LongTermResourceState::new(Vec::new(), 0).is_err());
        let d = dims(1, 1, 1, 1);
        let gap = vec![
            ShortTermResourceState::new(0, Owner::Device(0), d),
            ShortTermResourceState::new(2, Owner::Device(0), d),
        ];
        assert!(LongTermResourceState::new(gap, 1).is_err());
        let long = window(Owner::Device(0), d, 0..2, None);
        assert!(reduce_resource_state(&long, &[]).is_err());
    }

    fn random_domain(slot: Slot, seed: u64, dims: (usize, usize, usize, usize)) -> DomainState {
        let mut ds = DomainState::zeros(Domain::Network, slot, dims.0, dims.1, dims.2, dims.3);
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        for v in ds.values.iter_mut() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (x >> 11) as f64 / (1u64 << 53) as f64;
        }
        ds
    }

    #[test]
    fn reduced_domain_dimensions() {
        let w: Vec<_> = (0..4).map(|t| random_domain(t, t as u64, (3, 5, 7, 4))).collect();
        let red = reduce_domain_state(&w, &[Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 3)]).unwrap();
        assert_eq!(red.values.len(), 210);
        assert!(reduce_domain_state(&[], &[Indicator::new(Statistic::Mean, 0)]).is_err());
    }

    #[test]
    fn single_slot_reduction_is_that_slot() {
        let w = vec![random_domain(3, 9, (2, 3, 4, 3))];
        let inds = [Indicator::new(Statistic::Mean, 1), Indicator::new(Statistic::Max, 2), Indicator::new(Statistic::Last, 0)];
        let red = reduce_domain_state(&w, &inds).unwrap();
        for s in 0..2 {
            for n in 0..3 {
                for l in 0..4 {
                    assert_eq!(red.get(s, n, l, 0), w[0].get(s, n, l, 1));
                    assert_eq!(red.get(s, n, l, 1), w[0].get(s, n, l, 2));
                    assert_eq!(red.get(s, n, l, 2), w[0].get(s, n, l, 0));
                }
            }
        }
    }

    #[test]
    fn slot_permutation_does_not_change_reduction() {
        let w: Vec<_> = (0..5).map(|t| random_domain(t, 40 + t as u64, (2, 3, 3, 3))).collect();
        let inds = [Indicator::new(Statistic::Max, 0), Indicator::new(Statistic::Mean, 2)];
        let a = reduce_domain_state(&w, &inds).unwrap();
        // a fixed permutation: sums taken in a different order can differ
        // by rounding, so compare with a tight tolerance
        let p = vec![w[3].clone(), w[0].clone(), w[4].clone(), w[1].clone(), w[2].clone()];
        let b = reduce_domain_state(&p, &inds).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    fn two_instance_setup() -> (Topology, InstanceCatalog, Placement) {
        let t = toy(3, &[(0, 1, 0.2), (1, 2, 0.2)]);
        let mut reg = ServiceRegistry::new();
        reg.register_service(ServiceDescriptor::new(0, vec![Stage::new("a"), Stage::new("b")])).unwrap();
        let cat = InstanceCatalog::build(&reg, Replication::Fixed(1), &t).unwrap();
        let mut p = Placement::new();
        p.bind(&t, &cat.instances[0], 1).unwrap();
        p.bind(&t, &cat.instances[1], 2).unwrap();
        (t, cat, p)
    }

    fn reduced_pair(t: &Topology, cat: &InstanceCatalog, p: &Placement, slot: Slot) -> (ReducedDomainState, ReducedDomainState) {
        let inds = [Indicator::new(Statistic::Mean, 0), Indicator::new(Statistic::Max, 0)];
        let dev: Vec<_> = (0..t.size()).map(|d| ReducedResourceState::zeros(Owner::Device(d), slot, 1, 8, 2)).collect();
        let nodes: Vec<_> = (0..t.size()).map(|d| ReducedResourceState::zeros(Owner::Node(d), slot, 1, 1, 2)).collect();
        let loads = vec![vec![30.0, 60.0]];
        let net = network_domain_state(slot, t, 1, &loads, &dev).unwrap();
        let comp = computing_domain_state(slot, cat, &[0], p, &BTreeMap::from([(0, 10.0), (1, 5.0)]), &nodes).unwrap();
        (reduce_domain_state(&[net], &inds).unwrap(), reduce_domain_state(&[comp], &inds).unwrap())
    }

    #[test]
    fn system_state_binding_and_graph_size() {
        let (t, cat, p) = two_instance_setup();
        let (net, comp) = reduced_pair(&t, &cat, &p, 4);
        let s = build_system_state(&net, &comp, &t, &cat, &p, &LoadSnapshot::default()).unwrap();
        assert_eq!(s.binding.len(), 2);
        assert_eq!(s.element_count(), 3 + 2 + 3);
        // link 0 carries 30 of 300 mbps
        assert!((s.links[0][0] - 0.1).abs() < 1e-12);
        // node 1 hosts instance 0 at half its capacity
        assert!((s.nodes[1][0] - 0.5).abs() < 1e-12);
        assert_eq!(s.nodes[0], vec![0.0, 0.0]);
    }

    #[test]
    fn empty_placement_keeps_annotations() {
        let (t, cat, _) = two_instance_setup();
        let empty = Placement::new();
        let (net, comp) = reduced_pair(&t, &cat, &empty, 2);
        let s = build_system_state(&net, &comp, &t, &cat, &empty, &LoadSnapshot::default()).unwrap();
        assert!(s.binding.is_empty());
        assert_eq!(s.devices.len(), 3);
        assert!(s.links[1][0] > 0.0);
    }

    #[test]
    fn slot_mismatch_is_rejected() {
        let (t, cat, p) = two_instance_setup();
        let (net, _) = reduced_pair(&t, &cat, &p, 1);
        let (_, comp) = reduced_pair(&t, &cat, &p, 2);
        assert!(matches!(
            build_system_state(&net, &comp, &t, &cat, &p, &LoadSnapshot::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn memory_bank_evicts_oldest_and_round_trips() {
        let (t, cat, p) = two_instance_setup();
        let mut bank = MemoryBank::new(3);
        for slot in 0..5 {
            let (net, comp) = reduced_pair(&t, &cat, &p, slot);
            let mut loads = LoadSnapshot::default();
            loads.instance_paths.insert(0, vec![vec![0, 1, 0]]);
            loads.service_latency.insert(0, 1.25);
            let mut s = build_system_state(&net, &comp, &t, &cat, &p, &loads).unwrap();
            s.context_label = if slot % 2 == 0 { Some(slot as usize) } else { None };
            bank.push(s);
        }
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.iter().map(|s| s.slot).collect::<Vec<_>>(), vec![2, 3, 4]);
        let back = MemoryBank::from_text(&bank.to_text()).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn numeric_round_trip() {
        let (t, cat, p) = two_instance_setup();
        let (net, comp) = reduced_pair(&t, &cat, &p, 0);
        let s = build_system_state(&net, &comp, &t, &cat, &p, &LoadSnapshot::default()).unwrap();
        let v = s.numeric();
        assert_eq!(s.with_numeric(&v).unwrap(), s);
        assert!(s.with_numeric(&v[1..]).is_err());
    }
}
