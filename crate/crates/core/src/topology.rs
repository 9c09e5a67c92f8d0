//! Converged compute-network graphs: network devices, one computing node per
//! device, and undirected links with bandwidth, latency and energy rates.

use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{parse_err, Error, Result};
use crate::rng::{substream, Stream};

pub type DeviceId = usize;
pub type NodeId = usize;
pub type LinkId = usize;

pub const TOPOLOGY_FORMAT: &str = "# acnc-topology v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDevice {
    pub id: DeviceId,
    pub ports: usize,
    pub energy_per_unit: f64,
    pub is_poa: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputingNode {
    pub id: NodeId,
    pub capacity: f64,
    pub energy_per_unit: f64,
    pub attached_device: DeviceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: LinkId,
    /// Stored with `endpoints.0 < endpoints.1`.
    pub endpoints: (DeviceId, DeviceId),
    pub bandwidth: f64,
    pub latency: f64,
    pub energy_per_unit: f64,
}

impl Link {
    pub fn other(&self, d: DeviceId) -> DeviceId {
        if self.endpoints.0 == d {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyTier {
    Full,
    High,
    Moderate,
    Low,
}

impl EnergyTier {
    pub fn name(self) -> &'static str {
        match self {
            EnergyTier::Full => "full",
            EnergyTier::High => "high",
            EnergyTier::Moderate => "moderate",
            EnergyTier::Low => "low",
        }
    }
}

/// Maps device ordinals (1-based position in the device list) to energy tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TierPlan {
    /// `(last ordinal inclusive, tier)` in increasing order; ordinals past the
    /// last step use `tail`.
    steps: Vec<(usize, EnergyTier)>,
    tail: EnergyTier,
}

impl TierPlan {
    /// Every device draws from the full energy band.
    pub fn uniform() -> Self {
        TierPlan { steps: Vec::new(), tail: EnergyTier::Full }
    }

    /// High up to ordinal 13, moderate 14 to 17, low from 18 on.
    pub fn fig6() -> Self {
        Self::scaled(10, 21)
    }

    /// Splits the grown ordinals `lo..=hi` into thirds: high (including every
    /// ordinal below `lo`), moderate, low.
    pub fn scaled(lo: usize, hi: usize) -> Self {
        let n = hi.saturating_sub(lo) + 1;
        let base = lo.saturating_sub(1);
        let high = base + n.div_ceil(3);
        let moderate = base + (2 * n).div_ceil(3);
        TierPlan {
            steps: vec![(high, EnergyTier::High), (moderate, EnergyTier::Moderate)],
            tail: EnergyTier::Low,
        }
    }

    pub fn tier_of(&self, id: DeviceId) -> EnergyTier {
        let ordinal = id + 1;
        self.steps
            .iter()
            .find(|(last, _)| ordinal <= *last)
            .map(|(_, t)| *t)
            .unwrap_or(self.tail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyParams {
    pub capacity: (u32, u32),
    pub link_factor: (usize, usize),
    pub link_latency: (f64, f64),
    pub energy_full: (u32, u32),
    pub energy_high: (u32, u32),
    pub energy_moderate: (u32, u32),
    pub energy_low: (u32, u32),
    pub poa_fraction: f64,
    pub ports: usize,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            capacity: (250, 300),
            link_factor: (3, 5),
            link_latency: (0.1, 0.5),
            energy_full: (10, 20),
            energy_high: (16, 20),
            energy_moderate: (13, 16),
            energy_low: (10, 13),
            poa_fraction: 0.25,
            ports: 32,
        }
    }
}

impl TopologyParams {
    pub fn band(&self, tier: EnergyTier) -> (u32, u32) {
        match tier {
            EnergyTier::Full => self.energy_full,
            EnergyTier::High => self.energy_high,
            EnergyTier::Moderate => self.energy_moderate,
            EnergyTier::Low => self.energy_low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("capacity", self.capacity),
            ("energy", self.energy_full),
            ("energy_high", self.energy_high),
            ("energy_moderate", self.energy_moderate),
            ("energy_low", self.energy_low),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidConfig(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if self.link_factor.0 > self.link_factor.1 {
            return Err(Error::InvalidConfig("link factor range".into()));
        }
        let (llo, lhi) = self.link_latency;
        if !(llo > 0.0 && llo <= lhi) {
            return Err(Error::InvalidConfig(format!("link latency range [{llo}, {lhi}]")));
        }
        if !(0.0..=1.0).contains(&self.poa_fraction) {
            return Err(Error::InvalidConfig("poa fraction must lie in [0, 1]".into()));
        }
        if self.ports < 2 {
            return Err(Error::InvalidConfig("ports must be at least 2".into()));
        }
        Ok(())
    }

    pub fn poa_count(&self, size: usize) -> usize {
        ((size as f64 * self.poa_fraction).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Latency,
    Hops,
    /// Link energy rate per unit of bandwidth.
    Energy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Device sequence including both endpoints; a single device for `a == b`.
    pub devices: Vec<DeviceId>,
    pub latency: f64,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.devices.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub devices: Vec<NetworkDevice>,
    pub nodes: Vec<ComputingNode>,
    pub links: Vec<Link>,
    /// Link count drawn before clamping to the simple-graph range.
    pub drawn_link_count: usize,
    adjacency: Vec<Vec<(DeviceId, LinkId)>>,
}

fn clamp_link_count(size: usize, drawn: usize) -> usize {
    let lo = size - 1;
    let hi = size * (size - 1) / 2;
    drawn.clamp(lo, hi)
}

fn draw_device(
    id: DeviceId,
    size_hint_poa: bool,
    plan: &TierPlan,
    params: &TopologyParams,
    seed: u64,
) -> (NetworkDevice, ComputingNode, Option<DeviceId>) {
    let mut rng = substream(seed, Stream::Device(id));
    let parent = if id > 0 { Some(rng.gen_range(0..id)) } else { None };
    let (elo, ehi) = params.band(plan.tier_of(id));
    let device_energy = rng.gen_range(elo..=ehi) as f64;
    let (clo, chi) = params.capacity;
    let capacity = rng.gen_range(clo..=chi) as f64;
    let node_energy = rng.gen_range(elo..=ehi) as f64;
    (
        NetworkDevice { id, ports: params.ports, energy_per_unit: device_energy, is_poa: size_hint_poa },
        ComputingNode { id, capacity, energy_per_unit: node_energy, attached_device: id },
        parent,
    )
}

fn draw_link(
    id: LinkId,
    a: DeviceId,
    b: DeviceId,
    plan: &TierPlan,
    params: &TopologyParams,
    seed: u64,
) -> Link {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    let mut rng = substream(seed, Stream::Link(a, b));
    let (clo, chi) = params.capacity;
    let bandwidth = rng.gen_range(clo..=chi) as f64;
    let (llo, lhi) = params.link_latency;
    let latency = if llo == lhi { llo } else { rng.gen_range(llo..lhi) };
    let (elo, ehi) = params.band(plan.tier_of(b));
    let energy = rng.gen_range(elo..=ehi) as f64;
    Link { id, endpoints: (a, b), bandwidth, latency, energy_per_unit: energy }
}

pub fn draw_link_count(size: usize, params: &TopologyParams, seed: u64) -> usize {
    let mut rng = substream(seed, Stream::LinkCount(size));
    rng.gen_range(params.link_factor.0 * size..=params.link_factor.1 * size)
}

/// Builds a connected topology: a random spanning tree first, then uniformly
/// chosen extra edges up to the clamped link count.
pub fn generate_topology(
    size: usize,
    plan: &TierPlan,
    params: &TopologyParams,
    seed: u64,
) -> Result<Topology> {
    if size < 2 {
        return Err(Error::InvalidConfig(format!("topology size must be at least 2, got {size}")));
    }
    params.validate()?;
    let poas = params.poa_count(size);
    let mut devices = Vec::with_capacity(size);
    let mut nodes = Vec::with_capacity(size);
    let mut pairs = BTreeSet::new();
    for id in 0..size {
        let (d, n, parent) = draw_device(id, id < poas, plan, params, seed);
        devices.push(d);
        nodes.push(n);
        if let Some(p) = parent {
            pairs.insert((p, id));
        }
    }
    let drawn = draw_link_count(size, params, seed);
    let target = clamp_link_count(size, drawn);
    let mut degree = vec![0usize; size];
    for &(a, b) in &pairs {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut candidates: Vec<(DeviceId, DeviceId)> = (0..size)
        .flat_map(|a| (a + 1..size).map(move |b| (a, b)))
        .filter(|p| !pairs.contains(p))
        .collect();
    candidates.shuffle(&mut substream(seed, Stream::ExtraLinks(size)));
    add_links(&mut pairs, &mut degree, candidates, target, params.ports);
    let links = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (a, b))| draw_link(id, a, b, plan, params, seed))
        .collect();
    Ok(Topology::from_parts(devices, nodes, links, drawn))
}

fn add_links(
    pairs: &mut BTreeSet<(DeviceId, DeviceId)>,
    degree: &mut [usize],
    candidates: Vec<(DeviceId, DeviceId)>,
    target: usize,
    ports: usize,
) -> Vec<(DeviceId, DeviceId)> {
    // port 0 is reserved for the local computing node
    let max_degree = ports - 1;
    let mut added = Vec::new();
    for (a, b) in candidates {
        if pairs.len() >= target {
            break;
        }
        if degree[a] >= max_degree || degree[b] >= max_degree {
            continue;
        }
        pairs.insert((a, b));
        degree[a] += 1;
        degree[b] += 1;
        added.push((a, b));
    }
    added
}

/// Appends devices `base.size()..new_size`. Existing devices, nodes and links
/// are kept verbatim; new links always touch at least one new device.
pub fn grow_topology(
    base: &Topology,
    new_size: usize,
    plan: &TierPlan,
    params: &TopologyParams,
    seed: u64,
) -> Result<Topology> {
    let old = base.size();
    if new_size <= old {
        return Err(Error::InvalidConfig(format!(
            "grow target {new_size} must exceed current size {old}"
        )));
    }
    params.validate()?;
    let mut devices = base.devices.clone();
    let mut nodes = base.nodes.clone();
    let mut pairs: BTreeSet<(DeviceId, DeviceId)> =
        base.links.iter().map(|l| l.endpoints).collect();
    let mut degree = vec![0usize; new_size];
    for l in &base.links {
        degree[l.endpoints.0] += 1;
        degree[l.endpoints.1] += 1;
    }
    let mut new_pairs = Vec::new();
    for id in old..new_size {
        let (d, n, parent) = draw_device(id, false, plan, params, seed);
        devices.push(d);
        nodes.push(n);
        let p = parent.expect("grown devices always have a parent");
        pairs.insert((p, id));
        degree[p] += 1;
        degree[id] += 1;
        new_pairs.push((p, id));
    }
    let drawn = draw_link_count(new_size, params, seed);
    let target = clamp_link_count(new_size, drawn);
    let mut candidates: Vec<(DeviceId, DeviceId)> = (0..new_size)
        .flat_map(|a| (a + 1..new_size).map(move |b| (a, b)))
        .filter(|&(a, b)| b >= old && !pairs.contains(&(a, b)))
        .collect();
    candidates.shuffle(&mut substream(seed, Stream::GrowLinks { from: old, to: new_size }));
    new_pairs.extend(add_links(&mut pairs, &mut degree, candidates, target, params.ports));
    new_pairs.sort_unstable();
    let mut links = base.links.clone();
    for (a, b) in new_pairs {
        let id = links.len();
        links.push(draw_link(id, a, b, plan, params, seed));
    }
    Ok(Topology::from_parts(devices, nodes, links, drawn))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    device: DeviceId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.device.cmp(&self.device))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Devices and links a restricted shortest-path search must avoid.
#[derive(Debug, Default, Clone)]
pub struct Exclusions {
    pub devices: BTreeSet<DeviceId>,
    pub links: BTreeSet<LinkId>,
}

fn near_equal(x: f64, y: f64) -> bool {
    (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0)
}

impl Topology {
    pub fn from_parts(
        devices: Vec<NetworkDevice>,
        nodes: Vec<ComputingNode>,
        links: Vec<Link>,
        drawn_link_count: usize,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); devices.len()];
        for l in &links {
            let (a, b) = l.endpoints;
            adjacency[a].push((b, l.id));
            adjacency[b].push((a, l.id));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Topology { devices, nodes, links, drawn_link_count, adjacency }
    }

    pub fn size(&self) -> usize {
        self.devices.len()
    }

    pub fn neighbors(&self, d: DeviceId) -> &[(DeviceId, LinkId)] {
        &self.adjacency[d]
    }

    pub fn link_between(&self, a: DeviceId, b: DeviceId) -> Option<LinkId> {
        self.adjacency
            .get(a)?
            .binary_search_by(|(n, _)| n.cmp(&b))
            .ok()
            .map(|i| self.adjacency[a][i].1)
    }

    pub fn poas(&self) -> Vec<DeviceId> {
        self.devices.iter().filter(|d| d.is_poa).map(|d| d.id).collect()
    }

    /// Port index on `d` that faces link `l` (port 0 is the local port).
    pub fn port_of(&self, d: DeviceId, l: LinkId) -> Option<usize> {
        self.adjacency[d].iter().position(|&(_, id)| id == l).map(|i| i + 1)
    }

    pub fn node_at(&self, d: DeviceId) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.attached_device == d).map(|n| n.id)
    }

    fn weight(&self, l: LinkId, metric: Metric) -> f64 {
        match metric {
            Metric::Latency => self.links[l].latency,
            Metric::Hops => 1.0,
            Metric::Energy => self.links[l].energy_per_unit,
        }
    }

    pub fn is_connected(&self) -> bool {
        if self.devices.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.size()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(d) = queue.pop_front() {
            for &(n, _) in &self.adjacency[d] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Cost-to-`target` for every device, honouring exclusions.
    pub fn distances_to(&self, target: DeviceId, metric: Metric, ex: &Exclusions) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.size()];
        if ex.devices.contains(&target) {
            return dist;
        }
        dist[target] = 0.0;
        let mut heap = BinaryHeap::from([HeapEntry { cost: 0.0, device: target }]);
        while let Some(HeapEntry { cost, device }) = heap.pop() {
            if cost > dist[device] {
                continue;
            }
            for &(n, l) in &self.adjacency[device] {
                if ex.devices.contains(&n) || ex.links.contains(&l) {
                    continue;
                }
                let c = cost + self.weight(l, metric);
                if c < dist[n] {
                    dist[n] = c;
                    heap.push(HeapEntry { cost: c, device: n });
                }
            }
        }
        dist
    }

    /// Shortest path under exclusions; among equal-cost paths the one whose
    /// first divergent hop has the smaller device id wins.
    pub fn restricted_shortest_path(
        &self,
        a: DeviceId,
        b: DeviceId,
        metric: Metric,
        ex: &Exclusions,
    ) -> Option<Path> {
        if ex.devices.contains(&a) {
            return None;
        }
        let dist = self.distances_to(b, metric, ex);
        if !dist[a].is_finite() {
            return None;
        }
        let mut devices = vec![a];
        let mut latency = 0.0;
        let mut cur = a;
        while cur != b {
            let (next, link) = self.adjacency[cur]
                .iter()
                .copied()
                .filter(|&(n, l)| !ex.devices.contains(&n) && !ex.links.contains(&l))
                .find(|&(n, l)| {
                    dist[n].is_finite()
                        && dist[n] < dist[cur]
                        && near_equal(self.weight(l, metric) + dist[n], dist[cur])
                })?;
            latency += self.links[link].latency;
            devices.push(next);
            cur = next;
        }
        Some(Path { devices, latency })
    }

    pub fn shortest_path(&self, a: DeviceId, b: DeviceId, metric: Metric) -> Result<Path> {
        for d in [a, b] {
            if d >= self.size() {
                return Err(Error::InvalidConfig(format!("unknown device {d}")));
            }
        }
        self.restricted_shortest_path(a, b, metric, &Exclusions::default())
            .ok_or(Error::Unreachable { from: a, to: b })
    }

    /// Sum of link latencies along a device sequence, or `None` if two
    /// consecutive devices are not adjacent.
    pub fn sequence_latency(&self, devices: &[DeviceId]) -> Option<f64> {
        devices
            .windows(2)
            .map(|w| self.link_between(w[0], w[1]).map(|l| self.links[l].latency))
            .sum()
    }

    pub fn tier_histogram(&self, plan: &TierPlan) -> Vec<(EnergyTier, usize)> {
        let mut out: Vec<(EnergyTier, usize)> = Vec::new();
        for d in &self.devices {
            let t = plan.tier_of(d.id);
            match out.iter_mut().find(|(x, _)| *x == t) {
                Some((_, c)) => *c += 1,
                None => out.push((t, 1)),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TOPOLOGY_FORMAT}");
        let _ = writeln!(s, "# device <id> <ports> <energy_per_unit> <is_poa>");
        let _ = writeln!(s, "# node <id> <capacity> <energy_per_unit> <attached_device>");
        let _ = writeln!(s, "# link <id> <a> <b> <bandwidth> <latency_ms> <energy_per_unit>");
        let _ = writeln!(s, "size {} drawn_links {}", self.size(), self.drawn_link_count);
        for d in &self.devices {
            let _ = writeln!(s, "device {} {} {} {}", d.id, d.ports, d.energy_per_unit, d.is_poa as u8);
        }
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "node {} {} {} {}",
                n.id, n.capacity, n.energy_per_unit, n.attached_device
            );
        }
        for l in &self.links {
            let _ = writeln!(
                s,
                "link {} {} {} {} {} {}",
                l.id, l.endpoints.0, l.endpoints.1, l.bandwidth, l.latency, l.energy_per_unit
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Topology> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TOPOLOGY_FORMAT => {}
            _ => return Err(parse_err(1, format!("expected header `{TOPOLOGY_FORMAT}`"))),
        }
        let mut devices = Vec::new();
        let mut nodes = Vec::new();
        let mut links = Vec::new();
        let mut size = None;
        let mut drawn = 0;
        for (i, line) in lines {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .ok_or_else(|| parse_err(n, "missing field"))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(n, e.to_string()))
            };
            let idx = |k: usize| -> Result<usize> {
                f.get(k)
                    .ok_or_else(|| parse_err(n, "missing field"))?
                    .parse::<usize>()
                    .map_err(|e| parse_err(n, e.to_string()))
            };
            match f[0] {
                "size" => {
                    size = Some(idx(1)?);
                    drawn = idx(3)?;
                }
                "device" => devices.push(NetworkDevice {
                    id: idx(1)?,
                    ports: idx(2)?,
                    energy_per_unit: num(3)?,
                    is_poa: idx(4)? != 0,
                }),
                "node" => nodes.push(ComputingNode {
                    id: idx(1)?,
                    capacity: num(2)?,
                    energy_per_unit: num(3)?,
                    attached_device: idx(4)?,
                }),
                "link" => links.push(Link {
                    id: idx(1)?,
                    endpoints: (idx(2)?, idx(3)?),
                    bandwidth: num(4)?,
                    latency: num(5)?,
                    energy_per_unit: num(6)?,
                }),
                other => return Err(parse_err(n, format!("unknown record `{other}`"))),
            }
        }
        let size = size.ok_or_else(|| parse_err(1, "missing size record"))?;
        let t = Topology::from_parts(devices, nodes, links, drawn);
        t.validate(size)?;
        Ok(t)
    }

    fn validate(&self, size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.devices.len() != size || self.nodes.len() != size {
            return bad(format!("expected {size} devices and nodes"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.id != i || d.ports < 1 || !(d.energy_per_unit > 0.0) {
                return bad(format!("device {i} is malformed"));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i || n.attached_device >= size || !(n.capacity > 0.0) || !(n.energy_per_unit > 0.0) {
                return bad(format!("node {i} is malformed"));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            let (a, b) = l.endpoints;
            if l.id != i || a >= b || b >= size || !seen.insert((a, b)) {
                return bad(format!("link {i} is malformed or duplicated"));
            }
            if !(l.bandwidth > 0.0 && l.latency > 0.0 && l.energy_per_unit > 0.0) {
                return bad(format!("link {i} has a non-positive attribute"));
            }
        }
        if !self.is_connected() {
            return bad("topology is not connected".into());
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Hand-built topology: `edges` are `(a, b, latency)`; every link gets
    /// bandwidth 300 and energy 10, every node capacity 300 and energy 10.
    pub fn toy(size: usize, edges: &[(DeviceId, DeviceId, f64)]) -> Topology {
        let devices = (0..size)
            .map(|id| NetworkDevice { id, ports: 8, energy_per_unit: 10.0, is_poa: id == 0 })
            .collect();
        let nodes = (0..size)
            .map(|id| ComputingNode { id, capacity: 300.0, energy_per_unit: 10.0, attached_device: id })
            .collect();
        let links = edges
            .iter()
            .enumerate()
            .map(|(id, &(a, b, lat))| Link {
                id,
                endpoints: (a.min(b), a.max(b)),
                bandwidth: 300.0,
                latency: lat,
                energy_per_unit: 10.0,
            })
            .collect();
        Topology::from_parts(devices, nodes, links, edges.len())
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::toy;
    use super::*;

    fn params() -> TopologyParams {
        TopologyParams::default()
    }

    #[test]
    fn size_ten_link_count_in_clamped_range() {
        let t = generate_topology(10, &TierPlan::uniform(), &params(), 7).unwrap();
        assert!((30..=45).contains(&t.links.len()), "{}", t.links.len());
        assert!((30..=50).contains(&t.drawn_link_count));
        assert_eq!(t.nodes.len(), 10);
    }

    #[test]
    fn size_two_has_single_link() {
        for seed in 0..20 {
            let t = generate_topology(2, &TierPlan::uniform(), &params(), seed).unwrap();
            assert_eq!(t.links.len(), 1);
        }
    }

    #[test]
    fn size_below_two_rejected() {
        assert!(matches!(
            generate_topology(1, &TierPlan::uniform(), &params(), 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn size_four_is_reachable_from_device_zero() {
        let t = generate_topology(4, &TierPlan::uniform(), &params(), 1).unwrap();
        // independent BFS over the raw link list
        let mut reached = vec![0usize];
        let mut frontier = vec![0usize];
        while let Some(d) = frontier.pop() {
            for l in &t.links {
                let (a, b) = l.endpoints;
                let other = if a == d { b } else if b == d { a } else { continue };
                if !reached.contains(&other) {
                    reached.push(other);
                    frontier.push(other);
                }
            }
        }
        reached.sort_unstable();
        assert_eq!(reached, vec![0, 1, 2, 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_topology(12, &TierPlan::fig6(), &params(), 99).unwrap();
        let b = generate_topology(12, &TierPlan::fig6(), &params(), 99).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn fig6_plan_tiers() {
        let plan = TierPlan::fig6();
        assert_eq!(plan.tier_of(0), EnergyTier::High);
        assert_eq!(plan.tier_of(12), EnergyTier::High); // 13th device
        assert_eq!(plan.tier_of(13), EnergyTier::Moderate); // 14th device
        assert_eq!(plan.tier_of(16), EnergyTier::Moderate);
        assert_eq!(plan.tier_of(17), EnergyTier::Low);
        assert_eq!(plan.tier_of(20), EnergyTier::Low);
    }

    #[test]
    fn growing_13_to_14_draws_moderate_band() {
        let p = params();
        let plan = TierPlan::fig6();
        let base = generate_topology(13, &plan, &p, 5).unwrap();
        let grown = grow_topology(&base, 14, &plan, &p, 5).unwrap();
        let e = grown.devices[13].energy_per_unit;
        assert!((13.0..=16.0).contains(&e));
        let ne = grown.nodes[13].energy_per_unit;
        assert!((13.0..=16.0).contains(&ne));
        assert_eq!(&grown.devices[..13], &base.devices[..]);
        assert_eq!(&grown.links[..base.links.len()], &base.links[..]);
        for l in &grown.links[base.links.len()..] {
            assert!(l.endpoints.1 >= 13);
        }
        assert!(grown.is_connected());
    }

    #[test]
    fn grow_by_zero_is_an_error() {
        let p = params();
        let base = generate_topology(5, &TierPlan::uniform(), &p, 5).unwrap();
        assert!(grow_topology(&base, 5, &TierPlan::uniform(), &p, 5).is_err());
    }

    #[test]
    fn stepwise_and_one_shot_growth_agree_on_tiers() {
        let p = params();
        let plan = TierPlan::fig6();
        let base = generate_topology(10, &plan, &p, 11).unwrap();
        let mut stepped = base.clone();
        for v in 11..=21 {
            stepped = grow_topology(&stepped, v, &plan, &p, 11).unwrap();
        }
        let direct = grow_topology(&base, 21, &plan, &p, 11).unwrap();
        assert_eq!(stepped.devices, direct.devices);
        assert_eq!(stepped.nodes, direct.nodes);
        for d in &direct.devices {
            let (lo, hi) = p.band(plan.tier_of(d.id));
            assert!((lo as f64..=hi as f64).contains(&d.energy_per_unit));
        }
    }

    #[test]
    fn shortest_path_identity() {
        let t = toy(2, &[(0, 1, 1.0)]);
        let p = t.shortest_path(1, 1, Metric::Latency).unwrap();
        assert_eq!(p.hops(), 0);
        assert_eq!(p.latency, 0.0);
    }

    #[test]
    fn triangle_avoids_slow_edge() {
        // 0-1: 3 ms, 0-2: 1 ms, 2-1: 1 ms
        let t = toy(3, &[(0, 1, 3.0), (0, 2, 1.0), (1, 2, 1.0)]);
        let p = t.shortest_path(0, 1, Metric::Latency).unwrap();
        // exhaustive: [0,1] = 3, [0,2,1] = 2
        assert_eq!(p.devices, vec![0, 2, 1]);
        assert!((p.latency - 2.0).abs() < 1e-12);
        let h = t.shortest_path(0, 1, Metric::Hops).unwrap();
        assert_eq!(h.devices, vec![0, 1]);
    }

    #[test]
    fn equal_cost_tie_break_prefers_smaller_first_divergent_hop() {
        // square 0-1-3 and 0-2-3, all 1 ms
        let t = toy(4, &[(0, 2, 1.0), (2, 3, 1.0), (0, 1, 1.0), (1, 3, 1.0)]);
        let p = t.shortest_path(0, 3, Metric::Latency).unwrap();
        assert_eq!(p.devices, vec![0, 1, 3]);
        let q = t.shortest_path(3, 0, Metric::Latency).unwrap();
        assert_eq!(q.devices, vec![3, 1, 0]);
    }

    #[test]
    fn text_round_trip() {
        let t = generate_topology(6, &TierPlan::fig6(), &params(), 3).unwrap();
        let back = Topology::from_text(&t.to_text()).unwrap();
        assert_eq!(t, back);
        assert!(Topology::from_text("nonsense").is_err());
    }

    #[test]
    fn every_poa_has_a_link() {
        let t = generate_topology(9, &TierPlan::uniform(), &params(), 2).unwrap();
        assert_eq!(t.poas(), vec![0, 1]);
        for p in t.poas() {
            assert!(!t.neighbors(p).is_empty());
        }
    }
}
