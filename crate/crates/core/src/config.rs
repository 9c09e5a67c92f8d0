//! Experiment configuration: defaults, key-by-key overrides and validation.

use std::fmt::Write as _;

use crate::agents::{DdqlParams, Policy};
use crate::error::{Error, Result};
use crate::placement::{ExactLimits, Replication};
use crate::routing::{RoutingParams, StageCharge};
use crate::services::QosBounds;
use crate::topology::{TierPlan, TopologyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TierChoice {
    /// Thirds of the configured size range.
    Scaled,
    Uniform,
    /// High to 13, moderate to 17, low beyond.
    Fig6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub v_range: (usize, usize),
    pub slots: usize,
    pub warmup_slots: usize,
    pub policies: Vec<Policy>,
    pub allow_skip_opt: bool,
    pub redraw_topology_per_slot: bool,
    pub tier_plan: TierChoice,
    pub replication: Replication,

    pub services: usize,
    pub max_chain: usize,
    pub requests_per_slot: usize,
    pub topology: TopologyParams,
    pub instance_capacity: f64,
    pub context_change: (u32, u32),
    pub qos: QosBounds,
    pub packet_size: u32,

    pub routing: RoutingParams,
    pub energy_weight: f64,
    pub include_transition: bool,
    pub exact: ExactLimits,

    pub vigilance: f64,
    pub update_rate: f64,
    pub contexts: usize,
    pub depth: usize,

    pub resource_window: usize,
    pub domain_window: usize,
    pub memory_bank: usize,
    pub prediction_window: usize,
    pub smoothing: f64,
    pub headroom: f64,

    pub ddql: DdqlParams,
    pub measured_epsilon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            v_range: (4, 9),
            slots: 50,
            warmup_slots: 200,
            policies: vec![Policy::Rnd, Policy::Greedy, Policy::Ddql, Policy::DdqlGnn],
            allow_skip_opt: false,
            redraw_topology_per_slot: false,
            tier_plan: TierChoice::Scaled,
            replication: Replication::Fixed(1),
            services: 3,
            max_chain: 3,
            requests_per_slot: 300,
            topology: TopologyParams::default(),
            instance_capacity: 20.0,
            context_change: (100, 200),
            qos: QosBounds::default(),
            packet_size: 1,
            routing: RoutingParams::default(),
            energy_weight: 0.01,
            include_transition: true,
            exact: ExactLimits::default(),
            vigilance: 0.75,
            update_rate: 0.1,
            contexts: 16,
            depth: 1,
            resource_window: 8,
            domain_window: 8,
            memory_bank: 64,
            prediction_window: 8,
            smoothing: 0.5,
            headroom: 1.0,
            ddql: DdqlParams::default(),
            measured_epsilon: 0.05,
        }
    }
}

/// `(section, key, description)` of every recognised setting.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("experiment", "seed", "root seed"),
    ("experiment", "v_range", "system sizes swept, lo-hi"),
    ("experiment", "slots", "measured slots per size"),
    ("experiment", "warmup_slots", "training slots before measurement"),
    ("experiment", "policies", "comma list of rnd, greedy, ddql, ddql-gnn, opt"),
    ("experiment", "allow_skip_opt", "omit opt where the exact solver is out of limits"),
    ("experiment", "redraw_topology_per_slot", "regenerate the topology every slot"),
    ("experiment", "tier_plan", "energy tiers: scaled, fig6 or uniform"),
    ("experiment", "replication", "fixed:N or demand:FILL_PERCENT"),
    ("table1", "number_of_services", "registered services"),
    ("table1", "number_of_requests_per_time_slot", "requests per slot"),
    ("table1", "number_of_links", "link count factor range, times the size"),
    ("table1", "resource_capacity_bounds", "device, link and node capacity range (mbps)"),
    ("table1", "service_instance_capacity_bound", "capacity of one instance (mbps)"),
    ("table1", "energy_consumptions_per_capacity_unit", "energy rate range"),
    ("table1", "energy_consumptions_per_context_change", "per-instance re-placement energy range"),
    ("table1", "capacity_requirement_per_request", "compute demand range (mbps)"),
    ("table1", "bandwidth_requirement_per_request", "bandwidth demand range (mbps)"),
    ("table1", "latency_requirement_per_request", "latency budget range (ms)"),
    ("table1", "packet_size_per_request", "packet size"),
    ("table1", "profit_per_request", "profit range"),
    ("topology", "link_latency", "link latency range (ms)"),
    ("topology", "energy_high", "high tier energy band"),
    ("topology", "energy_moderate", "moderate tier energy band"),
    ("topology", "energy_low", "low tier energy band"),
    ("topology", "poa_fraction", "share of devices acting as PoAs"),
    ("topology", "ports", "ports per device"),
    ("services", "max_chain", "longest synthetic chain"),
    ("routing", "k", "candidate paths per request, 0 for all"),
    ("routing", "processing_latency", "per-stage processing latency (ms)"),
    ("routing", "include_return", "route back to the PoA"),
    ("routing", "stage_charge", "full or split compute demand per stage"),
    ("objective", "lambda", "energy weight"),
    ("objective", "include_transition", "charge re-placement energy in the objective"),
    ("exact", "max_placements", "largest placement space the exact solver accepts"),
    ("exact", "max_requests", "most requests the exact solver accepts"),
    ("context", "vigilance", "match threshold in (0, 1)"),
    ("context", "update_rate", "centroid update rate in (0, 1]"),
    ("context", "capacity", "most contexts kept"),
    ("context", "depth", "aggregation rounds"),
    ("state", "resource_window", "resource history in slots"),
    ("state", "domain_window", "domain history in slots"),
    ("state", "memory_bank", "system states kept"),
    ("predictor", "window", "states used for prediction"),
    ("predictor", "smoothing", "exponential smoothing factor"),
    ("predictor", "headroom", "fraction of each limit treated as usable"),
    ("ddql", "gamma", "discount"),
    ("ddql", "alpha", "learning rate"),
    ("ddql", "replay_capacity", "replay memory size"),
    ("ddql", "batch", "batch size"),
    ("ddql", "sync_every", "updates between target syncs"),
    ("ddql", "epsilon_start", "initial exploration"),
    ("ddql", "epsilon_end", "final exploration"),
    ("ddql", "decay_fraction", "share of warm-up spent decaying exploration"),
    ("ddql", "measured_epsilon", "exploration during measured slots"),
    ("ddql", "bias", "learn a constant term"),
];

fn range_u32(v: &str) -> Option<(u32, u32)> {
    let (a, b) = v.split_once([',', '-'])?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn range_f64(v: &str) -> Option<(f64, f64)> {
    let (a, b) = v.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn bool_of(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

pub fn parse_v_range(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("v_range `{v}` must look like 4-9"));
    let (a, b) = v.split_once(['-', ',', ':']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn parse_policies(v: &str) -> Result<Vec<Policy>> {
    let mut out: Vec<Policy> = v.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

impl ExperimentConfig {
    /// Applies one `key = value` from section `section`. Unknown keys and
    /// unparsable values are config errors naming the key.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let name = format!("{section}.{key}");
        let bad = || Error::InvalidConfig(format!("invalid value `{v}` for `{name}`"));
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad())?
            };
        }
        match (section, key) {
            ("experiment", "seed") => self.seed = num!(),
            ("experiment", "v_range") => self.v_range = parse_v_range(v)?,
            ("experiment", "slots") => self.slots = num!(),
            ("experiment", "warmup_slots") => self.warmup_slots = num!(),
            ("experiment", "policies") => self.policies = parse_policies(v)?,
            ("experiment", "allow_skip_opt") => self.allow_skip_opt = bool_of(v).ok_or_else(bad)?,
            ("experiment", "redraw_topology_per_slot") => self.redraw_topology_per_slot = bool_of(v).ok_or_else(bad)?,
            ("experiment", "tier_plan") => {
                self.tier_plan = match v {
                    "scaled" => TierChoice::Scaled,
                    "uniform" => TierChoice::Uniform,
                    "fig6" => TierChoice::Fig6,
                    _ => return Err(bad()),
                }
            }
            ("experiment", "replication") => {
                self.replication = match v.split_once(':') {
                    Some(("fixed", n)) => Replication::Fixed(n.parse().map_err(|_| bad())?),
                    Some(("demand", p)) => Replication::DemandDriven {
                        mean_capacity_req: (self.qos.capacity.0 + self.qos.capacity.1).div_ceil(2),
                        fill_percent: p.parse().map_err(|_| bad())?,
                    },
                    _ => return Err(bad()),
                }
            }
            ("table1", "number_of_services") => self.services = num!(),
            ("table1", "number_of_requests_per_time_slot") => self.requests_per_slot = num!(),
            ("table1", "number_of_links") => {
                let (a, b) = range_u32(v).ok_or_else(bad)?;
                self.topology.link_factor = (a as usize, b as usize);
            }
            ("table1", "resource_capacity_bounds") => self.topology.capacity = range_u32(v).ok_or_else(bad)?,
            ("table1", "service_instance_capacity_bound") => self.instance_capacity = num!(),
            ("table1", "energy_consumptions_per_capacity_unit") => self.topology.energy_full = range_u32(v).ok_or_else(bad)?,
            ("table1", "energy_consumptions_per_context_change") => self.context_change = range_u32(v).ok_or_else(bad)?,
            ("table1", "capacity_requirement_per_request") => self.qos.capacity = range_u32(v).ok_or_else(bad)?,
            ("table1", "bandwidth_requirement_per_request") => self.qos.bandwidth = range_u32(v).ok_or_else(bad)?,
            ("table1", "latency_requirement_per_request") => self.qos.latency = range_f64(v).ok_or_else(bad)?,
            ("table1", "packet_size_per_request") => self.packet_size = num!(),
            ("table1", "profit_per_request") => self.qos.profit = range_u32(v).ok_or_else(bad)?,
            ("topology", "link_latency") => self.topology.link_latency = range_f64(v).ok_or_else(bad)?,
            ("topology", "energy_high") => self.topology.energy_high = range_u32(v).ok_or_else(bad)?,
            ("topology", "energy_moderate") => self.topology.energy_moderate = range_u32(v).ok_or_else(bad)?,
            ("topology", "energy_low") => self.topology.energy_low = range_u32(v).ok_or_else(bad)?,
            ("topology", "poa_fraction") => self.topology.poa_fraction = num!(),
            ("topology", "ports") => self.topology.ports = num!(),
            ("services", "max_chain") => self.max_chain = num!(),
            ("routing", "k") => {
                let k: usize = num!();
                self.routing.k = if k == 0 { usize::MAX } else { k };
            }
            ("routing", "processing_latency") => self.routing.processing_latency = num!(),
            ("routing", "include_return") => self.routing.include_return = bool_of(v).ok_or_else(bad)?,
            ("routing", "stage_charge") => {
                self.routing.stage_charge = match v {
                    "full" => StageCharge::Full,
                    "split" => StageCharge::Split,
                    _ => return Err(bad()),
                }
            }
            ("objective", "lambda") => self.energy_weight = num!(),
            ("objective", "include_transition") => self.include_transition = bool_of(v).ok_or_else(bad)?,
            ("exact", "max_placements") => self.exact.max_placements = num!(),
            ("exact", "max_requests") => self.exact.max_requests = num!(),
            ("context", "vigilance") => self.vigilance = num!(),
            ("context", "update_rate") => self.update_rate = num!(),
            ("context", "capacity") => self.contexts = num!(),
            ("context", "depth") => self.depth = num!(),
            ("state", "resource_window") => self.resource_window = num!(),
            ("state", "domain_window") => self.domain_window = num!(),
            ("state", "memory_bank") => self.memory_bank = num!(),
            ("predictor", "window") => self.prediction_window = num!(),
            ("predictor", "smoothing") => self.smoothing = num!(),
            ("predictor", "headroom") => self.headroom = num!(),
            ("ddql", "gamma") => self.ddql.gamma = num!(),
            ("ddql", "alpha") => self.ddql.alpha = num!(),
            ("ddql", "replay_capacity") => self.ddql.replay_capacity = num!(),
            ("ddql", "batch") => self.ddql.batch = num!(),
            ("ddql", "sync_every") => self.ddql.sync_every = num!(),
            ("ddql", "epsilon_start") => self.ddql.epsilon_start = num!(),
            ("ddql", "epsilon_end") => self.ddql.epsilon_end = num!(),
            ("ddql", "decay_fraction") => self.ddql.decay_fraction = num!(),
            ("ddql", "measured_epsilon") => self.measured_epsilon = num!(),
            ("ddql", "bias") => self.ddql.bias = bool_of(v).ok_or_else(bad)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{name}`"))),
        }
        Ok(())
    }

    /// Current value of a setting in the syntax `apply` accepts.
    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        let r = |(a, b): (u32, u32)| format!("{a},{b}");
        let rf = |(a, b): (f64, f64)| format!("{a},{b}");
        Some(match (section, key) {
            ("experiment", "seed") => self.seed.to_string(),
            ("experiment", "v_range") => format!("{}-{}", self.v_range.0, self.v_range.1),
            ("experiment", "slots") => self.slots.to_string(),
            ("experiment", "warmup_slots") => self.warmup_slots.to_string(),
            ("experiment", "policies") => self.policies.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
            ("experiment", "allow_skip_opt") => self.allow_skip_opt.to_string(),
            ("experiment", "redraw_topology_per_slot") => self.redraw_topology_per_slot.to_string(),
            ("experiment", "tier_plan") => match self.tier_plan {
                TierChoice::Scaled => "scaled",
                TierChoice::Uniform => "uniform",
                TierChoice::Fig6 => "fig6",
            }
            .to_string(),
            ("experiment", "replication") => match self.replication {
                Replication::Fixed(n) => format!("fixed:{n}"),
                Replication::DemandDriven { fill_percent, .. } => format!("demand:{fill_percent}"),
            },
            ("table1", "number_of_services") => self.services.to_string(),
            ("table1", "number_of_requests_per_time_slot") => self.requests_per_slot.to_string(),
            ("table1", "number_of_links") => format!("{},{}", self.topology.link_factor.0, self.topology.link_factor.1),
            ("table1", "resource_capacity_bounds") => r(self.topology.capacity),
            ("table1", "service_instance_capacity_bound") => self.instance_capacity.to_string(),
            ("table1", "energy_consumptions_per_capacity_unit") => r(self.topology.energy_full),
            ("table1", "energy_consumptions_per_context_change") => r(self.context_change),
            ("table1", "capacity_requirement_per_request") => r(self.qos.capacity),
            ("table1", "bandwidth_requirement_per_request") => r(self.qos.bandwidth),
            ("table1", "latency_requirement_per_request") => rf(self.qos.latency),
            ("table1", "packet_size_per_request") => self.packet_size.to_string(),
            ("table1", "profit_per_request") => r(self.qos.profit),
            ("topology", "link_latency") => rf(self.topology.link_latency),
            ("topology", "energy_high") => r(self.topology.energy_high),
            ("topology", "energy_moderate") => r(self.topology.energy_moderate),
            ("topology", "energy_low") => r(self.topology.energy_low),
            ("topology", "poa_fraction") => self.topology.poa_fraction.to_string(),
            ("topology", "ports") => self.topology.ports.to_string(),
            ("services", "max_chain") => self.max_chain.to_string(),
            ("routing", "k") => if self.routing.k == usize::MAX { 0 } else { self.routing.k }.to_string(),
            ("routing", "processing_latency") => self.routing.processing_latency.to_string(),
            ("routing", "include_return") => self.routing.include_return.to_string(),
            ("routing", "stage_charge") => match self.routing.stage_charge {
                StageCharge::Full => "full",
                StageCharge::Split => "split",
            }
            .to_string(),
            ("objective", "lambda") => self.energy_weight.to_string(),
            ("objective", "include_transition") => self.include_transition.to_string(),
            ("exact", "max_placements") => self.exact.max_placements.to_string(),
            ("exact", "max_requests") => self.exact.max_requests.to_string(),
            ("context", "vigilance") => self.vigilance.to_string(),
            ("context", "update_rate") => self.update_rate.to_string(),
            ("context", "capacity") => self.contexts.to_string(),
            ("context", "depth") => self.depth.to_string(),
            ("state", "resource_window") => self.resource_window.to_string(),
            ("state", "domain_window") => self.domain_window.to_string(),
            ("state", "memory_bank") => self.memory_bank.to_string(),
            ("predictor", "window") => self.prediction_window.to_string(),
            ("predictor", "smoothing") => self.smoothing.to_string(),
            ("predictor", "headroom") => self.headroom.to_string(),
            ("ddql", "gamma") => self.ddql.gamma.to_string(),
            ("ddql", "alpha") => self.ddql.alpha.to_string(),
            ("ddql", "replay_capacity") => self.ddql.replay_capacity.to_string(),
            ("ddql", "batch") => self.ddql.batch.to_string(),
            ("ddql", "sync_every") => self.ddql.sync_every.to_string(),
            ("ddql", "epsilon_start") => self.ddql.epsilon_start.to_string(),
            ("ddql", "epsilon_end") => self.ddql.epsilon_end.to_string(),
            ("ddql", "decay_fraction") => self.ddql.decay_fraction.to_string(),
            ("ddql", "measured_epsilon") => self.measured_epsilon.to_string(),
            ("ddql", "bias") => self.ddql.bias.to_string(),
            _ => return None,
        })
    }

    /// Resolved configuration as INI text, one section per group.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut current = "";
        for &(section, key, _) in KEYS {
            if section != current {
                if !current.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{section}]");
                current = section;
            }
            let _ = writeln!(s, "{key} = {}", self.get(section, key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (lo, hi) = self.v_range;
        if lo < 2 || lo > hi {
            return bad(format!("experiment.v_range {lo}-{hi} must satisfy 2 <= lo <= hi"));
        }
        if self.slots == 0 {
            return bad("experiment.slots must be positive".into());
        }
        if self.policies.is_empty() {
            return bad("experiment.policies is empty".into());
        }
        if let Replication::Fixed(0) = self.replication {
            return bad("experiment.replication needs at least one replica".into());
        }
        if let Replication::DemandDriven { fill_percent, .. } = self.replication {
            if fill_percent == 0 || fill_percent > 100 {
                return bad("experiment.replication fill must lie in 1..=100".into());
            }
        }
        if self.services == 0 || self.max_chain == 0 {
            return bad("table1.number_of_services and services.max_chain must be positive".into());
        }
        self.topology.validate()?;
        self.qos.validate()?;
        if !(self.instance_capacity > 0.0) {
            return bad("table1.service_instance_capacity_bound must be positive".into());
        }
        if self.context_change.0 > self.context_change.1 {
            return bad("table1.energy_consumptions_per_context_change range".into());
        }
        if self.packet_size == 0 {
            return bad("table1.packet_size_per_request must be positive".into());
        }
        if self.routing.k == 0 || !(self.routing.processing_latency >= 0.0) {
            return bad("routing parameters out of range".into());
        }
        if !(self.energy_weight >= 0.0 && self.energy_weight.is_finite()) {
            return bad(format!("objective.lambda {} must be non-negative", self.energy_weight));
        }
        if !(self.vigilance > 0.0 && self.vigilance < 1.0) {
            return bad(format!("context.vigilance {} outside (0, 1)", self.vigilance));
        }
        if !(self.update_rate > 0.0 && self.update_rate <= 1.0) {
            return bad(format!("context.update_rate {} outside (0, 1]", self.update_rate));
        }
        if self.contexts == 0 || self.memory_bank == 0 || self.prediction_window == 0 {
            return bad("context.capacity, state.memory_bank and predictor.window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return bad(format!("predictor.smoothing {} outside [0, 1]", self.smoothing));
        }
        if !(self.headroom > 0.0) {
            return bad("predictor.headroom must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.measured_epsilon) {
            return bad("ddql.measured_epsilon outside [0, 1]".into());
        }
        self.ddql.validate()
    }

    pub fn tier_plan(&self) -> TierPlan {
        match self.tier_plan {
            TierChoice::Scaled => TierPlan::scaled(self.v_range.0, self.v_range.1),
            TierChoice::Uniform => TierPlan::uniform(),
            TierChoice::Fig6 => TierPlan::fig6(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        (self.v_range.0..=self.v_range.1).collect()
    }

    /// Small workloads on which the exact solver runs every slot.
    pub fn desk() -> Self {
        ExperimentConfig {
            requests_per_slot: 8,
            max_chain: 2,
            policies: Policy::ALL.to_vec(),
            warmup_slots: 100,
            exact: ExactLimits { max_placements: 2_000_000, max_requests: 12 },
            ..Self::default()
        }
    }
}
