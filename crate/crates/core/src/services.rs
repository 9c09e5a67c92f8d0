//! Service registry, request workloads and per-service reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::topology::DeviceId;

pub type ServiceId = usize;
pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityClass {
    Any,
    /// Node capacity at or above the median node capacity.
    High,
    /// Node capacity at or below the median node capacity.
    Low,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub label: String,
    pub class: CapacityClass,
}

impl Stage {
    pub fn new(label: impl Into<String>) -> Self {
        Stage { label: label.into(), class: CapacityClass::Any }
    }

    pub fn with_class(label: impl Into<String>, class: CapacityClass) -> Self {
        Stage { label: label.into(), class }
    }
}

/// Closed intervals requirement draws are taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct QosBounds {
    pub capacity: (u32, u32),
    pub bandwidth: (u32, u32),
    pub latency: (f64, f64),
    pub profit: (u32, u32),
}

impl Default for QosBounds {
    fn default() -> Self {
        QosBounds { capacity: (4, 8), bandwidth: (2, 10), latency: (1.0, 3.0), profit: (5, 15) }
    }
}

impl QosBounds {
    pub fn validate(&self) -> Result<()> {
        let int = [("capacity", self.capacity), ("bandwidth", self.bandwidth), ("profit", self.profit)];
        for (name, (lo, hi)) in int {
            if lo > hi {
                return Err(Error::InvalidConfig(format!("{name} bounds [{lo}, {hi}]")));
            }
        }
        let (lo, hi) = self.latency;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("latency bounds [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceDescriptor {
    pub id: ServiceId,
    pub name: String,
    pub chain: Vec<Stage>,
    pub instance_capacity: f64,
    pub qos: QosBounds,
    /// Requests per slot hint used before any demand has been observed.
    pub expected_demand: f64,
}

impl ServiceDescriptor {
    pub fn new(id: ServiceId, chain: Vec<Stage>) -> Self {
        ServiceDescriptor {
            id,
            name: format!("svc{id}"),
            chain,
            instance_capacity: 20.0,
            qos: QosBounds::default(),
            expected_demand: 0.0,
        }
    }

    /// Upper latency bound requests of this service may ask for.
    pub fn latency_bound(&self) -> f64 {
        self.qos.latency.1
    }

    /// Applies one `key = value` setting from a service section of a config
    /// file. Recognised keys: `name`, `chain` (comma separated labels, an
    /// optional `:high`/`:low` suffix sets the capacity class),
    /// `instance_capacity`, `capacity_req`, `bandwidth_req`,
    /// `latency_budget`, `profit` (each `lo,hi`), `expected_demand`.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |m: &str| Error::InvalidConfig(format!("service {}: {key}: {m}", self.id));
        let pair_u32 = |v: &str| -> Result<(u32, u32)> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [a, b] => Ok((a.parse().map_err(|_| bad("not an integer"))?, b.parse().map_err(|_| bad("not an integer"))?)),
                _ => Err(bad("expected `lo,hi`")),
            }
        };
        match key {
            "name" => self.name = value.trim().to_string(),
            "chain" => {
                let mut chain = Vec::new();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let stage = match item.split_once(':') {
                        Some((l, "high")) => Stage::with_class(l, CapacityClass::High),
                        Some((l, "low")) => Stage::with_class(l, CapacityClass::Low),
                        Some(_) => return Err(bad("unknown capacity class")),
                        None => Stage::new(item),
                    };
                    chain.push(stage);
                }
                self.chain = chain;
            }
            "instance_capacity" => {
                self.instance_capacity = value.trim().parse().map_err(|_| bad("not a number"))?
            }
            "expected_demand" => {
                self.expected_demand = value.trim().parse().map_err(|_| bad("not a number"))?
            }
            "capacity_req" => self.qos.capacity = pair_u32(value)?,
            "bandwidth_req" => self.qos.bandwidth = pair_u32(value)?,
            "profit" => self.qos.profit = pair_u32(value)?,
            "latency_budget" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                match parts.as_slice() {
                    [a, b] => {
                        self.qos.latency = (
                            a.parse().map_err(|_| bad("not a number"))?,
                            b.parse().map_err(|_| bad("not a number"))?,
                        )
                    }
                    _ => return Err(bad("expected `lo,hi`")),
                }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown service key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub user: DeviceId,
    pub service: ServiceId,
    pub role: Role,
    pub capacity_req: f64,
    pub bandwidth_req: f64,
    pub latency_budget: f64,
    pub packet_size: u32,
    pub profit: f64,
    pub slot: u64,
    /// The other half of a decomposed holographic pair.
    pub linked: Option<RequestId>,
}

pub const REQUEST_CSV_HEADER: &str =
    "id,slot,user,service,role,capacity_req,bandwidth_req,latency_budget,packet_size,profit,linked";

pub fn requests_to_csv(requests: &[Request]) -> String {
    let mut s = String::from(REQUEST_CSV_HEADER);
    s.push('\n');
    for r in requests {
        let role = match r.role {
            Role::Primary => "primary",
            Role::Auxiliary => "auxiliary",
        };
        let linked = r.linked.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.id, r.slot, r.user, r.service, role, r.capacity_req, r.bandwidth_req,
            r.latency_budget, r.packet_size, r.profit, linked
        );
    }
    s
}

pub const HOLO_VIEW_STRUCTURE: &str = "view-structure";
pub const HOLO_POLISH: &str = "polish";

#[derive(Debug, Clone, Default)]
pub struct ServiceRegistry {
    services: BTreeMap<ServiceId, ServiceDescriptor>,
    holographic: Option<(ServiceId, ServiceId)>,
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_service(&mut self, d: ServiceDescriptor) -> Result<ServiceId> {
        if d.chain.is_empty() || d.chain.iter().any(|s| s.label.is_empty()) {
            return Err(Error::Registration(format!("service {} has an empty chain label", d.id)));
        }
        if !(d.instance_capacity > 0.0) {
            return Err(Error::Registration(format!("service {} instance capacity must be positive", d.id)));
        }
        d.qos.validate().map_err(|e| Error::Registration(e.to_string()))?;
        if self.services.contains_key(&d.id) {
            return Err(Error::Registration(format!("service id {} already registered", d.id)));
        }
        let id = d.id;
        self.services.insert(id, d);
        Ok(id)
    }

    /// Registers the two-stage holographic service (view structure on a
    /// high-capacity node, polish on a low-capacity node) and its auxiliary
    /// single-stage polish service. Returns `(primary, auxiliary)` ids.
    pub fn register_holographic_preset(&mut self, primary_id: ServiceId, auxiliary_id: ServiceId) -> Result<(ServiceId, ServiceId)> {
        let mut primary = ServiceDescriptor::new(
            primary_id,
            vec![
                Stage::with_class(HOLO_VIEW_STRUCTURE, CapacityClass::High),
                Stage::with_class(HOLO_POLISH, CapacityClass::Low),
            ],
        );
        primary.name = "holographic-primary".into();
        let mut auxiliary = ServiceDescriptor::new(auxiliary_id, vec![Stage::with_class(HOLO_POLISH, CapacityClass::Low)]);
        auxiliary.name = "holographic-auxiliary".into();
        if self.services.contains_key(&auxiliary_id) || primary_id == auxiliary_id {
            return Err(Error::Registration(format!("service id {auxiliary_id} already registered")));
        }
        self.register_service(primary)?;
        self.register_service(auxiliary)?;
        self.holographic = Some((primary_id, auxiliary_id));
        Ok((primary_id, auxiliary_id))
    }

    pub fn get(&self, id: ServiceId) -> Option<&ServiceDescriptor> {
        self.services.get(&id)
    }

    pub fn get_mut(&mut self, id: ServiceId) -> Option<&mut ServiceDescriptor> {
        self.services.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ServiceDescriptor> {
        self.services.values()
    }

    pub fn ids(&self) -> Vec<ServiceId> {
        self.services.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    /// Dense position of a service id in `ids()`, used for tensor indexing.
    pub fn index_of(&self, id: ServiceId) -> Option<usize> {
        self.services.keys().position(|&k| k == id)
    }

    pub fn holographic(&self) -> Option<(ServiceId, ServiceId)> {
        self.holographic
    }
}

/// Synthetic services with chain lengths drawn uniformly from
/// `1..=max_chain`.
pub fn synthetic_services(count: usize, max_chain: usize, qos: &QosBounds, instance_capacity: f64, seed: u64) -> Result<ServiceRegistry> {
    if max_chain == 0 {
        return Err(Error::InvalidConfig("max chain length must be at least 1".into()));
    }
    let mut rng = substream(seed, Stream::Services);
    let mut reg = ServiceRegistry::new();
    for id in 0..count {
        let len = rng.gen_range(1..=max_chain);
        let chain = (0..len).map(|k| Stage::new(format!("svc{id}-f{k}"))).collect();
        let mut d = ServiceDescriptor::new(id, chain);
        d.qos = qos.clone();
        d.instance_capacity = instance_capacity;
        reg.register_service(d)?;
    }
    Ok(reg)
}

fn draw_requirements(rng: &mut impl Rng, qos: &QosBounds) -> (f64, f64, f64, f64) {
    let capacity = rng.gen_range(qos.capacity.0..=qos.capacity.1) as f64;
    let bandwidth = rng.gen_range(qos.bandwidth.0..=qos.bandwidth.1) as f64;
    let (llo, lhi) = qos.latency;
    let latency = if llo == lhi { llo } else { rng.gen_range(llo..lhi) };
    let profit = rng.gen_range(qos.profit.0..=qos.profit.1) as f64;
    (capacity, bandwidth, latency, profit)
}

/// Request ids are unique across slots: the slot occupies the high 32 bits.
pub fn request_id(slot: u64, index: u64) -> RequestId {
    (slot << 32) | index
}

pub fn generate_requests(
    slot: u64,
    registry: &ServiceRegistry,
    poas: &[DeviceId],
    count: usize,
    seed: u64,
) -> Result<Vec<Request>> {
    if registry.is_empty() {
        return Err(Error::Workload("no services registered".into()));
    }
    if poas.is_empty() {
        return Err(Error::Workload("no points of arrival".into()));
    }
    let ids = registry.ids();
    let mut rng = substream(seed, Stream::Workload(slot));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let user = poas[rng.gen_range(0..poas.len())];
        let service = ids[rng.gen_range(0..ids.len())];
        let qos = &registry.get(service).expect("id from registry").qos;
        let (capacity_req, bandwidth_req, latency_budget, profit) = draw_requirements(&mut rng, qos);
        out.push(Request {
            id: request_id(slot, i as u64),
            user,
            service,
            role: Role::Primary,
            capacity_req,
            bandwidth_req,
            latency_budget,
            packet_size: 1,
            profit,
            slot,
            linked: None,
        });
    }
    Ok(out)
}

/// Splits one holographic capture into the positional (primary) request
/// and the texture (auxiliary) request bound for the polish stage.
pub fn decompose_holographic(
    registry: &ServiceRegistry,
    user: DeviceId,
    slot: u64,
    seed: u64,
) -> Result<(Request, Request)> {
    let (primary_id, auxiliary_id) = registry
        .holographic()
        .ok_or_else(|| Error::Workload("holographic preset is not registered".into()))?;
    let mut rng = substream(seed, Stream::Holographic(((slot & 0xffff_ffff) << 20) | user as u64));
    let base = request_id(slot, (1 << 31) | ((user as u64) << 1));
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, id: RequestId, service: ServiceId, role: Role, linked: RequestId| {
        let qos = &registry.get(service).expect("preset registered").qos;
        let (capacity_req, bandwidth_req, latency_budget, profit) = draw_requirements(rng, qos);
        Request {
            id,
            user,
            service,
            role,
            capacity_req,
            bandwidth_req,
            latency_budget,
            packet_size: 1,
            profit,
            slot,
            linked: Some(linked),
        }
    };
    let primary = mk(&mut rng, base, primary_id, Role::Primary, base + 1);
    let auxiliary = mk(&mut rng, base + 1, auxiliary_id, Role::Auxiliary, base);
    Ok((primary, auxiliary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceReport {
    pub service: ServiceId,
    pub slots: (u64, u64),
    pub served: usize,
    pub rejected: usize,
    /// Mean end-to-end latency of served requests; 0 when nothing was served.
    pub mean_latency: f64,
    pub qos_violations: usize,
}

impl ServiceReport {
    pub fn offered(&self) -> usize {
        self.served + self.rejected
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_services() -> ServiceRegistry {
        synthetic_services(3, 3, &QosBounds::default(), 20.0, 1).unwrap()
    }

    #[test]
    fn single_stage_service_accepted() {
        let mut reg = ServiceRegistry::new();
        let id = reg.register_service(ServiceDescriptor::new(0, vec![Stage::new("render")])).unwrap();
        assert_eq!(id, 0);
        assert_eq!(reg.get(0).unwrap().chain.len(), 1);
    }

    #[test]
    fn duplicate_and_empty_registration_fail() {
        let mut reg = ServiceRegistry::new();
        reg.register_service(ServiceDescriptor::new(0, vec![Stage::new("render")])).unwrap();
        assert!(matches!(
            reg.register_service(ServiceDescriptor::new(0, vec![Stage::new("x")])),
            Err(Error::Registration(_))
        ));
        assert!(reg.register_service(ServiceDescriptor::new(1, vec![])).is_err());
        assert!(reg.register_service(ServiceDescriptor::new(2, vec![Stage::new("")])).is_err());
    }

    #[test]
    fn holographic_preset_chains() {
        let mut reg = ServiceRegistry::new();
        let (p, a) = reg.register_holographic_preset(10, 11).unwrap();
        let primary = reg.get(p).unwrap();
        assert_eq!(primary.chain[0], Stage::with_class(HOLO_VIEW_STRUCTURE, CapacityClass::High));
        assert_eq!(primary.chain[1], Stage::with_class(HOLO_POLISH, CapacityClass::Low));
        assert_eq!(reg.get(a).unwrap().chain, vec![Stage::with_class(HOLO_POLISH, CapacityClass::Low)]);
    }

    #[test]
    fn per_service_counts_sum_to_count() {
        let reg = three_services();
        let reqs = generate_requests(0, &reg, &[0, 1], 300, 9).unwrap();
        assert_eq!(reqs.len(), 300);
        let per: usize = reg.ids().iter().map(|&s| reqs.iter().filter(|r| r.service == s).count()).sum();
        assert_eq!(per, 300);
    }

    #[test]
    fn empty_workload_and_errors() {
        let reg = three_services();
        assert!(generate_requests(0, &reg, &[0], 0, 1).unwrap().is_empty());
        assert!(matches!(
            generate_requests(0, &ServiceRegistry::new(), &[0], 5, 1),
            Err(Error::Workload(_))
        ));
    }

    #[test]
    fn latency_budget_mean_within_three_sigma() {
        let reg = three_services();
        let reqs = generate_requests(3, &reg, &[0], 10_000, 4).unwrap();
        let n = reqs.len() as f64;
        let mean = reqs.iter().map(|r| r.latency_budget).sum::<f64>() / n;
        // U(1,3): variance (3-1)^2/12
        let sigma = ((4.0 / 12.0) / n).sqrt();
        assert!((mean - 2.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn holographic_pair() {
        let mut reg = ServiceRegistry::new();
        assert!(decompose_holographic(&reg, 0, 0, 1).is_err());
        reg.register_holographic_preset(0, 1).unwrap();
        let (m, s) = decompose_holographic(&reg, 3, 2, 1).unwrap();
        assert_eq!((m.role, s.role), (Role::Primary, Role::Auxiliary));
        assert_eq!((m.user, s.user), (3, 3));
        assert_eq!(m.slot, s.slot);
        assert_eq!(m.linked, Some(s.id));
        assert_eq!(s.linked, Some(m.id));
        assert_eq!(reg.get(s.service).unwrap().chain[0].label, HOLO_POLISH);
        for r in [&m, &s] {
            assert!((1.0..=3.0).contains(&r.latency_budget));
        }
        assert_eq!(decompose_holographic(&reg, 3, 2, 1).unwrap(), (m, s));
    }

    #[test]
    fn service_keys_parse() {
        let mut d = ServiceDescriptor::new(4, vec![]);
        d.apply_key("chain", "a:high, b:low, c").unwrap();
        d.apply_key("capacity_req", "2,6").unwrap();
        d.apply_key("latency_budget", "0.5,2").unwrap();
        assert_eq!(d.chain.len(), 3);
        assert_eq!(d.chain[0].class, CapacityClass::High);
        assert_eq!(d.qos.capacity, (2, 6));
        assert_eq!(d.qos.latency, (0.5, 2.0));
        assert!(d.apply_key("colour", "red").is_err());
    }

    #[test]
    fn csv_has_one_row_per_request() {
        let reg = three_services();
        let reqs = generate_requests(0, &reg, &[0], 7, 1).unwrap();
        let csv = requests_to_csv(&reqs);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with(REQUEST_CSV_HEADER));
    }
}
