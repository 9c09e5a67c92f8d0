//! Next-state forecasting over the recent system states and detection of
//! predicted resource or latency infeasibilities.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::placement::InstanceId;
use crate::services::ServiceRegistry;
use crate::state::SystemState;
use crate::topology::Topology;

/// Forecasts the state following a window of contiguous states.
pub trait Predictor {
    fn predict(&self, window: &[SystemState]) -> Result<SystemState>;
}

/// Per-feature exponential smoothing seeded with the first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialSmoothing {
    pub alpha: f64,
}

impl Default for ExponentialSmoothing {
    fn default() -> Self {
        ExponentialSmoothing { alpha: 0.5 }
    }
}

impl Predictor for ExponentialSmoothing {
    fn predict(&self, window: &[SystemState]) -> Result<SystemState> {
        predict_next(window, self.alpha)
    }
}

pub fn check_window(window: &[SystemState]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::Prediction("empty state window".into()));
    }
    for w in window.windows(2) {
        if w[1].slot != w[0].slot + 1 {
            return Err(Error::Prediction(format!("window slots {} and {} are not contiguous", w[0].slot, w[1].slot)));
        }
    }
    Ok(())
}

/// Structure (graph, bindings, slot) comes from the latest state; every
/// numeric field is smoothed independently. States whose shape differs from
/// the latest one are skipped.
pub fn predict_next(window: &[SystemState], alpha: f64) -> Result<SystemState> {
    check_window(window)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Prediction(format!("smoothing factor {alpha} outside [0, 1]")));
    }
    let latest = window.last().expect("nonempty");
    let n = latest.numeric().len();
    let mut level: Option<Vec<f64>> = None;
    for s in window {
        let x = s.numeric();
        if x.len() != n {
            continue;
        }
        level = Some(match level {
            None => x,
            Some(l) => l.iter().zip(&x).map(|(l, x)| alpha * x + (1.0 - alpha) * l).collect(),
        });
    }
    latest.with_numeric(&level.expect("latest state always contributes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Element {
    Link(usize),
    Node(usize),
    Instance(InstanceId),
    Service(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Bandwidth,
    Capacity,
    Latency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedViolation {
    pub element: Element,
    pub kind: ViolationKind,
    pub predicted: f64,
    pub limit: f64,
}

/// Reports every element whose predicted value exceeds its limit scaled by
/// `headroom` (1.0 for hard limits).
pub fn detect_infeasibility(
    predicted: &SystemState,
    t: &Topology,
    registry: &ServiceRegistry,
    instance_caps: &BTreeMap<InstanceId, f64>,
    headroom: f64,
) -> Vec<PredictedViolation> {
    let mut out = Vec::new();
    let mut check = |element, kind, predicted: f64, limit: f64| {
        let limit = limit * headroom;
        if predicted > limit {
            out.push(PredictedViolation { element, kind, predicted, limit });
        }
    };
    for (l, &v) in predicted.link_load.iter().enumerate() {
        if let Some(link) = t.links.get(l) {
            check(Element::Link(l), ViolationKind::Bandwidth, v, link.bandwidth);
        }
    }
    for (n, &v) in predicted.node_load.iter().enumerate() {
        if let Some(node) = t.nodes.get(n) {
            check(Element::Node(n), ViolationKind::Capacity, v, node.capacity);
        }
    }
    for (&i, &v) in &predicted.instance_load {
        if let Some(&cap) = instance_caps.get(&i) {
            check(Element::Instance(i), ViolationKind::Capacity, v, cap);
        }
    }
    for (&s, &v) in &predicted.service_latency {
        if let Some(d) = registry.get(s) {
            check(Element::Service(s), ViolationKind::Latency, v, d.latency_bound());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::services::{ServiceDescriptor, Stage};
    use crate::topology::test_support::toy;

    fn series(t: &Topology, node_loads: &[f64]) -> Vec<SystemState> {
        node_loads
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let mut s = SystemState::zeros(t, 2);
                s.slot = 10 + k as i64;
                s.node_load[1] = x;
                s.devices[0] = vec![x, 2.0 * x];
                s
            })
            .collect()
    }

    #[test]
    fn smoothing_by_hand() {
        let t = toy(2, &[(0, 1, 0.1)]);
        let p = predict_next(&series(&t, &[1.0, 2.0, 3.0]), 0.5).unwrap();
        // levels 1, 1.5, 2.25
        assert_eq!(p.node_load[1], 2.25);
        assert_eq!(p.devices[0], vec![2.25, 4.5]);
        assert_eq!(p.slot, 12);
        let last = predict_next(&series(&t, &[1.0, 2.0, 3.0]), 1.0).unwrap();
        assert_eq!(last.node_load[1], 3.0);
        let c = predict_next(&series(&t, &[4.0; 5]), 0.3).unwrap();
        assert_eq!(c.node_load[1], 4.0);
    }

    #[test]
    fn window_errors() {
        let t = toy(2, &[(0, 1, 0.1)]);
        assert!(matches!(predict_next(&[], 0.5), Err(Error::Prediction(_))));
        let mut w = series(&t, &[1.0, 2.0]);
        w[1].slot += 1;
        assert!(predict_next(&w, 0.5).is_err());
    }

    #[test]
    fn violations_at_thresholds() {
        let t = toy(2, &[(0, 1, 0.1)]);
        let mut reg = ServiceRegistry::new();
        let mut d = ServiceDescriptor::new(0, vec![Stage::new("a")]);
        d.qos.latency = (1.0, 2.0);
        reg.register_service(d).unwrap();
        let caps = BTreeMap::from([(0, 20.0)]);
        let zero = SystemState::zeros(&t, 2);
        assert!(detect_infeasibility(&zero, &t, &reg, &caps, 1.0).is_empty());

        let mut s = zero.clone();
        s.link_load[0] = 310.0;
        let v = detect_infeasibility(&s, &t, &reg, &caps, 1.0);
        assert_eq!(v, vec![PredictedViolation { element: Element::Link(0), kind: ViolationKind::Bandwidth, predicted: 310.0, limit: 300.0 }]);

        s.link_load[0] = 300.0;
        s.instance_load.insert(0, 20.5);
        s.service_latency.insert(0, 2.0);
        let v = detect_infeasibility(&s, &t, &reg, &caps, 1.0);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].element, Element::Instance(0));
        s.service_latency.insert(0, 2.01);
        assert_eq!(detect_infeasibility(&s, &t, &reg, &caps, 1.0).len(), 2);
        // 90% headroom turns the 300 mbps link into a violation too
        assert_eq!(detect_infeasibility(&s, &t, &reg, &caps, 0.9).len(), 3);
    }

    #[test]
    fn trending_node_stays_feasible() {
        let t = toy(2, &[(0, 1, 0.1)]);
        let p = predict_next(&series(&t, &[280.0, 290.0, 300.0]), 0.5).unwrap();
        assert_eq!(p.node_load[1], 292.5);
        let reg = ServiceRegistry::new();
        assert!(detect_infeasibility(&p, &t, &reg, &BTreeMap::new(), 1.0).is_empty());
    }
}
