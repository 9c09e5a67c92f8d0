//! Context recognition: state embeddings, nearest-centroid classification
//! and vigilance-driven codebook growth.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{parse_err, Error, Result};
use crate::placement::InstanceId;
use crate::rng::{substream, Stream};
use crate::state::SystemState;
use crate::topology::{ComputingNode, DeviceId, Link, NetworkDevice, NodeId, Topology};

pub type ContextId = usize;

/// Per-feature running minimum and maximum.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinMaxNormalizer {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMaxNormalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, v: &[f64]) {
        if self.min.len() != v.len() {
            self.min = v.to_vec();
            self.max = v.to_vec();
            return;
        }
        for (k, &x) in v.iter().enumerate() {
            self.min[k] = self.min[k].min(x);
            self.max[k] = self.max[k].max(x);
        }
    }

    /// Features with a degenerate range map to 0.
    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, &x)| match (self.min.get(k), self.max.get(k)) {
                (Some(&lo), Some(&hi)) if hi > lo => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
                _ => 0.0,
            })
            .collect()
    }
}

/// `depth` rounds of mean aggregation over each element's closed
/// neighborhood, flattened element by element.
pub fn aggregate(s: &SystemState, depth: usize) -> Vec<f64> {
    let adj = s.element_neighbors();
    let mut h: Vec<Vec<f64>> = (0..s.element_count()).map(|i| s.element(i).to_vec()).collect();
    for _ in 0..depth {
        h = (0..h.len())
            .map(|i| {
                let mut acc = h[i].clone();
                for &j in &adj[i] {
                    for (a, x) in acc.iter_mut().zip(&h[j]) {
                        *a += x;
                    }
                }
                let n = (adj[i].len() + 1) as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            })
            .collect();
    }
    h.concat()
}

/// Aggregated, flattened state scaled to [0, 1] by the running normalizer,
/// which first absorbs this state.
pub fn embed_state(s: &SystemState, normalizer: &mut MinMaxNormalizer, depth: usize) -> Vec<f64> {
    let raw = aggregate(s, depth);
    normalizer.observe(&raw);
    normalizer.normalize(&raw)
}

/// Canonical placement map: nodes ascending, each with its sorted instances.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ContextKey(pub Vec<(NodeId, Vec<InstanceId>)>);

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "{{}}");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(n, is)| format!("{n}<-{}", is.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")))
            .collect();
        write!(f, "{{{}}}", parts.join(";"))
    }
}

impl ContextKey {
    pub fn parse(s: &str) -> Result<ContextKey> {
        let inner = s
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| Error::Context(format!("malformed key `{s}`")))?;
        if inner.is_empty() {
            return Ok(ContextKey::default());
        }
        let mut pairs = Vec::new();
        for part in inner.split(';') {
            let (n, is) = part.split_once("<-").ok_or_else(|| Error::Context(format!("malformed key part `{part}`")))?;
            let n: NodeId = n.parse().map_err(|_| Error::Context(format!("bad node `{n}`")))?;
            for i in is.split(',') {
                pairs.push((n, i.parse().map_err(|_| Error::Context(format!("bad instance `{i}`")))?));
            }
        }
        context_of_placement(&pairs)
    }
}

/// Builds the canonical key of `(node, instance)` bindings given in any order.
pub fn context_of_placement(bindings: &[(NodeId, InstanceId)]) -> Result<ContextKey> {
    let mut seen = BTreeMap::new();
    let mut by_node: BTreeMap<NodeId, Vec<InstanceId>> = BTreeMap::new();
    for &(n, i) in bindings {
        if let Some(prev) = seen.insert(i, n) {
            return Err(Error::Context(format!("instance {i} placed on both node {prev} and node {n}")));
        }
        by_node.entry(n).or_default().push(i);
    }
    Ok(ContextKey(
        by_node
            .into_iter()
            .map(|(n, mut v)| {
                v.sort_unstable();
                (n, v)
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub id: ContextId,
    pub centroid: Vec<f64>,
    pub key: ContextKey,
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextCodebook {
    pub entries: Vec<CodebookEntry>,
    pub vigilance: f64,
    pub rate: f64,
    pub capacity: usize,
    next_id: ContextId,
}

pub const CODEBOOK_FORMAT: &str = "# acnc-codebook v1";

impl ContextCodebook {
    pub fn new(vigilance: f64, rate: f64, capacity: usize) -> Result<Self> {
        if !(vigilance > 0.0 && vigilance < 1.0) {
            return Err(Error::InvalidConfig(format!("vigilance {vigilance} outside (0, 1)")));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("update rate {rate} outside (0, 1]")));
        }
        if capacity == 0 {
            return Err(Error::InvalidConfig("codebook capacity must be positive".into()));
        }
        Ok(ContextCodebook { entries: Vec::new(), vigilance, rate, capacity, next_id: 0 })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of contexts ever created, including evicted ones.
    pub fn created(&self) -> usize {
        self.next_id
    }

    pub fn get(&self, id: ContextId) -> Option<&CodebookEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn set_key(&mut self, id: ContextId, key: ContextKey) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Context(format!("unknown context {id}")))?;
        e.key = key;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{CODEBOOK_FORMAT}\nparams {} {} {} {}\n",
            self.vigilance, self.rate, self.capacity, self.next_id
        );
        for e in &self.entries {
            let c: Vec<String> = e.centroid.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "context {} {} {} {}", e.id, e.updates, e.key, c.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ContextCodebook> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CODEBOOK_FORMAT => {}
            _ => return Err(parse_err(1, format!("expected header `{CODEBOOK_FORMAT}`"))),
        }
        let mut cb: Option<ContextCodebook> = None;
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0].starts_with('#') {
                continue;
            }
            let num = |x: &str| x.parse::<f64>().map_err(|e| parse_err(n, e.to_string()));
            let int = |x: &str| x.parse::<usize>().map_err(|e| parse_err(n, e.to_string()));
            match f[0] {
                "params" if f.len() == 5 => {
                    let mut c = ContextCodebook::new(num(f[1])?, num(f[2])?, int(f[3])?)
                        .map_err(|e| parse_err(n, e.to_string()))?;
                    c.next_id = int(f[4])?;
                    cb = Some(c);
                }
                "context" if f.len() >= 4 => {
                    let c = cb.as_mut().ok_or_else(|| parse_err(n, "context before params"))?;
                    let centroid = f[4..].iter().map(|x| num(x)).collect::<Result<Vec<_>>>()?;
                    if centroid.iter().any(|x| !x.is_finite()) {
                        return Err(parse_err(n, "non-finite centroid"));
                    }
                    let id = int(f[1])?;
                    if c.get(id).is_some() {
                        return Err(parse_err(n, format!("duplicate context {id}")));
                    }
                    c.entries.push(CodebookEntry {
                        id,
                        updates: f[2].parse().map_err(|_| parse_err(n, "bad update count"))?,
                        key: ContextKey::parse(f[3]).map_err(|e| parse_err(n, e.to_string()))?,
                        centroid,
                    });
                }
                other => return Err(parse_err(n, format!("unexpected record `{other}`"))),
            }
        }
        let cb = cb.ok_or_else(|| parse_err(1, "missing params record"))?;
        if cb.entries.len() > cb.capacity {
            return Err(parse_err(1, "more entries than capacity"));
        }
        Ok(cb)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn match_score(d: f64, dim: usize) -> f64 {
    if dim == 0 {
        1.0
    } else {
        1.0 - d / (dim as f64).sqrt()
    }
}

/// Nearest centroid by Euclidean distance, ties to the smaller id.
pub fn classify(v: &[f64], cb: &ContextCodebook) -> Result<(ContextId, f64)> {
    let mut best: Option<(f64, ContextId)> = None;
    for e in &cb.entries {
        if e.centroid.len() != v.len() {
            return Err(Error::Classification(format!(
                "embedding length {} differs from centroid length {}",
                v.len(),
                e.centroid.len()
            )));
        }
        let d = distance(v, &e.centroid);
        if best.is_none_or(|(bd, bid)| d < bd || (d == bd && e.id < bid)) {
            best = Some((d, e.id));
        }
    }
    let (d, id) = best.ok_or_else(|| Error::Classification("empty codebook".into()))?;
    Ok((id, match_score(d, v.len())))
}

/// Resonance step: moves the best matching centroid toward `v` when the
/// match reaches the vigilance, otherwise creates a context at `v`.
pub fn art_update(v: &[f64], cb: &mut ContextCodebook) -> (ContextId, bool) {
    if let Ok((id, m)) = classify(v, cb) {
        if m >= cb.vigilance {
            let beta = cb.rate;
            let e = cb.entries.iter_mut().find(|e| e.id == id).expect("classified id exists");
            for (c, x) in e.centroid.iter_mut().zip(v) {
                *c = (1.0 - beta) * *c + beta * x;
            }
            e.updates += 1;
            return (id, false);
        }
    }
    if cb.entries.len() >= cb.capacity {
        let victim = cb
            .entries
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| (e.updates, e.id))
            .map(|(k, _)| k)
            .expect("capacity is positive");
        cb.entries.remove(victim);
    }
    let id = cb.next_id;
    cb.next_id += 1;
    cb.entries.push(CodebookEntry { id, centroid: v.to_vec(), key: ContextKey::default(), updates: 0 });
    (id, true)
}

/// One step of the context demo log.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub index: usize,
    pub regime: usize,
    pub context: ContextId,
    pub matched: f64,
    pub created: bool,
}

/// Regime sequence of a demo stream: `single:N`, `alt:N`, or an explicit
/// comma-separated list of regimes 1 and 2.
pub fn parse_stream_spec(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("malformed stream spec `{spec}`"));
    let count = |n: &str| n.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
    if let Some(n) = spec.strip_prefix("single:") {
        return Ok(vec![1; count(n)?]);
    }
    if let Some(n) = spec.strip_prefix("alt:") {
        return Ok((0..count(n)?).map(|i| 1 + i % 2).collect());
    }
    spec.split(',')
        .map(|x| match x.trim() {
            "1" => Ok(1),
            "2" => Ok(2),
            _ => Err(bad()),
        })
        .collect()
}

/// The two example placement regimes: regime 1 binds I1 to N1 and I2 to
/// N2; regime 2 binds I3 and I4 to N1 and I1 to N2.
pub fn demo_regime(regime: usize) -> Vec<(NodeId, InstanceId)> {
    if regime == 1 {
        vec![(1, 1), (2, 2)]
    } else {
        vec![(1, 3), (1, 4), (2, 1)]
    }
}

/// Six-device ring with a computing node per device; device 0 is the PoA.
pub fn demo_topology() -> Topology {
    let n = 6;
    let devices = (0..n).map(|id| NetworkDevice { id, ports: 32, energy_per_unit: 10.0, is_poa: id == 0 }).collect();
    let nodes = (0..n).map(|id| ComputingNode { id, capacity: 300.0, energy_per_unit: 10.0, attached_device: id }).collect();
    let links = (0..n)
        .map(|id| {
            let (a, b) = (id, (id + 1) % n);
            Link { id, endpoints: (a.min(b), a.max(b)), bandwidth: 300.0, latency: 0.5, energy_per_unit: 10.0 }
        })
        .collect();
    Topology::from_parts(devices, nodes, links, n)
}

/// System state induced by a placement: each instance carries 10 mbps from
/// the PoA to its host. `noise` perturbs the loads uniformly by up to that
/// fraction.
pub fn placement_state(t: &Topology, bindings: &[(NodeId, InstanceId)], noise: f64, rng: &mut impl Rng) -> Result<SystemState> {
    let mut s = SystemState::zeros(t, 3);
    let poa: DeviceId = t.poas().first().copied().unwrap_or(0);
    let mut jitter = |x: f64| if noise > 0.0 { x * (1.0 + rng.gen_range(-noise..=noise)) } else { x };
    for &(n, i) in bindings {
        let node = t.nodes.get(n).ok_or_else(|| Error::Context(format!("unknown node {n}")))?;
        let load = jitter(10.0);
        s.node_load[n] += load;
        s.instance_load.insert(i, load);
        let path = t.shortest_path(poa, node.attached_device, crate::topology::Metric::Latency)?;
        for w in path.devices.windows(2) {
            let l = t.link_between(w[0], w[1]).expect("path link");
            s.link_load[l] += load;
        }
        s.binding.push(crate::state::BindingEntry { service: 0, instance: i, node: n, paths: vec![path.devices] });
    }
    for (n, row) in s.nodes.iter_mut().enumerate() {
        let hosted: Vec<InstanceId> = bindings.iter().filter(|b| b.0 == n).map(|b| b.1).collect();
        row[0] = s.node_load[n] / t.nodes[n].capacity;
        row[1] = hosted.len() as f64 / 4.0;
        row[2] = hosted.iter().sum::<usize>() as f64 / 10.0;
    }
    for (l, row) in s.links.iter_mut().enumerate() {
        let u = s.link_load[l] / t.links[l].bandwidth;
        *row = vec![u, u, 0.0];
    }
    for d in 0..t.size() {
        let inc = t.neighbors(d);
        let mut row = vec![0.0; 3];
        for &(_, l) in inc {
            for (r, x) in row.iter_mut().zip(&s.links[l]) {
                *r += x / inc.len() as f64;
            }
        }
        s.devices[d] = row;
    }
    Ok(s)
}

/// Replays a regime stream through embedding, classification and codebook
/// growth. Created contexts are keyed by the regime's placement.
pub fn run_demo(regimes: &[usize], cb: &mut ContextCodebook, noise: f64, seed: u64) -> Result<Vec<DemoStep>> {
    let t = demo_topology();
    let mut rng = substream(seed, Stream::Synthetic(seed));
    let mut norm = MinMaxNormalizer::new();
    let mut out = Vec::with_capacity(regimes.len());
    for (index, &regime) in regimes.iter().enumerate() {
        let bindings = demo_regime(regime);
        let s = placement_state(&t, &bindings, noise, &mut rng)?;
        let v = embed_state(&s, &mut norm, 1);
        let (context, created) = art_update(&v, cb);
        if created {
            cb.set_key(context, context_of_placement(&bindings)?)?;
        }
        let (_, matched) = classify(&v, cb)?;
        out.push(DemoStep { index, regime, context, matched, created });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::test_support::toy;

    fn cb(rho: f64) -> ContextCodebook {
        ContextCodebook::new(rho, 0.1, 16).unwrap()
    }

    #[test]
    fn zero_state_embeds_to_zero() {
        let t = toy(3, &[(0, 1, 0.2), (1, 2, 0.3)]);
        let s = SystemState::zeros(&t, 3);
        let mut norm = MinMaxNormalizer::new();
        let v = embed_state(&s, &mut norm, 1);
        assert_eq!(v.len(), (3 + 2 + 3) * 3);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_states_identical_embeddings() {
        let t = demo_topology();
        let mut rng = substream(1, Stream::Synthetic(1));
        let s = placement_state(&t, &demo_regime(2), 0.0, &mut rng).unwrap();
        let mut norm = MinMaxNormalizer::new();
        norm.observe(&aggregate(&SystemState::zeros(&t, 3), 1));
        let a = embed_state(&s, &mut norm, 1);
        let b = embed_state(&s, &mut norm, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), (6 + 6 + 6) * 3);
        assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn mean_aggregation_by_hand() {
        // path 0-1 with a node on each device, width 1
        let t = toy(2, &[(0, 1, 0.2)]);
        let mut s = SystemState::zeros(&t, 1);
        s.devices = vec![vec![3.0], vec![0.0]];
        s.links = vec![vec![6.0]];
        s.nodes = vec![vec![0.0], vec![9.0]];
        // elements: d0, d1, l0, n0, n1
        let h = aggregate(&s, 1);
        assert_eq!(h, vec![(3.0 + 6.0 + 0.0) / 3.0, (0.0 + 6.0 + 9.0) / 3.0, (6.0 + 3.0 + 0.0) / 3.0, 1.5, 4.5]);
    }

    #[test]
    fn classify_exact_centroid_and_tie() {
        let mut c = cb(0.75);
        assert!(matches!(classify(&[0.0, 0.0], &c), Err(Error::Classification(_))));
        art_update(&[0.0, 0.0], &mut c);
        c.vigilance = 0.999;
        art_update(&[1.0, 1.0], &mut c);
        assert_eq!(c.len(), 2);
        assert_eq!(classify(&[1.0, 1.0], &c).unwrap(), (1, 1.0));
        assert_eq!(classify(&[0.5, 0.5], &c).unwrap().0, 0);
    }

    #[test]
    fn classify_matches_brute_force() {
        let mut rng = substream(7, Stream::Synthetic(7));
        for _ in 0..200 {
            let dim = rng.gen_range(1..8);
            let mut c = cb(0.999);
            let cents: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.gen()).collect()).collect();
            for (k, x) in cents.iter().enumerate() {
                c.entries.push(CodebookEntry { id: k, centroid: x.clone(), key: ContextKey::default(), updates: 0 });
            }
            let v: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
            let (id, m) = classify(&v, &c).unwrap();
            let d = distance(&v, &cents[id]);
            for x in &cents {
                assert!(d <= distance(&v, x));
            }
            assert!((m - (1.0 - d / (dim as f64).sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn art_creation_rules() {
        let mut c = cb(0.75);
        assert_eq!(art_update(&[0.2, 0.4], &mut c), (0, true));
        assert_eq!(art_update(&[0.2, 0.4], &mut c), (0, false));
        assert_eq!(c.entries[0].centroid, vec![0.2, 0.4]);
        // distance 0.5 * sqrt(4) = 1 from the only centroid: match 0.5
        let mut c = cb(0.99);
        art_update(&[0.0; 4], &mut c);
        let (id, m) = classify(&[0.5; 4], &c).unwrap();
        assert_eq!((id, m), (0, 0.5));
        assert_eq!(art_update(&[0.5; 4], &mut c), (1, true));
    }

    #[test]
    fn capacity_evicts_least_updated() {
        let mut c = ContextCodebook::new(0.99, 0.1, 2).unwrap();
        art_update(&[0.0], &mut c);
        art_update(&[0.0], &mut c);
        art_update(&[0.5], &mut c);
        art_update(&[1.0], &mut c);
        assert_eq!(c.len(), 2);
        assert_eq!(c.entries.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(c.created(), 3);
    }

    #[test]
    fn worked_context_keys() {
        assert_eq!(context_of_placement(&[(1, 1), (2, 2)]).unwrap(), ContextKey(vec![(1, vec![1]), (2, vec![2])]));
        assert_eq!(context_of_placement(&[]).unwrap(), ContextKey::default());
        let c2 = [(1, 3), (1, 4), (2, 1)];
        let want = ContextKey(vec![(1, vec![3, 4]), (2, vec![1])]);
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let b: Vec<_> = perm.iter().map(|&k| c2[k]).collect();
            assert_eq!(context_of_placement(&b).unwrap(), want);
        }
        assert!(matches!(context_of_placement(&[(1, 3), (2, 3)]), Err(Error::Context(_))));
        assert_eq!(ContextKey::parse(&want.to_string()).unwrap(), want);
        assert_eq!(ContextKey::parse("{}").unwrap(), ContextKey::default());
    }

    #[test]
    fn codebook_round_trip() {
        let mut c = cb(0.8);
        art_update(&[0.1, 0.2, 0.3], &mut c);
        c.set_key(0, ContextKey(vec![(1, vec![3, 4]), (2, vec![1])])).unwrap();
        art_update(&[0.9, 0.8, 0.7], &mut c);
        art_update(&[0.12, 0.2, 0.3], &mut c);
        let back = ContextCodebook::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn stream_specs() {
        assert_eq!(parse_stream_spec("single:3").unwrap(), vec![1, 1, 1]);
        assert_eq!(parse_stream_spec("alt:4").unwrap(), vec![1, 2, 1, 2]);
        assert_eq!(parse_stream_spec("1,2,2").unwrap(), vec![1, 2, 2]);
        for bad in ["", "alt:", "single:0", "1,3", "foo:2"] {
            assert!(parse_stream_spec(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn demo_single_regime_one_context() {
        let mut c = cb(0.75);
        let steps = run_demo(&parse_stream_spec("single:20").unwrap(), &mut c, 0.0, 3).unwrap();
        assert_eq!(c.len(), 1);
        assert!(steps.iter().all(|s| s.context == 0));
    }

    #[test]
    fn demo_alternating_two_contexts() {
        let mut c = cb(0.75);
        let steps = run_demo(&parse_stream_spec("alt:20").unwrap(), &mut c, 0.0, 3).unwrap();
        assert_eq!(c.len(), 2);
        for s in &steps {
            assert_eq!(s.context, s.regime - 1);
        }
        assert_eq!(c.get(1).unwrap().key, ContextKey(vec![(1, vec![3, 4]), (2, vec![1])]));
    }

    #[test]
    fn demo_high_vigilance_over_segments() {
        let mut c = cb(0.999);
        run_demo(&parse_stream_spec("single:30").unwrap(), &mut c, 0.2, 3).unwrap();
        assert!(c.created() > 1);
    }
}
