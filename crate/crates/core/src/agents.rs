//! PoA decision agents: action selection under feasibility masking, reward
//! shaping, feature encoders and a linear double Q-learner.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::context::aggregate;
use crate::error::{parse_err, Error, Result};
use crate::placement::{Action, InstanceId};
use crate::services::Request;
use crate::state::SystemState;
use crate::topology::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Policy {
    Rnd,
    Greedy,
    Ddql,
    DdqlGnn,
    Opt,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Rnd, Policy::Greedy, Policy::Ddql, Policy::DdqlGnn, Policy::Opt];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Rnd => "rnd",
            Policy::Greedy => "greedy",
            Policy::Ddql => "ddql",
            Policy::DdqlGnn => "ddql-gnn",
            Policy::Opt => "opt",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn feature_mode(self) -> Option<FeatureMode> {
        match self {
            Policy::Ddql => Some(FeatureMode::Flat),
            Policy::DdqlGnn => Some(FeatureMode::Graph),
            _ => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Policy> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy `{s}` (expected rnd, greedy, ddql, ddql-gnn or opt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    Flat,
    Graph,
}

impl FeatureMode {
    fn name(self) -> &'static str {
        match self {
            FeatureMode::Flat => "flat",
            FeatureMode::Graph => "graph",
        }
    }
}

/// Instances of the active context and the (instance chain, path) pairs a
/// request may use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionSet {
    pub instances: Vec<InstanceId>,
    pub pairs: Vec<Action>,
}

impl ActionSet {
    pub fn new(pairs: Vec<Action>) -> Self {
        let mut instances: Vec<InstanceId> = pairs.iter().flat_map(|a| a.instances.iter().copied()).collect();
        instances.sort_unstable();
        instances.dedup();
        ActionSet { instances, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Picks a pair index, or `None` to reject when no pair is feasible.
/// `energy` is the marginal energy of each pair; `q_values` are required by
/// the learned policies.
pub fn select_action(
    policy: Policy,
    actions: &ActionSet,
    feasible: &[bool],
    energy: &[f64],
    q_values: Option<&[f64]>,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Option<usize>> {
    if actions.is_empty() {
        return Err(Error::Agent("empty action set".into()));
    }
    if feasible.len() != actions.len() || energy.len() != actions.len() {
        return Err(Error::Agent("mask length differs from the action set".into()));
    }
    let ok: Vec<usize> = (0..actions.len()).filter(|&i| feasible[i]).collect();
    if ok.is_empty() {
        return Ok(None);
    }
    let argmin = |score: &dyn Fn(usize) -> f64| {
        ok.iter().copied().fold(None, |best: Option<usize>, i| match best {
            Some(b) if score(b) <= score(i) => Some(b),
            _ => Some(i),
        })
    };
    Ok(match policy {
        Policy::Rnd => Some(ok[rng.gen_range(0..ok.len())]),
        Policy::Greedy => argmin(&|i| energy[i]),
        Policy::Ddql | Policy::DdqlGnn => {
            let q = q_values.ok_or_else(|| Error::Agent("learned policy needs action values".into()))?;
            if q.len() != actions.len() {
                return Err(Error::Agent("action value count differs from the action set".into()));
            }
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                Some(ok[rng.gen_range(0..ok.len())])
            } else {
                argmin(&|i| -q[i])
            }
        }
        Policy::Opt => return Err(Error::Agent("the exact policy does not select per request".into())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Served { profit: f64, link_energy: f64, compute_energy: f64, violated: bool },
    Rejected,
}

pub fn compute_reward(o: &Outcome, energy_weight: f64) -> f64 {
    match *o {
        Outcome::Rejected => 0.0,
        Outcome::Served { profit, violated: true, .. } => -profit,
        Outcome::Served { profit, link_energy, compute_energy, .. } => profit - energy_weight * (link_energy + compute_energy),
    }
}

pub const REQUEST_FEATURES: usize = 4;
pub const ACTION_FEATURES: usize = 5;

pub fn feature_len(width: usize) -> usize {
    REQUEST_FEATURES + ACTION_FEATURES + 3 * width
}

fn squash(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Element vectors a feature encoder reads from: raw indicators in flat
/// mode, `depth` rounds of mean aggregation in graph mode.
#[derive(Debug, Clone)]
pub struct StateView<'a> {
    state: &'a SystemState,
    mode: FeatureMode,
    elements: Vec<f64>,
}

impl<'a> StateView<'a> {
    pub fn new(state: &'a SystemState, mode: FeatureMode, depth: usize) -> Self {
        let elements = match mode {
            FeatureMode::Flat => aggregate(state, 0),
            FeatureMode::Graph => aggregate(state, depth),
        };
        StateView { state, mode, elements }
    }

    fn element(&self, i: usize) -> &[f64] {
        let w = self.state.width;
        &self.elements[i * w..(i + 1) * w]
    }

    fn mean(&self, ids: impl Iterator<Item = usize>) -> Vec<f64> {
        let w = self.state.width;
        let mut acc = vec![0.0; w];
        let mut n = 0.0;
        for i in ids {
            for (a, x) in acc.iter_mut().zip(self.element(i)) {
                *a += x;
            }
            n += 1.0;
        }
        if n > 0.0 {
            acc.iter_mut().for_each(|a| *a /= n);
        }
        acc
    }

    fn path_links(&self, hops: &[DeviceId]) -> Vec<usize> {
        let s = self.state;
        hops.windows(2)
            .filter_map(|w| {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                s.link_endpoints.iter().position(|&e| e == key).map(|l| s.link_element(l))
            })
            .collect()
    }

    /// Three readouts of `width` values each. Flat: path links, path
    /// devices, hosts. Graph: PoA, hosts, whole path.
    fn readout(&self, poa: DeviceId, a: &Action) -> Vec<f64> {
        let s = self.state;
        let hosts = a.candidate.hosts.iter().map(|&n| s.node_element(n));
        let links = self.path_links(&a.candidate.hops);
        let mut devices = a.candidate.hops.clone();
        devices.sort_unstable();
        devices.dedup();
        let mut out = Vec::with_capacity(3 * s.width);
        match self.mode {
            FeatureMode::Flat => {
                out.extend(self.mean(links.into_iter()));
                out.extend(self.mean(devices.into_iter()));
                out.extend(self.mean(hosts));
            }
            FeatureMode::Graph => {
                let mut links = links;
                links.sort_unstable();
                links.dedup();
                out.extend(self.element(poa).to_vec());
                out.extend(self.mean(hosts));
                out.extend(self.mean(devices.into_iter().chain(links)));
            }
        }
        out.into_iter().map(squash).collect()
    }
}

/// Request attributes, action attributes and state readouts. `energy` is the
/// pair's marginal energy and `energy_weight` the objective's lambda.
pub fn encode_features(view: &StateView<'_>, r: &Request, a: &Action, energy: f64, energy_weight: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_len(view.state.width));
    f.extend([r.capacity_req / 8.0, r.bandwidth_req / 10.0, r.latency_budget / 3.0, r.profit / 15.0]);
    let hops = a.candidate.hops.len().saturating_sub(1) as f64;
    f.extend([
        a.candidate.latency / 3.0,
        hops / 10.0,
        energy / 1000.0,
        // a path that never leaves the PoA has no bottleneck
        (a.candidate.min_residual_bandwidth / 300.0).min(1.0),
        (r.profit - energy_weight * energy) / 15.0,
    ]);
    f.extend(view.readout(r.user, a));
    f
}

pub const AGENT_FORMAT: &str = "# acnc-agent v1";

/// Linear action-value function over state-action features with an online
/// and a target weight set. With `bias` the last weight multiplies a
/// constant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub mode: FeatureMode,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub bias: bool,
    pub updates: u64,
    pub sync_every: u64,
}

impl QFunction {
    pub fn new(mode: FeatureMode, dim: usize, bias: bool, sync_every: u64) -> Self {
        let n = dim + bias as usize;
        QFunction { mode, online: vec![0.0; n], target: vec![0.0; n], bias, updates: 0, sync_every: sync_every.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.online.len() - self.bias as usize
    }

    fn dot(w: &[f64], phi: &[f64], bias: bool) -> f64 {
        let mut v: f64 = w.iter().zip(phi).map(|(w, x)| w * x).sum();
        if bias {
            v += w[w.len() - 1];
        }
        v
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        Self::dot(&self.online, phi, self.bias)
    }

    pub fn target_value(&self, phi: &[f64]) -> f64 {
        Self::dot(&self.target, phi, self.bias)
    }

    pub fn values(&self, phis: &[Vec<f64>]) -> Vec<f64> {
        phis.iter().map(|p| self.value(p)).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "{AGENT_FORMAT}");
        let _ = writeln!(s, "mode {}", self.mode.name());
        let _ = writeln!(s, "bias {}", self.bias as u8);
        let _ = writeln!(s, "updates {}", self.updates);
        let _ = writeln!(s, "sync {}", self.sync_every);
        let _ = writeln!(s, "online {}", join(&self.online));
        let _ = writeln!(s, "target {}", join(&self.target));
        s
    }

    pub fn from_text(text: &str) -> Result<QFunction> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == AGENT_FORMAT => {}
            _ => return Err(parse_err(1, format!("expected header `{AGENT_FORMAT}`"))),
        }
        let (mut mode, mut bias, mut updates, mut sync, mut online, mut target) = (None, None, None, None, None, None);
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let floats = || f[1..].iter().map(|x| x.parse::<f64>().map_err(|e| parse_err(n, e.to_string()))).collect::<Result<Vec<_>>>();
            let int = || f.get(1).and_then(|x| x.parse::<u64>().ok()).ok_or_else(|| parse_err(n, "expected an integer"));
            match f[0] {
                "mode" => {
                    mode = Some(match f.get(1) {
                        Some(&"flat") => FeatureMode::Flat,
                        Some(&"graph") => FeatureMode::Graph,
                        _ => return Err(parse_err(n, "mode must be flat or graph")),
                    })
                }
                "bias" => bias = Some(int()? != 0),
                "updates" => updates = Some(int()?),
                "sync" => sync = Some(int()?),
                "online" => online = Some(floats()?),
                "target" => target = Some(floats()?),
                other => return Err(parse_err(n, format!("unknown record `{other}`"))),
            }
        }
        let missing = |k: &str| parse_err(1, format!("missing `{k}` record"));
        let q = QFunction {
            mode: mode.ok_or_else(|| missing("mode"))?,
            bias: bias.ok_or_else(|| missing("bias"))?,
            updates: updates.ok_or_else(|| missing("updates"))?,
            sync_every: sync.ok_or_else(|| missing("sync"))?.max(1),
            online: online.ok_or_else(|| missing("online"))?,
            target: target.ok_or_else(|| missing("target"))?,
        };
        if q.online.len() != q.target.len() || q.online.len() < q.bias as usize {
            return Err(parse_err(1, "online and target weights differ in shape"));
        }
        if q.online.iter().chain(&q.target).any(|w| !w.is_finite()) {
            return Err(parse_err(1, "non-finite weight"));
        }
        Ok(q)
    }
}

/// One experience: features of the chosen pair, its reward, and the
/// features of every pair available to the next decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub reward: f64,
    pub next: Vec<Vec<f64>>,
    pub terminal: bool,
}

/// One gradient step on the mean squared TD error of `batch` using the
/// double estimator: the online weights pick the next action, the target
/// weights value it. Returns the mean squared TD error before the step.
pub fn ddql_update(q: &mut QFunction, batch: &[&Transition], gamma: f64, alpha: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let dim = q.dim();
    let mut grad = vec![0.0; q.online.len()];
    let mut sq = 0.0;
    for t in batch {
        let finite = |v: &[f64]| v.len() == dim && v.iter().all(|x| x.is_finite());
        if !finite(&t.features) || !t.next.iter().all(|n| finite(n)) || !t.reward.is_finite() {
            return Err(Error::Training("non-finite or misshapen features".into()));
        }
        let mut y = t.reward;
        if !t.terminal && !t.next.is_empty() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, n) in t.next.iter().enumerate() {
                let v = q.value(n);
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            y += gamma * q.target_value(&t.next[best]);
        }
        let delta = y - q.value(&t.features);
        sq += delta * delta;
        for (g, x) in grad.iter_mut().zip(&t.features) {
            *g += delta * x;
        }
        if q.bias {
            grad[dim] += delta;
        }
    }
    let scale = alpha / batch.len() as f64;
    for (w, g) in q.online.iter_mut().zip(&grad) {
        *w += scale * g;
    }
    if q.online.iter().any(|w| !w.is_finite()) {
        return Err(Error::Training("weights diverged".into()));
    }
    q.updates += 1;
    if q.updates.is_multiple_of(q.sync_every) {
        q.target.clone_from(&q.online);
    }
    Ok(sq / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdqlParams {
    pub gamma: f64,
    pub alpha: f64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub sync_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of warm-up slots over which epsilon decays linearly.
    pub decay_fraction: f64,
    pub depth: usize,
    pub bias: bool,
}

impl Default for DdqlParams {
    fn default() -> Self {
        DdqlParams {
            gamma: 0.9,
            alpha: 1e-3,
            replay_capacity: 10_000,
            batch: 32,
            sync_every: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            decay_fraction: 0.6,
            depth: 1,
            bias: true,
        }
    }
}

impl DdqlParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("ddql gamma must lie in [0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("ddql alpha must be positive");
        }
        if self.batch == 0 || self.replay_capacity == 0 || self.sync_every == 0 {
            return bad("ddql batch, replay capacity and sync interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("ddql epsilon values must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return bad("ddql decay fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Exploration rate for warm-up slot `k` of `warmup`.
    pub fn epsilon(&self, k: usize, warmup: usize) -> f64 {
        let horizon = self.decay_fraction * warmup as f64;
        if horizon <= 0.0 || k as f64 >= horizon {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * k as f64 / horizon
    }
}

/// Learner with its replay memory and the decision still waiting for its
/// successor.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub q: QFunction,
    pub replay: ReplayBuffer,
    pending: Option<(Vec<f64>, f64)>,
}

impl Agent {
    pub fn new(mode: FeatureMode, dim: usize, p: &DdqlParams) -> Self {
        Agent { q: QFunction::new(mode, dim, p.bias, p.sync_every), replay: ReplayBuffer::new(p.replay_capacity), pending: None }
    }

    /// Copy of the learned weights with fresh experience.
    pub fn warm_start(&self, p: &DdqlParams) -> Self {
        Agent { q: self.q.clone(), replay: ReplayBuffer::new(p.replay_capacity), pending: None }
    }

    /// Closes the pending decision with the pairs available next.
    pub fn observe_next(&mut self, next: Vec<Vec<f64>>) {
        if let Some((features, reward)) = self.pending.take() {
            self.replay.push(Transition { features, reward, next, terminal: false });
        }
    }

    pub fn record(&mut self, features: Vec<f64>, reward: f64) {
        self.end_episode();
        self.pending = Some((features, reward));
    }

    pub fn end_episode(&mut self) {
        if let Some((features, reward)) = self.pending.take() {
            self.replay.push(Transition { features, reward, next: Vec::new(), terminal: true });
        }
    }

    /// One update on a sampled batch once the replay holds a full batch.
    pub fn train(&mut self, p: &DdqlParams, rng: &mut impl Rng) -> Result<Option<f64>> {
        if self.replay.len() < p.batch {
            return Ok(None);
        }
        let batch: Vec<Transition> = self.replay.sample(p.batch, rng).into_iter().cloned().collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        ddql_update(&mut self.q, &refs, p.gamma, p.alpha).map(Some)
    }
}
