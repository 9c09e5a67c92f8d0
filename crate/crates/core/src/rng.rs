//! Named random substreams derived from a single root seed.
//!
//! Every component draws from its own ChaCha stream so that, for example,
//! the attributes of device 14 are the same whether the topology was built
//! in one shot or grown one device at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Device(usize),
    Link(usize, usize),
    LinkCount(usize),
    ExtraLinks(usize),
    GrowLinks { from: usize, to: usize },
    Services,
    TransitionRates,
    Workload(u64),
    Holographic(u64),
    Placement(u64),
    Policy { policy: u8, slot: u64 },
    AgentInit { policy: u8 },
    Synthetic(u64),
}

impl Stream {
    fn id(self) -> u64 {
        const PAYLOAD: u64 = (1 << 56) - 1;
        let (tag, payload): (u64, u64) = match self {
            Stream::Device(i) => (1, i as u64),
            Stream::Link(a, b) => (2, ((a as u64) << 24) | b as u64),
            Stream::LinkCount(v) => (3, v as u64),
            Stream::ExtraLinks(v) => (4, v as u64),
            Stream::GrowLinks { from, to } => (5, ((from as u64) << 24) | to as u64),
            Stream::Services => (6, 0),
            Stream::TransitionRates => (7, 0),
            Stream::Workload(slot) => (8, slot),
            Stream::Holographic(user) => (9, user),
            Stream::Placement(slot) => (10, slot),
            Stream::Policy { policy, slot } => (11, ((policy as u64) << 40) | slot),
            Stream::AgentInit { policy } => (12, policy as u64),
            Stream::Synthetic(i) => (13, i),
        };
        (tag << 56) | (payload & PAYLOAD)
    }
}

pub fn substream(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream.id());
    rng
}
