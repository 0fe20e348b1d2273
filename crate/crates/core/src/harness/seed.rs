//! Per-trial, per-component random streams.
//!
//! Every (master seed, trial) pair picks a ChaCha key and every component picks
//! a stream id under that key, so draws in one component never shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Placement,
    Channel,
    Compute,
    /// Measurement error on the controller's view of the channel.
    Estimation,
    Data,
    Policy,
    Sgd,
    /// Initial model weights.
    Init,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Placement,
        Component::Channel,
        Component::Compute,
        Component::Estimation,
        Component::Data,
        Component::Policy,
        Component::Sgd,
        Component::Init,
    ];

    fn stream_id(self) -> u64 {
        match self {
            Component::Placement => 1,
            Component::Channel => 2,
            Component::Compute => 3,
            Component::Estimation => 4,
            Component::Data => 5,
            Component::Policy => 6,
            Component::Sgd => 7,
            Component::Init => 8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seed_streams(master_seed: u64, trial: u64, component: Component) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(master_seed) ^ trial.wrapping_mul(0xd1b5_4a32_d192_ed03);
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream(component.stream_id());
    rng
}
