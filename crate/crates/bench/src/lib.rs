//! Fixtures shared by the benchmarks.

use vilod_core::synth::{generate_world, SyntheticWorld, WorldConfig};

/// The default-sized synthetic world with embeddings of width `dim`.
pub fn world(dim: usize) -> SyntheticWorld {
    generate_world(&WorldConfig {
        dim,
        ..WorldConfig::default()
    })
}
