use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Example;

pub const DEFAULT_PROBE_SIZE: usize = 100;

/// Provenance of a probe sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInfo {
    pub seed: u64,
    pub requested: usize,
    pub size: usize,
    /// Indices into the source pool, ascending.
    pub indices: Vec<usize>,
    pub digest: String,
    /// True when the pool was smaller than the request and all of it was used.
    pub clamped: bool,
}

/// Seeded uniform sample without replacement. Uses the whole pool when it
/// holds fewer than `size` examples.
pub fn sample_probe(pool: &[Example], size: usize, seed: u64) -> (Vec<Example>, ProbeInfo) {
    let clamped = size >= pool.len();
    let mut indices: Vec<usize> = if clamped {
        (0..pool.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, pool.len(), size).into_vec()
    };
    indices.sort_unstable();
    if clamped && size > pool.len() {
        log::warn!(
            "probe size {size} exceeds the {} available examples; using all of them",
            pool.len()
        );
    }
    let probe: Vec<Example> = indices.iter().map(|&i| pool[i].clone()).collect();
    let digest = probe_digest(&probe);
    let info = ProbeInfo {
        seed,
        requested: size,
        size: probe.len(),
        indices,
        digest,
        clamped,
    };
    (probe, info)
}

pub fn probe_digest(probe: &[Example]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(probe).expect("examples serialize"));
    hex::encode(h.finalize())
}
