//! Stage seeds. Every random stage draws from its own seed, derived from the
//! single root seed as the first `u64` of a ChaCha8 generator seeded with the
//! root and switched to the stage's stream:
//!
//! ```text
//! stage_seed(root, stage) = ChaCha8(seed_from_u64(root), stream = stage).next_u64()
//! ```
//!
//! Streams are fixed: synthetic world 1, split 2, routes 3. Sweep trial `t > 0`
//! uses `1000 + t` to derive a fresh root for that trial; trial 0 reuses the
//! root itself so a one-trial sweep matches the single-stage commands.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synthetic,
    Split,
    Routes,
}

impl Stage {
    pub fn stream(self) -> u64 {
        match self {
            Stage::Synthetic => 1,
            Stage::Split => 2,
            Stage::Routes => 3,
        }
    }
}

const TRIAL_STREAM_BASE: u64 = 1000;

fn derive(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    derive(root, stage.stream())
}

pub fn trial_seed(root: u64, trial: usize) -> u64 {
    if trial == 0 {
        root
    } else {
        derive(root, TRIAL_STREAM_BASE + trial as u64)
    }
}
