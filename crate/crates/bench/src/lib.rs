//! Shared fixtures for the stacking benchmarks.

use fes_core::{sample_episode, DomainProfile, EpisodeBundle};

/// A mid-sized episode: 8 extractors, 41 snapshots, 5 to 6 classes.
pub fn bench_episode(seed: u64) -> EpisodeBundle {
    let mut p = DomainProfile::example("bench");
    p.way_range = [5, 6];
    p.shot_range = [3, 6];
    p.query_per_class = 5;
    sample_episode(&p, 8, 41, seed).expect("bench profile is valid")
}
