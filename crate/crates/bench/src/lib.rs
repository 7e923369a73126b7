//! Fixtures shared by the benchmarks.

use difftrack::{
    random_volume, sample_directions, sample_seeds, BinaryMask, FodVolume, NewtonConstants, SeedBatch, TrackingParams,
};

pub struct Fixture {
    pub volume: FodVolume,
    pub mask: BinaryMask,
    pub seeds: SeedBatch,
    pub params: TrackingParams,
    pub constants: NewtonConstants,
}

/// A random lmax-8 volume with `n` seeds drawn from its full extent.
pub fn fixture(dims: [usize; 3], n: usize) -> Fixture {
    let volume = random_volume(dims, 8, 0.02, 7).expect("valid volume");
    let mask = BinaryMask::full_like(&volume);
    let positions = sample_seeds(&mask, n, 3).expect("non-empty mask");
    let seeds = SeedBatch::new(positions, sample_directions(n, 3)).expect("matching seeds");
    let params = TrackingParams {
        step_size: 0.5,
        amplitude_threshold: 0.05,
        max_points: 40,
        min_length: 0.0,
        max_length: 20.0,
        ..Default::default()
    };
    Fixture {
        volume,
        mask,
        seeds,
        params,
        constants: NewtonConstants::default(),
    }
}
