#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnd_tmle::data::{Dataset, Observation, Schema};
use tnd_tmle::simulation::{
    apply_two_phase, generate_population, sample_phase_one, ConfoundingSetting, SamplingDesign,
    SimConfig,
};

/// Dataset with no covariates laid out as a 2×2 table of observed counts
/// `[[y1a1, y1a0], [y0a1, y0a0]]`, plus `masked` exposure-missing rows split
/// evenly between cases and noncases.
pub fn two_by_two(counts: [[usize; 2]; 2], masked: usize) -> Dataset {
    let mut rows = Vec::new();
    for (y, row) in [(true, counts[0]), (false, counts[1])] {
        for (a, c) in [(true, row[0]), (false, row[1])] {
            for _ in 0..c {
                rows.push(Observation::observed(a, y, vec![]));
            }
        }
    }
    for k in 0..masked {
        rows.push(Observation::masked(k % 2 == 0, vec![]));
    }
    Dataset::new(Schema::default(), rows).unwrap()
}

pub fn simulated(
    setting: ConfoundingSetting,
    design: SamplingDesign,
    beta_f: f64,
    n: usize,
    seed: u64,
) -> Dataset {
    let cfg = SimConfig {
        setting,
        design,
        beta_f,
        n,
        population_size: 30_000,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop = generate_population(&cfg, &mut rng);
    let ds = sample_phase_one(&pop, n, &mut rng).unwrap();
    apply_two_phase(&ds, design, &mut rng).unwrap()
}
