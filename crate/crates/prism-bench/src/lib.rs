//! Shared fixtures for the benchmark suite.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prism_core::lattice::{AtomSite, CrystalStructure, LatticeMatrix};
use prism_core::model::{ModelConfig, PrismModel, StaticGraphs};

/// Mildly sheared cell with `n` atoms at random fractional positions.
pub fn bench_structure(seed: u64, n: usize) -> CrystalStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice = LatticeMatrix::from_columns(
        Vector3::new(rng.random_range(4.0..6.0), 0.0, 0.0),
        Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(4.0..6.0), 0.0),
        Vector3::new(
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(4.0..6.0),
        ),
    )
    .unwrap();
    let sites = (0..n)
        .map(|_| {
            AtomSite::new(
                Vector3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ),
                rng.random_range(1..=54i64),
            )
            .unwrap()
        })
        .collect();
    CrystalStructure::new(lattice, sites, format!("bench-{seed}"), Some(1.0)).unwrap()
}

pub fn bench_model(dim: usize, layers: usize) -> PrismModel {
    PrismModel::new(ModelConfig {
        dim,
        layers,
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn bench_graphs(s: &CrystalStructure, model: &PrismModel) -> StaticGraphs {
    StaticGraphs::build(s, &model.config).unwrap()
}
