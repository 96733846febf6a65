//! Benchmark fixtures. The benchmarks themselves live in `benches/`.

use daem_core::dataset::{generate_synthetic_cohort, WsiBag};
use daem_core::numerics::{SeededRng, Tensor};

/// One synthetic slide of the default shape.
pub fn sample_bag(seed: u64) -> WsiBag {
    generate_synthetic_cohort(2, &mut SeededRng::new(seed))
        .expect("synthetic cohort")
        .swap_remove(0)
}

pub fn random_points(n: usize, extent: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| [rng.uniform_range(0.0, extent), rng.uniform_range(0.0, extent)])
        .collect()
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Scores with a weak signal and labels, for ranking metrics.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = SeededRng::new(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let a = labels.iter().map(|&y| y as u8 as f64 + 1.5 * rng.normal()).collect();
    let b = labels.iter().map(|&y| y as u8 as f64 + 2.0 * rng.normal()).collect();
    (a, b, labels)
}
