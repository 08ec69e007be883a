#![allow(dead_code)]

use ndarray::{Array1, Array2};
use plain::dataset::{generate_synthetic, synthesize_pml, Dataset, SynthConfig, SyntheticSpec};
use plain::graph::SparseSym;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x = uniform(rows, cols, -1.0, 1.0, rng);
    for mut row in x.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    x
}

/// Binary matrix with at least one 1 per row.
pub fn binary(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let mut y = Array2::from_shape_fn((rows, cols), |_| u8::from(rng.random_bool(p)));
    for mut row in y.rows_mut() {
        if row.iter().all(|&v| v == 0) {
            row[rng.random_range(0..cols)] = 1;
        }
    }
    y
}

/// Random symmetric non-negative weights; some nodes may be isolated.
pub fn random_graph(dim: usize, density: f64, rng: &mut ChaCha8Rng) -> SparseSym {
    let mut triplets = Vec::new();
    for i in 0..dim {
        for j in i + 1..dim {
            if rng.random_bool(density) {
                let w = rng.random_range(0.01..2.0);
                triplets.push((i, j, w));
                triplets.push((j, i, w));
            }
        }
    }
    SparseSym::from_triplets(dim, triplets).unwrap()
}

/// Dense `I − D^{-1/2} A D^{-1/2}` with identity rows for isolated nodes.
pub fn dense_laplacian(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let d: Array1<f64> = a.sum_axis(ndarray::Axis(1));
    let mut l = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            if d[i] > 0.0 && d[j] > 0.0 {
                l[[i, j]] -= a[[i, j]] / (d[i].sqrt() * d[j].sqrt());
            }
        }
    }
    l
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Clean synthetic data with `r` injected false positives.
pub fn pml_data(n: usize, d: usize, labels: usize, r: usize, seed: u64) -> Dataset {
    let clean = generate_synthetic(&SyntheticSpec {
        n,
        d,
        labels,
        noise: 0.3,
        seed,
    })
    .unwrap();
    synthesize_pml(&clean, &SynthConfig { r, seed: seed + 1 }).unwrap()
}
