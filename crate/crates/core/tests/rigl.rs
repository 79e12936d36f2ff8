use dctps::rigl::rigl_step;
use dctps::sparse::SparseMatrix;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force reference: sort everything, take the ends.
fn reference(s: &SparseMatrix, grad: &[f64], f: f64) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let cols = s.cols();
    let k = (f * s.nnz() as f64).floor() as usize;
    let mut actives: Vec<(usize, usize, f64)> = s.support().iter().zip(s.values()).map(|(&(r, c), &v)| (r, c, v.abs())).collect();
    // Stable sort on magnitude keeps coordinate order among ties.
    actives.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let mut inactives: Vec<(usize, usize, f64)> = Vec::new();
    for r in 0..s.rows() {
        for c in 0..cols {
            if s.position(r, c).is_none() {
                inactives.push((r, c, grad[r * cols + c].abs()));
            }
        }
    }
    inactives.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let k = k.min(inactives.len());
    let mut dropped: Vec<_> = actives[..k].iter().map(|a| (a.0, a.1)).collect();
    let mut grown: Vec<_> = inactives[..k].iter().map(|a| (a.0, a.1)).collect();
    dropped.sort();
    grown.sort();
    (dropped, grown)
}

fn random_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize, nnz: usize) -> SparseMatrix {
    let trip = sample(rng, rows * cols, nnz)
        .into_iter()
        .map(|i| (i / cols, i % cols, rng.random_range(-1.0..1.0)))
        .collect();
    SparseMatrix::from_triplets(rows, cols, trip).unwrap()
}

#[test]
fn six_by_six_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let s = random_layer(&mut rng, 6, 6, 8);
        let grad: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = rigl_step(&s, &grad, 0.25).unwrap();
        let (dropped, grown) = reference(&s, &grad, 0.25);
        assert_eq!(up.dropped, dropped);
        assert_eq!(up.grown, grown);
        assert_eq!(up.matrix.nnz(), 8);
        for &(r, c) in &grown {
            assert_eq!(up.matrix.get(r, c), 0.0);
        }
    }
}

#[test]
fn ties_follow_coordinate_order() {
    let s = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, -1.0), (1, 1, 1.0), (1, 2, 3.0)]).unwrap();
    let grad = [0.0, 2.0, 0.0, 2.0, 0.0, 0.0];
    let up = rigl_step(&s, &grad, 0.5).unwrap();
    assert_eq!(up.dropped, vec![(0, 0), (0, 2)]);
    assert_eq!(up.grown, vec![(0, 1), (1, 0)]);
}

#[test]
fn rejects_bad_inputs() {
    let s = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
    assert!(rigl_step(&s, &[0.0; 3], 0.1).is_err());
    assert!(rigl_step(&s, &[0.0; 4], 1.0).is_err());
    assert!(rigl_step(&s, &[f64::NAN; 4], 0.5).is_err());
}

proptest! {
    #[test]
    fn drop_and_grow_invariants(seed in 0u64..10_000, rows in 1usize..8, cols in 1usize..8, frac in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nnz = rng.random_range(0..=rows * cols);
        let mut s = random_layer(&mut rng, rows, cols, nnz);
        for _ in 0..3 {
            let grad: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up = rigl_step(&s, &grad, frac).unwrap();
            prop_assert_eq!(up.matrix.nnz(), nnz);
            let max_dropped = up.dropped.iter().map(|&(r, c)| s.get(r, c).abs()).fold(0.0, f64::max);
            for (&(r, c), v) in s.support().iter().zip(s.values()) {
                if !up.dropped.contains(&(r, c)) {
                    prop_assert!(v.abs() >= max_dropped);
                }
            }
            let min_grown = up.grown.iter().map(|&(r, c)| grad[r * cols + c].abs()).fold(f64::INFINITY, f64::min);
            for r in 0..rows {
                for c in 0..cols {
                    if s.position(r, c).is_none() && !up.grown.contains(&(r, c)) {
                        prop_assert!(grad[r * cols + c].abs() <= min_grown);
                    }
                }
            }
            s = up.matrix;
            // Give grown entries values so later rounds see a mix.
            for v in s.values_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
}
