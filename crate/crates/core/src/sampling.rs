//! Seeded random instances: unit feature columns, orthogonal rotations and
//! column-stochastic probability matrices.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::matrix::Mat;

/// Deterministic generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `d × n` matrix of independent uniformly distributed unit vectors.
pub fn random_unit_columns<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize) -> Mat {
    loop {
        let g = gaussian_mat(rng, d, n);
        if let Ok(u) = g.l2_normalize_columns() {
            return u;
        }
    }
}

/// Random `d × d` orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Mat {
    let g = gaussian_mat(rng, d, d);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v = g.col(j);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Mat::from_columns(&basis).expect("square basis")
}

/// Random column-stochastic `rows × cols` matrix with entries bounded away
/// from zero (softmax of Gaussian logits with the given spread).
pub fn random_prob<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, spread: f64) -> Mat {
    gaussian_mat(rng, rows, cols)
        .scale(spread)
        .softmax_columns()
        .expect("non-empty")
}

/// Random column-stochastic matrix with columns uniform on the simplex
/// (normalized unit exponentials).
pub fn random_simplex_columns<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let e = Mat::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(Exp1).max(f64::MIN_POSITIVE)
    });
    let sums = e.col_sums();
    Mat::from_fn(rows, cols, |r, c| e[(r, c)] / sums[c])
}
