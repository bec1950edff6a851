use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{jacobi_svd, orthonormalize_columns, Matrix, SvdFactors};

/// Approximate rank-`rank` SVD by randomized range finding: a Gaussian sketch
/// with `oversample` extra columns, `power_iters` rounds of subspace
/// iteration, then an exact SVD of the small projected matrix. The sketch is
/// drawn from a fixed-seed stream so results are reproducible.
pub fn randomized_svd(
    a: &Matrix,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> SvdFactors {
    let (m, n) = (a.rows(), a.cols());
    let width = (rank + oversample).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Matrix::from_vec(
        n,
        width,
        (0..n * width).map(|_| StandardNormal.sample(&mut rng)).collect(),
    );

    let mut q = a.matmul(&omega);
    orthonormalize_columns(&mut q);
    for _ in 0..power_iters {
        let mut z = a.t_matmul(&q);
        orthonormalize_columns(&mut z);
        q = a.matmul(&z);
        orthonormalize_columns(&mut q);
    }

    // B = Qᵀ A is width × n; its SVD lifts back through Q.
    let b = q.t_matmul(a);
    let small = jacobi_svd(&b);
    let u = q.matmul(&small.u);
    SvdFactors {
        u,
        s: small.s,
        v: small.v,
    }
    .truncate(rank)
}
