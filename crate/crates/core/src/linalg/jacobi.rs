use super::{dot, Matrix, SvdFactors};

const MAX_SWEEPS: usize = 80;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations in FP64.
///
/// Singular values at or below `σ_max · max(m, n) · ε` are treated as zero and
/// dropped, so `rank()` is the numerical rank.
pub fn jacobi_svd(a: &Matrix) -> SvdFactors {
    if a.rows() < a.cols() {
        let t = jacobi_svd(&a.transpose());
        return SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        };
    }
    let (m, n) = (a.rows(), a.cols());
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = w.iter().map(|c| dot(c, c).sqrt()).zip(0..).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let cutoff = sigma_max * m.max(n) as f64 * f64::EPSILON;
    let kept: Vec<(f64, usize)> = order.into_iter().filter(|(s, _)| *s > cutoff).collect();

    let r = kept.len();
    let mut u = Matrix::zeros(m, r);
    let mut vm = Matrix::zeros(n, r);
    let mut s = Vec::with_capacity(r);
    for (j, &(sigma, src)) in kept.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u.set(i, j, w[src][i] / sigma);
        }
        for i in 0..n {
            vm.set(i, j, v[src][i]);
        }
    }
    SvdFactors { u, s, v: vm }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
