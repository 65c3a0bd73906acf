//! Independent reimplementations used as test oracles. They share no code
//! with the library beyond the matrix container and the seeded RNG streams.

use svf_core::linalg::{Matrix, SeededRng};

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| m[p][q] * m[p][q])
            .sum();
        let diag: f64 = (0..n).map(|p| m[p][p] * m[p][p]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Singular values of `w` as square roots of the eigenvalues of `WᵀW`
/// (or `WWᵀ` when that is smaller), sorted descending.
pub fn singular_values_oracle(w: &Matrix) -> Vec<f64> {
    let (n, m) = (w.rows(), w.cols());
    let small = n.min(m);
    let mut g = Matrix::zeros(small, small);
    for i in 0..small {
        for j in 0..small {
            let mut acc = 0.0;
            if m <= n {
                for k in 0..n {
                    acc += w.get(k, i) * w.get(k, j);
                }
            } else {
                for k in 0..m {
                    acc += w.get(i, k) * w.get(j, k);
                }
            }
            g.set(i, j, acc);
        }
    }
    let mut s: Vec<f64> = jacobi_eigenvalues(&g)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Output of one brute-force CEM step.
#[derive(Debug)]
pub struct OracleStep {
    pub samples: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub elites: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// One CEM step written out longhand: draw every sample from its own stream,
/// pick elites by repeated arg-max (lowest index on ties), refit mean and
/// population deviation over the elites in ascending sample order.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_cem_step(
    mu: &[f64],
    sigma: &[f64],
    num_samples: usize,
    num_elites: usize,
    normalized: bool,
    group_size: usize,
    seed: u64,
    iteration: usize,
    scorer: impl Fn(&[f64]) -> f64,
) -> OracleStep {
    let d = mu.len();
    let mut samples = Vec::new();
    for j in 0..num_samples {
        let mut rng = SeededRng::new(seed, "cem-sample", &[iteration as u64, j as u64]);
        let mut x = vec![0.0; d];
        if normalized {
            let mut g0 = 0;
            while g0 < d {
                let g1 = usize::min(g0 + group_size, d);
                loop {
                    for i in g0..g1 {
                        x[i] = mu[i] + sigma[i] * rng.normal();
                    }
                    let mut total = 0.0;
                    for v in &x[g0..g1] {
                        total += v;
                    }
                    if total.abs() >= 1e-6 {
                        for v in &mut x[g0..g1] {
                            *v /= total;
                        }
                        break;
                    }
                }
                g0 = g1;
            }
        } else {
            for i in 0..d {
                x[i] = mu[i] + sigma[i] * rng.normal();
            }
        }
        samples.push(x);
    }
    let scores: Vec<f64> = samples.iter().map(|x| scorer(x)).collect();

    let mut taken = vec![false; num_samples];
    let mut elites = Vec::new();
    for _ in 0..num_elites {
        let mut best: Option<usize> = None;
        for j in 0..num_samples {
            if taken[j] {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(b) if scores[j] > scores[b] => best = Some(j),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        elites.push(b);
    }

    let k = num_elites as f64;
    let mut new_mu = vec![0.0; d];
    let mut new_sigma = vec![0.0; d];
    for i in 0..d {
        let mut total = 0.0;
        for j in 0..num_samples {
            if taken[j] {
                total += samples[j][i];
            }
        }
        let mean = total / k;
        let mut ss = 0.0;
        for j in 0..num_samples {
            if taken[j] {
                let dev = samples[j][i] - mean;
                ss += dev * dev;
            }
        }
        new_mu[i] = mean;
        new_sigma[i] = (ss / k).sqrt();
    }
    OracleStep {
        samples,
        scores,
        elites,
        mu: new_mu,
        sigma: new_sigma,
    }
}

/// Naive triple-loop matrix product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, acc);
        }
    }
    c
}
