//! Measurement suites whose worst-case figures are asserted by the unit-level
//! test targets and reported by the acceptance run.

use svf_core::adapt::{cem_search, cem_step, cem_update, CemConfig, CemStepParams};
use svf_core::analysis::pca_ratio_sigma;
use svf_core::linalg::{reconstruct, svd, Matrix, SeededRng};
use svf_core::model::{ModelConfig, PolicyModel};
use svf_core::svf::{apply_expert, ExpertVector};

use super::oracles::{brute_force_cem_step, singular_values_oracle};

#[derive(Debug, Default)]
pub struct SvdSuite {
    pub matrices: usize,
    pub max_reconstruction: f64,
    pub max_orthonormality: f64,
    pub max_sigma_error: f64,
}

fn gram_error(m: &Matrix) -> f64 {
    // ‖MᵀM − I‖max over the columns of `m`.
    let mut worst: f64 = 0.0;
    for i in 0..m.cols() {
        for j in 0..m.cols() {
            let mut acc = 0.0;
            for k in 0..m.rows() {
                acc += m.get(k, i) * m.get(k, j);
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

/// `count` Gaussian matrices with shapes drawn from 1..=64 × 1..=48.
pub fn svd_suite(count: usize, seed: u64) -> SvdSuite {
    let mut out = SvdSuite::default();
    for i in 0..count {
        let mut rng = SeededRng::new(seed, "svd-suite", &[i as u64]);
        let rows = 1 + rng.below(64);
        let cols = 1 + rng.below(48);
        let w = Matrix::random_normal(rows, cols, 1.0, &mut rng);
        let f = svd(&w).expect("finite matrix");
        let back = reconstruct(&f).unwrap();
        let rel = back.sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
        let orth = gram_error(&f.u).max(gram_error(&f.vt.transpose()));
        let oracle = singular_values_oracle(&w);
        let sig = f
            .sigma
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.matrices += 1;
        out.max_reconstruction = out.max_reconstruction.max(rel);
        out.max_orthonormality = out.max_orthonormality.max(orth);
        out.max_sigma_error = out.max_sigma_error.max(sig);
    }
    out
}

#[derive(Debug, Default)]
pub struct IdentitySuite {
    pub ones_forward_diff: f64,
    pub linearity_diff: f64,
}

/// Ones-expert forward against the base forward, and `apply_expert` against
/// the same linear combination of its outputs.
pub fn identity_suite() -> IdentitySuite {
    let cfg = ModelConfig::default();
    let mut model = PolicyModel::init(cfg, 31).unwrap();
    let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 39) as u32).collect();
    let base = model.forward(&tokens).unwrap().logprobs;
    model
        .set_expert(ExpertVector::ones("ones", &model.svf_ranks()))
        .unwrap();
    let ones = model.forward(&tokens).unwrap().logprobs;
    let ones_forward_diff = base.max_abs_diff(&ones);

    let mut linearity_diff: f64 = 0.0;
    let mut rng = SeededRng::new(32, "linearity", &[]);
    for f in model.factors().unwrap().values() {
        let r = f.sigma.len();
        let z1: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        let z2: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        let (a, b) = (rng.normal(), rng.normal());
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let lhs = apply_expert(f, &mix).unwrap();
        let rhs = apply_expert(f, &z1)
            .unwrap()
            .scale(a)
            .add(&apply_expert(f, &z2).unwrap().scale(b))
            .unwrap();
        linearity_diff = linearity_diff.max(lhs.max_abs_diff(&rhs));
    }
    IdentitySuite {
        ones_forward_diff,
        linearity_diff,
    }
}

/// Deterministic scorer with frequent ties: a rounded quadratic.
fn tie_scorer(x: &[f64]) -> f64 {
    let v: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| -(v - 0.1 * i as f64).powi(2))
        .sum();
    (v * 4.0).round() / 4.0
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Debug, Default)]
pub struct CemSuite {
    pub cases: usize,
    pub bitwise_matches: usize,
    pub forced_example: bool,
    pub quadratic_error: f64,
    pub quadratic_iterations: usize,
}

/// Twenty seeded step configurations against the brute-force oracle, the
/// forced-elite example, and recovery of a known quadratic optimum.
pub fn cem_suite() -> CemSuite {
    let mut out = CemSuite::default();
    for case in 0..20u64 {
        let seed = if case == 0 { 9 } else { 100 + case };
        let mut rng = SeededRng::new(case, "cem-suite", &[]);
        let group = 1 + rng.below(4);
        let groups = 1 + rng.below(3);
        let dims = group * groups;
        let num_samples = 2 + rng.below(30);
        let num_elites = 1 + rng.below(num_samples);
        let normalized = case % 2 == 1;
        let iteration = rng.below(50);
        let mu: Vec<f64> = (0..dims).map(|_| rng.normal()).collect();
        let sigma: Vec<f64> = (0..dims).map(|_| rng.uniform()).collect();
        let p = CemStepParams {
            num_samples,
            num_elites,
            normalized,
            group_size: group,
            seed,
            iteration,
        };
        let got = cem_step(&mu, &sigma, &p, |x| Ok(tie_scorer(x))).unwrap();
        let want = brute_force_cem_step(
            &mu,
            &sigma,
            num_samples,
            num_elites,
            normalized,
            group,
            seed,
            iteration,
            tie_scorer,
        );
        let same = got.samples.len() == want.samples.len()
            && got
                .samples
                .iter()
                .zip(&want.samples)
                .all(|(a, b)| bits(a) == bits(b))
            && bits(&got.scores) == bits(&want.scores)
            && got.elites == want.elites
            && bits(&got.mu) == bits(&want.mu)
            && bits(&got.sigma) == bits(&want.sigma);
        out.cases += 1;
        out.bitwise_matches += usize::from(same);
    }

    let samples: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    let scores: Vec<f64> = (0..5).map(|i| i as f64).collect();
    let (mu, sigma, mut elites) = cem_update(&samples, &scores, 2).unwrap();
    elites.sort_unstable();
    out.forced_example = elites == [3, 4] && mu == [3.5] && sigma == [0.5];

    let target = [0.2, 0.3, 0.5];
    let cfg = CemConfig {
        max_iterations: 50,
        ..CemConfig::default()
    };
    let res = cem_search(3, 3, &cfg, 0, |a: &[f64]| {
        Ok(-a
            .iter()
            .zip(&target)
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>())
    })
    .unwrap();
    out.quadratic_error = res
        .best
        .iter()
        .zip(&target)
        .map(|(x, t)| (x - t).abs())
        .fold(0.0, f64::max);
    out.quadratic_iterations = res.iterations;
    out
}

#[derive(Debug, Default)]
pub struct PcaSuite {
    pub monotone: bool,
    pub full_rank_is_one: bool,
    pub fixture: bool,
}

/// Monotonicity and the full-rank identity over random spectra, plus the
/// `[4, 3, 2, 1]`, r = 2 fixture.
pub fn pca_suite() -> PcaSuite {
    let mut monotone = true;
    let mut full = true;
    for i in 0..200u64 {
        let mut rng = SeededRng::new(i, "pca-suite", &[]);
        let n = 1 + rng.below(48);
        let mut sigma: Vec<f64> = (0..n).map(|_| rng.uniform() * 10.0).collect();
        sigma.sort_by(|a, b| b.total_cmp(a));
        let ratios: Vec<f64> = (1..=n).map(|r| pca_ratio_sigma(&sigma, r).unwrap()).collect();
        monotone &= ratios.windows(2).all(|w| w[0] <= w[1]);
        full &= ratios[n - 1] == 1.0;
    }
    PcaSuite {
        monotone,
        full_rank_is_one: full,
        fixture: pca_ratio_sigma(&[4.0, 3.0, 2.0, 1.0], 2).unwrap() == 0.7,
    }
}
