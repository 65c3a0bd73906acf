//! Central finite differences against the hand-written backward pass.

use svf_core::linalg::{Matrix, SeededRng};
use svf_core::lora::{LoraAdapter, LoraConfig};
use svf_core::model::{ModelConfig, PolicyModel, SiteSet, TensorKey};
use svf_core::svf::ExpertVector;

pub const H: f64 = 1e-5;
pub const TOKENS: [u32; 9] = [3, 7, 19, 5, 2, 20, 9, 0, 14];

/// Loss `Σ c ⊙ logprobs` with fixed random coefficients, and its logit gradient.
pub struct Probe {
    c: Matrix,
}

impl Probe {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, "fd-probe", &[]);
        Self {
            c: Matrix::random_normal(rows, cols, 1.0, &mut rng),
        }
    }

    pub fn loss(&self, logprobs: &Matrix) -> f64 {
        self.c
            .data()
            .iter()
            .zip(logprobs.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn dlogits(&self, logprobs: &Matrix) -> Matrix {
        let mut d = self.c.clone();
        for r in 0..d.rows() {
            let total: f64 = self.c.row(r).iter().sum();
            let lp = logprobs.row(r).to_vec();
            for (o, l) in d.row_mut(r).iter_mut().zip(lp) {
                *o -= l.exp() * total;
            }
        }
        d
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error over the pairs.
pub fn worst_rel_err(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(a, n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Analytic and central-difference gradients of every base tensor.
pub fn weight_pairs() -> Vec<(f64, f64)> {
    let cfg = ModelConfig::default();
    let model = PolicyModel::init(cfg.clone(), 21).unwrap();
    let probe = Probe::new(TOKENS.len(), cfg.vocab_size, 1);
    let cache = model.forward(&TOKENS).unwrap();
    let grads = model
        .backward(&cache, &probe.dlogits(&cache.logprobs))
        .unwrap();

    let mut rng = SeededRng::new(13, "fd-coords", &[]);
    let keys: Vec<TensorKey> = model.base().tensors().iter().map(|(k, _)| *k).collect();
    let mut pairs = Vec::new();
    // Touch every tensor at least a few times.
    for round in 0..4 {
        for (ti, key) in keys.iter().enumerate() {
            let g_tensor = grads
                .weights
                .tensors()
                .into_iter()
                .find(|(k, _)| k == key)
                .unwrap()
                .1
                .clone();
            let len = g_tensor.data().len();
            let idx = if *key == TensorKey::TokEmb {
                // Only rows of tokens that appear carry gradient; pick one.
                TOKENS[(round + ti) % TOKENS.len()] as usize * cfg.d_model + rng.below(cfg.d_model)
            } else if *key == TensorKey::PosEmb {
                ((round + ti) % TOKENS.len()) * cfg.d_model + rng.below(cfg.d_model)
            } else {
                rng.below(len)
            };
            let eval = |delta: f64| {
                let mut m = model.clone();
                for (k, t) in m.base_mut().tensors_mut() {
                    if k == *key {
                        t.data_mut()[idx] += delta;
                    }
                }
                probe.loss(&m.forward(&TOKENS).unwrap().logprobs)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            pairs.push((g_tensor.data()[idx], numeric));
        }
    }
    pairs
}

/// Analytic and central-difference gradients of the singular-value scales.
pub fn z_pairs() -> Vec<(f64, f64)> {
    let cfg = ModelConfig::default();
    let mut model = PolicyModel::init(cfg.clone(), 22).unwrap();
    let ranks = model.svf_ranks();
    let mut expert = ExpertVector::ones("probe", &ranks);
    let mut rng = SeededRng::new(13, "fd-z", &[]);
    let mut flat = expert.flat();
    for v in flat.iter_mut() {
        *v = 1.0 + 0.2 * rng.normal();
    }
    expert.set_flat(&flat).unwrap();
    model.set_expert(expert.clone()).unwrap();

    let probe = Probe::new(TOKENS.len(), cfg.vocab_size, 2);
    let cache = model.forward(&TOKENS).unwrap();
    let zg = model
        .backward_z(&cache, &probe.dlogits(&cache.logprobs))
        .unwrap();
    let zg_flat: Vec<f64> = zg.values().flatten().copied().collect();
    assert_eq!(zg_flat.len(), flat.len());

    let mut pairs = Vec::new();
    for _ in 0..60 {
        let i = rng.below(flat.len());
        let eval = |delta: f64| {
            let mut e = expert.clone();
            let mut f = flat.clone();
            f[i] += delta;
            e.set_flat(&f).unwrap();
            let mut m = model.clone();
            m.set_expert(e).unwrap();
            probe.loss(&m.forward(&TOKENS).unwrap().logprobs)
        };
        pairs.push((zg_flat[i], (eval(H) - eval(-H)) / (2.0 * H)));
    }
    pairs
}

/// Analytic and central-difference gradients of LoRA factors.
pub fn lora_pairs() -> Vec<(f64, f64)> {
    let cfg = ModelConfig::default();
    let mut model = PolicyModel::init(cfg.clone(), 23).unwrap();
    let lcfg = LoraConfig {
        rank: 4,
        target_sites: SiteSet::Both,
        dropout_p: 0.0,
        init_std: 0.1,
        ..LoraConfig::default()
    };
    let mut adapter = LoraAdapter::init("probe", &cfg, &lcfg, 3).unwrap();
    let mut rng = SeededRng::new(13, "fd-lora", &[]);
    let mut flat = adapter.flat();
    for v in flat.iter_mut() {
        *v += 0.05 * rng.normal();
    }
    adapter.set_flat(&flat).unwrap();
    model.set_lora(adapter.clone()).unwrap();

    let probe = Probe::new(TOKENS.len(), cfg.vocab_size, 3);
    let cache = model.forward(&TOKENS).unwrap();
    let grads = model
        .backward(&cache, &probe.dlogits(&cache.logprobs))
        .unwrap();
    let g_flat: Vec<f64> = grads
        .lora
        .values()
        .flat_map(|e| e.a.data().iter().chain(e.b.data()).copied().collect::<Vec<_>>())
        .collect();
    assert_eq!(g_flat.len(), flat.len());

    let mut pairs = Vec::new();
    for _ in 0..60 {
        let i = rng.below(flat.len());
        let eval = |delta: f64| {
            let mut a = adapter.clone();
            let mut f = flat.clone();
            f[i] += delta;
            a.set_flat(&f).unwrap();
            let mut m = model.clone();
            m.set_lora(a).unwrap();
            probe.loss(&m.forward(&TOKENS).unwrap().logprobs)
        };
        pairs.push((g_flat[i], (eval(H) - eval(-H)) / (2.0 * H)));
    }
    pairs
}

