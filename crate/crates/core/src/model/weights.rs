use super::config::ModelConfig;
use crate::linalg::{Matrix, SeededRng};
use crate::svf::{MatrixId, Site};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

impl LayerWeights {
    pub fn site(&self, site: Site) -> &Matrix {
        match site {
            Site::QProj => &self.wq,
            Site::KProj => &self.wk,
            Site::VProj => &self.wv,
            Site::OProj => &self.wo,
            Site::MlpIn => &self.w_in,
            Site::MlpOut => &self.w_out,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Matrix {
        match site {
            Site::QProj => &mut self.wq,
            Site::KProj => &mut self.wk,
            Site::VProj => &mut self.wv,
            Site::OProj => &mut self.wo,
            Site::MlpIn => &mut self.w_in,
            Site::MlpOut => &mut self.w_out,
        }
    }
}

/// Every parameter tensor of the model. Linear weights are stored
/// `d_in × d_out` and applied as `y = x · W`. Layer-norm gains and biases are
/// `1 × d` matrices so the whole set can be walked uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub unembed: Matrix,
}

/// Names a parameter tensor; also the record key in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorKey {
    Matrix(MatrixId),
    TokEmb,
    PosEmb,
    Ln1Gain(usize),
    Ln1Bias(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    LnfGain,
    LnfBias,
    Unembed,
}

impl TensorKey {
    /// `(layer, code)` pair used in the checkpoint payload. Codes 0–5 are the
    /// adaptable sites; larger codes are model-only tensors.
    pub fn record_key(self) -> (u16, u8) {
        match self {
            TensorKey::Matrix(id) => (id.layer as u16, id.site.code()),
            TensorKey::TokEmb => (0, 16),
            TensorKey::PosEmb => (0, 17),
            TensorKey::Ln1Gain(l) => (l as u16, 18),
            TensorKey::Ln1Bias(l) => (l as u16, 19),
            TensorKey::Ln2Gain(l) => (l as u16, 20),
            TensorKey::Ln2Bias(l) => (l as u16, 21),
            TensorKey::LnfGain => (0, 22),
            TensorKey::LnfBias => (0, 23),
            TensorKey::Unembed => (0, 24),
        }
    }

    pub fn from_record_key(layer: u16, code: u8) -> Option<Self> {
        let l = usize::from(layer);
        Some(match code {
            0..=5 => TensorKey::Matrix(MatrixId::new(l, Site::from_code(code)?)),
            16 => TensorKey::TokEmb,
            17 => TensorKey::PosEmb,
            18 => TensorKey::Ln1Gain(l),
            19 => TensorKey::Ln1Bias(l),
            20 => TensorKey::Ln2Gain(l),
            21 => TensorKey::Ln2Bias(l),
            22 => TensorKey::LnfGain,
            23 => TensorKey::LnfBias,
            24 => TensorKey::Unembed,
            _ => return None,
        })
    }
}

impl Weights {
    /// Random initialization: small Gaussian embeddings, fan-in scaled linear
    /// weights, residual-output projections further scaled by `1/√(2L)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let mut rng = SeededRng::new(seed, "model-init", &[]);
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let tok_emb = Matrix::random_normal(config.vocab_size, d, 0.3, &mut rng);
        let pos_emb = Matrix::random_normal(config.context_len, d, 0.3, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: Matrix::zeros(1, d),
                wq: Matrix::random_normal(d, d, fan_in(d), &mut rng),
                wk: Matrix::random_normal(d, d, fan_in(d), &mut rng),
                wv: Matrix::random_normal(d, d, fan_in(d), &mut rng),
                wo: Matrix::random_normal(d, d, fan_in(d) * resid_scale, &mut rng),
                ln2_gain: ones(d),
                ln2_bias: Matrix::zeros(1, d),
                w_in: Matrix::random_normal(d, config.d_mlp, fan_in(d), &mut rng),
                w_out: Matrix::random_normal(
                    config.d_mlp,
                    d,
                    fan_in(config.d_mlp) * resid_scale,
                    &mut rng,
                ),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: ones(d),
            lnf_bias: Matrix::zeros(1, d),
            unembed: Matrix::random_normal(d, config.vocab_size, fan_in(d), &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: z(&l.ln1_gain),
                    ln1_bias: z(&l.ln1_bias),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ln2_gain: z(&l.ln2_gain),
                    ln2_bias: z(&l.ln2_bias),
                    w_in: z(&l.w_in),
                    w_out: z(&l.w_out),
                })
                .collect(),
            lnf_gain: z(&self.lnf_gain),
            lnf_bias: z(&self.lnf_bias),
            unembed: z(&self.unembed),
        }
    }

    pub fn matrix(&self, id: MatrixId) -> &Matrix {
        self.layers[id.layer].site(id.site)
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> &mut Matrix {
        self.layers[id.layer].site_mut(id.site)
    }

    pub fn tensors(&self) -> Vec<(TensorKey, &Matrix)> {
        let mut out = vec![
            (TensorKey::TokEmb, &self.tok_emb),
            (TensorKey::PosEmb, &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((TensorKey::Ln1Gain(l), &layer.ln1_gain));
            out.push((TensorKey::Ln1Bias(l), &layer.ln1_bias));
            for site in Site::ALL {
                out.push((TensorKey::Matrix(MatrixId::new(l, site)), layer.site(site)));
            }
            out.push((TensorKey::Ln2Gain(l), &layer.ln2_gain));
            out.push((TensorKey::Ln2Bias(l), &layer.ln2_bias));
        }
        out.push((TensorKey::LnfGain, &self.lnf_gain));
        out.push((TensorKey::LnfBias, &self.lnf_bias));
        out.push((TensorKey::Unembed, &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKey, &mut Matrix)> {
        let mut out = vec![
            (TensorKey::TokEmb, &mut self.tok_emb),
            (TensorKey::PosEmb, &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((TensorKey::Ln1Gain(l), &mut layer.ln1_gain));
            out.push((TensorKey::Ln1Bias(l), &mut layer.ln1_bias));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::QProj)), &mut layer.wq));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::KProj)), &mut layer.wk));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::VProj)), &mut layer.wv));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::OProj)), &mut layer.wo));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::MlpIn)), &mut layer.w_in));
            out.push((TensorKey::Matrix(MatrixId::new(l, Site::MlpOut)), &mut layer.w_out));
            out.push((TensorKey::Ln2Gain(l), &mut layer.ln2_gain));
            out.push((TensorKey::Ln2Bias(l), &mut layer.ln2_bias));
        }
        out.push((TensorKey::LnfGain, &mut self.lnf_gain));
        out.push((TensorKey::LnfBias, &mut self.lnf_bias));
        out.push((TensorKey::Unembed, &mut self.unembed));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += s * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, s: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, s).expect("weights share a layout");
        }
    }
}

fn ones(d: usize) -> Matrix {
    Matrix::from_vec(1, d, vec![1.0; d]).expect("shape")
}
