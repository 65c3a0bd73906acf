//! Pre-norm decoder-only transformer with hand-written backpropagation.
//!
//! Per layer: `x += Attn(LN1(x))`, `x += W_out · gelu(W_in · LN2(x))`, then a
//! final layer norm and an untied unembedding. Linear maps carry no bias.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::vocab::Token;
use super::weights::Weights;
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn, Matrix, SeededRng};
use crate::lora::{LoraAdapter, LoraEntry};
use crate::svf::{MatrixId, Site};

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

/// Cached state of the LoRA side path of one linear map.
pub(crate) struct LoraPath {
    /// Inverted-dropout factors per input entry (`None` when not dropping).
    mask: Option<Vec<f64>>,
    masked: Matrix,
    mid: Matrix,
}

pub(crate) struct LayerCache {
    x_in: Matrix,
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn: Matrix,
    x_mid: Matrix,
    ln2: LnCache,
    c: Matrix,
    hpre: Matrix,
    hact: Matrix,
    lora: BTreeMap<Site, LoraPath>,
}

/// Activations retained from one forward pass, consumed by backprop.
pub struct ForwardCache {
    pub(crate) version: u64,
    pub(crate) tokens: Vec<Token>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Matrix,
    /// Row `t` is the log-softmax over the token following position `t`.
    pub logprobs: Matrix,
}

impl ForwardCache {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

/// Gradients of a scalar loss with respect to every parameter tensor, plus
/// LoRA factors when an adapter was active.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Weights,
    pub lora: BTreeMap<MatrixId, LoraEntry>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        self.weights.add_scaled(&other.weights, 1.0);
        for (id, e) in &other.lora {
            match self.lora.get_mut(id) {
                Some(mine) => {
                    mine.a.add_scaled(&e.a, 1.0).expect("same shapes");
                    mine.b.add_scaled(&e.b, 1.0).expect("same shapes");
                }
                None => {
                    self.lora.insert(*id, e.clone());
                }
            }
        }
    }
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let g = gain.data();
    let b = bias.data();
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = xhat.get(r, j) * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (t, d) = dy.shape();
    let g = gain.data();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dgain.data_mut()[j] += dyr[j] * xh[j];
            dbias.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    gemm_nn(a.data(), b.data(), out.data_mut(), a.rows(), a.cols(), b.cols());
    out
}

/// `y = x · W (+ scale · drop(x) · A · B)`
fn linear(
    x: &Matrix,
    w: &Matrix,
    lora: Option<(&LoraEntry, f64, f64)>,
    dropout: Option<&mut SeededRng>,
) -> (Matrix, Option<LoraPath>) {
    let mut y = matmul(x, w);
    let Some((entry, scale, p)) = lora else {
        return (y, None);
    };
    let (mask, masked) = match dropout {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.data().len())
                .map(|_| if rng.uniform() < p { 0.0 } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (
                Some(mask),
                Matrix::from_vec(x.rows(), x.cols(), data).expect("shape"),
            )
        }
        _ => (None, x.clone()),
    };
    let mid = matmul(&masked, &entry.a);
    let side = matmul(&mid, &entry.b);
    y.add_scaled(&side, scale).expect("shape");
    (y, Some(LoraPath { mask, masked, mid }))
}

/// Accumulates `dW` (and LoRA factor gradients) and returns `dx`.
fn linear_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    dw: &mut Matrix,
    lora: Option<(&LoraEntry, f64, &LoraPath, &mut LoraEntry)>,
) -> Matrix {
    let (t, n) = x.shape();
    let m = w.cols();
    gemm_tn(x.data(), dy.data(), dw.data_mut(), t, n, m);
    let mut dx = Matrix::zeros(t, n);
    gemm_nt(dy.data(), w.data(), dx.data_mut(), t, m, n);
    if let Some((entry, scale, path, grad)) = lora {
        let rank = entry.a.cols();
        // dB += scale · midᵀ · dy
        let mut db = Matrix::zeros(rank, m);
        gemm_tn(path.mid.data(), dy.data(), db.data_mut(), t, rank, m);
        grad.b.add_scaled(&db, scale).expect("shape");
        // dmid = scale · dy · Bᵀ
        let mut dmid = Matrix::zeros(t, rank);
        gemm_nt(dy.data(), entry.b.data(), dmid.data_mut(), t, m, rank);
        let dmid = dmid.scale(scale);
        // dA += maskedᵀ · dmid
        gemm_tn(path.masked.data(), dmid.data(), grad.a.data_mut(), t, n, rank);
        // dx += (dmid · Aᵀ) ⊙ mask
        let mut dmasked = Matrix::zeros(t, n);
        gemm_nt(dmid.data(), entry.a.data(), dmasked.data_mut(), t, rank, n);
        match &path.mask {
            Some(mask) => {
                for ((o, v), mk) in dx.data_mut().iter_mut().zip(dmasked.data()).zip(mask) {
                    *o += v * mk;
                }
            }
            None => dx.add_scaled(&dmasked, 1.0).expect("shape"),
        }
    }
    dx
}

fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    w: &Weights,
    lora: Option<&LoraAdapter>,
    tokens: &[Token],
    mut dropout: Option<&mut SeededRng>,
    version: u64,
) -> ForwardCache {
    let t_len = tokens.len();
    let d = cfg.d_model;
    let mut x = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for ((o, e), p) in row
            .iter_mut()
            .zip(w.tok_emb.row(tok as usize))
            .zip(w.pos_emb.row(t))
        {
            *o = e + p;
        }
    }

    let lora_for = |layer: usize, site: Site| {
        lora.and_then(|ad| {
            ad.entries
                .get(&MatrixId::new(layer, site))
                .map(|e| (e, ad.scale(), ad.dropout_p))
        })
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let x_in = x;
        let mut paths = BTreeMap::new();
        let (a, ln1) = layer_norm(&x_in, &lw.ln1_gain, &lw.ln1_bias);

        let mut project = |site: Site, input: &Matrix, weight: &Matrix| {
            let (y, path) = linear(input, weight, lora_for(l, site), dropout.as_deref_mut());
            if let Some(p) = path {
                paths.insert(site, p);
            }
            y
        };
        let q = project(Site::QProj, &a, &lw.wq);
        let k = project(Site::KProj, &a, &lw.wk);
        let v = project(Site::VProj, &a, &lw.wv);

        let (attn, probs) = attention(cfg, &q, &k, &v);
        let attn_out = project(Site::OProj, &attn, &lw.wo);
        let x_mid = x_in.add(&attn_out).expect("shape");

        let (c, ln2) = layer_norm(&x_mid, &lw.ln2_gain, &lw.ln2_bias);
        let hpre = project(Site::MlpIn, &c, &lw.w_in);
        let hact = Matrix::from_vec(
            hpre.rows(),
            hpre.cols(),
            hpre.data().iter().map(|&v| gelu(v)).collect(),
        )
        .expect("shape");
        let mlp_out = project(Site::MlpOut, &hact, &lw.w_out);
        x = x_mid.add(&mlp_out).expect("shape");

        layers.push(LayerCache {
            x_in,
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            ln2,
            c,
            hpre,
            hact,
            lora: paths,
        });
    }

    let (f, lnf) = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
    let logits = matmul(&f, &w.unembed);
    let logprobs = log_softmax_rows(&logits);
    ForwardCache {
        version,
        tokens: tokens.to_vec(),
        layers,
        lnf,
        f,
        logprobs,
    }
}

/// Causal multi-head attention. Returns the concatenated head outputs and the
/// per-head probability matrices (zero above the diagonal).
fn attention(cfg: &ModelConfig, q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Vec<Matrix>) {
    let t_len = q.rows();
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(t_len, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let off = h * dh;
        let mut p = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[off..off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for item in row.iter_mut().take(i + 1) {
                *item = (*item - max).exp();
                z += *item;
            }
            for item in row.iter_mut().take(i + 1) {
                *item /= z;
            }
            let orow = &mut out.row_mut(i)[off..off + dh];
            for j in 0..=i {
                let pij = p.get(i, j);
                let vj = &v.row(j)[off..off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

pub(crate) fn backward(
    cfg: &ModelConfig,
    w: &Weights,
    lora: Option<&LoraAdapter>,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Gradients {
    let mut g = w.zeros_like();
    let mut lora_grads: BTreeMap<MatrixId, LoraEntry> = lora
        .map(|ad| {
            ad.entries
                .iter()
                .map(|(id, e)| {
                    (
                        *id,
                        LoraEntry {
                            a: Matrix::zeros(e.a.rows(), e.a.cols()),
                            b: Matrix::zeros(e.b.rows(), e.b.cols()),
                        },
                    )
                })
                .collect()
        })
        .unwrap_or_default();

    let t_len = cache.tokens.len();
    let d = cfg.d_model;
    let vsz = cfg.vocab_size;

    // Unembedding and final norm.
    gemm_tn(
        cache.f.data(),
        dlogits.data(),
        g.unembed.data_mut(),
        t_len,
        d,
        vsz,
    );
    let mut df = Matrix::zeros(t_len, d);
    gemm_nt(dlogits.data(), w.unembed.data(), df.data_mut(), t_len, vsz, d);
    let mut dx = layer_norm_backward(
        &df,
        &cache.lnf,
        &w.lnf_gain,
        &mut g.lnf_gain,
        &mut g.lnf_bias,
    );

    for l in (0..cfg.n_layers).rev() {
        let lw = &w.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut g.layers[l];

        let mut back = |site: Site,
                        input: &Matrix,
                        weight: &Matrix,
                        dy: &Matrix,
                        dw: &mut Matrix|
         -> Matrix {
            let id = MatrixId::new(l, site);
            let lora_args = match (lora, lc.lora.get(&site)) {
                (Some(ad), Some(path)) => {
                    let entry = &ad.entries[&id];
                    let grad = lora_grads.get_mut(&id).expect("grad slot");
                    Some((entry, ad.scale(), path, grad))
                }
                _ => None,
            };
            linear_backward(input, weight, dy, dw, lora_args)
        };

        // MLP branch.
        let dhact = back(Site::MlpOut, &lc.hact, &lw.w_out, &dx, &mut gl.w_out);
        let dhpre = Matrix::from_vec(
            dhact.rows(),
            dhact.cols(),
            dhact
                .data()
                .iter()
                .zip(lc.hpre.data())
                .map(|(dv, &x)| dv * gelu_grad(x))
                .collect(),
        )
        .expect("shape");
        let dc = back(Site::MlpIn, &lc.c, &lw.w_in, &dhpre, &mut gl.w_in);
        let dx_mid_ln = layer_norm_backward(
            &dc,
            &lc.ln2,
            &lw.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        let mut dx_mid = dx;
        dx_mid.add_scaled(&dx_mid_ln, 1.0).expect("shape");

        // Attention branch.
        let dattn = back(Site::OProj, &lc.attn, &lw.wo, &dx_mid, &mut gl.wo);
        let (dq, dk, dv) = attention_backward(cfg, lc, &dattn);
        let mut da = back(Site::QProj, &lc.a, &lw.wq, &dq, &mut gl.wq);
        da.add_scaled(&back(Site::KProj, &lc.a, &lw.wk, &dk, &mut gl.wk), 1.0)
            .expect("shape");
        da.add_scaled(&back(Site::VProj, &lc.a, &lw.wv, &dv, &mut gl.wv), 1.0)
            .expect("shape");
        let dx_in_ln = layer_norm_backward(
            &da,
            &lc.ln1,
            &lw.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        let mut dx_in = dx_mid;
        dx_in.add_scaled(&dx_in_ln, 1.0).expect("shape");
        dx = dx_in;
        let _ = &lc.x_in;
        let _ = &lc.x_mid;
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        let src = dx.row(t);
        for (o, s) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
            *o += s;
        }
        for (o, s) in g.pos_emb.row_mut(t).iter_mut().zip(src) {
            *o += s;
        }
    }

    Gradients {
        weights: g,
        lora: lora_grads,
    }
}

fn attention_backward(cfg: &ModelConfig, lc: &LayerCache, dattn: &Matrix) -> (Matrix, Matrix, Matrix) {
    let t_len = dattn.rows();
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(t_len, cfg.d_model);
    let mut dk = Matrix::zeros(t_len, cfg.d_model);
    let mut dv = Matrix::zeros(t_len, cfg.d_model);
    let mut dp = vec![0.0; t_len];
    for h in 0..cfg.n_heads {
        let off = h * dh;
        let p = &lc.probs[h];
        for i in 0..t_len {
            let doi = &dattn.row(i)[off..off + dh];
            for j in 0..=i {
                let vj = &lc.v.row(j)[off..off + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let pij = p.get(i, j);
                let dvj = &mut dv.row_mut(j)[off..off + dh];
                for (o, &g) in dvj.iter_mut().zip(doi) {
                    *o += pij * g;
                }
            }
            let s: f64 = (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
            for j in 0..=i {
                let ds = p.get(i, j) * (dp[j] - s) * inv_sqrt;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = lc.k.row(j)[off..off + dh].to_vec();
                let qi: Vec<f64> = lc.q.row(i)[off..off + dh].to_vec();
                for (o, kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                    *o += ds * kv;
                }
                for (o, qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
