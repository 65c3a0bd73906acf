//! Singular-value fine-tuning: expert vectors that rescale each singular
//! component of a weight matrix, `W′ = U · diag(σ ⊙ z) · Vᵀ`, plus linear
//! composition of experts and the shuffled-ordering control.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{scaled_product, Matrix, SeededRng, SvdFactors};

/// Weight-matrix sites inside one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    QProj,
    KProj,
    VProj,
    OProj,
    MlpIn,
    MlpOut,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::QProj,
        Site::KProj,
        Site::VProj,
        Site::OProj,
        Site::MlpIn,
        Site::MlpOut,
    ];
    pub const ATTENTION: [Site; 4] = [Site::QProj, Site::KProj, Site::VProj, Site::OProj];
    pub const MLP: [Site; 2] = [Site::MlpIn, Site::MlpOut];

    pub fn code(self) -> u8 {
        match self {
            Site::QProj => 0,
            Site::KProj => 1,
            Site::VProj => 2,
            Site::OProj => 3,
            Site::MlpIn => 4,
            Site::MlpOut => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Site> {
        Site::ALL.get(usize::from(code)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::QProj => "q_proj",
            Site::KProj => "k_proj",
            Site::VProj => "v_proj",
            Site::OProj => "o_proj",
            Site::MlpIn => "mlp_in",
            Site::MlpOut => "mlp_out",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Site::QProj | Site::KProj | Site::VProj | Site::OProj)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown site `{s}`")))
    }
}

/// One adaptable weight matrix: `(layer, site)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatrixId {
    pub layer: usize,
    pub site: Site,
}

impl MatrixId {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.site)
    }
}

/// Provenance recorded with every expert so transfer experiments stay auditable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertProvenance {
    pub source_model: String,
    pub training_task: String,
    pub config_hash: String,
}

/// A trained SVF parameter set: one scale vector `z` per adapted matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertVector {
    pub name: String,
    pub domain_tag: String,
    pub entries: BTreeMap<MatrixId, Vec<f64>>,
    pub provenance: ExpertProvenance,
}

impl ExpertVector {
    /// The identity expert: every `z` is all ones, so `W′ = W`.
    pub fn ones(name: &str, ranks: &BTreeMap<MatrixId, usize>) -> Self {
        Self::filled(name, ranks, 1.0)
    }

    pub fn filled(name: &str, ranks: &BTreeMap<MatrixId, usize>, value: f64) -> Self {
        Self {
            name: name.to_string(),
            domain_tag: String::new(),
            entries: ranks.iter().map(|(&id, &r)| (id, vec![value; r])).collect(),
            provenance: ExpertProvenance::default(),
        }
    }

    pub fn with_domain_tag(mut self, tag: &str) -> Self {
        self.domain_tag = tag.to_string();
        self
    }

    pub fn ranks(&self) -> BTreeMap<MatrixId, usize> {
        self.entries.iter().map(|(&id, z)| (id, z.len())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().flatten().all(|v| v.is_finite())
    }

    /// Flattens all entries in key order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.values().flatten().copied().collect()
    }

    /// Overwrites entries from a flat slice laid out like [`ExpertVector::flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for {} expert parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for z in self.entries.values_mut() {
            let len = z.len();
            z.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

/// Interpolation coefficients over a library of K experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionWeights {
    pub alphas: Vec<f64>,
    pub normalized: bool,
}

impl CompositionWeights {
    pub fn new(alphas: Vec<f64>, normalized: bool) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Range("composition needs at least one weight".into()));
        }
        if alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::Range("non-finite composition weight".into()));
        }
        if normalized {
            let sum: f64 = alphas.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Range(format!(
                    "normalized weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { alphas, normalized })
    }

    /// Builds normalized weights by dividing by the sum.
    pub fn normalize(alphas: &[f64]) -> Result<Self> {
        let sum: f64 = alphas.iter().sum();
        if sum.abs() < 1e-12 {
            return Err(Error::Range("weights sum to zero".into()));
        }
        Self::new(alphas.iter().map(|a| a / sum).collect(), true)
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut alphas = vec![0.0; k];
        alphas[index] = 1.0;
        Self {
            alphas,
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// `U · diag(σ ⊙ z) · Vᵀ`
pub fn apply_expert(f: &SvdFactors, z: &[f64]) -> Result<Matrix> {
    if z.len() != f.rank() {
        return Err(Error::Shape(format!(
            "z has {} entries, matrix rank is {}",
            z.len(),
            f.rank()
        )));
    }
    let scaled: Vec<f64> = f.sigma.iter().zip(z).map(|(s, zi)| s * zi).collect();
    scaled_product(f, &scaled)
}

fn check_compatible(experts: &[ExpertVector]) -> Result<()> {
    let first = experts
        .first()
        .ok_or_else(|| Error::IncompatibleExperts("no experts given".into()))?;
    let ranks = first.ranks();
    for e in &experts[1..] {
        if e.ranks() != ranks {
            return Err(Error::IncompatibleExperts(format!(
                "`{}` and `{}` have different key sets or ranks",
                first.name, e.name
            )));
        }
    }
    Ok(())
}

/// `z′ = Σ_k α_k z_k` for every adapted matrix.
pub fn compose(experts: &[ExpertVector], w: &CompositionWeights) -> Result<ExpertVector> {
    check_compatible(experts)?;
    if w.alphas.len() != experts.len() {
        return Err(Error::IncompatibleExperts(format!(
            "{} weights for {} experts",
            w.alphas.len(),
            experts.len()
        )));
    }
    let layers = experts[0]
        .entries
        .keys()
        .map(|id| id.layer)
        .max()
        .map_or(0, |l| l + 1);
    compose_layerwise(experts, &vec![w.clone(); layers])
}

/// Like [`compose`] but with a separate weight vector for every layer.
pub fn compose_layerwise(
    experts: &[ExpertVector],
    per_layer: &[CompositionWeights],
) -> Result<ExpertVector> {
    check_compatible(experts)?;
    let first = &experts[0];
    let mut entries = BTreeMap::new();
    for (id, z0) in &first.entries {
        let w = per_layer.get(id.layer).ok_or_else(|| {
            Error::IncompatibleExperts(format!("no composition weights for layer {}", id.layer))
        })?;
        if w.alphas.len() != experts.len() {
            return Err(Error::IncompatibleExperts(format!(
                "{} weights for {} experts",
                w.alphas.len(),
                experts.len()
            )));
        }
        let mut acc = vec![0.0; z0.len()];
        for (expert, &alpha) in experts.iter().zip(&w.alphas) {
            for (a, z) in acc.iter_mut().zip(&expert.entries[id]) {
                *a += alpha * z;
            }
        }
        entries.insert(*id, acc);
    }
    let names: Vec<&str> = experts.iter().map(|e| e.name.as_str()).collect();
    Ok(ExpertVector {
        name: format!("compose({})", names.join(",")),
        domain_tag: "composite".to_string(),
        entries,
        provenance: ExpertProvenance {
            source_model: first.provenance.source_model.clone(),
            training_task: names.join("+"),
            config_hash: first.provenance.config_hash.clone(),
        },
    })
}

/// Independently permutes every per-matrix `z`, destroying its alignment with
/// the singular-value ordering while keeping the multiset of values.
pub fn shuffle_expert(e: &ExpertVector, seed: u64) -> ExpertVector {
    let entries = e
        .entries
        .iter()
        .map(|(id, z)| {
            let mut rng = SeededRng::new(
                seed,
                "shuffle-expert",
                &[id.layer as u64, u64::from(id.site.code())],
            );
            let mut z = z.clone();
            rng.shuffle(&mut z);
            (*id, z)
        })
        .collect();
    ExpertVector {
        name: format!("{}-shuffled{seed}", e.name),
        domain_tag: e.domain_tag.clone(),
        entries,
        provenance: e.provenance.clone(),
    }
}
