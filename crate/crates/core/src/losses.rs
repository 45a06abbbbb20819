//! Training objectives: cosine-based consistency and hinge similarity terms
//! on the disentangled representations, mean-L1 reconstruction/restoration
//! terms, the mean-squared code alignment term, and their weighted total.
//!
//! Norms use the mean-per-element convention so magnitudes are
//! resolution-independent and the published weight ratios stay meaningful at
//! any volume size. Sums over modality indices generalize to K >= 2: self
//! terms appear once per modality, cross terms once per ordered pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Element, Tensor, TensorError};

#[derive(Error, Debug)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("reconstruction table is {rows}x{cols}, expected {k}x{k}")]
    BadTable { rows: usize, cols: usize, k: usize },
}

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub lambda_ae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 1.0, lambda_a: 0.1, lambda_m: 1.0, lambda_ae: 1.0 }
    }
}

/// Hinge margins of the similarity losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Margins {
    pub alpha_a: f64,
    pub alpha_m: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { alpha_a: 0.2, alpha_m: 0.5 }
    }
}

fn sum_terms<E: Element>(terms: Vec<Tensor<E>>) -> Result<Tensor<E>, LossError> {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    let mut acc = first;
    for t in it {
        acc = acc.add(&t)?;
    }
    Ok(acc)
}

/// Squared distance of a cosine from perfect alignment: `(cos(a,b) - 1)^2`.
fn cosine_gap_sq<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, LossError> {
    let c = a.cosine_similarity(b)?.add_scalar(-E::ONE);
    Ok(c.mul(&c)?)
}

/// Anatomy consistency over one subject's K maps: sum over unordered
/// modality pairs of `(cos(A_i, A_j) - 1)^2`.
pub fn anatomy_consistency<E: Element>(maps: &[Tensor<E>]) -> Result<Tensor<E>, LossError> {
    if maps.len() < 2 {
        return Err(LossError::TooFew { what: "modalities", need: 2, got: maps.len() });
    }
    let mut terms = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            terms.push(cosine_gap_sq(&maps[i], &maps[j])?);
        }
    }
    sum_terms(terms)
}

/// Modality consistency: for each modality, sum over unordered subject pairs
/// of `(cos(M_i^p, M_i^q) - 1)^2`. `vectors[i]` lists modality i across subjects.
pub fn modality_consistency<E: Element>(
    vectors: &[Vec<Tensor<E>>],
) -> Result<Tensor<E>, LossError> {
    let mut terms = Vec::new();
    for per_subject in vectors {
        if per_subject.len() < 2 {
            return Err(LossError::TooFew { what: "subjects", need: 2, got: per_subject.len() });
        }
        for p in 0..per_subject.len() {
            for q in p + 1..per_subject.len() {
                terms.push(cosine_gap_sq(&per_subject[p], &per_subject[q])?);
            }
        }
    }
    if terms.is_empty() {
        return Err(LossError::TooFew { what: "modalities", need: 1, got: 0 });
    }
    sum_terms(terms)
}

/// Anatomy similarity hinge: paired same-subject maps must beat same-modality
/// cross-subject maps by the margin. Sum over ordered modality pairs (i, j),
/// i != j, of `max(0, cos(A_i^p, A_i^q) - cos(A_i^p, A_j^p) + alpha)`.
pub fn anatomy_similarity<E: Element>(
    subject_p: &[Tensor<E>],
    subject_q: &[Tensor<E>],
    alpha: f64,
) -> Result<Tensor<E>, LossError> {
    hinge_pairs(subject_p, subject_q, alpha, |i, j, p, q| {
        let neg = p[i].cosine_similarity(&q[i])?; // same modality, other subject
        let pos = p[i].cosine_similarity(&p[j])?; // paired, same subject
        Ok((neg, pos))
    })
}

/// Modality similarity hinge, mirrored: same-modality cross-subject vectors
/// must beat paired same-subject vectors. Sum over ordered (i, j), i != j, of
/// `max(0, cos(M_i^p, M_j^p) - cos(M_i^p, M_i^q) + alpha)`.
pub fn modality_similarity<E: Element>(
    subject_p: &[Tensor<E>],
    subject_q: &[Tensor<E>],
    alpha: f64,
) -> Result<Tensor<E>, LossError> {
    hinge_pairs(subject_p, subject_q, alpha, |i, j, p, q| {
        let neg = p[i].cosine_similarity(&p[j])?; // cross modality, same subject
        let pos = p[i].cosine_similarity(&q[i])?; // same modality, other subject
        Ok((neg, pos))
    })
}

type PairCos<E> = Result<(Tensor<E>, Tensor<E>), LossError>;

fn hinge_pairs<E: Element>(
    subject_p: &[Tensor<E>],
    subject_q: &[Tensor<E>],
    alpha: f64,
    cos_pair: impl Fn(usize, usize, &[Tensor<E>], &[Tensor<E>]) -> PairCos<E>,
) -> Result<Tensor<E>, LossError> {
    let k = subject_p.len();
    if k < 2 || subject_q.len() != k {
        return Err(LossError::TooFew { what: "modalities", need: 2, got: k.min(subject_q.len()) });
    }
    let a = E::from_f64(alpha);
    let mut terms = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (neg, pos) = cos_pair(i, j, subject_p, subject_q)?;
            terms.push(neg.sub(&pos)?.add_scalar(a).relu());
        }
    }
    sum_terms(terms)
}

/// Mean-per-voxel L1 between two equally shaped tensors.
fn mean_l1<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, LossError> {
    Ok(a.sub(b)?.abs().mean_all())
}

/// Synthesis loss over a K x K table where `outputs[i][j]` was built from
/// modality-i anatomy and modality-j appearance: every output is compared
/// against `x_i` (self terms once, cross terms once per ordered pair).
/// Serves both the reconstruction path and the edge-restoration path.
pub fn synthesis_loss<E: Element>(
    inputs: &[Tensor<E>],
    outputs: &[Vec<Tensor<E>>],
) -> Result<Tensor<E>, LossError> {
    let k = inputs.len();
    if k < 2 {
        return Err(LossError::TooFew { what: "modalities", need: 2, got: k });
    }
    if outputs.len() != k || outputs.iter().any(|row| row.len() != k) {
        return Err(LossError::BadTable {
            rows: outputs.len(),
            cols: outputs.first().map_or(0, |r| r.len()),
            k,
        });
    }
    let mut terms = Vec::new();
    for i in 0..k {
        terms.push(mean_l1(&outputs[i][i], &inputs[i])?);
        for j in 0..k {
            if i != j {
                terms.push(mean_l1(&outputs[i][j], &inputs[i])?);
            }
        }
    }
    sum_terms(terms)
}

/// Mean squared difference between restored and directly encoded codes.
pub fn code_consistency<E: Element>(
    restored: &Tensor<E>,
    encoded: &Tensor<E>,
) -> Result<Tensor<E>, LossError> {
    if restored.shape() != encoded.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch(format!(
            "code shapes {:?} vs {:?}",
            restored.shape(),
            encoded.shape()
        ))));
    }
    let d = restored.sub(encoded)?;
    Ok(d.mul(&d)?.mean_all())
}

/// The seven scalar parts of the total objective.
pub struct LossParts<E: Element> {
    pub reconstruction: Tensor<E>,
    pub restoration: Tensor<E>,
    pub anatomy_consistency: Tensor<E>,
    pub anatomy_similarity: Tensor<E>,
    pub modality_consistency: Tensor<E>,
    pub modality_similarity: Tensor<E>,
    pub code_consistency: Tensor<E>,
}

impl<E: Element> LossParts<E> {
    /// Weighted total:
    /// `l_rec*(recon + rest) + l_a*(con_A + sim_A) + l_m*(con_M + sim_M) + l_ae*con_AE`.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor<E>, LossError> {
        let rec = self
            .reconstruction
            .add(&self.restoration)?
            .scale(E::from_f64(w.lambda_rec));
        let ana = self
            .anatomy_consistency
            .add(&self.anatomy_similarity)?
            .scale(E::from_f64(w.lambda_a));
        let md = self
            .modality_consistency
            .add(&self.modality_similarity)?
            .scale(E::from_f64(w.lambda_m));
        let ae = self.code_consistency.scale(E::from_f64(w.lambda_ae));
        Ok(rec.add(&ana)?.add(&md)?.add(&ae)?)
    }
}
