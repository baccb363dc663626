//! Subjective-logic opinions over Dirichlet evidence and Dempster-rule fusion.
//!
//! The plain-value functions here are the reference algebra; the `*_on_tape`
//! variants record the same arithmetic on a [`Tape`] so training can
//! differentiate through fusion. The two routes are tested against each
//! other.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Conflict masses at or above `1 - CONFLICT_EPS` count as total conflict.
pub const CONFLICT_EPS: f64 = 1e-12;

/// A Dirichlet-based opinion for one view (or a fused result).
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletOpinion<R: Scalar> {
    pub evidence: Vec<R>,
    pub alpha: Vec<R>,
    pub strength: R,
    pub belief: Vec<R>,
    pub uncertainty: R,
    pub probs: Vec<R>,
}

impl<R: Scalar> DirichletOpinion<R> {
    pub fn num_classes(&self) -> usize {
        self.belief.len()
    }

    /// The identity element of Dempster fusion: zero belief, uncertainty 1.
    pub fn vacuous(num_classes: usize) -> Self {
        opinion_from_evidence(&vec![R::zero(); num_classes]).expect("vacuous opinion")
    }

    /// Predicted class: argmax of the Dirichlet-mean probabilities.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

/// Build an opinion from non-negative evidence: alpha = e + 1, S = sum(alpha),
/// b = e/S, u = K/S, p = alpha/S.
pub fn opinion_from_evidence<R: Scalar>(evidence: &[R]) -> Result<DirichletOpinion<R>> {
    let k = evidence.len();
    if k < 2 {
        return Err(Error::contract(format!(
            "opinion needs at least 2 classes, got {k}"
        )));
    }
    if let Some(bad) = evidence.iter().find(|e| **e < R::zero() || !e.is_finite()) {
        return Err(Error::domain(format!(
            "evidence must be non-negative and finite, got {bad}"
        )));
    }
    let alpha: Vec<R> = evidence.iter().map(|&e| e + R::one()).collect();
    let strength = alpha.iter().fold(R::zero(), |acc, &a| acc + a);
    let belief: Vec<R> = evidence.iter().map(|&e| e / strength).collect();
    let uncertainty = R::c(k as f64) / strength;
    let probs: Vec<R> = alpha.iter().map(|&a| a / strength).collect();
    Ok(DirichletOpinion {
        evidence: evidence.to_vec(),
        alpha,
        strength,
        belief,
        uncertainty,
        probs,
    })
}

/// Rebuild a full opinion from belief masses and uncertainty via S = K/u.
pub fn opinion_from_belief<R: Scalar>(belief: &[R], uncertainty: R) -> Result<DirichletOpinion<R>> {
    if !(uncertainty > R::zero()) {
        return Err(Error::domain(format!(
            "uncertainty must be positive to re-materialize strength, got {uncertainty}"
        )));
    }
    let k = belief.len();
    let strength = R::c(k as f64) / uncertainty;
    let evidence: Vec<R> = belief.iter().map(|&b| b * strength).collect();
    let alpha: Vec<R> = evidence.iter().map(|&e| e + R::one()).collect();
    let probs: Vec<R> = alpha.iter().map(|&a| a / strength).collect();
    Ok(DirichletOpinion {
        evidence,
        alpha,
        strength,
        belief: belief.to_vec(),
        uncertainty,
        probs,
    })
}

/// Pairwise conflict mass M = sum_{i != j} b_i^1 b_j^2.
fn conflict<R: Scalar>(b1: &[R], b2: &[R]) -> R {
    let s1 = b1.iter().fold(R::zero(), |acc, &v| acc + v);
    let s2 = b2.iter().fold(R::zero(), |acc, &v| acc + v);
    let dot = b1
        .iter()
        .zip(b2)
        .fold(R::zero(), |acc, (&x, &y)| acc + x * y);
    s1 * s2 - dot
}

/// Dempster-rule combination of two opinions over the same K classes.
pub fn dempster_fuse<R: Scalar>(
    o1: &DirichletOpinion<R>,
    o2: &DirichletOpinion<R>,
) -> Result<DirichletOpinion<R>> {
    let k = o1.num_classes();
    if k != o2.num_classes() {
        return Err(Error::contract(format!(
            "fusing opinions over {k} vs {} classes",
            o2.num_classes()
        )));
    }
    let m = conflict(&o1.belief, &o2.belief);
    let denom = R::one() - m;
    if denom <= R::c(CONFLICT_EPS) {
        return Err(Error::TotalConflict {
            pair_index: 0,
            conflict: m.to_f64_lossy(),
        });
    }
    let belief: Vec<R> = (0..k)
        .map(|i| {
            (o1.belief[i] * o2.belief[i]
                + o2.belief[i] * o1.uncertainty
                + o1.belief[i] * o2.uncertainty)
                / denom
        })
        .collect();
    let uncertainty = o1.uncertainty * o2.uncertainty / denom;
    opinion_from_belief(&belief, uncertainty)
}

/// Left fold of [`dempster_fuse`] in view order; a single opinion is returned
/// unchanged. Conflict errors are annotated with the failing pair index.
pub fn fuse_all<R: Scalar>(opinions: &[DirichletOpinion<R>]) -> Result<DirichletOpinion<R>> {
    let mut it = opinions.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::contract("fuse_all needs at least one opinion"))?;
    let mut acc = first.clone();
    for (i, o) in it.enumerate() {
        acc = dempster_fuse(&acc, o).map_err(|e| match e {
            Error::TotalConflict { conflict, .. } => Error::TotalConflict {
                pair_index: i + 1,
                conflict,
            },
            other => other,
        })?;
    }
    Ok(acc)
}

/// Batched opinion nodes on a tape: belief and uncertainty per instance row.
#[derive(Debug, Clone, Copy)]
pub struct OpinionNodes {
    /// `N x K` belief masses.
    pub belief: NodeId,
    /// `N`-vector of uncertainties.
    pub uncertainty: NodeId,
}

/// Derive batched (belief, uncertainty) nodes from an `N x K` evidence node.
pub fn opinion_nodes_from_evidence<R: Scalar>(tape: &mut Tape<R>, evidence: NodeId) -> OpinionNodes {
    let (n, k) = {
        let t = tape.value(evidence);
        (t.rows(), t.cols())
    };
    let alpha = tape.add_scalar(evidence, R::one());
    let strength = tape.sum_rows(alpha);
    let belief = tape.div_cols(evidence, strength);
    let k_vec = tape.constant(Tensor::vector(vec![R::c(k as f64); n]));
    let uncertainty = tape.div(k_vec, strength);
    OpinionNodes {
        belief,
        uncertainty,
    }
}

/// Dirichlet-mean probabilities `alpha / S` for an `N x K` evidence node.
pub fn probs_from_evidence<R: Scalar>(tape: &mut Tape<R>, evidence: NodeId) -> NodeId {
    let alpha = tape.add_scalar(evidence, R::one());
    let strength = tape.sum_rows(alpha);
    tape.div_cols(alpha, strength)
}

/// Dempster fusion of batched per-view evidence nodes on the tape.
///
/// Returns the fused Dirichlet parameters (`N x K`) re-materialized via
/// S = K/u and e = b * S, plus the fused opinion nodes. Errors with the
/// failing pair index if any instance reaches total conflict.
pub fn fuse_evidence_on_tape<R: Scalar>(
    tape: &mut Tape<R>,
    per_view_evidence: &[NodeId],
) -> Result<(NodeId, OpinionNodes)> {
    if per_view_evidence.is_empty() {
        return Err(Error::contract("fusion needs at least one view"));
    }
    let (n, k) = {
        let t = tape.value(per_view_evidence[0]);
        (t.rows(), t.cols())
    };
    let mut acc = opinion_nodes_from_evidence(tape, per_view_evidence[0]);
    for (i, &ev) in per_view_evidence.iter().enumerate().skip(1) {
        let rhs = opinion_nodes_from_evidence(tape, ev);
        acc = fuse_pair_on_tape(tape, acc, rhs, i)?;
    }
    let k_vec = tape.constant(Tensor::vector(vec![R::c(k as f64); n]));
    let strength = tape.div(k_vec, acc.uncertainty);
    let evidence = tape.mul_cols(acc.belief, strength);
    let alpha = tape.add_scalar(evidence, R::one());
    Ok((alpha, acc))
}

fn fuse_pair_on_tape<R: Scalar>(
    tape: &mut Tape<R>,
    o1: OpinionNodes,
    o2: OpinionNodes,
    pair_index: usize,
) -> Result<OpinionNodes> {
    // M = (sum_i b1_i)(sum_j b2_j) - sum_k b1_k b2_k
    let prod = tape.mul(o1.belief, o2.belief);
    let s1 = tape.sum_rows(o1.belief);
    let s2 = tape.sum_rows(o2.belief);
    let s1s2 = tape.mul(s1, s2);
    let dot = tape.sum_rows(prod);
    let m = tape.sub(s1s2, dot);
    let neg_m = tape.scale(m, -R::one());
    let denom = tape.add_scalar(neg_m, R::one());
    if let Some(&worst) = tape
        .value(denom)
        .values()
        .iter()
        .find(|d| **d <= R::c(CONFLICT_EPS))
    {
        return Err(Error::TotalConflict {
            pair_index,
            conflict: (R::one() - worst).to_f64_lossy(),
        });
    }
    let c1 = tape.mul_cols(o1.belief, o2.uncertainty);
    let c2 = tape.mul_cols(o2.belief, o1.uncertainty);
    let t1 = tape.add(prod, c1);
    let numer = tape.add(t1, c2);
    let belief = tape.div_cols(numer, denom);
    let uu = tape.mul(o1.uncertainty, o2.uncertainty);
    let uncertainty = tape.div(uu, denom);
    Ok(OpinionNodes {
        belief,
        uncertainty,
    })
}
