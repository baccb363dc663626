//! Evidence-guided feature disentanglement: soft masks from pretrained
//! evidence, clean/adversarial splits, recalibration of weak adversarial
//! features, and view-level evidential attention.

use crate::error::{Error, Result};
use crate::losses::validate_one_hot;
use crate::networks::{evidence_forward, mapping_forward, recalibrate_forward, ComponentNodes};
use crate::rng::{self, DetRng};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gumbel noise pair consumed by one mask construction.
#[derive(Debug, Clone)]
pub struct MaskNoise<R: Scalar> {
    pub q1: Tensor<R>,
    pub q2: Tensor<R>,
}

impl<R: Scalar> MaskNoise<R> {
    /// Fresh standard-Gumbel noise for an `n x d` mask.
    pub fn sample(rng: &mut DetRng, n: usize, d: usize) -> Self {
        MaskNoise {
            q1: Tensor::new(vec![n, d], rng::gumbel_vec(rng, n * d)).unwrap(),
            q2: Tensor::new(vec![n, d], rng::gumbel_vec(rng, n * d)).unwrap(),
        }
    }

    /// Evaluation-time noise: both draws fixed to zero.
    pub fn zeros(n: usize, d: usize) -> Self {
        MaskNoise {
            q1: Tensor::zeros(&[n, d]),
            q2: Tensor::zeros(&[n, d]),
        }
    }
}

/// Mask construction artifacts for one view.
#[derive(Debug, Clone)]
pub struct MaskBundle<R: Scalar> {
    /// Class-level evidence of the (possibly attacked) input, `N x K`.
    pub evidence_map: NodeId,
    /// Feature-level robustness map, `N x d`.
    pub robustness_map: NodeId,
    /// Soft mask, entries strictly inside (0, 1), `N x d`.
    pub mask: NodeId,
    pub temperature: R,
    pub noise: MaskNoise<R>,
}

/// Largest mask logit magnitude that still keeps the sigmoid strictly inside
/// (0, 1) for the scalar type.
fn mask_logit_bound<R: Scalar>() -> R {
    let eps = R::epsilon().to_f64_lossy();
    R::c((-(eps / 2.0).ln()) * 0.98)
}

/// Build the soft robustness mask for one view.
///
/// The two-class Gumbel softmax over `(log sigmoid(rm) + q1, log(1 -
/// sigmoid(rm)) + q2)` collapses algebraically to `sigmoid((rm + q1 - q2) /
/// mu)`; the logit is clamped so every entry stays strictly inside (0, 1).
/// Noise is treated as a constant, so gradients flow only through the
/// robustness map.
pub fn build_mask<R: Scalar>(
    tape: &mut Tape<R>,
    extractor: &ComponentNodes,
    robustness_map: &ComponentNodes,
    x_input: NodeId,
    temperature: R,
    noise: MaskNoise<R>,
) -> Result<MaskBundle<R>> {
    if !(temperature > R::zero()) {
        return Err(Error::contract(format!(
            "Gumbel softmax temperature must be positive, got {temperature}"
        )));
    }
    let evidence_map = evidence_forward(tape, extractor, x_input);
    let rm = mapping_forward(tape, robustness_map, evidence_map);
    let q_diff = noise.q1.zip(&noise.q2, |a, b| a - b)?;
    if q_diff.shape() != tape.value(rm).shape() {
        return Err(Error::contract(format!(
            "noise shape {:?} does not match robustness map {:?}",
            q_diff.shape(),
            tape.value(rm).shape()
        )));
    }
    let q_node = tape.constant(q_diff);
    let shifted = tape.add(rm, q_node);
    let logit = tape.scale(shifted, temperature.recip());
    let bound = mask_logit_bound::<R>();
    let clamped = tape.clamp(logit, -bound, bound);
    let mask = tape.sigmoid(clamped);
    Ok(MaskBundle {
        evidence_map,
        robustness_map: rm,
        mask,
        temperature,
        noise,
    })
}

/// Split an input into clean and adversarial parts: `h_c = x * m`,
/// `h_a = x * (1 - m)`, so `h_c + h_a` reconstructs `x`.
pub fn split_features<R: Scalar>(
    tape: &mut Tape<R>,
    x_input: NodeId,
    mask: NodeId,
) -> (NodeId, NodeId) {
    let h_c = tape.mul(x_input, mask);
    let neg = tape.scale(mask, -R::one());
    let inverse = tape.add_scalar(neg, R::one());
    let h_a = tape.mul(x_input, inverse);
    (h_c, h_a)
}

/// Rectify weak adversarial features through the recalibration layers.
pub fn recalibrate<R: Scalar>(
    tape: &mut Tape<R>,
    recalibration: &ComponentNodes,
    h_adversarial: NodeId,
) -> NodeId {
    recalibrate_forward(tape, recalibration, h_adversarial)
}

/// View-level evidential attention: softmax the pretrained extractor's
/// evidence for `h_f`, map class scores to feature scores, squash to (0, 1).
pub fn evidential_attention<R: Scalar>(
    tape: &mut Tape<R>,
    extractor: &ComponentNodes,
    attention_map: &ComponentNodes,
    h_final: NodeId,
) -> NodeId {
    let evidence = evidence_forward(tape, extractor, h_final);
    let scores = tape.softmax_rows(evidence);
    let mapped = mapping_forward(tape, attention_map, scores);
    tape.sigmoid(mapped)
}

fn validate_positive_probs<R: Scalar>(tape: &Tape<R>, nodes: &[NodeId], what: &str) -> Result<()> {
    for (v, &p) in nodes.iter().enumerate() {
        if let Some(&bad) = tape.value(p).values().iter().find(|x| !(**x > R::zero())) {
            return Err(Error::domain(format!(
                "{what}: view {v} has non-positive probability {bad}"
            )));
        }
    }
    Ok(())
}

/// Disentanglement loss: clean probabilities should follow the true label,
/// adversarial probabilities the sampled wrong label. Mean over instances.
pub fn disentanglement_loss<R: Scalar>(
    tape: &mut Tape<R>,
    probs_clean: &[NodeId],
    probs_adversarial: &[NodeId],
    y: NodeId,
    y_wrong: NodeId,
) -> Result<NodeId> {
    if probs_clean.len() != probs_adversarial.len() || probs_clean.is_empty() {
        return Err(Error::contract(
            "disentanglement loss needs matching non-empty view lists",
        ));
    }
    validate_one_hot(tape.value(y), "disentanglement_loss labels")?;
    validate_one_hot(tape.value(y_wrong), "disentanglement_loss wrong labels")?;
    {
        let yv = tape.value(y);
        let wv = tape.value(y_wrong);
        let (n, k) = (yv.rows(), yv.cols());
        for i in 0..n {
            let same = (0..k).all(|j| yv.values()[i * k + j] == wv.values()[i * k + j]);
            if same {
                return Err(Error::contract(format!(
                    "wrong label equals the true label at row {i}"
                )));
            }
        }
    }
    validate_positive_probs(tape, probs_clean, "disentanglement_loss clean")?;
    validate_positive_probs(tape, probs_adversarial, "disentanglement_loss adversarial")?;

    let mut acc: Option<NodeId> = None;
    for (&pc, &pa) in probs_clean.iter().zip(probs_adversarial) {
        let ln_pc = tape.ln(pc);
        let picked_c = tape.mul(y, ln_pc);
        let sum_c = tape.sum_rows(picked_c);
        let ln_pa = tape.ln(pa);
        let picked_a = tape.mul(y_wrong, ln_pa);
        let sum_a = tape.sum_rows(picked_a);
        let both = tape.add(sum_c, sum_a);
        acc = Some(match acc {
            None => both,
            Some(prev) => tape.add(prev, both),
        });
    }
    let total = acc.expect("non-empty views");
    let negated = tape.scale(total, -R::one());
    Ok(tape.mean(negated))
}

/// Recalibration loss: recalibrated probabilities should follow the true
/// label. Mean over instances.
pub fn recalibration_loss<R: Scalar>(
    tape: &mut Tape<R>,
    probs_recalibrated: &[NodeId],
    y: NodeId,
) -> Result<NodeId> {
    if probs_recalibrated.is_empty() {
        return Err(Error::contract("recalibration loss needs at least one view"));
    }
    validate_one_hot(tape.value(y), "recalibration_loss labels")?;
    validate_positive_probs(tape, probs_recalibrated, "recalibration_loss")?;

    let mut acc: Option<NodeId> = None;
    for &p in probs_recalibrated {
        let ln_p = tape.ln(p);
        let picked = tape.mul(y, ln_p);
        let sum = tape.sum_rows(picked);
        acc = Some(match acc {
            None => sum,
            Some(prev) => tape.add(prev, sum),
        });
    }
    let total = acc.expect("non-empty views");
    let negated = tape.scale(total, -R::one());
    Ok(tape.mean(negated))
}

/// Sample one wrong class per row, uniform over the K-1 non-true classes.
pub fn sample_wrong_labels<R: Scalar>(rng: &mut DetRng, y: &Tensor<R>) -> Tensor<R> {
    use rand::Rng;
    let (n, k) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let true_class = y.row(i).iter().position(|v| *v == R::one()).unwrap_or(0);
        let draw = rng.gen_range(0..k - 1);
        let wrong = if draw >= true_class { draw + 1 } else { draw };
        out.values_mut()[i * k + wrong] = R::one();
    }
    out
}
