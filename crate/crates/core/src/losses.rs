//! Evidential loss family, recorded on the tape.
//!
//! All losses take batched `N x K` nodes and reduce to the batch mean, so a
//! single-row input reproduces the per-instance values exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Check that every row of `t` is a valid one-hot vector.
pub fn validate_one_hot<R: Scalar>(t: &Tensor<R>, what: &str) -> Result<()> {
    let (rows, cols) = (t.rows(), t.cols());
    for i in 0..rows {
        let row = &t.values()[i * cols..(i + 1) * cols];
        let mut ones = 0;
        for &v in row {
            if v == R::one() {
                ones += 1;
            } else if v != R::zero() {
                return Err(Error::contract(format!(
                    "{what}: row {i} is not one-hot (entry {v})"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::contract(format!(
                "{what}: row {i} has {ones} ones, expected exactly 1"
            )));
        }
    }
    Ok(())
}

fn validate_alpha<R: Scalar>(t: &Tensor<R>, what: &str) -> Result<()> {
    let floor = R::one() - R::c(1e-12);
    if let Some(&bad) = t.values().iter().find(|a| **a < floor) {
        return Err(Error::domain(format!(
            "{what}: Dirichlet parameters must be >= 1, got {bad}"
        )));
    }
    Ok(())
}

/// Column-broadcast of an `m`-vector node across `n` columns.
fn broadcast_cols<R: Scalar>(tape: &mut Tape<R>, v: NodeId, n: usize) -> NodeId {
    let m = tape.value(v).numel();
    let ones = tape.constant(Tensor::ones(&[m, n]));
    tape.mul_cols(ones, v)
}

/// Evidential cross-entropy: mean over rows of sum_k y_k (psi(S) - psi(alpha_k)).
pub fn evidential_ce_loss<R: Scalar>(
    tape: &mut Tape<R>,
    alpha: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    let (n, k) = {
        let a = tape.value(alpha);
        (a.rows(), a.cols())
    };
    if tape.value(y).rows() != n || tape.value(y).cols() != k {
        return Err(Error::contract("labels and alpha must share shape"));
    }
    validate_one_hot(tape.value(y), "evidential_ce_loss labels")?;

    let strength = tape.sum_rows(alpha);
    let psi_s = tape.digamma(strength);
    let psi_alpha = tape.digamma(alpha);
    let picked = tape.mul(y, psi_alpha);
    let picked_sum = tape.sum_rows(picked);
    let per_row = tape.sub(psi_s, picked_sum);
    Ok(tape.mean(per_row))
}

/// KL divergence from Dir(alpha_tilde) to the uniform Dirichlet, closed form,
/// mean over rows.
pub fn dirichlet_kl_to_uniform<R: Scalar>(tape: &mut Tape<R>, alpha_tilde: NodeId) -> Result<NodeId> {
    let (n, k) = {
        let a = tape.value(alpha_tilde);
        (a.rows(), a.cols())
    };
    validate_alpha(tape.value(alpha_tilde), "dirichlet_kl_to_uniform")?;

    let strength = tape.sum_rows(alpha_tilde);
    let lg_s = tape.log_gamma(strength);
    let lg_a = tape.log_gamma(alpha_tilde);
    let lg_a_sum = tape.sum_rows(lg_a);
    let ln_gamma_k = crate::special::log_gamma(R::c(k as f64))?;

    let psi_a = tape.digamma(alpha_tilde);
    let psi_s = tape.digamma(strength);
    let psi_s_mat = broadcast_cols(tape, psi_s, k);
    let psi_diff = tape.sub(psi_a, psi_s_mat);
    let a_minus_1 = tape.add_scalar(alpha_tilde, -R::one());
    let weighted = tape.mul(a_minus_1, psi_diff);
    let weighted_sum = tape.sum_rows(weighted);

    let t1 = tape.sub(lg_s, lg_a_sum);
    let t2 = tape.add_scalar(t1, -ln_gamma_k);
    let per_row = tape.add(t2, weighted_sum);
    let _ = n;
    Ok(tape.mean(per_row))
}

/// Evidential classification loss: cross-entropy plus `lambda` times the KL
/// of the adapted parameters `alpha_tilde = y + (1 - y) * alpha`.
pub fn evidential_classification_loss<R: Scalar>(
    tape: &mut Tape<R>,
    alpha: NodeId,
    y: NodeId,
    lambda: R,
) -> Result<NodeId> {
    if lambda < R::zero() || lambda > R::one() {
        return Err(Error::contract(format!(
            "KL annealing coefficient must be in [0,1], got {lambda}"
        )));
    }
    let ce = evidential_ce_loss(tape, alpha, y)?;
    let y_t = tape.value(y).clone();
    let one_minus_y = tape.constant(y_t.map(|v| R::one() - v));
    let masked = tape.mul(one_minus_y, alpha);
    let alpha_tilde = tape.add(y, masked);
    let kl = dirichlet_kl_to_uniform(tape, alpha_tilde)?;
    let kl_scaled = tape.scale(kl, lambda);
    Ok(tape.add(ce, kl_scaled))
}

/// Adversarial consistency loss: ordered-pair total-variation distances among
/// per-view probability nodes, scaled by 1/(V-1), mean over instances.
pub fn adversarial_consistency_loss<R: Scalar>(
    tape: &mut Tape<R>,
    per_view_probs: &[NodeId],
) -> Result<NodeId> {
    let v = per_view_probs.len();
    if v < 2 {
        return Err(Error::contract(format!(
            "adversarial consistency loss needs at least 2 views, got {v}"
        )));
    }
    let tol = R::c(1e-6);
    for (i, &p) in per_view_probs.iter().enumerate() {
        let t = tape.value(p);
        let (rows, cols) = (t.rows(), t.cols());
        for r in 0..rows {
            let s = t.values()[r * cols..(r + 1) * cols]
                .iter()
                .fold(R::zero(), |acc, &x| acc + x);
            if (s - R::one()).abs() > tol {
                return Err(Error::contract(format!(
                    "view {i} row {r} probabilities sum to {s}, expected 1"
                )));
            }
        }
    }

    // each unordered pair appears twice in the ordered double sum
    let mut acc: Option<NodeId> = None;
    for v1 in 0..v {
        for v2 in (v1 + 1)..v {
            let diff = tape.sub(per_view_probs[v1], per_view_probs[v2]);
            let ad = tape.abs(diff);
            let tv2 = tape.sum_rows(ad);
            acc = Some(match acc {
                None => tv2,
                Some(prev) => tape.add(prev, tv2),
            });
        }
    }
    let total = acc.expect("at least one pair");
    let scaled = tape.scale(total, R::c(1.0 / (v as f64 - 1.0)));
    Ok(tape.mean(scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_of(tape: &Tape<f64>, id: NodeId) -> f64 {
        tape.value(id).item().unwrap()
    }

    #[test]
    fn ce_loss_digamma_identities() {
        // psi(3) - psi(2) = 1/2 and psi(2) - psi(1) = 1
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_ce_loss(&mut tape, alpha, y).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.5, epsilon = 1e-9);

        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_ce_loss(&mut tape, alpha, y).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ce_loss_vanishes_for_perfect_evidence() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 3, vec![1e9, 1.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        let l = evidential_ce_loss(&mut tape, alpha, y).unwrap();
        assert!(scalar_of(&tape, l) < 1e-8);
    }

    #[test]
    fn ce_loss_rejects_non_one_hot() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        assert!(evidential_ce_loss(&mut tape, alpha, y).is_err());
    }

    #[test]
    fn kl_uniform_is_zero_and_worked_value() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let l = dirichlet_kl_to_uniform(&mut tape, a).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.0, epsilon = 1e-10);

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
        let l = dirichlet_kl_to_uniform(&mut tape, a).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.0, epsilon = 1e-10);

        // KL(Dir([2,1]) || Dir(1)) = ln 2 - 1/2
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
        let l = dirichlet_kl_to_uniform(&mut tape, a).unwrap();
        assert_abs_diff_eq!(
            scalar_of(&tape, l),
            std::f64::consts::LN_2 - 0.5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn kl_rejects_alpha_below_one() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![0.5, 1.0]).unwrap());
        assert!(dirichlet_kl_to_uniform(&mut tape, a).is_err());
    }

    #[test]
    fn classification_loss_adapted_parameters() {
        // alpha = [2,1], y = [1,0]: alpha_tilde = [1,1] so the KL term is 0
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_classification_loss(&mut tape, alpha, y, 1.0).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.5, epsilon = 1e-9);

        // alpha = [1,2], y = [1,0], lambda = 0: psi(3) - psi(1) = 3/2
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_classification_loss(&mut tape, alpha, y, 0.0).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 1.5, epsilon = 1e-9);

        // lambda = 1 adds the KL of alpha_tilde = [1,2]
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_classification_loss(&mut tape, alpha, y, 1.0).unwrap();
        assert_abs_diff_eq!(
            scalar_of(&tape, l),
            1.5 + (std::f64::consts::LN_2 - 0.5),
            epsilon = 1e-9
        );
    }

    #[test]
    fn classification_loss_rejects_bad_lambda() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(evidential_classification_loss(&mut tape, alpha, y, 1.5).is_err());
    }

    #[test]
    fn consistency_loss_values() {
        // identical views -> 0
        let mut tape = Tape::new();
        let p = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let p1 = tape.constant(p.clone());
        let p2 = tape.constant(p);
        let l = adversarial_consistency_loss(&mut tape, &[p1, p2]).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.0, epsilon = 1e-12);

        // opposite one-hot views, V = 2 -> 2.0 (ordered-pair double count)
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let p2 = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let l = adversarial_consistency_loss(&mut tape, &[p1, p2]).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn consistency_loss_three_views_equal_tv() {
        // all pairwise TV = t gives 3t
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 3, vec![0.5, 0.3, 0.2]).unwrap());
        let p2 = tape.constant(Tensor::matrix(1, 3, vec![0.3, 0.5, 0.2]).unwrap());
        let p3 = tape.constant(Tensor::matrix(1, 3, vec![0.3, 0.3, 0.4]).unwrap());
        // TV(p1,p2) = 0.2, TV(p1,p3) = 0.2, TV(p2,p3) = 0.2
        let l = adversarial_consistency_loss(&mut tape, &[p1, p2, p3]).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 3.0 * 0.2, epsilon = 1e-12);
    }

    #[test]
    fn consistency_loss_contracts() {
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(adversarial_consistency_loss(&mut tape, &[p1]).is_err());

        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 2, vec![0.9, 0.0]).unwrap());
        let p2 = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        assert!(adversarial_consistency_loss(&mut tape, &[p1, p2]).is_err());
    }

    #[test]
    fn consistency_loss_invariant_under_view_permutation() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 3, vec![0.6, 0.3, 0.1]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap());
        let c = tape.constant(Tensor::matrix(1, 3, vec![0.1, 0.1, 0.8]).unwrap());
        let l1 = adversarial_consistency_loss(&mut tape, &[a, b, c]).unwrap();
        let l2 = adversarial_consistency_loss(&mut tape, &[c, a, b]).unwrap();
        assert_abs_diff_eq!(
            scalar_of(&tape, l1),
            scalar_of(&tape, l2),
            epsilon = 1e-12
        );
    }
}
