//! Random-view projected gradient descent.
//!
//! For each instance a uniformly random subset of views is perturbed by
//! iterated signed-gradient steps, projected onto the infinity-ball of radius
//! epsilon and clipped to the [0,1] feature domain. Unselected views are
//! returned bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which loss the adversary ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Per-view evidential classification loss of the (pre)trained extractor.
    PretrainedExtractor,
    /// Loss of the fused opinion through the complete inference pipeline.
    FullModel,
}

/// PGD configuration; `step_size` defaults to `epsilon / 4`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub views_to_attack: usize,
    pub loss_target: LossTarget,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            views_to_attack: 1,
            loss_target: LossTarget::PretrainedExtractor,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::contract(format!(
                "attack epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::contract("attack needs at least one step"));
        }
        if let Some(s) = self.step_size {
            if s <= 0.0 {
                return Err(Error::contract(format!(
                    "attack step size must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Same attack with a different seed (per-epoch derivation).
    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig {
            seed,
            ..self.clone()
        }
    }
}

/// A differentiable objective the adversary ascends. Implementations record
/// the scalar loss on the tape given per-view input nodes.
pub trait AttackTarget<R: Scalar> {
    fn loss(&self, tape: &mut Tape<R>, views: &[NodeId], labels: &Tensor<R>) -> Result<NodeId>;
}

impl<R: Scalar, F> AttackTarget<R> for F
where
    F: Fn(&mut Tape<R>, &[NodeId], &Tensor<R>) -> Result<NodeId>,
{
    fn loss(&self, tape: &mut Tape<R>, views: &[NodeId], labels: &Tensor<R>) -> Result<NodeId> {
        self(tape, views, labels)
    }
}

fn sign<R: Scalar>(v: R) -> R {
    if v > R::zero() {
        R::one()
    } else if v < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

/// Run the random-view PGD attack. Returns the attacked views; labels are
/// never modified. Instance `n` has exactly `views_to_attack` perturbed views
/// chosen from its own seeded draw, every perturbation satisfies
/// `max-norm <= epsilon`, and attacked features stay within [0, 1].
pub fn pgd_attack_views<R: Scalar>(
    views: &[Tensor<R>],
    labels: &Tensor<R>,
    target: &dyn AttackTarget<R>,
    cfg: &AttackConfig,
) -> Result<Vec<Tensor<R>>> {
    cfg.validate()?;
    let num_views = views.len();
    if cfg.views_to_attack > num_views {
        return Err(Error::contract(format!(
            "cannot attack {} of {} views",
            cfg.views_to_attack, num_views
        )));
    }
    let n = labels.rows();
    let tol = R::c(1e-9);
    for (v, x) in views.iter().enumerate() {
        if x.rows() != n {
            return Err(Error::contract(format!(
                "view {v} has {} rows, labels have {n}",
                x.rows()
            )));
        }
        if let Some(&bad) = x
            .values()
            .iter()
            .find(|x| **x < -tol || **x > R::one() + tol)
        {
            return Err(Error::contract(format!(
                "view {v} contains {bad}, inputs must be normalized to [0,1]"
            )));
        }
    }

    if cfg.views_to_attack == 0 {
        return Ok(views.to_vec());
    }

    // Per-instance uniform view selection from the attack seed.
    let mut rng = rng::rng_from(cfg.seed);
    let mut selected = vec![vec![false; n]; num_views];
    for inst in 0..n {
        for v in rng::choose_subset(&mut rng, num_views, cfg.views_to_attack) {
            selected[v][inst] = true;
        }
    }

    let eps = R::c(cfg.epsilon);
    let step = R::c(cfg.effective_step_size());
    let mut attacked: Vec<Tensor<R>> = views.to_vec();

    for _ in 0..cfg.steps {
        let mut tape: Tape<R> = Tape::new();
        let nodes: Vec<NodeId> = attacked.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = target.loss(&mut tape, &nodes, labels)?;
        let grads = tape.backward(loss)?;
        for v in 0..num_views {
            let grad = match grads.get(nodes[v]) {
                Some(g) => g,
                None => continue,
            };
            let cols = views[v].cols();
            let orig = views[v].values();
            let gv = grad.values();
            let xv = attacked[v].values_mut();
            for inst in 0..n {
                if !selected[v][inst] {
                    continue;
                }
                for j in inst * cols..(inst + 1) * cols {
                    let moved = xv[j] + step * sign(gv[j]);
                    let delta = (moved - orig[j]).max(-eps).min(eps);
                    xv[j] = (orig[j] + delta).max(R::zero()).min(R::one());
                }
            }
        }
    }
    Ok(attacked)
}
