//! The two-stage experiment pipeline: perturbation-insensitive pretraining,
//! disentangled training, evaluation under random-view attacks, and the
//! ablation harness. Everything is seeded; a (seed, config) pair fully
//! determines every reported number.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{pgd_attack_views, AttackConfig, AttackTarget, LossTarget};
use crate::data::{split_indices, MultiViewBatch, Normalizer};
use crate::disentangle::{
    build_mask, disentanglement_loss, evidential_attention, recalibrate, recalibration_loss,
    sample_wrong_labels, split_features, MaskBundle, MaskNoise,
};
use crate::error::{Error, Result};
use crate::losses::{adversarial_consistency_loss, evidential_classification_loss};
use crate::networks::{
    bind_on_tape, classifier_probs_forward, copy_and_freeze, evidence_forward, BindMode,
    ComponentKind, NetworkBinding, ViewNetworkSet,
};
use crate::opinion::{fuse_all, fuse_evidence_on_tape, opinion_from_evidence, probs_from_evidence};
use crate::optim::Adam;
use crate::rng::{self, DetRng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

type F = f64;
type Batch = MultiViewBatch<F>;
type Networks = ViewNetworkSet<F>;

/// Adam coefficients (standard defaults).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Weight of the disentanglement loss.
    pub gamma1: f64,
    /// Weight of the recalibration loss.
    pub gamma2: f64,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    /// Defaults to 500 when no views are attacked, 400 otherwise.
    pub train_epochs: Option<usize>,
    pub batch_size: usize,
    /// KL annealing horizon: lambda_t = min(1, epoch / anneal_epochs).
    pub anneal_epochs: usize,
    /// Gumbel softmax temperature.
    pub temperature: f64,
    pub train_fraction: f64,
    pub attack: AttackConfig,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerConfig,
    /// Attacked-view counts evaluated; defaults to 0..=V.
    pub eval_attacked_views: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gamma1: 1.0,
            gamma2: 1.0,
            learning_rate: 0.003,
            pretrain_epochs: 1000,
            train_epochs: None,
            batch_size: 500,
            anneal_epochs: 10,
            temperature: 0.1,
            train_fraction: 0.8,
            attack: AttackConfig::default(),
            runs: 5,
            seeds: vec![1, 2, 3, 4, 5],
            optimizer: OptimizerConfig::default(),
            eval_attacked_views: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config("gamma weights must be non-negative".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.pretrain_epochs == 0 || self.resolved_train_epochs() == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must be in (0,1)".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("need at least one run".into()));
        }
        if self.seeds.len() != self.runs {
            return Err(Error::Config(format!(
                "{} seeds for {} runs",
                self.seeds.len(),
                self.runs
            )));
        }
        self.attack.validate().map_err(|e| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        })
    }

    pub fn resolved_train_epochs(&self) -> usize {
        self.train_epochs
            .unwrap_or(if self.attack.views_to_attack == 0 { 500 } else { 400 })
    }

    /// KL annealing coefficient at a 0-based epoch.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.anneal_epochs as f64).min(1.0)
        }
    }

    /// Hash of the serialized config (stable across runs).
    pub fn hash_with(&self, flags: &AblationFlags) -> String {
        let payload = serde_json::to_string(&(self, flags)).expect("config serializes");
        let digest = Sha256::digest(payload.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Component toggles for the ablation harness. Disabling disentanglement
/// also invalidates the disentanglement loss and attention; disabling
/// recalibration invalidates the recalibration loss.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_pretrain_attacks: bool,
    pub disable_disentangle: bool,
    pub disable_recalibrate: bool,
    pub disable_attention: bool,
    pub disable_consistency_loss: bool,
    pub disable_disentangle_loss: bool,
    pub disable_recalibration_loss: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 7] = [
        "pretrain-with-attacks",
        "disentangle",
        "recalibrate",
        "attention",
        "consistency-loss",
        "disentangle-loss",
        "recalibration-loss",
    ];

    /// Apply the cascade rules.
    pub fn resolved(&self) -> AblationFlags {
        let mut f = self.clone();
        if f.disable_disentangle {
            f.disable_disentangle_loss = true;
            f.disable_attention = true;
        }
        if f.disable_recalibrate {
            f.disable_recalibration_loss = true;
        }
        f
    }

    pub fn disable_by_name(&mut self, name: &str) -> Result<()> {
        match name {
            "pretrain-with-attacks" => self.disable_pretrain_attacks = true,
            "disentangle" => self.disable_disentangle = true,
            "recalibrate" => self.disable_recalibrate = true,
            "attention" => self.disable_attention = true,
            "consistency-loss" => self.disable_consistency_loss = true,
            "disentangle-loss" => self.disable_disentangle_loss = true,
            "recalibration-loss" => self.disable_recalibration_loss = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation component {other:?}; known: {:?}",
                    AblationFlags::NAMES
                )))
            }
        }
        Ok(())
    }

    pub fn is_full_model(&self) -> bool {
        *self == AblationFlags::default()
    }
}

/// Per-epoch loss term breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub fused: f64,
    pub per_view: f64,
    pub consistency: f64,
    pub disentanglement: f64,
    pub recalibration: f64,
    pub total: f64,
}

/// Per-view forward artifacts of the disentangled pipeline.
pub struct FeatureBundle {
    pub mask: Option<MaskBundle<F>>,
    pub h_clean: NodeId,
    pub h_adversarial: NodeId,
    pub h_recalibrated: Option<NodeId>,
    pub h_final: NodeId,
    pub attention: Option<NodeId>,
    pub h_augmented: NodeId,
    /// Stage-2 extractor evidence on the augmented feature.
    pub evidence: NodeId,
}

/// Noise policy for mask construction.
pub enum NoisePolicy<'a> {
    /// Fresh Gumbel noise per view (training).
    Sampled(&'a mut DetRng),
    /// Noise fixed to zero (attack generation and evaluation).
    Deterministic,
}

/// Run the disentangled forward path for every view.
pub fn forward_views(
    tape: &mut Tape<F>,
    binding: &NetworkBinding,
    inputs: &[NodeId],
    flags: &AblationFlags,
    temperature: f64,
    noise: &mut NoisePolicy<'_>,
) -> Result<Vec<FeatureBundle>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (v, &x) in inputs.iter().enumerate() {
        let nodes = &binding.views[v];
        let (n, d) = {
            let t = tape.value(x);
            (t.rows(), t.cols())
        };
        let (mask, h_clean, h_adversarial) = if flags.disable_disentangle {
            let zeros = tape.constant(Tensor::zeros(&[n, d]));
            (None, x, zeros)
        } else {
            let mask_noise = match noise {
                NoisePolicy::Sampled(rng) => MaskNoise::sample(rng, n, d),
                NoisePolicy::Deterministic => MaskNoise::zeros(n, d),
            };
            let bundle = build_mask(
                tape,
                &nodes.evidence_pretrain,
                &nodes.robustness_map,
                x,
                temperature,
                mask_noise,
            )?;
            let (h_c, h_a) = split_features(tape, x, bundle.mask);
            (Some(bundle), h_c, h_a)
        };
        let (h_recalibrated, h_final) = if flags.disable_recalibrate {
            (None, h_clean)
        } else {
            let h_cr = recalibrate(tape, &nodes.recalibrate, h_adversarial);
            (Some(h_cr), tape.add(h_clean, h_cr))
        };
        let (attention, h_augmented) = if flags.disable_attention {
            (None, h_final)
        } else {
            let att = evidential_attention(
                tape,
                &nodes.evidence_pretrain,
                &nodes.attention_map,
                h_final,
            );
            (Some(att), tape.mul(h_final, att))
        };
        let evidence = evidence_forward(tape, &nodes.evidence_classifier, h_augmented);
        out.push(FeatureBundle {
            mask,
            h_clean,
            h_adversarial,
            h_recalibrated,
            h_final,
            attention,
            h_augmented,
            evidence,
        });
    }
    Ok(out)
}

/// Attack objective: sum of per-view evidential classification losses of the
/// given extractor applied directly to the inputs.
pub struct ExtractorTarget<'a> {
    pub networks: &'a Networks,
    pub lambda: f64,
}

impl AttackTarget<F> for ExtractorTarget<'_> {
    fn loss(&self, tape: &mut Tape<F>, views: &[NodeId], labels: &Tensor<F>) -> Result<NodeId> {
        let binding = bind_on_tape(tape, self.networks, BindMode::Frozen);
        let y = tape.constant(labels.clone());
        let mut total: Option<NodeId> = None;
        for (v, &x) in views.iter().enumerate() {
            let ev = evidence_forward(tape, &binding.views[v].evidence_pretrain, x);
            let alpha = tape.add_scalar(ev, 1.0);
            let l = evidential_classification_loss(tape, alpha, y, self.lambda)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        Ok(total.expect("at least one view"))
    }
}

/// Attack objective: evidential classification loss of the fused opinion
/// through the complete inference pipeline (deterministic mask noise).
pub struct FullModelTarget<'a> {
    pub networks: &'a Networks,
    pub flags: AblationFlags,
    pub temperature: f64,
    pub lambda: f64,
}

impl AttackTarget<F> for FullModelTarget<'_> {
    fn loss(&self, tape: &mut Tape<F>, views: &[NodeId], labels: &Tensor<F>) -> Result<NodeId> {
        let binding = bind_on_tape(tape, self.networks, BindMode::Frozen);
        let y = tape.constant(labels.clone());
        let bundles = forward_views(
            tape,
            &binding,
            views,
            &self.flags,
            self.temperature,
            &mut NoisePolicy::Deterministic,
        )?;
        let evidences: Vec<NodeId> = bundles.iter().map(|b| b.evidence).collect();
        let (fused_alpha, _) = fuse_evidence_on_tape(tape, &evidences)?;
        evidential_classification_loss(tape, fused_alpha, y, self.lambda)
    }
}

fn attack_batch(
    networks: &Networks,
    views: &[Tensor<F>],
    labels: &Tensor<F>,
    cfg: &AttackConfig,
    flags: &AblationFlags,
    temperature: f64,
    lambda: f64,
) -> Result<Vec<Tensor<F>>> {
    match cfg.loss_target {
        LossTarget::PretrainedExtractor => {
            let target = ExtractorTarget { networks, lambda };
            pgd_attack_views(views, labels, &target, cfg)
        }
        LossTarget::FullModel => {
            let target = FullModelTarget {
                networks,
                flags: flags.clone(),
                temperature,
                lambda,
            };
            pgd_attack_views(views, labels, &target, cfg)
        }
    }
}

/// Loss terms of one optimization step.
struct StepLoss {
    fused: f64,
    per_view: f64,
    consistency: f64,
    disentanglement: f64,
    recalibration: f64,
    total: f64,
}

fn minibatch_ranges(n: usize, batch_size: usize, rng: &mut DetRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > batch_size {
        rng::shuffle(rng, &mut idx);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn training_error(epoch: usize, err: Error) -> Error {
    match err {
        Error::Numeric { node, message } => Error::Training {
            epoch,
            message: format!("non-finite value (node {node}): {message}"),
        },
        other => other,
    }
}

/// Stage 1: perturbation-insensitive pretraining of the evidence extractor.
pub fn pretrain(
    config: &ExperimentConfig,
    train: &Batch,
    run_seed: u64,
    flags: &AblationFlags,
) -> Result<(Networks, Vec<EpochLoss>)> {
    config.validate()?;
    let flags = flags.resolved();
    let mut set = Networks::new(&train.view_dims, train.num_classes);
    set.randomize_extractors(rng::derive_seed(run_seed, "pretrain-init"));
    // stage-2 components sit out the pretraining stage
    for view in &mut set.views {
        for kind in ComponentKind::ALL {
            if kind != ComponentKind::EvidencePretrain {
                view.component_mut(kind).frozen = true;
            }
        }
    }

    let mut adam = Adam::new(config.learning_rate);
    adam.beta1 = config.optimizer.beta1;
    adam.beta2 = config.optimizer.beta2;
    adam.epsilon = config.optimizer.epsilon;

    let attacks_enabled = !flags.disable_pretrain_attacks && config.attack.views_to_attack > 0;
    let mut curves = Vec::with_capacity(config.pretrain_epochs);

    for epoch in 0..config.pretrain_epochs {
        let lambda = config.lambda_at(epoch);
        let mut batch_rng = rng::rng_from(rng::derive_seed(
            run_seed,
            &format!("pretrain-batches-{epoch}"),
        ));
        let ranges = minibatch_ranges(train.num_instances(), config.batch_size, &mut batch_rng);
        let mut acc = EpochLoss {
            epoch,
            fused: 0.0,
            per_view: 0.0,
            consistency: 0.0,
            disentanglement: 0.0,
            recalibration: 0.0,
            total: 0.0,
        };
        let num_batches = ranges.len() as f64;
        for (bi, indices) in ranges.iter().enumerate() {
            let sub = train.subset(indices);
            // mix clean and attacked copies 1:1
            let (views, labels) = if attacks_enabled {
                let cfg = config.attack.with_seed(rng::derive_seed(
                    run_seed,
                    &format!("pretrain-attack-{epoch}-{bi}"),
                ));
                let attacked =
                    attack_batch(&set, &sub.views, &sub.labels, &cfg, &flags, config.temperature, lambda)
                        .map_err(|e| training_error(epoch, e))?;
                let views: Vec<Tensor<F>> = sub
                    .views
                    .iter()
                    .zip(&attacked)
                    .map(|(clean, adv)| {
                        let mut vals = clean.values().to_vec();
                        vals.extend_from_slice(adv.values());
                        Tensor::new(vec![clean.rows() * 2, clean.cols()], vals).unwrap()
                    })
                    .collect();
                let mut lab = sub.labels.values().to_vec();
                lab.extend_from_slice(sub.labels.values());
                let labels =
                    Tensor::new(vec![sub.labels.rows() * 2, sub.labels.cols()], lab).unwrap();
                (views, labels)
            } else {
                (sub.views.clone(), sub.labels.clone())
            };

            let mut tape: Tape<F> = Tape::new();
            let binding = bind_on_tape(&mut tape, &set, BindMode::Trainable);
            let y = tape.constant(labels.clone());
            let xs: Vec<NodeId> = views.iter().map(|x| tape.constant(x.clone())).collect();

            let mut evidences = Vec::new();
            let mut probs = Vec::new();
            for (v, &x) in xs.iter().enumerate() {
                let ev = evidence_forward(&mut tape, &binding.views[v].evidence_pretrain, x);
                probs.push(probs_from_evidence(&mut tape, ev));
                evidences.push(ev);
            }
            let step = assemble_losses(
                &mut tape,
                &evidences,
                &probs,
                y,
                lambda,
                &flags,
                None,
                config,
            )
            .map_err(|e| training_error(epoch, e))?;

            let grads = tape
                .backward(step.loss_node)
                .map_err(|e| training_error(epoch, e))?;
            let grad_pairs: Vec<_> = binding
                .trainable
                .iter()
                .map(|(key, node)| (*key, grads.wrt(*node).clone()))
                .collect();
            adam.step(&mut set, &grad_pairs)
                .map_err(|e| training_error(epoch, e))?;

            acc.fused += step.terms.fused / num_batches;
            acc.per_view += step.terms.per_view / num_batches;
            acc.consistency += step.terms.consistency / num_batches;
            acc.total += step.terms.total / num_batches;
        }
        curves.push(acc);
    }
    Ok((set, curves))
}

struct AssembledLoss {
    loss_node: NodeId,
    terms: StepLoss,
}

/// Extra inputs for the stage-2 loss terms.
struct DisentangleInputs<'a> {
    bundles: &'a [FeatureBundle],
    binding: &'a NetworkBinding,
    wrong_labels: &'a Tensor<F>,
}

/// Assemble the training objective: fused and per-view classification
/// losses, cross-view consistency, and (stage 2) the weighted
/// disentanglement and recalibration terms.
#[allow(clippy::too_many_arguments)]
fn assemble_losses(
    tape: &mut Tape<F>,
    evidences: &[NodeId],
    probs: &[NodeId],
    y: NodeId,
    lambda: f64,
    flags: &AblationFlags,
    stage2: Option<DisentangleInputs<'_>>,
    config: &ExperimentConfig,
) -> Result<AssembledLoss> {
    let (fused_alpha, _) = fuse_evidence_on_tape(tape, evidences)?;
    let fused_loss = evidential_classification_loss(tape, fused_alpha, y, lambda)?;

    let mut view_loss: Option<NodeId> = None;
    for &ev in evidences {
        let alpha = tape.add_scalar(ev, 1.0);
        let l = evidential_classification_loss(tape, alpha, y, lambda)?;
        view_loss = Some(match view_loss {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    let view_loss = view_loss.expect("at least one view");

    let mut total = tape.add(fused_loss, view_loss);
    let consistency = if !flags.disable_consistency_loss && probs.len() >= 2 {
        let acl = adversarial_consistency_loss(tape, probs)?;
        total = tape.add(total, acl);
        Some(acl)
    } else {
        None
    };

    let mut disent_term: Option<NodeId> = None;
    let mut recal_term: Option<NodeId> = None;
    if let Some(inputs) = stage2 {
        let need_edl = !flags.disable_disentangle_loss && config.gamma1 > 0.0;
        let need_frl = !flags.disable_recalibration_loss && config.gamma2 > 0.0;
        if need_edl {
            let mut p_clean = Vec::new();
            let mut p_adv = Vec::new();
            for (v, bundle) in inputs.bundles.iter().enumerate() {
                let classifier = &inputs.binding.views[v].train_classifier;
                p_clean.push(classifier_probs_forward(tape, classifier, bundle.h_clean));
                p_adv.push(classifier_probs_forward(tape, classifier, bundle.h_adversarial));
            }
            let y_wrong = tape.constant(inputs.wrong_labels.clone());
            let edl = disentanglement_loss(tape, &p_clean, &p_adv, y, y_wrong)?;
            let scaled = tape.scale(edl, config.gamma1);
            total = tape.add(total, scaled);
            disent_term = Some(scaled);
        }
        if need_frl {
            let mut p_recal = Vec::new();
            for (v, bundle) in inputs.bundles.iter().enumerate() {
                if let Some(h_cr) = bundle.h_recalibrated {
                    let classifier = &inputs.binding.views[v].train_classifier;
                    p_recal.push(classifier_probs_forward(tape, classifier, h_cr));
                }
            }
            if !p_recal.is_empty() {
                let frl = recalibration_loss(tape, &p_recal, y)?;
                let scaled = tape.scale(frl, config.gamma2);
                total = tape.add(total, scaled);
                recal_term = Some(scaled);
            }
        }
    }

    let scalar = |tape: &Tape<F>, node: Option<NodeId>| -> f64 {
        node.map(|n| tape.value(n).item().unwrap()).unwrap_or(0.0)
    };
    let terms = StepLoss {
        fused: tape.value(fused_loss).item().unwrap(),
        per_view: tape.value(view_loss).item().unwrap(),
        consistency: scalar(tape, consistency),
        disentanglement: scalar(tape, disent_term),
        recalibration: scalar(tape, recal_term),
        total: tape.value(total).item().unwrap(),
    };
    Ok(AssembledLoss {
        loss_node: total,
        terms,
    })
}

/// Stage 2: disentangled training on top of the frozen pretrained extractor.
pub fn train(
    config: &ExperimentConfig,
    pretrained: &Networks,
    train: &Batch,
    run_seed: u64,
    flags: &AblationFlags,
) -> Result<(Networks, Vec<EpochLoss>)> {
    config.validate()?;
    let flags = flags.resolved();
    let mut set = pretrained.clone();
    copy_and_freeze(&mut set)?;
    set.randomize_heads(rng::derive_seed(run_seed, "train-init"));
    for view in &mut set.views {
        for kind in [
            ComponentKind::RobustnessMap,
            ComponentKind::AttentionMap,
            ComponentKind::Recalibrate,
            ComponentKind::TrainClassifier,
        ] {
            view.component_mut(kind).frozen = false;
        }
    }

    let mut adam = Adam::new(config.learning_rate);
    adam.beta1 = config.optimizer.beta1;
    adam.beta2 = config.optimizer.beta2;
    adam.epsilon = config.optimizer.epsilon;

    let epochs = config.resolved_train_epochs();
    let mut curves = Vec::with_capacity(epochs);
    let attacks_enabled = config.attack.views_to_attack > 0;

    for epoch in 0..epochs {
        let lambda = config.lambda_at(epoch);
        let mut gumbel_rng = rng::rng_from(rng::derive_seed(
            run_seed,
            &format!("train-gumbel-{epoch}"),
        ));
        let mut wrong_rng = rng::rng_from(rng::derive_seed(
            run_seed,
            &format!("train-wrong-label-{epoch}"),
        ));
        let epoch_wrong = sample_wrong_labels(&mut wrong_rng, &train.labels);
        let mut batch_rng = rng::rng_from(rng::derive_seed(
            run_seed,
            &format!("train-batches-{epoch}"),
        ));
        let ranges = minibatch_ranges(train.num_instances(), config.batch_size, &mut batch_rng);
        let mut acc = EpochLoss {
            epoch,
            fused: 0.0,
            per_view: 0.0,
            consistency: 0.0,
            disentanglement: 0.0,
            recalibration: 0.0,
            total: 0.0,
        };
        let num_batches = ranges.len() as f64;
        for (bi, indices) in ranges.iter().enumerate() {
            let sub = train.subset(indices);
            let wrong: Tensor<F> = {
                let k = train.num_classes;
                let mut vals = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    vals.extend_from_slice(epoch_wrong.row(i));
                }
                Tensor::new(vec![indices.len(), k], vals).unwrap()
            };
            let views = if attacks_enabled {
                let cfg = config.attack.with_seed(rng::derive_seed(
                    run_seed,
                    &format!("train-attack-{epoch}-{bi}"),
                ));
                attack_batch(&set, &sub.views, &sub.labels, &cfg, &flags, config.temperature, lambda)
                    .map_err(|e| training_error(epoch, e))?
            } else {
                sub.views.clone()
            };

            let mut tape: Tape<F> = Tape::new();
            let binding = bind_on_tape(&mut tape, &set, BindMode::Trainable);
            let y = tape.constant(sub.labels.clone());
            let xs: Vec<NodeId> = views.iter().map(|x| tape.constant(x.clone())).collect();
            let bundles = forward_views(
                &mut tape,
                &binding,
                &xs,
                &flags,
                config.temperature,
                &mut NoisePolicy::Sampled(&mut gumbel_rng),
            )
            .map_err(|e| training_error(epoch, e))?;
            let evidences: Vec<NodeId> = bundles.iter().map(|b| b.evidence).collect();
            let probs: Vec<NodeId> = evidences
                .iter()
                .map(|&ev| probs_from_evidence(&mut tape, ev))
                .collect();
            let step = assemble_losses(
                &mut tape,
                &evidences,
                &probs,
                y,
                lambda,
                &flags,
                Some(DisentangleInputs {
                    bundles: &bundles,
                    binding: &binding,
                    wrong_labels: &wrong,
                }),
                config,
            )
            .map_err(|e| training_error(epoch, e))?;

            let grads = tape
                .backward(step.loss_node)
                .map_err(|e| training_error(epoch, e))?;
            let grad_pairs: Vec<_> = binding
                .trainable
                .iter()
                .map(|(key, node)| (*key, grads.wrt(*node).clone()))
                .collect();
            adam.step(&mut set, &grad_pairs)
                .map_err(|e| training_error(epoch, e))?;

            acc.fused += step.terms.fused / num_batches;
            acc.per_view += step.terms.per_view / num_batches;
            acc.consistency += step.terms.consistency / num_batches;
            acc.disentanglement += step.terms.disentanglement / num_batches;
            acc.recalibration += step.terms.recalibration / num_batches;
            acc.total += step.terms.total / num_batches;
        }
        curves.push(acc);
    }
    Ok((set, curves))
}

/// Evaluation artifacts for one attacked-view count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSlice {
    pub accuracy: f64,
    pub per_view_accuracy: Vec<f64>,
    pub mean_uncertainty: f64,
    /// Per-test-instance fused uncertainty.
    pub uncertainties: Vec<f64>,
}

/// Evaluation over a list of attacked-view counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub slices: BTreeMap<usize, EvalSlice>,
}

impl EvalReport {
    pub fn clean_accuracy(&self) -> Option<f64> {
        self.slices.get(&0).map(|s| s.accuracy)
    }
}

/// Inference + metrics for each attacked-view count. The model is immutable;
/// attacks use the full-model white-box objective.
pub fn evaluate(
    config: &ExperimentConfig,
    networks: &Networks,
    test: &Batch,
    attacked_view_counts: &[usize],
    run_seed: u64,
    flags: &AblationFlags,
) -> Result<EvalReport> {
    let flags = flags.resolved();
    let mut slices = BTreeMap::new();
    for &a in attacked_view_counts {
        if a > test.num_views() {
            return Err(Error::contract(format!(
                "cannot attack {a} of {} views",
                test.num_views()
            )));
        }
        let views = if a == 0 {
            test.views.clone()
        } else {
            let cfg = AttackConfig {
                views_to_attack: a,
                loss_target: LossTarget::FullModel,
                seed: rng::derive_seed(run_seed, &format!("eval-attack-{a}")),
                ..config.attack.clone()
            };
            attack_batch(
                networks,
                &test.views,
                &test.labels,
                &cfg,
                &flags,
                config.temperature,
                1.0,
            )?
        };

        let mut tape: Tape<F> = Tape::new();
        let binding = bind_on_tape(&mut tape, networks, BindMode::Frozen);
        let xs: Vec<NodeId> = views.iter().map(|x| tape.constant(x.clone())).collect();
        let bundles = forward_views(
            &mut tape,
            &binding,
            &xs,
            &flags,
            config.temperature,
            &mut NoisePolicy::Deterministic,
        )?;

        let n = test.num_instances();
        let k = test.num_classes;
        let num_views = test.num_views();
        let mut correct = 0usize;
        let mut per_view_correct = vec![0usize; num_views];
        let mut uncertainties = Vec::with_capacity(n);
        for i in 0..n {
            let mut opinions = Vec::with_capacity(num_views);
            for (v, bundle) in bundles.iter().enumerate() {
                let row = tape.value(bundle.evidence).row(i).to_vec();
                let o = opinion_from_evidence(&row)?;
                if o.argmax() == test.class_of(i) {
                    per_view_correct[v] += 1;
                }
                opinions.push(o);
            }
            let fused = fuse_all(&opinions)?;
            debug_assert!(
                (fused.belief.iter().sum::<f64>() + fused.uncertainty - 1.0).abs() < 1e-9
            );
            if fused.argmax() == test.class_of(i) {
                correct += 1;
            }
            uncertainties.push(fused.uncertainty);
        }
        let _ = k;
        let mean_u = uncertainties.iter().sum::<f64>() / n.max(1) as f64;
        slices.insert(
            a,
            EvalSlice {
                accuracy: correct as f64 / n.max(1) as f64,
                per_view_accuracy: per_view_correct
                    .iter()
                    .map(|&c| c as f64 / n.max(1) as f64)
                    .collect(),
                mean_uncertainty: mean_u,
                uncertainties,
            },
        );
    }
    Ok(EvalReport { slices })
}

/// One seeded end-to-end run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub clean_acc: f64,
    pub attacked: BTreeMap<usize, f64>,
    pub mean_u: BTreeMap<usize, f64>,
    pub per_view_acc: BTreeMap<usize, Vec<f64>>,
    pub uncertainties: BTreeMap<usize, Vec<f64>>,
}

/// Mean and standard deviation over runs (sample std, zero for one run).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub clean_acc: MeanStd,
    pub attacked: BTreeMap<usize, MeanStd>,
    pub mean_u: BTreeMap<usize, MeanStd>,
}

/// Aggregated experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dataset: String,
    pub config_hash: String,
    pub flags: AblationFlags,
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

/// Everything produced by one seeded run, including curves and the final
/// model (curves and model are not part of the serialized report).
pub struct SingleRunOutput {
    pub record: RunRecord,
    pub pretrain_curve: Vec<EpochLoss>,
    pub train_curve: Vec<EpochLoss>,
    pub networks: Networks,
}

/// Split, normalize with train statistics, pretrain, train, evaluate.
pub fn run_single(
    config: &ExperimentConfig,
    dataset: &Batch,
    flags: &AblationFlags,
    seed: u64,
) -> Result<SingleRunOutput> {
    config.validate()?;
    let idx = split_indices(dataset, config.train_fraction, seed)?;
    let train_raw = dataset.subset(&idx.train);
    let test_raw = dataset.subset(&idx.test);
    let normalizer = Normalizer::fit(&train_raw);
    let train_batch = normalizer.apply(&train_raw, false);
    let test_batch = normalizer.apply(&test_raw, true);

    let (pretrained, pretrain_curve) = pretrain(config, &train_batch, seed, flags)?;
    let (model, train_curve) = train(config, &pretrained, &train_batch, seed, flags)?;

    let counts: Vec<usize> = config
        .eval_attacked_views
        .clone()
        .unwrap_or_else(|| (0..=dataset.num_views()).collect());
    let eval = evaluate(config, &model, &test_batch, &counts, seed, flags)?;

    let mut attacked = BTreeMap::new();
    let mut mean_u = BTreeMap::new();
    let mut per_view_acc = BTreeMap::new();
    let mut uncertainties = BTreeMap::new();
    for (&a, slice) in &eval.slices {
        attacked.insert(a, slice.accuracy);
        mean_u.insert(a, slice.mean_uncertainty);
        per_view_acc.insert(a, slice.per_view_accuracy.clone());
        uncertainties.insert(a, slice.uncertainties.clone());
    }
    let clean_acc = eval.clean_accuracy().unwrap_or(f64::NAN);
    Ok(SingleRunOutput {
        record: RunRecord {
            seed,
            clean_acc,
            attacked,
            mean_u,
            per_view_acc,
            uncertainties,
        },
        pretrain_curve,
        train_curve,
        networks: model,
    })
}

/// Run every seed (optionally across worker threads) and aggregate.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Batch,
    flags: &AblationFlags,
    name: &str,
    dataset_name: &str,
    workers: usize,
) -> Result<RunReport> {
    config.validate()?;
    let seeds = config.seeds.clone();
    let workers = workers.max(1).min(seeds.len().max(1));

    let outputs: Vec<Result<SingleRunOutput>> = if workers <= 1 {
        seeds
            .iter()
            .map(|&s| run_single(config, dataset, flags, s))
            .collect()
    } else {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Mutex;
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<SingleRunOutput>>>> =
            Mutex::new((0..seeds.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= seeds.len() {
                        break;
                    }
                    let out = run_single(config, dataset, flags, seeds[i]);
                    results.lock().unwrap()[i] = Some(out);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|o| o.expect("worker filled every slot"))
            .collect()
    };

    let mut records = Vec::new();
    for out in outputs {
        records.push(out?.record);
    }
    Ok(assemble_report(config, flags, name, dataset_name, records))
}

pub fn assemble_report(
    config: &ExperimentConfig,
    flags: &AblationFlags,
    name: &str,
    dataset_name: &str,
    records: Vec<RunRecord>,
) -> RunReport {
    let clean: Vec<f64> = records.iter().map(|r| r.clean_acc).collect();
    let mut attacked = BTreeMap::new();
    let mut mean_u = BTreeMap::new();
    if let Some(first) = records.first() {
        for &a in first.attacked.keys() {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.attacked.get(&a)).copied().collect();
            attacked.insert(a, mean_std(&vals));
            let us: Vec<f64> = records.iter().filter_map(|r| r.mean_u.get(&a)).copied().collect();
            mean_u.insert(a, mean_std(&us));
        }
    }
    RunReport {
        name: name.to_string(),
        dataset: dataset_name.to_string(),
        config_hash: config.hash_with(flags),
        flags: flags.clone(),
        runs: records,
        aggregate: Aggregate {
            clean_acc: mean_std(&clean),
            attacked,
            mean_u,
        },
    }
}

/// Histogram rows `(a, bin_left, bin_right, density)` of per-instance fused
/// uncertainties, with `bins` equal-width bins over [0,1].
pub fn uncertainty_histogram(record: &RunRecord, bins: usize) -> Vec<(usize, f64, f64, f64)> {
    pooled_uncertainty_histogram(std::slice::from_ref(record), bins)
}

/// Histogram of fused uncertainties pooled across runs.
pub fn pooled_uncertainty_histogram(
    records: &[RunRecord],
    bins: usize,
) -> Vec<(usize, f64, f64, f64)> {
    let mut pooled: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for record in records {
        for (&a, us) in &record.uncertainties {
            pooled.entry(a).or_default().extend_from_slice(us);
        }
    }
    let mut rows = Vec::new();
    let width = 1.0 / bins as f64;
    for (&a, us) in &pooled {
        let mut counts = vec![0usize; bins];
        for &u in us {
            let b = ((u / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = us.len().max(1) as f64;
        for (b, &c) in counts.iter().enumerate() {
            rows.push((a, b as f64 * width, (b + 1) as f64 * width, c as f64 / (n * width)));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            pretrain_epochs: 3,
            train_epochs: Some(3),
            batch_size: 64,
            runs: 1,
            seeds: vec![7],
            attack: AttackConfig {
                steps: 2,
                ..AttackConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn tiny_batch() -> Batch {
        generate_synthetic(&SyntheticSpec {
            views: 2,
            classes: 2,
            dims: vec![4, 4],
            instances: 40,
            class_separation: 2.0,
            view_noise: vec![0.1, 0.1],
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn lambda_schedule_ramps_to_one() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert_eq!(cfg.lambda_at(5), 0.5);
        assert_eq!(cfg.lambda_at(10), 1.0);
        assert_eq!(cfg.lambda_at(500), 1.0);
    }

    #[test]
    fn config_validation_catches_mismatched_seeds() {
        let mut cfg = ExperimentConfig::default();
        cfg.runs = 3;
        cfg.seeds = vec![1, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_cascade() {
        let mut flags = AblationFlags::default();
        flags.disable_disentangle = true;
        let r = flags.resolved();
        assert!(r.disable_disentangle_loss);
        assert!(r.disable_attention);
        let mut flags = AblationFlags::default();
        flags.disable_recalibrate = true;
        assert!(flags.resolved().disable_recalibration_loss);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = tiny_config();
        let batch = tiny_batch();
        let flags = AblationFlags::default();
        let (a, _) = pretrain(&cfg, &batch, 5, &flags).unwrap();
        let (b, _) = pretrain(&cfg, &batch, 5, &flags).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_extractor_never_drifts_during_training() {
        let cfg = tiny_config();
        let batch = tiny_batch();
        let flags = AblationFlags::default();
        let (pre, _) = pretrain(&cfg, &batch, 5, &flags).unwrap();
        let (model, _) = train(&cfg, &pre, &batch, 5, &flags).unwrap();
        for (v, view) in model.views.iter().enumerate() {
            assert!(view.evidence_pretrain.frozen);
            assert_eq!(
                view.evidence_pretrain.layers[0].weight.values(),
                pre.views[v].evidence_pretrain.layers[0].weight.values()
            );
            assert_eq!(
                view.evidence_pretrain.layers[0].bias.values(),
                pre.views[v].evidence_pretrain.layers[0].bias.values()
            );
        }
    }

    #[test]
    fn loss_decomposition_sums_to_total() {
        let cfg = tiny_config();
        let batch = tiny_batch();
        let flags = AblationFlags::default();
        let (pre, _) = pretrain(&cfg, &batch, 9, &flags).unwrap();
        let (_, curve) = train(&cfg, &pre, &batch, 9, &flags).unwrap();
        for e in &curve {
            let sum = e.fused + e.per_view + e.consistency + e.disentanglement + e.recalibration;
            assert!(
                (sum - e.total).abs() < 1e-9,
                "epoch {}: {} vs {}",
                e.epoch,
                sum,
                e.total
            );
        }
    }

    #[test]
    fn evaluation_does_not_mutate_the_model() {
        let cfg = tiny_config();
        let batch = tiny_batch();
        let flags = AblationFlags::default();
        let (pre, _) = pretrain(&cfg, &batch, 2, &flags).unwrap();
        let (model, _) = train(&cfg, &pre, &batch, 2, &flags).unwrap();
        let before = crate::checkpoint::Checkpoint::from_networks(
            &model,
            crate::checkpoint::Stage::Train,
            2,
        );
        let before_json = serde_json::to_string(&before).unwrap();
        evaluate(&cfg, &model, &batch, &[0, 1, 2], 2, &flags).unwrap();
        let after = crate::checkpoint::Checkpoint::from_networks(
            &model,
            crate::checkpoint::Stage::Train,
            2,
        );
        assert_eq!(before_json, serde_json::to_string(&after).unwrap());
    }

    #[test]
    fn zero_attacked_views_slice_equals_clean_accuracy() {
        let cfg = tiny_config();
        let batch = tiny_batch();
        let flags = AblationFlags::default();
        let out = run_single(&cfg, &batch, &flags, 7).unwrap();
        assert_eq!(out.record.clean_acc, out.record.attacked[&0]);
    }
}
