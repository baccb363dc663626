//! Per-view parametric components: evidence extractors, evidence mapping
//! layers, feature recalibration, and the training-only evidential
//! classifiers, plus parameter copy/freeze between stages.

use crate::error::{Error, Result};
use crate::opinion::probs_from_evidence;
use crate::rng::{self, DetRng};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Evidence is shifted softplus clamped at zero: `max(0, softplus(z) - ln 2)`,
/// so a zero pre-activation yields exactly zero evidence.
pub const SOFTPLUS_SHIFT: f64 = std::f64::consts::LN_2;

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentKind {
    /// Perturbation-insensitive pretrained extractor, frozen after stage 1.
    EvidencePretrain,
    /// Stage-2 evidence extractor, initialized from the pretrained weights.
    EvidenceClassifier,
    /// Maps class-level evidence to a feature-level robustness map.
    RobustnessMap,
    /// Maps class scores to feature-level attention.
    AttentionMap,
    /// Rectifies weak adversarial features.
    Recalibrate,
    /// Training-only evidential classifier head.
    TrainClassifier,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::EvidencePretrain,
        ComponentKind::EvidenceClassifier,
        ComponentKind::RobustnessMap,
        ComponentKind::AttentionMap,
        ComponentKind::Recalibrate,
        ComponentKind::TrainClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::EvidencePretrain => "evidence_pretrain",
            ComponentKind::EvidenceClassifier => "evidence_classifier",
            ComponentKind::RobustnessMap => "robustness_map",
            ComponentKind::AttentionMap => "attention_map",
            ComponentKind::Recalibrate => "recalibrate",
            ComponentKind::TrainClassifier => "train_classifier",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ComponentKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Weight or bias half of an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamField {
    Weight,
    Bias,
}

/// Stable identifier of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub view: usize,
    pub kind: ComponentKind,
    pub layer: usize,
    pub field: ParamField,
}

impl ParamKey {
    pub fn name(&self) -> String {
        let field = match self.field {
            ParamField::Weight => "weight",
            ParamField::Bias => "bias",
        };
        format!("{}.{}.{}.{}", self.kind.name(), self.view, self.layer, field)
    }
}

/// One affine layer, weight laid out `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<R: Scalar> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Scalar> Affine<R> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], with an optional
    /// constant bias offset.
    pub fn randomize(&mut self, rng: &mut DetRng, bias_offset: f64) {
        let fan_in = self.weight.shape()[0];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in self.weight.values_mut() {
            *v = rng::uniform(rng, -bound, bound);
        }
        for v in self.bias.values_mut() {
            *v = rng::uniform::<R>(rng, -bound, bound) + R::c(bias_offset);
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.values_mut()[i * dim + i] = R::one();
        }
        Affine {
            weight: w,
            bias: Tensor::zeros(&[dim]),
        }
    }
}

/// A named stack of affine layers with a freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Component<R: Scalar> {
    pub layers: Vec<Affine<R>>,
    pub frozen: bool,
}

impl<R: Scalar> Component<R> {
    fn new(layers: Vec<Affine<R>>) -> Self {
        Component {
            layers,
            frozen: false,
        }
    }
}

/// All per-view components of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewComponents<R: Scalar> {
    pub evidence_pretrain: Component<R>,
    pub evidence_classifier: Component<R>,
    pub robustness_map: Component<R>,
    pub attention_map: Component<R>,
    pub recalibrate: Component<R>,
    pub train_classifier: Component<R>,
}

impl<R: Scalar> ViewComponents<R> {
    fn new(dim: usize, num_classes: usize) -> Self {
        ViewComponents {
            evidence_pretrain: Component::new(vec![Affine::zeros(dim, num_classes)]),
            evidence_classifier: Component::new(vec![Affine::zeros(dim, num_classes)]),
            robustness_map: Component::new(vec![Affine::zeros(num_classes, dim)]),
            attention_map: Component::new(vec![Affine::zeros(num_classes, dim)]),
            recalibrate: Component::new(vec![Affine::zeros(dim, dim), Affine::zeros(dim, dim)]),
            train_classifier: Component::new(vec![Affine::zeros(dim, num_classes)]),
        }
    }

    pub fn component(&self, kind: ComponentKind) -> &Component<R> {
        match kind {
            ComponentKind::EvidencePretrain => &self.evidence_pretrain,
            ComponentKind::EvidenceClassifier => &self.evidence_classifier,
            ComponentKind::RobustnessMap => &self.robustness_map,
            ComponentKind::AttentionMap => &self.attention_map,
            ComponentKind::Recalibrate => &self.recalibrate,
            ComponentKind::TrainClassifier => &self.train_classifier,
        }
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut Component<R> {
        match kind {
            ComponentKind::EvidencePretrain => &mut self.evidence_pretrain,
            ComponentKind::EvidenceClassifier => &mut self.evidence_classifier,
            ComponentKind::RobustnessMap => &mut self.robustness_map,
            ComponentKind::AttentionMap => &mut self.attention_map,
            ComponentKind::Recalibrate => &mut self.recalibrate,
            ComponentKind::TrainClassifier => &mut self.train_classifier,
        }
    }
}

/// The full model: one component set per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNetworkSet<R: Scalar> {
    pub view_dims: Vec<usize>,
    pub num_classes: usize,
    pub views: Vec<ViewComponents<R>>,
}

impl<R: Scalar> ViewNetworkSet<R> {
    pub fn new(view_dims: &[usize], num_classes: usize) -> Self {
        ViewNetworkSet {
            view_dims: view_dims.to_vec(),
            num_classes,
            views: view_dims
                .iter()
                .map(|&d| ViewComponents::new(d, num_classes))
                .collect(),
        }
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Randomize the pretraining extractors from a seeded stream. Biases sit
    /// at +ln 2 so every evidence unit starts on the live side of the
    /// shifted-softplus clamp.
    pub fn randomize_extractors(&mut self, seed: u64) {
        let mut rng = rng::rng_from(rng::derive_seed(seed, "init.extractor"));
        for view in &mut self.views {
            for layer in &mut view.evidence_pretrain.layers {
                layer.randomize(&mut rng, SOFTPLUS_SHIFT);
            }
        }
    }

    /// Randomize the stage-2 heads (mapping layers, recalibration, training
    /// classifier) from a seeded stream. The ReLU classifier head gets the
    /// same live-at-init bias treatment as the extractors.
    pub fn randomize_heads(&mut self, seed: u64) {
        let mut rng = rng::rng_from(rng::derive_seed(seed, "init.heads"));
        for view in &mut self.views {
            for comp in [
                ComponentKind::RobustnessMap,
                ComponentKind::AttentionMap,
                ComponentKind::Recalibrate,
                ComponentKind::TrainClassifier,
            ] {
                let offset = if comp == ComponentKind::TrainClassifier {
                    0.5
                } else {
                    0.0
                };
                for layer in &mut view.component_mut(comp).layers {
                    layer.randomize(&mut rng, offset);
                }
            }
        }
    }

    /// All parameter keys in deterministic order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (v, view) in self.views.iter().enumerate() {
            for kind in ComponentKind::ALL {
                for (l, _) in view.component(kind).layers.iter().enumerate() {
                    for field in [ParamField::Weight, ParamField::Bias] {
                        keys.push(ParamKey {
                            view: v,
                            kind,
                            layer: l,
                            field,
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Tensor<R> {
        let layer = &self.views[key.view].component(key.kind).layers[key.layer];
        match key.field {
            ParamField::Weight => &layer.weight,
            ParamField::Bias => &layer.bias,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor<R> {
        let layer = &mut self.views[key.view].component_mut(key.kind).layers[key.layer];
        match key.field {
            ParamField::Weight => &mut layer.weight,
            ParamField::Bias => &mut layer.bias,
        }
    }
}

/// Copy pretrained extractor weights into the stage-2 extractor and freeze
/// the source. The destination stays trainable.
pub fn copy_and_freeze<R: Scalar>(set: &mut ViewNetworkSet<R>) -> Result<()> {
    for view in &mut set.views {
        if view.evidence_pretrain.layers.len() != view.evidence_classifier.layers.len() {
            return Err(Error::contract("extractor layer counts differ"));
        }
        for (src, dst) in view
            .evidence_pretrain
            .layers
            .iter()
            .zip(&mut view.evidence_classifier.layers)
        {
            if src.weight.shape() != dst.weight.shape() {
                return Err(Error::contract(format!(
                    "extractor shape mismatch: {:?} vs {:?}",
                    src.weight.shape(),
                    dst.weight.shape()
                )));
            }
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
        }
        view.evidence_pretrain.frozen = true;
        view.evidence_classifier.frozen = false;
    }
    Ok(())
}

// ---- tape binding ----

/// Nodes of one affine layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AffineNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Nodes of one component (stack of affine layers).
#[derive(Debug, Clone)]
pub struct ComponentNodes {
    pub layers: Vec<AffineNodes>,
}

/// Per-view bound nodes.
#[derive(Debug, Clone)]
pub struct ViewNodes {
    pub evidence_pretrain: ComponentNodes,
    pub evidence_classifier: ComponentNodes,
    pub robustness_map: ComponentNodes,
    pub attention_map: ComponentNodes,
    pub recalibrate: ComponentNodes,
    pub train_classifier: ComponentNodes,
}

/// A network set materialized on a tape, remembering which node carries each
/// trainable parameter.
#[derive(Debug)]
pub struct NetworkBinding {
    pub views: Vec<ViewNodes>,
    pub trainable: Vec<(ParamKey, NodeId)>,
}

/// How components go onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Unfrozen components become trainable parameters.
    Trainable,
    /// Everything becomes constants (attack generation, evaluation).
    Frozen,
}

/// Materialize the network set on a tape.
pub fn bind_on_tape<R: Scalar>(
    tape: &mut Tape<R>,
    set: &ViewNetworkSet<R>,
    mode: BindMode,
) -> NetworkBinding {
    let mut trainable = Vec::new();
    let views = set
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let mut bind_component = |kind: ComponentKind| {
                let comp = view.component(kind);
                let layers = comp
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| {
                        let as_param = mode == BindMode::Trainable && !comp.frozen;
                        let (w, b) = if as_param {
                            (tape.param(layer.weight.clone()), tape.param(layer.bias.clone()))
                        } else {
                            (
                                tape.constant(layer.weight.clone()),
                                tape.constant(layer.bias.clone()),
                            )
                        };
                        if as_param {
                            for (field, node) in
                                [(ParamField::Weight, w), (ParamField::Bias, b)]
                            {
                                trainable.push((
                                    ParamKey {
                                        view: v,
                                        kind,
                                        layer: l,
                                        field,
                                    },
                                    node,
                                ));
                            }
                        }
                        AffineNodes { weight: w, bias: b }
                    })
                    .collect();
                ComponentNodes { layers }
            };
            ViewNodes {
                evidence_pretrain: bind_component(ComponentKind::EvidencePretrain),
                evidence_classifier: bind_component(ComponentKind::EvidenceClassifier),
                robustness_map: bind_component(ComponentKind::RobustnessMap),
                attention_map: bind_component(ComponentKind::AttentionMap),
                recalibrate: bind_component(ComponentKind::Recalibrate),
                train_classifier: bind_component(ComponentKind::TrainClassifier),
            }
        })
        .collect();
    NetworkBinding { views, trainable }
}

/// `x W + b` on the tape.
pub fn affine_forward<R: Scalar>(tape: &mut Tape<R>, x: NodeId, layer: AffineNodes) -> NodeId {
    let h = tape.matmul(x, layer.weight);
    tape.add_bias(h, layer.bias)
}

/// Evidence head: affine, then shifted softplus clamped at zero.
pub fn evidence_forward<R: Scalar>(
    tape: &mut Tape<R>,
    extractor: &ComponentNodes,
    x: NodeId,
) -> NodeId {
    let z = affine_forward(tape, x, extractor.layers[0]);
    let sp = tape.softplus(z);
    let shifted = tape.add_scalar(sp, -R::c(SOFTPLUS_SHIFT));
    tape.relu(shifted)
}

/// Robustness/attention mapping layer: plain affine.
pub fn mapping_forward<R: Scalar>(
    tape: &mut Tape<R>,
    mapping: &ComponentNodes,
    x: NodeId,
) -> NodeId {
    affine_forward(tape, x, mapping.layers[0])
}

/// Feature recalibration: affine, ReLU, affine.
pub fn recalibrate_forward<R: Scalar>(
    tape: &mut Tape<R>,
    recalib: &ComponentNodes,
    x: NodeId,
) -> NodeId {
    let h = affine_forward(tape, x, recalib.layers[0]);
    let h = tape.relu(h);
    affine_forward(tape, h, recalib.layers[1])
}

/// Training classifier head: logits, ReLU evidence, Dirichlet-mean
/// probabilities (strictly positive, rows sum to 1).
pub fn classifier_probs_forward<R: Scalar>(
    tape: &mut Tape<R>,
    classifier: &ComponentNodes,
    x: NodeId,
) -> NodeId {
    let z = affine_forward(tape, x, classifier.layers[0]);
    let ev = tape.relu(z);
    probs_from_evidence(tape, ev)
}

// ---- plain-value wrappers ----

/// Evidence for a batch of inputs through one view's extractor.
pub fn extract_evidence<R: Scalar>(
    set: &ViewNetworkSet<R>,
    view: usize,
    kind: ComponentKind,
    x: &Tensor<R>,
) -> Result<Tensor<R>> {
    if view >= set.num_views() {
        return Err(Error::contract(format!("view {view} out of range")));
    }
    if x.cols() != set.view_dims[view] {
        return Err(Error::contract(format!(
            "input dim {} does not match view dim {}",
            x.cols(),
            set.view_dims[view]
        )));
    }
    if !matches!(
        kind,
        ComponentKind::EvidencePretrain | ComponentKind::EvidenceClassifier
    ) {
        return Err(Error::contract(format!(
            "{} is not an evidence extractor",
            kind.name()
        )));
    }
    let mut tape: Tape<R> = Tape::new();
    let binding = bind_on_tape(&mut tape, set, BindMode::Frozen);
    let comp = match kind {
        ComponentKind::EvidencePretrain => &binding.views[view].evidence_pretrain,
        _ => &binding.views[view].evidence_classifier,
    };
    let xn = tape.constant(as_matrix(x));
    let ev = evidence_forward(&mut tape, comp, xn);
    Ok(tape.value(ev).clone())
}

/// Probabilities of the training classifier for one view.
pub fn classify_evidentially<R: Scalar>(
    set: &ViewNetworkSet<R>,
    view: usize,
    h: &Tensor<R>,
) -> Result<Tensor<R>> {
    if view >= set.num_views() {
        return Err(Error::contract(format!("view {view} out of range")));
    }
    if h.cols() != set.view_dims[view] {
        return Err(Error::contract(format!(
            "input dim {} does not match view dim {}",
            h.cols(),
            set.view_dims[view]
        )));
    }
    let mut tape: Tape<R> = Tape::new();
    let binding = bind_on_tape(&mut tape, set, BindMode::Frozen);
    let xn = tape.constant(as_matrix(h));
    let p = classifier_probs_forward(&mut tape, &binding.views[view].train_classifier, xn);
    Ok(tape.value(p).clone())
}

/// Promote a vector to a single-row matrix; matrices pass through.
pub fn as_matrix<R: Scalar>(t: &Tensor<R>) -> Tensor<R> {
    if t.shape().len() == 2 {
        t.clone()
    } else {
        Tensor::new(vec![1, t.numel()], t.values().to_vec()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_extractor_emits_zero_evidence() {
        let set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[4], 3);
        let x = Tensor::vector(vec![0.3, 0.9, 0.1, 0.5]);
        let e = extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).unwrap();
        assert_eq!(e.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn evidence_is_nonnegative_for_random_inputs() {
        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[6], 4);
        set.randomize_extractors(9);
        let mut rng = rng::rng_from(17);
        let n = 512;
        let vals = rng::uniform_vec(&mut rng, n * 6, -3.0, 3.0);
        let x = Tensor::matrix(n, 6, vals).unwrap();
        let e = extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).unwrap();
        assert!(e.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn extract_evidence_is_replayable_bit_exactly() {
        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[5], 3);
        set.randomize_extractors(7);
        let x = Tensor::vector(vec![1.0; 5]);
        let a = extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).unwrap();
        let b = extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn extract_evidence_rejects_dim_mismatch() {
        let set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[4], 3);
        let x = Tensor::vector(vec![0.0; 5]);
        assert!(extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).is_err());
    }

    #[test]
    fn copy_and_freeze_matches_outputs() {
        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[4], 2);
        set.randomize_extractors(21);
        copy_and_freeze(&mut set).unwrap();
        assert!(set.views[0].evidence_pretrain.frozen);
        assert!(!set.views[0].evidence_classifier.frozen);
        let x = Tensor::vector(vec![0.2, 0.4, 0.6, 0.8]);
        let a = extract_evidence(&set, 0, ComponentKind::EvidencePretrain, &x).unwrap();
        let b = extract_evidence(&set, 0, ComponentKind::EvidenceClassifier, &x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn classifier_probs_worked_examples() {
        // zero logits, K = 4 -> uniform probabilities
        let set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[2], 4);
        let p = classify_evidentially(&set, 0, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        for &v in p.values() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }

        // logits [3,-5] -> evidence [3,0] -> p = [4/5, 1/5]
        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[2], 2);
        {
            let layer = &mut set.views[0].train_classifier.layers[0];
            layer.weight = Tensor::matrix(2, 2, vec![3.0, -5.0, 0.0, 0.0]).unwrap();
        }
        let p = classify_evidentially(&set, 0, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 0.2, epsilon = 1e-12);
        assert!(p.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn binding_registers_only_unfrozen_components() {
        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[3, 3], 2);
        set.randomize_extractors(5);
        copy_and_freeze(&mut set).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_on_tape(&mut tape, &set, BindMode::Trainable);
        assert!(binding
            .trainable
            .iter()
            .all(|(k, _)| k.kind != ComponentKind::EvidencePretrain));
        // 5 unfrozen components; recalibrate has two layers
        let per_view = (1 + 1 + 1 + 2 + 1) * 2;
        assert_eq!(binding.trainable.len(), per_view * 2);
    }
}
