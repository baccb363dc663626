//! Diagnostic: inspect mask/attention behavior of a trained model under
//! attack, and cross-evaluate mechanisms at inference time.

use evimix::attack::{AttackConfig, LossTarget};
use evimix::data::{generate_synthetic, split_indices, Normalizer, SyntheticSpec};
use evimix::networks::{bind_on_tape, BindMode};
use evimix::pipeline::{
    evaluate, forward_views, pretrain, train, AblationFlags, ExperimentConfig, NoisePolicy,
};
use evimix::tape::Tape;

fn main() {
    let spec = SyntheticSpec {
        views: 3,
        classes: 4,
        dims: vec![20, 20, 20],
        instances: 1000,
        class_separation: 0.5,
        view_noise: vec![1.2, 1.2, 1.2],
        seed: 7,
    };
    let target: LossTarget = match std::env::args().nth(1).as_deref() {
        Some("full") => LossTarget::FullModel,
        _ => LossTarget::PretrainedExtractor,
    };
    let pe: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let te: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let config = ExperimentConfig {
        pretrain_epochs: pe,
        train_epochs: Some(te),
        batch_size: 1000,
        runs: 1,
        seeds: vec![11],
        attack: AttackConfig {
            loss_target: target,
            ..AttackConfig::default()
        },
        eval_attacked_views: Some(vec![0, 1, 2, 3]),
        ..ExperimentConfig::default()
    };
    let batch = generate_synthetic::<f64>(&spec).unwrap();
    let idx = split_indices(&batch, 0.8, 11).unwrap();
    let train_raw = batch.subset(&idx.train);
    let test_raw = batch.subset(&idx.test);
    let norm = Normalizer::fit(&train_raw);
    let train_b = norm.apply(&train_raw, false);
    let test_b = norm.apply(&test_raw, true);

    let flags = AblationFlags::default();
    let (pre, _) = pretrain(&config, &train_b, 11, &flags).unwrap();
    let (model, _) = train(&config, &pre, &train_b, 11, &flags).unwrap();

    // robustness-map and mask statistics on clean test data
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind_on_tape(&mut tape, &model, BindMode::Frozen);
    let xs: Vec<_> = test_b.views.iter().map(|x| tape.constant(x.clone())).collect();
    let bundles = forward_views(
        &mut tape,
        &binding,
        &xs,
        &flags,
        config.temperature,
        &mut NoisePolicy::Deterministic,
    )
    .unwrap();
    for (v, b) in bundles.iter().enumerate() {
        let rm = tape.value(b.mask.as_ref().unwrap().robustness_map);
        let mask = tape.value(b.mask.as_ref().unwrap().mask);
        let att = tape.value(b.attention.unwrap());
        let ev = tape.value(b.evidence);
        let mean = |t: &[f64]| t.iter().sum::<f64>() / t.len() as f64;
        let frac_open = mask.values().iter().filter(|m| **m > 0.5).count() as f64
            / mask.values().len() as f64;
        println!(
            "view {v}: rm mean {:+.3} (|rm| mean {:.3}), mask mean {:.3} (open {:.2}), att mean {:.3}, evidence row-sum {:.3}",
            mean(rm.values()),
            mean(&rm.values().iter().map(|x| x.abs()).collect::<Vec<_>>()),
            mean(mask.values()),
            frac_open,
            mean(att.values()),
            mean(ev.values()) * ev.cols() as f64,
        );
    }

    // cross-flag evaluation of the SAME trained weights
    for (label, mk) in [
        ("full-path", AblationFlags::default()),
        ("no-mask", {
            let mut f = AblationFlags::default();
            f.disable_disentangle = true;
            f
        }),
        ("no-attention", {
            let mut f = AblationFlags::default();
            f.disable_attention = true;
            f
        }),
        ("no-recalibrate", {
            let mut f = AblationFlags::default();
            f.disable_recalibrate = true;
            f
        }),
    ] {
        let report = evaluate(&config, &model, &test_b, &[0, 1, 2, 3], 11, &mk).unwrap();
        let accs: Vec<String> = (0..=3)
            .map(|a| format!("{:.3}", report.slices[&a].accuracy))
            .collect();
        let us: Vec<String> = (0..=3)
            .map(|a| format!("{:.3}", report.slices[&a].mean_uncertainty))
            .collect();
        println!("eval[{label}]: acc {:?} mean_u {:?}", accs, us);
    }
}
