//! Instance-level forensics under a one-view attack: for each model, how do
//! per-view opinions and masks respond on the attacked view, and how often
//! does the fused decision flip?

use evimix::attack::{AttackConfig, LossTarget};
use evimix::data::{generate_synthetic, split_indices, Normalizer, SyntheticSpec};
use evimix::networks::{bind_on_tape, BindMode};
use evimix::opinion::{fuse_all, opinion_from_evidence};
use evimix::pipeline::{
    forward_views, pretrain, train, AblationFlags, ExperimentConfig, FullModelTarget, NoisePolicy,
};
use evimix::rng;
use evimix::tape::Tape;

fn main() {
    let spec = SyntheticSpec {
        views: 3,
        classes: 4,
        dims: vec![20, 20, 20],
        instances: 1000,
        class_separation: 0.5,
        view_noise: vec![0.9, 2.0, 2.0],
        seed: 1,
    };
    let config = ExperimentConfig {
        pretrain_epochs: 600,
        train_epochs: Some(500),
        batch_size: 1000,
        temperature: 1.0,
        runs: 1,
        seeds: vec![11],
        attack: AttackConfig {
            loss_target: LossTarget::FullModel,
            ..AttackConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let batch = generate_synthetic::<f64>(&spec).unwrap();
    let idx = split_indices(&batch, 0.8, 11).unwrap();
    let train_raw = batch.subset(&idx.train);
    let test_raw = batch.subset(&idx.test);
    let norm = Normalizer::fit(&train_raw);
    let train_b = norm.apply(&train_raw, false);
    let test_b = norm.apply(&test_raw, true);

    for (label, flags) in [
        ("rdml", AblationFlags::default()),
        ("ablation", {
            let mut f = AblationFlags::default();
            f.disable_pretrain_attacks = true;
            f.disable_disentangle = true;
            f
        }),
    ] {
        let flags = flags.resolved();
        let (pre, _) = pretrain(&config, &train_b, 11, &flags).unwrap();
        let (model, _) = train(&config, &pre, &train_b, 11, &flags).unwrap();

        // attack one view per instance, full-model target
        let cfg = AttackConfig {
            views_to_attack: 1,
            loss_target: LossTarget::FullModel,
            seed: rng::derive_seed(11, "eval-attack-1"),
            ..config.attack.clone()
        };
        let target = FullModelTarget {
            networks: &model,
            flags: flags.clone(),
            temperature: config.temperature,
            lambda: 1.0,
        };
        let attacked =
            evimix::attack::pgd_attack_views(&test_b.views, &test_b.labels, &target, &cfg)
                .unwrap();
        // which view was selected per instance (recompute from the seed)
        let mut sel_rng = rng::rng_from(cfg.seed);
        let selected: Vec<usize> = (0..test_b.num_instances())
            .map(|_| rng::choose_subset(&mut sel_rng, 3, 1)[0])
            .collect();

        let run = |views: &Vec<evimix::tensor::Tensor<f64>>| {
            let mut tape: Tape<f64> = Tape::new();
            let binding = bind_on_tape(&mut tape, &model, BindMode::Frozen);
            let xs: Vec<_> = views.iter().map(|x| tape.constant(x.clone())).collect();
            let bundles = forward_views(
                &mut tape,
                &binding,
                &xs,
                &flags,
                config.temperature,
                &mut NoisePolicy::Deterministic,
            )
            .unwrap();
            let ev: Vec<_> = bundles
                .iter()
                .map(|b| tape.value(b.evidence).clone())
                .collect();
            let masks: Vec<_> = bundles
                .iter()
                .map(|b| b.mask.as_ref().map(|m| tape.value(m.mask).clone()))
                .collect();
            (ev, masks)
        };
        let (ev_clean, masks_clean) = run(&test_b.views);
        let (ev_atk, masks_atk) = run(&attacked);

        let n = test_b.num_instances();
        let mut fused_correct_clean = 0;
        let mut fused_correct_atk = 0;
        let mut u_attacked_view = 0.0;
        let mut u_same_view_clean = 0.0;
        let mut mask_drop = 0.0;
        let mut per_view_flip = 0;
        for i in 0..n {
            let y = test_b.class_of(i);
            let ops_clean: Vec<_> = (0..3)
                .map(|v| opinion_from_evidence(ev_clean[v].row(i)).unwrap())
                .collect();
            let ops_atk: Vec<_> = (0..3)
                .map(|v| opinion_from_evidence(ev_atk[v].row(i)).unwrap())
                .collect();
            if fuse_all(&ops_clean).unwrap().argmax() == y {
                fused_correct_clean += 1;
            }
            if fuse_all(&ops_atk).unwrap().argmax() == y {
                fused_correct_atk += 1;
            }
            let s = selected[i];
            u_attacked_view += ops_atk[s].uncertainty;
            u_same_view_clean += ops_clean[s].uncertainty;
            if ops_atk[s].argmax() != ops_clean[s].argmax() {
                per_view_flip += 1;
            }
            if let (Some(mc), Some(ma)) = (&masks_clean[s], &masks_atk[s]) {
                let mean = |row: &[f64]| row.iter().sum::<f64>() / row.len() as f64;
                mask_drop += mean(mc.row(i)) - mean(ma.row(i));
            }
        }
        println!(
            "{label}: fused clean {:.3} attacked {:.3} | attacked-view u {:.3} (clean {:.3}) | \
             per-view argmax flips {:.2} | mask mean drop on attacked view {:+.4}",
            fused_correct_clean as f64 / n as f64,
            fused_correct_atk as f64 / n as f64,
            u_attacked_view / n as f64,
            u_same_view_clean / n as f64,
            per_view_flip as f64 / n as f64,
            mask_drop / n as f64,
        );
    }
}
