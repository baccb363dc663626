use evimix::attack::AttackConfig;
use evimix::data::{generate_synthetic, SyntheticSpec};
use evimix::pipeline::{pretrain, AblationFlags, ExperimentConfig};
use evimix::networks::{bind_on_tape, evidence_forward, BindMode};
use evimix::tape::Tape;

fn main() {
    let batch = generate_synthetic(&SyntheticSpec {
        views: 2, classes: 2, dims: vec![6, 6], instances: 80,
        class_separation: 3.0, view_noise: vec![0.05, 0.05], seed: 17,
    }).unwrap();
    let config = ExperimentConfig {
        pretrain_epochs: 200, batch_size: 200, runs: 1, seeds: vec![1],
        attack: AttackConfig { steps: 3, ..AttackConfig::default() },
        ..ExperimentConfig::default()
    };
    let (set, curves) = pretrain(&config, &batch, 1, &AblationFlags::default()).unwrap();
    for e in curves.iter().step_by(40) {
        println!("epoch {} total {:.4} fused {:.4} views {:.4} acl {:.4}", e.epoch, e.total, e.fused, e.per_view, e.consistency);
    }
    println!("last {:?}", curves.last().map(|e| e.total));
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind_on_tape(&mut tape, &set, BindMode::Frozen);
    for v in 0..2 {
        let xn = tape.constant(batch.views[v].clone());
        let ev = evidence_forward(&mut tape, &binding.views[v].evidence_pretrain, xn);
        for i in [0usize, 1, 40, 41] {
            println!("view {v} inst {i} class {} evidence {:?}", batch.class_of(i), tape.value(ev).row(i));
        }
    }
}
