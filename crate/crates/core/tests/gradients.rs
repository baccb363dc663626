//! Finite-difference verification of every tape primitive and of the
//! gradient paths the training loop depends on.

mod common;

use common::{assert_grad_close, fd_gradient, FD_STEP};
use evimix::disentangle::{build_mask, MaskNoise};
use evimix::losses::evidential_ce_loss;
use evimix::networks::{bind_on_tape, classifier_probs_forward, BindMode, ViewNetworkSet};
use evimix::rng::{self, DetRng};
use evimix::tape::{NodeId, Tape};
use evimix::tensor::Tensor;

/// Check d(sum(w . op(inputs)))/d(input_i) against central differences for
/// every input, over `reps` random instantiations.
fn check_op<B>(name: &str, reps: usize, seed: u64, make_inputs: impl Fn(&mut DetRng) -> Vec<Tensor<f64>>, build: B)
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut rng = rng::rng_from(seed);
    for rep in 0..reps {
        let inputs = make_inputs(&mut rng);
        // probe the output shape to draw matching weights
        let (out_shape, out_numel) = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = build(&mut tape, &ids);
            (tape.value(y).shape().to_vec(), tape.value(y).numel())
        };
        let w: Vec<f64> = rng::uniform_vec(&mut rng, out_numel, -1.0, 1.0);

        let eval = |xs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = build(&mut tape, &ids);
            let wn = tape.constant(Tensor::new(out_shape.clone(), w.clone()).unwrap());
            let p = tape.mul(y, wn);
            let l = tape.sum(p);
            tape.value(l).item().unwrap()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = build(&mut tape, &ids);
        let wn = tape.constant(Tensor::new(out_shape.clone(), w.clone()).unwrap());
        let p = tape.mul(y, wn);
        let l = tape.sum(p);
        let grads = tape.backward(l).unwrap();

        for (i, input) in inputs.iter().enumerate() {
            let shape = input.shape().to_vec();
            let mut f = |x: &[f64]| {
                let mut xs = inputs.clone();
                xs[i] = Tensor::new(shape.clone(), x.to_vec()).unwrap();
                eval(&xs)
            };
            let fd = fd_gradient(&mut f, input.values(), FD_STEP);
            assert_grad_close(
                grads.wrt(ids[i]).values(),
                &fd,
                1e-4,
                &format!("{name} rep {rep} input {i}"),
            );
        }
    }
}

fn mat(rng: &mut DetRng, m: usize, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(m, n, rng::uniform_vec(rng, m * n, lo, hi)).unwrap()
}

/// Sample away from a kink at zero so the finite difference never crosses it.
fn mat_away_from_zero(rng: &mut DetRng, m: usize, n: usize) -> Tensor<f64> {
    let vals: Vec<f64> = (0..m * n)
        .map(|_| loop {
            let v: f64 = rng::uniform(rng, -2.0, 2.0);
            if v.abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::matrix(m, n, vals).unwrap()
}

#[test]
fn grad_matmul() {
    check_op("matmul", 17, 1, |r| vec![mat(r, 2, 3, -1.5, 1.5), mat(r, 3, 2, -1.5, 1.5)], |t, ids| {
        t.matmul(ids[0], ids[1])
    });
}

#[test]
fn grad_add_sub_mul_div() {
    check_op("add", 17, 2, |r| vec![mat(r, 2, 3, -2.0, 2.0), mat(r, 2, 3, -2.0, 2.0)], |t, ids| {
        t.add(ids[0], ids[1])
    });
    check_op("sub", 17, 3, |r| vec![mat(r, 2, 3, -2.0, 2.0), mat(r, 2, 3, -2.0, 2.0)], |t, ids| {
        t.sub(ids[0], ids[1])
    });
    check_op("mul", 17, 4, |r| vec![mat(r, 2, 3, -2.0, 2.0), mat(r, 2, 3, -2.0, 2.0)], |t, ids| {
        t.mul(ids[0], ids[1])
    });
    check_op("div", 17, 5, |r| vec![mat(r, 2, 3, -2.0, 2.0), mat(r, 2, 3, 0.4, 2.5)], |t, ids| {
        t.div(ids[0], ids[1])
    });
}

#[test]
fn grad_add_bias_and_broadcasts() {
    check_op(
        "add_bias",
        17,
        6,
        |r| vec![mat(r, 2, 3, -2.0, 2.0), Tensor::vector(rng::uniform_vec(r, 3, -1.0, 1.0))],
        |t, ids| t.add_bias(ids[0], ids[1]),
    );
    check_op(
        "mul_cols",
        17,
        7,
        |r| vec![mat(r, 2, 3, -2.0, 2.0), Tensor::vector(rng::uniform_vec(r, 2, -1.5, 1.5))],
        |t, ids| t.mul_cols(ids[0], ids[1]),
    );
    check_op(
        "div_cols",
        17,
        8,
        |r| vec![mat(r, 2, 3, -2.0, 2.0), Tensor::vector(rng::uniform_vec(r, 2, 0.4, 2.0))],
        |t, ids| t.div_cols(ids[0], ids[1]),
    );
}

#[test]
fn grad_scale_and_shift() {
    check_op("scale", 17, 9, |r| vec![mat(r, 2, 3, -2.0, 2.0)], |t, ids| t.scale(ids[0], -1.7));
    check_op("add_scalar", 17, 10, |r| vec![mat(r, 2, 3, -2.0, 2.0)], |t, ids| {
        t.add_scalar(ids[0], 0.31)
    });
}

#[test]
fn grad_activations() {
    check_op("relu", 17, 11, |r| vec![mat_away_from_zero(r, 2, 3)], |t, ids| t.relu(ids[0]));
    check_op("softplus", 17, 12, |r| vec![mat(r, 2, 3, -3.0, 3.0)], |t, ids| t.softplus(ids[0]));
    check_op("sigmoid", 17, 13, |r| vec![mat(r, 2, 3, -3.0, 3.0)], |t, ids| t.sigmoid(ids[0]));
    check_op("softmax_rows", 17, 14, |r| vec![mat(r, 2, 4, -2.0, 2.0)], |t, ids| {
        t.softmax_rows(ids[0])
    });
}

#[test]
fn grad_transcendentals() {
    check_op("ln", 17, 15, |r| vec![mat(r, 2, 3, 0.2, 3.0)], |t, ids| t.ln(ids[0]));
    check_op("exp", 17, 16, |r| vec![mat(r, 2, 3, -1.5, 1.5)], |t, ids| t.exp(ids[0]));
    check_op("digamma", 17, 17, |r| vec![mat(r, 2, 3, 0.3, 4.0)], |t, ids| t.digamma(ids[0]));
    check_op("log_gamma", 17, 18, |r| vec![mat(r, 2, 3, 0.3, 4.0)], |t, ids| t.log_gamma(ids[0]));
}

#[test]
fn grad_abs_and_clamp() {
    check_op("abs", 17, 19, |r| vec![mat_away_from_zero(r, 2, 3)], |t, ids| t.abs(ids[0]));
    // stay away from the clamp edges at +/-1
    check_op(
        "clamp",
        17,
        20,
        |r| {
            let vals: Vec<f64> = (0..6)
                .map(|_| loop {
                    let v: f64 = rng::uniform(r, -2.0, 2.0);
                    if (v.abs() - 1.0).abs() > 0.05 {
                        break v;
                    }
                })
                .collect();
            vec![Tensor::matrix(2, 3, vals).unwrap()]
        },
        |t, ids| t.clamp(ids[0], -1.0, 1.0),
    );
}

#[test]
fn grad_reductions_and_concat() {
    check_op("sum", 17, 21, |r| vec![mat(r, 2, 3, -2.0, 2.0)], |t, ids| t.sum(ids[0]));
    check_op("mean", 17, 22, |r| vec![mat(r, 2, 3, -2.0, 2.0)], |t, ids| t.mean(ids[0]));
    check_op("sum_rows", 17, 23, |r| vec![mat(r, 3, 4, -2.0, 2.0)], |t, ids| t.sum_rows(ids[0]));
    check_op(
        "concat_rows",
        17,
        24,
        |r| vec![mat(r, 2, 3, -2.0, 2.0), mat(r, 1, 3, -2.0, 2.0)],
        |t, ids| t.concat_rows(ids),
    );
}

#[test]
fn grad_evidential_ce_at_worked_point() {
    // L_ECE at alpha = [2,1], y = [1,0] against the finite-difference oracle
    let alpha = vec![2.0, 1.0];
    let eval = |a: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let an = tape.constant(Tensor::matrix(1, 2, a.to_vec()).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = evidential_ce_loss(&mut tape, an, y).unwrap();
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let an = tape.param(Tensor::matrix(1, 2, alpha.clone()).unwrap());
    let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let l = evidential_ce_loss(&mut tape, an, y).unwrap();
    let grads = tape.backward(l).unwrap();
    let fd = fd_gradient(&mut |a| eval(a), &alpha, FD_STEP);
    assert_grad_close(grads.wrt(an).values(), &fd, 1e-4, "L_ECE worked point");
}

#[test]
fn grad_mask_wrt_robustness_map() {
    // zero extractor makes the mapping-layer bias the robustness map itself,
    // so finite differences on that bias probe d mask / d rm with the noise
    // held fixed
    let d = 4;
    let mut rng = rng::rng_from(77);
    for rep in 0..10 {
        let rm: Vec<f64> = rng::uniform_vec(&mut rng, d, -2.0, 2.0);
        let noise = MaskNoise::sample(&mut rng, 1, d);
        let w: Vec<f64> = rng::uniform_vec(&mut rng, d, -1.0, 1.0);
        let x_in = rng::uniform_vec(&mut rng, d, 0.0, 1.0);

        let eval = |bias: &[f64]| -> f64 {
            let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[d], 2);
            set.views[0].robustness_map.layers[0].bias = Tensor::vector(bias.to_vec());
            let mut tape = Tape::new();
            let binding = bind_on_tape(&mut tape, &set, BindMode::Frozen);
            let x = tape.constant(Tensor::matrix(1, d, x_in.clone()).unwrap());
            let bundle = build_mask(
                &mut tape,
                &binding.views[0].evidence_pretrain,
                &binding.views[0].robustness_map,
                x,
                1.0,
                noise.clone(),
            )
            .unwrap();
            let wn = tape.constant(Tensor::matrix(1, d, w.clone()).unwrap());
            let p = tape.mul(bundle.mask, wn);
            let l = tape.sum(p);
            tape.value(l).item().unwrap()
        };

        let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[d], 2);
        set.views[0].robustness_map.layers[0].bias = Tensor::vector(rm.clone());
        let mut tape = Tape::new();
        let binding = bind_on_tape(&mut tape, &set, BindMode::Trainable);
        let bias_node = binding
            .trainable
            .iter()
            .find(|(k, _)| k.name() == "robustness_map.0.0.bias")
            .unwrap()
            .1;
        let x = tape.constant(Tensor::matrix(1, d, x_in.clone()).unwrap());
        let bundle = build_mask(
            &mut tape,
            &binding.views[0].evidence_pretrain,
            &binding.views[0].robustness_map,
            x,
            1.0,
            noise.clone(),
        )
        .unwrap();
        let wn = tape.constant(Tensor::matrix(1, d, w.clone()).unwrap());
        let p = tape.mul(bundle.mask, wn);
        let l = tape.sum(p);
        let grads = tape.backward(l).unwrap();
        let fd = fd_gradient(&mut |b| eval(b), &rm, FD_STEP);
        assert_grad_close(grads.wrt(bias_node).values(), &fd, 1e-4, &format!("mask rep {rep}"));
    }
}

#[test]
fn grad_recalibration_loss_wrt_recalibration_weights() {
    // L_FRL through f_EC(f_FC(h_a)) against finite differences on the first
    // recalibration layer's weights
    let d = 3;
    let k = 2;
    let mut rng = rng::rng_from(88);
    let mut set: ViewNetworkSet<f64> = ViewNetworkSet::new(&[d], k);
    set.randomize_heads(123);
    let h_a = rng::uniform_vec(&mut rng, d, 0.0, 1.0);
    let y_row = vec![1.0, 0.0];

    let loss_for = |set: &ViewNetworkSet<f64>, trainable: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let mode = if trainable { BindMode::Trainable } else { BindMode::Frozen };
        let binding = bind_on_tape(&mut tape, set, mode);
        let x = tape.constant(Tensor::matrix(1, d, h_a.clone()).unwrap());
        let h_cr = evimix::disentangle::recalibrate(&mut tape, &binding.views[0].recalibrate, x);
        let p = classifier_probs_forward(&mut tape, &binding.views[0].train_classifier, h_cr);
        let y = tape.constant(Tensor::matrix(1, k, y_row.clone()).unwrap());
        let l = evimix::disentangle::recalibration_loss(&mut tape, &[p], y).unwrap();
        let value = tape.value(l).item().unwrap();
        if trainable {
            let grads = tape.backward(l).unwrap();
            let node = binding
                .trainable
                .iter()
                .find(|(key, _)| key.name() == "recalibrate.0.0.weight")
                .unwrap()
                .1;
            (value, Some(grads.wrt(node).values().to_vec()))
        } else {
            (value, None)
        }
    };

    let (_, analytic) = loss_for(&set, true);
    let base = set.views[0].recalibrate.layers[0].weight.values().to_vec();
    let mut f = |w: &[f64]| {
        let mut probe = set.clone();
        probe.views[0].recalibrate.layers[0].weight = Tensor::matrix(d, d, w.to_vec()).unwrap();
        loss_for(&probe, false).0
    };
    let fd = fd_gradient(&mut f, &base, FD_STEP);
    assert_grad_close(&analytic.unwrap(), &fd, 1e-4, "L_FRL wrt f_FC weights");
}
