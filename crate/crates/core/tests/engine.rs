mod common;

use contrastcam::engine::gradcheck::{gradcheck_model, DEFAULT_EPS};
use contrastcam::engine::{backward_between, backward_to_layer, forward, forward_from, predict, Prediction};
use contrastcam::model::{load_model, GraphBuilder, Task};
use contrastcam::toy::{rng, uniform};
use contrastcam::{Error, Tensor};

use common::{fixture, node_zoo, t};

fn fixture_model(stem: &str) -> contrastcam::model::ModelGraph {
    let m = std::fs::read(fixture(&format!("{stem}.json"))).unwrap();
    let b = std::fs::read(fixture(&format!("{stem}.bin"))).unwrap();
    load_model(&m, &b).unwrap()
}

fn relu_only() -> contrastcam::model::ModelGraph {
    GraphBuilder::new("relu", Task::Regression, [1, 1, 4])
        .output_range(-10.0, 10.0)
        .relu("act", "input")
        .flatten("flat", "act")
        .linear("sum", "flat", t(&[1, 4], &[1.0; 4]), None)
        .target_layer("act")
        .build()
        .unwrap()
}

#[test]
fn relu_forward_and_open_gates() {
    let g = relu_only();
    let x = t(&[1, 1, 1, 4], &[-1.0, 0.0, 2.0, 3.5]);
    let trace = forward(&g, &x).unwrap();
    assert_eq!(trace.activation("act").unwrap().data(), &[0.0, 0.0, 2.0, 3.5]);
    assert_eq!(predict(&trace), Prediction::Value(5.5));
    let seed = t(&[1, 1], &[1.0]);
    let grad = backward_to_layer(&trace, &seed, "input").unwrap();
    // The gate at exactly zero is closed.
    assert_eq!(grad.data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn forward_is_deterministic() {
    let g = node_zoo(2);
    let x = uniform(&mut rng(8), &[1, 3, 8, 8], 1.0);
    let a = forward(&g, &x).unwrap();
    let b = forward(&g, &x).unwrap();
    for (va, vb) in a.values().iter().zip(b.values()) {
        assert_eq!(va, vb);
    }
}

#[test]
fn forward_from_a_slot_reproduces_the_trace() {
    let g = node_zoo(1);
    let x = uniform(&mut rng(3), &[1, 3, 8, 8], 1.0);
    let full = forward(&g, &x).unwrap();
    let slot = g.target_slot();
    let again = forward_from(&full, slot, full.value(slot).clone()).unwrap();
    assert_eq!(again.output(), full.output());
}

#[test]
fn softmax_output_predicts_argmax_with_probability() {
    let g = fixture_model("toy_cnn");
    let x = uniform(&mut rng(6), &[1, 3, 8, 8], 1.0);
    let trace = forward(&g, &x).unwrap();
    let probs = trace.output().data();
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    assert!((sum - 1.0).abs() < 1e-6);
    let Prediction::Class { index, score } = predict(&trace) else {
        panic!("classifier")
    };
    let best = probs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!(score, best);
    assert_eq!(probs[index], best);
    // The logits give the same ranking.
    let logits = trace.logits().data();
    assert!(logits.iter().all(|&l| l <= logits[index]));
}

#[test]
fn prediction_ties_pick_the_lowest_index() {
    let g = GraphBuilder::new("tie", Task::Classification, [1, 1, 1])
        .class_labels(["a", "b", "c"])
        .identity("feat", "input")
        .flatten("flat", "feat")
        .linear("fc", "flat", t(&[3, 1], &[0.0, 1.0, 1.0]), None)
        .target_layer("feat")
        .build()
        .unwrap();
    let trace = forward(&g, &t(&[1, 1, 1, 1], &[2.0])).unwrap();
    assert_eq!(predict(&trace).class_index(), Some(1));
}

#[test]
fn backward_is_linear_in_the_seed() {
    let g = node_zoo(4);
    let x = uniform(&mut rng(11), &[1, 3, 8, 8], 1.0);
    let trace = forward(&g, &x).unwrap();
    let from = g.logits_slot();
    let to = g.target_slot();
    let s1 = t(&[1, 3], &[0.3, -1.2, 0.7]);
    let s2 = t(&[1, 3], &[-0.5, 0.4, 2.0]);
    let (a, b) = (1.5f32, -0.75f32);
    let mixed: Vec<f32> = s1.data().iter().zip(s2.data()).map(|(x, y)| a * x + b * y).collect();
    let g1 = backward_between(&trace, from, &s1, to).unwrap();
    let g2 = backward_between(&trace, from, &s2, to).unwrap();
    let gm = backward_between(&trace, from, &t(&[1, 3], &mixed), to).unwrap();
    for ((x, y), z) in g1.data().iter().zip(g2.data()).zip(gm.data()) {
        let expect = a as f64 * *x as f64 + b as f64 * *y as f64;
        assert!(
            (expect - *z as f64).abs() <= 1e-5 * (1.0 + expect.abs()),
            "{expect} vs {z}"
        );
    }
}

#[test]
fn gradient_at_the_seed_slot_is_the_seed() {
    let g = node_zoo(0);
    let x = uniform(&mut rng(5), &[1, 3, 8, 8], 1.0);
    let trace = forward(&g, &x).unwrap();
    let seed = t(&[1, 3], &[0.25, -1.0, 4.0]);
    let logits = g.logits_slot();
    assert_eq!(backward_between(&trace, logits, &seed, logits).unwrap(), seed);
    // Identity passes gradients through untouched.
    let ident = g.slot_of("ident").unwrap();
    let below = backward_between(&trace, logits, &seed, ident).unwrap();
    let sum = backward_between(&trace, logits, &seed, g.slot_of("sum").unwrap()).unwrap();
    assert_eq!(below, sum);
}

#[test]
fn layers_off_the_path_get_zero_gradient() {
    let g = node_zoo(3);
    let x = uniform(&mut rng(1), &[1, 3, 8, 8], 1.0);
    let trace = forward(&g, &x).unwrap();
    let seed = Tensor::filled(g.slot_shape(g.target_slot()).dims().to_vec(), 1.0).unwrap();
    let later = g.slot_of("fc").unwrap();
    let grad = backward_between(&trace, g.target_slot(), &seed, later).unwrap();
    assert!(grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unknown_layers_and_bad_seeds_are_errors() {
    let g = fixture_model("toy_cnn");
    let x = uniform(&mut rng(2), &[1, 3, 8, 8], 1.0);
    let trace = forward(&g, &x).unwrap();
    let seed = t(&[1, 3], &[1.0, 0.0, 0.0]);
    match backward_to_layer(&trace, &seed, "conv7") {
        Err(Error::Lookup(name)) => assert_eq!(name, "conv7"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        backward_to_layer(&trace, &t(&[1, 4], &[0.0; 4]), "conv2"),
        Err(Error::Shape(_))
    ));
    assert!(matches!(trace.activation("nope"), Err(Error::Lookup(_))));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let g = fixture_model("toy_cnn");
    let x = uniform(&mut rng(2), &[1, 3, 8, 9], 1.0);
    assert!(matches!(forward(&g, &x), Err(Error::Shape(_))));
}

#[test]
fn fixture_models_pass_the_gradient_check() {
    for stem in ["toy_cnn", "toy_iqa"] {
        let g = fixture_model(stem);
        let x = uniform(&mut rng(21), g.input_shape().dims(), 1.0);
        let report = gradcheck_model(&g, &x, &mut rng(22), DEFAULT_EPS).unwrap();
        assert!(report.passes(), "{stem}: {}", report.max_rel_error());
    }
}
