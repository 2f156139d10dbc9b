//! Central finite-difference checks for every graph op and layer at 64-bit.

mod common;

use common::gradcases::{cases, max_error, TOL};
use rpmlab::autodiff::{Conv2d, Dense, Graph, Mode, ParamStore, Tensor};
use rpmlab::rng::RngStream;

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 0..100 {
        for mut case in cases(seed) {
            let err = max_error(&mut case.store, &case.build);
            assert!(err < TOL, "{} (seed {seed}): relative error {err:e}", case.name);
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, e)) => *e = e.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    for (name, err) in worst {
        println!("{name:40} max rel err {err:.2e}");
    }
}

#[test]
fn square_at_three_has_slope_six() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let xn = g.param(&store, x);
    let y = g.square(xn);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(x).unwrap().item(), 6.0);
}

#[test]
fn eval_dropout_gradient_equals_plain_gradient() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.3, -1.2]).unwrap()).unwrap();
    let run = |drop: bool| {
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let sq = g.square(xn);
        let y = if drop {
            g.dropout(sq, 0.5, Mode::Eval, &mut RngStream::new(1, 1)).unwrap()
        } else {
            sq
        };
        let l = g.sum(y);
        g.backward(l).unwrap().param(x).unwrap().clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn identity_dense_is_identity() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = RngStream::new(0, 0);
    let d = Dense::new(&mut store, "d", 3, 3, &mut rng).unwrap();
    let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    store.get_mut(d.weight).data_mut().copy_from_slice(&eye);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, 3], vec![0.5, -2.0, 7.0]).unwrap());
    let y = d.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0, 7.0]);
}

#[test]
fn relu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[2], vec![-1.5, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn full_sized_conv_halves_input() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = RngStream::new(0, 0);
    let conv = Conv2d::new(&mut store, "c", 3, 32, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
    let y = conv.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 32, 32]);
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("node 2"), "{err}");
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    assert!(g.backward(a).is_err());
}
