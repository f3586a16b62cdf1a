// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use dstg_core::numerics::gradcheck::check_coordinates;
use dstg_core::numerics::{cross_entropy, rmsnorm, softmax_rows, Graph, Tensor, Var};
use dstg_core::positional::rope_tables;
use dstg_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Scalarises the op output with fixed random weights, then checks every
/// coordinate of every input against central differences.
fn check_op(inputs: Vec<Tensor<f64>>, build: &Build) {
    let forward = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).numel();
        let w = Arc::new(randn(&[n], 99).into_data());
        let weighted = g.mul_const(out, w)?;
        let loss = g.sum(weighted);
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = forward(&inputs).unwrap();
    let grads = g.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v).into_data();
        let mut values = inputs[k].data().to_vec();
        let coords: Vec<usize> = (0..values.len()).collect();
        let shape = inputs[k].shape().to_vec();
        let report = check_coordinates(&mut values, &analytic, &coords, |x| {
            let mut vals = inputs.clone();
            vals[k] = Tensor::new(shape.clone(), x.to_vec())?;
            let (g, _, l) = forward(&vals)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        assert!(report.passed(), "input {k}: {report:?}");
    }
}

#[test]
fn grad_matmul() {
    check_op(vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], &|g, v| g.matmul(v[0], v[1]));
    check_op(vec![randn(&[3, 4], 1), randn(&[5, 4], 2)], &|g, v| g.matmul_bt(v[0], v[1]));
    check_op(vec![randn(&[3, 4], 3)], &|g, v| g.transpose(v[0]));
}

#[test]
fn grad_elementwise() {
    check_op(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], &|g, v| g.add(v[0], v[1]));
    check_op(vec![randn(&[3, 4], 1), randn(&[4], 2)], &|g, v| g.add_row(v[0], v[1]));
    check_op(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], &|g, v| g.mul(v[0], v[1]));
    check_op(vec![randn(&[3, 4], 1)], &|g, v| g.mul_const(v[0], Arc::new(randn(&[12], 5).into_data())));
    check_op(vec![randn(&[3, 4], 1)], &|g, v| Ok(g.scale(v[0], -1.7)));
    check_op(vec![randn(&[3, 4], 1)], &|g, v| Ok(g.swish(v[0])));
}

#[test]
fn grad_normalisation_and_softmax() {
    check_op(vec![randn(&[3, 6], 1), randn(&[6], 2)], &|g, v| g.rmsnorm(v[0], v[1], 1e-6));
    check_op(vec![randn(&[4, 5], 3)], &|g, v| g.softmax_rows(v[0], None));
    let mask = [true, false, true, true, false];
    check_op(vec![randn(&[4, 5], 4)], &move |g, v| g.softmax_rows(v[0], Some(&mask)));
}

#[test]
fn grad_cross_entropy() {
    let labels = [Some(2), None, Some(0), Some(4)];
    check_op(vec![randn(&[4, 5], 1)], &move |g, v| g.cross_entropy(v[0], &labels));
}

#[test]
fn grad_indexing() {
    check_op(vec![randn(&[5, 3], 1)], &|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    check_op(vec![randn(&[3, 4], 2)], &|g, v| g.gather_elems(v[0], Arc::new(vec![0, 5, 5, 11, 3, 7]), vec![2, 3]));
    check_op(vec![randn(&[3, 6], 3)], &|g, v| g.slice_cols(v[0], 2, 3));
    check_op(vec![randn(&[3, 2], 4), randn(&[3, 4], 5)], &|g, v| g.concat_cols(&[v[0], v[1], v[0]]));
}

#[test]
fn grad_rope() {
    let (cos, sin) = rope_tables::<f64>(&[0, 3, 7], 4, 10_000.0).unwrap();
    let (cos, sin) = (Arc::new(cos), Arc::new(sin));
    check_op(vec![randn(&[3, 8], 1)], &move |g, v| g.rope(v[0], cos.clone(), sin.clone(), 4));
}

#[test]
fn gather_accumulates_into_gathered_rows_only() {
    let mut g = Graph::new();
    let t = g.leaf(randn(&[4, 2], 1).with_grad());
    let r = g.gather_rows(t, &[1, 1, 3]).unwrap();
    let s = g.sum(r);
    let grad = g.backward(s).unwrap().get_or_zeros(t);
    assert_eq!(grad.data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(randn(&[2, 2], 1).with_grad());
    let c = g.constant(randn(&[2, 2], 2));
    let m = g.mul(a, c).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(a).is_some());
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(randn(&[2, 3], 1));
    let b = g.leaf(randn(&[2, 3], 2));
    assert!(g.matmul(a, b).is_err());
    assert!(g.backward(a).is_err());
    assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(g.softmax_rows(a, Some(&[false, false, false])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(spread in 0.0f32..200.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0f32..1.0) * spread).collect();
        let p = softmax_rows(&Tensor::new(vec![4, 6], data).unwrap(), None).unwrap();
        prop_assert!(p.is_finite());
        for i in 0..4 {
            let s: f32 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rmsnorm_unit_gain_has_unit_rms(seed in 0u64..1000, scale in 1e-2f64..1e3) {
        let x: Vec<f64> = randn(&[16], seed).data().iter().map(|v| v * scale).collect();
        let y = rmsnorm(&x, &[1.0; 16], 1e-12).unwrap();
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        prop_assert!((rms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_softmax(seed in 0u64..1000, label in 0usize..7) {
        let logits = randn(&[1, 7], seed);
        let z = logits.data();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let ce = cross_entropy(&logits, &[Some(label)]).unwrap();
        prop_assert!((ce - (lse - z[label])).abs() < 1e-12);
        prop_assert!(ce >= 0.0);
    }
}
