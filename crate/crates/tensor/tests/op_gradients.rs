//! Every tape op against central finite differences in f64.

use radiogan_tensor::check::{check_coordinates, relative_error};
use radiogan_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds `sum(op(inputs) * probe)` and checks d/d(input) for every input.
fn check_op(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let probe = random(&probe_shape, &mut rng);
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        let mut grads = g.backward(loss).unwrap();
        let value = g.value(loss).data()[0];
        let gs = vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(&inputs);
    for k in 0..inputs.len() {
        let mut flat = inputs[k].data().to_vec();
        let coords: Vec<usize> = (0..flat.len()).collect();
        let shape = inputs[k].shape().to_vec();
        let res = check_coordinates("op", &mut flat, analytic[k].data(), &coords, H, 1e-6, |x| {
            let mut probe_inputs = inputs.clone();
            probe_inputs[k] = Tensor::new(&shape, x.to_vec()).unwrap();
            eval(&probe_inputs).0
        });
        assert!(
            res.max_relative_error < 1e-5,
            "input {k}: rel err {} at {} (analytic {}, numeric {})",
            res.max_relative_error,
            res.worst_index,
            res.worst_analytic,
            res.worst_numeric
        );
    }
}

#[test]
fn conv2d_stride_one_and_two() {
    for stride in [1, 2] {
        check_op(&[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], 1 + stride as u64, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap()
        });
    }
}

#[test]
fn linear() {
    check_op(&[&[3, 5], &[4, 5], &[4]], 3, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn batch_norm_train_and_frozen() {
    check_op(&[&[3, 2, 2, 3], &[2], &[2]], 4, |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0);
    check_op(&[&[2, 2, 3, 3], &[2], &[2]], 5, |g, v| {
        g.batch_norm_frozen(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap()
    });
}

#[test]
fn pointwise() {
    check_op(&[&[2, 3, 2, 2]], 6, |g, v| g.sigmoid(v[0]));
    check_op(&[&[2, 3, 2, 2]], 7, |g, v| g.tanh(v[0]));
    check_op(&[&[2, 3, 2, 2]], 8, |g, v| g.leaky_relu(v[0], 0.2));
    check_op(&[&[2, 3]], 9, |g, v| g.one_minus(v[0]));
    check_op(&[&[2, 3]], 10, |g, v| g.scale(v[0], -1.7));
}

#[test]
fn binary() {
    check_op(&[&[2, 3], &[2, 3]], 11, |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3]], 12, |g, v| g.sub(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3]], 13, |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3], &[2, 3]], 14, |g, v| g.add_all(v).unwrap());
}

#[test]
fn channel_plumbing() {
    check_op(&[&[2, 5, 2, 2]], 15, |g, v| g.narrow(v[0], 1, 3).unwrap());
    check_op(&[&[2, 2, 3, 3], &[2, 1, 3, 3]], 16, |g, v| g.concat(v).unwrap());
    check_op(&[&[2, 3], &[2, 4]], 17, |g, v| g.concat(v).unwrap());
    check_op(&[&[2, 3]], 18, |g, v| g.broadcast_spatial(v[0], 2, 3).unwrap());
    check_op(&[&[2, 12]], 19, |g, v| g.reshape(v[0], &[2, 3, 2, 2]).unwrap());
    check_op(&[&[2, 2, 3, 2]], 20, |g, v| g.upsample2x(v[0]).unwrap());
    check_op(&[&[2, 3, 2, 2]], 21, |g, v| g.global_avg_pool(v[0]).unwrap());
}

#[test]
fn instance_standardize_and_affine() {
    check_op(&[&[2, 3, 3, 3]], 22, |g, v| g.instance_standardize(v[0], 1e-5).unwrap());
    check_op(&[&[2, 3, 2, 2], &[2, 3], &[2, 3]], 23, |g, v| g.channel_affine(v[0], v[1], v[2]).unwrap());
}

#[test]
fn reductions() {
    check_op(&[&[2, 3]], 24, |g, v| g.mean_sq_diff(v[0], 1.0).unwrap());
    check_op(&[&[6]], 25, |g, v| g.select(v[0], &[0, 3, 3, 5]).unwrap());
    let mask = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
    check_op(&[&[2, 3], &[2, 3]], 26, move |g, v| g.masked_l1(v[0], v[1], &mask).unwrap());
}

#[test]
fn frozen_inputs_get_no_gradient_but_pass_it_through() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1, 2], vec![0.5, -0.25]).unwrap());
    let w = g.constant(Tensor::new(&[1, 2], vec![2.0, 4.0]).unwrap());
    let y = g.linear(x, w, None).unwrap();
    let loss = g.sum(y);
    let mut grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.take(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_channel_standardizes_to_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 3.0));
    let y = g.instance_standardize(x, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| v.is_finite()));
    assert!(relative_error(0.0, 0.0, 1e-9) == 0.0);
}
