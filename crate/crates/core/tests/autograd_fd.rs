//! Per-op central finite-difference checks of the tape.

use cfekit::autograd::{Graph, NodeId};
use cfekit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Random values whose magnitude stays at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

/// Loss is `Σ r ⊙ y` for a fixed random `r`, so every output element matters.
fn weighted(build: &Build, inputs: &[Tensor<f64>], r: Option<&Tensor<f64>>) -> (f64, Tensor<f64>, Graph<f64>, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &ids);
    let out = g.value(y).clone();
    let loss = match r {
        Some(r) => out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    (loss, out, g, ids, y)
}

/// Largest mixed absolute/relative error over every input element.
fn check(build: &Build, inputs: Vec<Tensor<f64>>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, out, g, ids, y) = weighted(build, &inputs, None);
    let r = random(&mut rng, out.shape(), -1.0, 1.0);
    let grads = g.backward_from(vec![(y, r.clone())]).unwrap();
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.of(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut probe = inputs.clone();
            probe[k].data_mut()[i] += EPS;
            let up = weighted(build, &probe, Some(&r)).0;
            probe[k].data_mut()[i] -= 2.0 * EPS;
            let down = weighted(build, &probe, Some(&r)).0;
            let n = (up - down) / (2.0 * EPS);
            let a = analytic.data()[i];
            let err = (a - n).abs() / (n.abs() + 1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

const RTOL: f64 = 1e-3;

#[test]
fn conv2d_with_bias_padding_and_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (kh, kw, stride, pad) in [(3, 3, 1, (1, 1)), (1, 7, 1, (0, 3)), (7, 1, 1, (3, 0)), (3, 3, 2, (1, 1)), (1, 1, 1, (0, 0))] {
        let x = random(&mut rng, [2, 3, 7, 8], -1.0, 1.0);
        let w = random(&mut rng, [4, 3, kh, kw], -0.5, 0.5);
        let b = random(&mut rng, [1, 4, 1, 1], -0.5, 0.5);
        let build = move |g: &mut Graph<f64>, ids: &[NodeId]| g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap();
        let e = check(&build, vec![x, w, b], 2);
        assert!(e < RTOL, "{kh}x{kw} stride {stride}: {e:e}");
    }
}

#[test]
fn conv2d_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, [1, 2, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, [3, 2, 3, 3], -0.5, 0.5);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.conv2d(ids[0], ids[1], None, 1, (1, 1)).unwrap();
    let e = check(&build, vec![x, w], 4);
    assert!(e < RTOL, "{e:e}");
}

#[test]
fn batch_norm_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, [3, 4, 3, 3], -2.0, 2.0);
    let gamma = random(&mut rng, [1, 4, 1, 1], 0.5, 1.5);
    let beta = random(&mut rng, [1, 4, 1, 1], -0.5, 0.5);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap().0;
    let e = check(&build, vec![x, gamma, beta], 6);
    assert!(e < RTOL, "{e:e}");
}

#[test]
fn batch_norm_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, [2, 3, 4, 4], -2.0, 2.0);
    let gamma = random(&mut rng, [1, 3, 1, 1], 0.5, 1.5);
    let beta = random(&mut rng, [1, 3, 1, 1], -0.5, 0.5);
    let mean = vec![0.1, -0.3, 0.7];
    let var = vec![0.5, 1.2, 2.0];
    let build = move |g: &mut Graph<f64>, ids: &[NodeId]| g.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5).unwrap();
    let e = check(&build, vec![x, gamma, beta], 8);
    assert!(e < RTOL, "{e:e}");
}

#[test]
fn relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = away_from_zero(&mut rng, [2, 3, 4, 4], 0.05);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.relu(ids[0]);
    let e = check(&build, vec![x], 10);
    assert!(e < RTOL, "{e:e}");
}

#[test]
fn max_pool_with_distinct_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // a shuffled grid keeps every window's maximum strictly unique
    let n = 2 * 2 * 8 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new([2, 2, 8, 6], vals).unwrap();
    for (k, s) in [(2, 2), (3, 1), (3, 2)] {
        let build = move |g: &mut Graph<f64>, ids: &[NodeId]| g.max_pool(ids[0], k, s).unwrap();
        let e = check(&build, vec![x.clone()], 12);
        assert!(e < RTOL, "k{k} s{s}: {e:e}");
    }
}

#[test]
fn concat_upsample_add_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&mut rng, [2, 2, 4, 4], -1.0, 1.0);
    let b = random(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.concat(ids[0], ids[1]).unwrap();
    assert!(check(&build, vec![a.clone(), b.clone()], 14) < RTOL);

    let small = random(&mut rng, [1, 2, 3, 2], -1.0, 1.0);
    for (h, w) in [(6, 4), (9, 4), (3, 2)] {
        let build = move |g: &mut Graph<f64>, ids: &[NodeId]| g.upsample(ids[0], h, w).unwrap();
        assert!(check(&build, vec![small.clone()], 15) < RTOL, "{h}x{w}");
    }

    let c = random(&mut rng, [2, 2, 4, 4], -1.0, 1.0);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.add(ids[0], ids[1]).unwrap();
    assert!(check(&build, vec![a.clone(), c], 16) < RTOL);

    // the same node used twice accumulates both paths
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.add(ids[0], ids[0]).unwrap();
    assert!(check(&build, vec![a.clone()], 17) < RTOL);

    let build = |g: &mut Graph<f64>, ids: &[NodeId]| g.sum(ids[0]);
    assert!(check(&build, vec![a], 18) < RTOL);
}

/// conv → BN → relu → 1×7 conv → relu → 7×1 conv, every weight checked.
#[test]
fn three_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, [2, 2, 7, 7], -1.0, 1.0);
    let w1 = random(&mut rng, [4, 2, 3, 3], -0.5, 0.5);
    let b1 = random(&mut rng, [1, 4, 1, 1], -0.2, 0.2);
    let gamma = random(&mut rng, [1, 4, 1, 1], 0.5, 1.5);
    let beta = random(&mut rng, [1, 4, 1, 1], -0.3, 0.3);
    let w2 = random(&mut rng, [4, 4, 1, 7], -0.4, 0.4);
    let b2 = random(&mut rng, [1, 4, 1, 1], -0.2, 0.2);
    let w3 = random(&mut rng, [2, 4, 7, 1], -0.4, 0.4);
    let b3 = random(&mut rng, [1, 2, 1, 1], -0.2, 0.2);
    let params: usize = [&w1, &b1, &gamma, &beta, &w2, &b2, &w3, &b3].iter().map(|t| t.numel()).sum();
    assert!(params <= 500, "{params}");

    let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let c1 = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, (1, 1)).unwrap();
        let n1 = g.batch_norm_train(c1, ids[3], ids[4], 1e-5).unwrap().0;
        let r1 = g.relu(n1);
        let c2 = g.conv2d(r1, ids[5], Some(ids[6]), 1, (0, 3)).unwrap();
        let r2 = g.relu(c2);
        g.conv2d(r2, ids[7], Some(ids[8]), 1, (3, 0)).unwrap()
    };

    // ReLU pre-activations must sit clear of the kink relative to eps
    let mut g = Graph::new();
    let inputs = vec![x, w1, b1, gamma, beta, w2, b2, w3, b3];
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let c1 = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, (1, 1)).unwrap();
    let n1 = g.batch_norm_train(c1, ids[3], ids[4], 1e-5).unwrap().0;
    let r1 = g.relu(n1);
    let c2 = g.conv2d(r1, ids[5], Some(ids[6]), 1, (0, 3)).unwrap();
    let closest = g.value(n1).data().iter().chain(g.value(c2).data()).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    assert!(closest > 1e-4, "pre-activation {closest:e} too close to zero");

    let e = check(&build, inputs, 22);
    assert!(e < 1e-4, "{e:e}");
}
