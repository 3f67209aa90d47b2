//! Central finite-difference checks of every differentiable op, in f64.

use aftermath_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<'_, f64>) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Returns max relative error between analytic and numeric gradients.
fn check(store: &ParamStore<f64>, build: &Build) -> f64 {
    let g0 = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let analytic = g0.get(id).map(|t| t.data().to_vec());
        for j in 0..store.get(id).len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += delta;
                let mut g = Graph::new(&s);
                let loss = build(&mut g);
                g.scalar(loss)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            let err = (a - numeric).abs() / (1e-3 + a.abs().max(numeric.abs()));
            worst = worst.max(err);
        }
    }
    worst
}

/// Sum of elementwise product with a fixed random tensor: a scalar probe
/// that exercises every output element.
fn probe(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(g.shape(out), &mut rng);
    let r = g.input(r);
    let m = g.mul(out, r).unwrap();
    g.sum(m)
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, random(shape, &mut rng));
    }
    s
}

const TOL: f64 = 1e-5;

#[test]
fn linear_and_matmul() {
    let s = store_with(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])], 1);
    let e = check(&s, &|g| {
        let (x, w, b) = (g.param_named("x").unwrap(), g.param_named("w").unwrap(), g.param_named("b").unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        probe(g, y, 9)
    });
    assert!(e < TOL, "{e}");

    let s = store_with(&[("a", &[3, 4]), ("b", &[4, 2])], 2);
    let e = check(&s, &|g| {
        let (a, b) = (g.param_named("a").unwrap(), g.param_named("b").unwrap());
        let y = g.matmul(a, b).unwrap();
        let y = g.transpose(y).unwrap();
        probe(g, y, 3)
    });
    assert!(e < TOL, "{e}");

    let s = store_with(&[("x", &[2, 3, 4, 5])], 12);
    let e = check(&s, &|g| {
        let x = g.param_named("x").unwrap();
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 5, 4]);
        probe(g, y, 13)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn elementwise_ops() {
    let s = store_with(&[("a", &[2, 6]), ("b", &[2, 6]), ("c", &[6])], 3);
    let e = check(&s, &|g| {
        let (a, b, c) = (g.param_named("a").unwrap(), g.param_named("b").unwrap(), g.param_named("c").unwrap());
        let x = g.add(a, b).unwrap();
        let y = g.sub(x, b).unwrap();
        let y = g.mul(y, b).unwrap();
        let y = g.add_broadcast(y, c).unwrap();
        let y = g.gelu(y);
        let z = g.relu(x);
        let z = g.scale(z, 0.7);
        let y = g.add(y, z).unwrap();
        probe(g, y, 4)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn layer_norm_grad() {
    let s = store_with(&[("x", &[3, 8]), ("g", &[8]), ("b", &[8])], 4);
    let e = check(&s, &|g| {
        let (x, gm, b) = (g.param_named("x").unwrap(), g.param_named("g").unwrap(), g.param_named("b").unwrap());
        let y = g.layer_norm(x, gm, b).unwrap();
        probe(g, y, 5)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn attention_grad() {
    let s = store_with(&[("qkv", &[2, 5, 12])], 5);
    let e = check(&s, &|g| {
        let x = g.param_named("qkv").unwrap();
        let y = g.attention(x, 2).unwrap();
        probe(g, y, 6)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn conv_and_upsample_grad() {
    let s = store_with(&[("x", &[2, 2, 6, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])], 6);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let e = check(&s, &move |g| {
            let (x, w, b) = (g.param_named("x").unwrap(), g.param_named("w").unwrap(), g.param_named("b").unwrap());
            let y = g.conv2d(x, w, b, stride, pad).unwrap();
            let y = g.upsample2x(y).unwrap();
            let y = g.concat(y, y, 1).unwrap();
            let y = g.narrow(y, 1, 0, 4).unwrap();
            let y = g.pixel_shuffle(y).unwrap();
            probe(g, y, 7)
        });
        assert!(e < TOL, "stride {stride} pad {pad}: {e}");
    }
}

#[test]
fn shape_ops_grad() {
    let s = store_with(&[("a", &[2, 3, 4]), ("b", &[2, 2, 4]), ("t", &[5, 4])], 7);
    let e = check(&s, &|g| {
        let (a, b, t) = (g.param_named("a").unwrap(), g.param_named("b").unwrap(), g.param_named("t").unwrap());
        let c = g.concat(a, b, 1).unwrap();
        let n = g.narrow(c, 1, 1, 3).unwrap();
        let r = g.reshape(n, [2, 12]).unwrap();
        let r = g.reshape(r, [2, 3, 4]).unwrap();
        let p = g.mean_pool(r).unwrap();
        let e = g.embedding(t, &[0, 3, 3, 1]).unwrap();
        let e = g.reshape(e, [2, 2, 4]).unwrap();
        let q = g.weighted_pool(e, vec![0.25, 0.5, 1.0, 0.0]).unwrap();
        let y = g.concat(p, q, 1).unwrap();
        let y = g.l2_normalize(y);
        probe(g, y, 8)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn loss_grads() {
    let s = store_with(&[("z", &[4, 3]), ("y", &[4, 3])], 8);
    let e = check(&s, &|g| {
        let (z, y) = (g.param_named("z").unwrap(), g.param_named("y").unwrap());
        let a = g.mse(z, y).unwrap();
        let b = g.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = g.cross_entropy(y, &[0, 2, 1, 2], &[1.0, 0.0, 2.0, 0.5]).unwrap();
        let m = g.mean(z);
        let x = g.add(a, b).unwrap();
        let x = g.add(x, c).unwrap();
        g.add(x, m).unwrap()
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn pixel_shuffle_layout() {
    let s = store_with(&[], 0);
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::new([1, 4, 1, 2], (0..8).map(f64::from).collect()).unwrap());
    let y = g.pixel_shuffle(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 4]);
    assert_eq!(g.value(y), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
}

#[test]
fn straight_through_passes_identity() {
    let s = store_with(&[("x", &[3])], 9);
    let mut g = Graph::new(&s);
    let x = g.param_named("x").unwrap();
    let y = g.straight_through(x, vec![5.0, 6.0, 7.0]).unwrap();
    assert_eq!(g.value(y), &[5.0, 6.0, 7.0]);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(s.id("x").unwrap()).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let s = store_with(&[("w", &[3, 2]), ("x", &[1, 3])], 10);
    let mut g = Graph::new(&s).freeze(|n| n == "w");
    let (x, w) = (g.param_named("x").unwrap(), g.param_named("w").unwrap());
    let y = g.linear(x, w, None).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(s.id("w").unwrap()).is_none());
    assert!(grads.get(s.id("x").unwrap()).is_some());
}
