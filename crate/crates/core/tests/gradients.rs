//! Analytic gradients against central finite differences.

mod common;

use common::{max_relative_error, numeric_grad};
use progcodec::autodiff::{Graph, ParamSet};
use progcodec::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Checks d(mean(op(x) ⊙ r))/dx for a random probe `r`.
fn check_unary(shape: Shape, seed: u64, op: impl Fn(&mut Graph, progcodec::autodiff::NodeId) -> progcodec::autodiff::NodeId) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let probe_shape = {
        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let y = op(&mut g, n);
        g.value(y).shape()
    };
    let r = Tensor::uniform(probe_shape, -1.0, 1.0, &mut rng);
    let loss_of = |xv: &Tensor, keep: bool| {
        let mut g = Graph::new();
        let n = if keep { g.variable(xv.clone()) } else { g.constant(xv.clone()) };
        let y = op(&mut g, n);
        let rn = g.constant(r.clone());
        let p = g.mul(y, rn).unwrap();
        let l = g.mean(p);
        (g, n, l)
    };
    let (mut g, n, l) = loss_of(&x, true);
    g.backward(l, &mut ParamSet::new()).unwrap();
    let analytic = g.grad(n).unwrap().to_vec();
    let numeric = numeric_grad(x.data(), |v| {
        let t = Tensor::new(shape, v.to_vec()).unwrap();
        let (g, _, l) = loss_of(&t, false);
        g.value(l).data()[0]
    });
    max_relative_error(&analytic, &numeric)
}

#[test]
fn relu_sigmoid_upsample_affine() {
    let s = Shape::new(2, 2, 3, 3);
    assert!(check_unary(s, 1, |g, x| g.relu(x)) < TOL);
    assert!(check_unary(s, 2, |g, x| g.sigmoid(x)) < TOL);
    assert!(check_unary(s, 3, |g, x| g.upsample_nearest_2x(x)) < TOL);
    assert!(check_unary(s, 4, |g, x| g.affine(x, -1.7, 0.3)) < TOL);
}

#[test]
fn add_and_mul_both_sides() {
    let s = Shape::new(1, 2, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let other = Tensor::uniform(s, -1.0, 1.0, &mut rng);
    let o1 = other.clone();
    assert!(check_unary(s, 5, move |g, x| {
        let c = g.constant(o1.clone());
        g.add(x, c).unwrap()
    }) < TOL);
    let o2 = other.clone();
    assert!(check_unary(s, 6, move |g, x| {
        let c = g.constant(o2.clone());
        g.mul(c, x).unwrap()
    }) < TOL);
    // x·x exercises the path where both operands are the same node.
    assert!(check_unary(s, 7, |g, x| g.mul(x, x).unwrap()) < TOL);
}

fn conv_check(stride: usize, padding: usize, kernel: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Shape::new(1, 2, 6, 6);
    let ws = Shape::new(3, 2, kernel, kernel);
    let bs = Shape::new(3, 1, 1, 1);
    let x = Tensor::uniform(xs, -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(ws, -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(bs, -1.0, 1.0, &mut rng);
    let out_shape = {
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xn, wn, bn, stride, padding).unwrap();
        g.value(y).shape()
    };
    let r = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.variable(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
        let y = g.conv2d(xn, wn, bn, stride, padding).unwrap();
        let rn = g.constant(r.clone());
        let p = g.mul(y, rn).unwrap();
        let l = g.mean(p);
        (g, [xn, wn, bn], l)
    };
    let (mut g, ids, l) = loss(&x, &w, &b);
    g.backward(l, &mut ParamSet::new()).unwrap();
    let scalar = |g: &Graph, l| g.value(l).data()[0];
    let nx = numeric_grad(x.data(), |v| {
        let (g, _, l) = loss(&Tensor::new(xs, v.to_vec()).unwrap(), &w, &b);
        scalar(&g, l)
    });
    let nw = numeric_grad(w.data(), |v| {
        let (g, _, l) = loss(&x, &Tensor::new(ws, v.to_vec()).unwrap(), &b);
        scalar(&g, l)
    });
    let nb = numeric_grad(b.data(), |v| {
        let (g, _, l) = loss(&x, &w, &Tensor::new(bs, v.to_vec()).unwrap());
        scalar(&g, l)
    });
    (
        max_relative_error(g.grad(ids[0]).unwrap(), &nx),
        max_relative_error(g.grad(ids[1]).unwrap(), &nw),
        max_relative_error(g.grad(ids[2]).unwrap(), &nb),
    )
}

#[test]
fn conv2d_input_weight_bias() {
    for (i, &(stride, pad, k)) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)].iter().enumerate() {
        let (ex, ew, eb) = conv_check(stride, pad, k, 20 + i as u64);
        assert!(ex < TOL && ew < TOL && eb < TOL, "stride {stride} pad {pad} k {k}: {ex} {ew} {eb}");
    }
}

#[test]
fn conv_relu_mean_composite_param_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = ParamSet::new();
    let wid = params.add("w", Tensor::uniform(Shape::new(4, 2, 3, 3), -0.5, 0.5, &mut rng)).unwrap();
    let bid = params.add("b", Tensor::uniform(Shape::new(4, 1, 1, 1), -0.1, 0.1, &mut rng)).unwrap();
    let x = Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
    let run = |params: &ParamSet, grads: Option<&mut ParamSet>| {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w = g.param(params, wid);
        let b = g.param(params, bid);
        let y = g.conv2d(xn, w, b, 1, 1).unwrap();
        let r = g.relu(y);
        let l = g.mean(r);
        let v = g.value(l).data()[0];
        if let Some(ps) = grads {
            g.backward(l, ps).unwrap();
        }
        v
    };
    let mut with_grads = params.clone();
    run(&params, Some(&mut with_grads));
    for id in [wid, bid] {
        let base = params.tensor(id).clone();
        let numeric = numeric_grad(base.data(), |v| {
            let mut p = params.clone();
            p.get_mut(id).tensor = Tensor::new(base.shape(), v.to_vec()).unwrap();
            run(&p, None)
        });
        let err = max_relative_error(with_grads.tensor(id).grad().unwrap(), &numeric);
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, &mut rng);
    let w = Tensor::uniform(Shape::new(5, 3, 3, 3), -1.0, 1.0, &mut rng);
    let grads = || {
        let mut g = Graph::new();
        let xn = g.variable(x.clone());
        let wn = g.variable(w.clone());
        let bn = g.constant(Tensor::zeros(Shape::new(5, 1, 1, 1)));
        let y = g.conv2d(xn, wn, bn, 2, 1).unwrap();
        let s = g.sigmoid(y);
        let l = g.mean(s);
        g.backward(l, &mut ParamSet::new()).unwrap();
        (g.grad(xn).unwrap().to_vec(), g.grad(wn).unwrap().to_vec())
    };
    let (a, b) = (grads(), grads());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn ms_ssim_gradient_three_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let shape = Shape::new(1, 1, 48, 48);
    let a = Tensor::uniform(shape, 0.2, 0.8, &mut rng);
    let noise = Tensor::uniform(shape, -0.15, 0.15, &mut rng);
    let b = Tensor::new(shape, a.data().iter().zip(noise.data()).map(|(x, n)| (x + n).clamp(0.0, 1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let an = g.variable(a.clone());
    let bn = g.variable(b.clone());
    let l = g.ms_ssim(an, bn, 3).unwrap();
    g.backward(l, &mut ParamSet::new()).unwrap();
    let value = |x: &Tensor, y: &Tensor| progcodec::msssim::ms_ssim(x, y, 3).unwrap();
    let na = numeric_grad(a.data(), |v| value(&Tensor::new(shape, v.to_vec()).unwrap(), &b));
    let nb = numeric_grad(b.data(), |v| value(&a, &Tensor::new(shape, v.to_vec()).unwrap()));
    let ea = max_relative_error(g.grad(an).unwrap(), &na);
    let eb = max_relative_error(g.grad(bn).unwrap(), &nb);
    assert!(ea < 1e-3 && eb < 1e-3, "{ea} {eb}");
}
