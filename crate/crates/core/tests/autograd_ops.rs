//! Finite-difference checks for every tape op, in double precision.

use std::rc::Rc;

use dsrlab::autograd::gradcheck::{numeric_gradient, relative_error};
use dsrlab::autograd::patch::PatchGeom;
use dsrlab::autograd::{Graph, Unary, Var};
use dsrlab::resample::{Kernel, ResizePlan};
use dsrlab::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(sum(op(inputs) * probe))/d(inputs[k]) for every input.
fn check(inputs: &[Tensor64], op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor64], with_grad: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), with_grad)).collect();
        let out = op(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = eval(inputs, false);
    let probe = rand_tensor(&mut rng, g0.shape(out0));
    let loss_of = |xs: &[Tensor64]| {
        let (mut g, vars, out) = eval(xs, true);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p).unwrap();
        let l = g.sum(prod);
        (g, vars, l)
    };
    let (g, vars, l) = loss_of(inputs);
    let grads = g.backward(l);
    for k in 0..inputs.len() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor64::zeros(inputs[k].shape()));
        let numeric = numeric_gradient(&inputs[k], 1e-6, |x| {
            let mut xs = inputs.to_vec();
            xs[k] = x.clone();
            let (g, _, l) = loss_of(&xs);
            g.scalar_value(l)
        });
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "input {k}: relative error {err}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = rand_tensor(&mut rng, &[3, 6, 5]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
    }
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad, op) in &[(2, 1, 1), (1, 1, 0)] {
        let x = rand_tensor(&mut rng, &[3, 4, 3]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        check(&[x, w, b], |g, v| g.conv_t2d(v[0], v[1], Some(v[2]), stride, pad, op).unwrap());
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor64::zeros(&[3, 28, 20]));
    let w = g.constant(Tensor64::zeros(&[3, 5, 3, 3]));
    let y = g.conv_t2d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[5, 56, 40]);
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    let m = rand_tensor(&mut rng, &[1, 3, 4]);
    check(&[a.clone(), m], |g, v| g.mul_plane(v[0], v[1]).unwrap());
    check(&[a.clone()], |g, v| g.scale(v[0], -1.7));
    check(&[a.clone()], |g, v| g.sum(v[0]));
    check(&[a.clone()], |g, v| g.mean(v[0]));
    check(&[a.clone()], |g, v| g.rms(v[0]));
    for f in [
        Unary::Relu,
        Unary::LeakyRelu(0.2),
        Unary::Softplus,
        Unary::Sigmoid,
        Unary::Abs,
        Unary::Square,
        Unary::Neg,
        Unary::Clamp(-0.5, 0.5),
    ] {
        check(&[a.clone()], |g, v| g.unary(v[0], f));
    }
    let pos = a.map(|x| x.abs() + 0.5);
    check(&[pos.clone()], |g, v| g.unary(v[0], Unary::Log));
    check(&[pos], |g, v| g.unary(v[0], Unary::Sqrt));
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 4, 4]);
    let b = rand_tensor(&mut rng, &[3, 4, 4]);
    check(&[a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]]).unwrap());
    let c = rand_tensor(&mut rng, &[8, 3, 2]);
    check(&[c], |g, v| g.pixel_shuffle(v[0], 2).unwrap());
    check(&[a.clone()], |g, v| g.crop(v[0], 1, 2, 2, 2).unwrap());
    let plan = Rc::new(ResizePlan::new((4, 4), (9, 7), Kernel::Bicubic, true));
    check(&[a.clone()], |g, v| g.resize(v[0], plan.clone()).unwrap());
    check(&[a.clone()], |g, v| g.global_avg_pool(v[0]).unwrap());
    check(&[b.clone()], |g, v| g.channel_norm_pool(v[0], 1e-12).unwrap());
    let blocks = rand_tensor(&mut rng, &[2, 3, 3]);
    check(&[a.clone(), blocks], |g, v| {
        g.place_blocks(&[(v[0], 0, 0), (v[1], 2, 3)], 5, 6).unwrap()
    });
}

#[test]
fn vector_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Tensor64> = (0..3).map(|_| rand_tensor(&mut rng, &[1])).collect();
    check(&xs, |g, v| {
        let s = g.stack(v).unwrap();
        g.softmax(s)
    });
    check(&xs, |g, v| {
        let s = g.stack(v).unwrap();
        let sm = g.softmax(s);
        g.index(sm, 1).unwrap()
    });
}

#[test]
fn patch_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let geom = PatchGeom::new(3, 1).unwrap();
    let a = rand_tensor(&mut rng, &[2, 4, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 4]);
    let idx: Rc<Vec<usize>> = Rc::new((0..16).map(|i| (i * 7 + 3) % 16).collect());
    check(&[a.clone(), b.clone()], |g, v| g.patch_cosine(v[0], v[1], idx.clone(), geom, 1e-12).unwrap());
    let src = rand_tensor(&mut rng, &[2, 8, 8]);
    check(&[src], |g, v| g.gather_fold(v[0], idx.clone(), (8, 8), geom.scaled(2)).unwrap());
}
