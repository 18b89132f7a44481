//! Finite-difference checker for losses over parameters and inputs.

use dsrlab::autograd::gradcheck::{numeric_gradient, relative_error};
use dsrlab::autograd::{Graph, Var};
use dsrlab::nn::{Bound, ParamStore};
use dsrlab::{Result, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rand_tensor;

pub const STEP: f64 = 1e-6;

/// Worst relative error of `d(probe · f)/d(everything)`, taken per tensor.
/// A non-scalar `f` is contracted with a fixed random probe.
pub fn check_all(store: &ParamStore<f64>, inputs: &[Tensor64], f: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>) -> f64 {
    let build = |store: &ParamStore<f64>, xs: &[Tensor64], probe: Option<&Tensor64>| {
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g, true);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = f(&mut g, &p, &vars).expect("forward");
        let l = match probe {
            Some(pr) => {
                let c = g.constant(pr.clone());
                let m = g.mul(out, c).expect("probe shape");
                g.sum(m)
            }
            None => out,
        };
        (g, p, vars, l)
    };
    let (g0, _, _, out0) = build(store, inputs, None);
    let probe = (g0.shape(out0).iter().product::<usize>() != 1).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rand_tensor(&mut rng, g0.shape(out0))
    });
    drop(g0);
    let loss = |store: &ParamStore<f64>, xs: &[Tensor64]| {
        let (g, _, _, l) = build(store, xs, probe.as_ref());
        g.scalar_value(l)
    };
    let (g, p, vars, l) = build(store, inputs, probe.as_ref());
    let grads = g.backward(l);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor64::zeros(x.shape()));
        let numeric = numeric_gradient(x, STEP, |t| {
            let mut xs = inputs.to_vec();
            xs[k] = t.clone();
            loss(store, &xs)
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    let pg = p.grads(&g, &grads);
    for (id, analytic) in store.ids().zip(pg) {
        let numeric = numeric_gradient(store.get(id), STEP, |t| {
            let mut s = store.clone();
            *s.get_mut(id) = t.clone();
            loss(&s, inputs)
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    worst
}
