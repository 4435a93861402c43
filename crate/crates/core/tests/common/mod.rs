#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrovq::nn::{Graph, Var};
use spectrovq::Tensor;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], eps: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Builds `f` on a tracked graph, backpropagates, and returns the worst
/// relative error against central differences over all inputs.
pub fn grad_check(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let numeric = numeric_grads(&eval, inputs, FD_EPS);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Reduces a tensor-valued node to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}
