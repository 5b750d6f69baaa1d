//! Helpers shared by unit tests: seeded tensors and a central-difference
//! gradient checker that rebuilds the graph for every perturbation.

use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::SeedStream;
use crate::Result;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed.wrapping_mul(7919).wrapping_add(1));
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

/// Relative error with a small absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn assert_grad_matches<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_tensor(s, seed * 31 + i as u64))
        .collect();
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).unwrap().value().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                rel_err(an, fd) < 1e-4,
                "input {k} element {i}: analytic {an} vs numeric {fd}"
            );
        }
    }
}
