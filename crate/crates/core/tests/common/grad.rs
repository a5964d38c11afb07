//! Finite-difference oracle for gradients with respect to network weights.

use diff_retinex::nn::{Bound, ParamStore};
use dr_autograd::gradcheck::relative_error;
use dr_autograd::{Tape, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest relative error between analytic and central-difference gradients
/// of the scalar `f(params)`, over `fraction` of each array's entries (at
/// least `min_per_array`). Returns the error and the number of entries checked.
pub fn weight_gradient_error(
    store: &ParamStore,
    f: impl Fn(&Bound) -> Var,
    fraction: f64,
    min_per_array: usize,
    step: f64,
    seed: u64,
) -> (f64, usize) {
    let tape = Tape::new();
    let bound = store.bind_tracked(&tape);
    let grads = f(&bound).backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked) = (0.0f64, 0);
    for (name, t) in store.iter() {
        let analytic = grads.get_or_zeros(bound.get(name).unwrap());
        let n = t.numel();
        let k = ((n as f64 * fraction).ceil() as usize).max(min_per_array).min(n);
        for i in sample(&mut rng, n, k) {
            let eval = |delta: f64| {
                let mut probe = store.clone();
                probe.get_mut(name).unwrap().data_mut()[i] += delta;
                f(&probe.bind()).value().item().unwrap()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric, 1e-6);
            if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    (worst, checked)
}

/// `sum(y ⊙ probe)` for a fixed pseudo-random probe, a smooth scalar of `y`.
pub fn probe_sum(y: &Var, seed: u64) -> Var {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = dr_autograd::Tensor::from_fn(y.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
    y.mul(&Var::constant(probe)).unwrap().sum()
}
