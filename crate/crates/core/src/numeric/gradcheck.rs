//! Central finite-difference checks for tape gradients, run in `f64`.
//!
//! Derivatives use the fourth-order stencil
//! `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, which leaves room for
//! a step near 1e-4 where rounding noise is small.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};

/// Analytic and numeric gradients for the entries of one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamCheck {
    pub fn max_relative_error(&self, floor: f64) -> f64 {
        max_relative_error(&self.analytic, &self.numeric, floor)
    }
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Gradient of `f` with respect to its single input, analytically and by
/// central differences with step `h`.
pub fn check_input_gradient(
    x: &Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, Var) -> Var,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv);
    let grads = tape.gradients(loss).expect("scalar loss");
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        let loss = f(&mut tape, xv);
        tape.value(loss).item()
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        numeric.push(central_difference(h, |offset| {
            probe.data_mut()[i] = orig + offset;
            let v = eval(&probe);
            probe.data_mut()[i] = orig;
            v
        }));
    }
    (analytic, numeric)
}

/// Checks every parameter in `store` against central differences.
///
/// Parameters with more than `max_entries` scalars are checked on a seeded
/// random subset of entries; the rest are checked exhaustively.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    h: f64,
    max_entries: usize,
    seed: u64,
) -> Vec<ParamCheck> {
    let mut grad_store = store.clone();
    grad_store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &grad_store);
    tape.backward(loss, &mut grad_store).expect("scalar loss");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, param) in store.iter() {
        let n = param.value.len();
        let entries: Vec<usize> = if n > max_entries {
            let mut idx = sample(&mut rng, n, max_entries).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            analytic.push(grad_store.get(id).gradient.data()[e]);
            let orig = probe.get(id).value.data()[e];
            numeric.push(central_difference(h, |offset| {
                probe.get_mut(id).value.data_mut()[e] = orig + offset;
                let v = eval_loss(&probe, &f);
                probe.get_mut(id).value.data_mut()[e] = orig;
                v
            }));
        }
        out.push(ParamCheck {
            name: param.name.clone(),
            analytic,
            numeric,
        });
    }
    out
}

/// Derivative at offset 0 of `f(offset)`.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (m2, m1, p1, p2) = (f(-2.0 * h), f(-h), f(h), f(2.0 * h));
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
}

fn eval_loss(store: &ParamStore<f64>, f: &impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) -> f64 {
    let mut tape = Tape::with_frozen_params();
    let loss = f(&mut tape, store);
    tape.value(loss).item()
}
