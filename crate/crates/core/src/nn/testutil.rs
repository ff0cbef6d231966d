//! Finite-difference gradient checking for ops.

use rand::SeedableRng;

use super::graph::{Graph, Var};
use super::params::normal;
use crate::matrix::Matrix;

pub(crate) fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    normal(&mut rng, rows, cols, 1.0)
}

/// Compares analytic gradients of `Σ w ⊙ f(inputs)` against central differences.
pub(crate) fn check_gradients(inputs: &[Matrix], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    check_gradients_tol(inputs, 1e-6, f)
}

pub(crate) fn check_gradients_tol(
    inputs: &[Matrix],
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let eval = |xs: &[Matrix]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::training();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let (r, c) = g.shape(out);
    let weights = rand_matrix(r, c, 99);
    let grads = g.backward_with(out, weights.clone());
    let objective = |xs: &[Matrix]| -> f64 {
        let (g, _, out) = eval(xs);
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let plus = objective(&xs);
            xs[i].data_mut()[j] = x.data()[j] - h;
            let minus = objective(&xs);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = 1.0f64.max(a.abs()).max(numeric.abs());
            assert!(
                (a - numeric).abs() <= tol * scale,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
