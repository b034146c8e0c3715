//! Shared helpers for gradient conformance tests.

use loopscope_core::graph::{Graph, Var};
use loopscope_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central-difference check of every input element against the analytic
/// gradient. `build` must assemble a scalar (1x1) loss from the leaves it is
/// handed, in the same order as `inputs`.
pub fn check_grads<F>(build: F, inputs: &[Tensor], h: f64, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(false)))
            .collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
            assert!(
                err <= tol,
                "grad mismatch: input {i} elem {j}: analytic {a}, fd {fd}, rel err {err}"
            );
        }
    }
}

/// Deterministic pseudo-random values in (-1, 1) for building fixtures
/// without pulling in an RNG dependency here.
pub fn wobble(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            // Top 53 bits to a float in [0, 1), then center.
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * u - 1.0
        })
        .collect()
}

pub fn mat(seed: u64, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, wobble(seed, rows * cols)).unwrap()
}
