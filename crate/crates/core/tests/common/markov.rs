//! Exact run-length chain for the `N_req` gate.
//!
//! State `r ∈ {0, …, n}` is the number of consecutive valid frames, capped
//! at `n = N_req`. Each frame is OOD with probability `p` (reset to 0),
//! otherwise `r ← min(r + 1, n)`. A step is blocked while `r < n`.

use nalgebra::{DMatrix, DVector};

pub struct GateChain {
    pub stationary: DVector<f64>,
    /// Long-run fraction of blocked steps.
    pub blocked: f64,
    /// Asymptotic variance of the blocked indicator's running mean, times `n_steps`.
    pub asymptotic_variance: f64,
}

fn transition(n: usize, p: f64) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(n + 1, n + 1);
    for r in 0..=n {
        t[(r, 0)] += p;
        t[(r, (r + 1).min(n))] += 1.0 - p;
    }
    t
}

pub fn solve(n_req: usize, p: f64) -> GateChain {
    let n = n_req;
    let t = transition(n, p);
    let size = n + 1;
    // πᵀ(T − I) = 0 with Σπ = 1: replace one equation by the normalization
    let mut a = (t.transpose() - DMatrix::identity(size, size)).clone_owned();
    let mut b = DVector::zeros(size);
    for c in 0..size {
        a[(size - 1, c)] = 1.0;
    }
    b[size - 1] = 1.0;
    let pi = a.lu().solve(&b).expect("chain is irreducible");
    let f = DVector::from_fn(size, |r, _| if r < n { 1.0 } else { 0.0 });
    let mu = pi.dot(&f);
    // Poisson equation (I − T + 1πᵀ) g = f − μ
    let ones = DVector::from_element(size, 1.0);
    let m = DMatrix::identity(size, size) - &t + &ones * pi.transpose();
    let centered = &f - &ones * mu;
    let g = m
        .lu()
        .solve(&centered)
        .expect("fundamental matrix is invertible");
    let var_pi: f64 = (0..size).map(|r| pi[r] * centered[r] * centered[r]).sum();
    let cross: f64 = (0..size).map(|r| pi[r] * centered[r] * g[r]).sum();
    GateChain {
        stationary: pi,
        blocked: mu,
        asymptotic_variance: 2.0 * cross - var_pi,
    }
}

/// `|estimate − blocked| ≤ 3·√(σ²/steps)`.
pub fn within_three_sigma(chain: &GateChain, estimate: f64, steps: u64) -> (bool, f64) {
    let sigma = (chain.asymptotic_variance / steps as f64).sqrt();
    ((estimate - chain.blocked).abs() <= 3.0 * sigma, sigma)
}
