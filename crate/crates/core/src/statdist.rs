//! Stationary distributions of ergodic chains, solved by two independent
//! routes: a dense linear system and Cesàro-averaged power iteration. The
//! two cross-validate each other and serve as oracles for the combination
//! formula.

use crate::error::{Error, Result};
use crate::mdp::{Distribution, ROW_SUM_TOL};

/// A row-stochastic square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    n: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    /// Validates rows (entries in [0, 1], sums within [`ROW_SUM_TOL`] of 1)
    /// and renormalizes each row to sum exactly to 1.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Incompatible("empty matrix".into()));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Incompatible(format!(
                    "row {i} has {} entries in a {n}-state matrix",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Incompatible(format!(
                        "entry ({i}, {j}) = {p} out of [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Incompatible(format!("row {i} sums to {sum}")));
            }
            data.extend(row.iter().map(|&p| p / sum));
        }
        Ok(StochasticMatrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// v <- v P, in place via a scratch buffer.
    fn apply_left(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (j, &p) in row.iter().enumerate() {
                out[j] += vi * p;
            }
        }
    }
}

/// Which solver to run, and how hard to try.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Linear,
    Cesaro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub method: Method,
    pub tol: f64,
    pub max_iters: usize,
}

impl SolveOptions {
    pub fn new(method: Method, tol: f64, max_iters: usize) -> Result<Self> {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(Error::InvalidOptions(format!("tol {tol} must be positive")));
        }
        if max_iters == 0 {
            return Err(Error::InvalidOptions("max_iters must be at least 1".into()));
        }
        Ok(SolveOptions { method, tol, max_iters })
    }
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { method: Method::Linear, tol: 1e-12, max_iters: 1_000_000 }
    }
}

/// True iff the directed graph with an edge i -> j whenever P(i, j) > 0 is
/// strongly connected. The edge threshold is a strict > 0; the model is
/// exact by construction.
pub fn is_irreducible(p: &StochasticMatrix) -> bool {
    strongly_connected_components(p) == 1
}

struct TarjanState {
    next_index: usize,
    index: Vec<Option<usize>>,
    low: Vec<usize>,
    stack: Vec<usize>,
    on_stack: Vec<bool>,
    components: usize,
}

fn strongly_connected_components(p: &StochasticMatrix) -> usize {
    let n = p.dim();
    let mut state = TarjanState {
        next_index: 0,
        index: vec![None; n],
        low: vec![0; n],
        stack: Vec::new(),
        on_stack: vec![false; n],
        components: 0,
    };
    for v in 0..n {
        if state.index[v].is_none() {
            strongconnect(v, p, &mut state);
        }
    }
    state.components
}

fn strongconnect(v: usize, p: &StochasticMatrix, state: &mut TarjanState) {
    state.index[v] = Some(state.next_index);
    state.low[v] = state.next_index;
    state.next_index += 1;
    state.stack.push(v);
    state.on_stack[v] = true;

    for (w, &prob) in p.row(v).iter().enumerate() {
        if prob <= 0.0 {
            continue;
        }
        if state.index[w].is_none() {
            strongconnect(w, p, state);
            state.low[v] = state.low[v].min(state.low[w]);
        } else if state.on_stack[w] {
            state.low[v] = state.low[v].min(state.index[w].unwrap());
        }
    }

    if state.low[v] == state.index[v].unwrap() {
        state.components += 1;
        loop {
            let w = state.stack.pop().expect("stack underflow");
            state.on_stack[w] = false;
            if w == v {
                break;
            }
        }
    }
}

/// Stationary distribution by dense linear solve: (P^T - I) x = 0 with the
/// last equation replaced by the normalization sum(x) = 1, eliminated with
/// partial pivoting. The system is nonsingular exactly when P is irreducible.
pub fn stationary_linear(p: &StochasticMatrix) -> Result<Distribution> {
    let n = p.dim();
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            // row i of the system is the balance equation for state i
            a[i * n + j] = p.get(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1) * n + j] = 1.0;
    }
    b[n - 1] = 1.0;

    let scale = a.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let pivot_floor = 1e-13 * scale.max(1.0);

    // forward elimination with partial pivoting
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r * n + col]
                    .abs()
                    .partial_cmp(&a[s * n + col].abs())
                    .expect("finite pivots")
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < pivot_floor {
            return Err(Error::SingularSystem);
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }

    // back substitution
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }

    finalize_distribution(x)
}

/// Stationary distribution by Cesàro-averaged power iteration from the
/// uniform start. Averaging is restarted from the running average after
/// every epoch so the iteration contracts geometrically; it converges for
/// periodic chains, where plain power iteration does not. Stops when two
/// successive epoch averages agree within `opts.tol` in the infinity norm.
pub fn stationary_cesaro(p: &StochasticMatrix, opts: &SolveOptions) -> Result<Distribution> {
    if !opts.tol.is_finite() || opts.tol <= 0.0 || opts.max_iters == 0 {
        return Err(Error::InvalidOptions(format!(
            "tol {} / max_iters {}",
            opts.tol, opts.max_iters
        )));
    }
    let n = p.dim();
    let epoch_len = (2 * n).max(32);
    let mut v = vec![1.0 / n as f64; n];
    let mut avg = vec![0.0; n];
    let mut prev_avg: Option<Vec<f64>> = None;
    let mut scratch = vec![0.0; n];
    let mut used = 0usize;

    while used < opts.max_iters {
        avg.fill(0.0);
        let steps = epoch_len.min(opts.max_iters - used);
        for j in 1..=steps {
            p.apply_left(&v, &mut scratch);
            std::mem::swap(&mut v, &mut scratch);
            let w = 1.0 / j as f64;
            for (a, &vi) in avg.iter_mut().zip(&v) {
                *a += (vi - *a) * w;
            }
        }
        used += steps;
        if let Some(prev) = &prev_avg {
            let diff = avg
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff < opts.tol {
                return finalize_distribution(avg);
            }
        }
        prev_avg = Some(avg.clone());
        v.copy_from_slice(&avg);
    }
    Err(Error::NoConvergence(opts.max_iters))
}

/// Runs the solver selected by `opts.method`.
pub fn solve(p: &StochasticMatrix, opts: &SolveOptions) -> Result<Distribution> {
    match opts.method {
        Method::Linear => stationary_linear(p),
        Method::Cesaro => stationary_cesaro(p, opts),
    }
}

/// Infinity norm of mu P - mu.
pub fn residual(p: &StochasticMatrix, mu: &Distribution) -> f64 {
    assert_eq!(p.dim(), mu.len(), "dimension mismatch");
    let mut worst = 0.0f64;
    for j in 0..p.dim() {
        let mut acc = 0.0;
        for i in 0..p.dim() {
            acc += mu.get(i) * p.get(i, j);
        }
        worst = worst.max((acc - mu.get(j)).abs());
    }
    worst
}

/// Exact renormalization, then the strict-positivity check every ergodic
/// chain must satisfy.
fn finalize_distribution(mut x: Vec<f64>) -> Result<Distribution> {
    let sum: f64 = x.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::SingularSystem);
    }
    for xi in &mut x {
        *xi /= sum;
    }
    if let Some((state, &value)) = x.iter().enumerate().find(|(_, &v)| v <= 1e-13) {
        return Err(Error::NonPositiveResult { state, value });
    }
    Distribution::new(x)
}
