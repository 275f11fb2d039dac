//! Backward ODE solvers for the regime-switching Riccati systems.
//!
//! The mean-field equilibrium is characterized by four coupled
//! trajectories per chain state, integrated backward from the horizon:
//!
//! ```text
//! a' + 2 b1 a - 2 b2^2 a^2 + sum_i q[y][i] a_i + h = 0        a(T) = g
//! b' + (2 b1 - 4 b2^2 a) b + sum_i q[y][i] b_i + h = 0        b(T) = g
//! c' + a + b + sum_i q[y][i] c_i = 0                          c(T) = 0
//! k' - 2 b2^2 a^2 + 4 b2^2 a b + 2 b1 k + sum_i q[y][i] k_i = 0   k(T) = 0
//! ```
//!
//! The quadratic value-function ansatz that produces this system carries
//! three more unknowns per state (`d`, `e`, `f`); the extended solver
//! integrates the full seven-trajectory system and certifies the
//! reductions `d = 0`, `e = 0`, `f = -2 a` that collapse it to the four
//! equations above.
//!
//! Also provided: the truncated Picard fixed-point scheme with its
//! a-priori sup bound, the closed-form solutions for the single-state
//! model without common noise, a multidimensional variant, and the
//! equilibrium value function.

use crate::model::{ModelSpec, TimeGrid};
use thiserror::Error;

/// Numerical failures of the deterministic solvers.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("solution exceeded {BLOW_UP_THRESHOLD:.0e} at t = {t}, state {state} (blow-up)")]
    BlowUp { t: f64, state: usize },
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("t = {t} is at or before the blow-up time t0 = {t0}; no solution there")]
    Domain { t: f64, t0: f64 },
    #[error("player count {n} exceeds the full-system cap {cap}")]
    CapExceeded { n: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Magnitude at which a trajectory is declared blown up. Large enough to
/// pass any bounded solution, small enough to precede f64 overflow.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

/// Time integrator for the backward solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Classical fourth-order Runge–Kutta.
    #[default]
    Rk4,
    /// Explicit Euler, matching the reference experiments step for step.
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            other => Err(format!("unknown scheme `{other}` (expected rk4 or euler)")),
        }
    }
}

/// Integrates `x' = rhs(t, x)` backward from `x(T) = terminal` over the
/// grid, returning the state at every node (index 0 = t = 0). Fails with
/// [`SolveError::BlowUp`] as soon as any component leaves
/// `[-BLOW_UP_THRESHOLD, BLOW_UP_THRESHOLD]`; the offending component
/// index is mapped to a state label through `state_of`.
pub(crate) fn integrate_backward<F>(
    grid: &TimeGrid,
    terminal: Vec<f64>,
    scheme: Scheme,
    state_of: impl Fn(usize) -> usize,
    mut rhs: F,
) -> Result<Vec<Vec<f64>>, SolveError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = terminal.len();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut nodes = vec![Vec::new(); n + 1];
    nodes[n] = terminal.clone();

    let mut x = terminal;
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];

    for k in (1..=n).rev() {
        let t = grid.node(k);
        let step = -dt;
        match scheme {
            Scheme::Euler => {
                rhs(t, &x, &mut k1);
                for i in 0..dim {
                    x[i] += step * k1[i];
                }
            }
            Scheme::Rk4 => {
                rhs(t, &x, &mut k1);
                for i in 0..dim {
                    stage[i] = x[i] + 0.5 * step * k1[i];
                }
                rhs(t + 0.5 * step, &stage, &mut k2);
                for i in 0..dim {
                    stage[i] = x[i] + 0.5 * step * k2[i];
                }
                rhs(t + 0.5 * step, &stage, &mut k3);
                for i in 0..dim {
                    stage[i] = x[i] + step * k3[i];
                }
                rhs(t + step, &stage, &mut k4);
                for i in 0..dim {
                    x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        let node_t = grid.node(k - 1);
        if let Some(i) = x.iter().position(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD) {
            return Err(SolveError::BlowUp { t: node_t, state: state_of(i) });
        }
        nodes[k - 1] = x.clone();
    }
    Ok(nodes)
}

/// Linear interpolation of a per-node trajectory at time `t in [0, T]`.
pub fn interp_series(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    interp_nodes(grid, values, t)
}

pub(crate) fn interp_nodes(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    let dt = grid.dt();
    let pos = (t / dt).clamp(0.0, grid.n_steps() as f64);
    let k0 = (pos.floor() as usize).min(grid.n_steps() - 1);
    let w = pos - k0 as f64;
    values[k0] * (1.0 - w) + values[k0 + 1] * w
}

/// Mean-field Riccati trajectories, one series per chain state on the
/// solve grid. `k_coef` is the quadratic mean coefficient (named to avoid
/// clashing with grid indices).
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiMFG {
    pub grid: TimeGrid,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub k_coef: Vec<Vec<f64>>,
}

impl RiccatiMFG {
    pub fn kappa(&self) -> usize {
        self.a.len()
    }

    /// `a_y(t)` by linear interpolation between solve nodes.
    pub fn a_at(&self, state: usize, t: f64) -> f64 {
        interp_nodes(&self.grid, &self.a[state], t)
    }

    /// Largest `a_y(t)` over all states and nodes.
    pub fn max_a(&self) -> f64 {
        self.a
            .iter()
            .flat_map(|series| series.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solves the mean-field Riccati system on the spec's grid with RK4.
pub fn solve_mfg_riccati(spec: &ModelSpec) -> Result<RiccatiMFG, SolveError> {
    solve_mfg_riccati_with(spec, Scheme::Rk4)
}

pub fn solve_mfg_riccati_with(spec: &ModelSpec, scheme: Scheme) -> Result<RiccatiMFG, SolveError> {
    solve_multidim_riccati_with(spec, 1, scheme)
}

/// Multidimensional variant: with state dimension `dim` the constant
/// equation becomes `c' + dim * (a + b) + sum q c = 0`; the other three
/// equations do not see the dimension. `dim = 1` reproduces
/// [`solve_mfg_riccati`] exactly.
pub fn solve_multidim_riccati(spec: &ModelSpec, dim: usize) -> Result<RiccatiMFG, SolveError> {
    solve_multidim_riccati_with(spec, dim, Scheme::Rk4)
}

pub fn solve_multidim_riccati_with(
    spec: &ModelSpec,
    dim: usize,
    scheme: Scheme,
) -> Result<RiccatiMFG, SolveError> {
    assert!(dim >= 1, "state dimension must be at least 1");
    let kappa = spec.kappa();
    let g = spec.costs.g();
    let h = spec.costs.h();
    let q = spec.generator.rows().to_vec();
    let d = dim as f64;

    // Layout: [a_0..a_k, b_0..b_k, c_0..c_k, k_0..k_k]
    let mut terminal = vec![0.0; 4 * kappa];
    terminal[..kappa].copy_from_slice(g);
    terminal[kappa..2 * kappa].copy_from_slice(g);

    let spec_ref = spec;
    let nodes = integrate_backward(
        &spec.grid,
        terminal,
        scheme,
        |i| i % kappa,
        move |t, x, dx| {
            let (a, rest) = x.split_at(kappa);
            let (b, rest) = rest.split_at(kappa);
            let (c, kc) = rest.split_at(kappa);
            for y in 0..kappa {
                let b1 = spec_ref.b1(y, t);
                let b2sq = spec_ref.b2(y, t).powi(2);
                let mut qa = 0.0;
                let mut qb = 0.0;
                let mut qc = 0.0;
                let mut qk = 0.0;
                for i in 0..kappa {
                    let rate = q[y][i];
                    qa += rate * a[i];
                    qb += rate * b[i];
                    qc += rate * c[i];
                    qk += rate * kc[i];
                }
                dx[y] = 2.0 * b2sq * a[y] * a[y] - 2.0 * b1 * a[y] - qa - h[y];
                dx[kappa + y] = -(2.0 * b1 - 4.0 * b2sq * a[y]) * b[y] - qb - h[y];
                dx[2 * kappa + y] = -d * (a[y] + b[y]) - qc;
                dx[3 * kappa + y] =
                    2.0 * b2sq * a[y] * a[y] - 4.0 * b2sq * a[y] * b[y] - 2.0 * b1 * kc[y] - qk;
            }
        },
    )?;

    Ok(RiccatiMFG {
        grid: spec.grid,
        a: split_series(&nodes, kappa, 0),
        b: split_series(&nodes, kappa, 1),
        c: split_series(&nodes, kappa, 2),
        k_coef: split_series(&nodes, kappa, 3),
    })
}

/// Reshapes node-major integrator output into `[state][node]` series for
/// the `block`-th group of `kappa` components.
fn split_series(nodes: &[Vec<f64>], kappa: usize, block: usize) -> Vec<Vec<f64>> {
    (0..kappa)
        .map(|y| nodes.iter().map(|x| x[block * kappa + y]).collect())
        .collect()
}

/// Extended seven-trajectory solve with collapse certification.
#[derive(Debug, Clone)]
pub struct ExtendedRiccati {
    pub grid: TimeGrid,
    pub a: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub k_coef: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// b1 and b2 sampled at the solve nodes, kept so the measure-flow
    /// coefficients can be derived without re-consulting the spec.
    pub b1_nodes: Vec<Vec<f64>>,
    pub b2_nodes: Vec<Vec<f64>>,
    pub collapse: CollapseReport,
}

/// Sup-norm deviations from the algebraic reductions of the extended
/// system; all three should sit at solver accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseReport {
    pub max_abs_d: f64,
    pub max_abs_e: f64,
    pub max_abs_f_plus_2a: f64,
}

/// Solves the self-contained extended system (measure-flow coefficients
/// substituted by their fixed-point expressions) and reports how tightly
/// the `d = 0`, `e = 0`, `f = -2a` reductions hold.
pub fn solve_extended_riccati(spec: &ModelSpec) -> Result<ExtendedRiccati, SolveError> {
    solve_extended_riccati_with(spec, Scheme::Rk4)
}

pub fn solve_extended_riccati_with(
    spec: &ModelSpec,
    scheme: Scheme,
) -> Result<ExtendedRiccati, SolveError> {
    let kappa = spec.kappa();
    let g = spec.costs.g();
    let h = spec.costs.h();
    let q = spec.generator.rows().to_vec();

    // Layout: [a, d, e, f, k, b, c] x kappa
    let mut terminal = vec![0.0; 7 * kappa];
    terminal[..kappa].copy_from_slice(g); // a(T) = g
    for y in 0..kappa {
        terminal[3 * kappa + y] = -2.0 * g[y]; // f(T) = -2g
        terminal[5 * kappa + y] = g[y]; // b(T) = g
    }

    let spec_ref = spec;
    let nodes = integrate_backward(
        &spec.grid,
        terminal,
        scheme,
        |i| i % kappa,
        move |t, x, dx| {
            let (a, rest) = x.split_at(kappa);
            let (dd, rest) = rest.split_at(kappa);
            let (e, rest) = rest.split_at(kappa);
            let (f, rest) = rest.split_at(kappa);
            let (kc, rest) = rest.split_at(kappa);
            let (b, c) = rest.split_at(kappa);
            for y in 0..kappa {
                let b1 = spec_ref.b1(y, t);
                let b2sq = spec_ref.b2(y, t).powi(2);
                let mut q_dot = [0.0; 7];
                for i in 0..kappa {
                    let rate = q[y][i];
                    q_dot[0] += rate * a[i];
                    q_dot[1] += rate * dd[i];
                    q_dot[2] += rate * e[i];
                    q_dot[3] += rate * f[i];
                    q_dot[4] += rate * kc[i];
                    q_dot[5] += rate * b[i];
                    q_dot[6] += rate * c[i];
                }
                // Mean-drift coefficient of the measure flow after the
                // fixed-point substitution.
                let w0 = b1 - 2.0 * b2sq * a[y] - b2sq * f[y];
                dx[y] = 2.0 * b2sq * a[y] * a[y] - 2.0 * b1 * a[y] - q_dot[0] - h[y];
                dx[kappa + y] =
                    -b1 * dd[y] + 2.0 * b2sq * a[y] * dd[y] + b2sq * f[y] * dd[y] - q_dot[1];
                dx[2 * kappa + y] = b2sq * dd[y] * f[y] + 2.0 * b2sq * kc[y] * dd[y] - e[y] * w0
                    + 2.0 * b2sq * b[y] * dd[y]
                    - q_dot[2];
                dx[3 * kappa + y] =
                    -b1 * f[y] + 2.0 * b2sq * a[y] * f[y] - f[y] * w0 - q_dot[3] + 2.0 * h[y];
                dx[4 * kappa + y] = 0.5 * b2sq * f[y] * f[y] - 2.0 * kc[y] * w0
                    + 2.0 * b2sq * b[y] * f[y]
                    - q_dot[4];
                dx[5 * kappa + y] = -b[y] * (2.0 * b1 - 4.0 * b2sq * a[y]) - q_dot[5] - h[y];
                dx[6 * kappa + y] =
                    -a[y] + 0.5 * b2sq * dd[y] * dd[y] + 2.0 * b2sq * dd[y] * e[y] - b[y] - q_dot[6];
            }
        },
    )?;

    let a = split_series(&nodes, kappa, 0);
    let d = split_series(&nodes, kappa, 1);
    let e = split_series(&nodes, kappa, 2);
    let f = split_series(&nodes, kappa, 3);
    let k_coef = split_series(&nodes, kappa, 4);
    let b = split_series(&nodes, kappa, 5);
    let c = split_series(&nodes, kappa, 6);

    let sup = |series: &Vec<Vec<f64>>| {
        series
            .iter()
            .flat_map(|s| s.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    let max_abs_f_plus_2a = f
        .iter()
        .zip(&a)
        .flat_map(|(fy, ay)| fy.iter().zip(ay).map(|(fv, av)| (fv + 2.0 * av).abs()))
        .fold(0.0, f64::max);
    let collapse = CollapseReport { max_abs_d: sup(&d), max_abs_e: sup(&e), max_abs_f_plus_2a };

    let times = spec.grid.times();
    let b1_nodes: Vec<Vec<f64>> = (0..kappa)
        .map(|y| times.iter().map(|&t| spec.b1(y, t)).collect())
        .collect();
    let b2_nodes: Vec<Vec<f64>> = (0..kappa)
        .map(|y| times.iter().map(|&t| spec.b2(y, t)).collect())
        .collect();

    Ok(ExtendedRiccati { grid: spec.grid, a, d, e, f, k_coef, b, c, b1_nodes, b2_nodes, collapse })
}

/// Per-state measure-flow coefficient trajectories `w0..w5` derived
/// nodewise from a solved extended system:
///
/// ```text
/// w0 = b1 - 2 b2^2 a - b2^2 f     w1 = -b2^2 d      w2 = -2 b2^2 d
/// w3 = -4 b2^2 a + 2 b1           w4 = -2 b2^2 f    w5 = 1
/// ```
pub fn compute_w(ext: &ExtendedRiccati) -> [Vec<Vec<f64>>; 6] {
    let kappa = ext.a.len();
    let n_nodes = ext.grid.n_nodes();
    let mut w: [Vec<Vec<f64>>; 6] = std::array::from_fn(|_| vec![vec![0.0; n_nodes]; kappa]);
    for y in 0..kappa {
        for k in 0..n_nodes {
            let b1 = ext.b1_nodes[y][k];
            let b2sq = ext.b2_nodes[y][k] * ext.b2_nodes[y][k];
            let (a, d, f) = (ext.a[y][k], ext.d[y][k], ext.f[y][k]);
            w[0][y][k] = b1 - 2.0 * b2sq * a - b2sq * f;
            w[1][y][k] = -b2sq * d;
            w[2][y][k] = -2.0 * b2sq * d;
            w[3][y][k] = -4.0 * b2sq * a + 2.0 * b1;
            w[4][y][k] = -2.0 * b2sq * f;
            w[5][y][k] = 1.0;
        }
    }
    w
}

/// Sup bound `e^{KT} (sum_y g_y + T sum_y h_y)` on the `a` trajectories,
/// with `K = 2 max_y |b1_y|_inf + max_i sum_y |q[y][i]|`. Any truncation
/// level at or above this value leaves the Picard operator's clamp
/// inactive.
pub fn a_priori_bound(spec: &ModelSpec) -> f64 {
    let grid = &spec.grid;
    let mut b1_sup: f64 = 0.0;
    for y in 0..spec.kappa() {
        for k in 0..grid.n_nodes() {
            b1_sup = b1_sup.max(spec.b1(y, grid.node(k)).abs());
        }
    }
    let k_const = 2.0 * b1_sup + spec.generator.max_column_abs_sum();
    let sum_g: f64 = spec.costs.g().iter().sum();
    let sum_h: f64 = spec.costs.h().iter().sum();
    (k_const * grid.horizon()).exp() * (sum_g + grid.horizon() * sum_h)
}

/// Result of the truncated Picard iteration for the `a` system.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    /// Trajectories on the spec grid, `[state][node]`.
    pub a: Vec<Vec<f64>>,
    pub grid: TimeGrid,
    pub iterations: usize,
    /// Whether the `[0, trunc]` clamp ever altered a value. With
    /// `trunc >= a_priori_bound` this stays false and the fixed point is
    /// the true solution.
    pub truncation_active: bool,
    /// Sup norm of `T[a] - a` at the returned iterate; certifies the
    /// fixed-point property independently of the stopping rule.
    pub residual: f64,
}

/// How many sub-cells each grid cell contributes to the Picard
/// quadrature; keeps the trapezoid bias well under comparison tolerances.
const PICARD_REFINE: usize = 64;

/// Damping weight of the fixed-point update. The undamped sweep
/// `a <- T[a]` falls into a floating-point period-2 orbit on long
/// horizons (the integral operator's transient amplification grows like
/// exp(L T)); the half-averaged update removes the cycle while keeping
/// the same fixed points.
const PICARD_DAMPING: f64 = 0.5;

/// Solves the `a` system as the fixed point of the truncated integral
/// operator
///
/// ```text
/// T[a](t) = clamp( g + int_t^T (h + 2 b1 a - 2 b2^2 a^2 + sum q a) ds, 0, trunc )
/// ```
///
/// iterating `a <- (1 - lambda) a + lambda T[a]` from `a = 0` until the
/// sup-norm change drops below `tol`. Entirely independent of the
/// Runge–Kutta path, so the two solvers cross-check each other.
pub fn picard_truncated_solve(
    spec: &ModelSpec,
    trunc: f64,
    max_iter: usize,
    tol: f64,
) -> Result<PicardSolution, SolveError> {
    assert!(trunc >= 0.0, "truncation level must be nonnegative");
    let kappa = spec.kappa();
    let fine = spec.grid.refined(PICARD_REFINE);
    let n = fine.n_steps();
    let dt = fine.dt();
    let q = spec.generator.rows();
    let h = spec.costs.h();
    let g = spec.costs.g();

    // Coefficients sampled once on the fine grid.
    let b1: Vec<Vec<f64>> = (0..kappa)
        .map(|y| (0..=n).map(|k| spec.b1(y, fine.node(k))).collect())
        .collect();
    let b2sq: Vec<Vec<f64>> = (0..kappa)
        .map(|y| (0..=n).map(|k| spec.b2(y, fine.node(k)).powi(2)).collect())
        .collect();

    let mut a = vec![vec![0.0; n + 1]; kappa];
    let mut mapped = vec![vec![0.0; n + 1]; kappa];
    let mut integrand = vec![vec![0.0; n + 1]; kappa];

    // One application of T into `mapped`, flagging any clamping.
    let apply = |a: &Vec<Vec<f64>>, mapped: &mut Vec<Vec<f64>>, integrand: &mut Vec<Vec<f64>>, active: &mut bool| {
        for y in 0..kappa {
            for k in 0..=n {
                let coupling: f64 = (0..kappa).map(|i| q[y][i] * a[i][k]).sum();
                integrand[y][k] =
                    h[y] + 2.0 * b1[y][k] * a[y][k] - 2.0 * b2sq[y][k] * a[y][k] * a[y][k] + coupling;
            }
        }
        for y in 0..kappa {
            // Cumulative trapezoid of int_t^T, marching from the horizon.
            let mut integral = 0.0;
            mapped[y][n] = clamp_trunc(g[y], trunc, active);
            for k in (0..n).rev() {
                integral += 0.5 * dt * (integrand[y][k] + integrand[y][k + 1]);
                mapped[y][k] = clamp_trunc(g[y] + integral, trunc, active);
            }
        }
    };

    for iteration in 1..=max_iter {
        let mut transient_clamp = false; // clamping of intermediate iterates is not reported
        apply(&a, &mut mapped, &mut integrand, &mut transient_clamp);
        let mut change: f64 = 0.0;
        for y in 0..kappa {
            for k in 0..=n {
                let updated = (1.0 - PICARD_DAMPING) * a[y][k] + PICARD_DAMPING * mapped[y][k];
                change = change.max((updated - a[y][k]).abs());
                a[y][k] = updated;
            }
        }
        if change < tol {
            // Certify the fixed point; clamping here means the truncation
            // shapes the returned solution.
            let mut truncation_active = false;
            apply(&a, &mut mapped, &mut integrand, &mut truncation_active);
            let residual = a
                .iter()
                .zip(&mapped)
                .flat_map(|(ay, my)| ay.iter().zip(my).map(|(av, mv)| (av - mv).abs()))
                .fold(0.0, f64::max);
            // Restrict to the spec grid nodes.
            let coarse = (0..kappa)
                .map(|y| (0..=spec.grid.n_steps()).map(|k| a[y][k * PICARD_REFINE]).collect())
                .collect();
            return Ok(PicardSolution {
                a: coarse,
                grid: spec.grid,
                iterations: iteration,
                truncation_active,
                residual,
            });
        }
        if iteration == max_iter {
            return Err(SolveError::NoConvergence { iterations: max_iter, residual: change });
        }
    }
    unreachable!("loop returns or errors")
}

fn clamp_trunc(value: f64, trunc: f64, active: &mut bool) -> f64 {
    if value < 0.0 {
        *active = true;
        0.0
    } else if value > trunc {
        *active = true;
        trunc
    } else {
        value
    }
}

/// Which closed-form branch applies for the single-state model without
/// common noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HSign {
    PositiveH,
    NegativeH,
}

/// Closed-form solution of the single-state model `dX = alpha dt + sigma dW`
/// with pure mean-square running cost of weight `h` and unit initial
/// variance.
///
/// For `h > 0` the trajectories exist globally; for `h < 0` they exist
/// only on `(t0, T]` with the tangent blow-up time
/// `t0 = max(0, T - pi / (2 sqrt(-2h)))`. Nodes at or before `t0` have no
/// values and evaluating there is a [`SolveError::Domain`] error.
#[derive(Debug, Clone)]
pub struct ExplicitNoCommonNoise {
    pub sign: HSign,
    pub grid: TimeGrid,
    /// Index of the first grid node strictly after `t0` (0 when global).
    pub first_node: usize,
    /// Quadratic value coefficient at nodes `first_node..=n`.
    pub quad: Vec<f64>,
    /// Population variance at the same nodes.
    pub variance: Vec<f64>,
    /// Constant value offset at the same nodes.
    pub offset: Vec<f64>,
    pub blow_up_time: Option<f64>,
}

impl ExplicitNoCommonNoise {
    fn check_domain(&self, t: f64) -> Result<(), SolveError> {
        if let Some(t0) = self.blow_up_time {
            if t <= t0 {
                return Err(SolveError::Domain { t, t0 });
            }
        }
        Ok(())
    }

    /// Quadratic coefficient at a node time.
    pub fn quad_at_node(&self, k: usize) -> Result<f64, SolveError> {
        self.check_domain(self.grid.node(k))?;
        Ok(self.quad[k - self.first_node])
    }

    pub fn variance_at_node(&self, k: usize) -> Result<f64, SolveError> {
        self.check_domain(self.grid.node(k))?;
        Ok(self.variance[k - self.first_node])
    }

    pub fn offset_at_node(&self, k: usize) -> Result<f64, SolveError> {
        self.check_domain(self.grid.node(k))?;
        Ok(self.offset[k - self.first_node])
    }
}

/// Evaluates the closed forms on the given grid.
///
/// `h > 0` branch:
/// ```text
/// f1(t)    = sqrt(h/2) (1 - exp(-2 sqrt(2h) (T-t))) / (1 + exp(-2 sqrt(2h) (T-t)))
/// gamma(t) = exp(-int_0^t 4 f1) (1 + int_0^t sigma^2 exp(int_0^s 4 f1) ds)
/// f3(t)    = int_t^T (sigma^2 f1 + h gamma) ds
/// ```
/// `h < 0` replaces `f1` with `-sqrt(-h/2) tan(sqrt(-2h) (T-t))` and the
/// trajectories live on `(t0, T]` only.
pub fn explicit_no_common_noise(
    h: f64,
    sigma: f64,
    grid: &TimeGrid,
) -> Result<ExplicitNoCommonNoise, SolveError> {
    assert!(h != 0.0, "h must be nonzero");
    assert!(sigma > 0.0, "sigma must be positive");
    let horizon = grid.horizon();
    let n = grid.n_steps();

    let (sign, t0) = if h > 0.0 {
        (HSign::PositiveH, None)
    } else {
        let t0 = (horizon - std::f64::consts::FRAC_PI_2 / (-2.0 * h).sqrt()).max(0.0);
        (HSign::NegativeH, Some(t0))
    };

    let quad_fn = |t: f64| -> f64 {
        if h > 0.0 {
            let s = (2.0 * h).sqrt();
            let e = (-2.0 * s * (horizon - t)).exp();
            (h / 2.0).sqrt() * (1.0 - e) / (1.0 + e)
        } else {
            -(-h / 2.0).sqrt() * ((-2.0 * h).sqrt() * (horizon - t)).tan()
        }
    };

    let first_node = match t0 {
        Some(t0) => (0..=n).find(|&k| grid.node(k) > t0).unwrap_or(n),
        None => 0,
    };

    let live = n + 1 - first_node;
    let mut quad = vec![0.0; live];
    for k in 0..live {
        quad[k] = quad_fn(grid.node(first_node + k));
    }

    // Variance by its linear ODE gamma' = -4 quad gamma + sigma^2 with
    // gamma(0) = 1 (integrating factor, trapezoid quadrature). For the
    // blow-up branch the variance is anchored at the first live node by
    // the same integral expression started from t0-side limit; only the
    // globally defined branch reports gamma(0) = 1 exactly.
    let dt = grid.dt();
    let mut variance = vec![0.0; live];
    let mut exps = vec![0.0; live]; // int_{t_first}^{t} 4 quad
    for k in 1..live {
        exps[k] = exps[k - 1] + 0.5 * dt * (4.0 * quad[k - 1] + 4.0 * quad[k]);
    }
    variance[0] = 1.0;
    let mut forcing = 0.0; // int sigma^2 exp(int 4 quad) ds
    for k in 1..live {
        forcing += 0.5 * dt * (sigma * sigma * exps[k - 1].exp() + sigma * sigma * exps[k].exp());
        variance[k] = (-exps[k]).exp() * (variance[0] + forcing);
    }

    // Offset f3(t) = int_t^T (sigma^2 quad + h gamma), cumulative from T.
    let mut offset = vec![0.0; live];
    for k in (0..live - 1).rev() {
        let f = |i: usize| sigma * sigma * quad[i] + h * variance[i];
        offset[k] = offset[k + 1] + 0.5 * dt * (f(k) + f(k + 1));
    }

    Ok(ExplicitNoCommonNoise { sign, grid: *grid, first_node, quad, variance, offset, blow_up_time: t0 })
}

/// Formats a real with 17 significant digits, the fidelity used by every
/// CSV artifact.
pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `t,state,a,b,c,k` rows, one per (node, state).
pub fn riccati_csv(ric: &RiccatiMFG) -> String {
    let mut out = String::from("t,state,a,b,c,k\n");
    for k in 0..ric.grid.n_nodes() {
        let t = ric.grid.node(k);
        for y in 0..ric.kappa() {
            out.push_str(&format!(
                "{},{y},{},{},{},{}\n",
                fmt_real(t),
                fmt_real(ric.a[y][k]),
                fmt_real(ric.b[y][k]),
                fmt_real(ric.c[y][k]),
                fmt_real(ric.k_coef[y][k]),
            ));
        }
    }
    out
}

/// Extended variant with the collapse diagnostics and the measure-flow
/// coefficients: `t,state,a,b,c,k,d,e,f,w0..w5`.
pub fn extended_csv(ext: &ExtendedRiccati) -> String {
    let w = compute_w(ext);
    let mut out = String::from("t,state,a,b,c,k,d,e,f,w0,w1,w2,w3,w4,w5\n");
    for k in 0..ext.grid.n_nodes() {
        let t = ext.grid.node(k);
        for y in 0..ext.a.len() {
            let cells: Vec<String> = [
                t,
                y as f64,
                ext.a[y][k],
                ext.b[y][k],
                ext.c[y][k],
                ext.k_coef[y][k],
                ext.d[y][k],
                ext.e[y][k],
                ext.f[y][k],
                w[0][y][k],
                w[1][y][k],
                w[2][y][k],
                w[3][y][k],
                w[4][y][k],
                w[5][y][k],
            ]
            .iter()
            .enumerate()
            .map(|(i, &v)| if i == 1 { format!("{y}") } else { fmt_real(v) })
            .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// Equilibrium value for the generic player starting at `x` in chain
/// state `y` against an initial population law with moments
/// `(mu0, nu0)`:
///
/// `U = a_y(0) x^2 - 2 a_y(0) x mu0 + k_y(0) mu0^2 + b_y(0) nu0 + c_y(0)`
pub fn value_function_u(ric: &RiccatiMFG, initial: &crate::model::InitialLaw, state: usize, x: f64) -> f64 {
    let a0 = ric.a[state][0];
    let b0 = ric.b[state][0];
    let c0 = ric.c[state][0];
    let k0 = ric.k_coef[state][0];
    a0 * x * x - 2.0 * a0 * x * initial.mu0 + k0 * initial.mu0 * initial.mu0 + b0 * initial.nu0 + c0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CoefficientCurves, CostParams, Generator, InitialFamily, InitialLaw, ModelSpec, TimeGrid,
    };

    pub(crate) fn reference_spec() -> ModelSpec {
        let generator = Generator::new(vec![vec![-0.5, 0.5], vec![0.6, -0.6]]).unwrap();
        ModelSpec::new(
            generator,
            CoefficientCurves::constants(0.0, 1.0, 2, 5.0),
            CostParams::new(vec![2.0, 5.0], vec![3.0, 1.0]).unwrap(),
            InitialLaw::new(0.0, 2.0, InitialFamily::Gaussian).unwrap(),
            TimeGrid::new(5.0, 500).unwrap(),
        )
        .unwrap()
    }

    pub(crate) fn scalar_spec(h: f64, g: f64, horizon: f64, n_steps: usize) -> ModelSpec {
        let generator = Generator::new(vec![vec![0.0]]).unwrap();
        ModelSpec::new(
            generator,
            CoefficientCurves::constants(0.0, 1.0, 1, horizon),
            if h > 0.0 && g > 0.0 {
                CostParams::new(vec![h], vec![g]).unwrap()
            } else {
                CostParams::new_unchecked_sign(vec![h], vec![g]).unwrap()
            },
            InitialLaw::new(0.0, 1.0, InitialFamily::Gaussian).unwrap(),
            TimeGrid::new(horizon, n_steps).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn terminal_values_equal_g() {
        let ric = solve_mfg_riccati(&reference_spec()).unwrap();
        let n = ric.grid.n_steps();
        assert_eq!(ric.a[0][n], 3.0);
        assert_eq!(ric.a[1][n], 1.0);
        assert_eq!(ric.b[0][n], 3.0);
        assert_eq!(ric.c[0][n], 0.0);
        assert_eq!(ric.k_coef[1][n], 0.0);
    }

    #[test]
    fn scalar_riccati_matches_closed_form_h_zero() {
        // With no running cost the solution is g / (1 + 2 g (T - t)).
        let spec = scalar_spec(0.0, 1.0, 1.0, 100);
        let ric = solve_mfg_riccati(&spec).unwrap();
        let a0 = ric.a[0][0];
        assert!((a0 - 1.0 / 3.0).abs() < 1e-8, "a(0) = {a0}");
        for k in 0..=100 {
            let t = spec.grid.node(k);
            let exact = 1.0 / (1.0 + 2.0 * (1.0 - t));
            assert!((ric.a[0][k] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn scalar_riccati_matches_tanh_form() {
        // h = 2, g = 0: a(t) = sqrt(h/2) tanh(sqrt(2h) (T - t)).
        let spec = scalar_spec(2.0, 0.0, 5.0, 500);
        let ric = solve_mfg_riccati(&spec).unwrap();
        let a4 = ric.a_at(0, 4.0);
        let expected = 2.0_f64.tanh();
        assert!((a4 - expected).abs() < 1e-7, "a(4) = {a4} vs tanh(2) = {expected}");
    }

    #[test]
    fn extended_system_collapses() {
        let ext = solve_extended_riccati(&reference_spec()).unwrap();
        assert!(ext.collapse.max_abs_d < 1e-10, "max |d| = {}", ext.collapse.max_abs_d);
        assert!(ext.collapse.max_abs_e < 1e-10, "max |e| = {}", ext.collapse.max_abs_e);
        assert!(
            ext.collapse.max_abs_f_plus_2a < 1e-8,
            "max |f + 2a| = {}",
            ext.collapse.max_abs_f_plus_2a
        );
        let n = ext.grid.n_steps();
        assert_eq!(ext.f[0][n], -6.0); // f(T) = -2 g
        assert_eq!(ext.f[1][n], -2.0);
    }

    #[test]
    fn extended_matches_reduced_system() {
        let spec = reference_spec();
        let ext = solve_extended_riccati(&spec).unwrap();
        let ric = solve_mfg_riccati(&spec).unwrap();
        let mut max_diff: f64 = 0.0;
        for y in 0..2 {
            for k in 0..ext.grid.n_nodes() {
                max_diff = max_diff.max((ext.a[y][k] - ric.a[y][k]).abs());
                max_diff = max_diff.max((ext.b[y][k] - ric.b[y][k]).abs());
                max_diff = max_diff.max((ext.c[y][k] - ric.c[y][k]).abs());
                max_diff = max_diff.max((ext.k_coef[y][k] - ric.k_coef[y][k]).abs());
            }
        }
        assert!(max_diff < 1e-9, "extended vs reduced sup diff {max_diff}");
    }

    #[test]
    fn w_coefficients_at_collapse() {
        let spec = reference_spec();
        let ext = solve_extended_riccati(&spec).unwrap();
        let w = compute_w(&ext);
        for y in 0..2 {
            for k in 0..ext.grid.n_nodes() {
                assert_eq!(w[5][y][k], 1.0);
                assert!(w[1][y][k].abs() < 1e-10); // w1 = -b2^2 d = 0
                assert!(w[2][y][k].abs() < 1e-10);
                // with f = -2a: w0 = b1 = 0 and w4 = 4 b2^2 a
                assert!(w[0][y][k].abs() < 1e-7);
                assert!((w[4][y][k] - 4.0 * ext.a[y][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn a_priori_bound_reference_values() {
        let bound = a_priori_bound(&reference_spec());
        let expected = (5.5_f64).exp() * 39.0;
        assert!((bound - expected).abs() < 1e-9 * expected, "bound {bound}");

        let unit = scalar_spec(1.0, 1.0, 1.0, 10);
        assert!((a_priori_bound(&unit) - 2.0).abs() < 1e-12);

        let mut zero = scalar_spec(1.0, 1.0, 1.0, 10);
        zero.costs = CostParams::new_unchecked_sign(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(a_priori_bound(&zero), 0.0);
    }

    #[test]
    fn picard_agrees_with_rk4() {
        let spec = reference_spec();
        let bound = a_priori_bound(&spec);
        let picard = picard_truncated_solve(&spec, bound, 10_000, 1e-10).unwrap();
        assert!(!picard.truncation_active);
        let ric = solve_mfg_riccati(&spec).unwrap();
        let mut max_diff: f64 = 0.0;
        for y in 0..2 {
            for k in 0..=500 {
                max_diff = max_diff.max((picard.a[y][k] - ric.a[y][k]).abs());
            }
        }
        assert!(max_diff < 1e-6, "picard vs rk4 sup diff {max_diff}");
    }

    #[test]
    fn picard_zero_costs_fixed_point() {
        let mut spec = scalar_spec(1.0, 1.0, 1.0, 50);
        spec.costs = CostParams::new_unchecked_sign(vec![0.0], vec![0.0]).unwrap();
        let picard = picard_truncated_solve(&spec, 10.0, 100, 1e-12).unwrap();
        assert_eq!(picard.iterations, 1);
        assert!(picard.a.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn picard_zero_truncation_clamps() {
        let spec = reference_spec();
        let picard = picard_truncated_solve(&spec, 0.0, 100, 1e-12).unwrap();
        assert!(picard.truncation_active);
        assert!(picard.a.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn explicit_positive_h_terminal_and_variance() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let sol = explicit_no_common_noise(2.0, 1.0, &grid).unwrap();
        assert_eq!(sol.sign, HSign::PositiveH);
        assert_eq!(sol.blow_up_time, None);
        assert_eq!(*sol.quad.last().unwrap(), 0.0); // f1(T) = 0
        assert_eq!(sol.variance[0], 1.0); // gamma(0) = 1
        assert_eq!(*sol.offset.last().unwrap(), 0.0);
    }

    #[test]
    fn explicit_negative_h_blow_up_time() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let sol = explicit_no_common_noise(-2.0, 1.0, &grid).unwrap();
        let t0 = sol.blow_up_time.unwrap();
        assert!((t0 - (5.0 - std::f64::consts::FRAC_PI_4)).abs() < 1e-12);
        assert!(matches!(sol.quad_at_node(0), Err(SolveError::Domain { .. })));
        assert_eq!(sol.quad_at_node(500).unwrap(), -0.0);
    }

    #[test]
    fn solver_blow_up_matches_explicit_t0() {
        let spec = scalar_spec(-2.0, 0.0, 5.0, 500);
        let err = solve_mfg_riccati(&spec).unwrap_err();
        match err {
            SolveError::BlowUp { t, state } => {
                assert_eq!(state, 0);
                let t0 = 5.0 - std::f64::consts::FRAC_PI_4;
                assert!((t - t0).abs() < 0.05, "blow-up at {t}, expected near {t0}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn explicit_oracle_matches_solver_for_positive_h() {
        for h in [0.5, 2.0, 5.0] {
            let spec = scalar_spec(h, 0.0, 5.0, 500);
            let ric = solve_mfg_riccati(&spec).unwrap();
            let grid = spec.grid;
            let sol = explicit_no_common_noise(h, 1.0, &grid).unwrap();
            let mut sup: f64 = 0.0;
            for k in 0..=500 {
                sup = sup.max((ric.a[0][k] - sol.quad[k]).abs());
            }
            assert!(sup < 1e-6, "h = {h}: sup diff {sup}");
        }
    }

    #[test]
    fn multidim_dim1_is_bitwise_equal() {
        let spec = reference_spec();
        let base = solve_mfg_riccati(&spec).unwrap();
        let multi = solve_multidim_riccati(&spec, 1).unwrap();
        assert_eq!(base, multi);
    }

    #[test]
    fn multidim_scales_only_the_offset() {
        let spec = scalar_spec(2.0, 1.0, 2.0, 200);
        let one = solve_multidim_riccati(&spec, 1).unwrap();
        let three = solve_multidim_riccati(&spec, 3).unwrap();
        assert_eq!(one.a, three.a);
        assert_eq!(one.b, three.b);
        assert_eq!(one.k_coef, three.k_coef);
        for k in 0..=200 {
            assert!((three.c[0][k] - 3.0 * one.c[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn value_function_reference_cases() {
        // All costs zero: every coefficient vanishes and U = 0.
        let mut spec = scalar_spec(1.0, 1.0, 1.0, 50);
        spec.costs = CostParams::new_unchecked_sign(vec![0.0], vec![0.0]).unwrap();
        let ric = solve_mfg_riccati(&spec).unwrap();
        let law = InitialLaw::new(0.7, 1.5, InitialFamily::Gaussian).unwrap();
        assert_eq!(value_function_u(&ric, &law, 0, 2.3), 0.0);

        // Point mass at x: U = (k - a + b) x^2 + c.
        let spec = reference_spec();
        let ric = solve_mfg_riccati(&spec).unwrap();
        let x = 1.3;
        let law = InitialLaw::new(x, x * x, InitialFamily::Gaussian).unwrap();
        let expected = (ric.k_coef[0][0] - ric.a[0][0] + ric.b[0][0]) * x * x + ric.c[0][0];
        assert!((value_function_u(&ric, &law, 0, x) - expected).abs() < 1e-12);
    }

    #[test]
    fn positivity_and_bound_hold() {
        let spec = reference_spec();
        let ric = solve_mfg_riccati(&spec).unwrap();
        let bound = a_priori_bound(&spec);
        for y in 0..2 {
            for k in 0..500 {
                assert!(ric.a[y][k] > 0.0);
                assert!(ric.a[y][k] <= bound);
            }
        }
    }

    #[test]
    fn rk4_refinement_is_fourth_order() {
        let mut at_zero = Vec::new();
        for n in [50usize, 100, 200] {
            let mut spec = reference_spec();
            spec.grid = TimeGrid::new(5.0, n).unwrap();
            let ric = solve_mfg_riccati(&spec).unwrap();
            at_zero.push(ric.a[0][0]);
        }
        // Successive differences across grid halvings estimate the order.
        let e1 = (at_zero[0] - at_zero[1]).abs();
        let e2 = (at_zero[1] - at_zero[2]).abs();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "refinement ratio {ratio}");
    }
}
