//! The N-player game's Riccati machinery.
//!
//! Player `i`'s value in chain state `y` is the quadratic form
//! `x^T A_iy(t) x + x^T B_iy(t) + C_iy(t)` over the N-vector of player
//! positions. The full system integrates every `A_iy` (an N x N symmetric
//! matrix), `B_iy`, and `C_iy` backward — O(N^3 kappa) scalar ODEs — and
//! exists as an oracle. Its solution carries an N-invariant structure:
//! each `A_iy` takes only four distinct entry values
//!
//! ```text
//! (A_iy)_pq = a1   if p = q = i          a2   if p = q != i
//!             a3   if p != q touching i   a4   otherwise
//! ```
//!
//! with `a3 = -a1/(N-1)` and `a4 = a1/((N-1)(N-2)) - a2/(N-2)`, which
//! collapses the whole system to two trajectories per chain state:
//!
//! ```text
//! a1' + 2 b1 a1 - 2(N+1)/(N-1) b2^2 a1^2 + sum_j q[y][j] a1_j + (N-1)/N h = 0
//! a2' + 2 b1 a2 + 2/(N-1)^2 b2^2 a1^2 - 4N/(N-1) b2^2 a1 a2
//!                                      + sum_j q[y][j] a2_j + h/N = 0
//! a1(T) = (N-1) g / N,  a2(T) = g / N
//! ```
//!
//! [`verify_pattern`] certifies the reduction numerically: within-class
//! entry spread and deviation of each class from its reduced-system
//! prediction.

use crate::model::{ModelSpec, TimeGrid};
use crate::riccati::{integrate_backward, interp_nodes, Scheme, SolveError};

/// Default cap on the player count of the full solve; the stored state is
/// O(N^3 kappa) and the reduced system serves all large-N needs.
pub const DEFAULT_FULL_CAP: usize = 16;

/// Symmetric N x N matrix in packed upper-triangle storage, so symmetry
/// is structural rather than numerical.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * (n + 1) / 2] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, p: usize, q: usize) -> usize {
        let (r, c) = if p <= q { (p, q) } else { (q, p) };
        // row-major packed upper triangle
        r * self.n - r * (r + 1) / 2 + c
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[self.idx(p, q)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, q: usize, value: f64) {
        let i = self.idx(p, q);
        self.data[i] = value;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|p| self.get(p, p)).sum()
    }

    /// `column(j)[p] = M[p][j]`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|p| self.get(p, j)).collect()
    }

    /// Quadratic form `x^T M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for p in 0..self.n {
            sum += self.get(p, p) * x[p] * x[p];
            for q in (p + 1)..self.n {
                sum += 2.0 * self.get(p, q) * x[p] * x[q];
            }
        }
        sum
    }
}

/// Full N-player Riccati trajectories. Storage is node-major:
/// `a[node][i * kappa + y]` etc.
#[derive(Debug, Clone)]
pub struct FullRiccatiN {
    pub n_players: usize,
    pub kappa: usize,
    pub grid: TimeGrid,
    a: Vec<Vec<SymMatrix>>,
    b: Vec<Vec<Vec<f64>>>,
    c: Vec<Vec<f64>>,
}

impl FullRiccatiN {
    fn slot(&self, player: usize, state: usize) -> usize {
        player * self.kappa + state
    }

    /// `A_iy` at grid node `k`.
    pub fn a_at_node(&self, k: usize, player: usize, state: usize) -> &SymMatrix {
        &self.a[k][self.slot(player, state)]
    }

    pub fn b_at_node(&self, k: usize, player: usize, state: usize) -> &[f64] {
        &self.b[k][self.slot(player, state)]
    }

    pub fn c_at_node(&self, k: usize, player: usize, state: usize) -> f64 {
        self.c[k][self.slot(player, state)]
    }

    /// Nearest grid node for a probe time.
    pub fn node_of(&self, t: f64) -> usize {
        ((t / self.grid.dt()).round() as usize).min(self.grid.n_steps())
    }

    /// Largest `|B_iy|` entry anywhere (should sit at zero).
    pub fn max_abs_b(&self) -> f64 {
        self.b
            .iter()
            .flatten()
            .flat_map(|v| v.iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

/// Solves the full N-player system backward with the default cap.
pub fn solve_full(spec: &ModelSpec, n_players: usize) -> Result<FullRiccatiN, SolveError> {
    solve_full_with(spec, n_players, DEFAULT_FULL_CAP, Scheme::Rk4)
}

pub fn solve_full_with(
    spec: &ModelSpec,
    n_players: usize,
    cap: usize,
    scheme: Scheme,
) -> Result<FullRiccatiN, SolveError> {
    if n_players < 3 {
        // The off-off class is empty at N = 2 and the pattern degenerates.
        return Err(SolveError::ShapeMismatch(format!(
            "full solve needs at least 3 players, got {n_players}"
        )));
    }
    if n_players > cap {
        return Err(SolveError::CapExceeded { n: n_players, cap });
    }
    let n = n_players;
    let kappa = spec.kappa();
    let tri = n * (n + 1) / 2;
    let blocks = n * kappa;
    // Per (player, state) block: packed A, then B, then C.
    let block_len = tri + n + 1;
    let dim = blocks * block_len;

    let h = spec.costs.h().to_vec();
    let g = spec.costs.g().to_vec();
    let q = spec.generator.rows().to_vec();

    let tri_index = move |p: usize, qq: usize| -> usize {
        let (r, c) = if p <= qq { (p, qq) } else { (qq, p) };
        r * n - r * (r + 1) / 2 + c
    };

    // Terminal: A_iy(T) = (g_y / N) * Lambda_i, B = 0, C = 0.
    let mut terminal = vec![0.0; dim];
    for i in 0..n {
        for y in 0..kappa {
            let base = (i * kappa + y) * block_len;
            let scale = g[y] / n as f64;
            for p in 0..n {
                for qq in p..n {
                    let v = if p == qq {
                        if p == i {
                            (n - 1) as f64 * scale
                        } else {
                            scale
                        }
                    } else if p == i || qq == i {
                        -scale
                    } else {
                        0.0
                    };
                    terminal[base + tri_index(p, qq)] = v;
                }
            }
        }
    }

    let spec_ref = spec;
    let nodes = integrate_backward(
        &spec.grid,
        terminal,
        scheme,
        move |flat| (flat / block_len) % kappa,
        move |t, x, dx| {
            dx.fill(0.0);
            // Columns of every A_jy at this stage: own_cols[y][j*n + p] = (A_jy)[p][j].
            let mut own_cols = vec![vec![0.0; n * n]; kappa];
            for (y, cols) in own_cols.iter_mut().enumerate() {
                for j in 0..n {
                    let base = (j * kappa + y) * block_len;
                    for p in 0..n {
                        cols[j * n + p] = x[base + tri_index(p, j)];
                    }
                }
            }
            for y in 0..kappa {
                let b1 = spec_ref.b1(y, t);
                let b2sq = spec_ref.b2(y, t).powi(2);
                for i in 0..n {
                    let base = (i * kappa + y) * block_len;

                    // dA/dt = 2 b2^2 [u_i u_i^T + sum_{j != i} (w_j u_j^T + u_j w_j^T)]
                    //         - 2 b1 A - sum_j q[y][j] A_i,j - (h_y / N) Lambda_i
                    // where u_j = A_iy[:, j] and w_j = A_jy[:, j].
                    for p in 0..n {
                        for qq in p..n {
                            let mut v = 0.0;
                            let uip = x[base + tri_index(p, i)];
                            let uiq = x[base + tri_index(qq, i)];
                            v += uip * uiq;
                            for j in 0..n {
                                if j == i {
                                    continue;
                                }
                                let ujp = x[base + tri_index(p, j)];
                                let ujq = x[base + tri_index(qq, j)];
                                let wjp = own_cols[y][j * n + p];
                                let wjq = own_cols[y][j * n + qq];
                                v += wjp * ujq + ujp * wjq;
                            }
                            let mut entry = 2.0 * b2sq * v - 2.0 * b1 * x[base + tri_index(p, qq)];
                            for y2 in 0..kappa {
                                entry -=
                                    q[y][y2] * x[(i * kappa + y2) * block_len + tri_index(p, qq)];
                            }
                            let lam = if p == qq {
                                if p == i {
                                    (n - 1) as f64
                                } else {
                                    1.0
                                }
                            } else if p == i || qq == i {
                                -1.0
                            } else {
                                0.0
                            };
                            entry -= h[y] / n as f64 * lam;
                            dx[base + tri_index(p, qq)] = entry;
                        }
                    }

                    // B block. Zero terminal data and a linear homogeneous
                    // equation keep it identically zero; integrated anyway
                    // so the certification is numerical, not assumed.
                    for p in 0..n {
                        let mut v = -b1 * x[base + tri + p];
                        for j in 0..n {
                            let aij = x[base + tri_index(p, j)];
                            let bj_own = x[(j * kappa + y) * block_len + tri + j];
                            if j == i {
                                v += 2.0 * b2sq * aij * x[base + tri + j];
                            } else {
                                let col_jp = own_cols[y][j * n + p];
                                v += 2.0 * b2sq * (aij * bj_own + col_jp * x[base + tri + j]);
                            }
                        }
                        for y2 in 0..kappa {
                            v -= q[y][y2] * x[(i * kappa + y2) * block_len + tri + p];
                        }
                        dx[base + tri + p] = v;
                    }

                    // C block: C' = (B quadratic terms) - tr(A_iy) - sum q C.
                    let mut trace = 0.0;
                    for p in 0..n {
                        trace += x[base + tri_index(p, p)];
                    }
                    let bii = x[base + tri + i];
                    let mut v = -trace + 0.5 * b2sq * bii * bii;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let bj_own = x[(j * kappa + y) * block_len + tri + j];
                        v += b2sq * bj_own * x[base + tri + j];
                    }
                    for y2 in 0..kappa {
                        v -= q[y][y2] * x[(i * kappa + y2) * block_len + tri + n];
                    }
                    dx[base + tri + n] = v;
                }
            }
        },
    )?;

    // Repack node-major flat states into typed storage.
    let n_nodes = spec.grid.n_nodes();
    let mut a = Vec::with_capacity(n_nodes);
    let mut b = Vec::with_capacity(n_nodes);
    let mut c = Vec::with_capacity(n_nodes);
    for node in &nodes {
        let mut a_node = Vec::with_capacity(blocks);
        let mut b_node = Vec::with_capacity(blocks);
        let mut c_node = Vec::with_capacity(blocks);
        for block in 0..blocks {
            let base = block * block_len;
            let mut m = SymMatrix::zeros(n);
            m.data.copy_from_slice(&node[base..base + tri]);
            a_node.push(m);
            b_node.push(node[base + tri..base + tri + n].to_vec());
            c_node.push(node[base + tri + n]);
        }
        a.push(a_node);
        b.push(b_node);
        c.push(c_node);
    }

    Ok(FullRiccatiN { n_players: n, kappa, grid: spec.grid, a, b, c })
}

/// Reduced N-player trajectories per chain state, plus
/// `ahat1 = N/(N-1) * a1`, the coefficient that converges to the
/// mean-field `a`.
#[derive(Debug, Clone)]
pub struct ReducedRiccatiN {
    pub n_players: usize,
    pub grid: TimeGrid,
    pub a1: Vec<Vec<f64>>,
    pub a2: Vec<Vec<f64>>,
    pub ahat1: Vec<Vec<f64>>,
}

impl ReducedRiccatiN {
    pub fn kappa(&self) -> usize {
        self.a1.len()
    }

    pub fn a1_at(&self, state: usize, t: f64) -> f64 {
        interp_nodes(&self.grid, &self.a1[state], t)
    }

    pub fn ahat1_at(&self, state: usize, t: f64) -> f64 {
        interp_nodes(&self.grid, &self.ahat1[state], t)
    }
}

/// Solves the 2-per-state reduced system.
pub fn solve_reduced(spec: &ModelSpec, n_players: usize) -> Result<ReducedRiccatiN, SolveError> {
    solve_reduced_with(spec, n_players, Scheme::Rk4)
}

pub fn solve_reduced_with(
    spec: &ModelSpec,
    n_players: usize,
    scheme: Scheme,
) -> Result<ReducedRiccatiN, SolveError> {
    if n_players < 2 {
        return Err(SolveError::ShapeMismatch(format!(
            "reduced solve needs at least 2 players, got {n_players}"
        )));
    }
    let kappa = spec.kappa();
    let nf = n_players as f64;
    let h = spec.costs.h().to_vec();
    let g = spec.costs.g().to_vec();
    let q = spec.generator.rows().to_vec();

    let mut terminal = vec![0.0; 2 * kappa];
    for y in 0..kappa {
        terminal[y] = (nf - 1.0) / nf * g[y];
        terminal[kappa + y] = g[y] / nf;
    }

    let spec_ref = spec;
    let nodes = integrate_backward(
        &spec.grid,
        terminal,
        scheme,
        |i| i % kappa,
        move |t, x, dx| {
            let (a1, a2) = x.split_at(kappa);
            for y in 0..kappa {
                let b1 = spec_ref.b1(y, t);
                let b2sq = spec_ref.b2(y, t).powi(2);
                let mut q1 = 0.0;
                let mut q2 = 0.0;
                for i in 0..kappa {
                    q1 += q[y][i] * a1[i];
                    q2 += q[y][i] * a2[i];
                }
                dx[y] = 2.0 * (nf + 1.0) / (nf - 1.0) * b2sq * a1[y] * a1[y]
                    - 2.0 * b1 * a1[y]
                    - q1
                    - (nf - 1.0) / nf * h[y];
                dx[kappa + y] = -2.0 * b1 * a2[y]
                    - 2.0 / ((nf - 1.0) * (nf - 1.0)) * b2sq * a1[y] * a1[y]
                    + 4.0 * nf / (nf - 1.0) * b2sq * a1[y] * a2[y]
                    - q2
                    - h[y] / nf;
            }
        },
    )?;

    let a1: Vec<Vec<f64>> = (0..kappa).map(|y| nodes.iter().map(|x| x[y]).collect()).collect();
    let a2: Vec<Vec<f64>> =
        (0..kappa).map(|y| nodes.iter().map(|x| x[kappa + y]).collect()).collect();
    let ahat1 = a1
        .iter()
        .map(|series| series.iter().map(|v| nf / (nf - 1.0) * v).collect())
        .collect();

    Ok(ReducedRiccatiN { n_players, grid: spec.grid, a1, a2, ahat1 })
}

/// One row of the pattern report: a class value at a (node, state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternRow {
    pub t: f64,
    pub state: usize,
    /// 1..=4, matching the pattern classes.
    pub class: u8,
    /// Mean of the entries in this class across all players.
    pub value: f64,
    /// Reduced-system prediction for the class.
    pub predicted: f64,
    pub deviation: f64,
}

/// Certification that the full solution carries the four-value pattern
/// predicted by the reduced system.
#[derive(Debug, Clone)]
pub struct PatternReport {
    pub n_players: usize,
    /// Largest spread among entries that the pattern says are equal.
    pub max_within_class_spread: f64,
    /// Largest |class value - reduced-system prediction|.
    pub max_prediction_deviation: f64,
    pub rows: Vec<PatternRow>,
}

/// Decomposes every `A_iy` into the four pattern classes and compares
/// against the reduced-system predictions
/// `(a1, a2, -a1/(N-1), a1/((N-1)(N-2)) - a2/(N-2))`.
pub fn verify_pattern(
    full: &FullRiccatiN,
    reduced: &ReducedRiccatiN,
) -> Result<PatternReport, SolveError> {
    if full.n_players != reduced.n_players {
        return Err(SolveError::ShapeMismatch(format!(
            "full has N = {}, reduced has N = {}",
            full.n_players, reduced.n_players
        )));
    }
    if full.grid != reduced.grid {
        return Err(SolveError::ShapeMismatch("grids differ".into()));
    }
    if full.kappa != reduced.kappa() {
        return Err(SolveError::ShapeMismatch("state counts differ".into()));
    }
    let n = full.n_players;
    let nf = n as f64;
    let mut max_spread: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut rows = Vec::new();

    for k in 0..full.grid.n_nodes() {
        let t = full.grid.node(k);
        for y in 0..full.kappa {
            let predictions = [
                reduced.a1[y][k],
                reduced.a2[y][k],
                -reduced.a1[y][k] / (nf - 1.0),
                reduced.a1[y][k] / ((nf - 1.0) * (nf - 2.0)) - reduced.a2[y][k] / (nf - 2.0),
            ];
            // Class statistics across every player's matrix.
            let mut mins = [f64::INFINITY; 4];
            let mut maxs = [f64::NEG_INFINITY; 4];
            let mut sums = [0.0f64; 4];
            let mut counts = [0usize; 4];
            for i in 0..n {
                let m = full.a_at_node(k, i, y);
                for p in 0..n {
                    for qq in p..n {
                        let class = if p == qq {
                            usize::from(p != i)
                        } else if p == i || qq == i {
                            2
                        } else {
                            3
                        };
                        let v = m.get(p, qq);
                        mins[class] = mins[class].min(v);
                        maxs[class] = maxs[class].max(v);
                        sums[class] += v;
                        counts[class] += 1;
                    }
                }
            }
            for class in 0..4 {
                if counts[class] == 0 {
                    continue;
                }
                let spread = maxs[class] - mins[class];
                let value = sums[class] / counts[class] as f64;
                let deviation = (value - predictions[class]).abs();
                max_spread = max_spread.max(spread);
                max_dev = max_dev.max(deviation);
                rows.push(PatternRow {
                    t,
                    state: y,
                    class: class as u8 + 1,
                    value,
                    predicted: predictions[class],
                    deviation,
                });
            }
        }
    }

    Ok(PatternReport {
        n_players: n,
        max_within_class_spread: max_spread,
        max_prediction_deviation: max_dev,
        rows,
    })
}

/// `t,state,a1,a2,ahat1` rows, one per (node, state).
pub fn reduced_csv(red: &ReducedRiccatiN) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("t,state,a1,a2,ahat1\n");
    for k in 0..red.grid.n_nodes() {
        let t = red.grid.node(k);
        for y in 0..red.kappa() {
            out.push_str(&format!(
                "{},{y},{},{},{}\n",
                fmt_real(t),
                fmt_real(red.a1[y][k]),
                fmt_real(red.a2[y][k]),
                fmt_real(red.ahat1[y][k]),
            ));
        }
    }
    out
}

/// `t,state,class,value,predicted,deviation` rows of a pattern report.
pub fn pattern_csv(report: &PatternReport) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("t,state,class,value,predicted,deviation\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_real(row.t),
            row.state,
            row.class,
            fmt_real(row.value),
            fmt_real(row.predicted),
            fmt_real(row.deviation),
        ));
    }
    out
}

/// Dense dump of the oracle matrices at the requested probe nodes:
/// `t,player,state,row,col,value`.
pub fn matrices_csv(full: &FullRiccatiN, probe_nodes: &[usize]) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("t,player,state,row,col,value\n");
    for &k in probe_nodes {
        let t = full.grid.node(k);
        for i in 0..full.n_players {
            for y in 0..full.kappa {
                let m = full.a_at_node(k, i, y);
                for p in 0..full.n_players {
                    for q in 0..full.n_players {
                        out.push_str(&format!(
                            "{},{i},{y},{p},{q},{}\n",
                            fmt_real(t),
                            fmt_real(m.get(p, q)),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// The per-state value offset `C_y` of a player under the pattern:
/// `C' + tr(A) + sum q C = 0` with `tr(A) = a1 + (N-1) a2` and
/// `C(T) = 0`. Gives access to player values at counts beyond the full
/// solve's cap. Re-integrates `(a1, a2)` jointly so the trace is exact
/// at every stage.
pub fn pattern_value_offset(
    spec: &ModelSpec,
    reduced: &ReducedRiccatiN,
) -> Result<Vec<Vec<f64>>, SolveError> {
    let kappa = spec.kappa();
    let nf = reduced.n_players as f64;
    let q = spec.generator.rows().to_vec();
    let h = spec.costs.h().to_vec();
    let g = spec.costs.g().to_vec();

    // Layout: [a1, a2, c] x kappa.
    let mut terminal = vec![0.0; 3 * kappa];
    for y in 0..kappa {
        terminal[y] = (nf - 1.0) / nf * g[y];
        terminal[kappa + y] = g[y] / nf;
    }

    let spec_ref = spec;
    let nodes = integrate_backward(
        &spec.grid,
        terminal,
        Scheme::Rk4,
        |i| i % kappa,
        move |t, x, dx| {
            let (a1, rest) = x.split_at(kappa);
            let (a2, c) = rest.split_at(kappa);
            for y in 0..kappa {
                let b1 = spec_ref.b1(y, t);
                let b2sq = spec_ref.b2(y, t).powi(2);
                let mut q1 = 0.0;
                let mut q2 = 0.0;
                let mut qc = 0.0;
                for i in 0..kappa {
                    q1 += q[y][i] * a1[i];
                    q2 += q[y][i] * a2[i];
                    qc += q[y][i] * c[i];
                }
                dx[y] = 2.0 * (nf + 1.0) / (nf - 1.0) * b2sq * a1[y] * a1[y]
                    - 2.0 * b1 * a1[y]
                    - q1
                    - (nf - 1.0) / nf * h[y];
                dx[kappa + y] = -2.0 * b1 * a2[y]
                    - 2.0 / ((nf - 1.0) * (nf - 1.0)) * b2sq * a1[y] * a1[y]
                    + 4.0 * nf / (nf - 1.0) * b2sq * a1[y] * a2[y]
                    - q2
                    - h[y] / nf;
                dx[2 * kappa + y] = -(a1[y] + (nf - 1.0) * a2[y]) - qc;
            }
        },
    )?;
    Ok((0..kappa).map(|y| nodes.iter().map(|x| x[2 * kappa + y]).collect()).collect())
}

/// Player 0's value from the pattern alone:
/// `x^T A_0y(0) x + C_y(0)` with the four-class matrix built from the
/// reduced trajectories. Matches [`value_function_vi`] wherever the full
/// solve is affordable and extends it to arbitrary player counts.
pub fn pattern_value_v1(
    reduced: &ReducedRiccatiN,
    offset: &[Vec<f64>],
    state: usize,
    x: &[f64],
) -> f64 {
    let n = reduced.n_players;
    let nf = n as f64;
    debug_assert_eq!(x.len(), n);
    let a1 = reduced.a1[state][0];
    let a2 = reduced.a2[state][0];
    let a3 = -a1 / (nf - 1.0);
    let others_sum: f64 = x[1..].iter().sum();
    let others_sq: f64 = x[1..].iter().map(|v| v * v).sum();
    let mut quad = a1 * x[0] * x[0] + a2 * others_sq + 2.0 * a3 * x[0] * others_sum;
    if n >= 3 {
        let a4 = a1 / ((nf - 1.0) * (nf - 2.0)) - a2 / (nf - 2.0);
        quad += a4 * (others_sum * others_sum - others_sq);
    }
    quad + offset[state][0]
}

/// Player `i`'s equilibrium value `x^T A_iy(0) x + x^T B_iy(0) + C_iy(0)`.
pub fn value_function_vi(
    full: &FullRiccatiN,
    player: usize,
    state: usize,
    x: &[f64],
) -> Result<f64, SolveError> {
    if x.len() != full.n_players {
        return Err(SolveError::DimensionMismatch { expected: full.n_players, got: x.len() });
    }
    let a = full.a_at_node(0, player, state);
    let b = full.b_at_node(0, player, state);
    let c = full.c_at_node(0, player, state);
    let linear: f64 = b.iter().zip(x).map(|(bv, xv)| bv * xv).sum();
    Ok(a.quad_form(x) + linear + c)
}

/// Equilibrium drift vector at `(y, t, x)`: component `i` is
/// `b1 x_i - 2 b2^2 a1_y(t) (x_i - mean of the other players)`.
pub fn nplayer_drift(
    reduced: &ReducedRiccatiN,
    spec: &ModelSpec,
    state: usize,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let n = reduced.n_players;
    if x.len() != n {
        return Err(SolveError::DimensionMismatch { expected: n, got: x.len() });
    }
    let b1 = spec.b1(state, t);
    let b2sq = spec.b2(state, t).powi(2);
    let a1 = reduced.a1_at(state, t);
    let total: f64 = x.iter().sum();
    Ok(x.iter()
        .map(|&xi| {
            let others_mean = (total - xi) / (n as f64 - 1.0);
            b1 * xi - 2.0 * b2sq * a1 * (xi - others_mean)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CoefficientCurves, CostParams, Generator, InitialFamily, InitialLaw, ModelSpec, TimeGrid,
    };
    use crate::riccati::solve_mfg_riccati;

    fn reference_spec() -> ModelSpec {
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

    #[test]
    fn sym_matrix_storage_round_trips() {
        let mut m = SymMatrix::zeros(4);
        m.set(1, 3, 2.5);
        m.set(2, 2, -1.0);
        assert_eq!(m.get(3, 1), 2.5);
        assert_eq!(m.get(1, 3), 2.5);
        assert_eq!(m.get(2, 2), -1.0);
        assert_eq!(m.trace(), -1.0);
    }

    #[test]
    fn terminal_condition_is_scaled_lambda() {
        let spec = reference_spec();
        let full = solve_full(&spec, 5).unwrap();
        let k = spec.grid.n_steps();
        for (i, y, scale) in [(0usize, 0usize, 3.0 / 5.0), (2, 1, 1.0 / 5.0)] {
            let m = full.a_at_node(k, i, y);
            for p in 0..5 {
                for q in 0..5 {
                    let expected = if p == q {
                        if p == i {
                            4.0 * scale
                        } else {
                            scale
                        }
                    } else if p == i || q == i {
                        -scale
                    } else {
                        0.0
                    };
                    assert_eq!(m.get(p, q), expected, "entry ({p},{q}) of player {i} state {y}");
                }
            }
        }
    }

    #[test]
    fn linear_term_stays_zero() {
        let spec = reference_spec();
        let full = solve_full(&spec, 4).unwrap();
        assert!(full.max_abs_b() < 1e-10, "max |B| = {}", full.max_abs_b());
    }

    #[test]
    fn reduced_terminal_values() {
        let spec = reference_spec();
        for n in [2usize, 5, 100] {
            let red = solve_reduced(&spec, n).unwrap();
            let k = spec.grid.n_steps();
            let nf = n as f64;
            for y in 0..2 {
                let g = spec.costs.g()[y];
                assert!((red.a1[y][k] - (nf - 1.0) / nf * g).abs() < 1e-15);
                assert!((red.a2[y][k] - g / nf).abs() < 1e-15);
                assert!((red.ahat1[y][k] - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reproduces_reference_pattern_values() {
        // Four distinct entry values of player 2's state-0 matrix at t = 1
        // with five players (0-based player index 1).
        let spec = reference_spec();
        let full = solve_full(&spec, 5).unwrap();
        let k = full.node_of(1.0);
        let m = full.a_at_node(k, 1, 0);
        assert!((m.get(1, 1) - 0.7696).abs() < 2e-3, "own diagonal {}", m.get(1, 1));
        assert!((m.get(0, 0) - 0.1319).abs() < 2e-3, "other diagonal {}", m.get(0, 0));
        assert!((m.get(1, 0) - (-0.1924)).abs() < 2e-3, "own row {}", m.get(1, 0));
        assert!((m.get(0, 2) - 0.0202).abs() < 2e-3, "off-off {}", m.get(0, 2));
    }

    #[test]
    fn pattern_matches_reduction() {
        let spec = reference_spec();
        for n in [3usize, 5] {
            let full = solve_full(&spec, n).unwrap();
            let red = solve_reduced(&spec, n).unwrap();
            let report = verify_pattern(&full, &red).unwrap();
            assert!(
                report.max_within_class_spread <= 1e-8,
                "N = {n}: spread {}",
                report.max_within_class_spread
            );
            assert!(
                report.max_prediction_deviation <= 1e-8,
                "N = {n}: deviation {}",
                report.max_prediction_deviation
            );
        }
    }

    #[test]
    fn terminal_pattern_algebra() {
        // At the horizon the touching-i class is -g/N = -a1(T)/(N-1) exactly.
        let spec = reference_spec();
        let n = 6;
        let red = solve_reduced(&spec, n).unwrap();
        let k = spec.grid.n_steps();
        for y in 0..2 {
            let a1_t = red.a1[y][k];
            let a3_t = -a1_t / (n as f64 - 1.0);
            assert!((a3_t - (-spec.costs.g()[y] / n as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn a3_identity_closes() {
        // a1^2 + (N-2) a1 a3 - (N-1) a3^2 = 0 with a3 = -a1/(N-1).
        let spec = reference_spec();
        let red = solve_reduced(&spec, 7).unwrap();
        let nf = 7.0;
        for y in 0..2 {
            for k in (0..=500).step_by(50) {
                let a1 = red.a1[y][k];
                let a3 = -a1 / (nf - 1.0);
                let residual = a1 * a1 + (nf - 2.0) * a1 * a3 - (nf - 1.0) * a3 * a3;
                assert!(residual.abs() < 1e-12 * (a1 * a1).max(1.0), "residual {residual}");
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let spec = reference_spec();
        assert!(matches!(
            solve_full_with(&spec, 20, 16, Scheme::Rk4),
            Err(SolveError::CapExceeded { n: 20, cap: 16 })
        ));
        assert!(solve_full(&spec, 3).is_ok());
        assert!(matches!(solve_full(&spec, 2), Err(SolveError::ShapeMismatch(_))));
    }

    #[test]
    fn player_symmetry_under_transposition() {
        // A_i equals A_0 conjugated by the (0 <-> i) transposition.
        let spec = reference_spec();
        let full = solve_full(&spec, 4).unwrap();
        for k in [0usize, 250, 500] {
            for y in 0..2 {
                let a0 = full.a_at_node(k, 0, y);
                for i in 1..4 {
                    let ai = full.a_at_node(k, i, y);
                    let perm = |p: usize| {
                        if p == 0 {
                            i
                        } else if p == i {
                            0
                        } else {
                            p
                        }
                    };
                    for p in 0..4 {
                        for q in 0..4 {
                            let diff = (ai.get(p, q) - a0.get(perm(p), perm(q))).abs();
                            assert!(diff < 1e-12, "player {i} entry ({p},{q}) diff {diff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ahat1_converges_to_mean_field_a() {
        let spec = reference_spec();
        let ric = solve_mfg_riccati(&spec).unwrap();
        let mut prev_gap = f64::INFINITY;
        for n in [8usize, 16, 32, 64, 128] {
            let red = solve_reduced(&spec, n).unwrap();
            let mut gap: f64 = 0.0;
            for y in 0..2 {
                for k in 0..=500 {
                    gap = gap.max((red.ahat1[y][k] - ric.a[y][k]).abs());
                }
            }
            assert!(gap < prev_gap, "gap not decreasing at N = {n}");
            prev_gap = gap;
        }
        // N = 10^4 proxy for the limit
        let red = solve_reduced(&spec, 10_000).unwrap();
        let mut gap: f64 = 0.0;
        for y in 0..2 {
            for k in 0..=500 {
                gap = gap.max((red.ahat1[y][k] - ric.a[y][k]).abs());
            }
        }
        assert!(gap < 1e-3, "N = 10^4 gap {gap}");
    }

    #[test]
    fn value_function_at_origin_is_constant_term() {
        let spec = reference_spec();
        let full = solve_full(&spec, 4).unwrap();
        let x = vec![0.0; 4];
        let v = value_function_vi(&full, 2, 1, &x).unwrap();
        assert_eq!(v, full.c_at_node(0, 2, 1));
        assert!(matches!(
            value_function_vi(&full, 0, 0, &[0.0; 3]),
            Err(SolveError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn identical_positions_have_zero_terminal_cost_form() {
        // (e_i - e_j)^T (x 1) = 0, so the Lambda quadratic form vanishes.
        let spec = reference_spec();
        let full = solve_full(&spec, 5).unwrap();
        let k = spec.grid.n_steps();
        let x = vec![1.7; 5];
        for i in 0..5 {
            let m = full.a_at_node(k, i, 0);
            assert!(m.quad_form(&x).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_matches_full_system_drift() {
        let spec = reference_spec();
        let n = 5;
        let full = solve_full(&spec, n).unwrap();
        let red = solve_reduced(&spec, n).unwrap();
        let x = vec![0.3, -1.2, 0.8, 2.0, -0.5];
        for t in [0.0, 1.0, 2.5, 4.0] {
            let k = full.node_of(t);
            let node_t = spec.grid.node(k);
            let drift = nplayer_drift(&red, &spec, 0, node_t, &x).unwrap();
            for (i, &di) in drift.iter().enumerate() {
                // full-system drift: b1 x_i - 2 b2^2 (A_iy column i) . x
                let col = full.a_at_node(k, i, 0).column(i);
                let dot: f64 = col.iter().zip(&x).map(|(a, b)| a * b).sum();
                let full_drift = -2.0 * dot;
                assert!(
                    (di - full_drift).abs() < 1e-8,
                    "t = {t}, player {i}: {di} vs {full_drift}"
                );
            }
        }
    }

    #[test]
    fn pattern_value_matches_full_value() {
        let spec = reference_spec();
        let n = 5;
        let full = solve_full(&spec, n).unwrap();
        let red = solve_reduced(&spec, n).unwrap();
        let offset = pattern_value_offset(&spec, &red).unwrap();
        let x = vec![0.4, -0.9, 1.6, 0.1, -2.2];
        for y in 0..2 {
            let via_full = value_function_vi(&full, 0, y, &x).unwrap();
            let via_pattern = pattern_value_v1(&red, &offset, y, &x);
            assert!(
                (via_full - via_pattern).abs() < 1e-6,
                "state {y}: {via_full} vs {via_pattern}"
            );
        }
    }

    #[test]
    fn drift_is_exchangeable() {
        let spec = reference_spec();
        let red = solve_reduced(&spec, 4).unwrap();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let drift = nplayer_drift(&red, &spec, 1, 2.0, &x).unwrap();
        // permuting the other players' coordinates leaves player 0 alone
        let x_perm = vec![1.0, 4.0, 2.0, 3.0];
        let drift_perm = nplayer_drift(&red, &spec, 1, 2.0, &x_perm).unwrap();
        assert!((drift[0] - drift_perm[0]).abs() < 1e-15);
        // all-equal positions: interaction vanishes, drift = b1 x = 0 here
        let equal = vec![2.2; 4];
        let drift_eq = nplayer_drift(&red, &spec, 0, 1.0, &equal).unwrap();
        assert!(drift_eq.iter().all(|&v| v.abs() < 1e-15));
    }
}
