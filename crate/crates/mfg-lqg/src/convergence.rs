//! Quantitative verification of the N-player-to-mean-field convergence.
//!
//! The coupled gap `Z^N - Xhat` dominates the squared 2-Wasserstein
//! distance between the N-player and mean-field equilibrium laws, so its
//! Monte Carlo moments are the primary convergence estimate. Alongside:
//! the deterministic coefficient gap `sup |ahat1^N - a|`, marginal 1-d
//! Wasserstein distances as a diagnostic, log-log rate regression, the
//! moment fixed-point check, and a two-sample Kolmogorov–Smirnov test
//! for the coupling's distributional identity.

use crate::model::ModelSpec;
use crate::nplayer::{solve_reduced, ReducedRiccatiN};
use crate::paths::{
    simulate_conditional_moments, simulate_coupled_pair, simulate_mfg_path, CouplingRun,
    SimError, SimOptions, StreamFactory,
};
use crate::riccati::{solve_mfg_riccati, RiccatiMFG, SolveError};
use crate::ctmc::CtmcPath;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatError {
    #[error("value {value} at index {index} must be strictly positive for a log-log fit")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("empty sample set")]
    EmptySamples,
    #[error("sample counts differ: {0} vs {1}")]
    SampleCountMismatch(usize, usize),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Ordinary least squares of `log(value)` on `log(n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits the log-log regression `log v = slope * log n + intercept`.
pub fn fit_rate(ns: &[f64], values: &[f64]) -> Result<RateFit, StatError> {
    if ns.len() != values.len() {
        return Err(StatError::SampleCountMismatch(ns.len(), values.len()));
    }
    if ns.len() < 3 {
        return Err(StatError::TooFewPoints { needed: 3, got: ns.len() });
    }
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value <= 0.0 {
            return Err(StatError::NonPositiveValue { index, value });
        }
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit { slope, intercept, r_squared })
}

/// Exact empirical 1-d 2-Wasserstein distance by sorted quantile pairing:
/// the root mean square of order-statistic differences.
pub fn w2_empirical_1d(a: &[f64], b: &[f64]) -> Result<f64, StatError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatError::EmptySamples);
    }
    if a.len() != b.len() {
        return Err(StatError::SampleCountMismatch(a.len(), b.len()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let mean_sq = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Two-sample Kolmogorov–Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided two-sample KS statistic with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTestResult, StatError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatError::EmptySamples);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let (n, m) = (sa.len(), sb.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let xa = sa[i];
        let xb = sb[j];
        let x = xa.min(xb);
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = (n as f64 * m as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    // Kolmogorov tail series, alternating and fast-converging.
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    Ok(KsTestResult { statistic: d, p_value: (2.0 * p).clamp(0.0, 1.0) })
}

/// Monte Carlo gap statistics at one evaluation time.
#[derive(Debug, Clone, Copy)]
pub struct GapStatistic {
    pub t: f64,
    /// Mean of `gap^2` over replicas.
    pub mean_sq: f64,
    /// Standard error of `mean_sq`.
    pub se_mean_sq: f64,
    /// `sqrt(mean_sq)`.
    pub rms: f64,
    /// Delta-method standard error of `rms`.
    pub se_rms: f64,
}

/// Output of the replica loop for one player count.
#[derive(Debug, Clone)]
pub struct GapEstimate {
    pub n_players: usize,
    pub replicas: usize,
    pub stats: Vec<GapStatistic>,
    /// Terminal-ish samples of the coupled pair at each evaluation time,
    /// kept for marginal diagnostics: `z_samples[i][r]` is replica `r`
    /// at `eval_times[i]`.
    pub z_samples: Vec<Vec<f64>>,
    pub xhat_samples: Vec<Vec<f64>>,
}

/// Runs `replicas` coupled simulations and reduces gap moments at the
/// requested evaluation times. Replicas own disjoint streams keyed by
/// their index, so the reduction is deterministic and parallel.
pub fn estimate_coupled_gap(
    spec: &ModelSpec,
    n_players: usize,
    replicas: usize,
    eval_times: &[f64],
    factory: &StreamFactory,
    opts: SimOptions,
) -> Result<GapEstimate, StatError> {
    let ric = solve_mfg_riccati(spec)?;
    let reduced = solve_reduced(spec, n_players)?;
    estimate_coupled_gap_solved(spec, &ric, &reduced, replicas, eval_times, factory, opts)
}

/// Same as [`estimate_coupled_gap`] with the solves supplied by the
/// caller (so a study over many player counts solves the mean-field
/// system once).
pub fn estimate_coupled_gap_solved(
    spec: &ModelSpec,
    ric: &RiccatiMFG,
    reduced: &ReducedRiccatiN,
    replicas: usize,
    eval_times: &[f64],
    factory: &StreamFactory,
    opts: SimOptions,
) -> Result<GapEstimate, StatError> {
    type ReplicaSamples = Result<(Vec<f64>, Vec<f64>), SimError>;
    let n_players = reduced.n_players;
    let per_replica: Vec<ReplicaSamples> = (0..replicas as u64)
        .into_par_iter()
        .map(|replica| {
            let y_path = factory.sample_y(replica, spec, 0);
            let mut streams = factory.replica(replica);
            let run: CouplingRun = simulate_coupled_pair(
                spec, ric, reduced, &y_path, &mut streams, n_players, opts,
            )?;
            let mut z_vals = Vec::with_capacity(eval_times.len());
            let mut x_vals = Vec::with_capacity(eval_times.len());
            for &t in eval_times {
                let k = run.grid.nearest_node(t);
                z_vals.push(run.z[k]);
                x_vals.push(run.xhat[k]);
            }
            Ok((z_vals, x_vals))
        })
        .collect();

    let mut z_samples = vec![Vec::with_capacity(replicas); eval_times.len()];
    let mut xhat_samples = vec![Vec::with_capacity(replicas); eval_times.len()];
    for result in per_replica {
        let (z_vals, x_vals) = result?;
        for (i, (z, x)) in z_vals.into_iter().zip(x_vals).enumerate() {
            z_samples[i].push(z);
            xhat_samples[i].push(x);
        }
    }

    let stats = eval_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let sq: Vec<f64> = z_samples[i]
                .iter()
                .zip(&xhat_samples[i])
                .map(|(z, x)| (z - x) * (z - x))
                .collect();
            let r = sq.len() as f64;
            let mean_sq = sq.iter().sum::<f64>() / r;
            let var_sq = sq.iter().map(|v| (v - mean_sq).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
            let se_mean_sq = (var_sq / r).sqrt();
            let rms = mean_sq.sqrt();
            let se_rms = if rms > 0.0 { se_mean_sq / (2.0 * rms) } else { 0.0 };
            GapStatistic { t, mean_sq, se_mean_sq, rms, se_rms }
        })
        .collect();

    Ok(GapEstimate { n_players, replicas, stats, z_samples, xhat_samples })
}

/// `sup_{t,y} |ahat1^N - a|` for each player count.
pub fn coefficient_gap(spec: &ModelSpec, ns: &[usize]) -> Result<Vec<f64>, StatError> {
    let ric = solve_mfg_riccati(spec)?;
    ns.iter()
        .map(|&n| {
            let reduced = solve_reduced(spec, n)?;
            let mut gap: f64 = 0.0;
            for y in 0..spec.kappa() {
                for k in 0..spec.grid.n_nodes() {
                    gap = gap.max((reduced.ahat1[y][k] - ric.a[y][k]).abs());
                }
            }
            Ok(gap)
        })
        .collect()
}

/// One moment comparison of the fixed-point check.
#[derive(Debug, Clone, Copy)]
pub struct MomentCheckRow {
    pub t: f64,
    pub mu_mc: f64,
    pub mu_ode: f64,
    pub z_mu: f64,
    pub nu_mc: f64,
    pub nu_ode: f64,
    pub z_nu: f64,
}

/// Monte Carlo conditional moments given a fixed chain path versus the
/// deterministic moment ODEs.
#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub replicas: usize,
    pub rows: Vec<MomentCheckRow>,
    /// The ODE second-moment series on the refined grid, for trend checks.
    pub nu_series: Vec<f64>,
    pub times: Vec<f64>,
}

impl FixedPointReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.z_mu.abs(), r.z_nu.abs()])
            .fold(0.0, f64::max)
    }

    pub fn nu_strictly_decreasing(&self) -> bool {
        self.nu_series.windows(2).all(|w| w[1] < w[0])
    }
}

/// Simulates `replicas` equilibrium paths against one fixed chain path
/// and z-scores the empirical conditional moments against the moment
/// ODEs at the requested times.
pub fn fixed_point_check(
    spec: &ModelSpec,
    ric: &RiccatiMFG,
    y_path: &CtmcPath,
    replicas: usize,
    eval_times: &[f64],
    factory: &StreamFactory,
    opts: SimOptions,
) -> Result<FixedPointReport, StatError> {
    let moments = simulate_conditional_moments(spec, ric, y_path)?;
    let node_of: Vec<usize> = eval_times.iter().map(|&t| moments.grid.nearest_node(t)).collect();

    let samples: Vec<Result<Vec<f64>, SimError>> = (0..replicas as u64)
        .into_par_iter()
        .map(|replica| {
            let mut streams = factory.replica(replica);
            let set = simulate_mfg_path(spec, ric, y_path, &mut streams, opts)?;
            let xhat = set.get("xhat").expect("xhat series");
            Ok(node_of.iter().map(|&k| xhat[k]).collect())
        })
        .collect();

    let mut per_time: Vec<Vec<f64>> = vec![Vec::with_capacity(replicas); eval_times.len()];
    for s in samples {
        for (i, v) in s?.into_iter().enumerate() {
            per_time[i].push(v);
        }
    }

    let rows = eval_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let xs = &per_time[i];
            let r = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / r;
            let second = xs.iter().map(|x| x * x).sum::<f64>() / r;
            let var_mean = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
            let var_second =
                xs.iter().map(|x| (x * x - second).powi(2)).sum::<f64>() / (r - 1.0);
            let k = node_of[i];
            let mu_ode = moments.mu[k];
            let nu_ode = moments.nu[k];
            let z_mu = (mean - mu_ode) / (var_mean / r).sqrt();
            let z_nu = (second - nu_ode) / (var_second / r).sqrt();
            MomentCheckRow { t, mu_mc: mean, mu_ode, z_mu, nu_mc: second, nu_ode, z_nu }
        })
        .collect();

    Ok(FixedPointReport {
        replicas,
        rows,
        nu_series: moments.nu.clone(),
        times: moments.grid.times().to_vec(),
    })
}

/// One row of the convergence report.
#[derive(Debug, Clone, Copy)]
pub struct ReportRow {
    pub n_players: usize,
    pub t: f64,
    pub gap_rms: f64,
    pub gap_se: f64,
    pub coef_gap: f64,
    pub w2_marginal: f64,
}

/// Full convergence study over a ladder of player counts with common
/// random numbers.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub ns: Vec<usize>,
    pub eval_times: Vec<f64>,
    pub replicas: usize,
    pub rows: Vec<ReportRow>,
    /// Log-log fit of terminal `gap_rms` against N; `None` when the gaps
    /// are degenerate (zero) and the slope is undefined.
    pub fit: Option<RateFit>,
    pub degenerate: bool,
}

/// Runs the coupled-gap estimate for every player count (same streams
/// across counts: common random numbers), collects coefficient gaps and
/// marginal Wasserstein diagnostics, and fits the terminal-time rate.
pub fn run_convergence_study(
    spec: &ModelSpec,
    ns: &[usize],
    replicas: usize,
    eval_times: &[f64],
    factory: &StreamFactory,
    opts: SimOptions,
) -> Result<ConvergenceReport, StatError> {
    if ns.len() < 3 {
        return Err(StatError::TooFewPoints { needed: 3, got: ns.len() });
    }
    let ric = solve_mfg_riccati(spec)?;
    let coef_gaps = coefficient_gap(spec, ns)?;

    let mut rows = Vec::new();
    let mut terminal_rms = Vec::new();
    for (&n, &coef_gap) in ns.iter().zip(&coef_gaps) {
        let reduced = solve_reduced(spec, n)?;
        let est =
            estimate_coupled_gap_solved(spec, &ric, &reduced, replicas, eval_times, factory, opts)?;
        for (i, stat) in est.stats.iter().enumerate() {
            let w2 = w2_empirical_1d(&est.z_samples[i], &est.xhat_samples[i])?;
            rows.push(ReportRow {
                n_players: n,
                t: stat.t,
                gap_rms: stat.rms,
                gap_se: stat.se_rms,
                coef_gap,
                w2_marginal: w2,
            });
        }
        terminal_rms.push(est.stats.last().expect("at least one eval time").rms);
    }

    let degenerate = terminal_rms.iter().any(|&v| v <= 0.0);
    let fit = if degenerate {
        None
    } else {
        Some(fit_rate(
            &ns.iter().map(|&n| n as f64).collect::<Vec<_>>(),
            &terminal_rms,
        )?)
    };

    Ok(ConvergenceReport {
        ns: ns.to_vec(),
        eval_times: eval_times.to_vec(),
        replicas,
        rows,
        fit,
        degenerate,
    })
}

/// `N,t,gap_rms,gap_se,coef_gap,w2_marginal` rows followed by a comment
/// summary line with the fitted slope and r^2.
pub fn report_csv(report: &ConvergenceReport) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("N,t,gap_rms,gap_se,coef_gap,w2_marginal\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.n_players,
            fmt_real(row.t),
            fmt_real(row.gap_rms),
            fmt_real(row.gap_se),
            fmt_real(row.coef_gap),
            fmt_real(row.w2_marginal),
        ));
    }
    match &report.fit {
        Some(fit) => out.push_str(&format!(
            "# fitted_slope={} intercept={} r2={} (log gap_rms vs log N at t={})\n",
            fmt_real(fit.slope),
            fmt_real(fit.intercept),
            fmt_real(fit.r_squared),
            fmt_real(*report.eval_times.last().expect("eval times")),
        )),
        None => out.push_str("# degenerate: all gaps zero, slope undefined\n"),
    }
    out
}

/// `t,mu_mc,mu_ode,z_mu,nu_mc,nu_ode,z_nu` rows of a fixed-point report.
pub fn fixed_point_csv(report: &FixedPointReport) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("t,mu_mc,mu_ode,z_mu,nu_mc,nu_ode,z_nu\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_real(row.t),
            fmt_real(row.mu_mc),
            fmt_real(row.mu_ode),
            fmt_real(row.z_mu),
            fmt_real(row.nu_mc),
            fmt_real(row.nu_ode),
            fmt_real(row.z_nu),
        ));
    }
    out
}
