//! Stochastic simulation of the equilibrium processes.
//!
//! Everything runs on a jump-refined grid: the chain path's exact jump
//! times are inserted between the solve nodes, so coefficients are
//! piecewise smooth inside every cell and no Euler step straddles a
//! regime switch. Stochastic integrals use the left-point rule, ordinary
//! integrals the trapezoid rule.
//!
//! Randomness comes from counter-based streams: one master seed plus an
//! explicit `(replica, role, lane)` key per stream, so replicas are
//! reproducible, embarrassingly parallel, and share noise across player
//! counts for common-random-numbers coupling.

use crate::ctmc::{sample_path, CtmcPath};
use crate::model::{InitialFamily, InitialLaw, ModelSpec};
use crate::nplayer::ReducedRiccatiN;
use crate::riccati::RiccatiMFG;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

/// Noise role of a stream within one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// The generic player's Brownian motion (lane = player index in the
    /// N-player system).
    W,
    /// The population-average Brownian motion of the coupling.
    B,
    /// The common-noise chain.
    Y,
    /// Initial-state draws.
    Init,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::W => 0,
            Role::B => 1,
            Role::Y => 2,
            Role::Init => 3,
        }
    }
}

/// Counter-based stream factory: `(seed, experiment)` fix the generator
/// key, `(replica, role, lane)` select the stream. Distinct keys give
/// statistically independent streams; identical keys reproduce bit for
/// bit.
#[derive(Debug, Clone, Copy)]
pub struct StreamFactory {
    seed: u64,
    experiment: u64,
}

impl StreamFactory {
    pub fn new(seed: u64, experiment: u64) -> Self {
        StreamFactory { seed, experiment }
    }

    /// Stream for `(replica, role, lane)`. Replicas up to 2^38 and lanes
    /// up to 2^24 fit the 64-bit stream counter.
    pub fn stream(&self, replica: u64, role: Role, lane: u64) -> ChaCha8Rng {
        assert!(lane < (1 << 24), "lane out of range");
        assert!(replica < (1 << 38), "replica out of range");
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.experiment.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream((replica << 26) | (role.tag() << 24) | lane);
        rng
    }

    /// The stream key of one replica, for provenance records.
    pub fn key_for(&self, replica: u64) -> StreamKey {
        StreamKey { seed: self.seed, experiment: self.experiment, replica }
    }

    /// The three single-lane streams plus the init stream of one replica.
    pub fn replica(&self, replica: u64) -> ReplicaStreams {
        ReplicaStreams {
            w: self.stream(replica, Role::W, 0),
            b: self.stream(replica, Role::B, 0),
            init: self.stream(replica, Role::Init, 0),
            key: self.key_for(replica),
        }
    }

    /// Samples the replica's common-noise path.
    pub fn sample_y(
        &self,
        replica: u64,
        spec: &ModelSpec,
        initial_state: usize,
    ) -> CtmcPath {
        let mut rng = self.stream(replica, Role::Y, 0);
        sample_path(&spec.generator, initial_state, spec.horizon(), &mut rng)
    }
}

/// Identifies the exact streams a simulation consumed; replaying the
/// same key reproduces it bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub experiment: u64,
    pub replica: u64,
}

/// Per-replica noise streams for the coupled simulations.
#[derive(Debug, Clone)]
pub struct ReplicaStreams {
    pub w: ChaCha8Rng,
    pub b: ChaCha8Rng,
    pub init: ChaCha8Rng,
    pub key: StreamKey,
}

/// Draws from the initial law according to its family tag.
pub fn sample_initial<R: Rng + ?Sized>(law: &InitialLaw, rng: &mut R) -> f64 {
    match law.family {
        InitialFamily::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            law.mu0 + law.variance().sqrt() * z
        }
    }
}

/// Simulation controls.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Euler substeps per refined-grid cell. The scheme stays
    /// Euler–Maruyama; substeps only shrink its step.
    pub substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { substeps: 1 }
    }
}

/// Solve-grid nodes with the chain's jump times inserted (sorted,
/// deduplicated). All simulated series live on these times.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedGrid {
    times: Vec<f64>,
}

impl RefinedGrid {
    pub fn new(spec: &ModelSpec, y_path: &CtmcPath) -> Result<Self, SimError> {
        if (y_path.horizon - spec.horizon()).abs() > 1e-12 {
            return Err(SimError::GridMismatch(format!(
                "chain path horizon {} differs from grid horizon {}",
                y_path.horizon,
                spec.horizon()
            )));
        }
        let mut times = spec.grid.times();
        times.extend(y_path.jump_times.iter().copied());
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        times.dedup();
        Ok(RefinedGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()).is_ok()
    }

    /// Index of the node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i >= self.times.len() {
                    self.times.len() - 1
                } else if (self.times[i] - t).abs() < (t - self.times[i - 1]).abs() {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

/// A sampled curve on an explicit time grid (shared, strictly increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SampledCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, SimError> {
        if times.len() != values.len() {
            return Err(SimError::GridMismatch(format!(
                "{} times vs {} values",
                times.len(),
                values.len()
            )));
        }
        Ok(SampledCurve { times, values })
    }
}

/// `exp(int_0^t phi ds)` with trapezoid quadrature; `t` may fall between
/// nodes, in which case the last partial cell uses the interpolated
/// endpoint.
pub fn exp_integral(phi: &SampledCurve, t: f64) -> f64 {
    let times = &phi.times;
    let values = &phi.values;
    let mut integral = 0.0;
    for k in 0..times.len() - 1 {
        if times[k + 1] <= t {
            integral += 0.5 * (times[k + 1] - times[k]) * (values[k] + values[k + 1]);
        } else {
            if times[k] < t {
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                let v_t = values[k] + w * (values[k + 1] - values[k]);
                integral += 0.5 * (t - times[k]) * (values[k] + v_t);
            }
            break;
        }
    }
    integral.exp()
}

/// Path-space solution map
///
/// ```text
/// G_t = x E_t(phi1 - phi2) + E_t(phi1 - phi2)
///         int_0^t E_s(phi2 - phi1) (phi2(s) phi3(s) ds + dW_s)
/// ```
///
/// evaluated at every node of the common grid. `w_increments[k]` is the
/// noise increment over cell `k` (left-point rule); the `phi2 phi3 ds`
/// integral uses the trapezoid rule. This is the flow whose Lipschitz
/// dependence on `(phi2, phi3)` drives the coupling estimates.
pub fn solution_map_g(
    x: f64,
    phi1: &SampledCurve,
    phi2: &SampledCurve,
    phi3: &SampledCurve,
    w_increments: &[f64],
) -> Result<Vec<f64>, SimError> {
    let times = &phi1.times;
    let n_nodes = times.len();
    for (name, curve) in [("phi2", phi2), ("phi3", phi3)] {
        if curve.times != *times {
            return Err(SimError::GridMismatch(format!("{name} grid differs from phi1")));
        }
    }
    if w_increments.len() + 1 != n_nodes {
        return Err(SimError::GridMismatch(format!(
            "{} increments for {} nodes",
            w_increments.len(),
            n_nodes
        )));
    }

    // Cumulative integral of (phi1 - phi2) at every node.
    let mut growth = vec![0.0; n_nodes];
    for k in 0..n_nodes - 1 {
        let dt = times[k + 1] - times[k];
        let diff_l = phi1.values[k] - phi2.values[k];
        let diff_r = phi1.values[k + 1] - phi2.values[k + 1];
        growth[k + 1] = growth[k] + 0.5 * dt * (diff_l + diff_r);
    }

    let mut out = vec![0.0; n_nodes];
    out[0] = x;
    let mut ordinary = 0.0;
    let mut stochastic = 0.0;
    for k in 0..n_nodes - 1 {
        let dt = times[k + 1] - times[k];
        let f_l = (-growth[k]).exp() * phi2.values[k] * phi3.values[k];
        let f_r = (-growth[k + 1]).exp() * phi2.values[k + 1] * phi3.values[k + 1];
        ordinary += 0.5 * dt * (f_l + f_r);
        stochastic += (-growth[k]).exp() * w_increments[k];
        out[k + 1] = growth[k + 1].exp() * (x + ordinary + stochastic);
    }
    Ok(out)
}

/// Named series sampled on one refined grid, with the chain path that
/// produced it and the stream key that makes it replayable.
#[derive(Debug, Clone)]
pub struct SamplePathSet {
    pub grid: RefinedGrid,
    pub series: Vec<(String, Vec<f64>)>,
    pub y_path: CtmcPath,
    pub streams: StreamKey,
}

impl SamplePathSet {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

/// Conditional first and second moments of the equilibrium state given
/// the chain path, on the refined grid.
#[derive(Debug, Clone)]
pub struct MomentODESolution {
    pub grid: RefinedGrid,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl MomentODESolution {
    /// Conditional variance `nu - mu^2` at a node.
    pub fn variance(&self, k: usize) -> f64 {
        self.nu[k] - self.mu[k] * self.mu[k]
    }
}

/// Deterministic forward integration of the conditional moment ODEs
/// along a fixed chain path:
///
/// ```text
/// mu' = b1 mu
/// nu' = 1 + 2 b1 nu - 4 b2^2 a nu + 4 b2^2 a mu^2
/// ```
///
/// RK4 inside every refined cell (coefficients are smooth there).
pub fn simulate_conditional_moments(
    spec: &ModelSpec,
    ric: &RiccatiMFG,
    y_path: &CtmcPath,
) -> Result<MomentODESolution, SimError> {
    let grid = RefinedGrid::new(spec, y_path)?;
    let times = grid.times();
    let mut mu = vec![0.0; times.len()];
    let mut nu = vec![0.0; times.len()];
    mu[0] = spec.initial.mu0;
    nu[0] = spec.initial.nu0;

    for k in 0..times.len() - 1 {
        let t0 = times[k];
        let dt = times[k + 1] - t0;
        let y = y_path.state_at(t0).expect("node inside horizon");
        let rhs = |t: f64, m: f64, v: f64| -> (f64, f64) {
            let b1 = spec.b1(y, t.min(spec.horizon()));
            let b2sq = spec.b2(y, t.min(spec.horizon())).powi(2);
            let a = ric.a_at(y, t.min(spec.horizon()));
            (b1 * m, 1.0 + 2.0 * b1 * v - 4.0 * b2sq * a * v + 4.0 * b2sq * a * m * m)
        };
        let (m, v) = (mu[k], nu[k]);
        let (k1m, k1v) = rhs(t0, m, v);
        let (k2m, k2v) = rhs(t0 + 0.5 * dt, m + 0.5 * dt * k1m, v + 0.5 * dt * k1v);
        let (k3m, k3v) = rhs(t0 + 0.5 * dt, m + 0.5 * dt * k2m, v + 0.5 * dt * k2v);
        let (k4m, k4v) = rhs(t0 + dt, m + dt * k3m, v + dt * k3v);
        mu[k + 1] = m + dt / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        nu[k + 1] = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    Ok(MomentODESolution { grid, mu, nu })
}

/// Euler–Maruyama simulation of the mean-field equilibrium path
///
/// `dX = (b1 X - 2 b2^2 a_Y (X - mu)) dt + dW`
///
/// with the conditional mean `mu' = b1 mu` stepped alongside. Returns
/// series `xhat` and `mu` on the refined grid.
pub fn simulate_mfg_path(
    spec: &ModelSpec,
    ric: &RiccatiMFG,
    y_path: &CtmcPath,
    streams: &mut ReplicaStreams,
    opts: SimOptions,
) -> Result<SamplePathSet, SimError> {
    let grid = RefinedGrid::new(spec, y_path)?;
    let times = grid.times().to_vec();
    let n_nodes = times.len();
    let substeps = opts.substeps.max(1);

    let x0 = sample_initial(&spec.initial, &mut streams.init);
    let mut xhat = vec![0.0; n_nodes];
    let mut mu = vec![0.0; n_nodes];
    xhat[0] = x0;
    mu[0] = spec.initial.mu0;

    let mut x = x0;
    let mut m = spec.initial.mu0;
    for k in 0..n_nodes - 1 {
        let y = y_path.state_at(times[k]).expect("node inside horizon");
        let dt = (times[k + 1] - times[k]) / substeps as f64;
        let sqrt_dt = dt.sqrt();
        for s in 0..substeps {
            let t = times[k] + s as f64 * dt;
            let b1 = spec.b1(y, t);
            let b2sq = spec.b2(y, t).powi(2);
            let a = ric.a_at(y, t);
            let z: f64 = streams.w.sample(StandardNormal);
            x += (b1 * x - 2.0 * b2sq * a * (x - m)) * dt + sqrt_dt * z;
            m += b1 * m * dt;
        }
        xhat[k + 1] = x;
        mu[k + 1] = m;
    }

    Ok(SamplePathSet {
        grid,
        series: vec![("xhat".into(), xhat), ("mu".into(), mu)],
        y_path: y_path.clone(),
        streams: streams.key,
    })
}

/// Euler–Maruyama simulation of all N player paths under the equilibrium
/// feedback, plus their running average `xbar`. Player `i` reads lane `i`
/// of the W role, so relabeling seeds permutes paths identically.
pub fn simulate_nplayer(
    spec: &ModelSpec,
    reduced: &ReducedRiccatiN,
    y_path: &CtmcPath,
    factory: &StreamFactory,
    replica: u64,
    opts: SimOptions,
) -> Result<SamplePathSet, SimError> {
    let grid = RefinedGrid::new(spec, y_path)?;
    let times = grid.times().to_vec();
    let n_nodes = times.len();
    let n = reduced.n_players;
    let nf = n as f64;
    let substeps = opts.substeps.max(1);

    let mut init = factory.stream(replica, Role::Init, 0);
    let mut x: Vec<f64> = (0..n).map(|_| sample_initial(&spec.initial, &mut init)).collect();
    let mut w_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| factory.stream(replica, Role::W, i as u64)).collect();

    let mut series: Vec<Vec<f64>> = (0..n).map(|i| vec![x[i]; 1]).collect();
    let mut xbar_series = vec![x.iter().sum::<f64>() / nf];

    let mut next = vec![0.0; n];
    for k in 0..n_nodes - 1 {
        let y = y_path.state_at(times[k]).expect("node inside horizon");
        let dt = (times[k + 1] - times[k]) / substeps as f64;
        let sqrt_dt = dt.sqrt();
        for s in 0..substeps {
            let t = times[k] + s as f64 * dt;
            let b1 = spec.b1(y, t);
            let b2sq = spec.b2(y, t).powi(2);
            let a1 = reduced.a1_at(y, t);
            let total: f64 = x.iter().sum();
            for i in 0..n {
                let others_mean = (total - x[i]) / (nf - 1.0);
                let drift = b1 * x[i] - 2.0 * b2sq * a1 * (x[i] - others_mean);
                let z: f64 = w_rngs[i].sample(StandardNormal);
                next[i] = x[i] + drift * dt + sqrt_dt * z;
            }
            x.copy_from_slice(&next);
        }
        for i in 0..n {
            series[i].push(x[i]);
        }
        xbar_series.push(x.iter().sum::<f64>() / nf);
    }

    let mut named: Vec<(String, Vec<f64>)> = series
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("x_{i}"), s))
        .collect();
    named.push(("xbar".into(), xbar_series));
    Ok(SamplePathSet {
        grid,
        series: named,
        y_path: y_path.clone(),
        streams: factory.key_for(replica),
    })
}

/// The coupled quadruple driven by shared noise `(W, B, Y, X0 draws)`:
///
/// * `z`: the distribution copy of player 1's N-player equilibrium path,
///   `dZ = (b1 Z - 2 b2^2 ahat1 (Z - Xbar)) dt + dW`;
/// * `xbar`: `dXbar = b1 Xbar dt + (sqrt(N-1)/N) dB + (1/N) dW`, started
///   from the mean of the N initial draws;
/// * `xhat`: the mean-field path with the same `W` and the same `X0`;
/// * `mu`: the conditional mean ODE.
///
/// `gap = z - xhat` is the pathwise bound on the squared 2-Wasserstein
/// distance between the two equilibria.
#[derive(Debug, Clone)]
pub struct CouplingRun {
    pub grid: RefinedGrid,
    pub z: Vec<f64>,
    pub xbar: Vec<f64>,
    pub xhat: Vec<f64>,
    pub mu: Vec<f64>,
    pub y_path: CtmcPath,
    pub streams: StreamKey,
}

impl CouplingRun {
    pub fn gap(&self) -> Vec<f64> {
        self.z.iter().zip(&self.xhat).map(|(z, x)| z - x).collect()
    }

    pub fn gap_at(&self, k: usize) -> f64 {
        self.z[k] - self.xhat[k]
    }
}

/// Simulates the coupling. `n_aux` is the number of auxiliary initial
/// draws and must equal the reduced system's player count; the first
/// draw is shared between `z` and `xhat` as their common starting point.
pub fn simulate_coupled_pair(
    spec: &ModelSpec,
    ric: &RiccatiMFG,
    reduced: &ReducedRiccatiN,
    y_path: &CtmcPath,
    streams: &mut ReplicaStreams,
    n_aux: usize,
    opts: SimOptions,
) -> Result<CouplingRun, SimError> {
    let n = reduced.n_players;
    if n_aux != n {
        return Err(SimError::GridMismatch(format!(
            "n_aux = {n_aux} must equal the player count {n}"
        )));
    }
    let grid = RefinedGrid::new(spec, y_path)?;
    let times = grid.times().to_vec();
    let n_nodes = times.len();
    let nf = n as f64;
    let substeps = opts.substeps.max(1);

    let draws: Vec<f64> = (0..n).map(|_| sample_initial(&spec.initial, &mut streams.init)).collect();
    let x0 = draws[0];
    let xbar0 = draws.iter().sum::<f64>() / nf;

    let mut z = vec![0.0; n_nodes];
    let mut xbar = vec![0.0; n_nodes];
    let mut xhat = vec![0.0; n_nodes];
    let mut mu = vec![0.0; n_nodes];
    z[0] = x0;
    xbar[0] = xbar0;
    xhat[0] = x0;
    mu[0] = spec.initial.mu0;

    let (mut zc, mut xb, mut xh, mut m) = (x0, xbar0, x0, spec.initial.mu0);
    let b_scale = (nf - 1.0).sqrt() / nf;
    for k in 0..n_nodes - 1 {
        let y = y_path.state_at(times[k]).expect("node inside horizon");
        let dt = (times[k + 1] - times[k]) / substeps as f64;
        let sqrt_dt = dt.sqrt();
        for s in 0..substeps {
            let t = times[k] + s as f64 * dt;
            let b1 = spec.b1(y, t);
            let b2sq = spec.b2(y, t).powi(2);
            let a = ric.a_at(y, t);
            let ahat1 = reduced.ahat1_at(y, t);
            let dw = sqrt_dt * streams.w.sample::<f64, _>(StandardNormal);
            let db = sqrt_dt * streams.b.sample::<f64, _>(StandardNormal);
            let z_new = zc + (b1 * zc - 2.0 * b2sq * ahat1 * (zc - xb)) * dt + dw;
            let xb_new = xb + b1 * xb * dt + b_scale * db + dw / nf;
            let xh_new = xh + (b1 * xh - 2.0 * b2sq * a * (xh - m)) * dt + dw;
            let m_new = m + b1 * m * dt;
            zc = z_new;
            xb = xb_new;
            xh = xh_new;
            m = m_new;
        }
        z[k + 1] = zc;
        xbar[k + 1] = xb;
        xhat[k + 1] = xh;
        mu[k + 1] = m;
    }

    Ok(CouplingRun { grid, z, xbar, xhat, mu, y_path: y_path.clone(), streams: streams.key })
}

/// `t,series_name,replica,value` rows for a batch of path sets.
pub fn series_csv(sets: &[(u64, &SamplePathSet)]) -> String {
    use crate::riccati::fmt_real;
    let mut out = String::from("t,series_name,replica,value\n");
    for (replica, set) in sets {
        for (name, values) in &set.series {
            for (k, &v) in values.iter().enumerate() {
                out.push_str(&format!(
                    "{},{name},{replica},{}\n",
                    fmt_real(set.grid.times()[k]),
                    fmt_real(v),
                ));
            }
        }
    }
    out
}
