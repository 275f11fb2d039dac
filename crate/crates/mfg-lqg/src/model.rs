//! Problem data: chain generator, coefficient curves, cost weights,
//! initial law, and time grid.
//!
//! Everything here is immutable after construction and fully validated,
//! so the solvers and simulators never re-check invariants. Configuration
//! documents (JSON or TOML) are parsed into [`ModelConfig`] and promoted
//! to a [`ModelSpec`] by [`ModelSpec::from_config`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation and configuration errors for model construction.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("generator entry ({row},{col}) = {value} is negative off the diagonal")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("generator row {row} sums to {residual} instead of 0")]
    RowSumNonzero { row: usize, residual: f64 },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("cost weight {which}[{state}] = {value} must be strictly positive")]
    CostNotPositive { which: &'static str, state: usize, value: f64 },
    #[error("initial law has negative variance: nu0 - mu0^2 = {variance}")]
    NegativeVariance { variance: f64 },
    #[error("curve {which}[{state}]: {message}")]
    BadCurve { which: &'static str, state: usize, message: String },
    #[error("`{field}` describes {got} states, expected {expected}")]
    KappaMismatch { field: &'static str, expected: usize, got: usize },
    #[error("invalid time grid: {message}")]
    InvalidGrid { message: String },
    #[error("time {t} is outside the curve domain")]
    OutOfRange { t: f64 },
    #[error("state {state} is out of range for {kappa} states")]
    StateOutOfRange { state: usize, kappa: usize },
}

/// Generator matrix of the common-noise chain.
///
/// Off-diagonal entries are jump rates (nonnegative) and every row sums
/// to zero, so `-q[y][y]` is the total exit rate of state `y`. States are
/// indexed `0..kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    q: Vec<Vec<f64>>,
}

/// Row-sum residual tolerance for generator validation.
pub const ROW_SUM_TOL: f64 = 1e-12;

impl Generator {
    /// Validates a square rate matrix and wraps it.
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        validate_generator(q)
    }

    pub fn kappa(&self) -> usize {
        self.q.len()
    }

    /// Rate entry `q[from][to]`.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.q[from][to]
    }

    /// Total exit rate of `state` (`-q[y][y]`, clamped at zero).
    pub fn exit_rate(&self, state: usize) -> f64 {
        (-self.q[state][state]).max(0.0)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.q
    }

    /// `sum_y |q[y][col]|` maximized over columns; the chain's
    /// contribution to the a-priori growth constant.
    pub fn max_column_abs_sum(&self) -> f64 {
        let kappa = self.kappa();
        (0..kappa)
            .map(|col| (0..kappa).map(|row| self.q[row][col].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Validates a square real matrix as a chain generator.
///
/// Accepts exactly the matrices with finite entries, nonnegative
/// off-diagonal rates, and rows summing to zero within [`ROW_SUM_TOL`].
pub fn validate_generator(q: Vec<Vec<f64>>) -> Result<Generator, ModelError> {
    let kappa = q.len();
    if kappa == 0 {
        return Err(ModelError::Schema {
            path: "generator".into(),
            message: "generator must have at least one state".into(),
        });
    }
    for (i, row) in q.iter().enumerate() {
        if row.len() != kappa {
            return Err(ModelError::Schema {
                path: "generator".into(),
                message: format!("row {i} has {} entries, expected {kappa}", row.len()),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::Schema {
                    path: "generator".into(),
                    message: format!("entry ({i},{j}) is not finite"),
                });
            }
            if i != j && v < 0.0 {
                return Err(ModelError::NegativeOffDiagonal { row: i, col: j, value: v });
            }
        }
        let residual: f64 = row.iter().sum();
        if residual.abs() > ROW_SUM_TOL {
            return Err(ModelError::RowSumNonzero { row: i, residual });
        }
    }
    Ok(Generator { q })
}

/// A piecewise-linear curve on `[0, T]` given by strictly increasing knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    knots: Vec<(f64, f64)>,
}

impl Curve {
    /// Constant curve covering `[0, horizon]`.
    pub fn constant(value: f64, horizon: f64) -> Self {
        Curve { knots: vec![(0.0, value), (horizon, value)] }
    }

    /// Validated knot curve; knots must be finite, strictly increasing in
    /// time, and cover `[0, horizon]`.
    pub fn from_knots(knots: Vec<(f64, f64)>, horizon: f64) -> Result<Self, ModelError> {
        Self::validate(knots, horizon, "curve", 0)
    }

    fn validate(
        knots: Vec<(f64, f64)>,
        horizon: f64,
        which: &'static str,
        state: usize,
    ) -> Result<Self, ModelError> {
        let bad = |message: String| ModelError::BadCurve { which, state, message };
        if knots.len() < 2 {
            return Err(bad("needs at least two knots".into()));
        }
        for &(t, v) in &knots {
            if !t.is_finite() || !v.is_finite() {
                return Err(bad(format!("non-finite knot ({t}, {v})")));
            }
        }
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(bad(format!("knot times {} and {} not strictly increasing", w[0].0, w[1].0)));
            }
        }
        if knots[0].0 > 0.0 || knots[knots.len() - 1].0 < horizon {
            return Err(bad(format!(
                "knots span [{}, {}] but must cover [0, {horizon}]",
                knots[0].0,
                knots[knots.len() - 1].0
            )));
        }
        Ok(Curve { knots })
    }

    /// Piecewise-linear interpolation; exact at knots.
    pub fn eval(&self, t: f64) -> Result<f64, ModelError> {
        let first = self.knots[0].0;
        let last = self.knots[self.knots.len() - 1].0;
        if !t.is_finite() || t < first || t > last {
            return Err(ModelError::OutOfRange { t });
        }
        // Binary search for the knot interval containing t.
        let idx = self.knots.partition_point(|&(kt, _)| kt <= t);
        if idx == self.knots.len() {
            return Ok(self.knots[idx - 1].1);
        }
        if idx == 0 {
            return Ok(self.knots[0].1);
        }
        let (t0, v0) = self.knots[idx - 1];
        let (t1, v1) = self.knots[idx];
        let w = (t - t0) / (t1 - t0);
        Ok(v0 + w * (v1 - v0))
    }

    /// Largest absolute knot-to-knot slope (Lipschitz constant).
    pub fn max_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
            .fold(0.0, f64::max)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// Selects one of the two per-state coefficient curves of the state
/// dynamics `dX = (b1 X + b2 alpha) dt + dW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coefficient {
    B1,
    B2,
}

/// Per-state drift (`b1`) and control (`b2`) coefficient curves on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientCurves {
    b1: Vec<Curve>,
    b2: Vec<Curve>,
}

impl CoefficientCurves {
    pub fn new(b1: Vec<Curve>, b2: Vec<Curve>) -> Result<Self, ModelError> {
        if b1.len() != b2.len() {
            return Err(ModelError::KappaMismatch {
                field: "curves.b2",
                expected: b1.len(),
                got: b2.len(),
            });
        }
        Ok(CoefficientCurves { b1, b2 })
    }

    /// All-states-constant curves, the shape used by every experiment
    /// with time-invariant coefficients.
    pub fn constants(b1: f64, b2: f64, kappa: usize, horizon: f64) -> Self {
        CoefficientCurves {
            b1: (0..kappa).map(|_| Curve::constant(b1, horizon)).collect(),
            b2: (0..kappa).map(|_| Curve::constant(b2, horizon)).collect(),
        }
    }

    pub fn kappa(&self) -> usize {
        self.b1.len()
    }

    pub fn curve(&self, which: Coefficient, state: usize) -> &Curve {
        match which {
            Coefficient::B1 => &self.b1[state],
            Coefficient::B2 => &self.b2[state],
        }
    }
}

/// Evaluates a coefficient curve at `(state, t)` by piecewise-linear
/// interpolation.
pub fn eval_coefficient(
    curves: &CoefficientCurves,
    which: Coefficient,
    state: usize,
    t: f64,
) -> Result<f64, ModelError> {
    if state >= curves.kappa() {
        return Err(ModelError::StateOutOfRange { state, kappa: curves.kappa() });
    }
    curves.curve(which, state).eval(t)
}

/// Per-state running (`h`) and terminal (`g`) quadratic cost weights.
///
/// Both must be strictly positive for every state; solutions can blow up
/// in finite time otherwise. [`CostParams::new_unchecked_sign`] admits
/// nonpositive weights for deliberate blow-up experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    h: Vec<f64>,
    g: Vec<f64>,
}

impl CostParams {
    pub fn new(h: Vec<f64>, g: Vec<f64>) -> Result<Self, ModelError> {
        Self::validate(&h, &g, true)?;
        Ok(CostParams { h, g })
    }

    /// Skips the positivity requirement but still rejects non-finite
    /// values and mismatched lengths.
    pub fn new_unchecked_sign(h: Vec<f64>, g: Vec<f64>) -> Result<Self, ModelError> {
        Self::validate(&h, &g, false)?;
        Ok(CostParams { h, g })
    }

    fn validate(h: &[f64], g: &[f64], require_positive: bool) -> Result<(), ModelError> {
        if h.len() != g.len() {
            return Err(ModelError::KappaMismatch { field: "costs.g", expected: h.len(), got: g.len() });
        }
        for (which, values) in [("h", h), ("g", g)] {
            for (state, &v) in values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::Schema {
                        path: format!("costs.{which}"),
                        message: format!("entry {state} is not finite"),
                    });
                }
                if require_positive && v <= 0.0 {
                    let which = if which == "h" { "h" } else { "g" };
                    return Err(ModelError::CostNotPositive { which, state, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> usize {
        self.h.len()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }
}

/// Sampling family for the initial state distribution. Only the first two
/// moments enter the deterministic solvers; the tag fixes how simulators
/// draw initial states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitialFamily {
    #[default]
    Gaussian,
}

/// First two moments of the initial state law, plus the sampling family.
///
/// The variance `nu0 - mu0^2` must be nonnegative; zero is allowed and
/// means a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialLaw {
    pub mu0: f64,
    pub nu0: f64,
    pub family: InitialFamily,
}

impl InitialLaw {
    pub fn new(mu0: f64, nu0: f64, family: InitialFamily) -> Result<Self, ModelError> {
        if !mu0.is_finite() || !nu0.is_finite() {
            return Err(ModelError::Schema {
                path: "initial".into(),
                message: "moments must be finite".into(),
            });
        }
        let variance = nu0 - mu0 * mu0;
        if variance < 0.0 {
            return Err(ModelError::NegativeVariance { variance });
        }
        Ok(InitialLaw { mu0, nu0, family })
    }

    pub fn variance(&self) -> f64 {
        (self.nu0 - self.mu0 * self.mu0).max(0.0)
    }
}

/// Uniform time grid `t_k = k * dt` on `[0, T]` with `dt = T / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, ModelError> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(ModelError::InvalidGrid { message: format!("horizon {horizon} must be positive") });
        }
        if n_steps == 0 {
            return Err(ModelError::InvalidGrid { message: "n_steps must be positive".into() });
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node time `t_k`; `node(n_steps)` returns the horizon exactly.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, n_steps: self.n_steps * factor.max(1) }
    }
}

/// A fully validated model: generator, curves, costs, initial law, grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub generator: Generator,
    pub curves: CoefficientCurves,
    pub costs: CostParams,
    pub initial: InitialLaw,
    pub grid: TimeGrid,
}

impl ModelSpec {
    /// Assembles a spec, checking that all parts agree on the state count.
    pub fn new(
        generator: Generator,
        curves: CoefficientCurves,
        costs: CostParams,
        initial: InitialLaw,
        grid: TimeGrid,
    ) -> Result<Self, ModelError> {
        let kappa = generator.kappa();
        if curves.kappa() != kappa {
            return Err(ModelError::KappaMismatch { field: "curves.b1", expected: kappa, got: curves.kappa() });
        }
        if costs.kappa() != kappa {
            return Err(ModelError::KappaMismatch { field: "costs.h", expected: kappa, got: costs.kappa() });
        }
        Ok(ModelSpec { generator, curves, costs, initial, grid })
    }

    pub fn kappa(&self) -> usize {
        self.generator.kappa()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// `b1(y, t)`, panicking on out-of-domain `t`; solvers only evaluate
    /// on the grid the curves were validated against.
    pub fn b1(&self, state: usize, t: f64) -> f64 {
        self.curves
            .curve(Coefficient::B1, state)
            .eval(t)
            .expect("b1 evaluated inside [0, T]")
    }

    pub fn b2(&self, state: usize, t: f64) -> f64 {
        self.curves
            .curve(Coefficient::B2, state)
            .eval(t)
            .expect("b2 evaluated inside [0, T]")
    }

    /// Promotes a parsed configuration document, enforcing every invariant.
    pub fn from_config(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::from_config_with(config, ValidationOptions::default())
    }

    /// Like [`ModelSpec::from_config`] but with relaxable cost positivity,
    /// used by deliberate blow-up experiments.
    pub fn from_config_with(
        config: &ModelConfig,
        options: ValidationOptions,
    ) -> Result<Self, ModelError> {
        let missing = |path: &str| ModelError::Schema {
            path: path.into(),
            message: "missing required field".into(),
        };

        let horizon = config.horizon.ok_or_else(|| missing("grid.horizon"))?;
        let n_steps = config.n_steps.ok_or_else(|| missing("grid.n_steps"))?;
        let grid = TimeGrid::new(horizon, n_steps)?;

        let q = config.generator.clone().ok_or_else(|| missing("generator"))?;
        let generator = validate_generator(q)?;
        let kappa = generator.kappa();

        let b1 = config
            .b1
            .clone()
            .ok_or_else(|| missing("curves.b1"))?
            .into_curves("b1", kappa, horizon)?;
        let b2 = config
            .b2
            .clone()
            .ok_or_else(|| missing("curves.b2"))?
            .into_curves("b2", kappa, horizon)?;
        let curves = CoefficientCurves::new(b1, b2)?;
        if curves.kappa() != kappa {
            return Err(ModelError::KappaMismatch { field: "curves.b1", expected: kappa, got: curves.kappa() });
        }

        let h = config.h.clone().ok_or_else(|| missing("costs.h"))?;
        let g = config.g.clone().ok_or_else(|| missing("costs.g"))?;
        if h.len() != kappa {
            return Err(ModelError::KappaMismatch { field: "costs.h", expected: kappa, got: h.len() });
        }
        if g.len() != kappa {
            return Err(ModelError::KappaMismatch { field: "costs.g", expected: kappa, got: g.len() });
        }
        let costs = if options.allow_nonpositive_costs {
            CostParams::new_unchecked_sign(h, g)?
        } else {
            CostParams::new(h, g)?
        };

        let initial_cfg = config.initial.as_ref().ok_or_else(|| missing("initial"))?;
        let mu0 = initial_cfg.mu0.ok_or_else(|| missing("initial.mu0"))?;
        let nu0 = initial_cfg.nu0.ok_or_else(|| missing("initial.nu0"))?;
        let initial = InitialLaw::new(mu0, nu0, initial_cfg.family.unwrap_or_default())?;

        ModelSpec::new(generator, curves, costs, initial, grid)
    }

    /// Round-trippable configuration document for this spec.
    pub fn to_config(&self) -> ModelConfig {
        let curve_spec = |which: Coefficient| {
            CurveConfig::PerState(
                (0..self.kappa())
                    .map(|y| {
                        let knots = self.curves.curve(which, y).knots();
                        let constant = knots.iter().all(|&(_, v)| v == knots[0].1);
                        if constant && knots.len() == 2 {
                            StateCurveConfig::Constant(knots[0].1)
                        } else {
                            StateCurveConfig::Knots(knots.iter().map(|&(t, v)| [t, v]).collect())
                        }
                    })
                    .collect(),
            )
        };
        ModelConfig {
            horizon: Some(self.grid.horizon()),
            n_steps: Some(self.grid.n_steps()),
            generator: Some(self.generator.rows().to_vec()),
            b1: Some(curve_spec(Coefficient::B1)),
            b2: Some(curve_spec(Coefficient::B2)),
            h: Some(self.costs.h().to_vec()),
            g: Some(self.costs.g().to_vec()),
            initial: Some(InitialConfig {
                mu0: Some(self.initial.mu0),
                nu0: Some(self.initial.nu0),
                family: Some(self.initial.family),
            }),
        }
    }
}

/// Toggles for config promotion.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    /// Admit `h <= 0` or `g <= 0` (blow-up experiments).
    pub allow_nonpositive_costs: bool,
}

/// Carrier syntax of a config document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

/// Raw configuration document. All fields optional so that missing-field
/// errors carry a precise path instead of serde's generic message.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub generator: Option<Vec<Vec<f64>>>,
    pub b1: Option<CurveConfig>,
    pub b2: Option<CurveConfig>,
    pub h: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub initial: Option<InitialConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mu0: Option<f64>,
    pub nu0: Option<f64>,
    pub family: Option<InitialFamily>,
}

/// Coefficient entry: one scalar broadcast to every state, or a per-state
/// list whose entries are scalars or `[[t, v], ...]` knot lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveConfig {
    Constant(f64),
    PerState(Vec<StateCurveConfig>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateCurveConfig {
    Constant(f64),
    Knots(Vec<[f64; 2]>),
}

impl CurveConfig {
    fn into_curves(
        self,
        which: &'static str,
        kappa: usize,
        horizon: f64,
    ) -> Result<Vec<Curve>, ModelError> {
        match self {
            CurveConfig::Constant(v) => {
                if !v.is_finite() {
                    return Err(ModelError::BadCurve { which, state: 0, message: "non-finite constant".into() });
                }
                Ok((0..kappa).map(|_| Curve::constant(v, horizon)).collect())
            }
            CurveConfig::PerState(entries) => {
                if entries.len() != kappa {
                    let field = if which == "b1" { "curves.b1" } else { "curves.b2" };
                    return Err(ModelError::KappaMismatch { field, expected: kappa, got: entries.len() });
                }
                entries
                    .into_iter()
                    .enumerate()
                    .map(|(state, entry)| match entry {
                        StateCurveConfig::Constant(v) => {
                            if !v.is_finite() {
                                Err(ModelError::BadCurve { which, state, message: "non-finite constant".into() })
                            } else {
                                Ok(Curve::constant(v, horizon))
                            }
                        }
                        StateCurveConfig::Knots(knots) => Curve::validate(
                            knots.into_iter().map(|[t, v]| (t, v)).collect(),
                            horizon,
                            which,
                            state,
                        ),
                    })
                    .collect()
            }
        }
    }
}

/// Parses a config document and promotes it to a validated [`ModelSpec`].
pub fn load_model(document: &str, format: ConfigFormat) -> Result<ModelSpec, ModelError> {
    let config = parse_config(document, format)?;
    ModelSpec::from_config(&config)
}

/// Parses a config document without promoting it.
pub fn parse_config(document: &str, format: ConfigFormat) -> Result<ModelConfig, ModelError> {
    match format {
        ConfigFormat::Json => serde_json::from_str(document).map_err(|e| ModelError::Schema {
            path: "<document>".into(),
            message: e.to_string(),
        }),
        ConfigFormat::Toml => toml::from_str(document).map_err(|e| ModelError::Schema {
            path: "<document>".into(),
            message: e.to_string(),
        }),
    }
}

/// Serializes a spec back to a JSON config document.
pub fn serialize_model(spec: &ModelSpec) -> String {
    serde_json::to_string_pretty(&spec.to_config()).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_config() -> ModelConfig {
        ModelConfig {
            horizon: Some(5.0),
            n_steps: Some(500),
            generator: Some(vec![vec![-0.5, 0.5], vec![0.6, -0.6]]),
            b1: Some(CurveConfig::Constant(0.0)),
            b2: Some(CurveConfig::Constant(1.0)),
            h: Some(vec![2.0, 5.0]),
            g: Some(vec![3.0, 1.0]),
            initial: Some(InitialConfig { mu0: Some(0.0), nu0: Some(2.0), family: None }),
        }
    }

    #[test]
    fn validates_two_state_generator() {
        let gen = validate_generator(vec![vec![-0.5, 0.5], vec![0.6, -0.6]]).unwrap();
        assert_eq!(gen.kappa(), 2);
        assert_eq!(gen.exit_rate(0), 0.5);
        assert_eq!(gen.exit_rate(1), 0.6);
    }

    #[test]
    fn single_absorbing_state_is_valid() {
        let gen = validate_generator(vec![vec![0.0]]).unwrap();
        assert_eq!(gen.kappa(), 1);
        assert_eq!(gen.exit_rate(0), 0.0);
    }

    #[test]
    fn rejects_nonzero_row_sum() {
        let err = validate_generator(vec![vec![-1.0, 0.5], vec![0.6, -0.6]]).unwrap_err();
        match err {
            ModelError::RowSumNonzero { row, residual } => {
                assert_eq!(row, 0);
                assert!((residual - (-0.5)).abs() < 1e-15);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_off_diagonal() {
        let err = validate_generator(vec![vec![0.3, -0.3], vec![0.6, -0.6]]).unwrap_err();
        assert!(matches!(err, ModelError::NegativeOffDiagonal { row: 0, col: 1, .. }));
    }

    #[test]
    fn loads_reference_config() {
        let spec = ModelSpec::from_config(&reference_config()).unwrap();
        assert_eq!(spec.kappa(), 2);
        assert!((spec.grid.dt() - 0.01).abs() < 1e-15);
        assert_eq!(spec.costs.h(), &[2.0, 5.0]);
        assert_eq!(spec.costs.g(), &[3.0, 1.0]);
        assert_eq!(spec.b2(0, 3.21), 1.0);
    }

    #[test]
    fn missing_terminal_cost_reports_path() {
        let mut cfg = reference_config();
        cfg.g = None;
        let err = ModelSpec::from_config(&cfg).unwrap_err();
        match err {
            ModelError::Schema { path, .. } => assert_eq!(path, "costs.g"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn negative_running_cost_violates_positivity() {
        let mut cfg = reference_config();
        cfg.h = Some(vec![-1.0, 2.0]);
        let err = ModelSpec::from_config(&cfg).unwrap_err();
        assert!(matches!(err, ModelError::CostNotPositive { which: "h", state: 0, .. }));
    }

    #[test]
    fn relaxed_validation_admits_negative_costs() {
        let mut cfg = reference_config();
        cfg.h = Some(vec![-2.0, -5.0]);
        let spec =
            ModelSpec::from_config_with(&cfg, ValidationOptions { allow_nonpositive_costs: true })
                .unwrap();
        assert_eq!(spec.costs.h(), &[-2.0, -5.0]);
    }

    #[test]
    fn interpolates_linear_knots() {
        let curve = Curve::validate(vec![(0.0, 0.0), (5.0, 5.0)], 5.0, "b1", 0).unwrap();
        assert_eq!(curve.eval(2.5).unwrap(), 2.5);
        assert_eq!(curve.eval(0.0).unwrap(), 0.0);
        assert_eq!(curve.eval(5.0).unwrap(), 5.0);
        assert!(matches!(curve.eval(-0.1), Err(ModelError::OutOfRange { .. })));
    }

    #[test]
    fn constant_curve_everywhere() {
        let curves = CoefficientCurves::constants(0.0, 1.0, 2, 5.0);
        for t in [0.0, 0.37, 5.0] {
            assert_eq!(eval_coefficient(&curves, Coefficient::B2, 1, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn json_and_toml_parse_identically() {
        let json = r#"{
            "horizon": 5.0, "n_steps": 500,
            "generator": [[-0.5, 0.5], [0.6, -0.6]],
            "b1": 0.0, "b2": 1.0,
            "h": [2.0, 5.0], "g": [3.0, 1.0],
            "initial": {"mu0": 0.0, "nu0": 2.0}
        }"#;
        let toml_doc = r#"
            horizon = 5.0
            n_steps = 500
            generator = [[-0.5, 0.5], [0.6, -0.6]]
            b1 = 0.0
            b2 = 1.0
            h = [2.0, 5.0]
            g = [3.0, 1.0]
            [initial]
            mu0 = 0.0
            nu0 = 2.0
        "#;
        let a = load_model(json, ConfigFormat::Json).unwrap();
        let b = load_model(toml_doc, ConfigFormat::Toml).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_round_trip_is_field_exact() {
        let spec = ModelSpec::from_config(&reference_config()).unwrap();
        let reloaded = load_model(&serialize_model(&spec), ConfigFormat::Json).unwrap();
        assert_eq!(spec, reloaded);
    }

    #[test]
    fn knot_curves_round_trip() {
        let cfg = ModelConfig {
            b1: Some(CurveConfig::PerState(vec![
                StateCurveConfig::Knots(vec![[0.0, 0.0], [2.5, 1.0], [5.0, 0.5]]),
                StateCurveConfig::Constant(0.25),
            ])),
            ..reference_config()
        };
        let spec = ModelSpec::from_config(&cfg).unwrap();
        assert!((spec.b1(0, 1.25) - 0.5).abs() < 1e-15);
        let reloaded = load_model(&serialize_model(&spec), ConfigFormat::Json).unwrap();
        assert_eq!(spec, reloaded);
    }

    #[test]
    fn point_mass_initial_law_is_allowed() {
        let law = InitialLaw::new(2.0, 4.0, InitialFamily::Gaussian).unwrap();
        assert_eq!(law.variance(), 0.0);
        assert!(matches!(
            InitialLaw::new(2.0, 3.9, InitialFamily::Gaussian),
            Err(ModelError::NegativeVariance { .. })
        ));
    }
}
