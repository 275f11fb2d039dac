//! Subcommand implementations. Every command returns the list of files
//! it wrote (relative to the output directory) for the manifest.

use crate::{CliError, GlobalArgs};
use mfg_lqg::convergence::{fit_rate, report_csv, run_convergence_study};
use mfg_lqg::ctmc::write_path_csv;
use mfg_lqg::model::{
    parse_config, ConfigFormat, CostParams, ModelConfig, ModelSpec, TimeGrid, ValidationOptions,
};
use mfg_lqg::nplayer::{
    matrices_csv, pattern_csv, reduced_csv, solve_full_with, solve_reduced, solve_reduced_with,
    verify_pattern,
};
use mfg_lqg::paths::{
    sample_initial, series_csv, simulate_conditional_moments, simulate_mfg_path,
    simulate_nplayer, SimOptions, StreamFactory,
};
use mfg_lqg::riccati::{
    explicit_no_common_noise, extended_csv, riccati_csv, solve_extended_riccati_with,
    solve_mfg_riccati_with, value_function_u, Scheme, SolveError,
};
use std::fs;
use std::path::Path;

/// Formats a real with full precision for the smaller ad-hoc CSVs.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct LoadedModel {
    pub spec: ModelSpec,
    pub scheme: Scheme,
}

fn scheme_of(global: &GlobalArgs) -> Result<Scheme, CliError> {
    global.scheme.parse::<Scheme>().map_err(CliError::Config)
}

fn read_config(global: &GlobalArgs) -> Result<ModelConfig, CliError> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => ConfigFormat::Toml,
        _ => ConfigFormat::Json,
    };
    parse_config(&text, format).map_err(CliError::from)
}

fn apply_grid_override(config: &mut ModelConfig, global: &GlobalArgs) -> Result<(), CliError> {
    if let Some(dt) = global.dt {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(CliError::Config(format!("--dt {dt} must be positive")));
        }
        let horizon = config
            .horizon
            .ok_or_else(|| CliError::Config("config is missing `horizon`".into()))?;
        let n_steps = (horizon / dt).round().max(1.0) as usize;
        config.n_steps = Some(n_steps);
    }
    Ok(())
}

pub fn load_model(global: &GlobalArgs) -> Result<LoadedModel, CliError> {
    let mut config = read_config(global)?;
    apply_grid_override(&mut config, global)?;
    let spec = ModelSpec::from_config(&config)?;
    Ok(LoadedModel { spec, scheme: scheme_of(global)? })
}

/// Resolved grid parameters for the manifest, if a config is present.
pub fn grid_summary(global: &GlobalArgs) -> Option<(f64, usize)> {
    let mut config = read_config(global).ok()?;
    apply_grid_override(&mut config, global).ok()?;
    Some((config.horizon?, config.n_steps?))
}

fn write_file(out_dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;
    fs::write(out_dir.join(name), contents)
        .map_err(|e| CliError::Io(format!("writing {name}: {e}")))
}

pub fn solve_mfg(
    global: &GlobalArgs,
    override_h: Option<Vec<f64>>,
    override_g: Option<Vec<f64>>,
) -> Result<Vec<String>, CliError> {
    let mut config = read_config(global)?;
    apply_grid_override(&mut config, global)?;
    let overridden = override_h.is_some() || override_g.is_some();
    if let Some(h) = override_h {
        config.h = Some(h);
    }
    if let Some(g) = override_g {
        config.g = Some(g);
    }
    // Overrides are the supported route into the unstable cost regime.
    let spec = ModelSpec::from_config_with(
        &config,
        ValidationOptions { allow_nonpositive_costs: overridden },
    )?;
    let scheme = scheme_of(global)?;

    let ric = solve_mfg_riccati_with(&spec, scheme)?;
    let ext = solve_extended_riccati_with(&spec, scheme)?;

    write_file(&global.out, "riccati.csv", &riccati_csv(&ric))?;
    write_file(&global.out, "riccati_extended.csv", &extended_csv(&ext))?;
    let collapse = format!(
        "max_abs_d,max_abs_e,max_abs_f_plus_2a\n{},{},{}\n",
        fmt(ext.collapse.max_abs_d),
        fmt(ext.collapse.max_abs_e),
        fmt(ext.collapse.max_abs_f_plus_2a),
    );
    write_file(&global.out, "collapse_report.csv", &collapse)?;
    Ok(vec!["riccati.csv".into(), "riccati_extended.csv".into(), "collapse_report.csv".into()])
}

pub fn solve_nplayer(
    global: &GlobalArgs,
    players: usize,
    full: bool,
    probe_times: &[f64],
    cap: usize,
) -> Result<Vec<String>, CliError> {
    if players < 2 {
        return Err(CliError::Config(format!("need at least 2 players, got {players}")));
    }
    if full && players < 3 {
        return Err(CliError::Config("--full needs at least 3 players".into()));
    }
    let model = load_model(global)?;
    let spec = &model.spec;

    // Both systems must use the same integrator or the pattern report
    // would measure the scheme difference instead of the reduction.
    let reduced = solve_reduced_with(spec, players, model.scheme)?;
    write_file(&global.out, "reduced.csv", &reduced_csv(&reduced))?;
    let mut outputs = vec!["reduced.csv".to_string()];

    if full {
        let oracle = solve_full_with(spec, players, cap, model.scheme)?;
        let probe_nodes: Vec<usize> = probe_times.iter().map(|&t| oracle.node_of(t)).collect();
        write_file(&global.out, "full_matrices.csv", &matrices_csv(&oracle, &probe_nodes))?;
        let report = verify_pattern(&oracle, &reduced)?;
        write_file(&global.out, "pattern.csv", &pattern_csv(&report))?;
        let summary = format!(
            "max_within_class_spread,max_prediction_deviation\n{},{}\n",
            fmt(report.max_within_class_spread),
            fmt(report.max_prediction_deviation),
        );
        write_file(&global.out, "pattern_summary.csv", &summary)?;
        outputs.extend([
            "full_matrices.csv".to_string(),
            "pattern.csv".to_string(),
            "pattern_summary.csv".to_string(),
        ]);
    }
    Ok(outputs)
}

pub fn simulate(
    global: &GlobalArgs,
    players: &[usize],
    replicas: usize,
    substeps: usize,
) -> Result<Vec<String>, CliError> {
    let model = load_model(global)?;
    let spec = &model.spec;
    let ric = solve_mfg_riccati_with(spec, model.scheme)?;
    let factory = StreamFactory::new(global.seed, 0);
    let opts = SimOptions { substeps: substeps.max(1) };

    // One common-noise realization shared by the whole comparison.
    let y_path = factory.sample_y(0, spec, 0);
    let mut outputs = Vec::new();

    write_file(&global.out, "y_path.csv", &write_path_csv(&y_path))?;
    outputs.push("y_path.csv".to_string());

    // Mean-field conditional moments along the shared path.
    let moments = simulate_conditional_moments(spec, &ric, &y_path)?;
    let mut mfg_csv = String::from("t,mu,nu\n");
    for (k, &t) in moments.grid.times().iter().enumerate() {
        mfg_csv.push_str(&format!("{},{},{}\n", fmt(t), fmt(moments.mu[k]), fmt(moments.nu[k])));
    }
    write_file(&global.out, "moments_mfg.csv", &mfg_csv)?;
    outputs.push("moments_mfg.csv".to_string());

    // One illustrative equilibrium path with its control and value series.
    let mut streams = factory.replica(0);
    let set = simulate_mfg_path(spec, &ric, &y_path, &mut streams, opts)?;
    let xhat = set.get("xhat").expect("xhat");
    let mu = set.get("mu").expect("mu");
    let times = set.grid.times();
    let mut path_csv = String::from("t,series_name,replica,value\n");
    for (k, &t) in times.iter().enumerate() {
        let y = y_path.state_at(t.min(spec.horizon())).expect("inside horizon");
        let a = ric.a_at(y, t);
        let b = mfg_lqg::riccati::interp_series(&ric.grid, &ric.b[y], t);
        let c = mfg_lqg::riccati::interp_series(&ric.grid, &ric.c[y], t);
        let kcoef = mfg_lqg::riccati::interp_series(&ric.grid, &ric.k_coef[y], t);
        let b2 = spec.b2(y, t);
        let alpha = -2.0 * b2 * a * (xhat[k] - mu[k]);
        let nu_k = moments.nu[moments.grid.nearest_node(t)];
        let value = a * xhat[k] * xhat[k] - 2.0 * a * xhat[k] * mu[k]
            + kcoef * mu[k] * mu[k]
            + b * nu_k
            + c;
        for (name, v) in [("xhat", xhat[k]), ("mu", mu[k]), ("alpha", alpha), ("value", value)] {
            path_csv.push_str(&format!("{},{name},0,{}\n", fmt(t), fmt(v)));
        }
    }
    write_file(&global.out, "mfg_path.csv", &path_csv)?;
    outputs.push("mfg_path.csv".to_string());

    // Per-N empirical conditional moments under the SAME chain path,
    // averaged over replicas, plus the value-function comparison at t=0.
    let mut nmom_csv = String::from("N,t,mu,nu\n");
    let mut values_csv = String::from("N,v1_mean,u_mean\n");
    for &n in players {
        let reduced = solve_reduced(spec, n)?;
        let grid = mfg_lqg::paths::RefinedGrid::new(spec, &y_path)?;
        let n_nodes = grid.n_nodes();
        let mut mu_acc = vec![0.0; n_nodes];
        let mut nu_acc = vec![0.0; n_nodes];
        for replica in 0..replicas as u64 {
            let set = simulate_nplayer(spec, &reduced, &y_path, &factory, replica, opts)?;
            for k in 0..n_nodes {
                let mut mean = 0.0;
                let mut second = 0.0;
                for i in 0..n {
                    let x = set.get(&format!("x_{i}")).expect("player series")[k];
                    mean += x;
                    second += x * x;
                }
                mu_acc[k] += mean / n as f64;
                nu_acc[k] += second / n as f64;
            }
        }
        for k in 0..n_nodes {
            nmom_csv.push_str(&format!(
                "{n},{},{},{}\n",
                fmt(grid.times()[k]),
                fmt(mu_acc[k] / replicas as f64),
                fmt(nu_acc[k] / replicas as f64),
            ));
        }

        // Value of player 1 on i.i.d. draws via the pattern form of the
        // quadratic, against the mean-field value at the same draws.
        let v_c = mfg_lqg::nplayer::pattern_value_offset(spec, &reduced)?;
        let mut init = factory.stream(1_000_000, mfg_lqg::paths::Role::Init, 0);
        let mut v1_sum = 0.0;
        let mut u_sum = 0.0;
        let draws_per_value = 200.min(replicas.max(1));
        for _ in 0..draws_per_value {
            let x: Vec<f64> = (0..n).map(|_| sample_initial(&spec.initial, &mut init)).collect();
            v1_sum += mfg_lqg::nplayer::pattern_value_v1(&reduced, &v_c, 0, &x);
            u_sum += value_function_u(&ric, &spec.initial, 0, x[0]);
        }
        values_csv.push_str(&format!(
            "{n},{},{}\n",
            fmt(v1_sum / draws_per_value as f64),
            fmt(u_sum / draws_per_value as f64),
        ));
    }
    write_file(&global.out, "moments_nplayer.csv", &nmom_csv)?;
    write_file(&global.out, "values.csv", &values_csv)?;
    outputs.push("moments_nplayer.csv".to_string());
    outputs.push("values.csv".to_string());

    // A few raw player paths for the smallest requested N.
    if let Some(&n) = players.first() {
        let reduced = solve_reduced(spec, n)?;
        let set = simulate_nplayer(spec, &reduced, &y_path, &factory, 0, opts)?;
        write_file(&global.out, "nplayer_paths.csv", &series_csv(&[(0, &set)]))?;
        outputs.push("nplayer_paths.csv".to_string());
    }

    Ok(outputs)
}

#[allow(clippy::too_many_arguments)]
pub fn converge(
    global: &GlobalArgs,
    ns: &[usize],
    replicas: usize,
    eval_times: Option<&[f64]>,
    substeps: usize,
    override_h: Option<Vec<f64>>,
    override_g: Option<Vec<f64>>,
) -> Result<Vec<String>, CliError> {
    if ns.len() < 3 {
        return Err(CliError::Config(format!(
            "rate fitting needs at least 3 player counts, got {}",
            ns.len()
        )));
    }
    let mut config = read_config(global)?;
    apply_grid_override(&mut config, global)?;
    let overridden = override_h.is_some() || override_g.is_some();
    if let Some(h) = override_h {
        config.h = Some(h);
    }
    if let Some(g) = override_g {
        config.g = Some(g);
    }
    let spec = &ModelSpec::from_config_with(
        &config,
        ValidationOptions { allow_nonpositive_costs: overridden },
    )?;
    let horizon = spec.horizon();
    let default_times = [horizon / 5.0, horizon / 2.0, horizon];
    let eval_times: Vec<f64> = match eval_times {
        Some(ts) if !ts.is_empty() => ts.to_vec(),
        _ => default_times.to_vec(),
    };
    let factory = StreamFactory::new(global.seed, 0);
    let report = run_convergence_study(
        spec,
        ns,
        replicas,
        &eval_times,
        &factory,
        SimOptions { substeps: substeps.max(1) },
    )?;
    write_file(&global.out, "convergence.csv", &report_csv(&report))?;
    Ok(vec!["convergence.csv".into()])
}

pub fn validate_explicit(global: &GlobalArgs) -> Result<Vec<String>, CliError> {
    // Single-state specs solved numerically against the closed forms.
    let horizon = 5.0;
    let n_steps = 500;
    let mut csv = String::from("h,sup_diff,status\n");
    let mut failed = false;
    for h in [0.5, 2.0, 5.0] {
        let spec = scalar_spec(h, 0.0, horizon, n_steps)?;
        let ric = solve_mfg_riccati_with(&spec, Scheme::Rk4)?;
        let explicit = explicit_no_common_noise(h, 1.0, &spec.grid)?;
        let mut sup: f64 = 0.0;
        for k in 0..=n_steps {
            sup = sup.max((ric.a[0][k] - explicit.quad[k]).abs());
        }
        let ok = sup < 1e-6;
        failed |= !ok;
        csv.push_str(&format!("{h},{},{}\n", fmt(sup), if ok { "ok" } else { "mismatch" }));
    }

    // Blow-up branch: the solver must fail near the closed-form critical
    // time.
    let spec = scalar_spec(-2.0, 0.0, horizon, n_steps)?;
    let explicit = explicit_no_common_noise(-2.0, 1.0, &spec.grid)?;
    let t0 = explicit.blow_up_time.expect("negative h has a critical time");
    match solve_mfg_riccati_with(&spec, Scheme::Rk4) {
        Err(SolveError::BlowUp { t, .. }) => {
            let ok = (t - t0).abs() < 0.05;
            failed |= !ok;
            csv.push_str(&format!(
                "-2.0,{},{}\n",
                fmt((t - t0).abs()),
                if ok { "blow_up_time_ok" } else { "blow_up_time_mismatch" }
            ));
        }
        Ok(_) => {
            failed = true;
            csv.push_str("-2.0,inf,missing_blow_up\n");
        }
        Err(other) => return Err(other.into()),
    }

    write_file(&global.out, "explicit_check.csv", &csv)?;
    if failed {
        return Err(CliError::Numerics(
            "closed-form cross-check failed; see explicit_check.csv".into(),
        ));
    }
    Ok(vec!["explicit_check.csv".into()])
}

fn scalar_spec(h: f64, g: f64, horizon: f64, n_steps: usize) -> Result<ModelSpec, CliError> {
    use mfg_lqg::model::{CoefficientCurves, Generator, InitialFamily, InitialLaw};
    let generator = Generator::new(vec![vec![0.0]])?;
    let costs = CostParams::new_unchecked_sign(vec![h], vec![g])?;
    Ok(ModelSpec::new(
        generator,
        CoefficientCurves::constants(0.0, 1.0, 1, horizon),
        costs,
        InitialLaw::new(0.0, 1.0, InitialFamily::Gaussian)?,
        TimeGrid::new(horizon, n_steps)?,
    )?)
}

pub fn reproduce_figures(
    global: &GlobalArgs,
    replicas: usize,
    rate_replicas: usize,
) -> Result<Vec<String>, CliError> {
    let mut outputs = solve_mfg(global, None, None)?;
    outputs.extend(simulate(global, &[10, 20, 50, 100], replicas, 1)?);
    outputs.extend(converge(global, &[8, 16, 32, 64, 128], rate_replicas, None, 1, None, None)?);
    outputs.extend(validate_explicit(global)?);

    // Headline check for quick inspection: terminal-time rate fit.
    let text = fs::read_to_string(global.out.join("convergence.csv"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mut ns = Vec::new();
    let mut gaps = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for line in text.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let t: f64 = cells[1].parse().unwrap_or(f64::NAN);
        last_t = last_t.max(t);
    }
    for line in text.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let t: f64 = cells[1].parse().unwrap_or(f64::NAN);
        if (t - last_t).abs() < 1e-9 {
            ns.push(cells[0].parse::<f64>().unwrap_or(f64::NAN));
            gaps.push(cells[2].parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    if gaps.iter().all(|&g| g > 0.0) {
        let fit = fit_rate(&ns, &gaps)?;
        let summary = format!(
            "fitted_slope,r2\n{},{}\n",
            fmt(fit.slope),
            fmt(fit.r_squared)
        );
        write_file(&global.out, "rate_summary.csv", &summary)?;
        outputs.push("rate_summary.csv".into());
    }
    Ok(outputs)
}
