//! End-to-end checks of the command-line surface: exit-code contract,
//! byte-level reproducibility, and the shape of the emitted artifacts.

use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-lqg"))
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/two_regime.json")
        .to_str()
        .unwrap()
        .to_string()
}

fn toml_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/two_regime.toml")
        .to_str()
        .unwrap()
        .to_string()
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mfg-lqg-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn solve_mfg_terminal_row_matches_terminal_costs() {
    let out = tempdir("terminal");
    let status = binary()
        .args(["solve-mfg", "--config", &config(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("riccati.csv")).unwrap();
    let mut terminal_a = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let t: f64 = cells[0].parse().unwrap();
        if (t - 5.0).abs() < 1e-12 {
            terminal_a.push(cells[2].parse::<f64>().unwrap());
        }
    }
    assert_eq!(terminal_a, vec![3.0, 1.0]);
}

#[test]
fn json_and_toml_configs_agree() {
    let out_json = tempdir("json");
    let out_toml = tempdir("toml");
    for (cfg, out) in [(config(), &out_json), (toml_config(), &out_toml)] {
        let status = binary()
            .args(["solve-mfg", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out_json.join("riccati.csv")).unwrap();
    let b = std::fs::read(out_toml.join("riccati.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_config_exits_with_code_one() {
    let out = tempdir("badcfg");
    let bad = out.join("bad.json");
    std::fs::write(&bad, r#"{"horizon": 5.0, "n_steps": 500}"#).unwrap();
    let output = binary()
        .args(["solve-mfg", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("generator"), "diagnostic lacks field path: {stderr}");
}

#[test]
fn negative_costs_in_config_exit_with_code_one() {
    let out = tempdir("negcfg");
    let bad = out.join("neg.json");
    let doc = std::fs::read_to_string(config()).unwrap().replace("[2.0, 5.0]", "[-1.0, 2.0]");
    std::fs::write(&bad, doc).unwrap();
    let output = binary()
        .args(["solve-mfg", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn forced_negative_costs_blow_up_with_code_two() {
    let out = tempdir("blowup");
    let output = binary()
        .args([
            "solve-mfg",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--override-h",
            "-2,-5",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("blow-up"), "stderr: {stderr}");
}

#[test]
fn missing_output_directory_parent_is_created() {
    let out = tempdir("deep").join("a/b/c");
    let status = binary()
        .args(["solve-mfg", "--config", &config(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn full_solve_at_two_players_is_a_usage_error() {
    let out = tempdir("n2");
    let output = binary()
        .args([
            "solve-nplayer",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "-N",
            "2",
            "--full",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn cap_violation_exits_with_code_two() {
    let out = tempdir("cap");
    let output = binary()
        .args([
            "solve-nplayer",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "-N",
            "20",
            "--full",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("cap"));
}

#[test]
fn large_reduced_solve_is_fast() {
    let out = tempdir("fast");
    let started = std::time::Instant::now();
    let status = binary()
        .args([
            "solve-nplayer",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "-N",
            "100",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(started.elapsed().as_secs_f64() < 1.0, "took {:?}", started.elapsed());
    assert!(out.join("reduced.csv").exists());
    assert!(!out.join("full_matrices.csv").exists());
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let out1 = tempdir("det1");
    let out2 = tempdir("det2");
    for out in [&out1, &out2] {
        let status = binary()
            .args([
                "simulate",
                "--config",
                &config(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "20",
                "-N",
                "10,20",
                "--replicas",
                "50",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in [
        "moments_mfg.csv",
        "moments_nplayer.csv",
        "values.csv",
        "mfg_path.csv",
        "nplayer_paths.csv",
        "y_path.csv",
    ] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn simulate_reference_seed_has_decreasing_second_moment() {
    let out = tempdir("nudec");
    let status = binary()
        .args([
            "simulate",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "20",
            "-N",
            "10",
            "--replicas",
            "10",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("moments_mfg.csv")).unwrap();
    let nu: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(nu.windows(2).all(|w| w[1] < w[0]), "nu series is not strictly decreasing");
}

#[test]
fn nplayer_moments_approach_mean_field_as_n_grows() {
    let out = tempdir("trend");
    let status = binary()
        .args([
            "simulate",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "20",
            "-N",
            "10,100",
            "--replicas",
            "400",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let mfg = std::fs::read_to_string(out.join("moments_mfg.csv")).unwrap();
    let nu_ref: Vec<f64> = mfg
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let text = std::fs::read_to_string(out.join("moments_nplayer.csv")).unwrap();
    let mut sup_gap = std::collections::BTreeMap::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let n: usize = cells[0].parse().unwrap();
        let nu: f64 = cells[3].parse().unwrap();
        let k = i % nu_ref.len();
        let entry = sup_gap.entry(n).or_insert(0.0f64);
        *entry = entry.max((nu - nu_ref[k]).abs());
    }
    let gaps: Vec<f64> = sup_gap.values().cloned().collect();
    assert!(
        gaps[1] < gaps[0],
        "second-moment gap should shrink with N: {sup_gap:?}"
    );
}

#[test]
fn converge_emits_report_with_coefficient_gaps_and_summary() {
    let out = tempdir("report");
    let status = binary()
        .args([
            "converge",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--ns",
            "8,16,32",
            "--replicas",
            "300",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(text.starts_with("N,t,gap_rms,gap_se,coef_gap,w2_marginal\n"));
    // one row per (N, eval time) with a positive coefficient gap column
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 9);
    for row in &rows {
        let coef: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(coef > 0.0);
    }
    assert!(text.lines().last().unwrap().starts_with("# fitted_slope="));
}

#[test]
fn zero_cost_override_reports_degenerate_convergence() {
    // With the cost weights forced to zero the coupling collapses, every
    // gap is exactly zero, and the slope is reported as undefined.
    let out = tempdir("degenerate");
    let status = binary()
        .args([
            "converge",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--ns",
            "4,8,16",
            "--replicas",
            "100",
            "--override-h",
            "0,0",
            "--override-g",
            "0,0",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    for row in text.lines().skip(1).filter(|l| !l.starts_with('#')) {
        let gap: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(gap, 0.0);
    }
    assert!(text.trim_end().ends_with("# degenerate: all gaps zero, slope undefined"));

    // Zero costs straight from a config file still fail validation.
    let cfg = out.join("zero.json");
    let doc = std::fs::read_to_string(config()).unwrap().replace("[2.0, 5.0]", "[0.0, 0.0]");
    std::fs::write(&cfg, doc).unwrap();
    let output = binary()
        .args([
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--ns",
            "4,8,16",
            "--replicas",
            "20",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn manifest_records_config_hash_and_outputs() {
    let out = tempdir("manifest");
    let status = binary()
        .args(["solve-mfg", "--config", &config(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"config_sha256\""));
    assert!(manifest.contains("riccati.csv"));
    assert!(manifest.contains("\"seed\": 0"));
}

#[test]
fn dt_override_changes_grid_resolution() {
    let out = tempdir("dt");
    let status = binary()
        .args([
            "solve-mfg",
            "--config",
            &config(),
            "--out",
            out.to_str().unwrap(),
            "--dt",
            "0.1",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("riccati.csv")).unwrap();
    // 51 nodes x 2 states + header
    assert_eq!(text.lines().count(), 1 + 51 * 2);
}

#[test]
fn euler_scheme_differs_from_rk4_but_matches_terminals() {
    let out_rk4 = tempdir("rk4");
    let out_euler = tempdir("euler");
    for (scheme, out) in [("rk4", &out_rk4), ("euler", &out_euler)] {
        let status = binary()
            .args([
                "solve-mfg",
                "--config",
                &config(),
                "--out",
                out.to_str().unwrap(),
                "--scheme",
                scheme,
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read_to_string(out_rk4.join("riccati.csv")).unwrap();
    let b = std::fs::read_to_string(out_euler.join("riccati.csv")).unwrap();
    assert_ne!(a, b, "schemes should differ away from the horizon");
    assert_eq!(a.lines().last(), b.lines().last(), "terminal rows agree exactly");

    // Euler at dt = 1e-2 still lands near the RK4 answer.
    let first = |text: &str| -> f64 {
        text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!((first(&a) - first(&b)).abs() < 5e-2);
}

#[test]
fn validate_explicit_passes_and_writes_report() {
    let out = tempdir("explicit");
    let status = binary()
        .args(["validate-explicit", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("explicit_check.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",ok")).count(), 3);
    assert!(text.contains("blow_up_time_ok"));
}

#[test]
fn converge_outputs_are_identical_across_reruns_and_thread_counts() {
    // The replica reduction is an ordered merge over per-replica streams,
    // so neither rerunning nor changing worker counts may move a byte.
    let out1 = tempdir("thr1");
    let out2 = tempdir("thr2");
    for (threads, out) in [("1", &out1), ("2", &out2)] {
        let status = binary()
            .env("MFG_LQG_THREADS", threads)
            .args([
                "converge",
                "--config",
                &config(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "5",
                "--ns",
                "8,16,32",
                "--replicas",
                "300",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out1.join("convergence.csv")).unwrap();
    let b = std::fs::read(out2.join("convergence.csv")).unwrap();
    assert_eq!(a, b, "outputs differ across thread counts");
}

#[test]
fn thread_cap_environment_variable_is_honored() {
    let out = tempdir("threads");
    let status = binary()
        .env("MFG_LQG_THREADS", "1")
        .args(["solve-mfg", "--config", &config(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"threads\": 1"), "manifest: {manifest}");
}

#[test]
fn help_exits_cleanly() {
    let output = binary().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    for sub in ["solve-mfg", "solve-nplayer", "simulate", "converge", "validate-explicit", "reproduce-figures"] {
        assert!(stdout.contains(sub), "help is missing {sub}");
    }
}
