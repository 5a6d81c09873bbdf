use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowlab_cli::fit::fit_log_slope;
use flowlab_cli::output::read_csv;

const BASE: &str = r#"
[schedule]
T = 64

[target]
d = 1
components = [
  { weight = 0.3, mean = [-2.0], variance = 0.25 },
  { weight = 0.7, mean = [1.5], variance = 0.25 },
]

[run]
n_samples = 500
seed = 3
error_samples = 20

[grid]
lo = -6.0
hi = 6.0
n_points = 401
"#;

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_to(dir: &Path, cmd: &str, cfg: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.join(format!("{cmd}.csv"));
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (flowlab(&args), out)
}

#[test]
fn schedule_check_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &BASE.replace("T = 64", "T = 1000"));
    let (o, out) = run_to(dir.path(), "schedule-check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(header, ["property_id", "pass", "margin"]);
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[1] == "true"));
}

#[test]
fn schedule_check_short_horizon_fails_property_a() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &BASE.replace("T = 64", "T = 10"));
    let (o, out) = run_to(dir.path(), "schedule-check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    let (_, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    let a = rows.iter().find(|r| r[0] == "a_alpha_lower_bound").unwrap();
    assert_eq!(a[1], "false");
}

#[test]
fn missing_schedule_is_a_validation_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &BASE.replace("[schedule]\nT = 64\n", ""));
    let (o, out) = run_to(dir.path(), "schedule-check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule"));
}

#[test]
fn unknown_key_and_missing_config_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{BASE}\n[scan]\naxis = \"T\"\nvalue = [1]\n"));
    assert_eq!(run_to(dir.path(), "tv", &cfg, &[]).0.status.code(), Some(1));
    assert_eq!(flowlab(&["tv"]).status.code(), Some(1));
    assert_eq!(flowlab(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn tv_row_has_both_estimators_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let (o, out) = run_to(dir.path(), "tv", &cfg, &["--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.starts_with("# flowlab tv\n# config_sha256 = "));
    assert!(text.contains("\n# seed = 9\n"));
    assert!(text.contains("#   seed = 9\n"));
    let (header, rows) = read_csv(&text).unwrap();
    let get = |name: &str| rows[0][header.iter().position(|h| h == name).unwrap()].clone();
    let mc: f64 = get("tv_mc").parse().unwrap();
    let grid: f64 = get("tv_grid").parse().unwrap();
    let se: f64 = get("tv_mc_stderr").parse().unwrap();
    assert!((mc - grid).abs() <= 4.0 * se + 1e-3, "{mc} vs {grid}");
    assert_eq!(get("seed"), "9");
}

#[test]
fn seed_override_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let hash = |seed: &str| {
        let o = flowlab(&["schedule-check", "--config", cfg.to_str().unwrap(), "--seed", seed]);
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines().nth(1).unwrap().to_string()
    };
    assert_eq!(hash("1"), hash("1"));
    assert_ne!(hash("1"), hash("2"));
}

#[test]
fn floor_lattice_tv_falls_back_to_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("[run]", "[score]\nkind = \"floor_lattice\"\n\n[run]");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let (o, out) = run_to(dir.path(), "tv", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    let get = |name: &str| rows[0][header.iter().position(|h| h == name).unwrap()].clone();
    assert_eq!(get("tv_mc"), "");
    assert!(!get("tv_hist").is_empty());
    assert!(get("note").contains("histogram"));
}

#[test]
fn degenerate_jacobian_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace(
        "[run]",
        "[score]\nkind = \"smooth_additive\"\nparams = { amplitude = 50.0, frequency = 40.0 }\n\n[run]",
    );
    let cfg = write_config(dir.path(), "c.toml", &text);
    let (o, out) = run_to(dir.path(), "tv", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate Jacobian at step"));
    assert!(!out.exists());
}

#[test]
fn counterexample_rejects_multivariate_targets() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("d = 1", "d = 2")
        .replace("mean = [-2.0]", "mean = [-2.0, 0.0]")
        .replace("mean = [1.5]", "mean = [1.5, 0.0]");
    let cfg = write_config(dir.path(), "c.toml", &text);
    assert_eq!(run_to(dir.path(), "counterexample", &cfg, &[]).0.status.code(), Some(1));
}

#[test]
fn theory_checks_reject_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{BASE}\n[theory]\nn_mc = 0\n"));
    assert_eq!(run_to(dir.path(), "theory-checks", &cfg, &[]).0.status.code(), Some(1));
}

#[test]
fn theory_checks_gaussian_closed_forms_match() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[schedule]
T = 200

[target]
d = 1
components = [{ weight = 1.0, mean = [3.0], variance = 1.0 }]

[theory]
n_mc = 4000
probes = 4
"#;
    let cfg = write_config(dir.path(), "g.toml", text);
    let (o, out) = run_to(dir.path(), "theory-checks", &cfg, &[]);
    let (header, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    let id = header.iter().position(|h| h == "check_id").unwrap();
    let pass = header.iter().position(|h| h == "pass").unwrap();
    for name in ["covariance_sum_closed_form", "frobenius_sum_closed_form", "kl_terminal_closed_form"] {
        let row = rows.iter().find(|r| r[id] == name).unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(row[pass], "true", "{name}: {row:?}");
    }
    let failing: Vec<_> = rows.iter().filter(|r| r[pass] != "true").collect();
    assert!(failing.is_empty(), "{failing:?}");
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn scan_summary_recomputes_from_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[scan]\naxis = \"T\"\nvalues = [16, 32, 64, 128]\n");
    let cfg = write_config(dir.path(), "s.toml", &text);
    let (o, out) = run_to(dir.path(), "scan", &cfg, &["--gnuplot-script"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let c = |name: &str| header.iter().position(|h| h == name).unwrap();
    let points: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r[c("row_kind")] == "point")
        .map(|r| {
            (
                r[c("axis_value")].parse().unwrap(),
                r[c("tv_value")].parse().unwrap(),
                r[c("tv_stderr")].parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(points.len(), 4);
    assert!(points.windows(2).all(|w| w[0].0 < w[1].0));
    let summary = rows.last().unwrap();
    assert_eq!(summary[c("row_kind")], "slope_fit");
    assert_eq!(summary[c("runtime_seconds")], "");
    let fit = fit_log_slope(&points).unwrap();
    assert_eq!(summary[c("tv_value")].parse::<f64>().unwrap(), fit.slope);
    assert_eq!(summary[c("tv_stderr")].parse::<f64>().unwrap(), fit.std_error);
    let script = std::fs::read_to_string(out.with_extension("gp")).unwrap();
    assert!(script.contains(out.to_str().unwrap()));
}

#[test]
fn scan_timings_fill_runtime_column() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[scan]\naxis = \"epsilon\"\nvalues = [0.0, 0.1, 0.2, 0.4]\n");
    let cfg = write_config(dir.path(), "s.toml", &text);
    let (o, out) = run_to(dir.path(), "scan", &cfg, &["--timings"]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    let rt = header.iter().position(|h| h == "runtime_seconds").unwrap();
    assert!(rows[..4].iter().all(|r| r[rt].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn gnuplot_script_needs_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let o = flowlab(&["schedule-check", "--config", cfg.to_str().unwrap(), "--gnuplot-script"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn halving_lattice_width_halves_step_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = |max_error: f64| {
        let text = BASE.replace(
            "[run]",
            &format!("[score]\nkind = \"floor_lattice\"\nparams = {{ max_error = {max_error:e} }}\n\n[run]"),
        );
        let cfg = write_config(dir.path(), "l.toml", &text);
        let (_, out) = run_to(dir.path(), "counterexample", &cfg, &[]);
        let (_, rows) = read_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
        let row = rows.iter().find(|r| r[0] == "step_score_error").unwrap().clone();
        (row[1].parse::<f64>().unwrap(), row[2].parse::<f64>().unwrap())
    };
    let (e1, s1) = run(1e-3);
    let (e2, s2) = run(5e-4);
    let ratio = e2 / e1;
    let tol = 3.0 * ratio * ((s1 / e1).powi(2) + (s2 / e2).powi(2)).sqrt();
    assert!((ratio - 0.5).abs() <= tol + 0.02, "{e1} {e2}");
}
