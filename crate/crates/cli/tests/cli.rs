use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONSTANT: &str = r#"
seed = 11
samples = 100000
particles = 16
x = [0.3]
[grid]
horizon = 1.0
steps = 64
[model]
family = "constant"
b = [0.0]
sigma = [[1.0]]
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
  let path = dir.join("run.toml");
  fs::write(&path, config).unwrap();
  Command::new(env!("CARGO_BIN_EXE_mckean"))
    .args(args)
    .arg("--config")
    .arg(&path)
    .arg("--out")
    .arg(dir.join("out"))
    .output()
    .unwrap()
}

/// Data rows of a CSV, skipping the hash and header lines.
fn rows(path: &Path) -> Vec<Vec<String>> {
  let text = fs::read_to_string(path).unwrap();
  let mut lines = text.lines();
  assert!(lines.next().unwrap().starts_with("# config_hash="));
  lines.next().unwrap();
  lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn num(s: &str) -> f64 {
  s.parse().unwrap()
}

fn error_line(out: &Output) -> String {
  String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

#[test]
fn estimate_reproduces_bismut_elworthy_li() {
  let dir = TempDir::new().unwrap();
  let cfg = format!("{CONSTANT}[estimate]\nquantities = [\"expectation\", \"dx\"]\npayoff = {{ name = \"sin\" }}\n");
  let out = run(dir.path(), &cfg, &["estimate"]);
  assert!(out.status.success(), "{}", error_line(&out));
  let rows = rows(&dir.path().join("out/estimates.csv"));
  assert_eq!(rows.len(), 2);
  let target = (-0.5f64).exp() * 0.3f64.cos();
  let (value, stderr) = (num(&rows[1][5]), num(&rows[1][6]));
  assert!((value - target).abs() <= 3.0 * stderr, "{value} vs {target} (stderr {stderr})");
  let (mean, se) = (num(&rows[0][5]), num(&rows[0][6]));
  let expected = (-0.5f64).exp() * 0.3f64.sin();
  assert!((mean - expected).abs() <= 3.0 * se);
}

#[test]
fn density_matches_gaussian_pdf() {
  let dir = TempDir::new().unwrap();
  let cfg = format!(
    "{}[density]\nz = {{ lo = -3.7, hi = 4.3, count = 101 }}\ndz = true\n",
    CONSTANT.replace("samples = 100000", "samples = 200000")
  );
  let out = run(dir.path(), &cfg, &["density"]);
  assert!(out.status.success(), "{}", error_line(&out));
  let rows = rows(&dir.path().join("out/density.csv"));
  assert_eq!(rows.len(), 101);
  let mut worst = 0.0f64;
  for r in &rows {
    let z = num(&r[0]);
    let pdf = (-(z - 0.3).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    worst = worst.max((num(&r[1]) - pdf).abs());
  }
  assert!(worst <= 0.01, "max error {worst}");
  assert!(fs::read_to_string(dir.path().join("out/tail_fit.csv")).unwrap().lines().count() >= 3);
}

#[test]
fn negative_horizon_is_a_config_error_without_output() {
  let dir = TempDir::new().unwrap();
  let cfg = format!("{}[estimate]\nquantities = [\"dx\"]\npayoff = {{ name = \"sin\" }}\n", CONSTANT.replace("horizon = 1.0", "horizon = -1.0"));
  let out = run(dir.path(), &cfg, &["estimate"]);
  assert_eq!(out.status.code(), Some(2));
  assert!(error_line(&out).starts_with("error,2,"), "{}", error_line(&out));
  assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_are_rejected() {
  let dir = TempDir::new().unwrap();
  let cfg = CONSTANT.replace("sigma = [[1.0]]", "sigma = [[1.0]]\nsigma0 = 1.0");
  let out = run(dir.path(), &cfg, &["simulate"]);
  assert_eq!(out.status.code(), Some(2));
  assert!(!dir.path().join("out").exists());
}

#[test]
fn order_cap_and_blow_up_exit_codes() {
  let dir = TempDir::new().unwrap();
  let cube = CONSTANT
    .replace("samples = 100000", "samples = 100")
    .replace("x = [0.3]", "x = [0.0, 0.0, 0.0]")
    .replace("b = [0.0]", "b = [0.0, 0.0, 0.0]")
    .replace("sigma = [[1.0]]", "sigma = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
  let out = run(dir.path(), &format!("{cube}[density]\nz = {{ lo = -1.0, hi = 1.0, count = 3 }}\n"), &["density"]);
  assert_eq!(out.status.code(), Some(4), "{}", error_line(&out));
  assert!(error_line(&out).starts_with("error,4,"));

  let explosive = r#"
seed = 1
samples = 100
particles = 50
x = [1.0]
[grid]
horizon = 1.0
steps = 16
[model]
family = "scalar_interaction"
drift = { cx = 1e200 }
diffusion = [{ c0 = 1.0 }]
"#;
  let out = run(dir.path(), explosive, &["simulate"]);
  assert_eq!(out.status.code(), Some(3), "{}", error_line(&out));
  assert!(!dir.path().join("out").exists());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
  let dir = TempDir::new().unwrap();
  let cfg = r#"
seed = 5
samples = 4000
particles = 200
x = [0.2]
initial = { kind = "gaussian", mean = [0.0], std = 1.0 }
[grid]
horizon = 0.5
steps = 16
[model]
family = "mean_field_ou"
a = 1.0
sigma = 0.5
[estimate]
quantities = ["expectation", "dmu"]
payoff = { name = "square" }
v = [[-1.0], [1.0]]
"#;
  let read = |d: &TempDir| fs::read(d.path().join("out/estimates.csv")).unwrap();
  assert!(run(dir.path(), cfg, &["estimate", "--threads", "1"]).status.success());
  let first = read(&dir);
  assert!(run(dir.path(), cfg, &["estimate", "--threads", "3"]).status.success());
  assert_eq!(first, read(&dir));

  let out = run(dir.path(), cfg, &["estimate", "--seed", "6"]);
  assert!(out.status.success());
  let other = read(&dir);
  assert_ne!(first, other);
  assert_ne!(first.split(|&b| b == b'\n').next(), other.split(|&b| b == b'\n').next(), "hash must include the seed");
}

#[test]
fn simulate_writes_paths_and_summary() {
  let dir = TempDir::new().unwrap();
  let cfg = CONSTANT.replace("steps = 64", "steps = 4").replace("x = [0.3]", "x = [0.3]\ninitial = { kind = \"gaussian\", mean = [0.0], std = 1.0 }");
  let out = run(dir.path(), &cfg, &["simulate"]);
  assert!(out.status.success(), "{}", error_line(&out));
  let summary = rows(&dir.path().join("out/summary.csv"));
  assert_eq!(summary.len(), 5);
  assert!(summary[0][5].is_empty());
  for r in &summary[1..] {
    // Unit noise over a quarter step moves the cloud by about 1/2 in W₂.
    assert!(num(&r[5]) > 0.0 && num(&r[5]) < 1.5);
  }
  assert_eq!(rows(&dir.path().join("out/paths.csv")).len(), 5 * 16);
  let names: Vec<_> = fs::read_dir(dir.path().join("out")).unwrap().map(|e| e.unwrap().file_name()).collect();
  assert_eq!(names.len(), 2, "no staging files left behind: {names:?}");
}

#[test]
fn pde_check_and_compare_emit_tables() {
  let dir = TempDir::new().unwrap();
  let base = r#"
seed = 2
samples = 2000
particles = 64
x = [0.7]
t = 0.5
initial = { kind = "gaussian", mean = [0.0], std = 1.0 }
[grid]
horizon = 1.0
steps = 32
[model]
family = "mean_field_ou"
a = 1.0
sigma = 0.5
"#;
  let out = run(dir.path(), &format!("{base}[pde_check]\npayoff = {{ name = \"centred_mean\" }}\nv_points = 8\n"), &["pde-check"]);
  assert!(out.status.success(), "{}", error_line(&out));
  assert_eq!(rows(&dir.path().join("out/pde_check.csv")).len(), 1);

  let out = run(dir.path(), &format!("{base}[compare]\npayoff = {{ name = \"sin\" }}\ntarget = \"dx\"\nbumps = [0.1, 0.01]\n"), &["compare"]);
  assert!(out.status.success(), "{}", error_line(&out));
  let table = rows(&dir.path().join("out/compare.csv"));
  assert_eq!(table.len(), 2);
  for r in table {
    assert!(num(&r[5]).abs() < 5.0, "weight and FD disagree: z={}", r[5]);
  }
}
