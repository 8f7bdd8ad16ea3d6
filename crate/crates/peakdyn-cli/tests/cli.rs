use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const STATIONARY: &str = "kind = \"stationary\"\nseed = 3\n[window]\nn_lo = -8\nn_hi = 6\n[peaks]\na = 0.5\n";

const SIMULATE: &str = "kind = \"simulate\"\nseed = 11\n[window]\nn_lo = -4\nn_hi = 4\n[peaks]\na = 0.5\ncells = 16\n\
[time]\nt_end = 0.2\nsamples = 4\nburn_in = 0.0\n";

fn run(dir: &Path, kind: &str, toml: &str, extra: &[&str], env_out: Option<&Path>) -> Output {
    let cfg = dir.join(format!("{kind}.toml"));
    fs::write(&cfg, toml).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_peakdyn"));
    cmd.arg(kind).arg("--config").arg(&cfg).args(extra).env_remove("PEAKDYN_OUT");
    if let Some(p) = env_out {
        cmd.env("PEAKDYN_OUT", p);
    }
    cmd.output().unwrap()
}

fn out_arg(p: &Path) -> Vec<String> {
    vec!["--out".into(), p.display().to_string()]
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn successful_run_writes_manifest_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let args = out_arg(&out);
    let o = run(tmp.path(), "stationary", STATIONARY, &args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join("stationary").join("run");
    let m = manifest(&run_dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["kind"], "stationary");
    for f in m["files"].as_array().unwrap() {
        assert!(run_dir.join(f.as_str().unwrap()).exists(), "{f}");
    }
    assert!(run_dir.join("summary.json").exists());
    let csv = fs::read_to_string(run_dir.join("profile.csv")).unwrap();
    assert!(csv.starts_with("n,p,m_bar,ln_m_bar,mu_bar,peak_mass,residual\n"));
    assert_eq!(csv.lines().count(), 1 + 15);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let args = out_arg(&tmp.path().join("out"));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(code(&run(tmp.path(), "stationary", "kind = \"stationary\"\nbogus = 1\n", &args, None)), 2);
    assert_eq!(code(&run(tmp.path(), "simulate", STATIONARY, &args, None)), 2);
    let bad = STATIONARY.replace("a = 0.5", "a = 0.5\ndelta0 = 0.6");
    assert_eq!(code(&run(tmp.path(), "stationary", &bad, &args, None)), 2);
    let missing = Command::new(env!("CARGO_BIN_EXE_peakdyn"))
        .args(["stationary", "--config"])
        .arg(tmp.path().join("absent.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&missing), 2);
}

#[test]
fn hypothesis_violation_exits_with_three_and_leaves_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let toml = "kind = \"stability\"\n[window]\nn_lo = -4\nn_hi = 4\n[peaks]\na = 0.5\ncells = 16\n\
[perturbation]\ny_norm = 0.2\n[time]\nt_end = 0.5\nsamples = 4\nburn_in = 0.0\n";
    let args = out_arg(&out);
    let o = run(tmp.path(), "stability", toml, &args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join("stability").join("run");
    assert_eq!(manifest(&run_dir)["status"], "hypothesis-violation");
    let diag = fs::read_to_string(run_dir.join("diagnostic.txt")).unwrap();
    assert!(diag.contains("exceeds delta0") && diag.contains("resolved config"));
    assert!(!run_dir.join("summary.json").exists());
}

#[test]
fn unwritable_output_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let args = out_arg(&blocker);
    let o = run(tmp.path(), "stationary", STATIONARY, &args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert_eq!(code(&o), 4);
}

fn moments_csv(tmp: &Path, name: &str, extra: &[&str]) -> String {
    let out: PathBuf = tmp.join(name);
    let mut args = out_arg(&out);
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = run(tmp, "simulate", SIMULATE, &args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::read_to_string(out.join("simulate").join("run").join("moments.csv")).unwrap()
}

#[test]
fn equal_seeds_give_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let a = moments_csv(tmp.path(), "a", &[]);
    let b = moments_csv(tmp.path(), "b", &["--threads", "1"]);
    assert_eq!(a, b);
    let c = moments_csv(tmp.path(), "c", &["--seed", "12"]);
    assert_ne!(a, c);
}

#[test]
fn environment_overrides_the_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let flag = tmp.path().join("flag");
    let env = tmp.path().join("env");
    let args = out_arg(&flag);
    let o = run(tmp.path(), "stationary", STATIONARY, &args.iter().map(String::as_str).collect::<Vec<_>>(), Some(&env));
    assert_eq!(code(&o), 0);
    assert!(env.join("stationary").join("run").join("manifest.json").exists());
    assert!(!flag.exists());
}

#[test]
fn sweeps_write_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let toml = format!("{STATIONARY}[sweep]\nrho = [0.0, 0.01]\n");
    let args = out_arg(&out);
    let o = run(tmp.path(), "stationary", &toml, &args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for tag in ["rho0", "rho0.01"] {
        assert_eq!(manifest(&out.join("stationary").join(tag))["status"], "ok");
    }
}
