use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fnbridge"))
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BRIDGE: &str = r#"
[grid]
res = [32]
bounds = [[0.0, 1.0]]
[process]
sigma = 0.5
T = 2.0
basis_kind = "cosine"
modes = 8
[bridge]
x0 = 0.75
xt = -1.5
steps = 20
n_paths = 2
"#;

#[test]
fn unknown_keys_are_rejected_with_exit_code_2() {
    let d = scratch("unknown");
    for (name, text) in [
        ("top.toml", format!("{BRIDGE}\n[extra]\nx = 1\n")),
        ("process.toml", BRIDGE.replace("modes = 8", "modes = 8\nbeta = 1.0")),
        ("train.toml", format!("{BRIDGE}\n[train]\nlearning_rate = 0.1\n")),
        ("params.toml", format!("{BRIDGE}\n[data]\ndataset = \"quadratic\"\nparams = {{ n_trian = 5 }}\n")),
    ] {
        let cfg = write(&d, name, &text);
        let o = run(&d, &["basis", "build", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains("unknown field"), "{name}: {}", stderr(&o));
    }
}

#[test]
fn invalid_values_and_missing_files_exit_with_2() {
    let d = scratch("invalid");
    let cfg = write(&d, "neg.toml", &BRIDGE.replace("sigma = 0.5", "sigma = -0.5"));
    assert_eq!(run(&d, &["basis", "build", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let cfg = write(&d, "nomodes.toml", &BRIDGE.replace("modes = 8\n", ""));
    assert_eq!(run(&d, &["basis", "build", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = d.join("nope.toml");
    assert_eq!(run(&d, &["basis", "build", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let cfg = write(&d, "ok.toml", BRIDGE);
    let o = run(&d, &["eval", "mmd", "--config", cfg.to_str().unwrap(), "--generated", "a.csv", "--reference", "b.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&d, &["bm", "train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "no [data] section: {}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_3() {
    let d = scratch("diverge");
    let cfg = write(
        &d,
        "q.toml",
        r#"
[grid]
res = [20]
bounds = [[-1.0, 1.0]]
[process]
sigma = 1.0
T = 1.0
basis_kind = "kernel"
gamma = 0.2
[train]
iters = 50
batch = 4
lr = 1e300
[net]
width = 4
mlp_width = 4
[data]
dataset = "quadratic"
params = { n_train = 50, n_heldout = 50 }
"#,
    );
    let o = run(&d, &["bm", "train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(|f| f.parse().unwrap()).collect()).collect()
}

#[test]
fn bridge_paths_start_and_end_at_the_configured_functions() {
    let d = scratch("bridge");
    let cfg = write(&d, "b.toml", BRIDGE);
    let o = run(&d, &["bridge", "sample", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..2 {
        // t, grid_index, value
        let rows = read_rows(&d.join(format!("bridge_{i}_grid.csv")));
        assert_eq!(rows.len(), 21 * 32);
        for r in &rows[..32] {
            assert_eq!(r[0], 0.0);
            assert!((r[2] - 0.75).abs() < 1e-12, "{}", r[2]);
        }
        for r in &rows[rows.len() - 32..] {
            assert_eq!(r[0], 2.0);
            assert!((r[2] + 1.5).abs() < 1e-12, "{}", r[2]);
        }
    }
    let a = std::fs::read(d.join("bridge_0_grid.csv")).unwrap();
    let b = std::fs::read(d.join("bridge_1_grid.csv")).unwrap();
    assert_ne!(a, b, "paths use separate noise streams");
}

#[test]
fn seed_flag_overrides_config_and_is_recorded() {
    let d = scratch("seed");
    let cfg = write(&d, "b.toml", BRIDGE);
    let o = run(&d, &["--seed", "42", "bridge", "sample", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(d.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 42"), "{resolved}");
    // the snapshot is itself a valid config that reproduces the run
    let again = d.join("again");
    let o = run(&again, &["bridge", "sample", "--config", d.join("resolved_config.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("bridge_0_grid.csv")).unwrap(), std::fs::read(again.join("bridge_0_grid.csv")).unwrap());
}

#[test]
fn eigen_system_file_lists_the_modes() {
    let d = scratch("basis");
    let cfg = write(&d, "b.toml", BRIDGE);
    let o = run(&d, &["basis", "build", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eigs = fnbridge::basis::EigenSystem::from_json(&std::fs::read_to_string(d.join("eigs.json")).unwrap()).unwrap();
    assert_eq!(eigs.k(), 8);
    assert_eq!(eigs.grid().res, vec![32]);
}

#[test]
fn selftest_passes() {
    let o = bin().arg("selftest").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 7, "{text}");
}
