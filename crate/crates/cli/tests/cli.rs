use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn heavytail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heavytail"))
        .args(args)
        .env_remove("HEAVYTAIL_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn digest(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn grid_count_two_by_point_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = heavytail(&["grid-count", "--n", "2", "--delta", "0.4", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "3");
    let csv = std::fs::read_to_string(dir.path().join("grid-count.csv")).unwrap();
    assert!(csv.starts_with("n,delta,count,ln_count,ln_bound\n2,0.4,3,"));
}

#[test]
fn lcd_of_first_basis_vector() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.txt");
    std::fs::write(&v, "1\n0\n0\n").unwrap();
    let o = heavytail(&["lcd", "--vector-file", path(&v), "--r", "0.1", "--h", "10", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let t: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("t_star="))
        .expect("t_star line")
        .parse()
        .unwrap();
    assert!((t - 1.0 / 1.1).abs() < 1e-6, "{t}");
}

#[test]
fn lcd_rejects_non_unit_vector() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.txt");
    std::fs::write(&v, "1\n1\n").unwrap();
    let o = heavytail(&["lcd", "--vector-file", path(&v), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smin_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let base = ["smin", "--dist", "gaussian", "--n", "100", "--trials", "2000", "--seed", "7"];
    let oa = heavytail(&[&base[..], &["--out", path(&a), "--jobs", "1"]].concat());
    let ob = heavytail(&[&base[..], &["--out", path(&b), "--jobs", "3"]].concat());
    assert_eq!(oa.status.code(), Some(0));
    assert_eq!(ob.status.code(), Some(0));
    assert_eq!(digest(&a.join("smin.csv")), digest(&b.join("smin.csv")));

    // The manifest records the digest of what was written.
    let manifest = std::fs::read_to_string(a.join("smin.manifest.txt")).unwrap();
    assert!(manifest.contains(&digest(&a.join("smin.csv"))));
    assert!(manifest.contains("master_seed = 7"));
    assert_eq!(std::fs::read_to_string(a.join("smin.csv")).unwrap().lines().count(), 2001);
}

#[test]
fn printed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = ["cover", "--dist", "pareto:2.5", "--n", "8", "--trials", "4", "--seed", "3", "--located-points", "5"];
    let o = heavytail(&[&args[..], &["--out", path(&first)]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let printed = heavytail(&[&args[..], &["--print-config"]].concat());
    assert_eq!(printed.status.code(), Some(0));
    let text = stdout(&printed);
    assert!(text.starts_with("[cover]\n"));
    assert!(text.contains("located_points = 5\n"));
    assert!(text.contains("dist = \"pareto:2.5\"\n"), "{text}");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, text).unwrap();

    let second = dir.path().join("second");
    let o = heavytail(&["cover", "--config", path(&cfg), "--out", path(&second)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(digest(&first.join("cover.csv")), digest(&second.join("cover.csv")));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# sections per subcommand\n[smin]\nn = 9\ntrials = 5\n[cover]\nn = 3\n").unwrap();
    let o = heavytail(&["smin", "--config", path(&cfg), "--trials", "6", "--print-config"]);
    let text = stdout(&o);
    assert!(text.contains("n = 9\n") && text.contains("trials = 6\n"), "{text}");

    std::fs::write(&cfg, "[smin]\nwidth = 3\n").unwrap();
    let o = heavytail(&["smin", "--config", path(&cfg), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_environment_variable_wins() {
    let o = Command::new(env!("CARGO_BIN_EXE_heavytail"))
        .args(["smin", "--seed", "5", "--print-config"])
        .env("HEAVYTAIL_SEED", "99")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("seed = 99\n"));
}

#[test]
fn exit_codes() {
    assert_eq!(heavytail(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(heavytail(&["smin", "--n", "1"]).status.code(), Some(2));
    assert_eq!(heavytail(&["smin", "--eps", "0.2,0.1"]).status.code(), Some(2));
    assert_eq!(heavytail(&["report"]).status.code(), Some(2));

    // A constant empirical law has no Levy pair: a numerical failure.
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("const.txt");
    std::fs::write(&samples, "1\n1\n1\n1\n").unwrap();
    let v = dir.path().join("v.txt");
    std::fs::write(&v, "1\n0\n").unwrap();
    let spec = format!("empirical:{}", path(&samples));
    let o = heavytail(&["smallball", "--vector-file", path(&v), "--dist", &spec, "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn report_pools_runs_and_rejects_mixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let o = heavytail(&["smin", "--n", "10", "--trials", "30", "--seed", seed, "--out", path(&out)]);
        assert_eq!(o.status.code(), Some(0));
        csvs.push(out.join("smin.csv"));
    }
    let merged = dir.path().join("merged");
    let o = heavytail(&["report", path(&csvs[0]), path(&csvs[1]), "--out", path(&merged)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("rows = 60"), "{text}");
    assert!(text.contains("p_eps_0.1 = "));

    let cov = dir.path().join("cov");
    heavytail(&["cover", "--n", "4", "--trials", "2", "--out", path(&cov)]);
    let o = heavytail(&["report", path(&csvs[0]), path(&cov.join("cover.csv")), "--out", path(&merged)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cover.csv"));
}
