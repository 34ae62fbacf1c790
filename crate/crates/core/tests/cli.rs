//! End-to-end runs of the `xfund` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn xfund(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfund"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn xfund_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfund"))
        .args(args)
        .env("XFUND_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const ONE_ASSET: &str = r#"
[grid]
t_end = 1.0
steps = 20

[[market.accounts]]
label = "Bl"
rate = 0.02

[[market.accounts]]
label = "Bb"
rate = 0.06

[[market.accounts]]
label = "B1"
rate = 0.03

[[market.assets]]
index = 1
s0 = 100.0
mu = 0.08
sigma = 0.25
funding = "B1"

[convention]
type = "split_cash_rates"
lend = "Bl"
borrow = "Bb"
repo = ["B1"]
k = 0

[strategy]
type = "zero"

[solver]
x = 3.0
seed = 11
paths = 5
"#;

#[test]
fn loan_config_prices_to_the_closed_form() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("loan.toml");
    let o = xfund(&[
        "price",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = read_json(&out.path().join("price.json"));
    let s0 = v["s0"].as_f64().unwrap();
    let expected = (-0.02f64).exp() * ((0.02f64 * 0.5).exp() - (0.05f64 * 0.5).exp());
    assert!((s0 - expected).abs() <= 1e-6, "{s0} vs {expected}");
    assert!((s0 + 0.014963).abs() < 1e-6);
    assert!(v["sign_convention"].as_str().unwrap().contains("hedger"));
    let csv = std::fs::read_to_string(out.path().join("price.csv")).unwrap();
    assert!(csv.starts_with("t,node,Y,picard_iters,residual\n"));
}

#[test]
fn zero_strategy_wealth_is_endowment_in_lending_account() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "zero.toml", ONE_ASSET);
    let out = dir.path().join("out");
    let o = xfund(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("wealth.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let (ct, cv, cb) = (col("t"), col("V"), col("B_l"));
    let mut rows = 0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let t = f[ct];
        assert!((f[cv] - 3.0 * f[cb]).abs() <= 1e-12 * f[cb], "{line}");
        assert!((f[cb] - (0.02 * t).exp()).abs() <= 1e-13, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 5 * 21);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "s.toml",
        &ONE_ASSET.replace("type = \"zero\"", "type = \"buy_and_hold\"\nunits = [0.5]"),
    );
    let run = |sub: &str, threads: &str| {
        let out = dir.path().join(format!("{sub}-{threads}"));
        let o = xfund_env(
            &["simulate", "--config", &cfg, "--out", out.to_str().unwrap()],
            threads,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(out.join("simulate.json")).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "4"));

    let report = |name: &str| {
        let out = dir.path().join(name);
        let o = xfund(&[
            "validate-paper",
            "--suite",
            "driver_collapse",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (
            std::fs::read(out.join("report.json")).unwrap(),
            std::fs::read(out.join("report.csv")).unwrap(),
        )
    };
    assert_eq!(report("r1"), report("r2"));
}

#[test]
fn seed_changes_simulated_paths() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "s.toml",
        &ONE_ASSET.replace("type = \"zero\"", "type = \"buy_and_hold\"\nunits = [0.5]"),
    );
    let run = |seed: &str| {
        let out = dir.path().join(seed);
        let o = xfund(&[
            "simulate",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
            "--format",
            "csv",
        ]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(out.join("wealth.csv")).unwrap()
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn schema_violations_exit_two_with_field_path() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(
        &dir,
        "bad.toml",
        &ONE_ASSET.replace("sigma = 0.25", "sigma = 0.25\nvol = 0.3"),
    );
    let o = xfund(&["price", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("market.assets[0].vol"),
        "{}",
        stderr(&o)
    );

    let wrong = write_config(
        &dir,
        "wrong.toml",
        &ONE_ASSET.replace("repo = [\"B1\"]", "repo = [\"B9\"]"),
    );
    let o = xfund(&["price", "--config", &wrong]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("convention.repo[0]"), "{}", stderr(&o));

    assert_eq!(xfund(&["price"]).status.code(), Some(2));
    assert_eq!(xfund(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        xfund(&[
            "validate-paper",
            "--suite",
            "nope",
            "--out",
            dir.path().to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn numeric_failures_exit_three() {
    let dir = TempDir::new().unwrap();
    // Drift far above the volatility band: no up probability in (0, 1).
    let stiff = ONE_ASSET
        .replace("sigma = 0.25", "sigma = 0.001")
        .replace("rate = 0.03", "rate = 0.9");
    let cfg = write_config(&dir, "stiff.toml", &stiff);
    let o = xfund(&[
        "price",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));

    let ex = configs().join("example.toml");
    let o = xfund(&[
        "price",
        "--method",
        "gamma",
        "--config",
        ex.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn example_config_runs_every_command() {
    let out = TempDir::new().unwrap();
    let ex = configs().join("example.toml");
    let ex = ex.to_str().unwrap();
    let o = out.path().to_str().unwrap();
    for args in [
        vec!["price", "--config", ex, "--out", o],
        vec![
            "price",
            "--method",
            "fully-collateralized",
            "--config",
            ex,
            "--out",
            o,
        ],
        vec!["simulate", "--config", ex, "--out", o],
        vec!["check-arbitrage", "--config", ex, "--out", o],
        vec!["adjustments", "--config", ex, "--out", o],
    ] {
        let r = xfund(&args);
        assert_eq!(r.status.code(), Some(0), "{args:?}: {}", stderr(&r));
    }
    let verdict = read_json(&out.path().join("verdict.json"));
    for key in ["outcome", "gap_min", "gap_max", "witness"] {
        assert!(verdict.get(key).is_some(), "{key}");
    }
    let adj = std::fs::read_to_string(out.path().join("adjustments.csv")).unwrap();
    assert!(adj.starts_with("t,TFA"));
    let price = std::fs::read_to_string(out.path().join("price.csv")).unwrap();
    assert!(price.starts_with("t,node,S,xi_1,xi_2\n"));
}

#[test]
fn deterministic_carry_trade_is_found() {
    // Lending above borrowing: receive 1 now, lend it, repay at the low rate.
    let text = r#"
[grid]
t_end = 1.0
steps = 10

[[market.accounts]]
label = "Bl"
rate = 0.05

[[market.accounts]]
label = "Bb"
rate = 0.02

[contract]
p = 1.0

[[contract.flows]]
t = 1.0
amount = -1.0202013400267558

[convention]
type = "split_cash_rates"
lend = "Bl"
borrow = "Bb"
repo = []
k = 0

[output]
format = "json"
"#;
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "carry.toml", text);
    let out = dir.path().join("out");
    let o = xfund(&[
        "check-arbitrage",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = read_json(&out.join("verdict.json"));
    assert_eq!(v["outcome"], "arbitrage_found");
    let gain = (0.05f64).exp() - (0.02f64).exp();
    assert!((v["gap_max"].as_f64().unwrap() - gain).abs() < 1e-12, "{v}");
    // A tolerance above the gain withdraws the finding.
    let o = xfund(&[
        "check-arbitrage",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--tol",
        "1.0",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        read_json(&out.join("verdict.json"))["outcome"],
        "no_arbitrage_witnessed"
    );
}

#[test]
fn validate_paper_full_suite_passes() {
    let out = TempDir::new().unwrap();
    let o = xfund(&[
        "validate-paper",
        "--suite",
        "all",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let v = read_json(&out.path().join("report.json"));
    assert_eq!(v["failed"], 0);
    assert!(v["passed"].as_u64().unwrap() >= 12);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
}
