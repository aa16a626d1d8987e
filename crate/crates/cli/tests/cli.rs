use std::fs;
use std::path::Path;
use std::process::Command;

use qcd_cli::commands::{delay_mc, fmt, verify_outcome, RECORDS_HEADER};
use qcd_cli::{
    cmd_calibrate, cmd_oc_sweep, cmd_simulate, cmd_verify, CliError, RunConfig, VerifyOptions,
};
use qcd_core::montecarlo::{asymptotic_ratio_sweep, McEstimate};
use qcd_core::verify::Fault;

const AR: &str = r#"
[scenario]
model = "ar"

[[scenario.channels]]
coeffs = [0.3]
sigma = 1.0
signal = [1.0]

[[scenario.channels]]
sigma = 1.0
signal = [1.0]

[prior]
kind = "geometric"
rho = 0.02

[detector]
kind = "shiryaev_mixture"

[target]
alpha = 0.05

[grid]
points = [[0.6, 0.6], [1.2, 1.2]]

[mc]
replications = 120
master_seed = 11
horizon = 1500

[change]
subset = [1]
theta = [1.0]
moments = [1.0, 2.0]

[sweep]
alphas = [0.1, 0.01]
"#;

const MIXTURE: &str = r#"
output = "results"

[scenario]
model = "mixture"

[[scenario.channels]]
beta_mix = 0.4
mu1 = -2.0
mu2 = 0.0
sigma = 1.0

[[scenario.channels]]
beta_mix = 0.4
mu1 = -2.0
mu2 = 0.0
sigma = 1.0

[[scenario.channels]]
beta_mix = 0.4
mu1 = -2.0
mu2 = 0.0
sigma = 1.0

[prior]
kind = "polynomial_tail"
beta = 2.5
q = 0.1

[detector]
kind = "sr_putative"
threshold = 500.0
window = 40
head_start = 2.0
putative_theta = [1.0, 1.0, 1.0]

[grid]
points = [[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]
weights = [0.25, 0.75]
p = [1.0, 2.0, 0.5]
k = 2

[mc]
replications = 50
master_seed = 3
horizon = 400
workers = 2
"#;

fn ar() -> RunConfig {
    RunConfig::from_toml(AR).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn config_round_trip() {
    for text in [AR, MIXTURE] {
        let a = RunConfig::from_toml(text).unwrap();
        let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        a.resolve().unwrap();
    }
}

#[test]
fn config_cross_validation() {
    let bad = |edit: &dyn Fn(&mut RunConfig)| {
        let mut c = ar();
        edit(&mut c);
        c.resolve().unwrap_err()
    };
    let e = bad(&|c| {
        c.detector.kind = qcd_core::DetectorKind::SrMixture;
        c.prior = qcd_core::PriorSpec::polynomial_tail(1.0, 0.0).unwrap();
    });
    assert!(e.to_string().contains("finite mean"), "{e}");

    let e = bad(&|c| {
        c.prior = qcd_core::PriorSpec::geometric(0.1, 0.5).unwrap();
        c.detector.threshold = Some(0.5);
    });
    assert_eq!(e.exit_code(), 2);

    let e = bad(&|c| c.grid.points = vec![vec![1.0, 1.0, 1.0]]);
    assert!(e.to_string().contains("streams"), "{e}");

    let e = bad(&|c| c.grid.p = Some(vec![1.0]));
    assert_eq!(e.exit_code(), 2);

    let e = bad(&|c| c.change.as_mut().unwrap().subset = vec![5]);
    assert_eq!(e.exit_code(), 2);

    let e = RunConfig::from_toml(&format!("{AR}\n[extra]\nx = 1\n")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn calibrate_alpha_and_cost() {
    let report = cmd_calibrate(&ar(), None).unwrap();
    assert!((report.threshold - 19.0).abs() < 1e-12);
    assert!((report.nominal_pfa.unwrap() - 0.05).abs() < 1e-15);

    let mut c = ar();
    c.prior = qcd_core::PriorSpec::geometric(0.02, 0.96).unwrap();
    let e = cmd_calibrate(&c, None).unwrap_err();
    assert!(matches!(e, CliError::Config(_)));

    let mut c = ar();
    let target = c.target.as_mut().unwrap();
    target.alpha = None;
    target.cost = Some(1e-3);
    target.r = 1.0;
    target.d = Some(1.0);
    let report = cmd_calibrate(&c, None).unwrap();
    assert!((report.threshold - 1000.0).abs() < 1e-9);

    let mut c = ar();
    c.target = None;
    assert_eq!(cmd_calibrate(&c, None).unwrap_err().exit_code(), 2);

    let dir = tempfile::tempdir().unwrap();
    let report = cmd_calibrate(&ar(), Some(&dir.path().join("cal"))).unwrap();
    let text = fs::read_to_string(dir.path().join("cal/calibration.json")).unwrap();
    let written: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(written["threshold"].as_f64(), Some(report.threshold));
}

#[test]
fn calibrate_cost_with_computed_d() {
    let mut c = ar();
    let target = c.target.as_mut().unwrap();
    target.alpha = None;
    target.cost = Some(1e-4);
    let weights = c.weights().unwrap();
    let grid = c.grid_spec().unwrap();
    let d = c.d_constant(&weights, &grid, 1.0).unwrap();
    let report = cmd_calibrate(&c, None).unwrap();
    assert!((report.threshold - 1.0 / (1e-4 * d)).abs() < 1e-6 * report.threshold);
}

#[test]
fn simulate_rejects_zero_replications() {
    let mut c = ar();
    c.mc.replications = 0;
    let dir = tempfile::tempdir().unwrap();
    let e = cmd_simulate(&c, dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn simulate_is_deterministic_across_reruns_and_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = ar();
    cmd_simulate(&c, a.path()).unwrap();
    c.mc.workers = 4;
    cmd_simulate(&c, b.path()).unwrap();
    for name in ["records.csv", "summary.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn summary_recomputes_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_simulate(&ar(), dir.path()).unwrap();
    let (header, rows) = read_csv(&out.records);
    assert_eq!(header, RECORDS_HEADER);
    assert_eq!(rows.len(), 120);

    let tails: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    let pfa = McEstimate::from_values(&tails, 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out.summary_path).unwrap()).unwrap();
    let mean = summary["pfa"]["estimate"]["mean"].as_f64().unwrap();
    let se = summary["pfa"]["estimate"]["stderr"].as_f64().unwrap();
    assert!((mean - pfa.mean).abs() <= 1e-12);
    assert!((se - pfa.stderr).abs() <= 1e-12);

    for (i, moment) in summary["moments"].as_array().unwrap().iter().enumerate() {
        let r = moment["order"].as_f64().unwrap();
        let delays: Vec<f64> = rows
            .iter()
            .filter(|row| !row[4].is_empty())
            .map(|row| row[4].parse::<f64>().unwrap().powf(r))
            .collect();
        let est = McEstimate::from_values(&delays, 0);
        let mean = moment["estimate"]["mean"].as_f64().unwrap();
        assert!(
            (mean - est.mean).abs() <= 1e-12 * est.mean.max(1.0),
            "order {r}"
        );
        assert_eq!(
            out.summary.moments[i].delay.estimate.n_effective,
            delays.len()
        );
    }

    for row in &rows {
        let censored: bool = row[3].parse().unwrap();
        assert_eq!(censored, row[2].is_empty());
        if let (Ok(nu), Ok(t), Ok(d)) = (
            row[1].parse::<i64>(),
            row[2].parse::<i64>(),
            row[4].parse::<f64>(),
        ) {
            assert_eq!(d, (t - nu.max(0)) as f64);
        }
    }
}

#[test]
fn float_text_round_trips() {
    for x in [
        0.1,
        1.0 / 3.0,
        1.8451190369623434e-9,
        1e300,
        5e-324,
        12345.678,
        0.0,
        -2.5e-7,
    ] {
        assert_eq!(fmt(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}

#[test]
fn oc_sweep_rows_follow_the_grid() {
    let mut c = ar();
    c.sweep.as_mut().unwrap().alphas = vec![0.1];
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_oc_sweep(&c, dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    let (_, csv_rows) = read_csv(&dir.path().join("oc.csv"));
    assert_eq!(csv_rows.len(), 1);

    let c = ar();
    let dir = tempfile::tempdir().unwrap();
    cmd_oc_sweep(&c, dir.path()).unwrap();
    let (header, csv_rows) = read_csv(&dir.path().join("oc.csv"));
    assert_eq!(&header[..4], ["alpha", "A", "pfa_est", "pfa_se"]);
    assert_eq!(csv_rows.len(), 2);
    let a: Vec<f64> = csv_rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(a[0] < a[1]);

    let resolved = c.resolve().unwrap();
    let target = c.sweep_target().unwrap();
    let orders = &c.change.as_ref().unwrap().moments;
    let direct = asymptotic_ratio_sweep(
        &resolved.detector,
        &resolved.scenario,
        &target,
        &c.sweep.as_ref().unwrap().alphas,
        orders,
        &delay_mc(&resolved.mc),
    )
    .unwrap();
    for (i, row) in csv_rows.iter().enumerate() {
        for (j, r) in orders.iter().enumerate() {
            let col = header
                .iter()
                .position(|h| *h == format!("ratio_r{r}"))
                .unwrap();
            let parsed: f64 = row[col].parse().unwrap();
            assert_eq!(
                parsed.to_bits(),
                direct[i * orders.len() + j].ratio.to_bits()
            );
        }
    }
}

#[test]
fn verify_passes_and_catches_fault() {
    let reports = cmd_verify(&VerifyOptions::default(), None).unwrap();
    assert_eq!(reports.len(), 6);
    verify_outcome(&reports).unwrap();

    let opts = VerifyOptions {
        suite: "window".into(),
        fault: Some(Fault::WindowOffByOne),
        ..VerifyOptions::default()
    };
    let reports = cmd_verify(&opts, None).unwrap();
    assert!(!reports[0].passed);
    let e = verify_outcome(&reports).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("window"));

    let opts = VerifyOptions {
        suite: "nonsense".into(),
        ..VerifyOptions::default()
    };
    assert_eq!(cmd_verify(&opts, None).unwrap_err().exit_code(), 2);
}

#[test]
fn verify_across_ten_seeds() {
    for suite in [
        "recursion",
        "mixture_dp",
        "posterior",
        "telescoping",
        "window",
    ] {
        let opts = VerifyOptions {
            suite: suite.into(),
            seeds: 10,
            base_seed: 500,
            fault: None,
        };
        verify_outcome(&cmd_verify(&opts, None).unwrap()).unwrap();
    }
}

fn qcd() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qcd"));
    cmd.env_remove("QCD_WORKERS");
    cmd
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, AR).unwrap();

    let out = qcd()
        .args(["calibrate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["threshold"].as_f64().unwrap() - 19.0).abs() < 1e-12);

    let status = qcd()
        .args(["verify", "window", "--inject-fault", "window-off-by-one"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(3));

    let broken = dir.path().join("broken.toml");
    fs::write(&broken, AR.replace("rho = 0.02", "rho = 2.0")).unwrap();
    let status = qcd()
        .args(["simulate", "--config"])
        .arg(&broken)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));

    let short = dir.path().join("short.toml");
    fs::write(
        &short,
        AR.replace("rho = 0.02", "rho = 0.001")
            .replace("horizon = 1500", "horizon = 20")
            .replace("alpha = 0.05", "alpha = 1e-6"),
    )
    .unwrap();
    let out_dir = dir.path().join("short");
    let status = qcd()
        .args(["simulate", "--config"])
        .arg(&short)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(4));
    assert!(out_dir.join("summary.json").exists());

    let missing = qcd()
        .args(["simulate", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap()
        .status;
    assert_eq!(missing.code(), Some(1));
}

#[test]
fn binary_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, AR).unwrap();
    let run = |seed: &str, workers: Option<&str>, out: &str| {
        let mut cmd = qcd();
        cmd.args(["simulate", "--config"]).arg(&config);
        cmd.args(["--seed", seed, "--out"])
            .arg(dir.path().join(out));
        if let Some(w) = workers {
            cmd.env("QCD_WORKERS", w);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.path().join(out).join("records.csv")).unwrap()
    };
    let a = run("5", None, "a");
    let b = run("5", Some("3"), "b");
    let c = run("6", None, "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}
