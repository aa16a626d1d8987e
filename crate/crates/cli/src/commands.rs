use std::fs;
use std::path::{Path, PathBuf};

use qcd_core::montecarlo::{
    asymptotic_ratio_sweep, bayes_delay_records, delay_moment, estimate_pfa, pfa_records,
    summarize_pfa, DelayEstimate, DelayRecord, PfaEstimate, PfaRecord, RatioRow,
};
use qcd_core::verify::{run_suite, Fault, Suite, SuiteReport};
use qcd_core::{McConfig, Stop};
use serde::Serialize;

use crate::config::{Calibration, RunConfig};
use crate::CliError;

/// Seed offset separating change-path replications from the `P_∞` ones.
const DELAY_SEED_OFFSET: u64 = 0xD1B5_4A32_D192_ED03;

/// Replication settings for the post-change paths of a run.
pub fn delay_mc(mc: &McConfig) -> McConfig {
    mc.with_seed(mc.master_seed.wrapping_add(DELAY_SEED_OFFSET))
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt(x: f64) -> String {
    if x != 0.0 && x.is_finite() && !(1e-4..1e16).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub kind: qcd_core::DetectorKind,
    pub threshold: f64,
    pub log_threshold: f64,
    pub formula: String,
    pub nominal_pfa: Option<f64>,
}

/// Threshold from `[target]`; written to `out/calibration.json` when `out` is given.
pub fn cmd_calibrate(
    config: &RunConfig,
    out: Option<&Path>,
) -> Result<CalibrationReport, CliError> {
    let weights = config.weights()?;
    let grid = config.grid_spec()?;
    let Calibration { threshold, formula } = config.calibrate(&weights, &grid)?;
    let mut checked = config.clone();
    checked.detector.threshold = Some(threshold);
    let resolved = checked.resolve()?;
    let report = CalibrationReport {
        kind: config.detector.kind,
        threshold,
        log_threshold: threshold.ln(),
        formula,
        nominal_pfa: resolved.detector.nominal_pfa(),
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("calibration.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSummary {
    pub order: f64,
    #[serde(flatten)]
    pub delay: DelayEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub replications: usize,
    pub master_seed: u64,
    pub horizon: usize,
    pub threshold: f64,
    pub formula: String,
    pub pfa: PfaEstimate,
    pub false_alarm_fraction: f64,
    pub moments: Vec<MomentSummary>,
}

/// Files written by [`cmd_simulate`].
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub records: PathBuf,
    pub summary_path: PathBuf,
    pub summary: SimulationSummary,
}

pub const RECORDS_HEADER: [&str; 8] = [
    "replication",
    "nu",
    "stopped_at",
    "censored",
    "delay",
    "null_stopped_at",
    "null_censored",
    "prior_tail",
];

fn write_records(path: &Path, null: &[PfaRecord], change: &[DelayRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORDS_HEADER)?;
    for (i, (n, c)) in null.iter().zip(change).enumerate() {
        w.write_record([
            i.to_string(),
            c.nu.to_string(),
            fmt_opt(c.stop.time()),
            (c.stop == Stop::Censored).to_string(),
            fmt_opt(c.delay()),
            fmt_opt(n.stop.time()),
            (n.stop == Stop::Censored).to_string(),
            fmt(n.prior_tail),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-replication stopping times under `P_∞` and under a change drawn from the prior.
///
/// Writes `records.csv` and `summary.json` into `out`. Returns a horizon error
/// after writing when censoring leaves the PFA estimate unreliable.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<SimulationOutput, CliError> {
    let resolved = config.resolve()?;
    let target = config.sweep_target()?;
    let moments = config
        .change
        .as_ref()
        .map(|c| c.moments.clone())
        .unwrap_or_default();
    let mc = resolved.mc;
    let detector = &resolved.detector;

    let null = pfa_records(detector, &resolved.scenario, &mc)?;
    let change = bayes_delay_records(
        detector,
        &resolved.scenario,
        &resolved.prior,
        &target.subset,
        &target.theta,
        &delay_mc(&mc),
    )?;
    let pfa = summarize_pfa(detector, &null, mc.horizon);
    let false_alarms = change.iter().filter(|d| d.false_alarm()).count();
    let summary = SimulationSummary {
        replications: mc.replications,
        master_seed: mc.master_seed,
        horizon: mc.horizon,
        threshold: detector.threshold(),
        formula: resolved.calibration.formula.clone(),
        pfa,
        false_alarm_fraction: false_alarms as f64 / change.len() as f64,
        moments: moments
            .iter()
            .map(|&r| MomentSummary {
                order: r,
                delay: delay_moment(&change, r),
            })
            .collect(),
    };

    create_dir(out)?;
    let records = out.join("records.csv");
    let summary_path = out.join("summary.json");
    write_records(&records, &null, &change)?;
    write_json(&summary_path, &summary)?;
    if !pfa.horizon_sufficient {
        pfa.require_sufficient_horizon(mc.horizon)?;
    }
    Ok(SimulationOutput {
        records,
        summary_path,
        summary,
    })
}

/// One `oc.csv` row: PFA at the calibrated threshold and the delay rows for each order.
#[derive(Debug, Clone, PartialEq)]
pub struct OcRow {
    pub alpha: f64,
    pub threshold: f64,
    pub pfa: PfaEstimate,
    pub ratios: Vec<RatioRow>,
}

/// Operating characteristic over `sweep.alphas`, written to `out/oc.csv`.
pub fn cmd_oc_sweep(config: &RunConfig, out: &Path) -> Result<Vec<OcRow>, CliError> {
    let resolved = config.resolve()?;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("no [sweep] section".into()))?;
    let target = config.sweep_target()?;
    let orders = config
        .change
        .as_ref()
        .map(|c| c.moments.clone())
        .unwrap_or_default();
    let mc = resolved.mc;
    let detector = &resolved.detector;

    let ratios = asymptotic_ratio_sweep(
        detector,
        &resolved.scenario,
        &target,
        &sweep.alphas,
        &orders,
        &delay_mc(&mc),
    )?;
    let mut rows = Vec::with_capacity(sweep.alphas.len());
    for (i, &alpha) in sweep.alphas.iter().enumerate() {
        let block = ratios[i * orders.len()..(i + 1) * orders.len()].to_vec();
        let threshold = qcd_core::montecarlo::threshold_for_alpha(detector, alpha)?;
        let pfa = estimate_pfa(
            &detector.with_threshold(threshold)?,
            &resolved.scenario,
            &mc,
        )?;
        rows.push(OcRow {
            alpha,
            threshold,
            pfa,
            ratios: block,
        });
    }

    create_dir(out)?;
    let path = out.join("oc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = [
        "alpha",
        "A",
        "pfa_est",
        "pfa_se",
        "pfa_censored",
        "horizon_sufficient",
    ]
    .map(String::from)
    .to_vec();
    for r in &orders {
        for col in ["delay_est", "delay_se", "first_order", "ratio", "ratio_se"] {
            header.push(format!("{col}_r{r}"));
        }
    }
    w.write_record(&header)?;
    for row in &rows {
        let mut rec = vec![
            fmt(row.alpha),
            fmt(row.threshold),
            fmt(row.pfa.estimate.mean),
            fmt(row.pfa.estimate.stderr),
            fmt(row.pfa.estimate.censored_fraction),
            row.pfa.horizon_sufficient.to_string(),
        ];
        for ratio in &row.ratios {
            rec.extend([
                fmt(ratio.delay.estimate.mean),
                fmt(ratio.delay.estimate.stderr),
                fmt(ratio.first_order),
                fmt(ratio.ratio),
                fmt(ratio.ratio_se),
            ]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(row) = rows.iter().find(|r| !r.pfa.horizon_sufficient) {
        row.pfa.require_sufficient_horizon(mc.horizon)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Suite name, or `all`.
    pub suite: String,
    pub seeds: usize,
    pub base_seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            suite: "all".into(),
            seeds: 3,
            base_seed: 1,
            fault: None,
        }
    }
}

pub fn parse_fault(name: &str) -> Result<Fault, CliError> {
    match name {
        "window-off-by-one" | "window_off_by_one" => Ok(Fault::WindowOffByOne),
        _ => Err(CliError::Config(format!("unknown fault `{name}`"))),
    }
}

/// Runs the selected oracle suites; a failing suite is reported, not raised.
pub fn cmd_verify(opts: &VerifyOptions, out: Option<&Path>) -> Result<Vec<SuiteReport>, CliError> {
    let suites: Vec<Suite> = if opts.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(&opts.suite).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            CliError::Config(format!(
                "unknown suite `{}`; expected all or one of {}",
                opts.suite,
                names.join(", ")
            ))
        })?]
    };
    if opts.seeds == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..opts.seeds as u64)
        .map(|i| opts.base_seed.wrapping_add(i))
        .collect();
    let reports = suites
        .into_iter()
        .map(|s| run_suite(s, &seeds, opts.fault))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(path, &reports)?;
    }
    Ok(reports)
}

/// Exit status for a set of suite reports.
pub fn verify_outcome(reports: &[SuiteReport]) -> Result<(), CliError> {
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.suite)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
