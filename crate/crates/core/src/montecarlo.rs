//! Replicated simulation: PFA, delay moments, average risk and asymptotic ratios.
//!
//! Replication `j` draws from `ChaCha8Rng::seed_from_u64(master_seed)` on stream `j`,
//! so every estimate depends on the seed alone and never on the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{threshold_shiryaev, threshold_sr, Detector, Stop};
use crate::error::{QcdError, Result};
use crate::likelihood::SubsetWeights;
use crate::model::{ChangeSpec, PriorSpec};
use crate::scenarios::ScenarioSpec;
use crate::statistics::GridSpec;

/// Seed offset for the delay half of the average-risk estimate.
const RISK_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub replications: usize,
    pub master_seed: u64,
    pub horizon: usize,
    #[serde(default = "one_worker")]
    pub workers: usize,
}

fn one_worker() -> usize {
    1
}

impl McConfig {
    pub fn new(
        replications: usize,
        master_seed: u64,
        horizon: usize,
        workers: usize,
    ) -> Result<Self> {
        let mc = McConfig {
            replications,
            master_seed,
            horizon,
            workers,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(QcdError::invalid("replications", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(QcdError::invalid("horizon", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(QcdError::invalid("workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, master_seed: u64) -> Self {
        McConfig {
            master_seed,
            ..self
        }
    }

    pub fn with_workers(self, workers: usize) -> Self {
        McConfig { workers, ..self }
    }

    /// Generator of replication `index`.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_effective: usize,
    pub censored_fraction: f64,
}

impl McEstimate {
    /// Sample mean and `sd / sqrt(n)`; `censored` runs were excluded from `values`.
    pub fn from_values(values: &[f64], censored: usize) -> Self {
        let mut acc = Accumulator::default();
        values.iter().for_each(|&v| acc.push(v));
        acc.estimate(censored)
    }
}

/// Count, sum and sum of squares; merging shards gives the single-pass totals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        ((self.sum_sq - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn estimate(&self, censored: usize) -> McEstimate {
        let total = self.count + censored;
        McEstimate {
            mean: self.mean(),
            stderr: if self.count == 0 {
                f64::NAN
            } else {
                (self.variance() / self.count as f64).sqrt()
            },
            n_effective: self.count,
            censored_fraction: if total == 0 {
                0.0
            } else {
                censored as f64 / total as f64
            },
        }
    }
}

/// Runs `f(index, rng)` for every replication on `mc.workers` threads, in index order.
pub fn run_replications<T, F>(mc: &McConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    mc.validate()?;
    let work = |idx: usize| {
        let mut rng = mc.rng(idx);
        f(idx, &mut rng)
    };
    if mc.workers == 1 {
        return Ok((0..mc.replications).map(work).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(mc.workers)
        .build()
        .map_err(|e| QcdError::invalid("workers", e.to_string()))?;
    Ok(pool.install(|| (0..mc.replications).into_par_iter().map(work).collect()))
}

/// Rao-Blackwellized PFA with its horizon diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfaEstimate {
    pub estimate: McEstimate,
    /// `P(ν ≥ horizon + 1)`, charged to every censored run.
    pub tail_beyond_horizon: f64,
    /// Nominal bound of the rule, when it has one.
    pub nominal: Option<f64>,
    /// `tail_beyond_horizon < 1e-3 · nominal`.
    pub horizon_sufficient: bool,
}

impl PfaEstimate {
    pub fn require_sufficient_horizon(&self, horizon: usize) -> Result<McEstimate> {
        if self.horizon_sufficient {
            Ok(self.estimate)
        } else {
            Err(QcdError::InsufficientHorizon {
                horizon,
                tail: self.tail_beyond_horizon,
                limit: 1e-3 * self.nominal.unwrap_or(0.0),
            })
        }
    }
}

/// Per-replication false-alarm record under `P_∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfaRecord {
    pub stop: Stop,
    /// `P(ν ≥ T)`, or `P(ν ≥ horizon + 1)` when censored.
    pub prior_tail: f64,
}

pub fn pfa_records(
    detector: &Detector,
    scenario: &ScenarioSpec,
    mc: &McConfig,
) -> Result<Vec<PfaRecord>> {
    let prior = detector.prior();
    let censored_tail = prior.tail(mc.horizon as u64 + 1);
    run_replications(mc, |_, rng| -> Result<PfaRecord> {
        let stop = detector.stopping_time(scenario, None, mc.horizon, rng)?;
        let prior_tail = match stop {
            Stop::At(t) => prior.tail(t as u64),
            Stop::Censored => censored_tail,
        };
        Ok(PfaRecord { stop, prior_tail })
    })?
    .into_iter()
    .collect()
}

/// `E_∞[P(ν ≥ T)]`, which equals `Σ_k π_k P_∞(T ≤ k)`.
pub fn estimate_pfa(
    detector: &Detector,
    scenario: &ScenarioSpec,
    mc: &McConfig,
) -> Result<PfaEstimate> {
    let records = pfa_records(detector, scenario, mc)?;
    Ok(summarize_pfa(detector, &records, mc.horizon))
}

pub fn summarize_pfa(detector: &Detector, records: &[PfaRecord], horizon: usize) -> PfaEstimate {
    let values: Vec<f64> = records.iter().map(|r| r.prior_tail).collect();
    let censored = records.iter().filter(|r| r.stop == Stop::Censored).count();
    let mut estimate = McEstimate::from_values(&values, 0);
    estimate.censored_fraction = censored as f64 / records.len().max(1) as f64;
    let tail = detector.prior().tail(horizon as u64 + 1);
    let nominal = detector.nominal_pfa();
    PfaEstimate {
        estimate,
        tail_beyond_horizon: tail,
        nominal,
        horizon_sufficient: censored == 0 || nominal.is_some_and(|a| tail < 1e-3 * a),
    }
}

/// Two-stage estimate: draw `ν`, simulate with the change, count `T ≤ ν`.
pub fn estimate_pfa_naive(
    detector: &Detector,
    scenario: &ScenarioSpec,
    change_subset: &[usize],
    change_theta: &[f64],
    mc: &McConfig,
) -> Result<McEstimate> {
    let values = run_replications(mc, |_, rng| -> Result<f64> {
        let nu = detector.prior().sample(rng);
        let change = ChangeSpec::new(nu, change_subset.to_vec(), change_theta.to_vec())?;
        let stop = detector.stopping_time(scenario, Some(&change), mc.horizon, rng)?;
        Ok(match stop {
            Stop::At(t) if (t as i64) <= nu => 1.0,
            _ => 0.0,
        })
    })?
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_values(&values, 0))
}

/// One simulated path with a change: where it stopped relative to `ν`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    pub nu: i64,
    pub stop: Stop,
}

impl DelayRecord {
    /// `T - max(ν, 0)` for a stop after the change.
    pub fn delay(&self) -> Option<f64> {
        let start = self.nu.max(0);
        match self.stop {
            Stop::At(t) if t as i64 > start => Some((t as i64 - start) as f64),
            _ => None,
        }
    }

    pub fn false_alarm(&self) -> bool {
        matches!(self.stop, Stop::At(t) if t as i64 <= self.nu.max(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Over runs with `T > ν`; `censored_fraction` counts censored runs among all.
    pub estimate: McEstimate,
    /// Runs with `T ≤ ν`.
    pub discarded: usize,
    pub censored: usize,
}

/// Moment `E[(T - ν)^r | T > ν]` from records.
pub fn delay_moment(records: &[DelayRecord], r: f64) -> DelayEstimate {
    let values: Vec<f64> = records
        .iter()
        .filter_map(|d| d.delay())
        .map(|d| d.powf(r))
        .collect();
    let censored = records.iter().filter(|d| d.stop == Stop::Censored).count();
    let discarded = records.iter().filter(|d| d.false_alarm()).count();
    let mut estimate = McEstimate::from_values(&values, 0);
    estimate.censored_fraction = censored as f64 / records.len().max(1) as f64;
    DelayEstimate {
        estimate,
        discarded,
        censored,
    }
}

fn check_order(r: f64) -> Result<()> {
    if !(r.is_finite() && r >= 1.0) {
        return Err(QcdError::invalid("r", format!("must be >= 1, got {r}")));
    }
    Ok(())
}

/// Records for a change at the fixed point `change.nu`.
pub fn conditional_delay_records(
    detector: &Detector,
    scenario: &ScenarioSpec,
    change: &ChangeSpec,
    mc: &McConfig,
) -> Result<Vec<DelayRecord>> {
    scenario.check_change(change)?;
    if change.nu.max(0) as usize >= mc.horizon {
        return Err(QcdError::invalid("horizon", "must exceed the change point"));
    }
    run_replications(mc, |_, rng| -> Result<DelayRecord> {
        let stop = detector.stopping_time(scenario, Some(change), mc.horizon, rng)?;
        Ok(DelayRecord {
            nu: change.nu,
            stop,
        })
    })?
    .into_iter()
    .collect()
}

/// `E_{k,B,θ}[(T - k)^r | T > k]`.
pub fn estimate_conditional_delay(
    detector: &Detector,
    scenario: &ScenarioSpec,
    change: &ChangeSpec,
    r: f64,
    mc: &McConfig,
) -> Result<DelayEstimate> {
    check_order(r)?;
    Ok(delay_moment(
        &conditional_delay_records(detector, scenario, change, mc)?,
        r,
    ))
}

/// Records with `ν` drawn from `prior` in each replication.
pub fn bayes_delay_records(
    detector: &Detector,
    scenario: &ScenarioSpec,
    prior: &PriorSpec,
    subset: &[usize],
    theta: &[f64],
    mc: &McConfig,
) -> Result<Vec<DelayRecord>> {
    scenario.check_change(&ChangeSpec::new(0, subset.to_vec(), theta.to_vec())?)?;
    run_replications(mc, |_, rng| -> Result<DelayRecord> {
        let nu = prior.sample(rng);
        let change = ChangeSpec::new(nu, subset.to_vec(), theta.to_vec())?;
        let stop = detector.stopping_time(scenario, Some(&change), mc.horizon, rng)?;
        Ok(DelayRecord { nu, stop })
    })?
    .into_iter()
    .collect()
}

/// `E^π_{B,θ}[(T - ν)^r | T > ν]`.
pub fn estimate_bayes_delay(
    detector: &Detector,
    scenario: &ScenarioSpec,
    prior: &PriorSpec,
    subset: &[usize],
    theta: &[f64],
    r: f64,
    mc: &McConfig,
) -> Result<DelayEstimate> {
    check_order(r)?;
    Ok(delay_moment(
        &bayes_delay_records(detector, scenario, prior, subset, theta, mc)?,
        r,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub estimate: McEstimate,
    pub pfa: PfaEstimate,
    /// `E[((T - ν)^+)^r]` with censored runs stopped at the horizon.
    pub delay_moment: McEstimate,
}

/// Draws an index from unnormalized log weights.
fn sample_log_weighted<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_w.iter().map(|w| (w - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in log_w.iter().enumerate() {
        u -= (w - max).exp();
        if u < 0.0 {
            return i;
        }
    }
    log_w.len() - 1
}

/// `PFA + c Σ_B p_B Σ_θ w_θ E^π_{B,θ}[((T - ν)^+)^r]`.
///
/// The PFA term reuses `estimate_pfa` on the same seed; the delay term draws
/// `(ν, B, θ)` from `(prior, p_B, W)` on a derived seed.
#[allow(clippy::too_many_arguments)]
pub fn estimate_average_risk(
    detector: &Detector,
    scenario: &ScenarioSpec,
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    c: f64,
    r: f64,
    mc: &McConfig,
) -> Result<RiskEstimate> {
    check_order(r)?;
    if !(c.is_finite() && c >= 0.0) {
        return Err(QcdError::invalid("c", format!("must be >= 0, got {c}")));
    }
    if grid.streams() != scenario.streams() || weights.streams() != scenario.streams() {
        return Err(QcdError::invalid(
            "grid",
            "stream count differs from the scenario",
        ));
    }
    let pfa = estimate_pfa(detector, scenario, mc)?;
    if c == 0.0 {
        return Ok(RiskEstimate {
            estimate: pfa.estimate,
            pfa,
            delay_moment: McEstimate::from_values(&[], 0),
        });
    }
    let subsets = weights.subsets()?;
    let log_pb: Vec<f64> = subsets.iter().map(|s| s.1).collect();
    let delay_mc = mc.with_seed(mc.master_seed.wrapping_add(RISK_SEED_OFFSET));
    let outcomes = run_replications(&delay_mc, |_, rng| -> Result<(f64, bool)> {
        let nu = prior.sample(rng);
        let (mask, _) = subsets[sample_log_weighted(&log_pb, rng)];
        let g = sample_log_weighted(grid.log_weights(), rng);
        let subset: Vec<usize> = crate::likelihood::bits(mask).collect();
        let theta: Vec<f64> = subset.iter().map(|&i| grid.point(g)[i]).collect();
        let change = ChangeSpec::new(nu, subset, theta)?;
        let stop = detector.stopping_time(scenario, Some(&change), mc.horizon, rng)?;
        let (t, censored) = match stop {
            Stop::At(t) => (t as i64, false),
            Stop::Censored => (mc.horizon as i64, true),
        };
        let lag = (t - nu.max(0)).max(0) as f64;
        Ok((lag.powf(r), censored))
    })?
    .into_iter()
    .collect::<Result<Vec<(f64, bool)>>>()?;
    let values: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let censored = outcomes.iter().filter(|o| o.1).count();
    let mut delay_moment = McEstimate::from_values(&values, 0);
    delay_moment.censored_fraction = censored as f64 / outcomes.len() as f64;
    let estimate = McEstimate {
        mean: pfa.estimate.mean + c * delay_moment.mean,
        stderr: (pfa.estimate.stderr.powi(2) + (c * delay_moment.stderr).powi(2)).sqrt(),
        n_effective: mc.replications,
        censored_fraction: delay_moment.censored_fraction,
    };
    Ok(RiskEstimate {
        estimate,
        pfa,
        delay_moment,
    })
}

/// Change hypothesis and information number used by a ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTarget {
    pub subset: Vec<usize>,
    pub theta: Vec<f64>,
    /// `I_{B,θ}`.
    pub info: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub alpha: f64,
    pub threshold: f64,
    pub order: f64,
    pub delay: DelayEstimate,
    /// `(|log α| / (I + μ))^r`, with `μ = 0` for SR rules.
    pub first_order: f64,
    pub ratio: f64,
    pub ratio_se: f64,
}

/// Threshold the rule would use for PFA target `alpha`.
pub fn threshold_for_alpha(detector: &Detector, alpha: f64) -> Result<f64> {
    if detector.config().kind.is_shiryaev() {
        threshold_shiryaev(alpha, detector.prior().q())
    } else {
        threshold_sr(alpha, detector.config().head_start, detector.prior())
    }
}

/// Bayesian delay moments against the first-order formula, one row per `(α, r)`.
///
/// Rows with the same `α` share one set of simulated paths.
pub fn asymptotic_ratio_sweep(
    detector: &Detector,
    scenario: &ScenarioSpec,
    target: &SweepTarget,
    alphas: &[f64],
    orders: &[f64],
    mc: &McConfig,
) -> Result<Vec<RatioRow>> {
    orders.iter().try_for_each(|&r| check_order(r))?;
    let mu = if detector.config().kind.is_shiryaev() {
        detector.prior().tail_rate()
    } else {
        0.0
    };
    let mut rows = Vec::with_capacity(alphas.len() * orders.len());
    for &alpha in alphas {
        let threshold = threshold_for_alpha(detector, alpha)?;
        let rule = detector.with_threshold(threshold)?;
        let records = bayes_delay_records(
            &rule,
            scenario,
            detector.prior(),
            &target.subset,
            &target.theta,
            mc,
        )?;
        for &r in orders {
            let delay = delay_moment(&records, r);
            let first_order = (alpha.ln().abs() / (target.info + mu)).powf(r);
            rows.push(RatioRow {
                alpha,
                threshold,
                order: r,
                delay,
                first_order,
                ratio: delay.estimate.mean / first_order,
                ratio_se: delay.estimate.stderr / first_order,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{DetectorConfig, DetectorKind};
    use crate::scenarios::ArChannelSpec;

    fn gaussian() -> ScenarioSpec {
        ScenarioSpec::Ar(vec![ArChannelSpec::white_gaussian(1.0).unwrap()])
    }

    fn rule(kind: DetectorKind, a: f64, rho: f64) -> Detector {
        Detector::new(
            DetectorConfig::new(kind, a),
            PriorSpec::geometric(rho, 0.0).unwrap(),
            SubsetWeights::uniform(1, 1).unwrap(),
            GridSpec::degenerate(vec![1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(McConfig::new(0, 1, 1, 1).is_err());
        assert!(McConfig::new(1, 1, 0, 1).is_err());
        assert!(McConfig::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.5).collect();
        let mut whole = Accumulator::default();
        values.iter().for_each(|&v| whole.push(v));
        let mut shards = Accumulator::default();
        for chunk in values.chunks(250) {
            let mut part = Accumulator::default();
            chunk.iter().for_each(|&v| part.push(v));
            shards.merge(&part);
        }
        assert_eq!(whole, shards);
        let est = whole.estimate(0);
        let sd = whole.variance().sqrt();
        assert!((est.stderr - sd / 1000f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn replications_do_not_depend_on_workers() {
        let draw = |mc: &McConfig| run_replications(mc, |i, rng| (i, rng.random::<u64>())).unwrap();
        let one = draw(&McConfig::new(64, 5, 1, 1).unwrap());
        let four = draw(&McConfig::new(64, 5, 1, 4).unwrap());
        assert_eq!(one, four);
        let other = draw(&McConfig::new(64, 6, 1, 4).unwrap());
        assert_ne!(one, other);
    }

    #[test]
    fn never_alarming_rule_charges_only_the_tail() {
        let det = rule(DetectorKind::ShiryaevMixture, 1e12, 0.1);
        let mc = McConfig::new(50, 1, 50, 2).unwrap();
        let pfa = estimate_pfa(&det, &gaussian(), &mc).unwrap();
        let tail = 0.9f64.powi(51);
        assert!((pfa.estimate.mean - tail).abs() < 1e-15);
        assert_eq!(pfa.estimate.censored_fraction, 1.0);
        assert!(!pfa.horizon_sufficient);
        assert!(pfa.require_sufficient_horizon(50).is_err());
    }

    #[test]
    fn pfa_below_bounds() {
        let mc = McConfig::new(2000, 3, 400, 4).unwrap();
        let det = rule(DetectorKind::ShiryaevMixture, 19.0, 0.1);
        let pfa = estimate_pfa(&det, &gaussian(), &mc).unwrap();
        assert!(pfa.estimate.mean <= 0.05 + 3.0 * pfa.estimate.stderr);
        assert!(pfa.horizon_sufficient);

        let a = threshold_sr(0.05, 0.0, det.prior()).unwrap();
        let sr = rule(DetectorKind::SrMixture, a, 0.1);
        let pfa = estimate_pfa(&sr, &gaussian(), &mc).unwrap();
        assert!(pfa.estimate.mean <= 0.05 + 3.0 * pfa.estimate.stderr);
    }

    #[test]
    fn rao_blackwell_agrees_with_naive_sampler() {
        let det = rule(DetectorKind::ShiryaevMixture, 4.0, 0.1);
        let mc = McConfig::new(4000, 8, 300, 4).unwrap();
        let rb = estimate_pfa(&det, &gaussian(), &mc).unwrap().estimate;
        let naive = estimate_pfa_naive(&det, &gaussian(), &[0], &[1.0], &mc.with_seed(99)).unwrap();
        let se = (rb.stderr.powi(2) + naive.stderr.powi(2)).sqrt();
        assert!(
            (rb.mean - naive.mean).abs() <= 3.0 * se,
            "{} {}",
            rb.mean,
            naive.mean
        );
        assert!(rb.stderr < naive.stderr);
    }

    #[test]
    fn delay_examples() {
        let scenario = gaussian();
        let mc = McConfig::new(200, 4, 100, 2).unwrap();
        let strong = Detector::new(
            DetectorConfig::new(DetectorKind::ShiryaevMixture, 2.0),
            PriorSpec::geometric(0.1, 0.0).unwrap(),
            SubsetWeights::uniform(1, 1).unwrap(),
            GridSpec::degenerate(vec![30.0]).unwrap(),
        )
        .unwrap();
        let change = ChangeSpec::new(0, vec![0], vec![30.0]).unwrap();
        let d = estimate_conditional_delay(&strong, &scenario, &change, 1.0, &mc).unwrap();
        assert_eq!(d.estimate.mean, 1.0);
        assert_eq!(d.discarded, 0);

        let det = rule(DetectorKind::ShiryaevMixture, 99.0, 0.05);
        let change = ChangeSpec::new(10, vec![0], vec![1.0]).unwrap();
        let m1 = estimate_conditional_delay(&det, &scenario, &change, 1.0, &mc).unwrap();
        let m2 = estimate_conditional_delay(&det, &scenario, &change, 2.0, &mc).unwrap();
        assert_eq!(m1.estimate.n_effective, m2.estimate.n_effective);
        assert!(m2.estimate.mean >= m1.estimate.mean.powi(2) - 3.0 * m2.estimate.stderr);
        assert!(estimate_conditional_delay(&det, &scenario, &change, 0.5, &mc).is_err());
    }

    #[test]
    fn conditional_delay_near_first_order() {
        let rho = 0.01;
        let alpha = 1e-3;
        let det = rule(
            DetectorKind::ShiryaevMixture,
            threshold_shiryaev(alpha, 0.0).unwrap(),
            rho,
        );
        let mc = McConfig::new(1000, 12, 400, 4).unwrap();
        let change = ChangeSpec::new(0, vec![0], vec![1.0]).unwrap();
        let d = estimate_conditional_delay(&det, &gaussian(), &change, 1.0, &mc).unwrap();
        let mu = -(1.0f64 - rho).ln();
        let first = alpha.ln().abs() / (0.5 + mu);
        let ratio = d.estimate.mean / first;
        assert!((0.8..=1.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn bayes_delay_jensen() {
        let det = rule(DetectorKind::SrMixture, 500.0, 0.05);
        let mc = McConfig::new(300, 2, 600, 2).unwrap();
        let p = *det.prior();
        let d1 = estimate_bayes_delay(&det, &gaussian(), &p, &[0], &[1.0], 1.0, &mc).unwrap();
        let d2 = estimate_bayes_delay(&det, &gaussian(), &p, &[0], &[1.0], 2.0, &mc).unwrap();
        assert!(d2.estimate.mean >= d1.estimate.mean.powi(2) - 3.0 * d2.estimate.stderr);
        assert!(d1.censored < 3);
    }

    #[test]
    fn zero_cost_risk_is_the_pfa() {
        let det = rule(DetectorKind::ShiryaevMixture, 19.0, 0.1);
        let mc = McConfig::new(300, 21, 200, 3).unwrap();
        let grid = GridSpec::degenerate(vec![1.0]).unwrap();
        let w = SubsetWeights::uniform(1, 1).unwrap();
        let p = *det.prior();
        let risk = estimate_average_risk(&det, &gaussian(), &p, &w, &grid, 0.0, 1.0, &mc).unwrap();
        let pfa = estimate_pfa(&det, &gaussian(), &mc).unwrap();
        assert_eq!(risk.estimate, pfa.estimate);

        let never = rule(DetectorKind::ShiryaevMixture, 1e300, 0.1);
        let risk =
            estimate_average_risk(&never, &gaussian(), &p, &w, &grid, 0.01, 1.0, &mc).unwrap();
        assert_eq!(risk.delay_moment.censored_fraction, 1.0);
        assert!(!risk.pfa.horizon_sufficient);
    }

    #[test]
    fn single_alpha_sweep() {
        let det = rule(DetectorKind::ShiryaevMixture, 10.0, 0.05);
        let target = SweepTarget {
            subset: vec![0],
            theta: vec![1.0],
            info: 0.5,
        };
        let mc = McConfig::new(100, 1, 500, 2).unwrap();
        let rows =
            asymptotic_ratio_sweep(&det, &gaussian(), &target, &[0.01], &[1.0, 2.0], &mc).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].threshold - 99.0).abs() < 1e-9);
        assert!(rows[0].ratio > 0.0 && rows[1].ratio > 0.0);
    }
}
