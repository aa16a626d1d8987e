//! Stopping rules built on the mixture statistics, and threshold calibration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::likelihood::{LlrSource, SubsetWeights, ENUMERATION_LIMIT};
use crate::model::{ChangeSpec, ObservationBatch, PriorSpec};
use crate::scenarios::{ObservationSampler, ScenarioSpec};
use crate::statistics::{check_source, DetectorState, Evaluation, GridSpec, Increments, Statistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    ShiryaevMixture,
    SrMixture,
    ShiryaevPutative,
    SrPutative,
}

impl DetectorKind {
    pub fn is_shiryaev(self) -> bool {
        matches!(
            self,
            DetectorKind::ShiryaevMixture | DetectorKind::ShiryaevPutative
        )
    }

    pub fn is_putative(self) -> bool {
        matches!(
            self,
            DetectorKind::ShiryaevPutative | DetectorKind::SrPutative
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Threshold `A`.
    pub threshold: f64,
    /// Window `m1`; `None` sums over every candidate change point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Head start `ω` of the SR kinds.
    #[serde(default)]
    pub head_start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub putative_theta: Option<Vec<f64>>,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind, threshold: f64) -> Self {
        DetectorConfig {
            kind,
            threshold,
            window: None,
            head_start: 0.0,
            putative_theta: None,
        }
    }

    pub fn with_window(mut self, m1: usize) -> Self {
        self.window = Some(m1);
        self
    }

    pub fn with_head_start(mut self, omega: f64) -> Self {
        self.head_start = omega;
        self
    }

    pub fn with_putative_theta(mut self, theta: Vec<f64>) -> Self {
        self.putative_theta = Some(theta);
        self
    }

    pub fn validate(&self, prior: &PriorSpec) -> Result<()> {
        let a = self.threshold;
        if !(a.is_finite() && a > 0.0) {
            return Err(QcdError::invalid(
                "threshold",
                format!("must be finite and positive, got {a}"),
            ));
        }
        if self.kind.is_shiryaev() {
            let floor = prior.q() / (1.0 - prior.q());
            if a <= floor {
                return Err(QcdError::invalid(
                    "threshold",
                    format!("Shiryaev rules need A > q/(1-q) = {floor}, got {a}"),
                ));
            }
            if self.head_start != 0.0 {
                return Err(QcdError::invalid(
                    "head_start",
                    "only SR rules take a head start",
                ));
            }
        } else if !(self.head_start.is_finite() && self.head_start >= 0.0) {
            return Err(QcdError::invalid(
                "head_start",
                format!("must be >= 0, got {}", self.head_start),
            ));
        }
        match (&self.putative_theta, self.kind.is_putative()) {
            (None, true) => Err(QcdError::invalid(
                "putative_theta",
                "required for putative rules",
            )),
            (Some(_), false) => Err(QcdError::invalid(
                "putative_theta",
                "only putative rules take one",
            )),
            _ => Ok(()),
        }
    }
}

/// Where a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stop {
    At(usize),
    Censored,
}

impl Stop {
    pub fn time(self) -> Option<usize> {
        match self {
            Stop::At(n) => Some(n),
            Stop::Censored => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub stopped_at: Stop,
    /// Log statistic after each observation up to the stop.
    pub trajectory: Vec<f64>,
}

/// A validated stopping rule `inf{n ≥ 1: statistic(n) ≥ A}`.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    prior: PriorSpec,
    weights: SubsetWeights,
    grid: GridSpec,
    evaluation: Evaluation,
    log_threshold: f64,
}

impl Detector {
    /// `grid` is the mixing measure of the mixture kinds; putative kinds replace it by
    /// unit mass at `putative_theta`.
    pub fn new(
        config: DetectorConfig,
        prior: PriorSpec,
        weights: SubsetWeights,
        grid: GridSpec,
    ) -> Result<Self> {
        config.validate(&prior)?;
        let grid = match &config.putative_theta {
            Some(theta) => GridSpec::degenerate(theta.clone())?,
            None => grid,
        };
        if grid.streams() != weights.streams() {
            return Err(QcdError::invalid(
                "grid",
                "stream count differs from subset weights",
            ));
        }
        let evaluation = match config.window {
            Some(m) => Evaluation::Direct { window: Some(m) },
            None if weights.streams() <= ENUMERATION_LIMIT => Evaluation::Recursive,
            None => Evaluation::Direct { window: None },
        };
        let log_threshold = config.threshold.ln();
        Ok(Detector {
            config,
            prior,
            weights,
            grid,
            evaluation,
            log_threshold,
        })
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        let mut config = self.config.clone();
        config.threshold = threshold;
        config.validate(&self.prior)?;
        Ok(Detector {
            config,
            log_threshold: threshold.ln(),
            ..self.clone()
        })
    }

    /// Same rule with evaluation forced, for oracle comparisons.
    pub fn with_evaluation(&self, evaluation: Evaluation) -> Self {
        Detector {
            evaluation,
            ..self.clone()
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn weights(&self) -> &SubsetWeights {
        &self.weights
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn evaluation(&self) -> Evaluation {
        self.evaluation
    }

    pub fn threshold(&self) -> f64 {
        self.config.threshold
    }

    pub fn statistic(&self) -> Statistic {
        if self.config.kind.is_shiryaev() {
            Statistic::Shiryaev
        } else {
            Statistic::Roberts {
                omega: self.config.head_start,
            }
        }
    }

    /// PFA bound guaranteed by the threshold: `1/(1+A)` or `(ωb + ν̄)/A`.
    pub fn nominal_pfa(&self) -> Option<f64> {
        let a = self.config.threshold;
        if self.config.kind.is_shiryaev() {
            Some(1.0 / (1.0 + a))
        } else {
            let mean = self.prior.mean()?;
            Some((self.config.head_start * self.prior.mass_after_zero() + mean) / a)
        }
    }

    pub fn state(&self) -> Result<DetectorState> {
        DetectorState::new(
            self.statistic(),
            self.prior,
            self.weights.clone(),
            self.grid.clone(),
            self.evaluation,
        )
    }

    pub fn crossed(&self, state: &DetectorState) -> bool {
        state.log_value() >= self.log_threshold
    }

    /// Feeds `rows` through `source` until the threshold is reached or `horizon` rows are used.
    pub fn run<'a>(
        &self,
        source: &mut dyn LlrSource,
        rows: impl IntoIterator<Item = &'a [f64]>,
        horizon: usize,
    ) -> Result<RunOutcome> {
        if horizon == 0 {
            return Err(QcdError::invalid("horizon", "must be at least 1"));
        }
        check_source(source)?;
        if source.streams() != self.weights.streams() {
            return Err(QcdError::invalid(
                "source",
                "stream count differs from the detector",
            ));
        }
        let mut state = self.state()?;
        let mut inc = Increments::zeros(self.grid.len(), self.grid.streams());
        let mut trajectory = Vec::new();
        for row in rows.into_iter().take(horizon) {
            source.observe(row)?;
            trajectory.push(state.update_from(source, &mut inc)?);
            if self.crossed(&state) {
                return Ok(RunOutcome {
                    stopped_at: Stop::At(state.n()),
                    trajectory,
                });
            }
        }
        Ok(RunOutcome {
            stopped_at: Stop::Censored,
            trajectory,
        })
    }

    pub fn run_batch(
        &self,
        scenario: &ScenarioSpec,
        batch: &ObservationBatch,
        horizon: usize,
    ) -> Result<RunOutcome> {
        let mut source = scenario.llr_source();
        self.run(source.as_mut(), batch.rows(), horizon)
    }

    /// Simulates one path of `scenario` (no change when `change` is `None`) and returns
    /// the stopping time, without keeping the trajectory.
    pub fn stopping_time<R: Rng + ?Sized>(
        &self,
        scenario: &ScenarioSpec,
        change: Option<&ChangeSpec>,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Stop> {
        if horizon == 0 {
            return Err(QcdError::invalid("horizon", "must be at least 1"));
        }
        if scenario.streams() != self.weights.streams() {
            return Err(QcdError::invalid(
                "scenario",
                "stream count differs from the detector",
            ));
        }
        let mut sampler = ObservationSampler::new(scenario, change, rng)?;
        let mut source = scenario.llr_source();
        let mut state = self.state()?;
        let mut inc = Increments::zeros(self.grid.len(), self.grid.streams());
        let mut row = vec![0.0; scenario.streams()];
        for _ in 0..horizon {
            sampler.next_into(rng, &mut row);
            source.observe(&row)?;
            state.update_from(source.as_ref(), &mut inc)?;
            if self.crossed(&state) {
                return Ok(Stop::At(state.n()));
            }
        }
        Ok(Stop::Censored)
    }
}

/// `A = (1 - α)/α`.
pub fn threshold_shiryaev(alpha: f64, q: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0 - q) {
        return Err(QcdError::invalid(
            "alpha",
            format!("must lie in (0, 1 - q) = (0, {}), got {alpha}", 1.0 - q),
        ));
    }
    Ok((1.0 - alpha) / alpha)
}

/// `A = (ω b + ν̄)/α`.
pub fn threshold_sr(alpha: f64, omega: f64, prior: &PriorSpec) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(QcdError::invalid(
            "alpha",
            format!("must lie in (0, 1), got {alpha}"),
        ));
    }
    if !(omega.is_finite() && omega >= 0.0) {
        return Err(QcdError::invalid(
            "omega",
            format!("must be >= 0, got {omega}"),
        ));
    }
    let mean = prior
        .mean()
        .ok_or_else(|| QcdError::invalid("prior", "SR thresholds need a prior with finite mean"))?;
    let a = (omega * prior.mass_after_zero() + mean) / alpha;
    if a <= 0.0 {
        return Err(QcdError::invalid(
            "prior",
            "ω b + ν̄ = 0 gives A = 0; the SR rule needs A > 0",
        ));
    }
    Ok(a)
}

/// Root `A > 1` of `r D A (log A)^(r-1) = scale / c`.
pub fn threshold_cost(c: f64, r: f64, d: f64, scale: Option<f64>) -> Result<f64> {
    let scale = scale.unwrap_or(1.0);
    for (name, v) in [("c", c), ("D", d), ("scale", scale)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(QcdError::invalid(
                name,
                format!("must be finite and positive, got {v}"),
            ));
        }
    }
    if !(r.is_finite() && r >= 1.0) {
        return Err(QcdError::invalid("r", format!("must be >= 1, got {r}")));
    }
    let target = scale / c;
    if r == 1.0 {
        let a = target / d;
        if a <= 1.0 {
            return Err(QcdError::Infeasible(format!(
                "with r = 1 need scale/(c D) > 1, got {a}"
            )));
        }
        return Ok(a);
    }
    // g(y) = log(r D) + y + (r-1) log y - log(target) with y = log A, increasing on y > 0
    let offset = (r * d).ln() - target.ln();
    let g = |y: f64| offset + y + (r - 1.0) * y.ln();
    let dg = |y: f64| 1.0 + (r - 1.0) / y;
    let mut lo = f64::MIN_POSITIVE;
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(QcdError::Infeasible("root beyond log A = 1e6".into()));
        }
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..200 {
        let v = g(y);
        if v.abs() < 1e-14 {
            break;
        }
        if v < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let newton = y - v / dg(y);
        y = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(y.exp())
}

/// `|r D A (log A)^(r-1) - scale/c| / (scale/c)`.
pub fn cost_residual(a: f64, c: f64, r: f64, d: f64, scale: f64) -> f64 {
    let target = scale / c;
    (r * d * a * a.ln().powf(r - 1.0) - target).abs() / target
}
