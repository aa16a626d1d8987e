//! Double-mixture Shiryaev and Shiryaev-Roberts statistics.
//!
//! Two evaluation paths share one state type. The recursive path keeps
//! `log S_{B,θ}` (or `log R_{B,θ}`) for every admissible subset and grid point and
//! needs `N ≤ ENUMERATION_LIMIT`. The direct path stores cumulative per-stream LLRs
//! and sums `π_k Λ(k, n)` over candidate change points, optionally within a window
//! of the last `m1 + 1` of them.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::likelihood::{mixture_lr_dp_unchecked, LlrSource, SubsetWeights, ENUMERATION_LIMIT};
use crate::model::PriorSpec;
use crate::numerics::{log_add_exp, log_sum_exp, softplus};

/// Log value above which a statistic is reported as saturated.
pub const SATURATION_LOG: f64 = 700.0;

/// Discretized mixing measure `W` over per-stream parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct GridSpec {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridRepr {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<GridRepr> for GridSpec {
    type Error = QcdError;

    fn try_from(r: GridRepr) -> Result<Self> {
        GridSpec::new(r.points, r.weights)
    }
}

impl From<GridSpec> for GridRepr {
    fn from(g: GridSpec) -> Self {
        GridRepr {
            points: g.points,
            weights: g.weights,
        }
    }
}

impl GridSpec {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(QcdError::invalid("grid", "at least one point required"));
        }
        if points.len() != weights.len() {
            return Err(QcdError::invalid("grid", "one weight per point required"));
        }
        let streams = points[0].len();
        if streams == 0 || points.iter().any(|p| p.len() != streams) {
            return Err(QcdError::invalid(
                "grid",
                "points must share a nonzero length",
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(QcdError::NonFinite("grid point".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(QcdError::invalid("grid", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(QcdError::invalid(
                "grid",
                format!("weights sum to {total}, not 1"),
            ));
        }
        for (a, pa) in points.iter().enumerate() {
            if points[..a].contains(pa) {
                return Err(QcdError::invalid("grid", format!("duplicate point {pa:?}")));
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GridSpec {
            points,
            weights,
            log_weights,
        })
    }

    /// Unit mass at a single parameter vector.
    pub fn degenerate(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    /// Equal weights on the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        Self::new(points, weights)
    }

    /// Equal weights on scalar values, each applied to every stream.
    pub fn scalar(values: &[f64], streams: usize) -> Result<Self> {
        Self::uniform(values.iter().map(|&v| vec![v; streams]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn streams(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, g: usize) -> &[f64] {
        &self.points[g]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
}

/// Which statistic a state tracks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Statistic {
    Shiryaev,
    /// Shiryaev-Roberts with head start `ω ≥ 0`.
    Roberts {
        omega: f64,
    },
}

impl Statistic {
    pub fn roberts(omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(QcdError::invalid(
                "omega",
                format!("must be finite and >= 0, got {omega}"),
            ));
        }
        Ok(Statistic::Roberts { omega })
    }
}

/// How the statistic is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluation {
    /// Per-(B, θ) recursion; exact, `N ≤ ENUMERATION_LIMIT`.
    Recursive,
    /// Sum over candidate change points; `window = Some(m1)` keeps `k ≥ n - m1 - 1`.
    Direct { window: Option<usize> },
}

/// Log LR increments of one observation vector, indexed `[grid point][stream]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    points: usize,
    streams: usize,
    data: Vec<f64>,
}

impl Increments {
    pub fn zeros(points: usize, streams: usize) -> Self {
        Increments {
            points,
            streams,
            data: vec![0.0; points * streams],
        }
    }

    pub fn from_fn(points: usize, streams: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut inc = Self::zeros(points, streams);
        for g in 0..points {
            for i in 0..streams {
                inc.data[g * streams + i] = f(g, i);
            }
        }
        inc
    }

    /// Reads `log L_{i,θ_g}` from a source that has just observed a vector.
    pub fn fill_from(&mut self, source: &dyn LlrSource, grid: &GridSpec) {
        debug_assert_eq!(self.points, grid.len());
        for (g, theta) in grid.points().iter().enumerate() {
            for (i, &t) in theta.iter().enumerate() {
                self.data[g * self.streams + i] = source.increment(i, t);
            }
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn get(&self, g: usize, i: usize) -> f64 {
        self.data[g * self.streams + i]
    }

    pub fn set(&mut self, g: usize, i: usize, v: f64) {
        self.data[g * self.streams + i] = v;
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.data[g * self.streams..(g + 1) * self.streams]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Running sums `cum_{g,i}(t) = Σ_{u≤t} log L_{i,θ_g}(u)` for a range of times.
#[derive(Debug, Clone)]
pub struct CumulativeLlr {
    width: usize,
    first: usize,
    rows: VecDeque<Vec<f64>>,
}

impl CumulativeLlr {
    /// Holds `cum(0) = 0` only.
    pub fn new(points: usize, streams: usize) -> Self {
        let mut rows = VecDeque::new();
        rows.push_back(vec![0.0; points * streams]);
        CumulativeLlr {
            width: points * streams,
            first: 0,
            rows,
        }
    }

    pub fn first_time(&self) -> usize {
        self.first
    }

    pub fn last_time(&self) -> usize {
        self.first + self.rows.len() - 1
    }

    pub fn push(&mut self, inc: &Increments) {
        debug_assert_eq!(inc.data.len(), self.width);
        let mut next = Vec::with_capacity(self.width);
        let last = self.rows.back().expect("never empty");
        next.extend(last.iter().zip(&inc.data).map(|(c, d)| c + d));
        self.rows.push_back(next);
    }

    /// `cum(t)` laid out `[grid point][stream]`, if still stored.
    pub fn at(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(self.first)
            .and_then(|j| self.rows.get(j))
            .map(Vec::as_slice)
    }

    /// Drops every time before `t` (never the latest one).
    pub fn discard_before(&mut self, t: usize) {
        while self.first < t && self.rows.len() > 1 {
            self.rows.pop_front();
            self.first += 1;
        }
    }
}

/// `log π_k` weight of candidate change point `k`, with `k = -1` the head term.
fn log_candidate_weight(stat: Statistic, prior: &PriorSpec, k: i64) -> f64 {
    match (stat, k) {
        (Statistic::Shiryaev, -1) => prior.q().ln(),
        (Statistic::Shiryaev, k) => prior.log_mass(k as u64),
        (Statistic::Roberts { omega }, -1) => omega.ln(),
        (Statistic::Roberts { .. }, _) => 0.0,
    }
}

/// `log Λ_{p,W}(k, n)` from two cumulative rows.
fn log_mixture_lr(
    cum_k: &[f64],
    cum_n: &[f64],
    weights: &SubsetWeights,
    grid: &GridSpec,
    scratch: &mut Vec<f64>,
    per_point: &mut Vec<f64>,
) -> f64 {
    let streams = grid.streams();
    per_point.clear();
    for (g, lw) in grid.log_weights().iter().enumerate() {
        scratch.clear();
        let range = g * streams..(g + 1) * streams;
        scratch.extend(
            cum_n[range.clone()]
                .iter()
                .zip(&cum_k[range])
                .map(|(a, b)| a - b),
        );
        per_point.push(lw + mixture_lr_dp_unchecked(scratch, weights));
    }
    log_sum_exp(per_point)
}

/// Direct evaluation of the statistic at `n = cum.last_time()`.
///
/// Candidate change points run over `max(-1, n - m1 - 1) ..= n - 1`; `k = -1`
/// carries the head mass `q` (Shiryaev) or the head start `ω` (SR) and uses `Λ(0, n)`.
pub fn direct_log_statistic(
    stat: Statistic,
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    cum: &CumulativeLlr,
    window: Option<usize>,
) -> Result<f64> {
    if grid.streams() != weights.streams() {
        return Err(QcdError::invalid(
            "grid",
            "stream count differs from subset weights",
        ));
    }
    let n = cum.last_time();
    let k_lo = window.map_or(-1, |m| (n as i64 - m as i64 - 1).max(-1));
    let oldest = k_lo.max(0) as usize;
    if cum.first_time() > oldest {
        return Err(QcdError::WindowTooShort {
            available: n - cum.first_time(),
            requested: n - oldest,
        });
    }
    let cum_n = cum.at(n).expect("latest row stored");
    let mut terms = Vec::with_capacity((n as i64 - k_lo) as usize);
    let mut scratch = Vec::with_capacity(grid.streams());
    let mut per_point = Vec::with_capacity(grid.len());
    for k in k_lo..n as i64 {
        let lw = log_candidate_weight(stat, prior, k);
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let cum_k = cum.at(k.max(0) as usize).expect("range checked above");
        terms.push(lw + log_mixture_lr(cum_k, cum_n, weights, grid, &mut scratch, &mut per_point));
    }
    let total = log_sum_exp(&terms);
    Ok(match stat {
        Statistic::Shiryaev => normalize_by_tail(total, prior.log_tail(n as u64)),
        Statistic::Roberts { .. } => total,
    })
}

fn normalize_by_tail(log_sum: f64, log_tail: f64) -> f64 {
    if log_tail == f64::NEG_INFINITY {
        if log_sum == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    } else {
        log_sum - log_tail
    }
}

/// `log Ŝ(n)` by direct summation over the window.
pub fn shiryaev_direct(
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    cum: &CumulativeLlr,
    window: Option<usize>,
) -> Result<f64> {
    direct_log_statistic(Statistic::Shiryaev, prior, weights, grid, cum, window)
}

/// `log R̂(n)` by direct summation over the window.
pub fn sr_direct(
    omega: f64,
    weights: &SubsetWeights,
    grid: &GridSpec,
    cum: &CumulativeLlr,
    window: Option<usize>,
) -> Result<f64> {
    // the prior only enters through the head start for SR
    let prior = PriorSpec::point_mass(0);
    direct_log_statistic(
        Statistic::roberts(omega)?,
        &prior,
        weights,
        grid,
        cum,
        window,
    )
}

/// Rejects sources whose increments depend on the candidate change point.
pub fn check_source(source: &dyn LlrSource) -> Result<()> {
    if source.change_point_independent() {
        Ok(())
    } else {
        Err(QcdError::ChangePointDependent(
            "neither the recursion nor the cumulative sums apply".into(),
        ))
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Recursive {
        /// Admissible subset masks and `log p_B`.
        subsets: Vec<(u64, f64)>,
        /// `log S_{B,θ}` or `log R_{B,θ}`, laid out `[g][subset]`.
        log_stats: Vec<f64>,
        subset_sums: Vec<f64>,
        terms: Vec<f64>,
    },
    Direct {
        window: Option<usize>,
        cum: CumulativeLlr,
    },
}

/// Running statistic for one replication.
#[derive(Debug, Clone)]
pub struct DetectorState {
    stat: Statistic,
    prior: PriorSpec,
    weights: SubsetWeights,
    grid: GridSpec,
    n: usize,
    log_value: f64,
    engine: Engine,
}

impl DetectorState {
    pub fn new(
        stat: Statistic,
        prior: PriorSpec,
        weights: SubsetWeights,
        grid: GridSpec,
        evaluation: Evaluation,
    ) -> Result<Self> {
        if grid.streams() != weights.streams() {
            return Err(QcdError::invalid(
                "grid",
                "stream count differs from subset weights",
            ));
        }
        if let Statistic::Roberts { omega } = stat {
            Statistic::roberts(omega)?;
        }
        let log_init = match stat {
            Statistic::Shiryaev => prior.q().ln() - (-prior.q()).ln_1p(),
            Statistic::Roberts { omega } => omega.ln(),
        };
        let engine = match evaluation {
            Evaluation::Recursive => {
                let n = weights.streams();
                if n > ENUMERATION_LIMIT {
                    return Err(QcdError::TooManyStreams {
                        streams: n,
                        limit: ENUMERATION_LIMIT,
                        what: "recursive evaluation",
                    });
                }
                let subsets = weights.subsets()?;
                Engine::Recursive {
                    log_stats: vec![log_init; subsets.len() * grid.len()],
                    subset_sums: vec![0.0; 1 << n],
                    terms: Vec::with_capacity(subsets.len() * grid.len()),
                    subsets,
                }
            }
            Evaluation::Direct { window } => Engine::Direct {
                window,
                cum: CumulativeLlr::new(grid.len(), grid.streams()),
            },
        };
        Ok(DetectorState {
            stat,
            prior,
            weights,
            grid,
            n: 0,
            log_value: log_init,
            engine,
        })
    }

    pub fn statistic(&self) -> Statistic {
        self.stat
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn weights(&self) -> &SubsetWeights {
        &self.weights
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    /// Number of observations absorbed.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_value(&self) -> f64 {
        self.log_value
    }

    /// The statistic, capped at `exp(SATURATION_LOG)`.
    pub fn value(&self) -> f64 {
        self.log_value.min(SATURATION_LOG).exp()
    }

    pub fn saturated(&self) -> bool {
        self.log_value > SATURATION_LOG
    }

    /// `P(ν ≥ n | F_n) = 1 / (S(n) + 1)`; meaningful for the Shiryaev statistic.
    pub fn posterior_no_change(&self) -> f64 {
        (-softplus(self.log_value)).exp()
    }

    /// Absorbs the increments of observation `n + 1` and returns the new log value.
    pub fn update(&mut self, inc: &Increments) -> Result<f64> {
        if inc.points != self.grid.len() || inc.streams != self.grid.streams() {
            return Err(QcdError::invalid(
                "increments",
                "shape differs from the grid",
            ));
        }
        if inc.data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(QcdError::NonFinite("log likelihood increment".into()));
        }
        self.n += 1;
        let n = self.n as u64;
        self.log_value = match &mut self.engine {
            Engine::Recursive {
                subsets,
                log_stats,
                subset_sums,
                terms,
            } => {
                let streams = inc.streams;
                let per_point = subsets.len();
                let step = match self.stat {
                    Statistic::Shiryaev => Some((
                        self.prior.log_tail(n - 1),
                        self.prior.log_mass(n - 1),
                        self.prior.log_tail(n),
                    )),
                    Statistic::Roberts { .. } => None,
                };
                terms.clear();
                for (g, lw) in self.grid.log_weights().iter().enumerate() {
                    let row = inc.row(g);
                    for m in 1..subset_sums.len() {
                        subset_sums[m] =
                            subset_sums[m & (m - 1)] + row[m.trailing_zeros() as usize];
                    }
                    debug_assert!(streams < 64);
                    let block = &mut log_stats[g * per_point..(g + 1) * per_point];
                    for (slot, &(mask, lp)) in block.iter_mut().zip(subsets.iter()) {
                        let l = subset_sums[mask as usize];
                        *slot = match step {
                            Some((tail_prev, mass_prev, tail_now)) => normalize_by_tail(
                                l + log_add_exp(*slot + tail_prev, mass_prev),
                                tail_now,
                            ),
                            None => l + softplus(*slot),
                        };
                        terms.push(lw + lp + *slot);
                    }
                }
                log_sum_exp(terms)
            }
            Engine::Direct { window, cum } => {
                cum.push(inc);
                let v = direct_log_statistic(
                    self.stat,
                    &self.prior,
                    &self.weights,
                    &self.grid,
                    cum,
                    *window,
                )?;
                if let Some(m) = window {
                    // the next step needs cum(t) for t ≥ n + 1 - m - 1
                    cum.discard_before(self.n.saturating_sub(*m));
                }
                v
            }
        };
        if self.log_value.is_nan() {
            return Err(QcdError::NonFinite("statistic".into()));
        }
        Ok(self.log_value)
    }

    /// Reads the increments from `source` and updates.
    pub fn update_from(&mut self, source: &dyn LlrSource, scratch: &mut Increments) -> Result<f64> {
        scratch.fill_from(source, &self.grid);
        self.update(scratch)
    }
}
