//! Independent oracles and the named verification suites.
//!
//! Oracle statistics are summed over every `(k, B, θ)` triple from raw
//! increments; the posterior comes from joint densities under each hypothesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{QcdError, Result};
use crate::likelihood::{
    bits, mixture_lr_dp, mixture_lr_enumerate, SubsetWeights, BRUTE_FORCE_LIMIT,
};
use crate::model::{generate, ChangeSpec, ObservationBatch, PriorSpec};
use crate::montecarlo::{run_replications, McConfig, McEstimate};
use crate::numerics::log_sum_exp;
use crate::scenarios::{ar_residual, ArChannelSpec, MixtureChannelSpec, ScenarioSpec};
use crate::statistics::{
    CumulativeLlr, DetectorState, Evaluation, GridSpec, Increments, Statistic,
};

/// `log N(x; m, σ²)`.
fn log_normal(x: f64, m: f64, sigma: f64) -> f64 {
    let z = (x - m) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Brute-force log statistic at `n = increments.len()`, with the optional window `m1`.
pub fn brute_force_log_statistic(
    stat: Statistic,
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    increments: &[Increments],
    window: Option<usize>,
) -> Result<f64> {
    if weights.streams() > BRUTE_FORCE_LIMIT {
        return Err(QcdError::TooManyStreams {
            streams: weights.streams(),
            limit: BRUTE_FORCE_LIMIT,
            what: "brute-force statistic",
        });
    }
    let n = increments.len() as i64;
    let k_lo = window.map_or(-1, |m| (n - m as i64 - 1).max(-1));
    let subsets = weights.subsets()?;
    let mut terms = Vec::new();
    for k in k_lo..n {
        let lw = match (stat, k) {
            (Statistic::Shiryaev, -1) => prior.q().ln(),
            (Statistic::Shiryaev, k) => prior.log_mass(k as u64),
            (Statistic::Roberts { omega }, -1) => omega.ln(),
            (Statistic::Roberts { .. }, _) => 0.0,
        };
        let start = k.max(0) as usize;
        for (g, log_wg) in grid.log_weights().iter().enumerate() {
            for &(mask, log_pb) in &subsets {
                let mut llr = 0.0;
                for inc in &increments[start..] {
                    for i in bits(mask) {
                        llr += inc.get(g, i);
                    }
                }
                terms.push(lw + log_wg + log_pb + llr);
            }
        }
    }
    let total = log_sum_exp(&terms);
    Ok(match stat {
        Statistic::Shiryaev => total - prior.log_tail(n as u64),
        Statistic::Roberts { .. } => total,
    })
}

/// Per-stream conditional log densities of a batch.
struct StreamDensities {
    /// `pre[t] = log g(x(1..=t))`, `t = 0..=n`.
    pre: Vec<f64>,
    /// `post[g][t-1] = log f_{θ_g}(x(t) | past)`.
    post: Vec<Vec<f64>>,
}

fn ar_densities(ch: &ArChannelSpec, xs: &[f64], thetas: &[f64]) -> StreamDensities {
    let mut pre = vec![0.0];
    let mut post = vec![Vec::with_capacity(xs.len()); thetas.len()];
    for t in 1..=xs.len() {
        let res = ar_residual(&xs[..t], ch.coeffs());
        pre.push(pre[t - 1] + log_normal(res, 0.0, ch.sigma()));
        for (g, &theta) in thetas.iter().enumerate() {
            post[g].push(log_normal(
                res,
                theta * ch.residual_signal_at(t),
                ch.sigma(),
            ));
        }
    }
    StreamDensities { pre, post }
}

fn mixture_densities(ch: &MixtureChannelSpec, xs: &[f64], thetas: &[f64]) -> StreamDensities {
    let (b, s) = (ch.beta_mix(), ch.sigma());
    let mut first = 0.0;
    let mut second = 0.0;
    let mut pre = vec![0.0];
    for &x in xs {
        first += log_normal(x, ch.mu1(), s);
        second += log_normal(x, ch.mu2(), s);
        pre.push(log_sum_exp(&[b.ln() + first, (1.0 - b).ln() + second]));
    }
    let post = thetas
        .iter()
        .map(|&theta| xs.iter().map(|&x| log_normal(x, theta, s)).collect())
        .collect();
    StreamDensities { pre, post }
}

fn densities(
    scenario: &ScenarioSpec,
    batch: &ObservationBatch,
    grid: &GridSpec,
) -> Vec<StreamDensities> {
    (0..scenario.streams())
        .map(|i| {
            let xs = batch.stream(i);
            let thetas: Vec<f64> = grid.points().iter().map(|p| p[i]).collect();
            match scenario {
                ScenarioSpec::Ar(chs) => ar_densities(&chs[i], &xs, &thetas),
                ScenarioSpec::Mixture(chs) => mixture_densities(&chs[i], &xs, &thetas),
            }
        })
        .collect()
}

/// `P(ν ≥ n | X(1..=n))` for `n = 1..=batch.horizon()` by Bayes' rule on joint densities.
pub fn bayes_posterior_no_change(
    scenario: &ScenarioSpec,
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    batch: &ObservationBatch,
) -> Result<Vec<f64>> {
    if scenario.streams() != weights.streams() || grid.streams() != weights.streams() {
        return Err(QcdError::invalid("scenario", "stream counts differ"));
    }
    let dens = densities(scenario, batch, grid);
    let subsets = weights.subsets()?;
    let mut out = Vec::with_capacity(batch.horizon());
    for n in 1..=batch.horizon() {
        let log_null: f64 = dens.iter().map(|d| d.pre[n]).sum();
        let mut alternatives = Vec::new();
        for k in -1..n as i64 {
            let lw = if k == -1 {
                prior.q().ln()
            } else {
                prior.log_mass(k as u64)
            };
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let start = k.max(0) as usize;
            for (g, log_wg) in grid.log_weights().iter().enumerate() {
                for &(mask, log_pb) in &subsets {
                    let mut joint = log_null;
                    for i in bits(mask) {
                        let d = &dens[i];
                        joint += d.pre[start] - d.pre[n] + d.post[g][start..n].iter().sum::<f64>();
                    }
                    alternatives.push(lw + log_wg + log_pb + joint);
                }
            }
        }
        let null = prior.log_tail(n as u64) + log_null;
        let alt = log_sum_exp(&alternatives);
        out.push((null - log_sum_exp(&[null, alt])).exp());
    }
    Ok(out)
}

/// `λ(k, n)` of one mixture stream from the closed form `Σ L2 + log(1 + v G_k) - log(1 + v G_n)`.
pub fn mixture_llr_closed_form(ch: &MixtureChannelSpec, xs: &[f64], k: usize, theta: f64) -> f64 {
    let s = ch.sigma();
    let log_v = (ch.beta_mix() / (1.0 - ch.beta_mix())).ln();
    let log_g = |m: usize| -> f64 {
        xs[..m]
            .iter()
            .map(|&x| log_normal(x, ch.mu1(), s) - log_normal(x, ch.mu2(), s))
            .sum()
    };
    let l2: f64 = xs[k..]
        .iter()
        .map(|&x| log_normal(x, theta, s) - log_normal(x, ch.mu2(), s))
        .sum();
    let softplus = |z: f64| crate::numerics::softplus(z);
    l2 + softplus(log_v + log_g(k)) - softplus(log_v + log_g(xs.len()))
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub invariant: &'static str,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: &'static str, invariant: &'static str, tolerance: f64) -> Self {
        SuiteReport {
            suite,
            invariant,
            checks: 0,
            max_error: 0.0,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, err: f64) {
        self.checks += 1;
        if err.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(err);
        }
        self.passed &= err <= self.tolerance;
    }
}

/// Deliberate defects for checking that the suites catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// The windowed statistic keeps one candidate change point too many.
    WindowOffByOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Recursion,
    MixtureDp,
    Posterior,
    Submartingale,
    Telescoping,
    Window,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Recursion,
        Suite::MixtureDp,
        Suite::Posterior,
        Suite::Submartingale,
        Suite::Telescoping,
        Suite::Window,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Recursion => "recursion",
            Suite::MixtureDp => "mixture_dp",
            Suite::Posterior => "posterior",
            Suite::Submartingale => "submartingale",
            Suite::Telescoping => "telescoping",
            Suite::Window => "window",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Three-stream AR(2) scenario with a periodic signal.
pub fn ar_test_scenario() -> ScenarioSpec {
    let ch =
        |beta: f64| ArChannelSpec::new(vec![beta, -0.2], 1.0, vec![1.0, 0.5, -0.5, 0.8]).unwrap();
    ScenarioSpec::Ar(vec![ch(0.5), ch(0.3), ch(-0.4)])
}

/// Three-stream Gaussian-mixture scenario.
pub fn mixture_test_scenario() -> ScenarioSpec {
    let ch = MixtureChannelSpec::new(0.4, -2.0, 0.0, 1.0).unwrap();
    ScenarioSpec::Mixture(vec![ch; 3])
}

fn test_grid() -> GridSpec {
    GridSpec::new(vec![vec![0.6; 3], vec![1.2; 3]], vec![0.4, 0.6]).unwrap()
}

fn increments_of(
    scenario: &ScenarioSpec,
    grid: &GridSpec,
    batch: &ObservationBatch,
) -> Result<Vec<Increments>> {
    let mut source = scenario.llr_source();
    let mut out = Vec::with_capacity(batch.horizon());
    for row in batch.rows() {
        source.observe(row)?;
        let mut inc = Increments::zeros(grid.len(), grid.streams());
        inc.fill_from(source.as_ref(), grid);
        out.push(inc);
    }
    Ok(out)
}

/// Recursive vs direct summation, Shiryaev and SR, both scenarios.
pub fn check_recursion(seeds: &[u64], horizon: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("recursion", "recursive and direct statistics agree", 1e-9);
    let grid = test_grid();
    let weights = SubsetWeights::new(vec![1.0, 0.5, 2.0], 2)?;
    let prior = PriorSpec::geometric(0.02, 0.05)?;
    for &seed in seeds {
        for scenario in [ar_test_scenario(), mixture_test_scenario()] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let change = ChangeSpec::new(
                rng.random_range(0..horizon as i64),
                vec![0, 2],
                vec![1.0, 1.0],
            )?;
            let batch = generate(&scenario, Some(&change), horizon, &mut rng)?;
            let incs = increments_of(&scenario, &grid, &batch)?;
            for stat in [Statistic::Shiryaev, Statistic::Roberts { omega: 2.0 }] {
                let mut rec = DetectorState::new(
                    stat,
                    prior,
                    weights.clone(),
                    grid.clone(),
                    Evaluation::Recursive,
                )?;
                let mut dir = DetectorState::new(
                    stat,
                    prior,
                    weights.clone(),
                    grid.clone(),
                    Evaluation::Direct { window: None },
                )?;
                for inc in &incs {
                    let a = rec.update(inc)?;
                    let b = dir.update(inc)?;
                    report.record((a - b).abs());
                }
            }
        }
    }
    Ok(report)
}

/// DP against subset enumeration for every `(N, K)` with `N ≤ 12`, plus the product form.
pub fn check_mixture_dp(seeds: &[u64], draws: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("mixture_dp", "DP mixture equals subset enumeration", 1e-9);
    let mut product = SuiteReport::new("mixture_dp", "product form holds for K = N", 1e-10);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 1..=12usize {
            for k in 1..=n {
                for _ in 0..draws {
                    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
                    let w = SubsetWeights::new(p.clone(), k)?;
                    let lrs: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
                    let dp = mixture_lr_dp(&lrs, &w)?;
                    report.record((dp - mixture_lr_enumerate(&lrs, &w)?).abs());
                    if k == n {
                        let prod: f64 = p
                            .iter()
                            .zip(&lrs)
                            .map(|(pi, l)| 1.0 + pi * l.exp())
                            .product();
                        let closed = (w.normalizer() * (prod - 1.0)).ln();
                        product.record((dp - closed).abs());
                    }
                }
            }
        }
    }
    if !product.passed {
        return Ok(product);
    }
    report.checks += product.checks;
    Ok(report)
}

/// `1/(S + 1)` against the Bayes posterior from joint densities.
pub fn check_posterior(seeds: &[u64], horizon: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("posterior", "P(nu >= n | data) = 1/(S + 1)", 1e-9);
    let grid = test_grid();
    let weights = SubsetWeights::new(vec![1.0, 0.7, 1.3], 3)?;
    let prior = PriorSpec::geometric(0.05, 0.1)?;
    for (j, &seed) in seeds.iter().enumerate() {
        let scenario = if j % 2 == 0 {
            ar_test_scenario()
        } else {
            mixture_test_scenario()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let change = ChangeSpec::new(rng.random_range(0..horizon as i64), vec![1], vec![1.0])?;
        let batch = generate(&scenario, Some(&change), horizon, &mut rng)?;
        let oracle = bayes_posterior_no_change(&scenario, &prior, &weights, &grid, &batch)?;
        let mut state = DetectorState::new(
            Statistic::Shiryaev,
            prior,
            weights.clone(),
            grid.clone(),
            Evaluation::Recursive,
        )?;
        for inc in increments_of(&scenario, &grid, &batch)?.iter().zip(&oracle) {
            state.update(inc.0)?;
            report.record((state.posterior_no_change() - inc.1).abs());
        }
    }
    Ok(report)
}

/// `E_∞ R(n) = ω + n`; the error is `|mean - (ω + n)| / SE`, tolerance 3.
pub fn check_submartingale(
    seeds: &[u64],
    replications: usize,
    times: &[usize],
    omegas: &[f64],
) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("submartingale", "E_inf R(n) = omega + n within 3 SE", 3.0);
    let scenario = ScenarioSpec::Ar(vec![ArChannelSpec::white_gaussian(1.0)?]);
    let grid = GridSpec::degenerate(vec![0.5])?;
    let weights = SubsetWeights::uniform(1, 1)?;
    let horizon = times.iter().copied().max().unwrap_or(1);
    for &seed in seeds {
        for &omega in omegas {
            let mc = McConfig::new(replications, seed, horizon, 1)?
                .with_workers(rayon::current_num_threads().max(1));
            let paths = run_replications(&mc, |_, rng| -> Result<Vec<f64>> {
                let batch = generate(&scenario, None, horizon, rng)?;
                let incs = increments_of(&scenario, &grid, &batch)?;
                let mut state = DetectorState::new(
                    Statistic::roberts(omega)?,
                    PriorSpec::point_mass(0),
                    weights.clone(),
                    grid.clone(),
                    Evaluation::Recursive,
                )?;
                let mut values = Vec::with_capacity(times.len());
                for (t, inc) in incs.iter().enumerate() {
                    state.update(inc)?;
                    if times.contains(&(t + 1)) {
                        values.push(state.log_value().exp());
                    }
                }
                Ok(values)
            })?
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut sorted: Vec<usize> = times.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            for (j, &n) in sorted.iter().enumerate() {
                let values: Vec<f64> = paths.iter().map(|p| p[j]).collect();
                let est = McEstimate::from_values(&values, 0);
                report.record(
                    (est.mean - (omega + n as f64)).abs() / est.stderr.max(f64::MIN_POSITIVE),
                );
            }
        }
    }
    Ok(report)
}

/// Summed mixture increments against the closed-form LLR.
pub fn check_telescoping(seeds: &[u64], horizon: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(
        "telescoping",
        "summed increments equal the closed-form LLR",
        1e-10,
    );
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = MixtureChannelSpec::new(
            rng.random_range(0.1..0.9),
            rng.random_range(-4.0..-1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.5..2.0),
        )?;
        let theta = ch.mu2() + rng.random_range(0.2..2.0);
        let scenario = ScenarioSpec::Mixture(vec![ch.clone()]);
        let n = rng.random_range(1..=horizon);
        let k = rng.random_range(0..n);
        let change = ChangeSpec::new(k as i64, vec![0], vec![theta])?;
        let batch = generate(&scenario, Some(&change), n, &mut rng)?;
        let mut source = scenario.llr_source();
        let mut summed = 0.0;
        for (t, row) in batch.rows().enumerate() {
            source.observe(row)?;
            if t >= k {
                summed += source.increment(0, theta);
            }
        }
        let closed = mixture_llr_closed_form(&ch, &batch.stream(0), k, theta);
        report.record((summed - closed).abs() / closed.abs().max(1.0));
    }
    Ok(report)
}

/// Windowed statistic against brute force over the same window, and bit identity
/// with the full statistic once the window covers the origin.
pub fn check_window(
    seeds: &[u64],
    horizon: usize,
    m1: usize,
    fault: Option<Fault>,
) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(
        "window",
        "windowed statistic sums exactly the last m1 + 1 candidates",
        1e-9,
    );
    let grid = test_grid();
    let weights = SubsetWeights::uniform(3, 2)?;
    let prior = PriorSpec::geometric(0.1, 0.05)?;
    let used = match fault {
        Some(Fault::WindowOffByOne) => m1 + 1,
        None => m1,
    };
    for &seed in seeds {
        let scenario = ar_test_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let change = ChangeSpec::new(horizon as i64 / 3, vec![0, 1], vec![0.8, 0.8])?;
        let batch = generate(&scenario, Some(&change), horizon, &mut rng)?;
        let incs = increments_of(&scenario, &grid, &batch)?;
        for stat in [Statistic::Shiryaev, Statistic::Roberts { omega: 1.0 }] {
            let mut win = DetectorState::new(
                stat,
                prior,
                weights.clone(),
                grid.clone(),
                Evaluation::Direct { window: Some(used) },
            )?;
            let mut cover = DetectorState::new(
                stat,
                prior,
                weights.clone(),
                grid.clone(),
                Evaluation::Direct {
                    window: Some(horizon),
                },
            )?;
            let mut full = DetectorState::new(
                stat,
                prior,
                weights.clone(),
                grid.clone(),
                Evaluation::Direct { window: None },
            )?;
            for n in 1..=horizon {
                let a = win.update(&incs[n - 1])?;
                let oracle =
                    brute_force_log_statistic(stat, &prior, &weights, &grid, &incs[..n], Some(m1))?;
                report.record((a - oracle).abs() / oracle.abs().max(1.0));
                let b = cover.update(&incs[n - 1])?;
                let c = full.update(&incs[n - 1])?;
                report.record(if b.to_bits() == c.to_bits() {
                    0.0
                } else {
                    f64::INFINITY
                });
            }
        }
    }
    Ok(report)
}

/// Direct summation over an explicit history; exposed for callers holding raw increments.
pub fn direct_from_increments(
    stat: Statistic,
    prior: &PriorSpec,
    weights: &SubsetWeights,
    grid: &GridSpec,
    increments: &[Increments],
    window: Option<usize>,
) -> Result<f64> {
    let mut cum = CumulativeLlr::new(grid.len(), grid.streams());
    increments.iter().for_each(|inc| cum.push(inc));
    crate::statistics::direct_log_statistic(stat, prior, weights, grid, &cum, window)
}

/// Runs `suite` over `seeds` at the default verification sizes.
pub fn run_suite(suite: Suite, seeds: &[u64], fault: Option<Fault>) -> Result<SuiteReport> {
    match suite {
        Suite::Recursion => check_recursion(seeds, 120),
        Suite::MixtureDp => check_mixture_dp(seeds, 3),
        Suite::Posterior => check_posterior(seeds, 60),
        Suite::Submartingale => check_submartingale(
            &seeds[..seeds.len().min(2)],
            20_000,
            &[1, 10, 50],
            &[0.0, 3.0],
        ),
        Suite::Telescoping => check_telescoping(seeds, 50),
        Suite::Window => check_window(seeds, 20, 8, fault),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_direct_on_short_paths() {
        let grid = test_grid();
        let weights = SubsetWeights::uniform(3, 3).unwrap();
        let prior = PriorSpec::geometric(0.1, 0.2).unwrap();
        let scenario = mixture_test_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = generate(&scenario, None, 20, &mut rng).unwrap();
        let incs = increments_of(&scenario, &grid, &batch).unwrap();
        for window in [None, Some(0), Some(8), Some(19), Some(40)] {
            for stat in [Statistic::Shiryaev, Statistic::Roberts { omega: 0.5 }] {
                let a = brute_force_log_statistic(stat, &prior, &weights, &grid, &incs, window)
                    .unwrap();
                let b =
                    direct_from_increments(stat, &prior, &weights, &grid, &incs, window).unwrap();
                assert!((a - b).abs() < 1e-10, "{window:?} {a} {b}");
            }
        }
    }

    #[test]
    fn suites_pass_and_fault_is_caught() {
        for suite in [
            Suite::Recursion,
            Suite::MixtureDp,
            Suite::Posterior,
            Suite::Telescoping,
            Suite::Window,
        ] {
            let report = run_suite(suite, &[1, 2], None).unwrap();
            assert!(report.passed, "{report:?}");
            assert!(report.checks > 0);
        }
        let broken = run_suite(Suite::Window, &[1], Some(Fault::WindowOffByOne)).unwrap();
        assert!(!broken.passed);
        assert_eq!(broken.suite, "window");
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("nope"), None);
    }
}
