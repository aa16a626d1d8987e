//! Two observation models: deterministic signals of unknown amplitude in AR(p)
//! Gaussian noise, and a non-additive change away from a two-component
//! Gaussian mixture. Each model provides a data sampler and an LLR source.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::info::{kl_ar, kl_mixture};
use crate::likelihood::LlrSource;
use crate::model::ChangeSpec;
use crate::numerics::softplus;

/// One channel observing `θ S_n 1{n > ν} + ξ_n` with AR(p) Gaussian noise `ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArChannelRepr", into = "ArChannelRepr")]
pub struct ArChannelSpec {
    coeffs: Vec<f64>,
    sigma: f64,
    signal: Vec<f64>,
    /// Residual signal for `n = 1..=p + period`; periodic afterwards.
    residual_signal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArChannelRepr {
    #[serde(default)]
    coeffs: Vec<f64>,
    sigma: f64,
    signal: Vec<f64>,
}

impl TryFrom<ArChannelRepr> for ArChannelSpec {
    type Error = QcdError;

    fn try_from(r: ArChannelRepr) -> Result<Self> {
        ArChannelSpec::new(r.coeffs, r.sigma, r.signal)
    }
}

impl From<ArChannelSpec> for ArChannelRepr {
    fn from(c: ArChannelSpec) -> Self {
        ArChannelRepr {
            coeffs: c.coeffs,
            sigma: c.sigma,
            signal: c.signal,
        }
    }
}

impl ArChannelSpec {
    /// `signal` is one period of the deterministic template `S_n`, starting at `n = 1`.
    pub fn new(coeffs: Vec<f64>, sigma: f64, signal: Vec<f64>) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(QcdError::invalid(
                "sigma",
                format!("must be positive, got {sigma}"),
            ));
        }
        if signal.is_empty() {
            return Err(QcdError::invalid(
                "signal",
                "template needs at least one sample",
            ));
        }
        if coeffs.iter().chain(&signal).any(|v| !v.is_finite()) {
            return Err(QcdError::NonFinite("AR coefficients or signal".into()));
        }
        if !is_stable(&coeffs) {
            return Err(QcdError::invalid(
                "coeffs",
                "AR polynomial has a root on or outside the unit circle",
            ));
        }
        let p = coeffs.len();
        let template = |n: usize| signal[(n - 1) % signal.len()];
        let history: Vec<f64> = (1..=p + signal.len()).map(template).collect();
        let residual_signal = (1..=history.len())
            .map(|n| ar_residual(&history[..n], &coeffs))
            .collect();
        Ok(ArChannelSpec {
            coeffs,
            sigma,
            signal,
            residual_signal,
        })
    }

    /// I.i.d. Gaussian channel (no AR filtering) with a constant unit signal.
    pub fn white_gaussian(sigma: f64) -> Result<Self> {
        Self::new(Vec::new(), sigma, vec![1.0])
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    /// Template value `S_n`, `n ≥ 1`.
    pub fn signal_at(&self, n: usize) -> f64 {
        self.signal[(n - 1) % self.signal.len()]
    }

    /// Residual template `S̃_n`, `n ≥ 1`.
    pub fn residual_signal_at(&self, n: usize) -> f64 {
        let p = self.coeffs.len();
        let period = self.signal.len();
        let idx = if n <= p + period {
            n
        } else {
            p + (n - p - 1) % period + 1
        };
        self.residual_signal[idx - 1]
    }

    /// Period average of `S̃²` in steady state.
    pub fn q_constant(&self) -> f64 {
        q_constant(&self.signal, &self.coeffs)
    }

    pub fn info(&self, theta: f64) -> f64 {
        kl_ar(theta, self.q_constant(), self.sigma).unwrap_or(0.0)
    }
}

/// Step-down (Schur-Cohn) test: all roots of `z^p - β_1 z^{p-1} - ... - β_p` lie
/// strictly inside the unit circle.
pub fn is_stable(coeffs: &[f64]) -> bool {
    // a(z) = 1 - Σ β_j z^-j in monic form a = [1, -β_1, ..., -β_p]
    let mut a: Vec<f64> = coeffs.iter().map(|b| -b).collect();
    while let Some(&k) = a.last() {
        if k.is_nan() || k.abs() >= 1.0 {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - k * k;
        a = (0..m - 1)
            .map(|j| (a[j] - k * a[m - 2 - j]) / denom)
            .collect();
    }
    true
}

/// Residual `X̃_n = X_n - Σ_{j=1}^{p_n} β_j X_{n-j}` of the last element of `history`,
/// with the order truncated to the available past (zero initial conditions).
pub fn ar_residual(history: &[f64], coeffs: &[f64]) -> f64 {
    let n = history.len();
    assert!(n > 0, "residual needs at least one observation");
    let order = coeffs.len().min(n - 1);
    let mut r = history[n - 1];
    for j in 1..=order {
        r -= coeffs[j - 1] * history[n - 1 - j];
    }
    r
}

/// Per-observation LLR `θ S̃ X̃ / σ² - θ² S̃² / (2σ²)`.
#[inline]
pub fn ar_llr_increment(theta: f64, residual: f64, residual_signal: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    theta * residual_signal * residual / s2
        - theta * theta * residual_signal * residual_signal / (2.0 * s2)
}

/// `Q = lim n^-1 Σ S̃²`, exact for a periodic template.
pub fn q_constant(signal: &[f64], coeffs: &[f64]) -> f64 {
    if signal.is_empty() {
        return 0.0;
    }
    let p = coeffs.len();
    let period = signal.len();
    let history: Vec<f64> = (0..p + period).map(|j| signal[j % period]).collect();
    let sum: f64 = (p + 1..=p + period)
        .map(|n| ar_residual(&history[..n], coeffs).powi(2))
        .sum();
    sum / period as f64
}

/// Channel whose pre-change law mixes two Gaussians (component chosen once) and
/// whose post-change law is i.i.d. `N(θ, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureChannelRepr", into = "MixtureChannelRepr")]
pub struct MixtureChannelSpec {
    beta_mix: f64,
    mu1: f64,
    mu2: f64,
    sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MixtureChannelRepr {
    beta_mix: f64,
    mu1: f64,
    #[serde(default)]
    mu2: f64,
    sigma: f64,
}

impl TryFrom<MixtureChannelRepr> for MixtureChannelSpec {
    type Error = QcdError;

    fn try_from(r: MixtureChannelRepr) -> Result<Self> {
        MixtureChannelSpec::new(r.beta_mix, r.mu1, r.mu2, r.sigma)
    }
}

impl From<MixtureChannelSpec> for MixtureChannelRepr {
    fn from(c: MixtureChannelSpec) -> Self {
        MixtureChannelRepr {
            beta_mix: c.beta_mix,
            mu1: c.mu1,
            mu2: c.mu2,
            sigma: c.sigma,
        }
    }
}

impl MixtureChannelSpec {
    pub fn new(beta_mix: f64, mu1: f64, mu2: f64, sigma: f64) -> Result<Self> {
        if !(beta_mix > 0.0 && beta_mix < 1.0) {
            return Err(QcdError::invalid(
                "beta_mix",
                format!("must lie in (0, 1), got {beta_mix}"),
            ));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(QcdError::invalid(
                "sigma",
                format!("must be positive, got {sigma}"),
            ));
        }
        if !(mu1.is_finite() && mu2.is_finite()) {
            return Err(QcdError::NonFinite("mixture means".into()));
        }
        Ok(MixtureChannelSpec {
            beta_mix,
            mu1,
            mu2,
            sigma,
        })
    }

    pub fn beta_mix(&self) -> f64 {
        self.beta_mix
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Requires `I^(1)_θ > I^(2)_θ`, i.e. the post-change mean is closer to `μ₂`.
    pub fn check_post_change(&self, theta: f64) -> Result<()> {
        if (theta - self.mu1).abs() > (theta - self.mu2).abs() {
            Ok(())
        } else {
            Err(QcdError::invalid(
                "theta",
                format!(
                    "post-change mean {theta} must be closer to mu2 = {} than to mu1 = {}",
                    self.mu2, self.mu1
                ),
            ))
        }
    }

    /// `log p₁(x) - log p₂(x)`.
    #[inline]
    fn log_component_ratio(&self, x: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        ((x - self.mu2).powi(2) - (x - self.mu1).powi(2)) / (2.0 * s2)
    }

    /// `L^(2)(θ) = log f_θ(x) - log p₂(x)`.
    #[inline]
    pub fn log_ratio_to_second(&self, theta: f64, x: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        ((x - self.mu2).powi(2) - (x - theta).powi(2)) / (2.0 * s2)
    }

    pub fn info(&self, theta: f64) -> f64 {
        kl_mixture(theta, self.mu2, self.sigma).unwrap_or(0.0)
    }
}

/// Running per-stream state for [`mixture_llr_increment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureState {
    /// `log G_{n-1}`.
    pub log_g_prev: f64,
    /// `log G_n`.
    pub log_g: f64,
    /// Last observation.
    pub x: f64,
}

impl Default for MixtureState {
    fn default() -> Self {
        MixtureState {
            log_g_prev: 0.0,
            log_g: 0.0,
            x: 0.0,
        }
    }
}

impl MixtureState {
    /// Folds in `x`, advancing `G_n = G_{n-1} p₁(x)/p₂(x)`.
    pub fn advance(&mut self, channel: &MixtureChannelSpec, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(QcdError::NonFinite(format!("mixture observation {x}")));
        }
        self.log_g_prev = self.log_g;
        self.log_g += channel.log_component_ratio(x);
        self.x = x;
        Ok(())
    }
}

/// `log f_θ(x_n)/g(x_n | x^{n-1}) = L^(2)(θ) + log(1 + v G_{n-1}) - log(1 + v G_n)`
/// for the state after [`MixtureState::advance`].
#[inline]
pub fn mixture_llr_increment(
    channel: &MixtureChannelSpec,
    state: &MixtureState,
    theta: f64,
) -> f64 {
    let log_v = channel.beta_mix.ln() - (-channel.beta_mix).ln_1p();
    channel.log_ratio_to_second(theta, state.x) + softplus(log_v + state.log_g_prev)
        - softplus(log_v + state.log_g)
}

/// Generative model for all `N` streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "channels", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Ar(Vec<ArChannelSpec>),
    Mixture(Vec<MixtureChannelSpec>),
}

impl ScenarioSpec {
    pub fn streams(&self) -> usize {
        match self {
            ScenarioSpec::Ar(c) => c.len(),
            ScenarioSpec::Mixture(c) => c.len(),
        }
    }

    /// Kullback-Leibler number `I_{i,θ}` per observation.
    pub fn info(&self, stream: usize, theta: f64) -> f64 {
        match self {
            ScenarioSpec::Ar(c) => c[stream].info(theta),
            ScenarioSpec::Mixture(c) => c[stream].info(theta),
        }
    }

    pub fn llr_source(&self) -> Box<dyn LlrSource> {
        match self {
            ScenarioSpec::Ar(c) => Box::new(ArLlrSource::new(c.clone())),
            ScenarioSpec::Mixture(c) => Box::new(MixtureLlrSource::new(c.clone())),
        }
    }

    /// Checks a change configuration against this model.
    pub fn check_change(&self, change: &ChangeSpec) -> Result<()> {
        change.validate_for(self.streams(), self.streams())?;
        if let ScenarioSpec::Mixture(c) = self {
            for (&i, &theta) in change.subset.iter().zip(&change.theta) {
                c[i].check_post_change(theta)?;
            }
        }
        Ok(())
    }
}

/// Produces observation vectors one time step at a time.
///
/// The number and order of random draws never depends on the change, so runs that
/// share a seed share their noise.
pub struct ObservationSampler<'a> {
    scenario: &'a ScenarioSpec,
    change: Option<&'a ChangeSpec>,
    t: usize,
    /// AR: most recent noise values per stream, newest first.
    noise: Vec<VecDeque<f64>>,
    /// Mixture: whether each stream drew the first component.
    first_component: Vec<bool>,
}

impl<'a> ObservationSampler<'a> {
    pub fn new<R: Rng + ?Sized>(
        scenario: &'a ScenarioSpec,
        change: Option<&'a ChangeSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if scenario.streams() == 0 {
            return Err(QcdError::invalid("scenario", "needs at least one stream"));
        }
        if let Some(c) = change {
            scenario.check_change(c)?;
        }
        let (noise, first_component) = match scenario {
            ScenarioSpec::Ar(c) => (
                c.iter()
                    .map(|ch| VecDeque::from(vec![0.0; ch.coeffs.len()]))
                    .collect(),
                Vec::new(),
            ),
            ScenarioSpec::Mixture(c) => (
                Vec::new(),
                c.iter()
                    .map(|ch| rng.random::<f64>() < ch.beta_mix)
                    .collect(),
            ),
        };
        Ok(ObservationSampler {
            scenario,
            change,
            t: 0,
            noise,
            first_component,
        })
    }

    /// Index of the last produced observation.
    pub fn time(&self) -> usize {
        self.t
    }

    pub fn next_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) {
        self.t += 1;
        let t = self.t;
        let post_theta = |i: usize| {
            self.change
                .filter(|c| c.is_post_change(i, t))
                .and_then(|c| c.theta_of(i))
        };
        match self.scenario {
            ScenarioSpec::Ar(channels) => {
                for (i, ch) in channels.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let hist = &mut self.noise[i];
                    let xi = ch
                        .coeffs
                        .iter()
                        .zip(hist.iter())
                        .map(|(b, x)| b * x)
                        .sum::<f64>()
                        + ch.sigma * z;
                    if !hist.is_empty() {
                        hist.pop_back();
                        hist.push_front(xi);
                    }
                    let signal = post_theta(i).map_or(0.0, |th| th * ch.signal_at(t));
                    out[i] = signal + xi;
                }
            }
            ScenarioSpec::Mixture(channels) => {
                for (i, ch) in channels.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let mean = match post_theta(i) {
                        Some(th) => th,
                        None if self.first_component[i] => ch.mu1,
                        None => ch.mu2,
                    };
                    out[i] = mean + ch.sigma * z;
                }
            }
        }
    }

    pub fn next_vec<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let mut row = vec![0.0; self.scenario.streams()];
        self.next_into(rng, &mut row);
        row
    }
}

/// LLR increments for the AR model.
#[derive(Debug, Clone)]
pub struct ArLlrSource {
    channels: Vec<ArChannelSpec>,
    /// Recent observations per stream, newest first, at most `p` kept.
    past: Vec<VecDeque<f64>>,
    residual: Vec<f64>,
    residual_signal: Vec<f64>,
    n: usize,
}

impl ArLlrSource {
    pub fn new(channels: Vec<ArChannelSpec>) -> Self {
        let n_streams = channels.len();
        ArLlrSource {
            past: channels
                .iter()
                .map(|c| VecDeque::with_capacity(c.coeffs.len()))
                .collect(),
            channels,
            residual: vec![0.0; n_streams],
            residual_signal: vec![0.0; n_streams],
            n: 0,
        }
    }
}

impl LlrSource for ArLlrSource {
    fn streams(&self) -> usize {
        self.channels.len()
    }

    fn observe(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.channels.len() {
            return Err(QcdError::invalid("observation", "wrong number of streams"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(QcdError::NonFinite("AR observation".into()));
        }
        self.n += 1;
        for (i, ch) in self.channels.iter().enumerate() {
            let past = &mut self.past[i];
            let mut r = x[i];
            for (b, prev) in ch.coeffs.iter().zip(past.iter()) {
                r -= b * prev;
            }
            self.residual[i] = r;
            self.residual_signal[i] = ch.residual_signal_at(self.n);
            if !ch.coeffs.is_empty() {
                if past.len() == ch.coeffs.len() {
                    past.pop_back();
                }
                past.push_front(x[i]);
            }
        }
        Ok(())
    }

    fn increment(&self, stream: usize, theta: f64) -> f64 {
        ar_llr_increment(
            theta,
            self.residual[stream],
            self.residual_signal[stream],
            self.channels[stream].sigma,
        )
    }

    fn reset(&mut self) {
        self.past.iter_mut().for_each(VecDeque::clear);
        self.n = 0;
    }
}

/// LLR increments for the mixture model, tracking `log G_n` per stream.
#[derive(Debug, Clone)]
pub struct MixtureLlrSource {
    channels: Vec<MixtureChannelSpec>,
    states: Vec<MixtureState>,
}

impl MixtureLlrSource {
    pub fn new(channels: Vec<MixtureChannelSpec>) -> Self {
        MixtureLlrSource {
            states: vec![MixtureState::default(); channels.len()],
            channels,
        }
    }

    pub fn state(&self, stream: usize) -> &MixtureState {
        &self.states[stream]
    }
}

impl LlrSource for MixtureLlrSource {
    fn streams(&self) -> usize {
        self.channels.len()
    }

    fn observe(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.channels.len() {
            return Err(QcdError::invalid("observation", "wrong number of streams"));
        }
        for ((state, ch), &xi) in self.states.iter_mut().zip(&self.channels).zip(x) {
            state.advance(ch, xi)?;
        }
        Ok(())
    }

    fn increment(&self, stream: usize, theta: f64) -> f64 {
        mixture_llr_increment(&self.channels[stream], &self.states[stream], theta)
    }

    fn reset(&mut self) {
        self.states.fill(MixtureState::default());
    }
}
