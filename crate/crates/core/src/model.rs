//! Change-point priors, change configurations and synthetic multistream data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::scenarios::{ObservationSampler, ScenarioSpec};

/// Shape of the prior on the change point `ν` restricted to `{0, 1, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    /// `π_k ∝ rho (1 - rho)^k`.
    Geometric { rho: f64 },
    /// `π_k ∝ (k + 1)^-(1 + beta)`; heavy tailed, zero exponential tail rate.
    PolynomialTail { beta: f64 },
    /// All non-negative mass at `k0`. Only useful for fixed-change diagnostics.
    PointMass { k0: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PriorRepr {
    #[serde(flatten)]
    kind: PriorKind,
    #[serde(default)]
    q: f64,
}

/// Prior distribution of the change point.
///
/// `q = P(ν ≤ -1)` is the probability that the change is already in effect when
/// observation starts; the remaining `1 - q` is spread over `k ≥ 0` by [`PriorKind`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorRepr", into = "PriorRepr")]
pub struct PriorSpec {
    kind: PriorKind,
    q: f64,
    /// `ζ(1 + beta)` for the polynomial tail, 1 otherwise.
    zeta: f64,
}

impl TryFrom<PriorRepr> for PriorSpec {
    type Error = QcdError;

    fn try_from(r: PriorRepr) -> Result<Self> {
        PriorSpec::new(r.kind, r.q)
    }
}

impl From<PriorSpec> for PriorRepr {
    fn from(p: PriorSpec) -> Self {
        PriorRepr {
            kind: p.kind,
            q: p.q,
        }
    }
}

impl PriorSpec {
    pub fn new(kind: PriorKind, q: f64) -> Result<Self> {
        if !(q.is_finite() && (0.0..1.0).contains(&q)) {
            return Err(QcdError::invalid(
                "q",
                format!("must lie in [0, 1), got {q}"),
            ));
        }
        let zeta = match kind {
            PriorKind::Geometric { rho } => {
                if !(rho.is_finite() && rho > 0.0 && rho < 1.0) {
                    return Err(QcdError::invalid(
                        "rho",
                        format!("must lie in (0, 1), got {rho}"),
                    ));
                }
                1.0
            }
            PriorKind::PolynomialTail { beta } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(QcdError::invalid(
                        "beta",
                        format!("must be positive, got {beta}"),
                    ));
                }
                hurwitz_zeta(1.0 + beta, 1.0)
            }
            PriorKind::PointMass { .. } => 1.0,
        };
        Ok(PriorSpec { kind, q, zeta })
    }

    pub fn geometric(rho: f64, q: f64) -> Result<Self> {
        Self::new(PriorKind::Geometric { rho }, q)
    }

    pub fn polynomial_tail(beta: f64, q: f64) -> Result<Self> {
        Self::new(PriorKind::PolynomialTail { beta }, q)
    }

    pub fn point_mass(k0: u64) -> Self {
        PriorSpec {
            kind: PriorKind::PointMass { k0 },
            q: 0.0,
            zeta: 1.0,
        }
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// Head mass `P(ν ≤ -1)`.
    pub fn q(&self) -> f64 {
        self.q
    }

    /// `π_k = P(ν = k)`.
    pub fn mass(&self, k: u64) -> f64 {
        self.log_mass(k).exp()
    }

    pub fn log_mass(&self, k: u64) -> f64 {
        let head = (-self.q).ln_1p();
        match self.kind {
            PriorKind::Geometric { rho } => head + rho.ln() + k as f64 * (-rho).ln_1p(),
            PriorKind::PolynomialTail { beta } => {
                head - (1.0 + beta) * ((k + 1) as f64).ln() - self.zeta.ln()
            }
            PriorKind::PointMass { k0 } => {
                if k == k0 {
                    head
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `P(ν ≥ n)`, counting only the non-negative part of the support.
    pub fn tail(&self, n: u64) -> f64 {
        self.log_tail(n).exp()
    }

    pub fn log_tail(&self, n: u64) -> f64 {
        let head = (-self.q).ln_1p();
        match self.kind {
            PriorKind::Geometric { rho } => head + n as f64 * (-rho).ln_1p(),
            PriorKind::PolynomialTail { beta } => {
                head + hurwitz_zeta(1.0 + beta, (n + 1) as f64).ln() - self.zeta.ln()
            }
            PriorKind::PointMass { k0 } => {
                if n <= k0 {
                    head
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Exponential tail rate `μ = lim |log P(ν ≥ n)| / n`.
    pub fn tail_rate(&self) -> f64 {
        match self.kind {
            PriorKind::Geometric { rho } => -(-rho).ln_1p(),
            PriorKind::PolynomialTail { .. } => 0.0,
            PriorKind::PointMass { .. } => f64::INFINITY,
        }
    }

    /// `b = Σ_{k≥1} π_k`.
    pub fn mass_after_zero(&self) -> f64 {
        self.tail(1)
    }

    /// `ν̄ = Σ_{k≥1} k π_k`, or `None` when the mean is infinite.
    pub fn mean(&self) -> Option<f64> {
        let head = 1.0 - self.q;
        match self.kind {
            PriorKind::Geometric { rho } => Some(head * (1.0 - rho) / rho),
            PriorKind::PolynomialTail { beta } => {
                if beta <= 1.0 {
                    None
                } else {
                    // Σ_{k≥1} k (k+1)^-s = ζ(s-1) - ζ(s)
                    let s = 1.0 + beta;
                    Some(head * (hurwitz_zeta(s - 1.0, 1.0) - self.zeta) / self.zeta)
                }
            }
            PriorKind::PointMass { k0 } => Some(head * k0 as f64),
        }
    }

    /// Draws `ν`; `-1` stands for the whole event `{ν ≤ -1}`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let u: f64 = rng.random();
        if u < self.q {
            return -1;
        }
        // uniform on (0, 1] for the conditional draw
        let v = 1.0 - rng.random::<f64>();
        match self.kind {
            PriorKind::Geometric { rho } => (v.ln() / (-rho).ln_1p()).floor() as i64,
            PriorKind::PolynomialTail { .. } => self.sample_polynomial(v),
            PriorKind::PointMass { k0 } => k0 as i64,
        }
    }

    /// Smallest `k` with `P(ν > k | ν ≥ 0) < v`.
    fn sample_polynomial(&self, v: f64) -> i64 {
        let head = (-self.q).ln_1p();
        let log_v = v.ln();
        let exceeds = |k: u64| self.log_tail(k + 1) - head >= log_v;
        if !exceeds(0) {
            return 0;
        }
        let mut hi = 1u64;
        while exceeds(hi) {
            if hi >= 1 << 52 {
                return hi as i64;
            }
            hi *= 2;
        }
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if exceeds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi as i64
    }
}

/// Hurwitz zeta `Σ_{j≥0} (a + j)^-s` for `s > 1`, `a > 0`, via Euler-Maclaurin.
pub(crate) fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    const DIRECT: usize = 12;
    // B_{2k} / (2k)!
    const COEFFS: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 720.0,
        1.0 / 30240.0,
        -1.0 / 1209600.0,
        1.0 / 47900160.0,
        -691.0 / 1307674368000.0,
        1.0 / 74724249600.0,
    ];
    let mut sum = 0.0;
    for j in 0..DIRECT {
        sum += (a + j as f64).powf(-s);
    }
    let x = a + DIRECT as f64;
    sum += x.powf(1.0 - s) / (s - 1.0) + 0.5 * x.powf(-s);
    // rising product s (s+1) ... (s+2k-2) times x^-(s+2k-1)
    let mut rising = s;
    let mut power = x.powf(-s - 1.0);
    for (k, c) in COEFFS.iter().enumerate() {
        sum += c * rising * power;
        let m = 2.0 * k as f64;
        rising *= (s + m + 1.0) * (s + m + 2.0);
        power /= x * x;
    }
    sum
}

/// Where, in which streams, and how strongly the change happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSpec {
    /// Last pre-change index; `-1` means the change precedes the first observation.
    pub nu: i64,
    /// Affected streams, sorted and distinct.
    pub subset: Vec<usize>,
    /// Post-change parameter of each affected stream, aligned with `subset`.
    pub theta: Vec<f64>,
}

impl ChangeSpec {
    pub fn new(nu: i64, mut subset: Vec<usize>, theta: Vec<f64>) -> Result<Self> {
        if nu < -1 {
            return Err(QcdError::invalid("nu", format!("must be >= -1, got {nu}")));
        }
        if subset.is_empty() {
            return Err(QcdError::invalid(
                "subset",
                "affected subset must be nonempty",
            ));
        }
        if subset.len() != theta.len() {
            return Err(QcdError::invalid(
                "theta",
                format!(
                    "{} values for {} affected streams",
                    theta.len(),
                    subset.len()
                ),
            ));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(QcdError::NonFinite("post-change theta".into()));
        }
        let mut pairs: Vec<(usize, f64)> = subset.drain(..).zip(theta).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(QcdError::invalid("subset", "duplicate stream index"));
        }
        let (subset, theta) = pairs.into_iter().unzip();
        Ok(ChangeSpec { nu, subset, theta })
    }

    /// Checks `B ⊆ [N]` and `|B| ≤ K`.
    pub fn validate_for(&self, streams: usize, max_affected: usize) -> Result<()> {
        if let Some(&i) = self.subset.iter().find(|&&i| i >= streams) {
            return Err(QcdError::invalid(
                "subset",
                format!("stream {i} out of range for {streams} streams"),
            ));
        }
        if self.subset.len() > max_affected {
            return Err(QcdError::invalid(
                "subset",
                format!(
                    "{} affected streams exceed K = {max_affected}",
                    self.subset.len()
                ),
            ));
        }
        Ok(())
    }

    /// Post-change parameter of `stream`, if it is affected.
    pub fn theta_of(&self, stream: usize) -> Option<f64> {
        self.subset
            .binary_search(&stream)
            .ok()
            .map(|pos| self.theta[pos])
    }

    /// Whether observation index `t` (1-based) of `stream` is post-change.
    pub fn is_post_change(&self, stream: usize, t: usize) -> bool {
        (t as i64) > self.nu && self.subset.binary_search(&stream).is_ok()
    }
}

/// `horizon × N` block of observations, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    data: Vec<f64>,
    horizon: usize,
    streams: usize,
}

impl ObservationBatch {
    pub fn new(data: Vec<f64>, horizon: usize, streams: usize) -> Result<Self> {
        if horizon == 0 || streams == 0 {
            return Err(QcdError::invalid("horizon", "batch must be nonempty"));
        }
        if data.len() != horizon * streams {
            return Err(QcdError::invalid(
                "data",
                format!("expected {} values, got {}", horizon * streams, data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(QcdError::NonFinite("observation batch".into()));
        }
        Ok(ObservationBatch {
            data,
            horizon,
            streams,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    /// Observation vector at time `t`, 1-based.
    pub fn row(&self, t: usize) -> &[f64] {
        let start = (t - 1) * self.streams;
        &self.data[start..start + self.streams]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.streams)
    }

    /// Samples of one stream in time order.
    pub fn stream(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }
}

/// Simulates `horizon` observation vectors. `change = None` is the no-change law.
///
/// Random draws do not depend on the change, so equal seeds give the same noise
/// with or without a change.
pub fn generate<R: Rng + ?Sized>(
    scenario: &ScenarioSpec,
    change: Option<&ChangeSpec>,
    horizon: usize,
    rng: &mut R,
) -> Result<ObservationBatch> {
    if horizon == 0 {
        return Err(QcdError::invalid("horizon", "must be at least 1"));
    }
    let mut sampler = ObservationSampler::new(scenario, change, rng)?;
    let streams = scenario.streams();
    let mut data = Vec::with_capacity(horizon * streams);
    let mut row = vec![0.0; streams];
    for _ in 0..horizon {
        sampler.next_into(rng, &mut row);
        data.extend_from_slice(&row);
    }
    ObservationBatch::new(data, horizon, streams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{ArChannelSpec, MixtureChannelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometric_mass_examples() {
        let p = PriorSpec::geometric(0.5, 0.0).unwrap();
        assert!((p.mass(0) - 0.5).abs() < 1e-15);
        let p = PriorSpec::geometric(0.5, 0.5).unwrap();
        assert!((p.mass(1) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn polynomial_mass_uses_zeta_normalizer() {
        let p = PriorSpec::polynomial_tail(1.0, 0.0).unwrap();
        let expected = 6.0 / std::f64::consts::PI.powi(2);
        assert!((p.mass(0) - expected).abs() < 1e-13, "{}", p.mass(0));
    }

    #[test]
    fn tail_examples() {
        let p = PriorSpec::geometric(0.5, 0.0).unwrap();
        assert!((p.tail(0) - 1.0).abs() < 1e-15);
        assert!((p.tail(2) - 0.25).abs() < 1e-15);
        for prior in [
            PriorSpec::geometric(0.2, 0.3).unwrap(),
            PriorSpec::polynomial_tail(1.5, 0.3).unwrap(),
        ] {
            assert!((prior.tail(0) - 0.7).abs() < 1e-13);
        }
    }

    fn all_priors() -> Vec<PriorSpec> {
        vec![
            PriorSpec::geometric(0.1, 0.0).unwrap(),
            PriorSpec::geometric(0.01, 0.25).unwrap(),
            PriorSpec::polynomial_tail(1.0, 0.0).unwrap(),
            PriorSpec::polynomial_tail(0.5, 0.1).unwrap(),
            PriorSpec::polynomial_tail(2.5, 0.4).unwrap(),
            PriorSpec::point_mass(7),
        ]
    }

    #[test]
    fn total_mass_is_one() {
        for prior in all_priors() {
            let head: f64 = (0..=10_000u64).map(|k| prior.mass(k)).sum();
            let total = head + prior.tail(10_001) + prior.q();
            assert!((total - 1.0).abs() < 1e-10, "{prior:?}: {total}");
        }
    }

    #[test]
    fn tail_differences_are_masses() {
        for prior in all_priors() {
            for n in 0..=1000u64 {
                let diff = prior.tail(n) - prior.tail(n + 1);
                assert!((diff - prior.mass(n)).abs() < 1e-12, "{prior:?} n={n}");
            }
        }
    }

    #[test]
    fn geometric_tail_rate_matches_log_slope() {
        let prior = PriorSpec::geometric(0.1, 0.0).unwrap();
        let n = 1000u64;
        let slope = prior.log_tail(n).abs() / n as f64;
        assert!((slope - prior.tail_rate()).abs() < 1e-6);
        assert_eq!(
            PriorSpec::polynomial_tail(1.0, 0.0).unwrap().tail_rate(),
            0.0
        );
    }

    #[test]
    fn means_are_analytic() {
        let g = PriorSpec::geometric(0.1, 0.0).unwrap();
        assert!((g.mean().unwrap() - 9.0).abs() < 1e-12);
        assert!((g.mass_after_zero() - 0.9).abs() < 1e-12);
        assert!(PriorSpec::polynomial_tail(1.0, 0.0)
            .unwrap()
            .mean()
            .is_none());
        let p = PriorSpec::polynomial_tail(2.0, 0.0).unwrap();
        let brute: f64 = (1..2_000_000u64).map(|k| k as f64 * p.mass(k)).sum();
        // remaining tail of Σ k (k+1)^-3 beyond 2e6 is about 1/2e6 times the normalizer
        assert!((p.mean().unwrap() - brute).abs() < 1e-6);
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(PriorSpec::point_mass(5).sample(&mut rng), 5);
        let near = PriorSpec::geometric(1.0 - 1e-15, 0.0).unwrap();
        assert!((0..1000).all(|_| near.sample(&mut rng) == 0));
        let prior = PriorSpec::geometric(0.1, 0.0).unwrap();
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| prior.sample(&mut rng) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 9.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn sampling_respects_head_mass_and_polynomial_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = PriorSpec::polynomial_tail(1.0, 0.3).unwrap();
        let n = 200_000;
        let draws: Vec<i64> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        let frac = |pred: &dyn Fn(i64) -> bool| {
            draws.iter().filter(|&&d| pred(d)).count() as f64 / n as f64
        };
        let se = (0.25 / n as f64).sqrt();
        assert!((frac(&|d| d == -1) - 0.3).abs() < 4.0 * se);
        assert!((frac(&|d| d == 0) - prior.mass(0)).abs() < 4.0 * se);
        assert!((frac(&|d| d >= 10) - prior.tail(10)).abs() < 4.0 * se);
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(PriorSpec::geometric(0.0, 0.0).is_err());
        assert!(PriorSpec::geometric(0.5, 1.0).is_err());
        assert!(PriorSpec::polynomial_tail(-1.0, 0.0).is_err());
    }

    #[test]
    fn prior_serde_round_trip_validates() {
        let p = PriorSpec::geometric(0.1, 0.2).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PriorSpec>(&json).unwrap(), p);
        let bad = r#"{"kind":"geometric","rho":1.5}"#;
        assert!(serde_json::from_str::<PriorSpec>(bad).is_err());
        let q_default: PriorSpec =
            serde_json::from_str(r#"{"kind":"polynomial_tail","beta":2.0}"#).unwrap();
        assert_eq!(q_default.q(), 0.0);
    }

    fn gaussian(streams: usize) -> ScenarioSpec {
        ScenarioSpec::Ar(vec![ArChannelSpec::white_gaussian(1.0).unwrap(); streams])
    }

    #[test]
    fn generate_rejects_empty_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate(&gaussian(2), None, 0, &mut rng).is_err());
    }

    #[test]
    fn change_beyond_horizon_matches_pure_noise_bitwise() {
        let scenario = gaussian(3);
        let change = ChangeSpec::new(50, vec![0, 2], vec![1.0, 2.0]).unwrap();
        let a = generate(
            &scenario,
            Some(&change),
            50,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = generate(&scenario, None, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mix = ScenarioSpec::Mixture(vec![
            MixtureChannelSpec::new(0.3, 4.0, 0.0, 1.0).unwrap();
            2
        ]);
        let change = ChangeSpec::new(20, vec![1], vec![1.0]).unwrap();
        let a = generate(&mix, Some(&change), 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = generate(&mix, None, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_amplitude_matches_no_change() {
        let scenario = ScenarioSpec::Ar(vec![
            ArChannelSpec::new(vec![0.5], 1.0, vec![1.0, -1.0]).unwrap()
        ]);
        let change = ChangeSpec::new(3, vec![0], vec![0.0]).unwrap();
        let a = generate(
            &scenario,
            Some(&change),
            30,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let b = generate(&scenario, None, 30, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn change_before_start_shifts_every_affected_sample() {
        let scenario = gaussian(2);
        let change = ChangeSpec::new(-1, vec![1], vec![5.0]).unwrap();
        let a = generate(
            &scenario,
            Some(&change),
            10,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = generate(&scenario, None, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for t in 1..=10 {
            assert_eq!(a.row(t)[0], b.row(t)[0]);
            assert!((a.row(t)[1] - b.row(t)[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_is_reproducible() {
        let scenario = gaussian(4);
        let change = ChangeSpec::new(5, vec![0, 1], vec![1.0, 1.0]).unwrap();
        let a = generate(
            &scenario,
            Some(&change),
            40,
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let b = generate(
            &scenario,
            Some(&change),
            40,
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn change_spec_validation() {
        assert!(ChangeSpec::new(0, vec![], vec![]).is_err());
        assert!(ChangeSpec::new(0, vec![1, 1], vec![1.0, 1.0]).is_err());
        let c = ChangeSpec::new(0, vec![2, 0], vec![2.0, 1.0]).unwrap();
        assert_eq!(c.subset, vec![0, 2]);
        assert_eq!(c.theta_of(2), Some(2.0));
        assert!(c.validate_for(2, 2).is_err());
        assert!(c.validate_for(3, 1).is_err());
        assert!(c.validate_for(3, 2).is_ok());
    }
}
