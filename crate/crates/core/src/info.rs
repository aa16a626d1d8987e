//! Kullback-Leibler information numbers and the delay constant `D_{μ,r}`.
//!
//! The left-tail and uniform-convergence conditions behind the first-order delay
//! formulas are not estimated here; only the LLR slope is checked numerically.

use crate::error::{QcdError, Result};
use crate::likelihood::{bits, SubsetWeights, BRUTE_FORCE_LIMIT};
use crate::model::ChangeSpec;
use crate::montecarlo::{run_replications, McConfig, McEstimate};
use crate::scenarios::{ObservationSampler, ScenarioSpec};
use crate::statistics::GridSpec;

/// Per-stream information `I_{i,θ_i}` (nats per observation) and prior tail rate `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNumbers {
    pub per_stream: Vec<f64>,
    pub mu: f64,
}

impl InfoNumbers {
    pub fn new(per_stream: Vec<f64>, mu: f64) -> Result<Self> {
        if per_stream
            .iter()
            .chain([&mu])
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(QcdError::invalid(
                "info",
                "information numbers and mu must be finite and nonnegative",
            ));
        }
        Ok(InfoNumbers { per_stream, mu })
    }

    /// Information of each stream of `scenario` at the parameter vector `theta`.
    pub fn for_scenario(scenario: &ScenarioSpec, theta: &[f64], mu: f64) -> Result<Self> {
        if theta.len() != scenario.streams() {
            return Err(QcdError::invalid("theta", "one value per stream required"));
        }
        let per_stream = theta
            .iter()
            .enumerate()
            .map(|(i, &t)| scenario.info(i, t))
            .collect();
        Self::new(per_stream, mu)
    }
}

/// `θ² Q / (2σ²)`.
pub fn kl_ar(theta: f64, q: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(QcdError::invalid(
            "sigma",
            format!("must be positive, got {sigma}"),
        ));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(QcdError::invalid("Q", format!("must be positive, got {q}")));
    }
    Ok(theta * theta * q / (2.0 * sigma * sigma))
}

/// `(θ - μ₂)² / (2σ²)`.
pub fn kl_mixture(theta: f64, mu2: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(QcdError::invalid(
            "sigma",
            format!("must be positive, got {sigma}"),
        ));
    }
    Ok((theta - mu2).powi(2) / (2.0 * sigma * sigma))
}

/// `I_B = Σ_{i∈B} I_i`.
pub fn kl_subset(subset: &[usize], per_stream: &[f64]) -> Result<f64> {
    if subset.is_empty() {
        return Err(QcdError::invalid("subset", "must be nonempty"));
    }
    subset
        .iter()
        .map(|&i| {
            per_stream
                .get(i)
                .copied()
                .ok_or_else(|| QcdError::invalid("subset", format!("stream {i} out of range")))
        })
        .sum()
}

/// `D_{μ,r} = Σ_B p_B Σ_θ w_θ (I_{B,θ} + μ)^-r`, with `info[g]` evaluated at grid point `g`.
pub fn d_constant(
    weights: &SubsetWeights,
    grid: &GridSpec,
    info: &[InfoNumbers],
    r: f64,
) -> Result<f64> {
    if info.len() != grid.len() {
        return Err(QcdError::invalid(
            "info",
            "one entry per grid point required",
        ));
    }
    if weights.streams() > BRUTE_FORCE_LIMIT {
        return Err(QcdError::TooManyStreams {
            streams: weights.streams(),
            limit: BRUTE_FORCE_LIMIT,
            what: "D constant",
        });
    }
    let subsets = weights.subsets()?;
    let mut total = 0.0;
    for (w_theta, inf) in grid.weights().iter().zip(info) {
        if inf.per_stream.len() != weights.streams() {
            return Err(QcdError::invalid("info", "one value per stream required"));
        }
        for &(mask, log_pb) in &subsets {
            let denom = bits(mask).map(|i| inf.per_stream[i]).sum::<f64>() + inf.mu;
            if denom <= 0.0 {
                return Err(QcdError::invalid(
                    "info",
                    format!("I_B + mu vanishes for subset mask {mask:#b}"),
                ));
            }
            total += w_theta * log_pb.exp() * denom.powf(-r);
        }
    }
    Ok(total)
}

/// Monte Carlo mean of `λ_B(0, n) / n` under a change at 0 in `subset` with `theta`.
pub fn estimate_kl_slope(
    scenario: &ScenarioSpec,
    subset: &[usize],
    theta: &[f64],
    n: usize,
    mc: &McConfig,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(QcdError::invalid("n", "must be at least 1"));
    }
    let change = ChangeSpec::new(0, subset.to_vec(), theta.to_vec())?;
    scenario.check_change(&change)?;
    let values = run_replications(mc, |_, rng| -> Result<f64> {
        let mut sampler = ObservationSampler::new(scenario, Some(&change), rng)?;
        let mut source = scenario.llr_source();
        let mut row = vec![0.0; scenario.streams()];
        let mut llr = 0.0;
        for _ in 0..n {
            sampler.next_into(rng, &mut row);
            source.observe(&row)?;
            llr += change
                .subset
                .iter()
                .zip(&change.theta)
                .map(|(&i, &t)| source.increment(i, t))
                .sum::<f64>();
        }
        Ok(llr / n as f64)
    })?
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_values(&values, 0))
}
