//! Per-stream LLR increments and subset-mixture likelihood ratios.
//!
//! With factorized subset weights `p_B = C(P_K) ∏_{i∈B} p_i` the mixture over all
//! subsets of size at most `K` is `C · Σ_{j=1}^K e_j(p_1 LR_1, ..., p_N LR_N)`, where
//! `e_j` are elementary symmetric polynomials. That is `O(N K)` instead of `O(2^N)`.

use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::numerics::{log_add_exp, log_sum_exp};

/// Largest stream count for which per-subset state is kept explicitly.
pub const ENUMERATION_LIMIT: usize = 12;

/// Largest stream count accepted by the brute-force subset enumeration.
pub const BRUTE_FORCE_LIMIT: usize = 25;

/// Source of per-observation log-likelihood ratios `log L_{i,θ}(t)`.
///
/// Implementations hold the stream histories they need; `observe` advances them by
/// one observation vector and `increment` reads the LLR of that observation.
pub trait LlrSource: Send {
    fn streams(&self) -> usize;

    fn observe(&mut self, x: &[f64]) -> Result<()>;

    /// `log f_{i,θ}(x_i(t) | past) - log g_i(x_i(t) | past)` for the last observation.
    fn increment(&self, stream: usize, theta: f64) -> f64;

    fn reset(&mut self);

    /// Whether the post-change conditional density ignores the change point.
    /// Both the recursive and the cumulative-sum evaluation require this.
    fn change_point_independent(&self) -> bool {
        true
    }
}

/// Elementary symmetric polynomials `e_0..=e_K` of `values`.
pub fn elementary_symmetric(values: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(values.len(), k)?;
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for (i, &v) in values.iter().enumerate() {
        for j in (1..=k.min(i + 1)).rev() {
            e[j] += v * e[j - 1];
        }
    }
    Ok(e)
}

/// `log e_0..=log e_K` from the logs of the inputs.
pub fn log_elementary_symmetric(log_values: &[f64], k: usize) -> Vec<f64> {
    let mut e = vec![f64::NEG_INFINITY; k + 1];
    e[0] = 0.0;
    for (i, &v) in log_values.iter().enumerate() {
        for j in (1..=k.min(i + 1)).rev() {
            e[j] = log_add_exp(e[j], v + e[j - 1]);
        }
    }
    e
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(QcdError::invalid(
            "K",
            format!("must satisfy 1 <= K <= N = {n}, got {k}"),
        ));
    }
    Ok(())
}

/// Per-stream weights `p_i` and the cap `K` on the number of affected streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct SubsetWeights {
    p: Vec<f64>,
    k: usize,
    log_p: Vec<f64>,
    log_normalizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsRepr {
    p: Vec<f64>,
    k: usize,
}

impl TryFrom<WeightsRepr> for SubsetWeights {
    type Error = QcdError;

    fn try_from(r: WeightsRepr) -> Result<Self> {
        SubsetWeights::new(r.p, r.k)
    }
}

impl From<SubsetWeights> for WeightsRepr {
    fn from(w: SubsetWeights) -> Self {
        WeightsRepr { p: w.p, k: w.k }
    }
}

impl SubsetWeights {
    pub fn new(p: Vec<f64>, k: usize) -> Result<Self> {
        check_k(p.len(), k)?;
        if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(QcdError::invalid(
                "p",
                format!("weights must be positive, got {bad}"),
            ));
        }
        let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let e = log_elementary_symmetric(&log_p, k);
        let log_normalizer = -log_sum_exp(&e[1..]);
        Ok(SubsetWeights {
            p,
            k,
            log_p,
            log_normalizer,
        })
    }

    /// `p_i = 1` for every stream.
    pub fn uniform(streams: usize, k: usize) -> Result<Self> {
        Self::new(vec![1.0; streams], k)
    }

    pub fn streams(&self) -> usize {
        self.p.len()
    }

    pub fn max_affected(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn log_p(&self) -> &[f64] {
        &self.log_p
    }

    /// `C(P_K)`.
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// `log p_B` for the subset encoded by `mask`.
    pub fn log_subset_weight(&self, mask: u64) -> f64 {
        self.log_normalizer + bits(mask).map(|i| self.log_p[i]).sum::<f64>()
    }

    /// Every admissible subset with its log weight, ordered by mask.
    pub fn subsets(&self) -> Result<Vec<(u64, f64)>> {
        let n = self.streams();
        if n > BRUTE_FORCE_LIMIT {
            return Err(QcdError::TooManyStreams {
                streams: n,
                limit: BRUTE_FORCE_LIMIT,
                what: "subset enumeration",
            });
        }
        Ok((1u64..1 << n)
            .filter(|m| m.count_ones() as usize <= self.k)
            .map(|m| (m, self.log_subset_weight(m)))
            .collect())
    }
}

/// Indices of the set bits of `mask`.
pub fn bits(mask: u64) -> impl Iterator<Item = usize> {
    let mut m = mask;
    std::iter::from_fn(move || {
        if m == 0 {
            None
        } else {
            let i = m.trailing_zeros() as usize;
            m &= m - 1;
            Some(i)
        }
    })
}

/// `C(P_K) = [Σ_{j=1}^K e_j(p)]^-1`.
pub fn normalizer(p: &[f64], k: usize) -> Result<f64> {
    Ok(SubsetWeights::new(p.to_vec(), k)?.normalizer())
}

/// `log Λ = log Σ_{B∈P_K} p_B ∏_{i∈B} LR_i` through the elementary symmetric DP.
pub fn mixture_lr_dp(stream_log_lrs: &[f64], weights: &SubsetWeights) -> Result<f64> {
    if stream_log_lrs.len() != weights.streams() {
        return Err(QcdError::invalid(
            "stream_log_lrs",
            "length differs from stream count",
        ));
    }
    if stream_log_lrs.iter().any(|v| !v.is_finite()) {
        return Err(QcdError::NonFinite("stream log likelihood ratio".into()));
    }
    Ok(mixture_lr_dp_unchecked(stream_log_lrs, weights))
}

#[inline]
pub(crate) fn mixture_lr_dp_unchecked(stream_log_lrs: &[f64], weights: &SubsetWeights) -> f64 {
    let k = weights.k;
    let mut e = [f64::NEG_INFINITY; 64];
    let e = if k < 64 {
        &mut e[..=k]
    } else {
        return mixture_lr_dp_alloc(stream_log_lrs, weights);
    };
    e[0] = 0.0;
    for (i, (&l, &lp)) in stream_log_lrs.iter().zip(&weights.log_p).enumerate() {
        let v = l + lp;
        for j in (1..=k.min(i + 1)).rev() {
            e[j] = log_add_exp(e[j], v + e[j - 1]);
        }
    }
    log_sum_exp(&e[1..]) + weights.log_normalizer
}

fn mixture_lr_dp_alloc(stream_log_lrs: &[f64], weights: &SubsetWeights) -> f64 {
    let y: Vec<f64> = stream_log_lrs
        .iter()
        .zip(&weights.log_p)
        .map(|(l, p)| l + p)
        .collect();
    let e = log_elementary_symmetric(&y, weights.k);
    log_sum_exp(&e[1..]) + weights.log_normalizer
}

/// The same mixture by visiting every subset; exponential in `N`.
pub fn mixture_lr_enumerate(stream_log_lrs: &[f64], weights: &SubsetWeights) -> Result<f64> {
    let n = stream_log_lrs.len();
    if n != weights.streams() {
        return Err(QcdError::invalid(
            "stream_log_lrs",
            "length differs from stream count",
        ));
    }
    if n > BRUTE_FORCE_LIMIT {
        return Err(QcdError::TooManyStreams {
            streams: n,
            limit: BRUTE_FORCE_LIMIT,
            what: "subset enumeration",
        });
    }
    let mut num = f64::NEG_INFINITY;
    let mut den = f64::NEG_INFINITY;
    for mask in 1u64..1 << n {
        if mask.count_ones() as usize > weights.k {
            continue;
        }
        let mut log_prod_p = 0.0;
        let mut log_lr = 0.0;
        for i in bits(mask) {
            log_prod_p += weights.p[i].ln();
            log_lr += stream_log_lrs[i];
        }
        num = log_add_exp(num, log_prod_p + log_lr);
        den = log_add_exp(den, log_prod_p);
    }
    Ok(num - den)
}
