use std::path::{Path, PathBuf};

use qcd_core::detectors::{threshold_cost, threshold_shiryaev, threshold_sr};
use qcd_core::info::{d_constant, InfoNumbers};
use qcd_core::montecarlo::SweepTarget;
use qcd_core::{
    Detector, DetectorConfig, DetectorKind, GridSpec, McConfig, PriorSpec, ScenarioSpec,
    SubsetWeights,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Results directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub prior: PriorSpec,
    pub detector: DetectorSection,
    pub grid: GridSection,
    pub mc: McConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<ChangeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    /// Explicit `A`; otherwise calibrated from `[target]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default)]
    pub head_start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub putative_theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub points: Vec<Vec<f64>>,
    /// Defaults to equal weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Per-stream `p_i`; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    /// Largest affected subset; defaults to `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// Calibration target: a PFA level or a delay cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Cost `c` per unit of delay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default = "one")]
    pub r: f64,
    /// `D_{μ,r}`; computed from the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn default_moments() -> Vec<f64> {
    vec![1.0]
}

/// True change used by simulate and oc-sweep; `ν` is drawn from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeSection {
    pub subset: Vec<usize>,
    pub theta: Vec<f64>,
    /// Delay moment orders `r`.
    #[serde(default = "default_moments")]
    pub moments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
}

/// Threshold and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub threshold: f64,
    pub formula: String,
}

/// A config after cross-validation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: ScenarioSpec,
    pub prior: PriorSpec,
    pub weights: SubsetWeights,
    pub grid: GridSpec,
    pub mc: McConfig,
    pub detector: Detector,
    pub calibration: Calibration,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn weights(&self) -> Result<SubsetWeights, CliError> {
        let n = self.scenario.streams();
        let p = self.grid.p.clone().unwrap_or_else(|| vec![1.0; n]);
        if p.len() != n {
            return Err(CliError::Config(format!(
                "grid.p has {} entries for {n} streams",
                p.len()
            )));
        }
        Ok(SubsetWeights::new(p, self.grid.k.unwrap_or(n))?)
    }

    pub fn grid_spec(&self) -> Result<GridSpec, CliError> {
        let grid = match &self.grid.weights {
            Some(w) => GridSpec::new(self.grid.points.clone(), w.clone())?,
            None => GridSpec::uniform(self.grid.points.clone())?,
        };
        if grid.streams() != self.scenario.streams() {
            return Err(CliError::Config(format!(
                "grid points have {} entries for {} streams",
                grid.streams(),
                self.scenario.streams()
            )));
        }
        Ok(grid)
    }

    fn detector_config(&self, threshold: f64) -> DetectorConfig {
        DetectorConfig {
            kind: self.detector.kind,
            threshold,
            window: self.detector.window,
            head_start: self.detector.head_start,
            putative_theta: self.detector.putative_theta.clone(),
        }
    }

    /// Threshold from `[target]`.
    pub fn calibrate(
        &self,
        weights: &SubsetWeights,
        grid: &GridSpec,
    ) -> Result<Calibration, CliError> {
        let target = self
            .target
            .as_ref()
            .ok_or_else(|| CliError::Config("no [target] section to calibrate from".into()))?;
        let kind = self.detector.kind;
        match (target.alpha, target.cost) {
            (Some(alpha), None) => {
                if kind.is_shiryaev() {
                    Ok(Calibration {
                        threshold: threshold_shiryaev(alpha, self.prior.q())?,
                        formula: "A = (1 - alpha) / alpha".into(),
                    })
                } else {
                    Ok(Calibration {
                        threshold: threshold_sr(alpha, self.detector.head_start, &self.prior)?,
                        formula: "A = (omega b + mean(nu)) / alpha".into(),
                    })
                }
            }
            (None, Some(c)) => {
                let d = match target.d {
                    Some(d) => d,
                    None => self.d_constant(weights, grid, target.r)?,
                };
                let scale = match (target.scale, kind.is_shiryaev()) {
                    (Some(s), _) => Some(s),
                    (None, true) => None,
                    (None, false) => {
                        let mean = self.prior.mean().ok_or_else(|| {
                            CliError::Config("SR rules need a prior with finite mean".into())
                        })?;
                        Some(self.detector.head_start * self.prior.mass_after_zero() + mean)
                    }
                };
                Ok(Calibration {
                    threshold: threshold_cost(c, target.r, d, scale)?,
                    formula: format!(
                        "r D A (log A)^(r-1) = scale / c with r = {}, D = {d}, scale = {}",
                        target.r,
                        scale.unwrap_or(1.0)
                    ),
                })
            }
            _ => Err(CliError::Config(
                "[target] needs exactly one of alpha or cost".into(),
            )),
        }
    }

    /// `D_{μ,r}` with information numbers taken at each grid point.
    pub fn d_constant(
        &self,
        weights: &SubsetWeights,
        grid: &GridSpec,
        r: f64,
    ) -> Result<f64, CliError> {
        let mu = if self.detector.kind.is_shiryaev() {
            self.prior.tail_rate()
        } else {
            0.0
        };
        let info = grid
            .points()
            .iter()
            .map(|p| InfoNumbers::for_scenario(&self.scenario, p, mu))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(d_constant(weights, grid, &info, r)?)
    }

    /// `(B, θ)` of `[change]` with `I_{B,θ}`.
    pub fn sweep_target(&self) -> Result<SweepTarget, CliError> {
        let change = self
            .change
            .as_ref()
            .ok_or_else(|| CliError::Config("no [change] section".into()))?;
        let spec = qcd_core::ChangeSpec::new(0, change.subset.clone(), change.theta.clone())?;
        self.scenario.check_change(&spec)?;
        let info = spec
            .subset
            .iter()
            .zip(&spec.theta)
            .map(|(&i, &t)| self.scenario.info(i, t))
            .sum();
        Ok(SweepTarget {
            subset: spec.subset,
            theta: spec.theta,
            info,
        })
    }

    /// Cross-validates every section and builds the detector.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        self.mc.validate()?;
        let weights = self.weights()?;
        let grid = self.grid_spec()?;
        if !self.detector.kind.is_shiryaev() && self.prior.mean().is_none() {
            return Err(CliError::Config(
                "SR rules need a prior with finite mean".into(),
            ));
        }
        let calibration = match self.detector.threshold {
            Some(a) => Calibration {
                threshold: a,
                formula: "given".into(),
            },
            None => self.calibrate(&weights, &grid)?,
        };
        let detector = Detector::new(
            self.detector_config(calibration.threshold),
            self.prior,
            weights.clone(),
            grid.clone(),
        )?;
        if let Some(change) = &self.change {
            if change.moments.iter().any(|r| !(r.is_finite() && *r >= 1.0)) {
                return Err(CliError::Config("change.moments must all be >= 1".into()));
            }
            self.sweep_target()?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.alphas.is_empty() {
                return Err(CliError::Config("sweep.alphas is empty".into()));
            }
        }
        Ok(Resolved {
            scenario: self.scenario.clone(),
            prior: self.prior,
            weights,
            grid,
            mc: self.mc,
            detector,
            calibration,
        })
    }
}
