//! Implementation-overhead model, reliability gain, Pareto frontier and
//! budgeted hardening plans.
//!
//! Overhead of a configuration is
//!
//! ```text
//! cost = Σ_s w_s · ρ(mode_s) · (1 + γ · coverage^κ)
//! coverage = Σ_s w_s · [mode_s ≠ Unhardened]
//! ```
//!
//! with separate (ρd, ρt, γ) for area and power. The coverage term makes
//! whole-core schemes disproportionately expensive, as routing congestion
//! does. γ is fitted to the whole-core bands, then ρd and ρt follow exactly
//! from the two selective anchors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::DisturbanceModel;
use crate::fragility::FragilityMetrics;
use crate::hardening::{HardeningConfig, HardeningMode};
use crate::harness::CampaignMetrics;
use crate::pipeline::StageId;

/// Exponent of the coverage term.
pub const COVERAGE_EXPONENT: f64 = 2.0;
/// Upper end of the γ search interval.
pub const GAMMA_MAX: f64 = 10.0;
/// Coverage of duplication relative to TMR in the plan predictor: the
/// measured selective gains were 0.55 and 0.82.
pub const DUPLICATE_RELATIVE_COVERAGE: f64 = 0.55 / 0.82;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TradeoffError {
    #[error("overhead model is not calibrated")]
    UncalibratedModel,
    #[error("campaigns are not comparable: {0}")]
    IncomparableCampaigns(String),
    #[error("budget must be non-negative")]
    InvalidBudget,
    #[error("no fragility metrics for stage {0}")]
    MissingStage(StageId),
    #[error("stage weights must be positive and sum to 1")]
    InvalidWeights,
}

/// Relative implementation cost per stage, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights(pub [f64; 5]);

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights([0.15, 0.20, 0.30, 0.25, 0.10])
    }
}

impl StageWeights {
    pub fn validate(&self) -> Result<(), TradeoffError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().all(|&w| w > 0.0) && (sum - 1.0).abs() < 1e-9 {
            Ok(())
        } else {
            Err(TradeoffError::InvalidWeights)
        }
    }

    pub fn coverage(&self, config: &HardeningConfig) -> f64 {
        StageId::ALL.iter().filter(|s| config.mode(**s) != HardeningMode::Unhardened).map(|s| self.0[s.index()]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Congestion {
    Low,
    Moderate,
    High,
    VeryHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadEstimate {
    pub area_frac: f64,
    pub power_frac: f64,
    pub congestion: Congestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub rho_d: f64,
    pub rho_t: f64,
    pub gamma: f64,
}

impl CostCoefficients {
    fn is_valid(&self) -> bool {
        [self.rho_d, self.rho_t, self.gamma].iter().all(|v| v.is_finite() && *v >= 0.0) && self.rho_t >= self.rho_d
    }

    fn cost(&self, config: &HardeningConfig, w: &StageWeights, kappa: f64) -> f64 {
        let scale = 1.0 + self.gamma * w.coverage(config).powf(kappa);
        StageId::ALL
            .iter()
            .map(|s| {
                let rho = match config.mode(*s) {
                    HardeningMode::Unhardened => 0.0,
                    HardeningMode::Duplicate => self.rho_d,
                    HardeningMode::Tmr => self.rho_t,
                };
                w.0[s.index()] * rho * scale
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo - 1e-9 && v <= self.hi + 1e-9
    }

    fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn violation(&self, v: f64) -> f64 {
        (self.lo - v).max(v - self.hi).max(0.0)
    }
}

/// Fit targets for one cost metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAnchors {
    /// Exact value for EX+MEM duplication.
    pub selective_duplicate: f64,
    /// Exact value for EX+MEM TMR.
    pub selective_tmr: f64,
    pub full_duplicate: Band,
    pub full_tmr: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadCalibration {
    pub name: String,
    pub kappa: f64,
    pub weights: StageWeights,
    pub area: CostCoefficients,
    pub power: CostCoefficients,
    /// Whether each fitted metric lands inside its whole-core bands.
    pub area_bands_met: bool,
    pub power_bands_met: bool,
}

const AREA_FULL_DUP: Band = Band { lo: 0.80, hi: 1.20 };
const AREA_FULL_TMR: Band = Band { lo: 1.80, hi: 2.50 };
const POWER_FULL_DUP: Band = Band { lo: 0.40, hi: 0.70 };
const POWER_FULL_TMR: Band = Band { lo: 0.90, hi: 1.50 };

impl OverheadCalibration {
    /// Anchored on the measured selective overheads (area 0.23 / 0.58,
    /// power 0.09 / 0.22).
    pub fn measured() -> Self {
        Self::fit(
            "measured",
            StageWeights::default(),
            MetricAnchors {
                selective_duplicate: 0.23,
                selective_tmr: 0.58,
                full_duplicate: AREA_FULL_DUP,
                full_tmr: AREA_FULL_TMR,
            },
            MetricAnchors {
                selective_duplicate: 0.09,
                selective_tmr: 0.22,
                full_duplicate: POWER_FULL_DUP,
                full_tmr: POWER_FULL_TMR,
            },
        )
    }

    /// Anchored on the midpoints of the expected selective ranges.
    pub fn expected() -> Self {
        Self::fit(
            "expected",
            StageWeights::default(),
            MetricAnchors {
                selective_duplicate: 0.20,
                selective_tmr: 0.30,
                full_duplicate: AREA_FULL_DUP,
                full_tmr: AREA_FULL_TMR,
            },
            MetricAnchors {
                selective_duplicate: 0.13,
                selective_tmr: 0.20,
                full_duplicate: POWER_FULL_DUP,
                full_tmr: POWER_FULL_TMR,
            },
        )
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "measured" => Some(Self::measured()),
            "expected" => Some(Self::expected()),
            _ => None,
        }
    }

    pub fn fit(name: &str, weights: StageWeights, area: MetricAnchors, power: MetricAnchors) -> Self {
        let (a, a_ok) = fit_metric(&weights, &area, COVERAGE_EXPONENT);
        let (p, p_ok) = fit_metric(&weights, &power, COVERAGE_EXPONENT);
        OverheadCalibration {
            name: name.into(),
            kappa: COVERAGE_EXPONENT,
            weights,
            area: a,
            power: p,
            area_bands_met: a_ok,
            power_bands_met: p_ok,
        }
    }

    fn is_valid(&self) -> bool {
        self.area.is_valid() && self.power.is_valid() && self.kappa.is_finite() && self.weights.validate().is_ok()
    }
}

/// Least-squares γ against the band centres, with band violations
/// penalized, over `[0, GAMMA_MAX]`. Returns the coefficients and whether
/// both bands are met.
fn fit_metric(w: &StageWeights, a: &MetricAnchors, kappa: f64) -> (CostCoefficients, bool) {
    let sel = HardeningConfig::selective_duplicate();
    let c = w.coverage(&sel);
    let coeffs = |gamma: f64| {
        let k = c * (1.0 + gamma * c.powf(kappa));
        CostCoefficients { rho_d: a.selective_duplicate / k, rho_t: a.selective_tmr / k, gamma }
    };
    let full = |cc: &CostCoefficients| (cc.rho_d * (1.0 + cc.gamma), cc.rho_t * (1.0 + cc.gamma));
    let objective = |gamma: f64| {
        let (d, t) = full(&coeffs(gamma));
        let fit = (d - a.full_duplicate.mid()).powi(2) + (t - a.full_tmr.mid()).powi(2);
        let pen = a.full_duplicate.violation(d).powi(2) + a.full_tmr.violation(t).powi(2);
        fit + 1e6 * pen
    };
    // Dense grid, then golden-section refinement around the best point.
    const N: usize = 10_000;
    let step = GAMMA_MAX / N as f64;
    let best = (0..=N).map(|i| i as f64 * step).min_by(|x, y| objective(*x).total_cmp(&objective(*y))).unwrap_or(0.0);
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(GAMMA_MAX));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if objective(x1) <= objective(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let cc = coeffs(0.5 * (lo + hi));
    let (d, t) = full(&cc);
    (cc, a.full_duplicate.contains(d) && a.full_tmr.contains(t))
}

fn raw_overhead(config: &HardeningConfig, w: &StageWeights, cal: &OverheadCalibration) -> (f64, f64) {
    (cal.area.cost(config, w, cal.kappa), cal.power.cost(config, w, cal.kappa))
}

pub fn estimate_overhead(
    config: &HardeningConfig,
    weights: &StageWeights,
    calibration: &OverheadCalibration,
) -> Result<OverheadEstimate, TradeoffError> {
    if !calibration.is_valid() {
        return Err(TradeoffError::UncalibratedModel);
    }
    weights.validate()?;
    let (area, power) = raw_overhead(config, weights, calibration);
    let levels = [Congestion::Low, Congestion::Low, Congestion::Moderate, Congestion::High, Congestion::VeryHigh];
    let congestion = HardeningConfig::canonical()
        .iter()
        .zip(levels)
        .map(|(c, level)| ((raw_overhead(c, weights, calibration).0 - area).abs(), level))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, level)| level)
        .unwrap_or(Congestion::Low);
    Ok(OverheadEstimate { area_frac: area, power_frac: power, congestion })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub area_frac: f64,
    pub reliability_gain: f64,
}

/// `1 - unhandled(config) / unhandled(baseline)`, clamped to `[0, 1]`.
/// A baseline with no unhandled events leaves nothing to gain.
pub fn reliability_gain(config: &CampaignMetrics, baseline: &CampaignMetrics) -> Result<f64, TradeoffError> {
    if config.comparability_key != baseline.comparability_key {
        return Err(TradeoffError::IncomparableCampaigns(format!(
            "`{}` vs `{}`",
            config.comparability_key, baseline.comparability_key
        )));
    }
    let rb = baseline.unhandled_rate.unwrap_or(0.0);
    if rb <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - config.unhandled_rate.unwrap_or(0.0) / rb).clamp(0.0, 1.0))
}

fn dominates(a: &TradeoffPoint, b: &TradeoffPoint) -> bool {
    a.area_frac <= b.area_frac
        && a.reliability_gain >= b.reliability_gain
        && (a.area_frac < b.area_frac || a.reliability_gain > b.reliability_gain)
}

/// Non-dominated points sorted by area. Identical points are all kept.
pub fn pareto_frontier(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let mut front: Vec<TradeoffPoint> =
        points.iter().filter(|p| !points.iter().any(|q| dominates(q, p))).cloned().collect();
    front.sort_by(|a, b| {
        a.area_frac
            .total_cmp(&b.area_frac)
            .then(b.reliability_gain.total_cmp(&a.reliability_gain))
            .then(a.label.cmp(&b.label))
    });
    front
}

/// Closed-form gain predictor for the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPredictor {
    /// Relative incidence per stage.
    pub incidence: [f64; 5],
    /// Fraction of a stage's disturbances handled, per mode.
    pub coverage: [f64; 3],
}

impl GainPredictor {
    /// Stage incidence is the disturbance weight of the boundary the stage
    /// drives (WB: the mean boundary) scaled by its fragility `Δφ·σφ`.
    pub fn new(metrics: &[FragilityMetrics], model: &DisturbanceModel) -> Result<Self, TradeoffError> {
        let rows: Vec<f64> = model.base_incidence.iter().map(|r| r.iter().sum()).collect();
        let mean_row = rows.iter().sum::<f64>() / rows.len() as f64;
        let mut incidence = [0.0; 5];
        for s in StageId::ALL {
            let m = metrics.iter().find(|m| m.stage == s).ok_or(TradeoffError::MissingStage(s))?;
            let r = s.output_boundary().map_or(mean_row, |b| rows[b.index()]);
            incidence[s.index()] = r * m.delta_phi * m.sigma_phi;
        }
        let tmr = model.manifest_prob.tmr;
        Ok(GainPredictor { incidence, coverage: [0.0, tmr * DUPLICATE_RELATIVE_COVERAGE, tmr] })
    }

    pub fn predict(&self, config: &HardeningConfig) -> f64 {
        let total: f64 = self.incidence.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let covered: f64 =
            StageId::ALL.iter().map(|s| self.incidence[s.index()] * self.coverage[config.mode(*s) as usize]).sum();
        covered / total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub config: HardeningConfig,
    pub overhead: OverheadEstimate,
    pub predicted: TradeoffPoint,
    /// Only the baseline fits the budget.
    pub infeasible: bool,
}

/// Every one of the 3^5 per-stage mode assignments, in lexicographic
/// order (Unhardened < Duplicate < Tmr, IF most significant).
pub fn all_configs() -> Vec<HardeningConfig> {
    (0..243)
        .map(|mut n: usize| {
            let mut modes = [HardeningMode::Unhardened; 5];
            for m in modes.iter_mut().rev() {
                *m = HardeningMode::ALL[n % 3];
                n /= 3;
            }
            let mut c = HardeningConfig { modes, ..HardeningConfig::baseline() };
            c.name = c.mode_string();
            c
        })
        .collect()
}

/// Exhaustive search for the highest predicted gain within budget. Ties go
/// to lower area, then to lexicographic mode order.
pub fn plan_under_budget(
    metrics: &[FragilityMetrics],
    budget_area: f64,
    budget_power: f64,
    model: &DisturbanceModel,
    calibration: &OverheadCalibration,
) -> Result<Plan, TradeoffError> {
    if !(budget_area >= 0.0 && budget_power >= 0.0) {
        return Err(TradeoffError::InvalidBudget);
    }
    let predictor = GainPredictor::new(metrics, model)?;
    let weights = calibration.weights;
    let mut best: Option<(HardeningConfig, OverheadEstimate, f64)> = None;
    for c in all_configs() {
        let o = estimate_overhead(&c, &weights, calibration)?;
        if o.area_frac > budget_area + 1e-12 || o.power_frac > budget_power + 1e-12 {
            continue;
        }
        let g = predictor.predict(&c);
        let better = match &best {
            None => true,
            Some((bc, bo, bg)) => {
                g > *bg
                    || (g == *bg && (o.area_frac < bo.area_frac || (o.area_frac == bo.area_frac && c.modes < bc.modes)))
            }
        };
        if better {
            best = Some((c, o, g));
        }
    }
    let (mut config, overhead, gain) = best.expect("the baseline always fits a non-negative budget");
    let infeasible = config.is_baseline();
    if infeasible {
        config = HardeningConfig::baseline();
    }
    Ok(Plan {
        predicted: TradeoffPoint { label: config.name.clone(), area_frac: overhead.area_frac, reliability_gain: gain },
        config,
        overhead,
        infeasible,
    })
}
