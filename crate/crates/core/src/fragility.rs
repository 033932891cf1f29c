//! Timing-fragility characterization from phase-swept BER curves.
//!
//! A path is modeled by a logistic BER transition: sampling before the data
//! settles fails (BER near 1), sampling after it passes (BER near 0). Each
//! sweep draws its own midpoint, so repeated sweeps expose the midpoint
//! spread `sigma_phi` on top of the intra-sweep width `delta_phi`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardening::{HardeningConfig, HardeningMode};
use crate::pipeline::StageId;

/// Δφ below this is Low fragility.
pub const LOW_MAX_DELTA_PHI: f64 = 0.020;
/// Δφ above this is High fragility.
pub const HIGH_MIN_DELTA_PHI: f64 = 0.035;
/// Midpoint spread that promotes a stage sitting exactly on a threshold.
pub const TIE_PROMOTE_SIGMA: f64 = 0.010;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FragilityError {
    #[error("BER curve never crosses {0}")]
    TransitionNotCovered(f64),
    #[error("BER curve is not monotone (rise of {0:.3})")]
    DegenerateCurve(f64),
    #[error("need at least two curves, got {0}")]
    TooFewCurves(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FragilityClass {
    Low,
    Moderate,
    High,
}

impl FragilityClass {
    fn promote(self) -> Self {
        match self {
            FragilityClass::Low => FragilityClass::Moderate,
            _ => FragilityClass::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTimingModel {
    /// True transition midpoint, φ units.
    pub mu: f64,
    /// 10%–90% transition width within one sweep.
    pub intra_width: f64,
    /// Standard deviation of the midpoint across sweeps.
    pub sigma_phi: f64,
}

impl PathTimingModel {
    /// Logistic scale giving a 10%–90% width of `intra_width`.
    pub fn scale(&self) -> f64 {
        self.intra_width / (2.0 * 9f64.ln())
    }

    /// Expected BER at `phi` for a sweep whose midpoint is `mid`.
    pub fn ber_at(&self, mid: f64, phi: f64) -> f64 {
        1.0 / (1.0 + ((phi - mid) / self.scale()).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BERCurve {
    pub phases: Vec<f64>,
    pub ber: Vec<f64>,
    pub samples_per_point: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragilityMetrics {
    pub stage: StageId,
    pub nominal_slack: f64,
    pub mu: f64,
    pub delta_phi: f64,
    pub sigma_phi: f64,
    pub class: FragilityClass,
}

/// Measured per-stage characterization: slack (ns), μ, Δφ, σφ, class.
pub const TABLE: [(StageId, f64, f64, f64, f64, FragilityClass); 5] = [
    (StageId::If, 0.46, 0.48, 0.015, 0.003, FragilityClass::Low),
    (StageId::Id, 0.41, 0.51, 0.019, 0.005, FragilityClass::Low),
    (StageId::Ex, 0.33, 0.57, 0.041, 0.014, FragilityClass::High),
    (StageId::Mem, 0.36, 0.60, 0.046, 0.017, FragilityClass::High),
    (StageId::Wb, 0.43, 0.53, 0.022, 0.006, FragilityClass::Moderate),
];

impl FragilityMetrics {
    /// Reference metrics for `stage`, classified by [`classify_fragility`].
    pub fn from_table(stage: StageId) -> Self {
        let (_, slack, mu, dphi, sigma, _) = TABLE[stage.index()];
        let mut m = FragilityMetrics {
            stage,
            nominal_slack: slack,
            mu,
            delta_phi: dphi,
            sigma_phi: sigma,
            class: FragilityClass::Low,
        };
        m.class = classify_fragility(&m);
        m
    }

    pub fn table() -> [FragilityMetrics; 5] {
        StageId::ALL.map(FragilityMetrics::from_table)
    }

    pub fn path_model(&self) -> PathTimingModel {
        PathTimingModel { mu: self.mu, intra_width: self.delta_phi, sigma_phi: self.sigma_phi }
    }
}

/// `n` evenly spaced phases covering `[lo, hi]`.
pub fn phase_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// One phase sweep with its own midpoint draw.
pub fn sweep_ber<R: Rng>(path: &PathTimingModel, phases: &[f64], samples_per_point: u64, rng: &mut R) -> BERCurve {
    let samples = samples_per_point.max(1);
    let mid = if path.sigma_phi > 0.0 {
        Normal::new(path.mu, path.sigma_phi).expect("finite sigma").sample(rng)
    } else {
        path.mu
    };
    let ber = phases
        .iter()
        .map(|&phi| {
            let p = path.ber_at(mid, phi);
            let k = Binomial::new(samples, p).expect("p in [0, 1]").sample(rng);
            k as f64 / samples as f64
        })
        .collect();
    BERCurve { phases: phases.to_vec(), ber, samples_per_point: samples }
}

/// Phase where a descending curve crosses `level`, by linear
/// interpolation. Noise-induced multiple crossings are averaged.
pub fn crossing(curve: &BERCurve, level: f64) -> Result<f64, FragilityError> {
    let (p, b) = (&curve.phases, &curve.ber);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..b.len().saturating_sub(1) {
        if b[i] >= level && b[i + 1] < level {
            let t = (b[i] - level) / (b[i] - b[i + 1]);
            sum += p[i] + t * (p[i + 1] - p[i]);
            n += 1;
        }
    }
    if n == 0 {
        Err(FragilityError::TransitionNotCovered(level))
    } else {
        Ok(sum / n as f64)
    }
}

/// Largest rise above the running minimum, allowed before a curve is
/// rejected as non-monotone.
const MONOTONE_TOLERANCE: f64 = 0.2;

fn check_curve(curve: &BERCurve) -> Result<(), FragilityError> {
    let first = curve.ber.first().copied().unwrap_or(0.0);
    let last = curve.ber.last().copied().unwrap_or(1.0);
    if first < 0.9 {
        return Err(FragilityError::TransitionNotCovered(0.9));
    }
    if last > 0.1 {
        return Err(FragilityError::TransitionNotCovered(0.1));
    }
    let mut min = f64::INFINITY;
    for &v in &curve.ber {
        min = min.min(v);
        if v - min > MONOTONE_TOLERANCE {
            return Err(FragilityError::DegenerateCurve(v - min));
        }
    }
    Ok(())
}

/// Reduce repeated sweeps of one path to fragility metrics.
pub fn extract_metrics(
    curves: &[BERCurve],
    nominal_slack: f64,
    stage: StageId,
) -> Result<FragilityMetrics, FragilityError> {
    if curves.len() < 2 {
        return Err(FragilityError::TooFewCurves(curves.len()));
    }
    let mut mids = Vec::with_capacity(curves.len());
    let mut widths = Vec::with_capacity(curves.len());
    for c in curves {
        check_curve(c)?;
        mids.push(crossing(c, 0.5)?);
        widths.push(crossing(c, 0.1)? - crossing(c, 0.9)?);
    }
    let n = mids.len() as f64;
    let mu = mids.iter().sum::<f64>() / n;
    let var = mids.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (n - 1.0);
    let mut m = FragilityMetrics {
        stage,
        nominal_slack,
        mu,
        delta_phi: widths.iter().sum::<f64>() / n,
        sigma_phi: var.sqrt(),
        class: FragilityClass::Low,
    };
    m.class = classify_fragility(&m);
    Ok(m)
}

/// Run `sweeps` seeded phase sweeps of `path` and extract its metrics.
pub fn characterize(
    path: &PathTimingModel,
    nominal_slack: f64,
    stage: StageId,
    phases: &[f64],
    samples_per_point: u64,
    sweeps: usize,
    seed: u64,
) -> Result<(FragilityMetrics, Vec<BERCurve>), FragilityError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves: Vec<BERCurve> = (0..sweeps).map(|_| sweep_ber(path, phases, samples_per_point, &mut rng)).collect();
    Ok((extract_metrics(&curves, nominal_slack, stage)?, curves))
}

pub fn classify_fragility(m: &FragilityMetrics) -> FragilityClass {
    const EPS: f64 = 1e-12;
    let d = m.delta_phi;
    let at = |t: f64| (d - t).abs() <= EPS;
    let promote = m.sigma_phi >= TIE_PROMOTE_SIGMA;
    if at(LOW_MAX_DELTA_PHI) {
        if promote {
            FragilityClass::Moderate
        } else {
            FragilityClass::Low
        }
    } else if at(HIGH_MIN_DELTA_PHI) {
        if promote {
            FragilityClass::Moderate.promote()
        } else {
            FragilityClass::Moderate
        }
    } else if d < LOW_MAX_DELTA_PHI {
        FragilityClass::Low
    } else if d > HIGH_MIN_DELTA_PHI {
        FragilityClass::High
    } else {
        FragilityClass::Moderate
    }
}

/// High → TMR (or duplication when `prefer_detection`), Moderate →
/// duplication, Low → unhardened.
pub fn recommend_hardening(metrics: &[FragilityMetrics], prefer_detection: bool) -> HardeningConfig {
    let mut config = HardeningConfig::baseline();
    config.name = "recommended".into();
    for m in metrics {
        config.modes[m.stage.index()] = match m.class {
            FragilityClass::Low => HardeningMode::Unhardened,
            FragilityClass::Moderate => HardeningMode::Duplicate,
            FragilityClass::High if prefer_detection => HardeningMode::Duplicate,
            FragilityClass::High => HardeningMode::Tmr,
        };
    }
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(dphi: f64, sigma: f64) -> FragilityMetrics {
        FragilityMetrics {
            stage: StageId::Ex,
            nominal_slack: 0.4,
            mu: 0.5,
            delta_phi: dphi,
            sigma_phi: sigma,
            class: FragilityClass::Low,
        }
    }

    #[test]
    fn classifies_reference_rows() {
        for (stage, _, _, _, _, class) in TABLE {
            assert_eq!(FragilityMetrics::from_table(stage).class, class, "{stage}");
        }
        assert_eq!(classify_fragility(&metrics(0.015, 0.003)), FragilityClass::Low);
        assert_eq!(classify_fragility(&metrics(0.041, 0.014)), FragilityClass::High);
        assert_eq!(classify_fragility(&metrics(0.022, 0.006)), FragilityClass::Moderate);
    }

    #[test]
    fn threshold_ties_use_sigma() {
        assert_eq!(classify_fragility(&metrics(0.020, 0.005)), FragilityClass::Low);
        assert_eq!(classify_fragility(&metrics(0.020, 0.010)), FragilityClass::Moderate);
        assert_eq!(classify_fragility(&metrics(0.035, 0.005)), FragilityClass::Moderate);
        assert_eq!(classify_fragility(&metrics(0.035, 0.012)), FragilityClass::High);
    }

    #[test]
    fn midpoint_is_half() {
        let p = PathTimingModel { mu: 0.57, intra_width: 0.041, sigma_phi: 0.0 };
        assert!((p.ber_at(p.mu, p.mu) - 0.5).abs() < 1e-15);
        assert!(p.ber_at(p.mu, p.mu + 10.0 * p.intra_width) < 1e-8);
        // width between the 90% and 10% points
        let s = p.scale();
        let lo = p.mu - s * 9f64.ln();
        let hi = p.mu + s * 9f64.ln();
        assert!((p.ber_at(p.mu, lo) - 0.9).abs() < 1e-12);
        assert!((hi - lo - 0.041).abs() < 1e-12);
    }

    #[test]
    fn noiseless_large_sample_midpoint() {
        let p = PathTimingModel { mu: 0.57, intra_width: 0.041, sigma_phi: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = sweep_ber(&p, &[0.57], 4_000_000, &mut rng);
        assert!((c.ber[0] - 0.5).abs() < 0.002);
    }

    #[test]
    fn identical_curves_have_zero_sigma() {
        let p = PathTimingModel { mu: 0.48, intra_width: 0.015, sigma_phi: 0.0 };
        let grid = phase_grid(0.3, 0.7, 801);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sweep_ber(&p, &grid, 1_000_000_000, &mut rng);
        let m = extract_metrics(&[c.clone(), c], 0.46, StageId::If).unwrap();
        assert_eq!(m.sigma_phi, 0.0);
        assert!((m.mu - 0.48).abs() < 1e-3);
        assert!((m.delta_phi - 0.015).abs() / 0.015 < 0.02);
        assert_eq!(m.class, FragilityClass::Low);
    }

    #[test]
    fn pinned_curve_is_rejected() {
        let c = BERCurve { phases: phase_grid(0.0, 1.0, 11), ber: vec![1.0; 11], samples_per_point: 10 };
        assert!(matches!(
            extract_metrics(&[c.clone(), c], 0.4, StageId::If),
            Err(FragilityError::TransitionNotCovered(_))
        ));
    }

    #[test]
    fn bumpy_curve_is_degenerate() {
        let mut ber: Vec<f64> = (0..11).map(|i| 1.0 - i as f64 / 10.0).collect();
        ber[8] = 0.9;
        let c = BERCurve { phases: phase_grid(0.0, 1.0, 11), ber, samples_per_point: 10 };
        assert!(matches!(extract_metrics(&[c.clone(), c], 0.4, StageId::If), Err(FragilityError::DegenerateCurve(_))));
    }

    #[test]
    fn recommendation_rules() {
        let rec = recommend_hardening(&FragilityMetrics::table(), false);
        assert_eq!(rec.mode_string(), "UUTTD");
        assert_eq!(recommend_hardening(&FragilityMetrics::table(), true).mode_string(), "UUDDD");
        let all = |d: f64| {
            StageId::ALL.map(|s| {
                let m = FragilityMetrics { stage: s, ..metrics(d, 0.001) };
                FragilityMetrics { class: classify_fragility(&m), ..m }
            })
        };
        assert!(recommend_hardening(&all(0.01), false).is_baseline());
        assert_eq!(recommend_hardening(&all(0.05), false).mode_string(), "TTTTT");
    }
}
