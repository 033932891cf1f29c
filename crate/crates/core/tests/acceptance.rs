//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use pipeharden::faults::{DisturbanceModel, Injection, LOCATIONS};
use pipeharden::fragility::{characterize, classify_fragility, phase_grid, FragilityClass, FragilityMetrics, TABLE};
use pipeharden::hardening::{HardeningConfig, HardeningMode};
use pipeharden::harness::{
    cdf_at, margin_grid, margin_sweep, recovery_latency_cdf, run_campaign, run_campaign_with_threads, spatial_heatmap,
    CampaignMetrics, CampaignSpec, InjectionPlan,
};
use pipeharden::pipeline::{BoundaryId, RunStatus, Simulation, StageId};
use pipeharden::tradeoff::{
    estimate_overhead, pareto_frontier, plan_under_budget, reliability_gain, OverheadCalibration, StageWeights,
    TradeoffPoint,
};
use pipeharden::workload::WorkloadSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const BER_MU_ABS: f64 = 0.005;
const BER_DPHI_REL: f64 = 0.10;
const BER_SIGMA_REL: f64 = 0.20;
const BER_SAMPLES: u64 = 10_000;
const BER_SWEEPS: usize = 50;
const BER_GRID_POINTS: usize = 1001;
const ANCHOR_EXACT: f64 = 1e-9;
const FRACTION_TOL: f64 = 0.02;
const CAMPAIGN_EVENTS: u64 = 100_000;
const LATENCY_MIN: u64 = 3;
const LATENCY_MAX: u64 = 9;
const MIN_RECOVERY_EVENTS: usize = 1_000;
const HEATMAP_TOL: f64 = 0.02;
const HEATMAP_MIN_EVENTS: u64 = 100_000;
const HEATMAP_RUNS: u64 = 25_000;
const HEATMAP_MARGIN: f64 = -0.3;
const SWEEP_POINTS: usize = 11;
const SWEEP_RUNS: u64 = 1_000;
const SWEEP_RANGE: (f64, f64) = (-0.25, 0.25);
const SWEEP_ANCHOR: (f64, f64) = (0.45, 0.55);
const NOISE_SIGMAS: f64 = 2.0;
const GAIN_DUP: f64 = 0.55;
const GAIN_TMR: f64 = 0.82;
const GAIN_TOL: f64 = 0.05;
const GOLDEN_PROGRAMS: u64 = 1_000;
const PLAN_SETTINGS: usize = 20;
const SEED: u64 = 2024;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn closure_ok(m: &CampaignMetrics) -> bool {
    m.counts.total() == m.injected_total
}

fn directed(config: HardeningConfig, boundaries: Vec<BoundaryId>) -> CampaignSpec {
    CampaignSpec {
        n_runs: CAMPAIGN_EVENTS,
        seed: SEED,
        injection: InjectionPlan::Directed { events_per_run: 1, boundaries },
        ..CampaignSpec::new(config, DisturbanceModel::paper())
    }
}

struct Suite {
    campaigns: Vec<CampaignMetrics>,
}

impl Suite {
    fn run(&mut self, spec: &CampaignSpec) -> CampaignMetrics {
        let m = run_campaign(spec).expect("valid campaign");
        self.campaigns.push(m.clone());
        m
    }

    fn fragility_classification(&mut self) -> Outcome {
        let expected = [
            FragilityClass::Low,
            FragilityClass::Low,
            FragilityClass::High,
            FragilityClass::High,
            FragilityClass::Moderate,
        ];
        let got: Vec<FragilityClass> = TABLE
            .iter()
            .map(|&(stage, slack, mu, delta_phi, sigma_phi, _)| {
                classify_fragility(&FragilityMetrics {
                    stage,
                    nominal_slack: slack,
                    mu,
                    delta_phi,
                    sigma_phi,
                    class: FragilityClass::Low,
                })
            })
            .collect();
        check(got == expected, format!("{got:?}"), format!("got {got:?}, expected {expected:?}"))
    }

    fn ber_round_trip(&mut self) -> Outcome {
        let phases = phase_grid(0.0, 1.0, BER_GRID_POINTS);
        let mut lines = Vec::new();
        let mut ok = true;
        for (i, m) in FragilityMetrics::table().iter().enumerate() {
            let (est, _) = characterize(
                &m.path_model(),
                m.nominal_slack,
                m.stage,
                &phases,
                BER_SAMPLES,
                BER_SWEEPS,
                SEED + i as u64,
            )
            .map_err(|e| format!("{}: {e}", m.stage))?;
            let dmu = (est.mu - m.mu).abs();
            let rdphi = (est.delta_phi / m.delta_phi - 1.0).abs();
            let rsig = (est.sigma_phi / m.sigma_phi - 1.0).abs();
            ok &= dmu <= BER_MU_ABS && rdphi <= BER_DPHI_REL && rsig <= BER_SIGMA_REL;
            lines.push(format!(
                "{} dmu={dmu:.4} dphi={:+.1}% sigma={:+.1}%",
                m.stage,
                100.0 * (est.delta_phi / m.delta_phi - 1.0),
                100.0 * (est.sigma_phi / m.sigma_phi - 1.0)
            ));
        }
        let s = lines.join("; ");
        check(ok, s.clone(), s)
    }

    fn overhead_anchors(&mut self) -> Outcome {
        let cal = OverheadCalibration::measured();
        let w = StageWeights::default();
        let e = |c: HardeningConfig| estimate_overhead(&c, &w, &cal).expect("calibrated");
        let d = e(HardeningConfig::selective_duplicate());
        let t = e(HardeningConfig::selective_tmr());
        let fd = e(HardeningConfig::full_duplicate());
        let ft = e(HardeningConfig::full_tmr());
        let ok = (d.area_frac - 0.23).abs() < ANCHOR_EXACT
            && (d.power_frac - 0.09).abs() < ANCHOR_EXACT
            && (t.area_frac - 0.58).abs() < ANCHOR_EXACT
            && (t.power_frac - 0.22).abs() < ANCHOR_EXACT
            && (0.80..=1.20).contains(&fd.area_frac)
            && (1.80..=2.50).contains(&ft.area_frac);
        let s = format!(
            "sel-dup ({:.4}, {:.4}) sel-tmr ({:.4}, {:.4}) full-dup area {:.3} full-tmr area {:.3}",
            d.area_frac, d.power_frac, t.area_frac, t.power_frac, fd.area_frac, ft.area_frac
        );
        check(ok, s.clone(), s)
    }

    fn campaign_fractions(&mut self) -> Outcome {
        let scope = vec![BoundaryId::ExMem, BoundaryId::MemWb];
        let dup = self.run(&directed(HardeningConfig::selective_duplicate(), scope.clone()));
        let tmr = self.run(&directed(HardeningConfig::selective_tmr(), scope.clone()));
        let base = self.run(&directed(HardeningConfig::baseline(), scope));
        let obs = dup.observability.unwrap_or(f64::NAN);
        let dmask = dup.masked_frac.unwrap_or(f64::NAN);
        let tdet = tmr.detected_frac.unwrap_or(f64::NAN);
        let tmask = tmr.masked_frac.unwrap_or(f64::NAN);
        let bobs = base.observability.unwrap_or(f64::NAN);
        let ok = dup.injected_total >= CAMPAIGN_EVENTS
            && (obs - 0.82).abs() <= FRACTION_TOL
            && dmask == 0.0
            && (tdet - 0.18).abs() <= FRACTION_TOL
            && (tmask - 0.75).abs() <= FRACTION_TOL
            && bobs == 0.0;
        let s = format!(
            "n={} dup obs={obs:.4} masked={dmask}; tmr detected={tdet:.4} masked={tmask:.4}; baseline obs={bobs}",
            dup.injected_total
        );
        check(ok, s.clone(), s)
    }

    fn all_boundary(&mut self, c: HardeningConfig) -> CampaignMetrics {
        let spec = directed(c, Vec::new());
        if let Some(m) = self
            .campaigns
            .iter()
            .find(|m| m.config == spec.config.name && m.comparability_key == spec.comparability_key())
        {
            return m.clone();
        }
        self.run(&spec)
    }

    fn recovery_latency(&mut self) -> Outcome {
        let dup = self.all_boundary(HardeningConfig::selective_duplicate());
        let tmr = self.all_boundary(HardeningConfig::selective_tmr());
        let mut notes = Vec::new();
        let mut ok = true;
        for m in [&dup, &tmr] {
            let trig = m.trigger_latencies.iter().all(|&t| t == 1);
            let lo = m.recovery_latencies.iter().min().copied().unwrap_or(0);
            let hi = m.recovery_latencies.iter().max().copied().unwrap_or(0);
            let n = m.recovery_latencies.len();
            ok &= trig && n >= MIN_RECOVERY_EVENTS && lo >= LATENCY_MIN && hi <= LATENCY_MAX;
            notes.push(format!("{} n={n} trigger=1:{trig} support [{lo}, {hi}]", m.config));
        }
        let (cd, ct) = match (recovery_latency_cdf(&dup), recovery_latency_cdf(&tmr)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err("no recovery events".into()),
        };
        let dominated: Vec<u64> = cd
            .iter()
            .map(|p| p.0)
            .filter(|x| ct.iter().any(|q| q.0 == *x))
            .filter(|&x| cdf_at(&ct, x) < cdf_at(&cd, x))
            .collect();
        ok &= dominated.is_empty();
        notes.push(format!("tmr cdf >= dup cdf at all common points: {}", dominated.is_empty()));
        let s = notes.join("; ");
        check(ok, s.clone(), s)
    }

    fn heatmap(&mut self) -> Outcome {
        let spec = CampaignSpec {
            n_runs: HEATMAP_RUNS,
            seed: SEED,
            margin: HEATMAP_MARGIN,
            ..CampaignSpec::new(HardeningConfig::baseline(), DisturbanceModel::paper())
        };
        self.campaigns.push(run_campaign(&spec).expect("valid campaign"));
        let h = spatial_heatmap(&spec).map_err(|e| e.to_string())?;
        let events: u64 = h.counts.iter().flatten().sum();
        let target = DisturbanceModel::paper().base_incidence;
        let mut worst = 0.0_f64;
        for b in 0..4 {
            for l in 0..LOCATIONS {
                worst = worst.max((h.matrix[b][l] - target[b][l]).abs());
            }
        }
        let row = h.matrix[BoundaryId::ExMem.index()];
        let monotone = row.windows(2).all(|w| w[1] >= w[0]);
        let ok = events >= HEATMAP_MIN_EVENTS && worst <= HEATMAP_TOL && monotone;
        let s = format!("events={events} max cell error={worst:.4} EX->MEM monotone={monotone}");
        check(ok, s.clone(), s)
    }

    fn margin_sweep(&mut self) -> Outcome {
        let base = CampaignSpec {
            n_runs: SWEEP_RUNS,
            seed: SEED,
            ..CampaignSpec::new(HardeningConfig::baseline(), DisturbanceModel::paper())
        };
        let grid = margin_grid(SWEEP_RANGE.0, SWEEP_RANGE.1, SWEEP_POINTS);
        let configs =
            [HardeningConfig::baseline(), HardeningConfig::selective_duplicate(), HardeningConfig::selective_tmr()];
        let sweep = margin_sweep(&base, &grid, &configs).map_err(|e| e.to_string())?;
        let p: Vec<Vec<f64>> = sweep
            .curves
            .iter()
            .map(|c| c.run_error_probability.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect();
        let se = |x: f64| (x * (1.0 - x) / SWEEP_RUNS as f64).sqrt();
        let slack = |a: f64, b: f64| NOISE_SIGMAS * (se(a).powi(2) + se(b).powi(2)).sqrt();
        let zero = grid.iter().position(|m| m.abs() < 1e-12).expect("grid contains 0");
        let anchor = p[0][zero];
        let mut ordered = true;
        let mut monotone = true;
        for i in 0..grid.len() {
            ordered &= p[0][i] + slack(p[0][i], p[1][i]) >= p[1][i];
            ordered &= p[1][i] + slack(p[1][i], p[2][i]) >= p[2][i];
            if i + 1 < grid.len() {
                for c in &p {
                    monotone &= c[i + 1] <= c[i] + slack(c[i], c[i + 1]);
                }
            }
        }
        let ok = (SWEEP_ANCHOR.0..=SWEEP_ANCHOR.1).contains(&anchor) && ordered && monotone;
        let s = format!("baseline@0={anchor:.3} ordering={ordered} monotone={monotone}");
        check(ok, s.clone(), s)
    }

    fn tradeoff(&mut self) -> Outcome {
        let base = self.all_boundary(HardeningConfig::baseline());
        let cal = OverheadCalibration::measured();
        let mut points = Vec::new();
        let mut gains = Vec::new();
        for c in HardeningConfig::canonical() {
            let m = self.all_boundary(c.clone());
            let g = reliability_gain(&m, &base).map_err(|e| e.to_string())?;
            let o = estimate_overhead(&c, &StageWeights::default(), &cal).map_err(|e| e.to_string())?;
            gains.push((c.name.clone(), g));
            points.push(TradeoffPoint { label: c.name.clone(), area_frac: o.area_frac, reliability_gain: g });
        }
        let g = |name: &str| gains.iter().find(|p| p.0 == name).map_or(f64::NAN, |p| p.1);
        let front = pareto_frontier(&points);
        let kept = |name: &str| front.iter().any(|p| p.label == name);
        let ok = (g("sel-dup") - GAIN_DUP).abs() <= GAIN_TOL
            && (g("sel-tmr") - GAIN_TMR).abs() <= GAIN_TOL
            && kept("sel-dup")
            && kept("sel-tmr");
        let s = format!(
            "gain sel-dup={:.4} sel-tmr={:.4}; frontier {:?}",
            g("sel-dup"),
            g("sel-tmr"),
            front.iter().map(|p| p.label.as_str()).collect::<Vec<_>>()
        );
        check(ok, s.clone(), s)
    }

    fn properties(&mut self) -> Outcome {
        let mut notes = Vec::new();
        // Golden equivalence under zero injection.
        let mut mismatches = 0;
        let zero = DisturbanceModel::zero();
        let configs = HardeningConfig::canonical();
        for i in 0..GOLDEN_PROGRAMS {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ i);
            let alu = rng.random_range(0.2..0.8);
            let mem = rng.random_range(0.0..(1.0 - alu));
            let spec = WorkloadSpec {
                length: rng.random_range(2..300),
                alu_frac: alu,
                mem_frac: mem,
                branch_frac: 1.0 - alu - mem,
            };
            let sim = Simulation::new(spec.generate(i), 100_000).expect("generated programs halt");
            let r = sim.run(&configs[(i % 5) as usize], &zero, &Injection::None, i);
            if r.status != RunStatus::Halted || r.final_state != sim.golden || r.retired != sim.golden_trace {
                mismatches += 1;
            }
        }
        notes.push(format!("golden mismatches {mismatches}/{GOLDEN_PROGRAMS}"));

        // Determinism across parallelism.
        let spec = CampaignSpec {
            n_runs: 300,
            seed: SEED,
            margin: -0.2,
            ..CampaignSpec::new(HardeningConfig::selective_tmr(), DisturbanceModel::paper())
        };
        let one = run_campaign_with_threads(&spec, 1).map_err(|e| e.to_string())?;
        let many = run_campaign_with_threads(&spec, 8).map_err(|e| e.to_string())?;
        let deterministic = serde_json::to_string(&one).unwrap() == serde_json::to_string(&many).unwrap();
        self.campaigns.push(one);
        notes.push(format!("deterministic 1 vs 8 threads: {deterministic}"));

        // Accounting closure on every campaign of this suite.
        let closed = self.campaigns.iter().all(closure_ok);
        notes.push(format!("accounting closed on {} campaigns: {closed}", self.campaigns.len()));

        // Planner against brute force.
        let mut plan_mismatch = 0;
        let cal = OverheadCalibration::measured();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        for _ in 0..PLAN_SETTINGS {
            let mut model = DisturbanceModel::paper();
            for row in model.base_incidence.iter_mut() {
                for w in row.iter_mut() {
                    *w = rng.random_range(0.0..0.5);
                }
            }
            let metrics: Vec<FragilityMetrics> = StageId::ALL
                .iter()
                .map(|&s| {
                    let mut m = FragilityMetrics::from_table(s);
                    m.delta_phi = rng.random_range(0.005..0.06);
                    m.sigma_phi = rng.random_range(0.001..0.02);
                    m
                })
                .collect();
            let (ba, bp) = (rng.random_range(0.0..2.6), rng.random_range(0.0..1.2));
            let plan = plan_under_budget(&metrics, ba, bp, &model, &cal).map_err(|e| e.to_string())?;
            let brute = brute_force(&metrics, ba, bp, &model, &cal);
            if plan.config.modes != brute {
                plan_mismatch += 1;
            }
        }
        notes.push(format!("plan mismatches {plan_mismatch}/{PLAN_SETTINGS}"));
        let ok = mismatches == 0 && deterministic && closed && plan_mismatch == 0;
        let s = notes.join("; ");
        check(ok, s.clone(), s)
    }
}

/// Straight enumeration with the predictor written out longhand.
fn brute_force(
    metrics: &[FragilityMetrics],
    budget_area: f64,
    budget_power: f64,
    model: &DisturbanceModel,
    cal: &OverheadCalibration,
) -> [HardeningMode; 5] {
    use HardeningMode::*;
    let rows: Vec<f64> = model.base_incidence.iter().map(|r| r.iter().sum()).collect();
    let mean = rows.iter().sum::<f64>() / 4.0;
    let drive = [rows[0], rows[1], rows[2], rows[3], mean];
    let weight: Vec<f64> = (0..5).map(|s| drive[s] * metrics[s].delta_phi * metrics[s].sigma_phi).collect();
    let cover = |m: HardeningMode| match m {
        Unhardened => 0.0,
        Duplicate => model.manifest_prob.tmr * (0.55 / 0.82),
        Tmr => model.manifest_prob.tmr,
    };
    let modes = [Unhardened, Duplicate, Tmr];
    let mut best: Option<([HardeningMode; 5], f64, f64)> = None;
    for a in modes {
        for b in modes {
            for c in modes {
                for d in modes {
                    for e in modes {
                        let m = [a, b, c, d, e];
                        let mut cfg = HardeningConfig::baseline();
                        cfg.modes = m;
                        let o = estimate_overhead(&cfg, &cal.weights, cal).unwrap();
                        if o.area_frac > budget_area + 1e-12 || o.power_frac > budget_power + 1e-12 {
                            continue;
                        }
                        let g = (0..5).map(|s| weight[s] * cover(m[s])).sum::<f64>() / weight.iter().sum::<f64>();
                        // Enumeration is already lexicographic, so only strict improvements replace.
                        let better = match best {
                            None => true,
                            Some((_, bg, ba)) => g > bg || (g == bg && o.area_frac < ba),
                        };
                        if better {
                            best = Some((m, g, o.area_frac));
                        }
                    }
                }
            }
        }
    }
    best.expect("baseline fits").0
}

fn main() {
    let mut suite = Suite { campaigns: Vec::new() };
    let criteria: Vec<(&str, fn(&mut Suite) -> Outcome)> = vec![
        ("fragility classification", Suite::fragility_classification),
        ("BER round-trip", Suite::ber_round_trip),
        ("overhead anchors", Suite::overhead_anchors),
        ("campaign fractions", Suite::campaign_fractions),
        ("recovery latency", Suite::recovery_latency),
        ("heatmap round-trip", Suite::heatmap),
        ("margin sweep", Suite::margin_sweep),
        ("trade-off reproduction", Suite::tradeoff),
        ("property suites", Suite::properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f(&mut suite);
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
