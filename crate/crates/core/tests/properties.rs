use proptest::prelude::*;

use pipeharden::faults::{DisturbanceModel, Injection};
use pipeharden::fragility::FragilityMetrics;
use pipeharden::hardening::{HardeningConfig, HardeningMode};
use pipeharden::harness::{run_campaign, run_campaign_with_threads, CampaignSpec, InjectionPlan, WorkloadSource};
use pipeharden::isa::{decode, AluOp, BranchCond, Instruction};
use pipeharden::pipeline::{RunStatus, Simulation};
use pipeharden::tradeoff::{
    all_configs, estimate_overhead, pareto_frontier, plan_under_budget, GainPredictor, OverheadCalibration,
    TradeoffPoint,
};
use pipeharden::workload::WorkloadSpec;

fn reg() -> impl Strategy<Value = u8> {
    0u8..32
}

fn imm12() -> impl Strategy<Value = i32> {
    -2048i32..=2047
}

fn instruction() -> impl Strategy<Value = Instruction> {
    let alu = prop::sample::select(AluOp::ALL.to_vec());
    let imm_op = prop::sample::select(AluOp::ALL.iter().copied().filter(|o| *o != AluOp::Sub).collect::<Vec<_>>());
    let cond = prop::sample::select(vec![BranchCond::Eq, BranchCond::Ne]);
    prop_oneof![
        Just(Instruction::Nop),
        (alu, reg(), reg(), reg()).prop_map(|(op, rd, rs1, rs2)| Instruction::Alu { op, rd, rs1, rs2 }),
        (imm_op, reg(), reg(), imm12())
            .prop_filter("canonical nop", |(op, rd, rs1, imm)| !(*op == AluOp::Add
                && *rd == 0
                && *rs1 == 0
                && *imm == 0))
            .prop_map(|(op, rd, rs1, imm)| Instruction::AluImm { op, rd, rs1, imm }),
        (reg(), reg(), imm12()).prop_map(|(rd, rs1, imm)| Instruction::Load { rd, rs1, imm }),
        (reg(), reg(), imm12()).prop_map(|(rs1, rs2, imm)| Instruction::Store { rs1, rs2, imm }),
        (cond, reg(), reg(), -2048i32..=2047).prop_map(|(cond, rs1, rs2, h)| Instruction::Branch {
            cond,
            rs1,
            rs2,
            imm: h * 2
        }),
        (reg(), -(1i32 << 19)..(1i32 << 19)).prop_map(|(rd, h)| Instruction::Jal { rd, imm: h * 2 }),
        (reg(), any::<u32>()).prop_map(|(rd, v)| Instruction::Lui { rd, imm: (v & !0xFFF) as i32 }),
    ]
}

fn mode() -> impl Strategy<Value = HardeningMode> {
    prop::sample::select(HardeningMode::ALL.to_vec())
}

fn config() -> impl Strategy<Value = HardeningConfig> {
    prop::array::uniform5(mode()).prop_map(|modes| {
        let mut c = HardeningConfig::baseline();
        c.modes = modes;
        c.name = c.mode_string();
        c
    })
}

fn workload() -> impl Strategy<Value = WorkloadSpec> {
    (2usize..250, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(length, a, m)| {
        let alu = a;
        let mem = (1.0 - alu) * m;
        WorkloadSpec { length, alu_frac: alu, mem_frac: mem, branch_frac: 1.0 - alu - mem }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trip(i in instruction()) {
        let w = i.encode().unwrap();
        prop_assert_eq!(decode(w).unwrap(), i);
    }

    #[test]
    fn decode_encode_is_stable(w in any::<u32>()) {
        if let Ok(i) = decode(w) {
            prop_assert_eq!(decode(i.encode().unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn pipeline_matches_golden_without_injection(spec in workload(), seed in any::<u64>(), c in config()) {
        let sim = Simulation::new(spec.generate(seed), 100_000).unwrap();
        let r = sim.run(&c, &DisturbanceModel::zero(), &Injection::None, seed);
        prop_assert_eq!(r.status, RunStatus::Halted);
        prop_assert_eq!(&r.final_state, &sim.golden);
        prop_assert_eq!(&r.retired, &sim.golden_trace);
        prop_assert!(!r.diverged);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn injected_runs_keep_x0_and_classify_everything(seed in any::<u64>(), c in config(), margin in -0.5f64..0.0) {
        let sim = Simulation::new(WorkloadSpec::default().generate(seed), 20_000).unwrap();
        let r = sim.run(&c, &DisturbanceModel::paper(), &Injection::Stochastic { margin }, seed);
        prop_assert_eq!(r.final_state.regs[0], 0);
        for e in &r.events {
            if c.modes.iter().all(|m| *m == HardeningMode::Unhardened) {
                prop_assert!(!e.flagged);
            }
        }
        for s in &r.recoveries {
            prop_assert_eq!(s.trigger_latency, 1);
        }
        prop_assert_eq!(r.flags.total() as usize, r.flags.entries.len());
    }

    #[test]
    fn frontier_is_exactly_the_non_dominated_set(pts in prop::collection::vec((0.0f64..3.0, 0.0f64..1.0), 1..30)) {
        let points: Vec<TradeoffPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, &(a, g))| TradeoffPoint { label: format!("p{i}"), area_frac: a, reliability_gain: g })
            .collect();
        let dominates = |a: &TradeoffPoint, b: &TradeoffPoint| {
            a.area_frac <= b.area_frac && a.reliability_gain >= b.reliability_gain
                && (a.area_frac < b.area_frac || a.reliability_gain > b.reliability_gain)
        };
        let front = pareto_frontier(&points);
        for p in &front {
            prop_assert!(!front.iter().any(|q| dominates(q, p)));
        }
        for p in &points {
            let nd = !points.iter().any(|q| dominates(q, p));
            prop_assert_eq!(nd, front.contains(p));
        }
        prop_assert!(front.windows(2).all(|w| w[0].area_frac <= w[1].area_frac));
    }

    #[test]
    fn plan_beats_every_feasible_config(area in 0.0f64..2.6, power in 0.0f64..1.2) {
        let metrics = FragilityMetrics::table();
        let model = DisturbanceModel::paper();
        let cal = OverheadCalibration::measured();
        let plan = plan_under_budget(&metrics, area, power, &model, &cal).unwrap();
        let predictor = GainPredictor::new(&metrics, &model).unwrap();
        for c in all_configs() {
            let o = estimate_overhead(&c, &cal.weights, &cal).unwrap();
            if o.area_frac <= area + 1e-12 && o.power_frac <= power + 1e-12 {
                prop_assert!(predictor.predict(&c) <= plan.predicted.reliability_gain);
            }
        }
        prop_assert!(plan.overhead.area_frac <= area + 1e-12);
        prop_assert_eq!(plan.infeasible, plan.config.is_baseline());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn campaigns_close_and_are_parallelism_independent(seed in any::<u64>(), c in config(), directed in any::<bool>()) {
        let spec = CampaignSpec {
            n_runs: 40,
            seed,
            margin: -0.1,
            injection: if directed {
                InjectionPlan::Directed { events_per_run: 3, boundaries: vec![] }
            } else {
                InjectionPlan::Stochastic
            },
            ..CampaignSpec::new(c, DisturbanceModel::paper())
        };
        let a = run_campaign_with_threads(&spec, 1).unwrap();
        let b = run_campaign_with_threads(&spec, 4).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.counts.total(), a.injected_total);
        prop_assert!(a.flagged_total <= a.injected_total);
        if spec.config.is_baseline() {
            prop_assert_eq!(a.flagged_total, 0);
        }
    }
}

#[test]
fn fixed_workload_campaign() {
    let program = WorkloadSpec::default().generate(5);
    let spec = CampaignSpec {
        n_runs: 20,
        workload: WorkloadSource::Fixed(program),
        ..CampaignSpec::new(HardeningConfig::selective_tmr(), DisturbanceModel::paper())
    };
    let m = run_campaign(&spec).unwrap();
    assert!(m.run_failures.is_empty());
    assert_eq!(m.runs, 20);
}
