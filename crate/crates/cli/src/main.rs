//! Command-line front end for the pipeline hardening simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipeharden::faults::{DisturbanceModel, Injection};
use pipeharden::fragility::{characterize, phase_grid, recommend_hardening, FragilityMetrics};
use pipeharden::hardening::HardeningConfig;
use pipeharden::harness::{
    emit_report, load_profile, margin_grid, margin_sweep, read_json, recovery_latency_cdf, run_campaign,
    spatial_heatmap, CampaignSpec, ExperimentConfig, HarnessError, InjectionPlan, LatencySeries, Report, ReportBody,
    ReportFormat, WorkloadSource,
};
use pipeharden::isa::Program;
use pipeharden::pipeline::{Simulation, StageId};
use pipeharden::tradeoff::{
    estimate_overhead, pareto_frontier, plan_under_budget, reliability_gain, OverheadCalibration, TradeoffPoint,
};

#[derive(Parser)]
#[command(name = "pipeharden", version, about = "Selective pipeline hardening simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Calibration profile: `paper` or a JSON file.
    #[arg(long, global = true, default_value = "paper")]
    profile: String,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of runs per campaign.
    #[arg(long, global = true)]
    runs: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Output formats, comma separated.
    #[arg(long, global = true, default_value = "csv,json,svg")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize phase-swept BER curves per stage and extract fragility metrics.
    Characterize {
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        #[arg(long, default_value_t = 50)]
        sweeps: usize,
        #[arg(long, default_value_t = 1001)]
        points: usize,
        /// Recommend duplication for high-fragility stages instead of TMR.
        #[arg(long)]
        prefer_detection: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Execute a single run and print its report.
    Run {
        /// Hardening configuration: a canonical name or a five-letter mode string (e.g. UUTTU).
        #[arg(long)]
        hardening: Option<String>,
        /// Program file: one hex instruction word per line, optional `@entry` and `@data` sections.
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        margin: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a fault-injection campaign.
    Campaign {
        #[arg(long)]
        hardening: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        margin: Option<f64>,
        /// Place this many directed events per run instead of sampling per cycle.
        #[arg(long)]
        directed: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Run error probability across a timing-margin grid.
    Sweep {
        /// `lo:hi:n`
        #[arg(long, default_value = "-0.25:0.25:11", allow_hyphen_values = true)]
        margins: String,
        /// Comma-separated configuration names or mode strings.
        #[arg(long, default_value = "baseline,sel-dup,sel-tmr")]
        configs: String,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the boundary-by-location incidence matrix.
    Heatmap {
        #[arg(long, default_value_t = -0.3, allow_hyphen_values = true)]
        margin: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Reliability gain against area for the canonical configurations.
    Pareto {
        /// `measured` or `expected`.
        #[arg(long, default_value = "measured")]
        calibration: String,
        #[command(flatten)]
        common: Common,
    },
    /// Best configuration within an overhead budget.
    Plan {
        #[arg(long)]
        budget_area: f64,
        #[arg(long, default_value_t = f64::INFINITY)]
        budget_power: f64,
        #[arg(long, default_value = "measured")]
        calibration: String,
        #[command(flatten)]
        common: Common,
    },
    /// Re-render a saved JSON report in other formats.
    Report {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Failure { code: 1, message: m.into() }
    }

    fn insufficient(m: impl Into<String>) -> Self {
        Failure { code: 2, message: m.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Io { .. } => 3,
            HarnessError::NoRecoveryEvents => 2,
            HarnessError::InvalidSpec(_) | HarnessError::Format { .. } => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn hardening_from(name: &str) -> Result<HardeningConfig> {
    HardeningConfig::named(name)
        .or_else(|| HardeningConfig::from_mode_string(name, name))
        .ok_or_else(|| Failure::usage(format!("unknown hardening configuration `{name}`")))
}

fn calibration_from(name: &str) -> Result<OverheadCalibration> {
    OverheadCalibration::named(name).ok_or_else(|| Failure::usage(format!("unknown calibration `{name}`")))
}

impl Common {
    fn formats(&self) -> Result<Vec<ReportFormat>> {
        ReportFormat::parse_list(&self.format).map_err(Failure::usage)
    }

    fn model(&self) -> Result<DisturbanceModel> {
        Ok(load_profile(&self.profile)?)
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut e = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            e.seed = s;
        }
        if let Some(r) = self.runs {
            e.runs = r;
        }
        Ok(e)
    }

    fn emit(&self, report: &Report, stem: &str) -> Result<()> {
        for p in emit_report(report, &self.out, stem, &self.formats()?)? {
            println!("wrote {}", p.display());
        }
        Ok(())
    }

    fn report(&self, seed: Option<u64>, spec: serde_json::Value, body: ReportBody) -> Result<Report> {
        let model = self.model()?;
        Ok(Report::new(&model.name, seed, spec, body))
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Failure::usage(format!("margin grid `{s}` is not lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    Ok(margin_grid(lo, hi, n))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Characterize { samples, sweeps, points, prefer_detection, common } => {
            common.formats()?;
            if points < 2 {
                return Err(Failure::usage("--points must be at least 2"));
            }
            let seed = common.seed.unwrap_or(1);
            let phases = phase_grid(0.0, 1.0, points);
            let mut rows = Vec::new();
            println!("stage  slack    mu     dphi    sigma   class");
            for (i, reference) in FragilityMetrics::table().iter().enumerate() {
                let (m, _) = characterize(
                    &reference.path_model(),
                    reference.nominal_slack,
                    reference.stage,
                    &phases,
                    samples,
                    sweeps,
                    seed.wrapping_add(i as u64),
                )
                .map_err(|e| Failure::insufficient(format!("{}: {e}", reference.stage)))?;
                println!(
                    "{:<5} {:.2}  {:.4}  {:.4}  {:.4}  {:?}",
                    m.stage.name(),
                    m.nominal_slack,
                    m.mu,
                    m.delta_phi,
                    m.sigma_phi,
                    m.class
                );
                rows.push(m);
            }
            let rec = recommend_hardening(&rows, prefer_detection);
            println!("recommended configuration: {}", rec.mode_string());
            let spec = serde_json::json!({ "samples": samples, "sweeps": sweeps, "points": points, "prefer_detection": prefer_detection });
            let report = common.report(Some(seed), spec, ReportBody::Characterization(rows))?;
            common.emit(&report, "characterization")
        }
        Command::Run { hardening, program, margin, common } => {
            let mut e = common.experiment()?;
            if let Some(h) = hardening {
                e.hardening = hardening_from(&h)?;
            }
            let program = match program {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|err| Failure { code: 3, message: format!("{}: {err}", p.display()) })?;
                    Program::parse(&text).map_err(|err| Failure::usage(format!("{}: {err}", p.display())))?
                }
                None => match &e.workload {
                    WorkloadSource::Generated(w) => w.generate(e.seed),
                    WorkloadSource::Fixed(p) => p.clone(),
                },
            };
            let model = common.model()?;
            let sim = Simulation::new(program, e.max_cycles).map_err(|err| Failure::usage(err.to_string()))?;
            let injection = Injection::Stochastic { margin: margin.unwrap_or(e.margin) };
            let r = sim.run(&e.hardening, &model, &injection, e.seed);
            let summary = serde_json::json!({
                "config": e.hardening.name,
                "status": r.status,
                "cycles": r.cycles,
                "retired": r.retired.len(),
                "diverged": r.diverged,
                "events": r.events,
                "flags": r.flags,
                "recoveries": r.recoveries,
                "load_use_stalls": r.load_use_stalls,
                "branch_squashes": r.branch_squashes,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            Ok(())
        }
        Command::Campaign { hardening, margin, directed, common } => {
            common.formats()?;
            let mut e = common.experiment()?;
            if let Some(h) = hardening {
                e.hardening = hardening_from(&h)?;
            }
            if let Some(m) = margin {
                e.margin = m;
            }
            if let Some(n) = directed {
                e.injection = InjectionPlan::Directed { events_per_run: n, boundaries: Vec::new() };
            }
            let spec = e.into_spec(common.model()?);
            let m = run_campaign(&spec)?;
            println!(
                "{}: injected {} observability {} detected {} masked {} unhandled {} run error {}",
                m.config,
                m.injected_total,
                fmt_opt(m.observability),
                fmt_opt(m.detected_frac),
                fmt_opt(m.masked_frac),
                fmt_opt(m.unhandled_rate),
                fmt_opt(m.run_error_probability)
            );
            let cdf = recovery_latency_cdf(&m).ok();
            let report = Report::new(
                &spec.model.name,
                Some(spec.seed),
                serde_json::json!(spec),
                ReportBody::Campaign(m.clone()),
            );
            common.emit(&report, "campaign")?;
            if let Some(cdf) = cdf {
                let body = ReportBody::LatencyCdf(vec![LatencySeries { config: m.config.clone(), cdf }]);
                common
                    .emit(&Report::new(&spec.model.name, Some(spec.seed), serde_json::json!(spec), body), "latency")?;
            }
            Ok(())
        }
        Command::Sweep { margins, configs, common } => {
            common.formats()?;
            let grid = parse_grid(&margins)?;
            let configs: Vec<HardeningConfig> =
                configs.split(',').map(|c| hardening_from(c.trim())).collect::<Result<_>>()?;
            let base = common.experiment()?.into_spec(common.model()?);
            let sweep = margin_sweep(&base, &grid, &configs)?;
            for c in &sweep.curves {
                let ps: Vec<String> = c.run_error_probability.iter().map(|p| fmt_opt(*p)).collect();
                println!("{:<10} {}", c.config, ps.join(" "));
            }
            let spec = serde_json::json!({ "base": base, "margins": grid, "configs": configs });
            let report = Report::new(&base.model.name, Some(base.seed), spec, ReportBody::Sweep(sweep));
            common.emit(&report, "sweep")
        }
        Command::Heatmap { margin, common } => {
            common.formats()?;
            let e = common.experiment()?;
            let spec = CampaignSpec { margin, injection: InjectionPlan::Stochastic, ..e.into_spec(common.model()?) };
            let h = spatial_heatmap(&spec)?;
            for (b, row) in h.matrix.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("{:<8} {}", pipeharden::pipeline::BoundaryId::ALL[b].name(), cells.join(" "));
            }
            let sufficient = h.is_sufficient();
            let rows: Vec<&str> = h.insufficient_rows.iter().map(|b| b.name()).collect();
            let report =
                Report::new(&spec.model.name, Some(spec.seed), serde_json::json!(spec), ReportBody::Heatmap(h));
            common.emit(&report, "heatmap")?;
            if sufficient {
                Ok(())
            } else {
                Err(Failure::insufficient(format!("fewer than 100 events in rows {}", rows.join(", "))))
            }
        }
        Command::Pareto { calibration, common } => {
            common.formats()?;
            let cal = calibration_from(&calibration)?;
            let e = common.experiment()?;
            let runs = common.runs.unwrap_or(10_000);
            let mut points = Vec::new();
            let mut base_metrics = None;
            for c in HardeningConfig::canonical() {
                let spec = CampaignSpec {
                    config: c.clone(),
                    n_runs: runs,
                    injection: InjectionPlan::Directed { events_per_run: 1, boundaries: Vec::new() },
                    ..e.clone().into_spec(common.model()?)
                };
                let m = run_campaign(&spec)?;
                let base = base_metrics.get_or_insert_with(|| m.clone());
                let gain = reliability_gain(&m, base).map_err(|err| Failure::usage(err.to_string()))?;
                let o = estimate_overhead(&c, &cal.weights, &cal).map_err(|err| Failure::usage(err.to_string()))?;
                println!("{:<9} area {:.3} power {:.3} gain {:.3}", c.name, o.area_frac, o.power_frac, gain);
                points.push(TradeoffPoint { label: c.name.clone(), area_frac: o.area_frac, reliability_gain: gain });
            }
            let front = pareto_frontier(&points);
            println!("frontier: {}", front.iter().map(|p| p.label.as_str()).collect::<Vec<_>>().join(", "));
            let spec = serde_json::json!({ "calibration": cal, "runs": runs, "points": points });
            let report = common.report(Some(e.seed), spec, ReportBody::Frontier(front))?;
            common.emit(&report, "pareto")
        }
        Command::Plan { budget_area, budget_power, calibration, common } => {
            common.formats()?;
            let cal = calibration_from(&calibration)?;
            let model = common.model()?;
            let metrics = FragilityMetrics::table();
            let plan = plan_under_budget(&metrics, budget_area, budget_power, &model, &cal)
                .map_err(|err| Failure::usage(err.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&plan_summary(&plan)).expect("serializable"));
            let infeasible = plan.infeasible;
            let spec = serde_json::json!({ "budget_area": budget_area, "budget_power": budget_power, "calibration": cal.name });
            let report = Report::new(&model.name, None, spec, ReportBody::Plan(plan));
            common.emit(&report, "plan")?;
            if infeasible {
                Err(Failure::insufficient("only the baseline fits the budget"))
            } else {
                Ok(())
            }
        }
        Command::Report { input, common } => {
            let report: Report = read_json(&input, "report")?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
            common.emit(&report, &stem)
        }
    }
}

fn plan_summary(plan: &pipeharden::tradeoff::Plan) -> serde_json::Value {
    let modes: serde_json::Map<String, serde_json::Value> =
        StageId::ALL.iter().map(|s| (s.name().to_string(), serde_json::json!(plan.config.mode(*s)))).collect();
    serde_json::json!({
        "modes": modes,
        "mode_string": plan.config.mode_string(),
        "area_frac": plan.overhead.area_frac,
        "power_frac": plan.overhead.power_frac,
        "congestion": plan.overhead.congestion,
        "predicted_gain": plan.predicted.reliability_gain,
        "infeasible": plan.infeasible,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}
