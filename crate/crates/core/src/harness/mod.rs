//! Experiment controller: campaigns, margin sweeps, incidence heatmaps,
//! recovery-latency distributions and report emission.
//!
//! Every run in a campaign gets its own seed from [`run_seed`], so the
//! campaign is a pure function of its spec. Runs execute in parallel and
//! are merged in index order.

mod report;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::{DirectedEvent, DisturbanceModel, Injection, LocationId, OutcomeClass, Protection, LOCATIONS};
use crate::hardening::{FlagKind, HardeningConfig};
use crate::isa::Program;
use crate::pipeline::{BoundaryId, CarriedFault, LatchHook, Payload, PipelineLatch, RunReport, Simulation, StageId};
use crate::workload::WorkloadSpec;

pub use report::{emit_report, render_svg, LatencySeries, Report, ReportBody, ReportFormat, TOOL_VERSION};

/// Rows with fewer manifested events than this get a widened-uncertainty marker.
pub const MIN_ROW_EVENTS: u64 = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid campaign spec: {0}")]
    InvalidSpec(String),
    #[error("campaign recorded no recovery events")]
    NoRecoveryEvents,
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

/// Where each run's program comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    /// A fresh program per run, seeded from the run seed.
    Generated(WorkloadSpec),
    /// The same program for every run.
    Fixed(Program),
}

impl Default for WorkloadSource {
    fn default() -> Self {
        WorkloadSource::Generated(WorkloadSpec::default())
    }
}

/// How disturbances are introduced into each run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionPlan {
    /// Per-cycle sampling from the model at the campaign margin.
    #[default]
    Stochastic,
    /// A fixed number of single-bit events per run, each placed on a cycle
    /// where the target latch holds a valid instruction in the clean run.
    /// The boundary is drawn by its incidence weight among `boundaries`
    /// (all four if empty), the location by its weight within the row.
    /// Placement depends only on the run seed, so campaigns that share a
    /// seed see the same events under every configuration.
    Directed { events_per_run: u32, boundaries: Vec<BoundaryId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub config: HardeningConfig,
    pub model: DisturbanceModel,
    /// Normalized timing margin; negative values are over-stressed.
    pub margin: f64,
    pub workload: WorkloadSource,
    pub injection: InjectionPlan,
    pub n_runs: u64,
    pub seed: u64,
    pub max_cycles: u64,
}

impl CampaignSpec {
    pub fn new(config: HardeningConfig, model: DisturbanceModel) -> Self {
        CampaignSpec {
            config,
            model,
            margin: 0.0,
            workload: WorkloadSource::default(),
            injection: InjectionPlan::Stochastic,
            n_runs: 1000,
            seed: 1,
            max_cycles: 20_000,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if !self.margin.is_finite() {
            return bad("margin must be finite".into());
        }
        if let Err(e) = self.model.validate() {
            return bad(e);
        }
        if let WorkloadSource::Generated(w) = &self.workload {
            w.validate().map_err(HarnessError::InvalidSpec)?;
        }
        if let InjectionPlan::Directed { boundaries, .. } = &self.injection {
            let scope = directed_scope(boundaries);
            if scope.iter().all(|b| self.model.base_incidence[b.index()].iter().sum::<f64>() <= 0.0) {
                return bad("directed injection needs a boundary with non-zero incidence".into());
            }
        }
        Ok(())
    }

    /// Identifies everything except the hardening configuration. Campaigns
    /// are comparable iff their keys match.
    pub fn comparability_key(&self) -> String {
        let parts = serde_json::json!({
            "workload": self.workload,
            "model": self.model,
            "margin": self.margin,
            "injection": self.injection,
            "n_runs": self.n_runs,
            "seed": self.seed,
        });
        parts.to_string()
    }
}

/// Counter-based seed split: SplitMix64 of `master + (index + 1)·φ`.
pub fn run_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub benign: u64,
    pub detected_recovered: u64,
    pub masked_silent: u64,
    pub silent_data_corruption: u64,
    pub unresolvable: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: OutcomeClass) {
        *self.slot(o) += 1;
    }

    fn slot(&mut self, o: OutcomeClass) -> &mut u64 {
        match o {
            OutcomeClass::Benign => &mut self.benign,
            OutcomeClass::DetectedRecovered => &mut self.detected_recovered,
            OutcomeClass::MaskedSilent => &mut self.masked_silent,
            OutcomeClass::SilentDataCorruption => &mut self.silent_data_corruption,
            OutcomeClass::Unresolvable => &mut self.unresolvable,
        }
    }

    pub fn get(&self, o: OutcomeClass) -> u64 {
        match o {
            OutcomeClass::Benign => self.benign,
            OutcomeClass::DetectedRecovered => self.detected_recovered,
            OutcomeClass::MaskedSilent => self.masked_silent,
            OutcomeClass::SilentDataCorruption => self.silent_data_corruption,
            OutcomeClass::Unresolvable => self.unresolvable,
        }
    }

    pub fn total(&self) -> u64 {
        OutcomeClass::ALL.iter().map(|o| self.get(*o)).sum()
    }

    pub fn unhandled(&self) -> u64 {
        self.silent_data_corruption + self.unresolvable
    }
}

/// A run that could not be executed (its program failed the golden run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceCounters {
    pub cycles: u64,
    pub retired: u64,
    pub load_use_stalls: u64,
    pub branch_squashes: u64,
    pub recovery_stalls: u64,
    pub recovery_flushes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMetrics {
    pub config: String,
    pub comparability_key: String,
    pub counts: OutcomeCounts,
    pub injected_total: u64,
    pub manifested_total: u64,
    pub flagged_total: u64,
    /// Flagged events per injected event; `None` when nothing was injected.
    pub observability: Option<f64>,
    pub detected_frac: Option<f64>,
    pub masked_frac: Option<f64>,
    pub unhandled_rate: Option<f64>,
    /// Total recovery latency per recovery event, in run order.
    pub recovery_latencies: Vec<u64>,
    pub trigger_latencies: Vec<u64>,
    /// Stochastic campaigns: manifested events per cell, normalized to the
    /// model's `base_incidence` scale. Directed campaigns: share of
    /// injected events per cell.
    pub incidence_matrix: [[f64; LOCATIONS]; 4],
    pub manifested_matrix: [[u64; LOCATIONS]; 4],
    pub runs: u64,
    pub diverged_runs: u64,
    /// Diverged runs per completed run; `None` when no run completed.
    pub run_error_probability: Option<f64>,
    pub flags_per_stage: [u64; 5],
    pub flags_by_kind: FlagKindCounts,
    pub counters: PerformanceCounters,
    pub run_failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagKindCounts {
    pub mismatch: u64,
    pub voter_disagreement: u64,
    pub voter_unresolvable: u64,
}

impl CampaignMetrics {
    /// `(x, F(x))` steps of the recovery-latency distribution.
    pub fn latency_cdf(&self) -> Result<Vec<(u64, f64)>, HarnessError> {
        recovery_latency_cdf(self)
    }

    /// Binomial standard error of `run_error_probability`.
    pub fn run_error_stderr(&self) -> Option<f64> {
        let p = self.run_error_probability?;
        let n = self.runs - self.run_failures.len() as u64;
        Some((p * (1.0 - p) / n as f64).sqrt())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn directed_scope(boundaries: &[BoundaryId]) -> Vec<BoundaryId> {
    if boundaries.is_empty() {
        BoundaryId::ALL.to_vec()
    } else {
        boundaries.to_vec()
    }
}

/// Records on which cycles each latch holds a valid instruction.
#[derive(Default)]
struct LiveSlots([Vec<u64>; 4]);

impl LatchHook for LiveSlots {
    fn on_latch(
        &mut self,
        b: BoundaryId,
        cycle: u64,
        latch: &mut PipelineLatch,
        _: &[CarriedFault],
        _: &mut Vec<crate::hardening::StageErrorFlag>,
    ) {
        if latch.valid {
            self.0[b.index()].push(cycle);
        }
    }

    fn on_retire(&mut self, _: u64, _: &PipelineLatch, _: &mut Payload, _: &mut Vec<crate::hardening::StageErrorFlag>) {
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Directed events for one run, placed on live latch cycles of the clean run.
fn directed_events(
    sim: &Simulation,
    model: &DisturbanceModel,
    boundaries: &[BoundaryId],
    count: u32,
    seed: u64,
) -> Vec<DirectedEvent> {
    let mut live = LiveSlots::default();
    sim.run_with_hook(&mut live);
    let scope: Vec<BoundaryId> =
        directed_scope(boundaries).into_iter().filter(|b| !live.0[b.index()].is_empty()).collect();
    let row_weight = |b: &BoundaryId| model.base_incidence[b.index()].iter().sum::<f64>();
    let weights: Vec<f64> = scope.iter().map(row_weight).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<DirectedEvent> = (0..count)
        .map(|_| {
            let boundary = scope[pick_weighted(&mut rng, &weights)];
            let slots = &live.0[boundary.index()];
            let cycle = slots[rng.random_range(0..slots.len())];
            let location = LocationId::new(pick_weighted(&mut rng, &model.base_incidence[boundary.index()]))
                .expect("location index in range");
            let bit = location.bit(rng.random_range(0..8));
            DirectedEvent { cycle, boundary, bit, u_target: rng.random(), u_manifest: rng.random() }
        })
        .collect();
    events.sort_by_key(|e| (e.cycle, e.boundary.index(), e.bit));
    events
}

fn execute_run(spec: &CampaignSpec, index: u64) -> Result<RunReport, RunFailure> {
    let seed = run_seed(spec.seed, index);
    let program = match &spec.workload {
        WorkloadSource::Generated(w) => w.generate(seed),
        WorkloadSource::Fixed(p) => p.clone(),
    };
    let sim = Simulation::new(program, spec.max_cycles).map_err(|e| RunFailure { run: index, error: e.to_string() })?;
    let injection = match &spec.injection {
        InjectionPlan::Stochastic => Injection::Stochastic { margin: spec.margin },
        InjectionPlan::Directed { events_per_run, boundaries } => Injection::Directed(directed_events(
            &sim,
            &spec.model,
            boundaries,
            *events_per_run,
            splitmix64(seed ^ 0xD1),
        )),
    };
    Ok(sim.run(&spec.config, &spec.model, &injection, splitmix64(seed ^ 0x1A)))
}

/// Run a campaign on the global rayon pool.
pub fn run_campaign(spec: &CampaignSpec) -> Result<CampaignMetrics, HarnessError> {
    spec.validate()?;
    let reports: Vec<_> = (0..spec.n_runs).into_par_iter().map(|i| execute_run(spec, i)).collect();
    Ok(merge(spec, reports))
}

/// Run a campaign on a dedicated pool of `threads` workers.
pub fn run_campaign_with_threads(spec: &CampaignSpec, threads: usize) -> Result<CampaignMetrics, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    pool.install(|| run_campaign(spec))
}

fn merge(spec: &CampaignSpec, reports: Vec<Result<RunReport, RunFailure>>) -> CampaignMetrics {
    let mut counts = OutcomeCounts::default();
    let (mut manifested, mut flagged, mut diverged) = (0, 0, 0);
    let mut matrix = [[0u64; LOCATIONS]; 4];
    let mut injected_matrix = [[0u64; LOCATIONS]; 4];
    let mut recovery = Vec::new();
    let mut trigger = Vec::new();
    let mut flags_per_stage = [0u64; 5];
    let mut kinds = FlagKindCounts::default();
    let mut counters = PerformanceCounters::default();
    let mut failures = Vec::new();

    for r in reports {
        let r = match r {
            Ok(r) => r,
            Err(f) => {
                failures.push(f);
                continue;
            }
        };
        diverged += u64::from(r.diverged);
        for e in &r.events {
            counts.add(e.outcome);
            injected_matrix[e.boundary.index()][e.location.index()] += 1;
            if e.manifested {
                manifested += 1;
                matrix[e.boundary.index()][e.location.index()] += 1;
            }
            flagged += u64::from(e.flagged);
        }
        for s in &r.recoveries {
            recovery.push(s.total_latency);
            trigger.push(s.trigger_latency);
        }
        for s in StageId::ALL {
            flags_per_stage[s.index()] += r.flags.counter(s);
        }
        for entry in &r.flags.entries {
            match entry.kind {
                FlagKind::Mismatch => kinds.mismatch += 1,
                FlagKind::VoterDisagreement => kinds.voter_disagreement += 1,
                FlagKind::VoterUnresolvable => kinds.voter_unresolvable += 1,
            }
        }
        counters.cycles += r.cycles;
        counters.retired += r.retired.len() as u64;
        counters.load_use_stalls += r.load_use_stalls;
        counters.branch_squashes += r.branch_squashes;
        counters.recovery_stalls += r.recovery_stalls;
        counters.recovery_flushes += r.recovery_flushes;
    }

    let injected = counts.total();
    let mut incidence = [[0.0; LOCATIONS]; 4];
    match spec.injection {
        InjectionPlan::Stochastic => {
            let exposure = counters.cycles as f64 * spec.model.stress.at(spec.margin) * spec.model.rate_scale / 1000.0;
            for b in BoundaryId::ALL {
                let p = spec.model.manifest_for(Protection::of(&spec.config, b));
                for l in 0..LOCATIONS {
                    let den = exposure * p;
                    incidence[b.index()][l] = if den > 0.0 { matrix[b.index()][l] as f64 / den } else { 0.0 };
                }
            }
        }
        InjectionPlan::Directed { .. } => {
            for b in 0..4 {
                for l in 0..LOCATIONS {
                    incidence[b][l] = ratio(injected_matrix[b][l], injected).unwrap_or(0.0);
                }
            }
        }
    }

    let completed = spec.n_runs - failures.len() as u64;
    CampaignMetrics {
        config: spec.config.name.clone(),
        comparability_key: spec.comparability_key(),
        counts,
        injected_total: injected,
        manifested_total: manifested,
        flagged_total: flagged,
        observability: ratio(flagged, injected),
        detected_frac: ratio(counts.detected_recovered, injected),
        masked_frac: ratio(counts.masked_silent, injected),
        unhandled_rate: ratio(counts.unhandled(), injected),
        recovery_latencies: recovery,
        trigger_latencies: trigger,
        incidence_matrix: incidence,
        manifested_matrix: matrix,
        runs: spec.n_runs,
        diverged_runs: diverged,
        run_error_probability: ratio(diverged, completed),
        flags_per_stage,
        flags_by_kind: kinds,
        counters,
        run_failures: failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub config: String,
    /// One entry per margin; `None` where no run completed.
    pub run_error_probability: Vec<Option<f64>>,
    pub runs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub margins: Vec<f64>,
    pub curves: Vec<SweepCurve>,
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn margin_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One campaign per (margin, config), all sharing the base spec's seed.
pub fn margin_sweep(
    base: &CampaignSpec,
    margins: &[f64],
    configs: &[HardeningConfig],
) -> Result<SweepResult, HarnessError> {
    if margins.len() < 2 {
        return Err(HarnessError::InvalidSpec("a sweep needs at least two margins".into()));
    }
    let mut curves = Vec::with_capacity(configs.len());
    for c in configs {
        let mut probs = Vec::with_capacity(margins.len());
        let mut runs = Vec::with_capacity(margins.len());
        for &m in margins {
            let spec =
                CampaignSpec { config: c.clone(), margin: m, injection: InjectionPlan::Stochastic, ..base.clone() };
            let metrics = run_campaign(&spec)?;
            probs.push(metrics.run_error_probability);
            runs.push(metrics.runs - metrics.run_failures.len() as u64);
        }
        curves.push(SweepCurve { config: c.name.clone(), run_error_probability: probs, runs });
    }
    Ok(SweepResult { margins: margins.to_vec(), curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Empirical incidence, on the same scale as `base_incidence`.
    pub matrix: [[f64; LOCATIONS]; 4],
    pub counts: [[u64; LOCATIONS]; 4],
    /// Rows with fewer than [`MIN_ROW_EVENTS`] manifested events.
    pub insufficient_rows: Vec<BoundaryId>,
}

impl Heatmap {
    pub fn is_sufficient(&self) -> bool {
        self.insufficient_rows.is_empty()
    }
}

/// Estimate the per-cell incidence matrix from a stochastic campaign.
pub fn spatial_heatmap(spec: &CampaignSpec) -> Result<Heatmap, HarnessError> {
    if spec.injection != InjectionPlan::Stochastic {
        return Err(HarnessError::InvalidSpec("heatmaps need stochastic injection".into()));
    }
    if spec.model.rate_scale <= 0.0 {
        return Err(HarnessError::InvalidSpec("heatmaps need a non-zero disturbance rate".into()));
    }
    let m = run_campaign(spec)?;
    let insufficient_rows = BoundaryId::ALL
        .into_iter()
        .filter(|b| m.manifested_matrix[b.index()].iter().sum::<u64>() < MIN_ROW_EVENTS)
        .collect();
    Ok(Heatmap { matrix: m.incidence_matrix, counts: m.manifested_matrix, insufficient_rows })
}

/// Right-continuous empirical CDF: distinct sorted latencies with the
/// fraction of samples at or below each.
pub fn recovery_latency_cdf(metrics: &CampaignMetrics) -> Result<Vec<(u64, f64)>, HarnessError> {
    empirical_cdf(&metrics.recovery_latencies).ok_or(HarnessError::NoRecoveryEvents)
}

pub fn empirical_cdf(samples: &[u64]) -> Option<Vec<(u64, f64)>> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, x) in s.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = (i + 1) as f64 / n,
            _ => out.push((*x, (i + 1) as f64 / n)),
        }
    }
    Some(out)
}

/// Evaluate a step CDF at `x`.
pub fn cdf_at(cdf: &[(u64, f64)], x: u64) -> f64 {
    cdf.iter().take_while(|(v, _)| *v <= x).last().map_or(0.0, |(_, f)| *f)
}

/// Load a disturbance model: `paper` names the shipped profile, anything
/// else is a path to a JSON file.
pub fn load_profile(name_or_path: &str) -> Result<DisturbanceModel, HarnessError> {
    if name_or_path == "paper" {
        return Ok(DisturbanceModel::paper());
    }
    let model: DisturbanceModel = read_json(Path::new(name_or_path), "calibration profile")?;
    model.validate().map_err(|message| HarnessError::Format { what: "calibration profile".into(), message })?;
    Ok(model)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format { what: what.into(), message: e.to_string() })
}

/// Experiment configuration file: a hardening configuration plus optional
/// campaign settings. Missing settings take the campaign defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub hardening: HardeningConfig,
    pub margin: f64,
    pub workload: WorkloadSource,
    pub injection: InjectionPlan,
    pub runs: u64,
    pub seed: u64,
    pub max_cycles: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = CampaignSpec::new(HardeningConfig::baseline(), DisturbanceModel::paper());
        ExperimentConfig {
            hardening: d.config,
            margin: d.margin,
            workload: d.workload,
            injection: d.injection,
            runs: d.n_runs,
            seed: d.seed,
            max_cycles: d.max_cycles,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        read_json(path, "experiment configuration")
    }

    pub fn into_spec(self, model: DisturbanceModel) -> CampaignSpec {
        CampaignSpec {
            config: self.hardening,
            model,
            margin: self.margin,
            workload: self.workload,
            injection: self.injection,
            n_runs: self.runs,
            seed: self.seed,
            max_cycles: self.max_cycles,
        }
    }
}
