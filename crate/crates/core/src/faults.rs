//! Disturbance injection: where disturbances strike (boundary × location),
//! whether they manifest, which replica or shared logic they hit, and how
//! each one is finally classified against the golden executor.
//!
//! Protection of a boundary follows from the stages on either side:
//!
//! * the producer is hardened: replicas drive a comparator or voter placed
//!   in front of the latch (output protection);
//! * otherwise the consumer is TMR: each replica owns its copy of the
//!   input latch, so an upset of one copy is outvoted downstream (input
//!   protection);
//! * otherwise the boundary is unprotected. A duplicated consumer shares a
//!   single input latch and cannot see the upset.
//!
//! Locations are bytes of the latch read as one 64-bit value with word 0 in
//! the high half: `L1..L4` are the bytes of word 1 from least significant
//! up, `L5..L8` the bytes of word 0. `L8` is the top byte of the primary
//! value, the end of the longest carry chain.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fragility::FragilityMetrics;
use crate::hardening::{compare_duplicate, vote_tmr, FlagKind, HardeningConfig, HardeningMode, StageErrorFlag};
use crate::pipeline::{BoundaryId, CarriedFault, LatchHook, Payload, PipelineLatch, StageId};

pub const LOCATIONS: usize = 8;

/// Monitored location within a boundary, `L1..L8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocationId(u8);

impl LocationId {
    pub fn new(index: usize) -> Option<Self> {
        (index < LOCATIONS).then_some(LocationId(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = LocationId> {
        (0..LOCATIONS as u8).map(LocationId)
    }

    /// Payload bit for slot `j` in `0..8` of this location.
    pub fn bit(self, j: u32) -> u32 {
        let byte = (self.0 as u32 + 4) % 8;
        8 * byte + j % 8
    }

    pub fn of_bit(bit: u32) -> Self {
        LocationId(((bit / 8 + 4) % 8) as u8)
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0 + 1)
    }
}

impl FromStr for LocationId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix(['L', 'l'])
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(|n| n.checked_sub(1))
            .and_then(LocationId::new)
            .ok_or_else(|| format!("invalid location `{s}`"))
    }
}

impl Serialize for LocationId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LocationId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Replica(u8),
    SharedLogic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeClass {
    Benign,
    DetectedRecovered,
    MaskedSilent,
    SilentDataCorruption,
    Unresolvable,
}

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 5] = [
        OutcomeClass::Benign,
        OutcomeClass::DetectedRecovered,
        OutcomeClass::MaskedSilent,
        OutcomeClass::SilentDataCorruption,
        OutcomeClass::Unresolvable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_unhandled(self) -> bool {
        matches!(self, OutcomeClass::SilentDataCorruption | OutcomeClass::Unresolvable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub cycle: u64,
    pub boundary: BoundaryId,
    pub location: LocationId,
    pub target: Target,
    pub bit: u32,
    pub manifested: bool,
    /// A stage error flag was raised because of this event.
    pub flagged: bool,
    pub outcome: OutcomeClass,
}

/// How a boundary is protected under a given configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protection {
    Unprotected,
    Output(HardeningMode),
    Input,
}

impl Protection {
    pub fn of(config: &HardeningConfig, b: BoundaryId) -> Protection {
        match config.mode(b.producer()) {
            HardeningMode::Unhardened if config.mode(b.consumer()) == HardeningMode::Tmr => Protection::Input,
            HardeningMode::Unhardened => Protection::Unprotected,
            m => Protection::Output(m),
        }
    }

    /// Mode of the logic the disturbance lands in.
    pub fn mode(self) -> HardeningMode {
        match self {
            Protection::Unprotected => HardeningMode::Unhardened,
            Protection::Output(m) => m,
            Protection::Input => HardeningMode::Tmr,
        }
    }
}

/// Margin-to-probability curve: `logistic((m0 - m) / k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressCurve {
    pub m0: f64,
    pub k: f64,
}

impl StressCurve {
    pub fn at(&self, margin: f64) -> f64 {
        1.0 / (1.0 + ((margin - self.m0) / self.k).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerMode {
    pub unhardened: f64,
    pub duplicate: f64,
    pub tmr: f64,
}

impl PerMode {
    pub fn get(&self, m: HardeningMode) -> f64 {
        match m {
            HardeningMode::Unhardened => self.unhardened,
            HardeningMode::Duplicate => self.duplicate,
            HardeningMode::Tmr => self.tmr,
        }
    }

    fn values(&self) -> [f64; 3] {
        [self.unhardened, self.duplicate, self.tmr]
    }
}

/// Calibrated disturbance model. Immutable and shared across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    pub name: String,
    /// Relative weight per boundary (rows, pipeline order) and location.
    pub base_incidence: [[f64; LOCATIONS]; 4],
    /// Expected disturbances per 1000 cycles per unit weight at full stress.
    pub rate_scale: f64,
    pub stress: StressCurve,
    /// Probability a disturbance corrupts live state.
    pub manifest_prob: PerMode,
    /// Probability a disturbance at a protected boundary hits unreplicated logic.
    pub shared_fraction: PerMode,
}

/// Transition width of the stage treated as unit sensitivity.
pub const REFERENCE_DELTA_PHI: f64 = 0.041;

impl DisturbanceModel {
    /// The shipped calibration profile.
    pub fn paper() -> Self {
        let mut base = [[0.0; LOCATIONS]; 4];
        base[BoundaryId::IfId.index()] = [0.10; LOCATIONS];
        base[BoundaryId::IdEx.index()] = [0.14; LOCATIONS];
        for (l, w) in base[BoundaryId::ExMem.index()].iter_mut().enumerate() {
            *w = 0.11 + (0.30 - 0.11) * l as f64 / (LOCATIONS - 1) as f64;
        }
        base[BoundaryId::MemWb.index()] = [0.10; LOCATIONS];
        DisturbanceModel {
            name: "paper".into(),
            base_incidence: base,
            rate_scale: PAPER_RATE_SCALE,
            stress: StressCurve { m0: 0.0, k: 0.1 },
            manifest_prob: PerMode { unhardened: 0.82, duplicate: 0.82, tmr: 0.93 },
            shared_fraction: PerMode { unhardened: 0.0, duplicate: 0.0, tmr: 0.18 / 0.93 },
        }
    }

    /// Paper profile with injection disabled.
    pub fn zero() -> Self {
        DisturbanceModel { name: "zero".into(), rate_scale: 0.0, ..DisturbanceModel::paper() }
    }

    /// Equal weight on every cell.
    pub fn uniform(weight: f64) -> Self {
        DisturbanceModel {
            name: "uniform".into(),
            base_incidence: [[weight; LOCATIONS]; 4],
            ..DisturbanceModel::paper()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.base_incidence.iter().flatten().all(|&w| unit(w)) {
            return Err("base_incidence weights must lie in [0, 1]".into());
        }
        if !self.manifest_prob.values().into_iter().chain(self.shared_fraction.values()).all(unit) {
            return Err("manifest_prob and shared_fraction must lie in [0, 1]".into());
        }
        if !(self.rate_scale >= 0.0 && self.rate_scale.is_finite()) {
            return Err("rate_scale must be finite and non-negative".into());
        }
        if !(self.stress.k > 0.0 && self.stress.m0.is_finite()) {
            return Err("stress.k must be positive and stress.m0 finite".into());
        }
        Ok(())
    }

    /// Per-cycle strike probability for one cell.
    pub fn cell_probability(&self, b: BoundaryId, l: LocationId, margin: f64) -> f64 {
        (self.base_incidence[b.index()][l.index()] * self.stress.at(margin) * self.rate_scale / 1000.0).min(1.0)
    }

    pub fn manifest_for(&self, p: Protection) -> f64 {
        self.manifest_prob.get(p.mode())
    }

    pub fn shared_for(&self, p: Protection) -> f64 {
        match p {
            Protection::Unprotected => 0.0,
            _ => self.shared_fraction.get(p.mode()),
        }
    }
}

/// Frozen output of the rate calibration: baseline run-level error
/// probability at zero margin lands at one half on the default workload.
pub const PAPER_RATE_SCALE: f64 = 8.10;

/// Per-cycle disturbance probability of a stage at margin `m`, scaled by
/// its transition width relative to [`REFERENCE_DELTA_PHI`].
pub fn margin_to_fault_probability(m: f64, stage: &FragilityMetrics, model: &DisturbanceModel) -> f64 {
    let sensitivity = stage.delta_phi / REFERENCE_DELTA_PHI;
    (model.stress.at(m) * sensitivity * model.rate_scale / 1000.0).min(1.0)
}

fn resolve_target(u: f64, protection: Protection, model: &DisturbanceModel) -> Target {
    let beta = model.shared_for(protection);
    let n = protection.mode().replicas() as f64;
    if u < beta {
        Target::SharedLogic
    } else {
        let r = ((u - beta) / (1.0 - beta) * n) as u8;
        Target::Replica(r.min(n as u8 - 1))
    }
}

fn sample_with<R: Rng>(
    rng: &mut R,
    cycle: u64,
    model: &DisturbanceModel,
    config: &HardeningConfig,
    margin: f64,
    mut emit: impl FnMut(FaultEvent, f64),
) {
    for b in BoundaryId::ALL {
        let prot = Protection::of(config, b);
        for l in LocationId::all() {
            let p = model.cell_probability(b, l, margin);
            if p > 0.0 && rng.random::<f64>() < p {
                let bit = l.bit(rng.random_range(0..8));
                let target = resolve_target(rng.random(), prot, model);
                let u_manifest = rng.random();
                emit(
                    FaultEvent {
                        cycle,
                        boundary: b,
                        location: l,
                        target,
                        bit,
                        manifested: false,
                        flagged: false,
                        outcome: OutcomeClass::Benign,
                    },
                    u_manifest,
                );
            }
        }
    }
}

/// Draw this cycle's disturbances: one Bernoulli trial per cell.
pub fn sample_disturbances<R: Rng>(
    rng: &mut R,
    cycle: u64,
    model: &DisturbanceModel,
    config: &HardeningConfig,
    margin: f64,
) -> Vec<FaultEvent> {
    let mut out = Vec::new();
    sample_with(rng, cycle, model, config, margin, |e, _| out.push(e));
    out
}

/// Flip the addressed bit with probability `manifest_prob`.
pub fn apply_disturbance<R: Rng>(
    payload: Payload,
    event: &FaultEvent,
    manifest_prob: f64,
    rng: &mut R,
) -> (Payload, bool) {
    apply_with_draw(payload, event.bit, manifest_prob, rng.random())
}

fn apply_with_draw(payload: Payload, bit: u32, manifest_prob: f64, u: f64) -> (Payload, bool) {
    if u < manifest_prob {
        (payload.flip(bit), true)
    } else {
        (payload, false)
    }
}

/// A disturbance placed by the harness rather than sampled. The uniform
/// draws are fixed so the same event can be replayed under every
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedEvent {
    pub cycle: u64,
    pub boundary: BoundaryId,
    pub bit: u32,
    pub u_target: f64,
    pub u_manifest: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    #[default]
    None,
    /// Per-cycle sampling from the model at the given timing margin.
    Stochastic { margin: f64 },
    /// Events sorted by cycle.
    Directed(Vec<DirectedEvent>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Track {
    Pending,
    NotManifested,
    Bubble,
    Propagated,
    Carried,
    Masked,
    Flagged { unresolvable: bool },
}

/// Per-run injection engine; plugs into the pipeline as its [`LatchHook`].
pub struct Injector<'a> {
    config: &'a HardeningConfig,
    model: &'a DisturbanceModel,
    injection: &'a Injection,
    rng: ChaCha8Rng,
    cursor: usize,
    queue: [Vec<usize>; 4],
    events: Vec<FaultEvent>,
    u_manifest: Vec<f64>,
    track: Vec<Track>,
}

impl<'a> Injector<'a> {
    pub fn new(config: &'a HardeningConfig, model: &'a DisturbanceModel, injection: &'a Injection, seed: u64) -> Self {
        Injector {
            config,
            model,
            injection,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            queue: Default::default(),
            events: Vec::new(),
            u_manifest: Vec::new(),
            track: Vec::new(),
        }
    }

    fn push(&mut self, e: FaultEvent, u: f64) {
        self.queue[e.boundary.index()].push(self.events.len());
        self.events.push(e);
        self.u_manifest.push(u);
        self.track.push(Track::Pending);
    }

    pub fn begin_cycle(&mut self, cycle: u64) {
        for q in &mut self.queue {
            q.clear();
        }
        match self.injection {
            Injection::None => {}
            Injection::Stochastic { margin } => {
                let mut fresh = Vec::new();
                sample_with(&mut self.rng, cycle, self.model, self.config, *margin, |e, u| fresh.push((e, u)));
                for (e, u) in fresh {
                    self.push(e, u);
                }
            }
            Injection::Directed(list) => {
                while let Some(d) = list.get(self.cursor).filter(|d| d.cycle <= cycle) {
                    self.cursor += 1;
                    if d.cycle < cycle {
                        continue;
                    }
                    let prot = Protection::of(self.config, d.boundary);
                    let e = FaultEvent {
                        cycle,
                        boundary: d.boundary,
                        location: LocationId::of_bit(d.bit),
                        target: resolve_target(d.u_target, prot, self.model),
                        bit: d.bit,
                        manifested: false,
                        flagged: false,
                        outcome: OutcomeClass::Benign,
                    };
                    let u = d.u_manifest;
                    self.push(e, u);
                }
            }
        }
    }

    /// Resolve replicated logic of `stage` for one cycle.
    #[allow(clippy::too_many_arguments)]
    fn resolve(
        &mut self,
        stage: StageId,
        mode: HardeningMode,
        cycle: u64,
        clean: Payload,
        replica_hits: &[(u8, u32, usize)],
        shared_hits: &[(u32, usize)],
        flags: &mut Vec<StageErrorFlag>,
    ) -> Payload {
        let mut replicas = [clean; 3];
        for &(r, bit, _) in replica_hits {
            replicas[r as usize] = replicas[r as usize].flip(bit);
        }
        let (mut out, mut flag) = match mode {
            HardeningMode::Duplicate => {
                let (out, mismatch) = compare_duplicate(replicas[0], replicas[1]);
                (out, mismatch.then_some(StageErrorFlag { stage, cycle, kind: FlagKind::Mismatch }))
            }
            _ => vote_tmr(replicas[0], replicas[1], replicas[2], stage, cycle, self.config.voter_flagging),
        };
        for &(bit, _) in shared_hits {
            out = out.flip(bit);
        }
        if flag.is_none() && !shared_hits.is_empty() {
            flag = Some(StageErrorFlag { stage, cycle, kind: FlagKind::Mismatch });
        }
        let unresolvable = flag.is_some_and(|f| f.kind == FlagKind::VoterUnresolvable);
        for &(r, _, ev) in replica_hits {
            self.track[ev] = if flag.is_some() {
                Track::Flagged { unresolvable }
            } else if replicas[r as usize] == out && out != clean {
                Track::Propagated
            } else {
                Track::Masked
            };
        }
        for &(_, ev) in shared_hits {
            self.track[ev] = Track::Flagged { unresolvable };
        }
        flags.extend(flag);
        out
    }

    fn split_inbound(inbound: &[CarriedFault]) -> (Vec<(u8, u32, usize)>, Vec<(u32, usize)>) {
        let mut replica = Vec::new();
        let mut shared = Vec::new();
        for c in inbound {
            match *c {
                CarriedFault::Replica { replica: r, bit, event } => replica.push((r, bit, event)),
                CarriedFault::Shared { bit, event } => shared.push((bit, event)),
            }
        }
        (replica, shared)
    }

    /// Assign every event its final outcome. `run_ok` is true when the run
    /// halted with the golden final state.
    pub fn finish(self, run_ok: bool) -> Vec<FaultEvent> {
        let mut events = self.events;
        for (e, t) in events.iter_mut().zip(self.track) {
            e.flagged = matches!(t, Track::Flagged { .. });
            e.outcome = match t {
                Track::Pending | Track::NotManifested | Track::Bubble => OutcomeClass::Benign,
                Track::Flagged { unresolvable: true } => OutcomeClass::Unresolvable,
                Track::Flagged { .. } if run_ok => OutcomeClass::DetectedRecovered,
                Track::Flagged { .. } => OutcomeClass::Unresolvable,
                Track::Masked => OutcomeClass::MaskedSilent,
                Track::Propagated | Track::Carried if run_ok => OutcomeClass::Benign,
                Track::Propagated | Track::Carried => OutcomeClass::SilentDataCorruption,
            };
        }
        events
    }
}

impl LatchHook for Injector<'_> {
    fn on_latch(
        &mut self,
        boundary: BoundaryId,
        cycle: u64,
        latch: &mut PipelineLatch,
        inbound: &[CarriedFault],
        flags: &mut Vec<StageErrorFlag>,
    ) {
        if self.queue[boundary.index()].is_empty() && inbound.is_empty() {
            return;
        }
        let prot = Protection::of(self.config, boundary);
        let (mut replica_hits, mut shared_hits) = Self::split_inbound(inbound);
        let pm = self.model.manifest_for(prot);
        let queued = std::mem::take(&mut self.queue[boundary.index()]);
        for &ev in &queued {
            let (_, manifested) = apply_with_draw(Payload::default(), 0, pm, self.u_manifest[ev]);
            self.events[ev].manifested = manifested;
            if !manifested {
                self.track[ev] = Track::NotManifested;
                continue;
            }
            if !latch.valid {
                self.track[ev] = Track::Bubble;
                continue;
            }
            let bit = self.events[ev].bit;
            match (prot, self.events[ev].target) {
                (Protection::Unprotected, _) => {
                    latch.payload = latch.payload.flip(bit);
                    self.track[ev] = Track::Propagated;
                }
                (Protection::Input, Target::Replica(replica)) => {
                    latch.carried.push(CarriedFault::Replica { replica, bit, event: ev });
                    self.track[ev] = Track::Carried;
                }
                (Protection::Input, Target::SharedLogic) => {
                    latch.carried.push(CarriedFault::Shared { bit, event: ev });
                    self.track[ev] = Track::Carried;
                }
                (Protection::Output(_), Target::Replica(r)) => replica_hits.push((r, bit, ev)),
                (Protection::Output(_), Target::SharedLogic) => shared_hits.push((bit, ev)),
            }
        }
        self.queue[boundary.index()] = queued;
        if replica_hits.is_empty() && shared_hits.is_empty() {
            return;
        }
        // Inbound faults imply a TMR producer, so the producer is hardened here.
        let mode = self.config.mode(boundary.producer());
        latch.payload =
            self.resolve(boundary.producer(), mode, cycle, latch.payload, &replica_hits, &shared_hits, flags);
    }

    fn on_retire(&mut self, cycle: u64, latch: &PipelineLatch, payload: &mut Payload, flags: &mut Vec<StageErrorFlag>) {
        if latch.carried.is_empty() {
            return;
        }
        let (replica_hits, shared_hits) = Self::split_inbound(&latch.carried);
        *payload = self.resolve(StageId::Wb, HardeningMode::Tmr, cycle, *payload, &replica_hits, &shared_hits, flags);
    }
}
