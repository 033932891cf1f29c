//! Stage hardening: duplication with comparison, triple modular redundancy
//! with majority voting, error flags, the error aggregator / fault status
//! record, and the recovery policies the control unit executes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::pipeline::{ControlRequest, Payload, PipelineState, StageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardeningMode {
    Unhardened,
    Duplicate,
    Tmr,
}

impl HardeningMode {
    pub const ALL: [HardeningMode; 3] = [HardeningMode::Unhardened, HardeningMode::Duplicate, HardeningMode::Tmr];

    pub fn replicas(self) -> u8 {
        match self {
            HardeningMode::Unhardened => 1,
            HardeningMode::Duplicate => 2,
            HardeningMode::Tmr => 3,
        }
    }

    pub fn short(self) -> char {
        match self {
            HardeningMode::Unhardened => 'U',
            HardeningMode::Duplicate => 'D',
            HardeningMode::Tmr => 'T',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPolicy {
    /// Hold the front end for one cycle. Logs the fault, repairs nothing.
    Stall,
    /// Squash the whole pipeline and refetch from the oldest in-flight instruction.
    Flush,
    /// Squash the faulted instruction and everything younger, refetch from its pc.
    #[default]
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoterFlagging {
    #[default]
    SilentMask,
    FlagOnDisagreement,
}

/// Per-run hardening configuration register. Immutable for the run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardeningConfig {
    #[serde(default)]
    pub name: String,
    /// Modes indexed by [`StageId::index`].
    #[serde(with = "stage_modes")]
    pub modes: [HardeningMode; 5],
    #[serde(default)]
    pub policy: RecoveryPolicy,
    #[serde(default)]
    pub voter_flagging: VoterFlagging,
}

impl Default for HardeningConfig {
    fn default() -> Self {
        HardeningConfig::baseline()
    }
}

impl HardeningConfig {
    pub fn uniform(name: &str, mode: HardeningMode) -> Self {
        HardeningConfig {
            name: name.to_string(),
            modes: [mode; 5],
            policy: RecoveryPolicy::default(),
            voter_flagging: VoterFlagging::default(),
        }
    }

    pub fn baseline() -> Self {
        HardeningConfig::uniform("baseline", HardeningMode::Unhardened)
    }

    fn ex_mem(name: &str, mode: HardeningMode) -> Self {
        let mut c = HardeningConfig::baseline();
        c.name = name.to_string();
        c.modes[StageId::Ex.index()] = mode;
        c.modes[StageId::Mem.index()] = mode;
        c
    }

    /// Duplication with comparison on EX and MEM.
    pub fn selective_duplicate() -> Self {
        HardeningConfig::ex_mem("sel-dup", HardeningMode::Duplicate)
    }

    /// TMR on EX and MEM.
    pub fn selective_tmr() -> Self {
        HardeningConfig::ex_mem("sel-tmr", HardeningMode::Tmr)
    }

    /// Reference full-core duplication.
    pub fn full_duplicate() -> Self {
        HardeningConfig::uniform("full-dup", HardeningMode::Duplicate)
    }

    pub fn full_tmr() -> Self {
        HardeningConfig::uniform("full-tmr", HardeningMode::Tmr)
    }

    /// The four evaluated configurations plus full-core TMR.
    pub fn canonical() -> Vec<HardeningConfig> {
        vec![
            HardeningConfig::baseline(),
            HardeningConfig::selective_duplicate(),
            HardeningConfig::selective_tmr(),
            HardeningConfig::full_duplicate(),
            HardeningConfig::full_tmr(),
        ]
    }

    pub fn named(name: &str) -> Option<HardeningConfig> {
        HardeningConfig::canonical().into_iter().find(|c| c.name == name)
    }

    pub fn mode(&self, stage: StageId) -> HardeningMode {
        self.modes[stage.index()]
    }

    pub fn with_policy(mut self, policy: RecoveryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_voter_flagging(mut self, flagging: VoterFlagging) -> Self {
        self.voter_flagging = flagging;
        self
    }

    pub fn is_baseline(&self) -> bool {
        self.modes.iter().all(|&m| m == HardeningMode::Unhardened)
    }

    /// Compact mode string in stage order, e.g. `UUTTU`.
    pub fn mode_string(&self) -> String {
        self.modes.iter().map(|m| m.short()).collect()
    }

    /// Parse a compact mode string such as `UUDDU`.
    pub fn from_mode_string(name: &str, s: &str) -> Option<HardeningConfig> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 5 {
            return None;
        }
        let mut modes = [HardeningMode::Unhardened; 5];
        for (m, c) in modes.iter_mut().zip(chars) {
            *m = match c.to_ascii_uppercase() {
                'U' => HardeningMode::Unhardened,
                'D' => HardeningMode::Duplicate,
                'T' => HardeningMode::Tmr,
                _ => return None,
            };
        }
        Some(HardeningConfig { name: name.to_string(), modes, ..HardeningConfig::baseline() })
    }
}

mod stage_modes {
    use super::HardeningMode;
    use crate::pipeline::StageId;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(modes: &[HardeningMode; 5], s: S) -> Result<S::Ok, S::Error> {
        let map: indexmap_free::Ordered = StageId::ALL.iter().map(|st| (st.name(), modes[st.index()])).collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[HardeningMode; 5], D::Error> {
        let map = BTreeMap::<String, HardeningMode>::deserialize(d)?;
        let mut modes = [HardeningMode::Unhardened; 5];
        for (k, v) in map {
            let stage: StageId = k.parse().map_err(D::Error::custom)?;
            modes[stage.index()] = v;
        }
        Ok(modes)
    }

    /// Serializes as a JSON object in pipeline order.
    pub mod indexmap_free {
        use super::HardeningMode;
        use serde::ser::SerializeMap;
        use serde::{Serialize, Serializer};

        pub struct Ordered(Vec<(&'static str, HardeningMode)>);

        impl FromIterator<(&'static str, HardeningMode)> for Ordered {
            fn from_iter<I: IntoIterator<Item = (&'static str, HardeningMode)>>(iter: I) -> Self {
                Ordered(iter.into_iter().collect())
            }
        }

        impl Serialize for Ordered {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.len()))?;
                for (k, v) in &self.0 {
                    m.serialize_entry(k, v)?;
                }
                m.end()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    Mismatch,
    VoterDisagreement,
    VoterUnresolvable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageErrorFlag {
    pub stage: StageId,
    pub cycle: u64,
    pub kind: FlagKind,
}

impl fmt::Display for StageErrorFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_Error_Flag({:?}) @{}", self.stage.name(), self.kind, self.cycle)
    }
}

/// Comparator: flag iff the replicas differ; replica A is propagated.
pub fn compare_duplicate(a: Payload, b: Payload) -> (Payload, bool) {
    (a, a != b)
}

/// Outcome of a three-way vote, before flagging policy is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vote {
    Unanimous,
    /// Majority found; `outvoted` is the dissenting replica.
    Majority {
        outvoted: u8,
    },
    /// All three differ.
    Split,
}

pub fn vote(a: Payload, b: Payload, c: Payload) -> (Payload, Vote) {
    match (a == b, b == c, a == c) {
        (true, true, _) => (a, Vote::Unanimous),
        (true, false, _) => (a, Vote::Majority { outvoted: 2 }),
        (false, true, _) => (b, Vote::Majority { outvoted: 0 }),
        (false, false, true) => (a, Vote::Majority { outvoted: 1 }),
        (false, false, false) => (a, Vote::Split),
    }
}

/// Majority voter. A three-way split propagates replica A and always flags.
pub fn vote_tmr(
    a: Payload,
    b: Payload,
    c: Payload,
    stage: StageId,
    cycle: u64,
    flagging: VoterFlagging,
) -> (Payload, Option<StageErrorFlag>) {
    let (out, v) = vote(a, b, c);
    let kind = match v {
        Vote::Unanimous => None,
        Vote::Majority { .. } => match flagging {
            VoterFlagging::SilentMask => None,
            VoterFlagging::FlagOnDisagreement => Some(FlagKind::VoterDisagreement),
        },
        Vote::Split => Some(FlagKind::VoterUnresolvable),
    };
    (out, kind.map(|kind| StageErrorFlag { stage, cycle, kind }))
}

/// Fault status registers: per-stage counters plus a timestamped log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStatusRecord {
    pub counters: [u64; 5],
    pub entries: Vec<StageErrorFlag>,
}

impl FaultStatusRecord {
    pub fn total(&self) -> u64 {
        self.counters.iter().sum()
    }

    pub fn counter(&self, stage: StageId) -> u64 {
        self.counters[stage.index()]
    }
}

/// Error aggregator. Appends this cycle's flags in stage order, stamped
/// with `cycle`.
pub fn aggregate_flags(flags: &[StageErrorFlag], mut record: FaultStatusRecord, cycle: u64) -> FaultStatusRecord {
    let mut sorted: Vec<StageErrorFlag> = flags.iter().map(|f| StageErrorFlag { cycle, ..*f }).collect();
    sorted.sort_by_key(|f| f.stage);
    for f in sorted {
        record.counters[f.stage.index()] += 1;
        record.entries.push(f);
    }
    record
}

/// Cycles from flag assertion to the control action taking effect.
pub const TRIGGER_LATENCY: u64 = 1;

/// Identity of the instruction a flag was raised against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultedInstr {
    pub seq: u64,
    pub pc: u32,
}

/// Pick the control action for a freshly recorded flag. The request is
/// applied at the next clock boundary.
pub fn execute_recovery(
    policy: RecoveryPolicy,
    flag: &StageErrorFlag,
    faulted: FaultedInstr,
    pipeline: &PipelineState,
) -> (ControlRequest, u64) {
    let req = match policy {
        RecoveryPolicy::Stall => ControlRequest::Stall { stage: flag.stage },
        RecoveryPolicy::Replay => ControlRequest::Flush { stage: flag.stage, from_seq: faulted.seq, pc: faulted.pc },
        RecoveryPolicy::Flush => {
            let oldest = pipeline.oldest_in_flight().filter(|o| o.seq < faulted.seq).unwrap_or(faulted);
            ControlRequest::Flush { stage: flag.stage, from_seq: oldest.seq, pc: oldest.pc }
        }
    };
    (req, TRIGGER_LATENCY)
}

impl FromStr for HardeningMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unhardened" | "none" | "u" => Ok(HardeningMode::Unhardened),
            "duplicate" | "dup" | "d" => Ok(HardeningMode::Duplicate),
            "tmr" | "t" => Ok(HardeningMode::Tmr),
            _ => Err(format!("unknown hardening mode `{s}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: u32) -> Payload {
        Payload::new(v, 0)
    }

    #[test]
    fn comparator_cases() {
        assert_eq!(compare_duplicate(p(9), p(9)), (p(9), false));
        assert_eq!(compare_duplicate(p(9), p(13)), (p(9), true));
    }

    #[test]
    fn voter_cases() {
        let sm = VoterFlagging::SilentMask;
        let fd = VoterFlagging::FlagOnDisagreement;
        assert_eq!(vote_tmr(p(5), p(5), p(5), StageId::Ex, 0, fd), (p(5), None));
        assert_eq!(vote_tmr(p(5), p(7), p(5), StageId::Ex, 0, sm), (p(5), None));
        let (out, flag) = vote_tmr(p(5), p(7), p(5), StageId::Ex, 3, fd);
        assert_eq!(out, p(5));
        assert_eq!(flag.unwrap().kind, FlagKind::VoterDisagreement);
        for flagging in [sm, fd] {
            let (out, flag) = vote_tmr(p(1), p(2), p(3), StageId::Mem, 0, flagging);
            assert_eq!(out, p(1));
            assert_eq!(flag.unwrap().kind, FlagKind::VoterUnresolvable);
        }
    }

    #[test]
    fn voter_picks_majority_in_every_position() {
        for odd in 0..3u8 {
            let mut r = [p(4); 3];
            r[odd as usize] = p(99);
            assert_eq!(vote(r[0], r[1], r[2]), (p(4), Vote::Majority { outvoted: odd }));
        }
    }

    #[test]
    fn tmr_failure_probability_by_enumeration() {
        // Enumerate all 2^3 corruption patterns, corrupt values distinct.
        let q = 0.1f64;
        let mut wrong = 0.0;
        for mask in 0u32..8 {
            let r: Vec<Payload> = (0..3).map(|i| if mask >> i & 1 == 1 { p(100 + i) } else { p(7) }).collect();
            let (out, v) = vote(r[0], r[1], r[2]);
            let k = mask.count_ones() as i32;
            let prob = q.powi(k) * (1.0 - q).powi(3 - k);
            if out != p(7) || v == Vote::Split {
                wrong += prob;
            }
        }
        let closed = 3.0 * q * q * (1.0 - q) + q.powi(3);
        assert!((wrong - closed).abs() < 1e-12);
        assert!((wrong - 0.028).abs() < 1e-12);
    }

    #[test]
    fn aggregator_orders_by_stage() {
        let rec = aggregate_flags(&[], FaultStatusRecord::default(), 5);
        assert_eq!(rec, FaultStatusRecord::default());
        let flags = [
            StageErrorFlag { stage: StageId::Mem, cycle: 0, kind: FlagKind::Mismatch },
            StageErrorFlag { stage: StageId::Ex, cycle: 0, kind: FlagKind::Mismatch },
        ];
        let rec = aggregate_flags(&flags, FaultStatusRecord::default(), 17);
        assert_eq!(rec.counter(StageId::Ex), 1);
        assert_eq!(rec.counter(StageId::Mem), 1);
        assert_eq!(rec.entries[0].stage, StageId::Ex);
        assert!(rec.entries.iter().all(|f| f.cycle == 17));
    }

    #[test]
    fn canonical_configs() {
        assert!(HardeningConfig::baseline().is_baseline());
        assert_eq!(HardeningConfig::selective_duplicate().mode_string(), "UUDDU");
        assert_eq!(HardeningConfig::selective_tmr().mode_string(), "UUTTU");
        assert_eq!(HardeningConfig::full_duplicate().mode_string(), "DDDDD");
        assert_eq!(HardeningConfig::named("sel-tmr"), Some(HardeningConfig::selective_tmr()));
    }

    #[test]
    fn config_json_round_trip() {
        let c = HardeningConfig::selective_tmr().with_voter_flagging(VoterFlagging::FlagOnDisagreement);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"EX\":\"tmr\""), "{s}");
        let back: HardeningConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: HardeningConfig = serde_json::from_str(r#"{"modes":{"MEM":"duplicate"}}"#).unwrap();
        assert_eq!(partial.mode_string(), "UUUDU");
        assert_eq!(partial.policy, RecoveryPolicy::Replay);
    }
}
