//! Cycle-level five-stage in-order pipeline.
//!
//! Full forwarding into EX from the EX/MEM and MEM/WB latches, a one-cycle
//! load-use stall detected in ID, branches and jumps resolved in EX with a
//! two-instruction squash. Stores and register writes commit in WB, so a
//! squashed instruction never reaches architectural state.
//!
//! Every latch carries a fixed 64-bit injectable payload:
//!
//! | boundary | word 0            | word 1                              |
//! |----------|-------------------|-------------------------------------|
//! | IF→ID    | instruction word  | pc                                  |
//! | ID→EX    | operand a         | operand b (register or immediate)   |
//! | EX→MEM   | ALU result / addr | store data, else write-back control |
//! | MEM→WB   | result            | store data, else write-back control |
//!
//! Write-back control is `(rd | WB_ENABLE) << 24`; WB and the forwarding
//! network take the destination from it, not from the decoded instruction.
//!
//! Within a tick the control request is applied first, then stages are
//! evaluated WB, MEM, EX, ID, IF, each against the latch values from the
//! previous cycle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::faults::{DisturbanceModel, FaultEvent, Injection, Injector};
use crate::hardening::{
    aggregate_flags, execute_recovery, FaultStatusRecord, FaultedInstr, HardeningConfig, StageErrorFlag,
};
use crate::isa::{decode, run_golden, ArchState, Instruction, IsaError, Program, Retired};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "IF")]
    If,
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "EX")]
    Ex,
    #[serde(rename = "MEM")]
    Mem,
    #[serde(rename = "WB")]
    Wb,
}

impl StageId {
    pub const ALL: [StageId; 5] = [StageId::If, StageId::Id, StageId::Ex, StageId::Mem, StageId::Wb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["IF", "ID", "EX", "MEM", "WB"][self.index()]
    }

    /// The boundary this stage writes, `None` for WB.
    pub fn output_boundary(self) -> Option<BoundaryId> {
        BoundaryId::ALL.get(self.index()).copied()
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageId::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundaryId {
    #[serde(rename = "IF->ID")]
    IfId,
    #[serde(rename = "ID->EX")]
    IdEx,
    #[serde(rename = "EX->MEM")]
    ExMem,
    #[serde(rename = "MEM->WB")]
    MemWb,
}

impl BoundaryId {
    pub const ALL: [BoundaryId; 4] = [BoundaryId::IfId, BoundaryId::IdEx, BoundaryId::ExMem, BoundaryId::MemWb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["IF->ID", "ID->EX", "EX->MEM", "MEM->WB"][self.index()]
    }

    pub fn producer(self) -> StageId {
        StageId::ALL[self.index()]
    }

    pub fn consumer(self) -> StageId {
        StageId::ALL[self.index() + 1]
    }
}

impl fmt::Display for BoundaryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundaryId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('→', "->");
        BoundaryId::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| format!("unknown boundary `{s}`"))
    }
}

/// The injectable part of a latch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload(pub [u32; 2]);

impl Payload {
    pub const BITS: u32 = 64;

    pub fn new(w0: u32, w1: u32) -> Self {
        Payload([w0, w1])
    }

    pub fn flip(self, bit: u32) -> Self {
        debug_assert!(bit < Self::BITS);
        let mut w = self.0;
        w[(bit / 32) as usize] ^= 1 << (bit % 32);
        Payload(w)
    }
}

/// A corruption held in the triplicated input registers of a TMR consumer,
/// resolved when that consumer evaluates the latch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarriedFault {
    Replica { replica: u8, bit: u32, event: usize },
    Shared { bit: u32, event: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineLatch {
    pub valid: bool,
    /// Fetch order, unique per run.
    pub seq: u64,
    /// Fetch pc as tracked by the control unit; used for replay.
    pub pc: u32,
    /// pc as seen by the datapath (from the IF→ID payload).
    pub pc_value: u32,
    /// Decoded instruction; `Nop` until ID has run.
    pub instr: Instruction,
    pub payload: Payload,
    /// Precise exception raised when the instruction retires.
    pub trap: Option<IsaError>,
    pub carried: Vec<CarriedFault>,
}

impl Default for PipelineLatch {
    fn default() -> Self {
        PipelineLatch::bubble()
    }
}

impl PipelineLatch {
    pub fn bubble() -> Self {
        PipelineLatch {
            valid: false,
            seq: 0,
            pc: 0,
            pc_value: 0,
            instr: Instruction::Nop,
            payload: Payload::default(),
            trap: None,
            carried: Vec::new(),
        }
    }

    pub fn dest(&self) -> Option<u8> {
        if self.valid && self.trap.is_none() {
            self.instr.dest()
        } else {
            None
        }
    }

    /// Destination named by the write-back control word of an EX→MEM or
    /// MEM→WB latch.
    pub fn writeback_dest(&self) -> Option<u8> {
        if !self.valid || self.trap.is_some() {
            return None;
        }
        writeback_target(self.instr, self.payload)
    }
}

/// Register-write enable bit of the write-back control byte.
pub const WB_ENABLE: u32 = 1 << 5;
const WB_SHIFT: u32 = 24;

fn writeback_word(instr: Instruction) -> u32 {
    instr.dest().map_or(0, |rd| (rd as u32 | WB_ENABLE) << WB_SHIFT)
}

fn writeback_target(instr: Instruction, payload: Payload) -> Option<u8> {
    let w = payload.0[1] >> WB_SHIFT;
    let rd = (w & 31) as u8;
    (!matches!(instr, Instruction::Store { .. }) && w & WB_ENABLE != 0 && rd != 0).then_some(rd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlRequest {
    /// Freeze IF and ID for one cycle.
    Stall { stage: StageId },
    /// Squash every in-flight instruction with `seq >= from_seq` and refetch from `pc`.
    Flush { stage: StageId, from_seq: u64, pc: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ControlState {
    #[default]
    Normal,
    Stalling,
    Flushing {
        remaining: u32,
    },
    Replaying {
        from_pc: u32,
    },
}

/// Per-boundary resolution supplied by the hardening and fault layers.
pub trait LatchHook {
    /// Called once per boundary per cycle with the value about to be latched.
    /// `inbound` holds the carried faults of the latch the producer consumed.
    fn on_latch(
        &mut self,
        boundary: BoundaryId,
        cycle: u64,
        latch: &mut PipelineLatch,
        inbound: &[CarriedFault],
        flags: &mut Vec<StageErrorFlag>,
    );

    /// Called for every valid instruction in WB before it commits.
    fn on_retire(&mut self, cycle: u64, latch: &PipelineLatch, payload: &mut Payload, flags: &mut Vec<StageErrorFlag>);
}

/// Fault-free resolution.
impl LatchHook for () {
    fn on_latch(
        &mut self,
        _: BoundaryId,
        _: u64,
        _: &mut PipelineLatch,
        _: &[CarriedFault],
        _: &mut Vec<StageErrorFlag>,
    ) {
    }
    fn on_retire(&mut self, _: u64, _: &PipelineLatch, _: &mut Payload, _: &mut Vec<StageErrorFlag>) {}
}

#[derive(Debug, Clone, Default)]
pub struct TickOutput {
    pub retired: Option<Retired>,
    pub flags: Vec<(StageErrorFlag, FaultedInstr)>,
    /// Sequence number of the instruction each stage freshly produced this
    /// cycle (for WB: the retired instruction).
    pub passes: [Option<u64>; 5],
    /// Valid instructions squashed by this cycle's control request.
    pub squashed: u32,
    pub load_use_stall: bool,
    pub branch_squash: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub arch: ArchState,
    /// Indexed by [`BoundaryId::index`].
    pub latches: [PipelineLatch; 4],
    pub cycle: u64,
    pub control: ControlState,
    pub fetch_pc: u32,
    pub next_seq: u64,
    pub halted: bool,
    pub trap: Option<IsaError>,
}

impl PipelineState {
    pub fn new(program: &Program) -> Self {
        PipelineState {
            arch: ArchState::new(program),
            latches: Default::default(),
            cycle: 0,
            control: ControlState::Normal,
            fetch_pc: program.entry,
            next_seq: 0,
            halted: false,
            trap: None,
        }
    }

    pub fn latch(&self, b: BoundaryId) -> &PipelineLatch {
        &self.latches[b.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.latches.iter().all(|l| !l.valid)
    }

    /// The oldest valid in-flight instruction.
    pub fn oldest_in_flight(&self) -> Option<FaultedInstr> {
        self.latches.iter().filter(|l| l.valid).min_by_key(|l| l.seq).map(|l| FaultedInstr { seq: l.seq, pc: l.pc })
    }

    /// Advance one cycle.
    pub fn tick(&mut self, program: &Program, hook: &mut dyn LatchHook, control: Option<ControlRequest>) -> TickOutput {
        let cycle = self.cycle;
        let mut out = TickOutput::default();
        let mut freeze_front = false;
        self.control = ControlState::Normal;
        match control {
            Some(ControlRequest::Stall { .. }) => {
                freeze_front = true;
                self.control = ControlState::Stalling;
            }
            Some(ControlRequest::Flush { from_seq, pc, .. }) => {
                for l in self.latches.iter_mut().filter(|l| l.valid && l.seq >= from_seq) {
                    *l = PipelineLatch::bubble();
                    out.squashed += 1;
                }
                self.fetch_pc = pc;
                self.control = ControlState::Replaying { from_pc: pc };
            }
            None => {}
        }

        let [if_id, id_ex, ex_mem, mem_wb] = std::mem::take(&mut self.latches);
        let mut flags = Vec::new();
        let tag = |flags: &mut Vec<StageErrorFlag>, out: &mut TickOutput, l: &PipelineLatch| {
            let f = FaultedInstr { seq: l.seq, pc: l.pc };
            out.flags.extend(flags.drain(..).map(|fl| (fl, f)));
        };

        // WB
        if mem_wb.valid {
            let mut payload = mem_wb.payload;
            hook.on_retire(cycle, &mem_wb, &mut payload, &mut flags);
            if !flags.is_empty() {
                // The voter flagged before the register write: nothing commits.
                tag(&mut flags, &mut out, &mem_wb);
            } else if let Some(e) = &mem_wb.trap {
                self.trap = Some(e.clone());
            } else {
                let commit = match mem_wb.instr {
                    Instruction::Store { .. } => self.arch.mem.store(payload.0[0], payload.0[1]),
                    i => {
                        if let Some(rd) = writeback_target(i, payload) {
                            self.arch.regs[rd as usize] = payload.0[0];
                        }
                        Ok(())
                    }
                };
                match commit {
                    Err(e) => self.trap = Some(e),
                    Ok(()) => {
                        self.arch.pc = mem_wb.pc;
                        out.retired = Some(Retired { pc: mem_wb.pc, instr: mem_wb.instr });
                        out.passes[StageId::Wb.index()] = Some(mem_wb.seq);
                        self.halted = mem_wb.instr.is_halt();
                    }
                }
            }
        }
        if self.halted || self.trap.is_some() {
            self.latches = [if_id, id_ex, ex_mem, PipelineLatch::bubble()];
            self.cycle += 1;
            return out;
        }

        // MEM
        let mut new_mem_wb = PipelineLatch::bubble();
        if ex_mem.valid {
            new_mem_wb = PipelineLatch { carried: Vec::new(), ..ex_mem.clone() };
            if matches!(ex_mem.instr, Instruction::Load { .. }) && ex_mem.trap.is_none() {
                match self.arch.mem.load(ex_mem.payload.0[0]) {
                    Ok(v) => new_mem_wb.payload.0[0] = v,
                    Err(e) => new_mem_wb.trap = Some(e),
                }
            }
            out.passes[StageId::Mem.index()] = Some(ex_mem.seq);
        }
        hook.on_latch(BoundaryId::MemWb, cycle, &mut new_mem_wb, &ex_mem.carried, &mut flags);
        tag(&mut flags, &mut out, &new_mem_wb);

        // EX
        let mut redirect = None;
        let mut new_ex_mem = PipelineLatch::bubble();
        if id_ex.valid {
            let forward = |r: u8, v: u32| -> u32 {
                if ex_mem.writeback_dest() == Some(r) && !ex_mem.instr.is_load() {
                    ex_mem.payload.0[0]
                } else if mem_wb.writeback_dest() == Some(r) {
                    mem_wb.payload.0[0]
                } else {
                    v
                }
            };
            let (s1, s2) = id_ex.instr.sources();
            let a = s1.map_or(id_ex.payload.0[0], |r| forward(r, id_ex.payload.0[0]));
            let b = s2.map_or(id_ex.payload.0[1], |r| forward(r, id_ex.payload.0[1]));
            let pcv = id_ex.pc_value;
            let (result, store) = match id_ex.instr {
                Instruction::Nop => (0, 0),
                Instruction::Alu { op, .. } => (op.apply(a, b), 0),
                Instruction::AluImm { op, .. } => (op.apply(a, b), 0),
                Instruction::Load { .. } => (a.wrapping_add(b), 0),
                Instruction::Store { imm, .. } => (a.wrapping_add(imm as u32), b),
                Instruction::Branch { cond, imm, .. } => {
                    if cond.taken(a, b) {
                        redirect = Some(pcv.wrapping_add(imm as u32));
                    }
                    (0, 0)
                }
                Instruction::Jal { .. } => {
                    redirect = Some(pcv.wrapping_add(b));
                    (pcv.wrapping_add(4), 0)
                }
                Instruction::Lui { .. } => (b, 0),
            };
            let store =
                if matches!(id_ex.instr, Instruction::Store { .. }) { store } else { writeback_word(id_ex.instr) };
            if id_ex.trap.is_some() {
                redirect = None;
            }
            new_ex_mem = PipelineLatch { payload: Payload::new(result, store), carried: Vec::new(), ..id_ex.clone() };
            out.passes[StageId::Ex.index()] = Some(id_ex.seq);
        }
        hook.on_latch(BoundaryId::ExMem, cycle, &mut new_ex_mem, &id_ex.carried, &mut flags);
        tag(&mut flags, &mut out, &new_ex_mem);
        out.branch_squash = redirect.is_some();

        // ID
        let mut stall = false;
        let mut new_id_ex = PipelineLatch::bubble();
        let mut id_consumed = false;
        if if_id.valid && redirect.is_none() && !freeze_front {
            let word = if_id.payload.0[0];
            let (instr, trap) = match decode(word) {
                Ok(i) => (i, None),
                Err(e) => (Instruction::Nop, Some(e)),
            };
            let (s1, s2) = instr.sources();
            let load_dest = if id_ex.instr.is_load() { id_ex.dest() } else { None };
            if load_dest.is_some() && (load_dest == s1 || load_dest == s2) {
                stall = true;
                out.load_use_stall = true;
            } else {
                let read = |r: Option<u8>| r.map_or(0, |r| self.arch.regs[r as usize]);
                let op_b = match (s2, instr) {
                    (Some(r), _) => self.arch.regs[r as usize],
                    (None, Instruction::AluImm { imm, .. } | Instruction::Load { imm, .. })
                    | (None, Instruction::Jal { imm, .. } | Instruction::Lui { imm, .. }) => imm as u32,
                    _ => 0,
                };
                new_id_ex = PipelineLatch {
                    valid: true,
                    seq: if_id.seq,
                    pc: if_id.pc,
                    pc_value: if_id.payload.0[1],
                    instr,
                    payload: Payload::new(read(s1), op_b),
                    trap,
                    carried: Vec::new(),
                };
                id_consumed = true;
                out.passes[StageId::Id.index()] = Some(if_id.seq);
            }
        }
        let inbound: &[CarriedFault] = if id_consumed { &if_id.carried } else { &[] };
        hook.on_latch(BoundaryId::IdEx, cycle, &mut new_id_ex, inbound, &mut flags);
        tag(&mut flags, &mut out, &new_id_ex);

        // IF
        let mut new_if_id = PipelineLatch::bubble();
        if let Some(target) = redirect {
            self.fetch_pc = target;
        } else if stall || freeze_front {
            new_if_id = if_id;
        } else if let Some(word) = program.fetch(self.fetch_pc) {
            new_if_id = PipelineLatch {
                valid: true,
                seq: self.next_seq,
                pc: self.fetch_pc,
                pc_value: self.fetch_pc,
                instr: Instruction::Nop,
                payload: Payload::new(word, self.fetch_pc),
                trap: None,
                carried: Vec::new(),
            };
            out.passes[StageId::If.index()] = Some(self.next_seq);
            self.next_seq += 1;
            self.fetch_pc = self.fetch_pc.wrapping_add(4);
        }
        hook.on_latch(BoundaryId::IfId, cycle, &mut new_if_id, &[], &mut flags);
        tag(&mut flags, &mut out, &new_if_id);

        self.latches = [new_if_id, new_id_ex, new_ex_mem, new_mem_wb];
        self.cycle += 1;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum RunStatus {
    Halted,
    Trapped(String),
    CycleLimitExceeded,
}

/// One completed recovery sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySample {
    pub stage: StageId,
    pub flag_cycle: u64,
    /// Flag assertion to control action.
    pub trigger_latency: u64,
    /// Flag assertion to the squashed work having re-passed the flagged stage.
    pub total_latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub final_state: ArchState,
    pub cycles: u64,
    pub retired: Vec<Retired>,
    /// Final state differs from the golden executor (or the run did not halt).
    pub diverged: bool,
    pub events: Vec<FaultEvent>,
    pub flags: FaultStatusRecord,
    pub recoveries: Vec<RecoverySample>,
    pub load_use_stalls: u64,
    pub branch_squashes: u64,
    pub recovery_stalls: u64,
    pub recovery_flushes: u64,
}

/// A program paired with its golden outcome, ready for repeated runs.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub program: Program,
    pub golden: ArchState,
    pub golden_trace: Vec<Retired>,
    pub max_cycles: u64,
}

struct OpenRecovery {
    stage: StageId,
    flag_cycle: u64,
    needed: u32,
    passed: u32,
    min_seq: u64,
}

impl Simulation {
    pub fn new(program: Program, max_cycles: u64) -> Result<Self, IsaError> {
        let golden = run_golden(&program, max_cycles)?;
        Ok(Simulation { program, golden: golden.state, golden_trace: golden.trace, max_cycles })
    }

    /// Clean pipeline run with a caller-supplied hook.
    pub fn run_with_hook(&self, hook: &mut dyn LatchHook) -> (PipelineState, RunStatus) {
        let mut state = PipelineState::new(&self.program);
        let status = loop {
            if let Some(s) = self.stop_status(&state, false) {
                break s;
            }
            state.tick(&self.program, hook, None);
        };
        (state, status)
    }

    fn stop_status(&self, state: &PipelineState, control_pending: bool) -> Option<RunStatus> {
        if state.halted {
            Some(RunStatus::Halted)
        } else if let Some(e) = &state.trap {
            Some(RunStatus::Trapped(e.to_string()))
        } else if state.cycle >= self.max_cycles {
            Some(RunStatus::CycleLimitExceeded)
        } else if !control_pending && state.is_empty() && self.program.fetch(state.fetch_pc).is_none() {
            Some(RunStatus::Trapped(IsaError::FetchOutOfRange(state.fetch_pc).to_string()))
        } else {
            None
        }
    }

    pub fn run(
        &self,
        config: &HardeningConfig,
        model: &DisturbanceModel,
        injection: &Injection,
        seed: u64,
    ) -> RunReport {
        let mut state = PipelineState::new(&self.program);
        let mut injector = Injector::new(config, model, injection, seed);
        let mut record = FaultStatusRecord::default();
        let mut pending: Option<(ControlRequest, StageErrorFlag)> = None;
        let mut open: Vec<OpenRecovery> = Vec::new();
        let mut recoveries = Vec::new();
        let mut retired = Vec::new();
        let (mut load_use, mut squashes, mut rstalls, mut rflushes) = (0, 0, 0, 0);

        let status = loop {
            if let Some(s) = self.stop_status(&state, pending.is_some()) {
                break s;
            }
            let cycle = state.cycle;
            injector.begin_cycle(cycle);
            let control = pending.take();
            let seq_before = state.next_seq;
            let out = state.tick(&self.program, &mut injector, control.map(|c| c.0));

            if let Some((req, flag)) = control {
                match req {
                    ControlRequest::Stall { .. } => {
                        rstalls += 1;
                        recoveries.push(RecoverySample {
                            stage: flag.stage,
                            flag_cycle: flag.cycle,
                            trigger_latency: cycle - flag.cycle,
                            total_latency: cycle - flag.cycle + 1,
                        });
                    }
                    ControlRequest::Flush { .. } => {
                        rflushes += 1;
                        let needed = out.squashed + u32::from(flag.stage == StageId::Wb);
                        open.push(OpenRecovery {
                            stage: flag.stage,
                            flag_cycle: flag.cycle,
                            needed,
                            passed: 0,
                            min_seq: seq_before,
                        });
                    }
                }
            }
            for o in open.iter_mut() {
                if out.passes[o.stage.index()].is_some_and(|s| s >= o.min_seq) {
                    o.passed += 1;
                }
            }
            open.retain(|o| {
                if o.passed >= o.needed {
                    recoveries.push(RecoverySample {
                        stage: o.stage,
                        flag_cycle: o.flag_cycle,
                        trigger_latency: 1,
                        total_latency: cycle - o.flag_cycle,
                    });
                    false
                } else {
                    true
                }
            });

            load_use += u64::from(out.load_use_stall);
            squashes += u64::from(out.branch_squash);
            if let Some(r) = out.retired {
                retired.push(r);
            }
            if !out.flags.is_empty() {
                let raised: Vec<StageErrorFlag> = out.flags.iter().map(|f| f.0).collect();
                record = aggregate_flags(&raised, record, cycle);
                let &(flag, faulted) = out.flags.iter().min_by_key(|f| (f.1.seq, f.0.stage)).expect("non-empty");
                let flag = StageErrorFlag { cycle, ..flag };
                let (req, _) = execute_recovery(config.policy, &flag, faulted, &state);
                pending = Some((req, flag));
            }
        };

        let ok = status == RunStatus::Halted && state.arch == self.golden;
        RunReport {
            status,
            cycles: state.cycle,
            final_state: state.arch,
            retired,
            diverged: !ok,
            events: injector.finish(ok),
            flags: record,
            recoveries,
            load_use_stalls: load_use,
            branch_squashes: squashes,
            recovery_stalls: rstalls,
            recovery_flushes: rflushes,
        }
    }
}

/// Convenience wrapper: golden run plus one pipeline run.
pub fn run_program(
    program: &Program,
    config: &HardeningConfig,
    model: &DisturbanceModel,
    injection: &Injection,
    seed: u64,
    max_cycles: u64,
) -> Result<RunReport, IsaError> {
    Ok(Simulation::new(program.clone(), max_cycles)?.run(config, model, injection, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faults::{DirectedEvent, OutcomeClass};
    use crate::isa::{AluOp, HALT_WORD};
    use crate::workload::WorkloadSpec;

    fn prog(instrs: &[Instruction]) -> Program {
        Program::from_instructions(instrs).unwrap()
    }

    fn addi(rd: u8, rs1: u8, imm: i32) -> Instruction {
        Instruction::AluImm { op: AluOp::Add, rd, rs1, imm }
    }

    const HALT: Instruction = Instruction::Jal { rd: 0, imm: 0 };

    fn clean(p: &Program) -> RunReport {
        let sim = Simulation::new(p.clone(), 10_000).unwrap();
        sim.run(&HardeningConfig::baseline(), &DisturbanceModel::zero(), &Injection::None, 0)
    }

    #[test]
    fn fill_issues_one_fetch() {
        let p = prog(&[HALT]);
        let mut s = PipelineState::new(&p);
        let out = s.tick(&p, &mut (), None);
        assert!(out.retired.is_none());
        assert!(s.latch(BoundaryId::IfId).valid);
        assert_eq!(s.latch(BoundaryId::IfId).payload, Payload::new(HALT_WORD, 0));
        assert!(!s.latch(BoundaryId::IdEx).valid);
        assert_eq!(s.cycle, 1);
    }

    #[test]
    fn load_use_inserts_one_stall() {
        let dependent = prog(&[
            Instruction::Load { rd: 1, rs1: 0, imm: 0 },
            Instruction::Alu { op: AluOp::Add, rd: 2, rs1: 1, rs2: 1 },
            HALT,
        ])
        .with_data([(0, 21)].into())
        .unwrap();
        let independent = prog(&[
            Instruction::Load { rd: 1, rs1: 0, imm: 0 },
            Instruction::Alu { op: AluOp::Add, rd: 2, rs1: 3, rs2: 3 },
            HALT,
        ]);
        let a = clean(&dependent);
        let b = clean(&independent);
        assert_eq!(a.load_use_stalls, 1);
        assert_eq!(b.load_use_stalls, 0);
        assert_eq!(a.cycles, b.cycles + 1);
        assert_eq!(a.final_state.regs[2], 42);
        assert!(!a.diverged);
    }

    #[test]
    fn forwarding_paths_match_golden() {
        let p = prog(&[
            addi(1, 0, 7),
            Instruction::Alu { op: AluOp::Add, rd: 2, rs1: 1, rs2: 1 },
            Instruction::Alu { op: AluOp::Sub, rd: 3, rs1: 2, rs2: 1 },
            Instruction::Store { rs1: 0, rs2: 3, imm: 16 },
            Instruction::Load { rd: 4, rs1: 0, imm: 16 },
            Instruction::Branch { cond: crate::isa::BranchCond::Eq, rs1: 4, rs2: 1, imm: 8 },
            addi(5, 0, 99),
            Instruction::Jal { rd: 6, imm: 8 },
            addi(7, 0, 1),
            HALT,
        ]);
        let r = clean(&p);
        assert_eq!(r.status, RunStatus::Halted);
        assert!(!r.diverged);
        assert_eq!(r.final_state.regs[4], 7);
        assert_eq!(r.final_state.regs[5], 0);
        assert_eq!(r.final_state.regs[6], 32);
        assert_eq!(r.final_state.regs[7], 0);
        let sim = Simulation::new(p, 1000).unwrap();
        assert_eq!(r.retired, sim.golden_trace);
    }

    #[test]
    fn flush_invalidates_faulted_and_younger() {
        let p = prog(&[addi(1, 0, 1), addi(2, 0, 2), addi(3, 0, 3), addi(4, 0, 4), HALT]);
        let mut s = PipelineState::new(&p);
        for _ in 0..4 {
            s.tick(&p, &mut (), None);
        }
        // seq 0 in MEM->WB, 1 in EX->MEM, 2 in ID->EX, 3 in IF->ID
        let ex = s.latch(BoundaryId::ExMem).clone();
        assert_eq!(ex.seq, 1);
        let out = s.tick(&p, &mut (), Some(ControlRequest::Flush { stage: StageId::Ex, from_seq: ex.seq, pc: ex.pc }));
        assert_eq!(out.squashed, 3);
        assert_eq!(out.retired.map(|r| r.pc), Some(0));
        assert_eq!(s.control, ControlState::Replaying { from_pc: 4 });
        // only the refetched instruction is in flight
        assert_eq!(s.latches.iter().filter(|l| l.valid).count(), 1);
        assert_eq!(s.latch(BoundaryId::IfId).pc, 4);
    }

    #[test]
    fn zero_injection_matches_golden() {
        let spec = WorkloadSpec::default();
        for seed in 0..40 {
            let p = spec.generate(seed);
            for config in HardeningConfig::canonical() {
                let sim = Simulation::new(p.clone(), 20_000).unwrap();
                let r = sim.run(&config, &DisturbanceModel::paper(), &Injection::None, seed);
                assert!(!r.diverged, "seed {seed} config {}", config.name);
                assert_eq!(r.final_state, sim.golden);
                assert_eq!(r.retired, sim.golden_trace);
                assert_eq!(r.flags.total(), 0);
            }
        }
    }

    fn one_event(cycle: u64, boundary: BoundaryId, bit: u32, u_target: f64) -> Injection {
        Injection::Directed(vec![DirectedEvent { cycle, boundary, bit, u_target, u_manifest: 0.0 }])
    }

    // addi x1 is in EX during cycle 2, so its result sits in EX->MEM at the end of cycle 2.
    fn live_dest_program() -> Program {
        prog(&[addi(1, 0, 5), addi(2, 0, 6), Instruction::Nop, Instruction::Nop, HALT])
    }

    #[test]
    fn baseline_corruption_is_silent() {
        let sim = Simulation::new(live_dest_program(), 1000).unwrap();
        let inj = one_event(2, BoundaryId::ExMem, 0, 0.5);
        let r = sim.run(&HardeningConfig::baseline(), &DisturbanceModel::paper(), &inj, 1);
        assert!(r.diverged);
        assert_eq!(r.final_state.regs[1], 4);
        assert_eq!(r.flags.total(), 0);
        assert_eq!(r.events[0].outcome, OutcomeClass::SilentDataCorruption);
    }

    #[test]
    fn tmr_masks_single_replica() {
        let sim = Simulation::new(live_dest_program(), 1000).unwrap();
        let inj = one_event(2, BoundaryId::ExMem, 0, 0.5);
        let r = sim.run(&HardeningConfig::selective_tmr(), &DisturbanceModel::paper(), &inj, 1);
        assert!(!r.diverged);
        assert_eq!(r.flags.total(), 0);
        assert_eq!(r.events[0].outcome, OutcomeClass::MaskedSilent);
    }

    #[test]
    fn duplicate_detects_and_replays() {
        let sim = Simulation::new(live_dest_program(), 1000).unwrap();
        let inj = one_event(2, BoundaryId::ExMem, 0, 0.1);
        let r = sim.run(&HardeningConfig::selective_duplicate(), &DisturbanceModel::paper(), &inj, 1);
        assert!(!r.diverged);
        assert_eq!(r.flags.counter(StageId::Ex), 1);
        assert_eq!(r.flags.entries[0].cycle, 2);
        assert_eq!(r.events[0].outcome, OutcomeClass::DetectedRecovered);
        assert_eq!(r.recoveries.len(), 1);
        assert_eq!(r.recoveries[0].trigger_latency, 1);
        // x1, x2 and the first nop were squashed and re-pass EX at cycles 5, 6, 7
        assert_eq!(r.recoveries[0].total_latency, 5);
        assert_eq!(r.retired, sim.golden_trace);
    }

    #[test]
    fn tmr_shared_strike_is_flagged() {
        let sim = Simulation::new(live_dest_program(), 1000).unwrap();
        let inj = one_event(2, BoundaryId::ExMem, 0, 0.0);
        let r = sim.run(&HardeningConfig::selective_tmr(), &DisturbanceModel::paper(), &inj, 1);
        assert!(!r.diverged);
        assert_eq!(r.flags.total(), 1);
        assert_eq!(r.events[0].outcome, OutcomeClass::DetectedRecovered);
    }

    #[test]
    fn bubble_strike_is_benign() {
        let sim = Simulation::new(live_dest_program(), 1000).unwrap();
        // EX->MEM is still empty at the end of cycle 0
        let inj = one_event(0, BoundaryId::ExMem, 0, 0.5);
        let r = sim.run(&HardeningConfig::baseline(), &DisturbanceModel::paper(), &inj, 1);
        assert!(!r.diverged);
        assert!(r.events[0].manifested);
        assert_eq!(r.events[0].outcome, OutcomeClass::Benign);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = WorkloadSpec::default().generate(3);
        let sim = Simulation::new(p, 20_000).unwrap();
        let inj = Injection::Stochastic { margin: -0.3 };
        let mut m = DisturbanceModel::paper();
        m.rate_scale = 20.0;
        let a = sim.run(&HardeningConfig::selective_tmr(), &m, &inj, 77);
        let b = sim.run(&HardeningConfig::selective_tmr(), &m, &inj, 77);
        assert_eq!(a, b);
        assert!(!a.events.is_empty());
    }
}
