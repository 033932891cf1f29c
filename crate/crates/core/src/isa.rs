//! RV32I subset: instruction model, encoder/decoder, program files and the
//! single-cycle golden executor.
//!
//! The golden executor is the reference every fault outcome is judged
//! against, so it is intentionally simple: one instruction per step, no
//! timing.
//!
//! Supported instructions: `ADD SUB AND OR XOR SLT`, the immediate forms
//! `ADDI ANDI ORI XORI SLTI`, `LW`, `SW`, `BEQ`, `BNE`, `JAL`, `LUI`. The
//! self-jump `JAL x0, 0` is the halt instruction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default data-memory bound in bytes (64 KiB).
pub const DEFAULT_MEM_BYTES: u32 = 64 * 1024;

/// Encoding of the canonical NOP, `ADDI x0, x0, 0`.
pub const NOP_WORD: u32 = 0x0000_0013;

/// Encoding of the halt instruction, `JAL x0, 0`.
pub const HALT_WORD: u32 = 0x0000_006F;

const OP_REG: u32 = 0x33;
const OP_IMM: u32 = 0x13;
const OP_LOAD: u32 = 0x03;
const OP_STORE: u32 = 0x23;
const OP_BRANCH: u32 = 0x63;
const OP_JAL: u32 = 0x6F;
const OP_LUI: u32 = 0x37;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("unsupported encoding {0:#010x}")]
    UnsupportedEncoding(u32),
    #[error("malformed encoding {0:#010x}")]
    MalformedEncoding(u32),
    #[error("instruction cannot be encoded: {0}")]
    Unencodable(String),
    #[error("memory access out of range at {0:#x}")]
    OutOfRangeAccess(u32),
    #[error("misaligned memory access at {0:#x}")]
    MisalignedAccess(u32),
    #[error("instruction fetch outside program at pc {0:#x}")]
    FetchOutOfRange(u32),
    #[error("cycle limit of {0} exceeded")]
    CycleLimitExceeded(u64),
    #[error("program parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("program is empty")]
    EmptyProgram,
}

pub type Result<T, E = IsaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Slt,
}

impl AluOp {
    pub const ALL: [AluOp; 6] = [AluOp::Add, AluOp::Sub, AluOp::And, AluOp::Or, AluOp::Xor, AluOp::Slt];

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Slt => ((a as i32) < (b as i32)) as u32,
        }
    }

    fn funct3(self) -> u32 {
        match self {
            AluOp::Add | AluOp::Sub => 0b000,
            AluOp::Slt => 0b010,
            AluOp::Xor => 0b100,
            AluOp::Or => 0b110,
            AluOp::And => 0b111,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchCond {
    Eq,
    Ne,
}

impl BranchCond {
    pub fn taken(self, a: u32, b: u32) -> bool {
        match self {
            BranchCond::Eq => a == b,
            BranchCond::Ne => a != b,
        }
    }
}

/// Decoded instruction. Register fields are always `< 32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    /// `ADDI x0, x0, 0`.
    Nop,
    Alu {
        op: AluOp,
        rd: u8,
        rs1: u8,
        rs2: u8,
    },
    /// Immediate ALU form; `op` is never `Sub`.
    AluImm {
        op: AluOp,
        rd: u8,
        rs1: u8,
        imm: i32,
    },
    Load {
        rd: u8,
        rs1: u8,
        imm: i32,
    },
    Store {
        rs1: u8,
        rs2: u8,
        imm: i32,
    },
    Branch {
        cond: BranchCond,
        rs1: u8,
        rs2: u8,
        imm: i32,
    },
    Jal {
        rd: u8,
        imm: i32,
    },
    /// `imm` holds the full 32-bit value written to `rd` (low 12 bits zero).
    Lui {
        rd: u8,
        imm: i32,
    },
}

/// Coarse instruction class, used by the workload generator and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    AluReg,
    AluImm,
    Load,
    Store,
    Branch,
    Jal,
    Lui,
    Nop,
}

impl Instruction {
    pub fn class(&self) -> OpClass {
        match self {
            Instruction::Nop => OpClass::Nop,
            Instruction::Alu { .. } => OpClass::AluReg,
            Instruction::AluImm { .. } => OpClass::AluImm,
            Instruction::Load { .. } => OpClass::Load,
            Instruction::Store { .. } => OpClass::Store,
            Instruction::Branch { .. } => OpClass::Branch,
            Instruction::Jal { .. } => OpClass::Jal,
            Instruction::Lui { .. } => OpClass::Lui,
        }
    }

    pub fn is_halt(&self) -> bool {
        matches!(self, Instruction::Jal { rd: 0, imm: 0 })
    }

    /// Destination register, if the instruction writes one (x0 excluded).
    pub fn dest(&self) -> Option<u8> {
        let rd = match *self {
            Instruction::Alu { rd, .. }
            | Instruction::AluImm { rd, .. }
            | Instruction::Load { rd, .. }
            | Instruction::Jal { rd, .. }
            | Instruction::Lui { rd, .. } => rd,
            _ => return None,
        };
        (rd != 0).then_some(rd)
    }

    /// Source registers read by the instruction (x0 included when named).
    pub fn sources(&self) -> (Option<u8>, Option<u8>) {
        match *self {
            Instruction::Alu { rs1, rs2, .. }
            | Instruction::Store { rs1, rs2, .. }
            | Instruction::Branch { rs1, rs2, .. } => (Some(rs1), Some(rs2)),
            Instruction::AluImm { rs1, .. } | Instruction::Load { rs1, .. } => (Some(rs1), None),
            _ => (None, None),
        }
    }

    pub fn is_load(&self) -> bool {
        matches!(self, Instruction::Load { .. })
    }

    /// Re-encode into a 32-bit word.
    pub fn encode(&self) -> Result<u32> {
        fn reg(r: u8) -> Result<u32> {
            if r < 32 {
                Ok(r as u32)
            } else {
                Err(IsaError::Unencodable(format!("register x{r}")))
            }
        }
        fn imm12(imm: i32) -> Result<u32> {
            if (-2048..=2047).contains(&imm) {
                Ok((imm as u32) & 0xFFF)
            } else {
                Err(IsaError::Unencodable(format!("12-bit immediate {imm}")))
            }
        }
        Ok(match *self {
            Instruction::Nop => NOP_WORD,
            Instruction::Alu { op, rd, rs1, rs2 } => {
                let f7 = if op == AluOp::Sub { 0x20 } else { 0 };
                (f7 << 25) | (reg(rs2)? << 20) | (reg(rs1)? << 15) | (op.funct3() << 12) | (reg(rd)? << 7) | OP_REG
            }
            Instruction::AluImm { op, rd, rs1, imm } => {
                if op == AluOp::Sub {
                    return Err(IsaError::Unencodable("SUB has no immediate form".into()));
                }
                (imm12(imm)? << 20) | (reg(rs1)? << 15) | (op.funct3() << 12) | (reg(rd)? << 7) | OP_IMM
            }
            Instruction::Load { rd, rs1, imm } => {
                (imm12(imm)? << 20) | (reg(rs1)? << 15) | (0b010 << 12) | (reg(rd)? << 7) | OP_LOAD
            }
            Instruction::Store { rs1, rs2, imm } => {
                let i = imm12(imm)?;
                ((i >> 5) << 25) | (reg(rs2)? << 20) | (reg(rs1)? << 15) | (0b010 << 12) | ((i & 0x1F) << 7) | OP_STORE
            }
            Instruction::Branch { cond, rs1, rs2, imm } => {
                if !(-4096..=4094).contains(&imm) || imm & 1 != 0 {
                    return Err(IsaError::Unencodable(format!("branch offset {imm}")));
                }
                let i = imm as u32;
                let f3 = match cond {
                    BranchCond::Eq => 0b000,
                    BranchCond::Ne => 0b001,
                };
                (((i >> 12) & 1) << 31)
                    | (((i >> 5) & 0x3F) << 25)
                    | (reg(rs2)? << 20)
                    | (reg(rs1)? << 15)
                    | (f3 << 12)
                    | (((i >> 1) & 0xF) << 8)
                    | (((i >> 11) & 1) << 7)
                    | OP_BRANCH
            }
            Instruction::Jal { rd, imm } => {
                if !(-(1 << 20)..(1 << 20)).contains(&imm) || imm & 1 != 0 {
                    return Err(IsaError::Unencodable(format!("jump offset {imm}")));
                }
                let i = imm as u32;
                (((i >> 20) & 1) << 31)
                    | (((i >> 1) & 0x3FF) << 21)
                    | (((i >> 11) & 1) << 20)
                    | (((i >> 12) & 0xFF) << 12)
                    | (reg(rd)? << 7)
                    | OP_JAL
            }
            Instruction::Lui { rd, imm } => {
                if imm & 0xFFF != 0 {
                    return Err(IsaError::Unencodable(format!("LUI value {imm:#x} has low bits set")));
                }
                (imm as u32) | (reg(rd)? << 7) | OP_LUI
            }
        })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::Nop => write!(f, "nop"),
            Instruction::Alu { op, rd, rs1, rs2 } => {
                write!(f, "{} x{rd}, x{rs1}, x{rs2}", format!("{op:?}").to_lowercase())
            }
            Instruction::AluImm { op, rd, rs1, imm } => {
                write!(f, "{}i x{rd}, x{rs1}, {imm}", format!("{op:?}").to_lowercase())
            }
            Instruction::Load { rd, rs1, imm } => write!(f, "lw x{rd}, {imm}(x{rs1})"),
            Instruction::Store { rs1, rs2, imm } => write!(f, "sw x{rs2}, {imm}(x{rs1})"),
            Instruction::Branch { cond, rs1, rs2, imm } => {
                let m = if cond == BranchCond::Eq { "beq" } else { "bne" };
                write!(f, "{m} x{rs1}, x{rs2}, {imm}")
            }
            Instruction::Jal { rd, imm } => write!(f, "jal x{rd}, {imm}"),
            Instruction::Lui { rd, imm } => write!(f, "lui x{rd}, {:#x}", (imm as u32) >> 12),
        }
    }
}

fn sext(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

/// Decode a 32-bit word.
///
/// Words whose opcode is a legal RV32 major opcode outside the subset (or a
/// legal function code the subset omits) are `UnsupportedEncoding`; reserved
/// bit patterns are `MalformedEncoding`.
pub fn decode(word: u32) -> Result<Instruction> {
    if word & 0b11 != 0b11 {
        // 16-bit compressed space.
        return Err(IsaError::UnsupportedEncoding(word));
    }
    if (word >> 2) & 0b111 == 0b111 {
        // Reserved for instructions longer than 32 bits.
        return Err(IsaError::MalformedEncoding(word));
    }
    let opcode = word & 0x7F;
    let rd = ((word >> 7) & 0x1F) as u8;
    let funct3 = (word >> 12) & 0x7;
    let rs1 = ((word >> 15) & 0x1F) as u8;
    let rs2 = ((word >> 20) & 0x1F) as u8;
    let funct7 = word >> 25;
    let i_imm = sext(word >> 20, 12);

    match opcode {
        OP_REG => {
            let op = match (funct7, funct3) {
                (0x00, 0b000) => AluOp::Add,
                (0x20, 0b000) => AluOp::Sub,
                (0x00, 0b111) => AluOp::And,
                (0x00, 0b110) => AluOp::Or,
                (0x00, 0b100) => AluOp::Xor,
                (0x00, 0b010) => AluOp::Slt,
                (0x00, _) | (0x20, 0b101) | (0x01, _) => return Err(IsaError::UnsupportedEncoding(word)),
                _ => return Err(IsaError::MalformedEncoding(word)),
            };
            Ok(Instruction::Alu { op, rd, rs1, rs2 })
        }
        OP_IMM => {
            let op = match funct3 {
                0b000 => AluOp::Add,
                0b111 => AluOp::And,
                0b110 => AluOp::Or,
                0b100 => AluOp::Xor,
                0b010 => AluOp::Slt,
                _ => return Err(IsaError::UnsupportedEncoding(word)),
            };
            if word == NOP_WORD {
                return Ok(Instruction::Nop);
            }
            Ok(Instruction::AluImm { op, rd, rs1, imm: i_imm })
        }
        OP_LOAD => match funct3 {
            0b010 => Ok(Instruction::Load { rd, rs1, imm: i_imm }),
            0b000 | 0b001 | 0b011 | 0b100 | 0b101 => Err(IsaError::UnsupportedEncoding(word)),
            _ => Err(IsaError::MalformedEncoding(word)),
        },
        OP_STORE => match funct3 {
            0b010 => {
                let imm = sext(((word >> 25) << 5) | ((word >> 7) & 0x1F), 12);
                Ok(Instruction::Store { rs1, rs2, imm })
            }
            0b000 | 0b001 | 0b011 => Err(IsaError::UnsupportedEncoding(word)),
            _ => Err(IsaError::MalformedEncoding(word)),
        },
        OP_BRANCH => {
            let cond = match funct3 {
                0b000 => BranchCond::Eq,
                0b001 => BranchCond::Ne,
                0b100..=0b111 => return Err(IsaError::UnsupportedEncoding(word)),
                _ => return Err(IsaError::MalformedEncoding(word)),
            };
            let raw = (((word >> 31) & 1) << 12)
                | (((word >> 7) & 1) << 11)
                | (((word >> 25) & 0x3F) << 5)
                | (((word >> 8) & 0xF) << 1);
            Ok(Instruction::Branch { cond, rs1, rs2, imm: sext(raw, 13) })
        }
        OP_JAL => {
            let raw = (((word >> 31) & 1) << 20)
                | (((word >> 12) & 0xFF) << 12)
                | (((word >> 20) & 1) << 11)
                | (((word >> 21) & 0x3FF) << 1);
            Ok(Instruction::Jal { rd, imm: sext(raw, 21) })
        }
        OP_LUI => Ok(Instruction::Lui { rd, imm: (word & 0xFFFF_F000) as i32 }),
        _ => Err(IsaError::UnsupportedEncoding(word)),
    }
}

/// Sparse word-addressed data memory with a byte-address bound.
///
/// Zero words are not stored, so two memories with equal contents compare
/// equal regardless of how they got there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    limit: u32,
    words: BTreeMap<u32, u32>,
}

impl Default for Memory {
    fn default() -> Self {
        Memory::new(DEFAULT_MEM_BYTES)
    }
}

impl Memory {
    pub fn new(limit_bytes: u32) -> Self {
        Memory { limit: limit_bytes, words: BTreeMap::new() }
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    fn check(&self, addr: u32) -> Result<()> {
        if addr >= self.limit {
            Err(IsaError::OutOfRangeAccess(addr))
        } else if !addr.is_multiple_of(4) {
            Err(IsaError::MisalignedAccess(addr))
        } else {
            Ok(())
        }
    }

    pub fn load(&self, addr: u32) -> Result<u32> {
        self.check(addr)?;
        Ok(self.words.get(&addr).copied().unwrap_or(0))
    }

    pub fn store(&mut self, addr: u32, value: u32) -> Result<()> {
        self.check(addr)?;
        if value == 0 {
            self.words.remove(&addr);
        } else {
            self.words.insert(addr, value);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.words.iter().map(|(&a, &v)| (a, v))
    }
}

/// Architectural state: pc (byte address, word aligned), registers, data memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchState {
    pub pc: u32,
    pub regs: [u32; 32],
    pub mem: Memory,
}

impl ArchState {
    pub fn new(program: &Program) -> Self {
        let mut mem = Memory::new(program.mem_bytes);
        for (&a, &v) in &program.data {
            // Program::new validated every address.
            mem.store(a, v).expect("validated data image");
        }
        ArchState { pc: program.entry, regs: [0; 32], mem }
    }

    fn write_reg(&mut self, rd: u8, value: u32) {
        if rd != 0 {
            self.regs[rd as usize] = value;
        }
    }

    /// Execute one instruction in place.
    pub fn step(&mut self, instr: &Instruction) -> Result<()> {
        let pc = self.pc;
        let r = |i: u8| self.regs[i as usize];
        let mut next = pc.wrapping_add(4);
        match *instr {
            Instruction::Nop => {}
            Instruction::Alu { op, rd, rs1, rs2 } => {
                let v = op.apply(r(rs1), r(rs2));
                self.write_reg(rd, v);
            }
            Instruction::AluImm { op, rd, rs1, imm } => {
                let v = op.apply(r(rs1), imm as u32);
                self.write_reg(rd, v);
            }
            Instruction::Load { rd, rs1, imm } => {
                let v = self.mem.load(r(rs1).wrapping_add(imm as u32))?;
                self.write_reg(rd, v);
            }
            Instruction::Store { rs1, rs2, imm } => {
                let addr = r(rs1).wrapping_add(imm as u32);
                let v = r(rs2);
                self.mem.store(addr, v)?;
            }
            Instruction::Branch { cond, rs1, rs2, imm } => {
                if cond.taken(r(rs1), r(rs2)) {
                    next = pc.wrapping_add(imm as u32);
                }
            }
            Instruction::Jal { rd, imm } => {
                self.write_reg(rd, pc.wrapping_add(4));
                next = pc.wrapping_add(imm as u32);
            }
            Instruction::Lui { rd, imm } => self.write_reg(rd, imm as u32),
        }
        self.pc = next;
        Ok(())
    }
}

/// Value-semantic wrapper around [`ArchState::step`].
pub fn step_golden(state: &ArchState, instr: &Instruction) -> Result<ArchState> {
    let mut next = state.clone();
    next.step(instr)?;
    Ok(next)
}

/// A loadable program: instruction words, initial data image, entry point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub words: Vec<u32>,
    pub data: BTreeMap<u32, u32>,
    pub entry: u32,
    pub mem_bytes: u32,
}

impl Program {
    /// Build a program, checking that every word decodes and every data
    /// address is inside memory.
    pub fn new(words: Vec<u32>, data: BTreeMap<u32, u32>, entry: u32) -> Result<Self> {
        if words.is_empty() {
            return Err(IsaError::EmptyProgram);
        }
        for &w in &words {
            decode(w)?;
        }
        let mem = Memory::default();
        for &a in data.keys() {
            mem.check(a)?;
        }
        if !entry.is_multiple_of(4) {
            return Err(IsaError::MisalignedAccess(entry));
        }
        Ok(Program { words, data, entry, mem_bytes: DEFAULT_MEM_BYTES })
    }

    pub fn from_instructions(instrs: &[Instruction]) -> Result<Self> {
        let words = instrs.iter().map(Instruction::encode).collect::<Result<Vec<_>>>()?;
        Program::new(words, BTreeMap::new(), 0)
    }

    pub fn with_data(mut self, data: BTreeMap<u32, u32>) -> Result<Self> {
        let mem = Memory::new(self.mem_bytes);
        for &a in data.keys() {
            mem.check(a)?;
        }
        self.data = data;
        Ok(self)
    }

    /// Raw word at `pc`, or `None` outside the program image.
    pub fn fetch(&self, pc: u32) -> Option<u32> {
        if pc < self.entry || !pc.is_multiple_of(4) {
            return None;
        }
        self.words.get(((pc - self.entry) / 4) as usize).copied()
    }

    /// Parse the text program format.
    ///
    /// ```text
    /// # comment
    /// @entry 0x0          (optional, must precede instructions)
    /// 00100093            one hex instruction word per line
    /// 0000006f
    /// @data
    /// 0x100 0xdeadbeef    address value pairs, hex
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut data = BTreeMap::new();
        let mut entry = 0;
        let mut in_data = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let perr = |msg: String| IsaError::Parse { line, msg };
            if content == "@data" {
                in_data = true;
                continue;
            }
            if let Some(rest) = content.strip_prefix("@entry") {
                if in_data || !words.is_empty() {
                    return Err(perr("@entry must precede instructions".into()));
                }
                entry = parse_hex(rest.trim()).map_err(perr)?;
                continue;
            }
            if in_data {
                let mut parts = content.split_whitespace();
                let (Some(a), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(perr(format!("expected `address value`, got `{content}`")));
                };
                data.insert(parse_hex(a).map_err(perr)?, parse_hex(v).map_err(perr)?);
            } else {
                words.push(parse_hex(content).map_err(perr)?);
            }
        }
        Program::new(words, data, entry)
    }

    /// Inverse of [`Program::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.entry != 0 {
            out.push_str(&format!("@entry {:#x}\n", self.entry));
        }
        for w in &self.words {
            out.push_str(&format!("{w:08x}\n"));
        }
        if !self.data.is_empty() {
            out.push_str("@data\n");
            for (a, v) in &self.data {
                out.push_str(&format!("{a:#x} {v:#010x}\n"));
            }
        }
        out
    }
}

fn parse_hex(s: &str) -> std::result::Result<u32, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16).map_err(|e| format!("bad hex `{s}`: {e}"))
}

/// One retired instruction in program order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retired {
    pub pc: u32,
    pub instr: Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenRun {
    pub state: ArchState,
    pub trace: Vec<Retired>,
}

/// Run the program on the golden executor until the halt instruction
/// retires.
pub fn run_golden(program: &Program, max_cycles: u64) -> Result<GoldenRun> {
    let mut state = ArchState::new(program);
    let mut trace = Vec::new();
    for _ in 0..max_cycles {
        let word = program.fetch(state.pc).ok_or(IsaError::FetchOutOfRange(state.pc))?;
        let instr = decode(word)?;
        let pc = state.pc;
        if instr.is_halt() {
            trace.push(Retired { pc, instr });
            return Ok(GoldenRun { state, trace });
        }
        state.step(&instr)?;
        trace.push(Retired { pc, instr });
    }
    Err(IsaError::CycleLimitExceeded(max_cycles))
}
