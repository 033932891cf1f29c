//! Seeded synthetic workloads.
//!
//! Generated programs only branch forward and end in the halt instruction,
//! so every one of them terminates on the golden executor within `length`
//! retired instructions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::isa::{AluOp, BranchCond, Instruction, Program};

/// Number of data words the generated loads and stores touch.
const DATA_WORDS: u32 = 64;
/// Registers x1..=REG_POOL are used by generated code.
const REG_POOL: u8 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Program length in instructions, including the trailing halt.
    pub length: usize,
    pub alu_frac: f64,
    pub mem_frac: f64,
    pub branch_frac: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { length: 200, alu_frac: 0.6, mem_frac: 0.2, branch_frac: 0.2 }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.length < 2 {
            return Err("workload length must be at least 2".into());
        }
        let fr = [self.alu_frac, self.mem_frac, self.branch_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err("instruction-mix fractions must lie in [0, 1]".into());
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("instruction-mix fractions sum to {sum}, expected 1"));
        }
        Ok(())
    }

    /// Generate the program for `seed`. Same spec and seed, same program.
    pub fn generate(&self, seed: u64) -> Program {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.length.max(2);
        let body = n - 1;
        let mut instrs = Vec::with_capacity(n);
        let reg = |rng: &mut ChaCha8Rng| rng.random_range(1..=REG_POOL);
        let src = |rng: &mut ChaCha8Rng| rng.random_range(0..=REG_POOL);
        let offset = |rng: &mut ChaCha8Rng| (rng.random_range(0..DATA_WORDS) * 4) as i32;

        for i in 0..body {
            let u: f64 = rng.random();
            let remaining = body - i;
            let instr = if u < self.alu_frac || (u >= self.alu_frac + self.mem_frac && remaining < 3) {
                match rng.random_range(0..10) {
                    0..=4 => {
                        let op = AluOp::ALL[rng.random_range(0..AluOp::ALL.len())];
                        Instruction::Alu { op, rd: reg(&mut rng), rs1: src(&mut rng), rs2: src(&mut rng) }
                    }
                    5..=8 => {
                        let ops = [AluOp::Add, AluOp::And, AluOp::Or, AluOp::Xor, AluOp::Slt];
                        let op = ops[rng.random_range(0..ops.len())];
                        Instruction::AluImm {
                            op,
                            rd: reg(&mut rng),
                            rs1: src(&mut rng),
                            imm: rng.random_range(-2048..2048),
                        }
                    }
                    _ => Instruction::Lui { rd: reg(&mut rng), imm: (rng.random::<u32>() & 0xFFFF_F000) as i32 },
                }
            } else if u < self.alu_frac + self.mem_frac {
                if rng.random_bool(0.5) {
                    Instruction::Load { rd: reg(&mut rng), rs1: 0, imm: offset(&mut rng) }
                } else {
                    Instruction::Store { rs1: 0, rs2: src(&mut rng), imm: offset(&mut rng) }
                }
            } else {
                // Forward target, never past the halt.
                let skip = rng.random_range(2..=4.min(remaining as u32)) as i32;
                if rng.random_bool(0.25) {
                    let rd = if rng.random_bool(0.5) { 0 } else { reg(&mut rng) };
                    Instruction::Jal { rd, imm: skip * 4 }
                } else {
                    let cond = if rng.random_bool(0.5) { BranchCond::Eq } else { BranchCond::Ne };
                    Instruction::Branch { cond, rs1: src(&mut rng), rs2: src(&mut rng), imm: skip * 4 }
                }
            };
            instrs.push(instr);
        }
        instrs.push(Instruction::Jal { rd: 0, imm: 0 });

        let data: BTreeMap<u32, u32> =
            (0..DATA_WORDS).map(|w| (w * 4, rng.random::<u32>())).filter(|&(_, v)| v != 0).collect();
        Program::from_instructions(&instrs)
            .and_then(|p| p.with_data(data))
            .expect("generated instructions are always encodable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{decode, run_golden};

    #[test]
    fn generated_programs_terminate() {
        let spec = WorkloadSpec::default();
        for seed in 0..50 {
            let p = spec.generate(seed);
            assert_eq!(p.words.len(), 200);
            let run = run_golden(&p, 10_000).unwrap();
            assert!(run.trace.len() <= 200);
            assert!(run.trace.last().unwrap().instr.is_halt());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = WorkloadSpec::default();
        assert_eq!(spec.generate(7), spec.generate(7));
        assert_ne!(spec.generate(7), spec.generate(8));
    }

    #[test]
    fn mix_roughly_matches_spec() {
        let spec = WorkloadSpec { length: 5000, ..Default::default() };
        let p = spec.generate(1);
        let instrs: Vec<_> = p.words.iter().map(|&w| decode(w).unwrap()).collect();
        let count = |f: &dyn Fn(&Instruction) -> bool| instrs.iter().filter(|i| f(i)).count() as f64 / 5000.0;
        let mem = count(&|i| matches!(i, Instruction::Load { .. } | Instruction::Store { .. }));
        let br = count(&|i| matches!(i, Instruction::Branch { .. } | Instruction::Jal { .. }));
        assert!((mem - 0.2).abs() < 0.03, "mem {mem}");
        assert!((br - 0.2).abs() < 0.03, "branch {br}");
    }

    #[test]
    fn rejects_bad_mix() {
        let spec = WorkloadSpec { alu_frac: 0.7, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
