//! eBPF instruction decoding, encoding and the text assembly format.
//!
//! Binary programs are sequences of little-endian 8-byte slots. A wide load
//! (`lddw`) occupies two slots but decodes to a single [`Instruction`] whose
//! `index` is the slot of its first half, so jump offsets keep their slot
//! semantics.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const CLASS_LD: u8 = 0x00;
pub const CLASS_LDX: u8 = 0x01;
pub const CLASS_ST: u8 = 0x02;
pub const CLASS_STX: u8 = 0x03;
pub const CLASS_ALU: u8 = 0x04;
pub const CLASS_JMP: u8 = 0x05;
pub const CLASS_JMP32: u8 = 0x06;
pub const CLASS_ALU64: u8 = 0x07;

pub const SIZE_W: u8 = 0x00;
pub const SIZE_H: u8 = 0x08;
pub const SIZE_B: u8 = 0x10;
pub const SIZE_DW: u8 = 0x18;

pub const MODE_IMM: u8 = 0x00;
pub const MODE_MEM: u8 = 0x60;
pub const MODE_ATOMIC: u8 = 0xc0;

/// Source operand is a register rather than the immediate.
pub const SRC_REG: u8 = 0x08;

pub const PSEUDO_MAP_FD: u8 = 1;

const ATOMIC_FETCH: i32 = 0x01;
const ATOMIC_XCHG: i32 = 0xe0 | ATOMIC_FETCH;
const ATOMIC_CMPXCHG: i32 = 0xf0 | ATOMIC_FETCH;

pub const MAX_REG: u8 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("truncated program: {0}")]
    TruncatedProgram(String),
    #[error("unknown opcode {opcode:#04x} at slot {index}")]
    UnknownOpcode { index: usize, opcode: u8 },
    #[error("bad register r{reg} at slot {index}")]
    BadRegister { index: usize, reg: u8 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Coarse instruction category; a total function of the opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InsnKind {
    Alu,
    Mov,
    LoadMem,
    StoreMem,
    LoadMapFd,
    /// `lddw` of a plain 64-bit constant.
    LoadImm64,
    JumpCond,
    JumpUncond,
    Call,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Neg,
    Mod,
    Xor,
    Mov,
    Arsh,
    End,
}

impl AluOp {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code & 0xf0 {
            0x00 => AluOp::Add,
            0x10 => AluOp::Sub,
            0x20 => AluOp::Mul,
            0x30 => AluOp::Div,
            0x40 => AluOp::Or,
            0x50 => AluOp::And,
            0x60 => AluOp::Lsh,
            0x70 => AluOp::Rsh,
            0x80 => AluOp::Neg,
            0x90 => AluOp::Mod,
            0xa0 => AluOp::Xor,
            0xb0 => AluOp::Mov,
            0xc0 => AluOp::Arsh,
            0xd0 => AluOp::End,
            _ => return None,
        })
    }

    fn code(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Neg => 0x80,
            AluOp::Mod => 0x90,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
            AluOp::Arsh => 0xc0,
            AluOp::End => 0xd0,
        }
    }

    fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Neg => "neg",
            AluOp::Mod => "mod",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
            AluOp::Arsh => "arsh",
            AluOp::End => "end",
        }
    }

    fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "add" => AluOp::Add,
            "sub" => AluOp::Sub,
            "mul" => AluOp::Mul,
            "div" => AluOp::Div,
            "or" => AluOp::Or,
            "and" => AluOp::And,
            "lsh" => AluOp::Lsh,
            "rsh" => AluOp::Rsh,
            "mod" => AluOp::Mod,
            "xor" => AluOp::Xor,
            "arsh" => AluOp::Arsh,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmpOp {
    Ja,
    Jeq,
    Jgt,
    Jge,
    Jset,
    Jne,
    Jsgt,
    Jsge,
    Jlt,
    Jle,
    Jslt,
    Jsle,
}

impl JmpOp {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code & 0xf0 {
            0x00 => JmpOp::Ja,
            0x10 => JmpOp::Jeq,
            0x20 => JmpOp::Jgt,
            0x30 => JmpOp::Jge,
            0x40 => JmpOp::Jset,
            0x50 => JmpOp::Jne,
            0x60 => JmpOp::Jsgt,
            0x70 => JmpOp::Jsge,
            0xa0 => JmpOp::Jlt,
            0xb0 => JmpOp::Jle,
            0xc0 => JmpOp::Jslt,
            0xd0 => JmpOp::Jsle,
            _ => return None,
        })
    }

    fn code(self) -> u8 {
        match self {
            JmpOp::Ja => 0x00,
            JmpOp::Jeq => 0x10,
            JmpOp::Jgt => 0x20,
            JmpOp::Jge => 0x30,
            JmpOp::Jset => 0x40,
            JmpOp::Jne => 0x50,
            JmpOp::Jsgt => 0x60,
            JmpOp::Jsge => 0x70,
            JmpOp::Jlt => 0xa0,
            JmpOp::Jle => 0xb0,
            JmpOp::Jslt => 0xc0,
            JmpOp::Jsle => 0xd0,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            JmpOp::Ja => "mp",
            JmpOp::Jeq => "eq",
            JmpOp::Jgt => "gt",
            JmpOp::Jge => "ge",
            JmpOp::Jset => "set",
            JmpOp::Jne => "ne",
            JmpOp::Jsgt => "sgt",
            JmpOp::Jsge => "sge",
            JmpOp::Jlt => "lt",
            JmpOp::Jle => "le",
            JmpOp::Jslt => "slt",
            JmpOp::Jsle => "sle",
        }
    }

    fn from_suffix(s: &str) -> Option<Self> {
        Some(match s {
            "eq" => JmpOp::Jeq,
            "gt" => JmpOp::Jgt,
            "ge" => JmpOp::Jge,
            "set" => JmpOp::Jset,
            "ne" => JmpOp::Jne,
            "sgt" => JmpOp::Jsgt,
            "sge" => JmpOp::Jsge,
            "lt" => JmpOp::Jlt,
            "le" => JmpOp::Jle,
            "slt" => JmpOp::Jslt,
            "sle" => JmpOp::Jsle,
            _ => return None,
        })
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    /// Slot index of the (first half of the) instruction.
    pub index: usize,
    pub opcode: u8,
    pub dst_reg: u8,
    pub src_reg: u8,
    pub offset: i16,
    pub imm: i32,
    /// Full 64-bit immediate; only wide loads carry it.
    pub imm64: Option<i64>,
    pub kind: InsnKind,
}

impl Instruction {
    pub fn class(&self) -> u8 {
        self.opcode & 0x07
    }

    /// Number of 8-byte slots this instruction occupies.
    pub fn slots(&self) -> usize {
        if self.imm64.is_some() {
            2
        } else {
            1
        }
    }

    pub fn is_alu64(&self) -> bool {
        self.class() == CLASS_ALU64
    }

    pub fn uses_src_reg(&self) -> bool {
        self.opcode & SRC_REG != 0
    }

    pub fn is_atomic(&self) -> bool {
        self.class() == CLASS_STX && self.opcode & 0xe0 == MODE_ATOMIC
    }

    pub fn alu_op(&self) -> Option<AluOp> {
        match self.class() {
            CLASS_ALU | CLASS_ALU64 => AluOp::from_code(self.opcode),
            _ => None,
        }
    }

    pub fn jmp_op(&self) -> Option<JmpOp> {
        match self.kind {
            InsnKind::JumpCond | InsnKind::JumpUncond => JmpOp::from_code(self.opcode),
            _ => None,
        }
    }

    /// Access width in bytes for loads, stores and atomics.
    pub fn mem_width(&self) -> Option<u8> {
        match self.class() {
            CLASS_LDX | CLASS_ST | CLASS_STX => Some(match self.opcode & 0x18 {
                SIZE_W => 4,
                SIZE_H => 2,
                SIZE_B => 1,
                _ => 8,
            }),
            _ => None,
        }
    }

    /// Slot index a jump lands on; `None` for non-jumps.
    pub fn jump_target(&self) -> Option<i64> {
        match self.kind {
            InsnKind::JumpCond | InsnKind::JumpUncond => {
                Some(self.index as i64 + 1 + i64::from(self.offset))
            }
            _ => None,
        }
    }

    /// Encodes into one or two little-endian slots.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        let imm_lo = match self.imm64 {
            Some(v) => v as u64 as u32 as i32,
            None => self.imm,
        };
        out.push(self.opcode);
        out.push((self.src_reg << 4) | (self.dst_reg & 0x0f));
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&imm_lo.to_le_bytes());
        if let Some(v) = self.imm64 {
            out.extend_from_slice(&[0; 4]);
            out.extend_from_slice(&((v as u64 >> 32) as u32).to_le_bytes());
        }
        out
    }

    /// Renders the mnemonic and operands (no index prefix). Map loads with a
    /// known name render symbolically.
    pub fn to_text(&self, map_name: Option<&str>) -> String {
        let d = self.dst_reg;
        let s = self.src_reg;
        let operand = |insn: &Instruction| {
            if insn.uses_src_reg() {
                format!("r{s}")
            } else {
                insn.imm.to_string()
            }
        };
        match self.kind {
            InsnKind::Exit => "exit".to_string(),
            InsnKind::Call => format!("call {}", self.imm),
            InsnKind::JumpUncond => format!("jmp {:+}", self.offset),
            InsnKind::JumpCond => {
                let op = self.jmp_op().expect("conditional jump has a jump op");
                let w = if self.class() == CLASS_JMP32 {
                    "32"
                } else {
                    ""
                };
                format!(
                    "j{}{} r{}, {}, {:+}",
                    op.suffix(),
                    w,
                    d,
                    operand(self),
                    self.offset
                )
            }
            InsnKind::LoadMapFd => match map_name {
                Some(name) => format!("ldmapfd r{d}, map={name}"),
                None => format!("ldmapfd r{d}, {}", self.imm64.unwrap_or_default()),
            },
            InsnKind::LoadImm64 => format!("lddw r{d}, {}", self.imm64.unwrap_or_default()),
            InsnKind::LoadMem => format!(
                "ldx{} r{d}, [r{s}{:+}]",
                size_suffix(self.opcode),
                self.offset
            ),
            InsnKind::StoreMem if self.class() == CLASS_STX => format!(
                "stx{} [r{d}{:+}], r{s}",
                size_suffix(self.opcode),
                self.offset
            ),
            InsnKind::StoreMem => format!(
                "st{} [r{d}{:+}], {}",
                size_suffix(self.opcode),
                self.offset,
                self.imm
            ),
            InsnKind::Mov => {
                let w = if self.is_alu64() { "" } else { "32" };
                format!("mov{w} r{d}, {}", operand(self))
            }
            InsnKind::Alu if self.is_atomic() => format!(
                "atomic{} [r{d}{:+}], r{s}, {}",
                size_suffix(self.opcode),
                self.offset,
                atomic_name(self.imm)
            ),
            InsnKind::Alu => {
                let op = self.alu_op().expect("alu instruction has an alu op");
                let w = if self.is_alu64() { "" } else { "32" };
                match op {
                    AluOp::Neg => format!("neg{w} r{d}"),
                    AluOp::End => {
                        let order = if self.uses_src_reg() { "be" } else { "le" };
                        format!("{order}{} r{d}", self.imm)
                    }
                    _ => format!("{}{w} r{d}, {}", op.mnemonic(), operand(self)),
                }
            }
        }
    }
}

fn size_suffix(opcode: u8) -> &'static str {
    match opcode & 0x18 {
        SIZE_W => "w",
        SIZE_H => "h",
        SIZE_B => "b",
        _ => "dw",
    }
}

fn size_bits(suffix: &str) -> Option<u8> {
    Some(match suffix {
        "w" => SIZE_W,
        "h" => SIZE_H,
        "b" => SIZE_B,
        "dw" => SIZE_DW,
        _ => return None,
    })
}

fn atomic_name(imm: i32) -> &'static str {
    match imm {
        0x00 => "add",
        0x40 => "or",
        0x50 => "and",
        0xa0 => "xor",
        0x01 => "fetch_add",
        0x41 => "fetch_or",
        0x51 => "fetch_and",
        0xa1 => "fetch_xor",
        ATOMIC_XCHG => "xchg",
        ATOMIC_CMPXCHG => "cmpxchg",
        _ => "?",
    }
}

fn atomic_code(name: &str) -> Option<i32> {
    Some(match name {
        "add" => 0x00,
        "or" => 0x40,
        "and" => 0x50,
        "xor" => 0xa0,
        "fetch_add" => 0x01,
        "fetch_or" => 0x41,
        "fetch_and" => 0x51,
        "fetch_xor" => 0xa1,
        "xchg" => ATOMIC_XCHG,
        "cmpxchg" => ATOMIC_CMPXCHG,
        _ => return None,
    })
}

/// Classifies an opcode, rejecting everything outside the supported subset.
fn classify(opcode: u8, src_reg: u8, imm: i32, offset: i16) -> Option<InsnKind> {
    let class = opcode & 0x07;
    match class {
        CLASS_LD => match (opcode, src_reg) {
            (0x18, 0) => Some(InsnKind::LoadImm64),
            (0x18, PSEUDO_MAP_FD) => Some(InsnKind::LoadMapFd),
            _ => None,
        },
        CLASS_LDX => (opcode & 0xe0 == MODE_MEM).then_some(InsnKind::LoadMem),
        CLASS_ST => (opcode & 0xe0 == MODE_MEM).then_some(InsnKind::StoreMem),
        CLASS_STX => match opcode & 0xe0 {
            MODE_MEM => Some(InsnKind::StoreMem),
            MODE_ATOMIC => {
                let wide_enough = matches!(opcode & 0x18, SIZE_W | SIZE_DW);
                (wide_enough && atomic_name(imm) != "?").then_some(InsnKind::Alu)
            }
            _ => None,
        },
        CLASS_ALU | CLASS_ALU64 => {
            if offset != 0 {
                // signed division / sign-extending moves
                return None;
            }
            match AluOp::from_code(opcode)? {
                AluOp::Mov => Some(InsnKind::Mov),
                AluOp::Neg if opcode & SRC_REG != 0 => None,
                AluOp::End if class == CLASS_ALU64 => None,
                AluOp::End if !matches!(imm, 16 | 32 | 64) => None,
                _ => Some(InsnKind::Alu),
            }
        }
        CLASS_JMP | CLASS_JMP32 => match opcode {
            0x05 if src_reg == 0 => Some(InsnKind::JumpUncond),
            0x85 if src_reg == 0 => Some(InsnKind::Call),
            0x95 => Some(InsnKind::Exit),
            _ => match JmpOp::from_code(opcode)? {
                JmpOp::Ja => None,
                _ => Some(InsnKind::JumpCond),
            },
        },
        _ => None,
    }
}

fn slot(bytes: &[u8], i: usize) -> (u8, u8, u8, i16, i32) {
    let b = &bytes[i * 8..i * 8 + 8];
    (
        b[0],
        b[1] & 0x0f,
        b[1] >> 4,
        i16::from_le_bytes([b[2], b[3]]),
        i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
    )
}

/// Decodes raw little-endian bytecode.
pub fn decode_program(bytes: &[u8]) -> Result<Vec<Instruction>, IsaError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(IsaError::TruncatedProgram(format!(
            "length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let n = bytes.len() / 8;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let (opcode, dst, src, off, imm) = slot(bytes, i);
        let kind =
            classify(opcode, src, imm, off).ok_or(IsaError::UnknownOpcode { index: i, opcode })?;
        for reg in [dst, src] {
            if reg > MAX_REG {
                return Err(IsaError::BadRegister { index: i, reg });
            }
        }
        let mut insn = Instruction {
            index: i,
            opcode,
            dst_reg: dst,
            src_reg: src,
            offset: off,
            imm,
            imm64: None,
            kind,
        };
        if matches!(kind, InsnKind::LoadMapFd | InsnKind::LoadImm64) {
            if i + 1 >= n {
                return Err(IsaError::TruncatedProgram(format!(
                    "wide load at slot {i} is missing its second half"
                )));
            }
            let (op2, dst2, src2, off2, hi) = slot(bytes, i + 1);
            if op2 != 0 || dst2 != 0 || src2 != 0 || off2 != 0 {
                return Err(IsaError::UnknownOpcode {
                    index: i + 1,
                    opcode: op2,
                });
            }
            insn.imm64 = Some(((hi as u32 as u64) << 32 | imm as u32 as u64) as i64);
            i += 2;
        } else {
            i += 1;
        }
        out.push(insn);
    }
    Ok(out)
}

pub fn encode_program(insns: &[Instruction]) -> Vec<u8> {
    insns.iter().flat_map(Instruction::encode).collect()
}

/// Result of parsing the text assembly format.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextProgram {
    pub instructions: Vec<Instruction>,
    /// Symbolic `map=<name>` operands, keyed by instruction slot index.
    pub map_refs: BTreeMap<usize, String>,
    /// `.key value` directive lines, in order.
    pub directives: Vec<(String, String)>,
}

impl TextProgram {
    /// Instructions in program order (convenience for callers that only
    /// need the decoded sequence).
    pub fn into_instructions(self) -> Vec<Instruction> {
        self.instructions
    }
}

/// Renders instructions in the text assembly format, one per line.
pub fn format_program(insns: &[Instruction], map_names: &BTreeMap<usize, String>) -> String {
    let mut out = String::new();
    for insn in insns {
        let name = map_names.get(&insn.index).map(String::as_str);
        out.push_str(&format!("{}: {}\n", insn.index, insn.to_text(name)));
    }
    out
}

struct LineParser<'a> {
    line: usize,
    rest: &'a str,
}

impl<'a> LineParser<'a> {
    fn err(&self, message: impl Into<String>) -> IsaError {
        IsaError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn expect(&mut self, c: char) -> Result<(), IsaError> {
        self.skip_ws();
        match self.rest.strip_prefix(c) {
            Some(r) => {
                self.rest = r;
                Ok(())
            }
            None => Err(self.err(format!("expected '{c}' at '{}'", self.rest))),
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.rest.chars().next()
    }

    fn token(&mut self) -> &'a str {
        self.skip_ws();
        let end = self
            .rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '+'))
            .unwrap_or(self.rest.len());
        let (tok, rest) = self.rest.split_at(end);
        self.rest = rest;
        tok
    }

    fn reg(&mut self) -> Result<u8, IsaError> {
        let tok = self.token();
        let n = tok
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| self.err(format!("expected register, found '{tok}'")))?;
        if n > MAX_REG {
            return Err(self.err(format!("register r{n} out of range")));
        }
        Ok(n)
    }

    fn int(&mut self) -> Result<i64, IsaError> {
        let tok = self.token();
        parse_int(tok).ok_or_else(|| self.err(format!("expected integer, found '{tok}'")))
    }

    fn imm32(&mut self) -> Result<i32, IsaError> {
        let v = self.int()?;
        if v < i64::from(i32::MIN) || v > i64::from(u32::MAX) {
            return Err(self.err(format!("immediate {v} does not fit in 32 bits")));
        }
        Ok(v as u32 as i32)
    }

    fn off16(&mut self) -> Result<i16, IsaError> {
        let v = self.int()?;
        i16::try_from(v).map_err(|_| self.err(format!("offset {v} does not fit in 16 bits")))
    }

    /// `[rN+off]`
    fn mem(&mut self) -> Result<(u8, i16), IsaError> {
        self.expect('[')?;
        let reg = self.reg_only()?;
        let off = if self.peek() == Some(']') {
            0
        } else {
            self.off16()?
        };
        self.expect(']')?;
        Ok((reg, off))
    }

    // register token without consuming a trailing signed offset
    fn reg_only(&mut self) -> Result<u8, IsaError> {
        self.skip_ws();
        let rest = self.rest;
        let end = rest
            .char_indices()
            .skip(1)
            .find(|(_, c)| !c.is_ascii_digit())
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let (tok, tail) = rest.split_at(end);
        self.rest = tail;
        let n = tok
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| self.err(format!("expected register, found '{tok}'")))?;
        if n > MAX_REG {
            return Err(self.err(format!("register r{n} out of range")));
        }
        Ok(n)
    }

    /// Register or immediate operand.
    fn operand(&mut self) -> Result<Operand, IsaError> {
        match self.peek() {
            Some('r') => Ok(Operand::Reg(self.reg()?)),
            _ => Ok(Operand::Imm(self.imm32()?)),
        }
    }

    fn finish(&mut self) -> Result<(), IsaError> {
        self.skip_ws();
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(self.err(format!("unexpected trailing input '{}'", self.rest)))
        }
    }
}

enum Operand {
    Reg(u8),
    Imm(i32),
}

fn parse_int(tok: &str) -> Option<i64> {
    let (neg, body) = match tok.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, tok.strip_prefix('+').unwrap_or(tok)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        body.parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn base_insn(index: usize, opcode: u8, kind: InsnKind) -> Instruction {
    Instruction {
        index,
        opcode,
        dst_reg: 0,
        src_reg: 0,
        offset: 0,
        imm: 0,
        imm64: None,
        kind,
    }
}

fn with_operand(mut insn: Instruction, op: Operand) -> Instruction {
    match op {
        Operand::Reg(r) => {
            insn.opcode |= SRC_REG;
            insn.src_reg = r;
        }
        Operand::Imm(v) => insn.imm = v,
    }
    insn
}

/// Parses the text assembly format.
///
/// Each line is `<index>: <mnemonic> <operands>`; the index must equal the
/// slot position (wide loads advance it by two). `#` starts a comment and
/// lines beginning with `.` are directives passed through to the loader.
pub fn parse_text_program(text: &str) -> Result<TextProgram, IsaError> {
    let mut prog = TextProgram::default();
    let mut next_slot = 0usize;
    let mut map_ordinals: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(directive) = content.strip_prefix('.') {
            let mut parts = directive.splitn(2, char::is_whitespace);
            let key = parts.next().unwrap_or("").to_string();
            let value = parts.next().unwrap_or("").trim().to_string();
            if key.is_empty() {
                return Err(IsaError::Parse {
                    line,
                    message: "empty directive".into(),
                });
            }
            prog.directives.push((key, value));
            continue;
        }
        let (idx, body) = content.split_once(':').ok_or(IsaError::Parse {
            line,
            message: "expected '<index>: <instruction>'".into(),
        })?;
        let idx: usize = idx.trim().parse().map_err(|_| IsaError::Parse {
            line,
            message: format!("bad instruction index '{}'", idx.trim()),
        })?;
        if idx != next_slot {
            return Err(IsaError::Parse {
                line,
                message: format!("instruction index {idx} does not match slot {next_slot}"),
            });
        }
        let mut p = LineParser { line, rest: body };
        let mnemonic = p.token();
        let insn = parse_mnemonic(&mut p, mnemonic, idx, &mut map_ordinals, &mut prog.map_refs)?;
        p.finish()?;
        next_slot += insn.slots();
        prog.instructions.push(insn);
    }
    Ok(prog)
}

fn parse_mnemonic(
    p: &mut LineParser<'_>,
    mnemonic: &str,
    idx: usize,
    map_ordinals: &mut Vec<String>,
    map_refs: &mut BTreeMap<usize, String>,
) -> Result<Instruction, IsaError> {
    let (stem, wide32) = match mnemonic.strip_suffix("32") {
        Some(s) if !s.is_empty() && !matches!(s, "le" | "be") => (s, true),
        _ => (mnemonic, false),
    };
    let alu_class = if wide32 { CLASS_ALU } else { CLASS_ALU64 };
    let jmp_class = if wide32 { CLASS_JMP32 } else { CLASS_JMP };

    if mnemonic == "exit" {
        return Ok(base_insn(idx, 0x95, InsnKind::Exit));
    }
    if mnemonic == "call" {
        let mut insn = base_insn(idx, 0x85, InsnKind::Call);
        insn.imm = p.imm32()?;
        return Ok(insn);
    }
    if mnemonic == "jmp" || mnemonic == "ja" {
        let mut insn = base_insn(idx, 0x05, InsnKind::JumpUncond);
        insn.offset = p.off16()?;
        return Ok(insn);
    }
    if stem == "mov" {
        let mut insn = base_insn(idx, alu_class | 0xb0, InsnKind::Mov);
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        return Ok(with_operand(insn, p.operand()?));
    }
    if stem == "neg" {
        let mut insn = base_insn(idx, alu_class | 0x80, InsnKind::Alu);
        insn.dst_reg = p.reg()?;
        return Ok(insn);
    }
    let alu_stem = stem.strip_prefix("alu").unwrap_or(stem);
    if let Some(op) = AluOp::from_mnemonic(alu_stem)
        .filter(|op| !matches!(op, AluOp::Mov | AluOp::Neg | AluOp::End))
    {
        let mut insn = base_insn(idx, alu_class | op.code(), InsnKind::Alu);
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        return Ok(with_operand(insn, p.operand()?));
    }
    for (prefix, src_bit) in [("le", 0u8), ("be", SRC_REG)] {
        if let Some(bits) = mnemonic.strip_prefix(prefix) {
            if let Ok(bits @ (16 | 32 | 64)) = bits.parse::<i32>() {
                let mut insn = base_insn(idx, CLASS_ALU | 0xd0 | src_bit, InsnKind::Alu);
                insn.dst_reg = p.reg()?;
                insn.imm = bits;
                return Ok(insn);
            }
        }
    }
    if mnemonic == "ldmapfd" {
        let mut insn = base_insn(idx, 0x18, InsnKind::LoadMapFd);
        insn.src_reg = PSEUDO_MAP_FD;
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        p.skip_ws();
        if let Some(rest) = p.rest.strip_prefix("map=") {
            p.rest = rest;
            let name = p.token();
            if name.is_empty() {
                return Err(p.err("expected map name after 'map='"));
            }
            let ordinal = match map_ordinals.iter().position(|m| m == name) {
                Some(o) => o,
                None => {
                    map_ordinals.push(name.to_string());
                    map_ordinals.len() - 1
                }
            };
            insn.imm64 = Some(ordinal as i64);
            map_refs.insert(idx, name.to_string());
        } else {
            insn.imm64 = Some(p.int()?);
        }
        insn.imm = insn.imm64.unwrap() as u64 as u32 as i32;
        return Ok(insn);
    }
    if mnemonic == "lddw" {
        let mut insn = base_insn(idx, 0x18, InsnKind::LoadImm64);
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        let v = p.int()?;
        insn.imm64 = Some(v);
        insn.imm = v as u64 as u32 as i32;
        return Ok(insn);
    }
    if let Some(sz) = mnemonic.strip_prefix("ldx").and_then(size_bits) {
        let mut insn = base_insn(idx, CLASS_LDX | MODE_MEM | sz, InsnKind::LoadMem);
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        let (src, off) = p.mem()?;
        insn.src_reg = src;
        insn.offset = off;
        return Ok(insn);
    }
    if let Some(sz) = mnemonic.strip_prefix("stx").and_then(size_bits) {
        let mut insn = base_insn(idx, CLASS_STX | MODE_MEM | sz, InsnKind::StoreMem);
        let (dst, off) = p.mem()?;
        insn.dst_reg = dst;
        insn.offset = off;
        p.expect(',')?;
        insn.src_reg = p.reg()?;
        return Ok(insn);
    }
    if let Some(sz) = mnemonic.strip_prefix("st").and_then(size_bits) {
        let mut insn = base_insn(idx, CLASS_ST | MODE_MEM | sz, InsnKind::StoreMem);
        let (dst, off) = p.mem()?;
        insn.dst_reg = dst;
        insn.offset = off;
        p.expect(',')?;
        insn.imm = p.imm32()?;
        return Ok(insn);
    }
    if let Some(sz) = mnemonic.strip_prefix("atomic").and_then(size_bits) {
        if !matches!(sz, SIZE_W | SIZE_DW) {
            return Err(p.err("atomic operations are 4 or 8 bytes wide"));
        }
        let mut insn = base_insn(idx, CLASS_STX | MODE_ATOMIC | sz, InsnKind::Alu);
        let (dst, off) = p.mem()?;
        insn.dst_reg = dst;
        insn.offset = off;
        p.expect(',')?;
        insn.src_reg = p.reg()?;
        p.expect(',')?;
        let name = p.token();
        insn.imm = atomic_code(name).ok_or_else(|| p.err(format!("unknown atomic op '{name}'")))?;
        return Ok(insn);
    }
    if let Some(op) = stem.strip_prefix('j').and_then(JmpOp::from_suffix) {
        let mut insn = base_insn(idx, jmp_class | op.code(), InsnKind::JumpCond);
        insn.dst_reg = p.reg()?;
        p.expect(',')?;
        insn = with_operand(insn, p.operand()?);
        p.expect(',')?;
        insn.offset = p.off16()?;
        return Ok(insn);
    }
    Err(p.err(format!("unknown mnemonic '{mnemonic}'")))
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.index, self.to_text(None))
    }
}
