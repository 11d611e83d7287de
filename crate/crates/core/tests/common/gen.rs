//! Random loop-free programs in the text assembly format.
//!
//! Programs are built from short idioms (bound checks, tail-field
//! dispatch, map calls, stack spills) mixed with single random
//! instructions, so the interesting transfer rules fire often enough to
//! be compared.

use rand::prelude::*;
use rand::rngs::StdRng;

use prashna::cfg::build_cfg;
use prashna::loader::NfObject;

pub const MAX_BLOCKS: usize = 12;
pub const MAX_INSNS: usize = 60;

enum Op {
    Plain(String),
    /// Conditional jump: text up to the offset, then a target op index.
    Cond(String, usize),
    Ja(usize),
    Exit,
    /// `ldmapfd` or `lddw`, which take two slots.
    Wide(String),
}

impl Op {
    fn slots(&self) -> usize {
        match self {
            Op::Wide(_) => 2,
            _ => 1,
        }
    }
}

const CTX_OFFS: &[i16] = &[0, 4, 8, 12, 16, 20, 36, 76, 80];
const PKT_OFFS: &[i16] = &[
    0, 6, 12, 14, 16, 20, 22, 23, 26, 30, 34, 36, 38, 42, 46, 47, 54,
];
const K: &[i64] = &[
    0, 1, 2, 3, 4, 5, 6, 8, 14, 17, 34, 42, 54, 255, 0x0800, 0x86dd, 0xdd86, -1, 0x12,
];
const JOPS: &[&str] = &[
    "eq", "ne", "gt", "ge", "lt", "le", "set", "sgt", "sge", "slt", "sle",
];
const ALU: &[&str] = &[
    "add", "sub", "mul", "div", "mod", "or", "and", "xor", "lsh", "rsh", "arsh",
];
const SIZES: &[&str] = &["b", "h", "w", "dw"];
const HELPERS: &[i64] = &[1, 1, 2, 2, 3, 5, 7, 51, 23];

struct Gen<'r> {
    rng: &'r mut StdRng,
    ops: Vec<Op>,
    /// Conditional/unconditional jumps whose targets are chosen at the end.
    open: Vec<usize>,
}

impl Gen<'_> {
    fn reg(&mut self) -> u8 {
        *[0u8, 2, 3, 4, 5, 6, 7, 8, 9, 1].choose(self.rng).unwrap()
    }

    fn k(&mut self) -> i64 {
        if self.rng.random_bool(0.8) {
            *K.choose(self.rng).unwrap()
        } else {
            self.rng.random_range(-300..300)
        }
    }

    fn plain(&mut self, s: String) {
        self.ops.push(Op::Plain(s));
    }

    fn cond(&mut self, head: String) {
        self.open.push(self.ops.len());
        self.ops.push(Op::Cond(head, 0));
    }

    fn jop(&mut self) -> String {
        let op = JOPS.choose(self.rng).unwrap();
        let w = if self.rng.random_bool(0.15) { "32" } else { "" };
        format!("j{op}{w}")
    }

    fn stack_off(&mut self) -> i16 {
        if self.rng.random_bool(0.03) {
            return *[-520i16, 4, 0].choose(self.rng).unwrap();
        }
        -(8 * self.rng.random_range(1..=6)) + *[0i16, 0, 0, 4].choose(self.rng).unwrap()
    }

    fn idiom(&mut self) {
        let r = self.rng.random_range(0..135);
        match r {
            // Layered parse: eth, then ipv4 or ipv6, then l4.
            125.. => {
                let v6 = self.rng.random_bool(0.3);
                let (ty, l3_end, tail_off, l4) = if v6 {
                    (0xdd86i64, 54i64, 20i16, 6i64)
                } else {
                    (8, 34, 23, 17)
                };
                for (k, check) in [
                    (14i64, None),
                    (l3_end, Some((12i16, "h", ty))),
                    (l3_end + 8, Some((tail_off, "b", l4))),
                ] {
                    if let Some((off, sz, v)) = check {
                        self.plain(format!("ldx{sz} r5, [r7{off:+}]"));
                        self.cond(format!("jne r5, {v},"));
                    }
                    if self.rng.random_bool(0.8) {
                        self.plain("mov r2, r7".into());
                        self.plain(format!("add r2, {k}"));
                        self.cond("jgt r2, r8,".into());
                    }
                }
            }
            // Tail-field dispatch.
            100..=115 => {
                let (sz, off, ks): (&str, i16, &[i64]) = match self.rng.random_range(0..3) {
                    0 => ("h", 12, &[8, 0x0800, 0xdd86, 0x0081]),
                    1 => ("b", 23, &[6, 17, 1, 47]),
                    _ => ("b", 20, &[6, 17, 0x3a]),
                };
                let k = *ks.choose(self.rng).unwrap();
                let d = *[3u8, 4, 5, 9].choose(self.rng).unwrap();
                let j = *["jeq", "jne", "jne", "jeq32"].choose(self.rng).unwrap();
                self.plain(format!("ldx{sz} r{d}, [r7{off:+}]"));
                if self.rng.random_bool(0.85) {
                    self.cond(format!("{j} r{d}, {k},"));
                } else {
                    self.plain(format!("mov r0, {k}"));
                    self.cond(format!("{j} r0, r{d},"));
                }
            }
            // Context store.
            116..=119 => {
                let off = *CTX_OFFS.choose(self.rng).unwrap();
                if self.rng.random_bool(0.5) {
                    let k = self.k();
                    self.plain(format!("stw [r1{off:+}], {k}"));
                } else {
                    let s = self.reg();
                    self.plain(format!("stxw [r1{off:+}], r{s}"));
                }
            }
            // Derived header pointer.
            _ if r >= 120 => {
                let k = *[14i64, 34, 54, 20].choose(self.rng).unwrap();
                self.plain("mov r9, r7".into());
                self.plain(format!("add r9, {k}"));
                let off = self.rng.random_range(0..8);
                self.plain(format!("ldxh r3, [r9{off:+}]"));
            }
            // Context pointers.
            0..=9 => {
                let off = *CTX_OFFS.choose(self.rng).unwrap();
                let d = *[7u8, 8, 2, 3].choose(self.rng).unwrap();
                let base = if self.rng.random_bool(0.8) { 1 } else { 6 };
                self.plain(format!("ldxw r{d}, [r{base}{off:+}]"));
            }
            // Bound check.
            10..=21 => {
                let k = *[14i64, 34, 42, 54, 22, 8].choose(self.rng).unwrap();
                self.plain("mov r2, r7".into());
                self.plain(format!("add r2, {k}"));
                let (op, a, b) = match self.rng.random_range(0..4) {
                    0 => ("jgt", 2, 8),
                    1 => ("jge", 2, 8),
                    2 => ("jlt", 8, 2),
                    _ => ("jle", 2, 8),
                };
                self.cond(format!("{op} r{a}, r{b},"));
            }
            // Header load and compare.
            22..=37 => {
                let off = *PKT_OFFS.choose(self.rng).unwrap();
                let sz = *SIZES.choose(self.rng).unwrap();
                let d = *[3u8, 4, 5, 9].choose(self.rng).unwrap();
                self.plain(format!("ldx{sz} r{d}, [r7{off:+}]"));
                if self.rng.random_bool(0.75) {
                    let k = self.k();
                    let j = self.jop();
                    if self.rng.random_bool(0.8) {
                        self.cond(format!("{j} r{d}, {k},"));
                    } else {
                        self.plain(format!("mov r0, {k}"));
                        self.cond(format!("{j} r0, r{d},"));
                    }
                }
            }
            // Header store.
            38..=44 => {
                let off = *PKT_OFFS.choose(self.rng).unwrap();
                let sz = *SIZES.choose(self.rng).unwrap();
                if self.rng.random_bool(0.5) {
                    let k = self.k();
                    self.plain(format!("st{sz} [r7{off:+}], {k}"));
                } else {
                    let s = self.reg();
                    self.plain(format!("stx{sz} [r7{off:+}], r{s}"));
                }
            }
            // Map call.
            45..=56 => {
                let m = self.rng.random_range(0..3);
                let so = self.stack_off();
                if self.rng.random_bool(0.5) {
                    let s = *[3u8, 5, 0, 9].choose(self.rng).unwrap();
                    self.plain(format!("stxw [r10{so:+}], r{s}"));
                }
                self.ops.push(Op::Wide(format!("ldmapfd r1, map=m{m}")));
                match self.rng.random_range(0..3) {
                    0 => self.plain("mov r2, r0".into()),
                    1 => {
                        let r = self.reg();
                        self.plain(format!("mov r2, r{r}"));
                    }
                    _ => {
                        self.plain("mov r2, r10".into());
                        self.plain(format!("add r2, {so}"));
                    }
                }
                if self.rng.random_bool(0.6) {
                    let so = self.stack_off();
                    self.plain("mov r3, r10".into());
                    self.plain(format!("add r3, {so}"));
                }
                let id = *HELPERS.choose(self.rng).unwrap();
                self.plain(format!("call {id}"));
            }
            // Stack spill and reload.
            57..=64 => {
                let so = self.stack_off();
                let sz = *SIZES.choose(self.rng).unwrap();
                let s = self.reg();
                self.plain(format!("stx{sz} [r10{so:+}], r{s}"));
                let so2 = if self.rng.random_bool(0.7) {
                    so
                } else {
                    self.stack_off()
                };
                let sz2 = if self.rng.random_bool(0.7) {
                    sz
                } else {
                    *SIZES.choose(self.rng).unwrap()
                };
                let d = self.reg();
                self.plain(format!("ldx{sz2} r{d}, [r10{so2:+}]"));
            }
            // Map value access.
            65..=68 => {
                let d = self.reg();
                self.plain(format!("ldxw r{d}, [r0+0]"));
            }
            // Atomics.
            69..=70 => {
                let name = *["add", "fetch_add", "xchg", "cmpxchg", "or"]
                    .choose(self.rng)
                    .unwrap();
                let so = self.stack_off();
                let s = self.reg();
                let sz = if self.rng.random_bool(0.5) { "w" } else { "dw" };
                let d = if self.rng.random_bool(0.8) { 10 } else { 7 };
                self.plain(format!("atomic{sz} [r{d}{so:+}], r{s}, {name}"));
            }
            // Early exit.
            71..=77 => {
                let k = self.rng.random_range(-1..6);
                if self.rng.random_bool(0.8) {
                    self.plain(format!("mov r0, {k}"));
                }
                self.ops.push(Op::Exit);
            }
            78..=82 => {
                self.open.push(self.ops.len());
                self.ops.push(Op::Ja(0));
            }
            // Free-standing conditional.
            83..=86 => {
                let (a, b) = (self.reg(), self.reg());
                let j = self.jop();
                if self.rng.random_bool(0.5) {
                    let k = self.k();
                    self.cond(format!("{j} r{a}, {k},"));
                } else {
                    self.cond(format!("{j} r{a}, r{b},"));
                }
            }
            _ => self.single(),
        }
    }

    fn single(&mut self) {
        let d = self.reg();
        let s = self.reg();
        let w = if self.rng.random_bool(0.2) { "32" } else { "" };
        let text = match self.rng.random_range(0..10) {
            0 => format!("mov{w} r{d}, {}", self.k()),
            1 => format!("mov{w} r{d}, r{s}"),
            2 | 3 => {
                let op = ALU.choose(self.rng).unwrap();
                if self.rng.random_bool(0.6) {
                    format!("{op}{w} r{d}, {}", self.k())
                } else {
                    format!("{op}{w} r{d}, r{s}")
                }
            }
            4 => format!("neg{w} r{d}"),
            5 => {
                let e = *["le16", "le32", "le64", "be16", "be32", "be64"]
                    .choose(self.rng)
                    .unwrap();
                format!("{e} r{d}")
            }
            6 => {
                let v = self.rng.random_range(-5i64..5) << 33;
                self.ops.push(Op::Wide(format!("lddw r{d}, {v}")));
                return;
            }
            7 => format!("add r{d}, {}", self.k()),
            8 => format!("mov r{d}, r10"),
            _ => format!("sub r{d}, r{s}"),
        };
        self.plain(text);
    }
}

/// One random program as text assembly.
pub fn program_text(rng: &mut StdRng) -> String {
    let mut g = Gen {
        rng,
        ops: Vec::new(),
        open: Vec::new(),
    };
    if g.rng.random_bool(0.85) {
        g.plain("mov r6, r1".into());
        g.plain("ldxw r7, [r6+0]".into());
        g.plain("ldxw r8, [r6+4]".into());
    }
    let budget = g.rng.random_range(4..=14);
    for _ in 0..budget {
        g.idiom();
    }
    if g.rng.random_bool(0.8) {
        let k = g.rng.random_range(0..5);
        g.plain(format!("mov r0, {k}"));
    }
    g.ops.push(Op::Exit);

    // Resolve forward targets.
    let n = g.ops.len();
    for i in std::mem::take(&mut g.open) {
        let t = g.rng.random_range(i + 1..n);
        match &mut g.ops[i] {
            Op::Cond(_, target) | Op::Ja(target) => *target = t,
            _ => unreachable!(),
        }
    }
    let mut slot = Vec::with_capacity(n + 1);
    let mut at = 0;
    for op in &g.ops {
        slot.push(at);
        at += op.slots();
    }
    let mut out = String::from(".section rand\n.hook xdp\n");
    for (i, op) in g.ops.iter().enumerate() {
        let next = slot[i] + op.slots();
        let off = |t: usize| slot[t] as i64 - next as i64;
        let body = match op {
            Op::Plain(s) | Op::Wide(s) => s.clone(),
            Op::Cond(head, t) => format!("{head} {:+}", off(*t)),
            Op::Ja(t) => format!("ja {:+}", off(*t)),
            Op::Exit => "exit".to_string(),
        };
        out.push_str(&format!("{}: {body}\n", slot[i]));
    }
    out
}

/// Draws programs until one fits the block and instruction limits.
pub fn program(rng: &mut StdRng) -> (String, NfObject) {
    loop {
        let text = program_text(rng);
        let nf = NfObject::from_text("rand", &text, None).unwrap_or_else(|e| panic!("{e}\n{text}"));
        if nf.instructions.len() > MAX_INSNS {
            continue;
        }
        match build_cfg(&nf.instructions) {
            Ok(cfg) if cfg.blocks.len() <= MAX_BLOCKS => return (text, nf),
            _ => continue,
        }
    }
}
