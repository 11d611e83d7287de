//! A deliberately plain re-implementation of the transfer rules, used as an
//! oracle for the analyzer.
//!
//! It decodes raw opcode bytes itself, splits blocks itself, walks paths
//! one instruction at a time by recursion, and prints facts itself. It
//! shares nothing with the analyzer but the loaded instructions and the
//! netspec tables.
#![allow(
    clippy::manual_checked_ops,
    clippy::manual_range_patterns,
    clippy::needless_range_loop
)]

use std::collections::{BTreeMap, BTreeSet};

use prashna::facts::{Atom, KnowledgeBase};
use prashna::loader::NfObject;
use prashna::netspec::NetSpec;

#[derive(Clone, Debug, PartialEq)]
enum V {
    Ctx(i64),
    Pkt(i64),
    End,
    Stack(i64),
    MapRef(i64),
    Const(i64),
    Unk,
    Field {
        name: String,
        proto: Option<String>,
        width: u32,
    },
    MapVal(i64),
}

impl V {
    fn konst(&self) -> Option<i64> {
        match self {
            V::Const(k) => Some(*k),
            _ => None,
        }
    }
    fn is_ptr(&self) -> bool {
        matches!(self, V::Ctx(_) | V::Pkt(_) | V::Stack(_) | V::MapRef(_))
    }
    fn off(&self) -> i64 {
        match self {
            V::Ctx(o) | V::Pkt(o) | V::Stack(o) | V::MapRef(o) | V::Const(o) => *o,
            _ => 0,
        }
    }
}

#[derive(Clone)]
struct St {
    r: Vec<V>,
    /// frame offset (negative) -> (value, width)
    stack: BTreeMap<i64, (V, u32)>,
    layers: Vec<(String, i64)>,
    announced: bool,
    pending: Option<(String, String)>,
    pairs: BTreeSet<String>,
}

struct Ctx<'a> {
    nf: &'a NfObject,
    spec: &'a NetSpec,
    hook: String,
    entry: String,
    buf_name: String,
    buf_fields: Vec<(u32, String)>,
    data: String,
    data_end: String,
    /// slot index -> position
    pos_of_slot: BTreeMap<usize, usize>,
    block_of: Vec<usize>,
    facts: BTreeSet<String>,
}

fn q(s: &str) -> String {
    format!("\"{s}\"")
}

fn node(b: usize) -> String {
    format!("\"node_{b}\"")
}

const CMP_NE: &str = "!=";

struct Fail;

impl Ctx<'_> {
    fn id(&self) -> String {
        q(&self.nf.nf_id)
    }

    fn emit(&mut self, pred: &str, b: usize, rest: &[String]) {
        let mut args = vec![self.id(), node(b)];
        args.extend(rest.iter().cloned());
        self.facts.insert(format!("{pred}({}).", args.join(", ")));
    }

    fn hlen(&self, proto: &str) -> i64 {
        self.spec
            .protocols
            .iter()
            .find(|p| p.name == proto)
            .map(|p| p.header_len as i64)
            .unwrap_or(0)
    }

    fn hdr_name(&self, proto: &str, rel: i64) -> String {
        let Some(p) = self.spec.protocols.iter().find(|p| p.name == proto) else {
            return format!("{proto}.unknown@{rel}");
        };
        for f in &p.fields {
            if rel >= f.offset as i64 && rel < (f.offset + f.width) as i64 {
                return format!("{proto}.{}", f.name);
            }
        }
        format!("{proto}.unknown@{rel}")
    }

    fn buf_field(&self, off: i64) -> (String, Option<String>) {
        for (o, n) in &self.buf_fields {
            if *o as i64 == off {
                return (format!("{}.{n}", self.buf_name), Some(n.clone()));
            }
        }
        (format!("{}.unknown@{off}", self.buf_name), None)
    }

    fn map_name(&self, ord: i64) -> String {
        if ord >= 0 && (ord as usize) < self.nf.maps.len() {
            self.nf.maps[ord as usize].clone()
        } else {
            format!("map#{ord}")
        }
    }

    fn announce(&mut self, st: &mut St, b: usize) {
        if !st.announced {
            st.announced = true;
            let via = format!("{}.{}", self.buf_name, self.data);
            let entry = self.entry.clone();
            self.emit("protocol_accessed", b, &[q(&via), q(&entry)]);
        }
    }

    fn commit(&mut self, st: &mut St, b: usize) {
        self.announce(st, b);
        if let Some((proto, via)) = st.pending.take() {
            let (cur, base) = st.layers.last().unwrap().clone();
            self.emit("protocol_accessed", b, &[q(&via), q(&proto)]);
            st.layers.push((proto, base + self.hlen(&cur)));
        }
    }

    fn header(&mut self, st: &mut St, abs: i64, b: usize) -> (String, String) {
        self.announce(st, b);
        let (cur, base) = st.layers.last().unwrap().clone();
        if abs >= base + self.hlen(&cur) {
            if st.pending.is_none() {
                if let Some(p) = self.spec.protocols.iter().find(|p| p.name == cur) {
                    let nexts: BTreeSet<(&str, &str)> = p
                        .tails
                        .iter()
                        .map(|t| (t.field.as_str(), t.next.as_str()))
                        .collect();
                    if nexts.len() == 1 {
                        let (f, n) = nexts.into_iter().next().unwrap();
                        st.pending = Some((n.to_string(), format!("{cur}.{f}")));
                    }
                }
            }
            if st.pending.is_some() {
                self.commit(st, b);
            }
        }
        let mut layer = st.layers[0].clone();
        for l in st.layers.iter().rev() {
            if l.1 <= abs {
                layer = l.clone();
                break;
            }
        }
        (self.hdr_name(&layer.0, abs - layer.1), layer.0)
    }

    fn slot_key(off: i64, w: u32) -> Result<i64, Fail> {
        if off < -512 || off + w as i64 > 0 {
            return Err(Fail);
        }
        Ok(off)
    }

    fn clear(st: &mut St, off: i64, w: u32) {
        st.stack
            .retain(|&s, (_, sw)| s + *sw as i64 <= off || s >= off + w as i64);
    }

    fn field_of_value_ptr(&self, st: &St, v: &V) -> String {
        match v {
            V::Field { name, .. } => name.clone(),
            V::Stack(o) => match st.stack.get(o) {
                Some((V::Field { name, .. }, _)) => name.clone(),
                _ => "unknown".into(),
            },
            V::Pkt(abs) => {
                for (p, base) in st.layers.iter().rev() {
                    if *base <= *abs {
                        if self.spec.protocols.iter().any(|x| x.name == *p) {
                            return self.hdr_name(p, abs - base);
                        }
                        return "unknown".into();
                    }
                }
                "unknown".into()
            }
            _ => "unknown".into(),
        }
    }

    fn map_source(st: &St, v: &V) -> Option<i64> {
        match v {
            V::MapRef(m) | V::MapVal(m) => Some(*m),
            V::Stack(o) => match st.stack.get(o) {
                Some((V::MapRef(m), _)) | Some((V::MapVal(m), _)) => Some(*m),
                _ => None,
            },
            _ => None,
        }
    }

    fn action(&self, r0: &V) -> String {
        let table = self
            .spec
            .actions
            .iter()
            .find(|a| a.hook == self.hook)
            .unwrap();
        match r0 {
            V::Const(c) => match table.codes.iter().find(|(k, _)| k == c) {
                Some((_, n)) => n.clone(),
                None => format!("UNKNOWN_ACTION({c})"),
            },
            _ => "UNKNOWN_ACTION".into(),
        }
    }

    fn target(&self, pos: usize) -> usize {
        let i = &self.nf.instructions[pos];
        let slot = (i.index as i64 + 1 + i.offset as i64) as usize;
        self.pos_of_slot[&slot]
    }

    fn walk(&mut self, pos: usize, mut st: St, mut path: Vec<usize>) -> Result<(), Fail> {
        let b = self.block_of[pos];
        if path.last() != Some(&b) {
            path.push(b);
        }
        let i = self.nf.instructions[pos].clone();
        let op = i.opcode;
        let class = op & 7;
        let (d, s) = (i.dst_reg as usize, i.src_reg as usize);
        let x_src = op & 0x08 != 0;
        let width = match (op >> 3) & 3 {
            0 => 4,
            1 => 2,
            2 => 1,
            _ => 8,
        };
        match class {
            // alu / alu64
            4 | 7 => {
                let wide = class == 7;
                let code = op >> 4;
                let srcv = if x_src && code != 0xd {
                    st.r[s].clone()
                } else {
                    V::Const(i.imm as i64)
                };
                let dv = st.r[d].clone();
                let t = |v: i64| if wide { v } else { v as u32 as i64 };
                let res = match code {
                    0xb => {
                        if wide {
                            srcv
                        } else if let Some(k) = srcv.konst() {
                            V::Const(k as u32 as i64)
                        } else if matches!(srcv, V::Field { .. }) {
                            srcv
                        } else {
                            V::Unk
                        }
                    }
                    0xd => match dv {
                        V::Const(v) => {
                            let mask: u64 = match i.imm {
                                16 => 0xffff,
                                32 => 0xffff_ffff,
                                _ => u64::MAX,
                            };
                            let x = v as u64 & mask;
                            V::Const(if !x_src {
                                x as i64
                            } else if i.imm == 16 {
                                (x as u16).swap_bytes() as i64
                            } else if i.imm == 32 {
                                (x as u32).swap_bytes() as i64
                            } else {
                                x.swap_bytes() as i64
                            })
                        }
                        f @ V::Field { .. } => f,
                        _ => V::Unk,
                    },
                    0x8 => match dv {
                        V::Const(v) => V::Const(t(v.wrapping_neg())),
                        _ => V::Unk,
                    },
                    _ => match (dv.konst(), srcv.konst()) {
                        (Some(a), Some(bb)) => {
                            if wide {
                                let (ua, ub) = (a as u64, bb as u64);
                                match code {
                                    0x0 => V::Const(a.wrapping_add(bb)),
                                    0x1 => V::Const(a.wrapping_sub(bb)),
                                    0x2 => V::Const(a.wrapping_mul(bb)),
                                    0x3 => V::Const(if ub == 0 { 0 } else { (ua / ub) as i64 }),
                                    0x4 => V::Const(a | bb),
                                    0x5 => V::Const(a & bb),
                                    0x6 => V::Const((ua << (ub % 64)) as i64),
                                    0x7 => V::Const((ua >> (ub % 64)) as i64),
                                    0x9 => {
                                        if ub == 0 {
                                            dv.clone()
                                        } else {
                                            V::Const((ua % ub) as i64)
                                        }
                                    }
                                    0xa => V::Const(a ^ bb),
                                    0xc => V::Const(a >> (ub % 64)),
                                    _ => V::Unk,
                                }
                            } else {
                                let (ua, ub) = (a as u32, bb as u32);
                                let r: u32 = match code {
                                    0x0 => ua.wrapping_add(ub),
                                    0x1 => ua.wrapping_sub(ub),
                                    0x2 => ua.wrapping_mul(ub),
                                    0x3 => {
                                        if ub == 0 {
                                            0
                                        } else {
                                            ua / ub
                                        }
                                    }
                                    0x4 => ua | ub,
                                    0x5 => ua & ub,
                                    0x6 => ua << (ub % 32),
                                    0x7 => ua >> (ub % 32),
                                    0x9 => {
                                        if ub == 0 {
                                            ua
                                        } else {
                                            ua % ub
                                        }
                                    }
                                    0xa => ua ^ ub,
                                    0xc => ((ua as i32) >> (ub % 32)) as u32,
                                    _ => 0,
                                };
                                V::Const(r as i64)
                            }
                        }
                        _ if !wide => V::Unk,
                        _ => {
                            let add = code == 0x0;
                            let sub = code == 0x1;
                            match (&dv, srcv.konst()) {
                                (V::MapRef(_), Some(_)) if add || sub => dv.clone(),
                                (p, Some(k)) if p.is_ptr() && (add || sub) => {
                                    let o = if add {
                                        p.off().wrapping_add(k)
                                    } else {
                                        p.off().wrapping_sub(k)
                                    };
                                    match p {
                                        V::Ctx(_) => V::Ctx(o),
                                        V::Pkt(_) => V::Pkt(o),
                                        V::Stack(_) => V::Stack(o),
                                        _ => unreachable!(),
                                    }
                                }
                                _ => match (&dv, &srcv) {
                                    (V::Const(k), V::Ctx(o)) if add => V::Ctx(o.wrapping_add(*k)),
                                    (V::Const(k), V::Pkt(o)) if add => V::Pkt(o.wrapping_add(*k)),
                                    (V::Const(k), V::Stack(o)) if add => {
                                        V::Stack(o.wrapping_add(*k))
                                    }
                                    (V::Pkt(a), V::Pkt(c)) if sub => V::Const(a - c),
                                    _ => V::Unk,
                                },
                            }
                        }
                    },
                };
                if d != 10 {
                    st.r[d] = res;
                }
            }
            // lddw
            0 => {
                let v = if i.src_reg == 1 {
                    V::MapRef(i.imm64.unwrap())
                } else {
                    V::Const(i.imm64.unwrap())
                };
                if d != 10 {
                    st.r[d] = v;
                }
            }
            // ldx
            1 => {
                let sv = st.r[s].clone();
                let off = sv.off() + i.offset as i64;
                let v = match &sv {
                    V::Ctx(_) => {
                        let (name, short) = self.buf_field(off);
                        self.emit("read_buffer_field", b, &[q(&name)]);
                        match short {
                            Some(n) if n == self.data => V::Pkt(0),
                            Some(n) if n == self.data_end => V::End,
                            _ => V::Field {
                                name,
                                proto: None,
                                width,
                            },
                        }
                    }
                    V::Pkt(_) => {
                        let (name, proto) = self.header(&mut st, off, b);
                        self.emit("read_header_field", b, &[q(&name)]);
                        V::Field {
                            name,
                            proto: Some(proto),
                            width,
                        }
                    }
                    V::Stack(_) => {
                        Self::slot_key(off, width)?;
                        match st.stack.get(&off) {
                            Some((v, w)) if *w == width => v.clone(),
                            _ => V::Unk,
                        }
                    }
                    V::MapRef(m) | V::MapVal(m) => V::MapVal(*m),
                    _ => V::Unk,
                };
                if d != 10 {
                    st.r[d] = v;
                }
            }
            // st / stx
            2 | 3 => {
                let mode = op & 0xe0;
                if class == 3 && mode == 0xc0 {
                    if let V::Stack(o) = st.r[d] {
                        let off = o + i.offset as i64;
                        Self::slot_key(off, width)?;
                        Self::clear(&mut st, off, width);
                    }
                    if i.imm == 0xf1 {
                        st.r[0] = V::Unk;
                    } else if i.imm & 1 != 0 && s != 10 {
                        st.r[s] = V::Unk;
                    }
                } else {
                    let dv = st.r[d].clone();
                    let off = dv.off() + i.offset as i64;
                    let mut val = if class == 2 {
                        V::Const(i.imm as i64)
                    } else {
                        st.r[s].clone()
                    };
                    if width < 8 {
                        val = match val {
                            V::Const(k) => V::Const(k & ((1i64 << (width * 8)) - 1)),
                            v @ (V::Unk | V::Field { .. } | V::MapVal(_)) => v,
                            _ => V::Unk,
                        };
                    }
                    match dv {
                        V::Ctx(_) => {
                            let (name, _) = self.buf_field(off);
                            self.emit("write_buffer_field", b, &[q(&name)]);
                        }
                        V::Pkt(_) => {
                            let (name, _) = self.header(&mut st, off, b);
                            if let V::Const(k) = val {
                                st.pairs.insert(format!("({}, {k})", q(&name)));
                            }
                            self.emit("write_header_field", b, &[q(&name)]);
                        }
                        V::Stack(_) => {
                            Self::slot_key(off, width)?;
                            Self::clear(&mut st, off, width);
                            st.stack.insert(off, (val, width));
                        }
                        _ => {}
                    }
                }
            }
            // jumps
            _ => {
                let code = op >> 4;
                if code == 0x9 {
                    let action = self.action(&st.r[0]);
                    let pairs: Vec<String> = st.pairs.iter().cloned().collect();
                    let blocks: Vec<String> = path.iter().map(|b| node(*b)).collect();
                    let hook = self.hook.clone();
                    self.facts.insert(format!(
                        "return_action({}, {}, {}, {{{}}}, [{}]).",
                        self.id(),
                        q(&hook),
                        q(&action),
                        pairs.join(", "),
                        blocks.join(", ")
                    ));
                    return Ok(());
                }
                if code == 0x8 {
                    let id = i.imm as i64;
                    let hname = self
                        .spec
                        .helpers
                        .iter()
                        .find(|h| h.id == id)
                        .map(|h| h.name.clone());
                    self.emit(
                        "invoke_helper",
                        b,
                        &[q(&hname.unwrap_or(format!("unknown@{id}")))],
                    );
                    let map = match st.r[1] {
                        V::MapRef(m) => Some(m),
                        _ => None,
                    };
                    if let Some(m) = map {
                        let mn = self.map_name(m);
                        if id == 1 {
                            self.emit("read_from_map", b, &[q(&mn)]);
                        }
                        if id == 2 {
                            let f = self.field_of_value_ptr(&st, &st.r[3].clone());
                            self.emit("write_into_map", b, &[q(&mn), q(&f)]);
                        }
                        if [1, 2, 3, 51].contains(&id) {
                            if let Some(from) = Self::map_source(&st, &st.r[2]) {
                                let fname = self.map_name(from);
                                self.emit("correlated_maps", b, &[q(&fname), q(&mn)]);
                            }
                        }
                    }
                    for r in 1..=5 {
                        st.r[r] = V::Unk;
                    }
                    st.r[0] = match map {
                        Some(m) if id == 1 => V::MapRef(m),
                        _ => match self
                            .spec
                            .helpers
                            .iter()
                            .find(|h| h.id == id)
                            .and_then(|h| h.ret)
                        {
                            Some(v) => V::Const(v),
                            None => V::Unk,
                        },
                    };
                    return self.walk(pos + 1, st, path);
                }
                let t = self.target(pos);
                if code == 0x0 {
                    return self.walk(t, st, path);
                }
                if t == pos + 1 {
                    return self.walk(t, st, path);
                }
                let mut taken = st.clone();
                self.cond_edge(&mut taken, &i, true, self.block_of[t]);
                self.walk(t, taken, path.clone())?;
                self.cond_edge(&mut st, &i, false, self.block_of[pos + 1]);
                return self.walk(pos + 1, st, path);
            }
        }
        self.walk(pos + 1, st, path)
    }

    fn cond_edge(&mut self, st: &mut St, i: &prashna::isa::Instruction, taken: bool, dest: usize) {
        let code = i.opcode >> 4;
        let dv = st.r[i.dst_reg as usize].clone();
        let sv = if i.opcode & 0x08 != 0 {
            st.r[i.src_reg as usize].clone()
        } else {
            V::Const(i.imm as i64)
        };
        // codes: 1 eq, 2 gt, 3 ge, 4 set, 5 ne, 6 sgt, 7 sge, a lt, b le, c slt, d sle
        let greater = matches!(code, 0x2 | 0x3 | 0x6 | 0x7);
        let less = matches!(code, 0xa | 0xb | 0xc | 0xd);
        let bound = match (&dv, &sv) {
            (V::Pkt(_), V::End) if greater => Some(false),
            (V::Pkt(_), V::End) if less => Some(true),
            (V::End, V::Pkt(_)) if less => Some(false),
            (V::End, V::Pkt(_)) if greater => Some(true),
            _ => None,
        };
        if let Some(in_taken) = bound {
            if in_taken == taken {
                self.commit(st, dest);
            }
            return;
        }
        let (name, proto, k, code) = match (&dv, &sv) {
            (V::Field { name, proto, .. }, V::Const(k)) => (name.clone(), proto.clone(), *k, code),
            (V::Const(k), V::Field { name, proto, .. }) if i.opcode & 0x08 != 0 => {
                let flipped = match code {
                    0x2 => 0xa,
                    0x3 => 0xb,
                    0xa => 0x2,
                    0xb => 0x3,
                    0x6 => 0xc,
                    0x7 => 0xd,
                    0xc => 0x6,
                    0xd => 0x7,
                    c => c,
                };
                (name.clone(), proto.clone(), *k, flipped)
            }
            _ => return,
        };
        // relation as (symbol, is_eq)
        let rel: &str = match (code, taken) {
            (0x4, _) => return,
            (0x1, true) | (0x5, false) => "==",
            (0x1, false) | (0x5, true) => CMP_NE,
            (0x2 | 0x6, true) | (0xb | 0xd, false) => ">",
            (0x3 | 0x7, true) | (0xa | 0xc, false) => ">=",
            (0xa | 0xc, true) | (0x3 | 0x7, false) => "<",
            (0xb | 0xd, true) | (0x2 | 0x6, false) => "<=",
            _ => return,
        };
        let mut value = k;
        if let Some(p) = &proto {
            if let Some(ps) = self.spec.protocols.iter().find(|x| x.name == *p) {
                let short = name
                    .strip_prefix(&format!("{p}."))
                    .unwrap_or(&name)
                    .to_string();
                if let Some(f) = ps.fields.iter().find(|f| f.name == short) {
                    let bytes = f.width.min(8) as usize;
                    let raw = (k as u64).to_le_bytes();
                    let mut m = [0u8; 8];
                    m[..bytes].copy_from_slice(&raw[..bytes]);
                    let masked = u64::from_le_bytes(m);
                    let mut sw = [0u8; 8];
                    for j in 0..bytes {
                        sw[j] = raw[bytes - 1 - j];
                    }
                    let swapped = u64::from_le_bytes(sw);
                    let hit = [masked, swapped].into_iter().find_map(|v| {
                        ps.tails
                            .iter()
                            .find(|t| t.field == short && t.value == v)
                            .map(|t| (v, t.next.clone()))
                    });
                    if let Some((v, next)) = hit {
                        value = v as i64;
                        if rel == "==" && st.layers.last().unwrap().0 == *p {
                            st.pending = Some((next, name.clone()));
                        }
                    }
                }
            }
        }
        let shown = if rel == "==" {
            value.to_string()
        } else {
            format!("{rel}{value}")
        };
        st.pairs.insert(format!("({}, {shown})", q(&name)));
    }
}

/// Facts the naive interpreter derives for `nf`, one line each, with the
/// pair list of return_action printed as a sorted set. `None` when some
/// path hits a stack access out of range.
pub fn naive_facts(nf: &NfObject, spec: &NetSpec) -> Option<BTreeSet<String>> {
    let hook = spec.hooks.iter().find(|h| h.name == nf.hook).unwrap();
    let buf = spec.buffers.iter().find(|b| b.name == hook.buffer).unwrap();
    let insns = &nf.instructions;
    let pos_of_slot: BTreeMap<usize, usize> = insns
        .iter()
        .enumerate()
        .map(|(p, i)| (i.index, p))
        .collect();

    let mut cx = Ctx {
        nf,
        spec,
        hook: hook.name.clone(),
        entry: hook.entry.clone(),
        buf_name: buf.name.clone(),
        buf_fields: buf.fields.clone(),
        data: buf.data_field.clone(),
        data_end: buf.data_end_field.clone(),
        pos_of_slot,
        block_of: Vec::new(),
        facts: BTreeSet::new(),
    };

    // Leaders and blocks.
    let n = insns.len();
    let mut leader = vec![false; n];
    leader[0] = true;
    for (p, i) in insns.iter().enumerate() {
        let class = i.opcode & 7;
        let code = i.opcode >> 4;
        if class == 5 || class == 6 {
            if code == 0x9 {
                if p + 1 < n {
                    leader[p + 1] = true;
                }
            } else if code != 0x8 {
                leader[cx.target(p)] = true;
                if p + 1 < n {
                    leader[p + 1] = true;
                }
            }
        }
    }
    let mut b = 0;
    for p in 0..n {
        if leader[p] && p > 0 {
            b += 1;
        }
        cx.block_of.push(b);
    }
    // Edges from every block's last instruction.
    for p in 0..n {
        if p + 1 < n && !leader[p + 1] {
            continue;
        }
        let i = &insns[p];
        let (class, code) = (i.opcode & 7, i.opcode >> 4);
        let from = cx.block_of[p];
        let mut succ = Vec::new();
        if class == 5 || class == 6 {
            match code {
                0x9 => {}
                0x8 => succ.push(cx.block_of[p + 1]),
                0x0 => succ.push(cx.block_of[cx.target(p)]),
                _ => {
                    succ.push(cx.block_of[cx.target(p)]);
                    succ.push(cx.block_of[p + 1]);
                }
            }
        } else {
            succ.push(cx.block_of[p + 1]);
        }
        for s in succ.into_iter().collect::<BTreeSet<_>>() {
            cx.facts
                .insert(format!("edge({}, {}, {}).", cx.id(), node(from), node(s)));
        }
    }

    let mut r = vec![V::Unk; 11];
    r[1] = V::Ctx(0);
    r[10] = V::Stack(0);
    let st = St {
        r,
        stack: BTreeMap::new(),
        layers: vec![(hook.entry.clone(), 0)],
        announced: false,
        pending: None,
        pairs: BTreeSet::new(),
    };
    match cx.walk(0, st, Vec::new()) {
        Ok(()) => Some(cx.facts),
        Err(Fail) => None,
    }
}

/// The analyzer's knowledge base in the oracle's line format.
pub fn kb_lines(kb: &KnowledgeBase) -> BTreeSet<String> {
    kb.iter()
        .map(|f| {
            if f.pred != "return_action" {
                return f.to_string();
            }
            let Atom::List(parts) = &f.args[3] else {
                panic!("bad return_action {f}")
            };
            let (Atom::List(pairs), Atom::List(blocks)) = (&parts[0], &parts[1]) else {
                panic!("bad return_action {f}")
            };
            let mut ps: Vec<String> = pairs.iter().map(|p| p.to_string()).collect();
            ps.sort();
            ps.dedup();
            let bs: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
            format!(
                "return_action({}, {}, {}, {{{}}}, [{}]).",
                f.args[0],
                f.args[1],
                f.args[2],
                ps.join(", "),
                bs.join(", ")
            )
        })
        .collect()
}
