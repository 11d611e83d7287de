//! Path-sensitive abstract interpretation of an NF's bytecode.
//!
//! Every register and stack cell carries a [`TaggedCell`]. The walker runs
//! each root-to-exit path of the CFG, applies the per-instruction transfer
//! rules and the per-edge rules of conditional jumps, and unions the
//! resulting [`ContextItem`]s per basic block. Exits additionally record a
//! [`PathAction`] with the field/value constraints that hold on that path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::cfg::{build_cfg, BlockId, Cfg, CfgError, DEFAULT_PATH_BUDGET};
use crate::isa::{AluOp, InsnKind, Instruction, JmpOp, CLASS_ST, SRC_REG};
use crate::loader::NfObject;
use crate::netspec::{unknown_action, BuffRole, BufferSpec, HookSpec, NetSpec, NetSpecError};

/// Size of the eBPF stack frame in bytes.
pub const STACK_SIZE: i64 = 512;

const ATOMIC_FETCH: i32 = 0x01;
const ATOMIC_CMPXCHG: i32 = 0xf1;

const HELPER_MAP_LOOKUP: i64 = 1;
const HELPER_MAP_UPDATE: i64 = 2;
const HELPER_MAP_DELETE: i64 = 3;
const HELPER_REDIRECT_MAP: i64 = 51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    PktBuff,
    PktDataStart,
    PktDataEnd,
    Const,
    RefMap,
    StackFrame,
    Unknown,
}

/// Where a scalar came from, when that is known.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Loaded from a buffer or header field. `proto` is `None` for buffer
    /// fields.
    Field {
        name: Arc<str>,
        proto: Option<Arc<str>>,
        width: u8,
    },
    /// Loaded through a pointer into the value of map `ordinal`.
    Map(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaggedCell {
    pub tag: Tag,
    /// Constant for `Const`, byte offset for pointers, map ordinal for
    /// `RefMap`.
    pub value: Option<i64>,
    pub origin: Option<Origin>,
}

impl TaggedCell {
    pub fn unknown() -> Self {
        TaggedCell {
            tag: Tag::Unknown,
            value: None,
            origin: None,
        }
    }

    pub fn constant(v: i64) -> Self {
        TaggedCell {
            tag: Tag::Const,
            value: Some(v),
            origin: None,
        }
    }

    pub fn pointer(tag: Tag, off: i64) -> Self {
        TaggedCell {
            tag,
            value: Some(off),
            origin: None,
        }
    }

    fn scalar_from(origin: Origin) -> Self {
        TaggedCell {
            tag: Tag::Unknown,
            value: None,
            origin: Some(origin),
        }
    }

    pub fn const_value(&self) -> Option<i64> {
        match self.tag {
            Tag::Const => self.value,
            _ => None,
        }
    }

    /// Field name, owning protocol and load width.
    #[allow(clippy::type_complexity)]
    fn field_origin(&self) -> Option<(&Arc<str>, Option<&Arc<str>>, u8)> {
        match &self.origin {
            Some(Origin::Field { name, proto, width }) if self.tag == Tag::Unknown => {
                Some((name, proto.as_ref(), *width))
            }
            _ => None,
        }
    }
}

/// Comparison operator of a per-path constraint or query term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Ne,
    Gt,
    Ge,
    Lt,
    Le,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Ne => "!=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
        }
    }

    pub fn holds(self, lhs: i64, rhs: i64) -> bool {
        match self {
            CmpOp::Ne => lhs != rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Value side of a per-path `(field, value)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairValue {
    Int(i64),
    Cmp(CmpOp, i64),
}

impl fmt::Display for PairValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairValue::Int(v) => write!(f, "{v}"),
            PairValue::Cmp(op, v) => write!(f, "{op}{v}"),
        }
    }
}

impl Serialize for PairValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PairValue::Int(v) => s.serialize_i64(*v),
            PairValue::Cmp(..) => s.collect_str(self),
        }
    }
}

/// One network-context observation attached to a basic block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextItem {
    ReadBuff {
        field: String,
    },
    ReadHdr {
        field: String,
    },
    WriteBuff {
        field: String,
        value: Option<i64>,
    },
    WriteHdr {
        field: String,
        value: Option<i64>,
    },
    MapRead {
        map: String,
    },
    MapWrite {
        map: String,
        field: String,
    },
    /// The lookup result of `from` is used as a key into `to`.
    CorrelatedMaps {
        from: String,
        to: String,
    },
    Helper {
        name: String,
    },
    /// `proto` was reached by dispatching on field `via`.
    ProtoAccessed {
        via: String,
        proto: String,
    },
    PktAction {
        hook: String,
        action: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathAction {
    pub hook: String,
    pub action: String,
    pub blocks: Vec<BlockId>,
    pub pairs: BTreeSet<(String, PairValue)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("stack access at fp{offset:+} width {width} is outside the frame")]
    StackOutOfRange { offset: i64, width: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error(transparent)]
    NetSpec(#[from] NetSpecError),
    #[error("hook {hook} names buffer {buffer} which is not defined")]
    MissingBuffer { hook: String, buffer: String },
    #[error("path {} at {block}, insn {index}: {source}", fmt_path(.path))]
    Step {
        path: Vec<BlockId>,
        block: BlockId,
        index: usize,
        source: StepError,
    },
}

fn fmt_path(path: &[BlockId]) -> String {
    path.iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join("->")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layer {
    proto: Arc<str>,
    base: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Pending {
    proto: Arc<str>,
    via: Arc<str>,
}

/// Register file, stack and protocol-parsing state along one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractState {
    pub regs: [TaggedCell; 11],
    /// Stack slots keyed by frame offset `512 + fp_off`, with store width.
    stack: BTreeMap<i64, (TaggedCell, u8)>,
    /// Committed protocol layers, outermost first. Never empty.
    layers: Vec<Layer>,
    entry_announced: bool,
    pending: Option<Pending>,
    pairs: BTreeSet<(String, PairValue)>,
}

impl AbstractState {
    /// Innermost protocol the path has committed to.
    pub fn curr_proto(&self) -> &str {
        &self.layers.last().expect("layers never empty").proto
    }

    /// Packet offset where [`AbstractState::curr_proto`] starts.
    pub fn proto_base(&self) -> i64 {
        self.layers.last().expect("layers never empty").base
    }

    /// Protocol announced by a dispatch comparison but not yet committed.
    pub fn next_proto(&self) -> Option<&str> {
        self.pending.as_ref().map(|p| &*p.proto)
    }

    /// Stack cell stored at `fp_off` with exactly `width` bytes.
    pub fn stack_cell(&self, fp_off: i64, width: u8) -> Option<&TaggedCell> {
        match self.stack.get(&(STACK_SIZE + fp_off)) {
            Some((c, w)) if *w == width => Some(c),
            _ => None,
        }
    }

    pub fn pairs(&self) -> &BTreeSet<(String, PairValue)> {
        &self.pairs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub path_budget: u64,
    /// Walk independent subtrees on the rayon pool. Ignored without the
    /// `parallel` feature.
    pub parallel: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            path_budget: DEFAULT_PATH_BUDGET,
            parallel: cfg!(feature = "parallel"),
        }
    }
}

/// CFG annotated with network context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfgNc {
    pub cfg: Cfg,
    pub block_ctx: BTreeMap<BlockId, BTreeSet<ContextItem>>,
    /// One entry per root-to-exit path, in depth-first order (taken edge
    /// first).
    pub path_actions: Vec<PathAction>,
}

impl CfgNc {
    pub fn items(&self, block: BlockId) -> impl Iterator<Item = &ContextItem> {
        self.block_ctx.get(&block).into_iter().flatten()
    }

    pub fn all_items(&self) -> impl Iterator<Item = (BlockId, &ContextItem)> {
        self.block_ctx
            .iter()
            .flat_map(|(b, s)| s.iter().map(move |i| (*b, i)))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            blocks: &'a [crate::cfg::BasicBlock],
            edges: Vec<(BlockId, BlockId)>,
            block_ctx: &'a BTreeMap<BlockId, BTreeSet<ContextItem>>,
            path_actions: &'a [PathAction],
        }
        let dump = Dump {
            blocks: &self.cfg.blocks,
            edges: self.cfg.edges(),
            block_ctx: &self.block_ctx,
            path_actions: &self.path_actions,
        };
        serde_json::to_string_pretty(&dump).expect("context dump serializes")
    }
}

/// Transfer functions bound to one NF and network spec.
pub struct Analyzer<'a> {
    nf: &'a NfObject,
    spec: &'a NetSpec,
    hook: &'a HookSpec,
    buffer: &'a BufferSpec,
}

impl<'a> Analyzer<'a> {
    pub fn new(nf: &'a NfObject, spec: &'a NetSpec) -> Result<Self, AnalyzeError> {
        let hook = spec.hook(&nf.hook)?;
        let buffer = spec
            .buffer(&hook.buffer)
            .ok_or_else(|| AnalyzeError::MissingBuffer {
                hook: hook.name.clone(),
                buffer: hook.buffer.clone(),
            })?;
        spec.protocol(&hook.entry)?;
        spec.action_name(&hook.name, 0)?;
        Ok(Analyzer {
            nf,
            spec,
            hook,
            buffer,
        })
    }

    /// State at program entry: `r1` holds the context buffer and `r10` the
    /// frame pointer.
    pub fn init_state(&self) -> AbstractState {
        let mut regs: [TaggedCell; 11] = std::array::from_fn(|_| TaggedCell::unknown());
        regs[1] = TaggedCell {
            tag: Tag::PktBuff,
            value: None,
            origin: None,
        };
        regs[10] = TaggedCell::pointer(Tag::StackFrame, 0);
        AbstractState {
            regs,
            stack: BTreeMap::new(),
            layers: vec![Layer {
                proto: Arc::from(self.hook.entry.as_str()),
                base: 0,
            }],
            entry_announced: false,
            pending: None,
            pairs: BTreeSet::new(),
        }
    }

    fn map_name(&self, ordinal: i64) -> String {
        match self.nf.map_name(ordinal) {
            Some(n) => n.to_string(),
            None => format!("map#{ordinal}"),
        }
    }

    fn header_len(&self, proto: &str) -> i64 {
        self.spec
            .protocol(proto)
            .map(|p| i64::from(p.header_len))
            .unwrap_or(0)
    }

    /// Applies one non-edge transfer rule and returns the items it emits.
    pub fn step(
        &self,
        st: &mut AbstractState,
        insn: &Instruction,
    ) -> Result<Vec<ContextItem>, StepError> {
        let mut items = Vec::new();
        let dst = insn.dst_reg as usize;
        match insn.kind {
            InsnKind::Alu if insn.is_atomic() => self.atomic(st, insn)?,
            InsnKind::Alu => {
                if dst != 10 {
                    self.alu(st, insn);
                }
            }
            InsnKind::Mov => {
                if dst != 10 {
                    self.mov(st, insn);
                }
            }
            InsnKind::LoadImm64 => {
                if dst != 10 {
                    st.regs[dst] = TaggedCell::constant(insn.imm64.unwrap_or(i64::from(insn.imm)));
                }
            }
            InsnKind::LoadMapFd => {
                if dst != 10 {
                    let ord = insn.imm64.unwrap_or(i64::from(insn.imm));
                    st.regs[dst] = TaggedCell::pointer(Tag::RefMap, ord);
                }
            }
            InsnKind::LoadMem => self.load(st, insn, &mut items)?,
            InsnKind::StoreMem => self.store(st, insn, &mut items)?,
            InsnKind::Call => self.call(st, insn, &mut items),
            InsnKind::Exit => {
                let action = self.exit_action(st);
                items.push(ContextItem::PktAction {
                    hook: self.hook.name.clone(),
                    action,
                });
            }
            InsnKind::JumpCond | InsnKind::JumpUncond => {}
        }
        Ok(items)
    }

    fn exit_action(&self, st: &AbstractState) -> String {
        match st.regs[0].const_value() {
            Some(code) => self
                .spec
                .action_name(&self.hook.name, code)
                .unwrap_or_else(|_| unknown_action(code)),
            None => crate::netspec::UNKNOWN_ACTION.to_string(),
        }
    }

    fn operand(&self, st: &AbstractState, insn: &Instruction) -> TaggedCell {
        if insn.uses_src_reg() {
            st.regs[insn.src_reg as usize].clone()
        } else {
            TaggedCell::constant(i64::from(insn.imm))
        }
    }

    fn mov(&self, st: &mut AbstractState, insn: &Instruction) {
        let src = self.operand(st, insn);
        let dst = insn.dst_reg as usize;
        st.regs[dst] = if insn.is_alu64() {
            src
        } else if let Some(v) = src.const_value() {
            TaggedCell::constant(v as u32 as i64)
        } else if src.field_origin().is_some() {
            src
        } else {
            TaggedCell::unknown()
        };
    }

    fn alu(&self, st: &mut AbstractState, insn: &Instruction) {
        let Some(op) = insn.alu_op() else { return };
        let dst = insn.dst_reg as usize;
        let d = st.regs[dst].clone();
        let wide = insn.is_alu64();
        let result = match op {
            AluOp::End => match d.const_value() {
                Some(v) => TaggedCell::constant(byte_swap(v, insn.imm, insn.opcode & SRC_REG != 0)),
                None if d.field_origin().is_some() => TaggedCell { value: None, ..d },
                None => TaggedCell::unknown(),
            },
            AluOp::Neg => match d.const_value() {
                Some(v) => TaggedCell::constant(trunc(v.wrapping_neg(), wide)),
                None => TaggedCell::unknown(),
            },
            AluOp::Mov => return self.mov(st, insn),
            _ => {
                let s = self.operand(st, insn);
                binary(op, &d, &s, wide)
            }
        };
        st.regs[dst] = result;
    }

    fn stack_key(&self, off: i64, width: u8) -> Result<i64, StepError> {
        let k = STACK_SIZE + off;
        if k < 0 || k + i64::from(width) > STACK_SIZE {
            return Err(StepError::StackOutOfRange { offset: off, width });
        }
        Ok(k)
    }

    fn clear_stack(st: &mut AbstractState, k: i64, width: u8) {
        let end = k + i64::from(width);
        let doomed: Vec<i64> = st
            .stack
            .range(k - 8..end)
            .filter(|(start, (_, w))| **start + i64::from(*w) > k)
            .map(|(start, _)| *start)
            .collect();
        for d in doomed {
            st.stack.remove(&d);
        }
    }

    fn atomic(&self, st: &mut AbstractState, insn: &Instruction) -> Result<(), StepError> {
        let width = insn.mem_width().unwrap_or(8);
        let d = &st.regs[insn.dst_reg as usize];
        if d.tag == Tag::StackFrame {
            let k = self.stack_key(d.value.unwrap_or(0) + i64::from(insn.offset), width)?;
            Self::clear_stack(st, k, width);
        }
        if insn.imm == ATOMIC_CMPXCHG {
            st.regs[0] = TaggedCell::unknown();
        } else if insn.imm & ATOMIC_FETCH != 0 && insn.src_reg != 10 {
            st.regs[insn.src_reg as usize] = TaggedCell::unknown();
        }
        Ok(())
    }

    /// Announces the entry protocol the first time the path touches it.
    fn announce_entry(&self, st: &mut AbstractState, items: &mut Vec<ContextItem>) {
        if !st.entry_announced {
            st.entry_announced = true;
            items.push(ContextItem::ProtoAccessed {
                via: self.buffer.data_field_name(),
                proto: self.hook.entry.clone(),
            });
        }
    }

    /// Pushes the pending protocol as a new layer right after the current
    /// header.
    fn commit(&self, st: &mut AbstractState, items: &mut Vec<ContextItem>) {
        self.announce_entry(st, items);
        if let Some(p) = st.pending.take() {
            let base = st.proto_base() + self.header_len(st.curr_proto());
            items.push(ContextItem::ProtoAccessed {
                via: p.via.to_string(),
                proto: p.proto.to_string(),
            });
            st.layers.push(Layer {
                proto: p.proto,
                base,
            });
        }
    }

    /// Names the header field at absolute packet offset `abs`, committing a
    /// pending protocol when the access lies past the current header.
    fn resolve_hdr(
        &self,
        st: &mut AbstractState,
        abs: i64,
        items: &mut Vec<ContextItem>,
    ) -> (String, Arc<str>) {
        self.announce_entry(st, items);
        if abs >= st.proto_base() + self.header_len(st.curr_proto()) {
            if st.pending.is_none() {
                // Nothing dispatched, but the netspec allows one successor only.
                if let Ok(p) = self.spec.protocol(st.curr_proto()) {
                    if let Some((field, next)) = p.sole_successor() {
                        st.pending = Some(Pending {
                            proto: Arc::from(next),
                            via: Arc::from(format!("{}.{}", p.name, field)),
                        });
                    }
                }
            }
            if st.pending.is_some() {
                self.commit(st, items);
            }
        }
        let layer = st
            .layers
            .iter()
            .rev()
            .find(|l| l.base <= abs)
            .unwrap_or(&st.layers[0]);
        let name = self
            .spec
            .hdr_field_name(&layer.proto, abs - layer.base)
            .unwrap_or_else(|_| format!("{}.unknown@{}", layer.proto, abs - layer.base));
        (name, layer.proto.clone())
    }

    fn load(
        &self,
        st: &mut AbstractState,
        insn: &Instruction,
        items: &mut Vec<ContextItem>,
    ) -> Result<(), StepError> {
        let width = insn.mem_width().unwrap_or(8);
        let src = st.regs[insn.src_reg as usize].clone();
        let off = src.value.unwrap_or(0) + i64::from(insn.offset);
        let cell = match src.tag {
            Tag::PktBuff => {
                let name = self.buffer.field_name(off);
                items.push(ContextItem::ReadBuff {
                    field: name.clone(),
                });
                match self.buffer.role(off) {
                    BuffRole::Data => TaggedCell::pointer(Tag::PktDataStart, 0),
                    BuffRole::DataEnd => TaggedCell {
                        tag: Tag::PktDataEnd,
                        value: None,
                        origin: None,
                    },
                    BuffRole::Other => TaggedCell::scalar_from(Origin::Field {
                        name: Arc::from(name),
                        proto: None,
                        width,
                    }),
                }
            }
            Tag::PktDataStart => {
                let (name, proto) = self.resolve_hdr(st, off, items);
                items.push(ContextItem::ReadHdr {
                    field: name.clone(),
                });
                TaggedCell::scalar_from(Origin::Field {
                    name: Arc::from(name),
                    proto: Some(proto),
                    width,
                })
            }
            Tag::StackFrame => {
                let k = self.stack_key(off, width)?;
                match st.stack.get(&k) {
                    Some((c, w)) if *w == width => c.clone(),
                    _ => TaggedCell::unknown(),
                }
            }
            Tag::RefMap => TaggedCell::scalar_from(Origin::Map(src.value.unwrap_or(0) as usize)),
            Tag::Unknown => match src.origin {
                Some(Origin::Map(o)) => TaggedCell::scalar_from(Origin::Map(o)),
                _ => TaggedCell::unknown(),
            },
            Tag::PktDataEnd | Tag::Const => TaggedCell::unknown(),
        };
        if insn.dst_reg != 10 {
            st.regs[insn.dst_reg as usize] = cell;
        }
        Ok(())
    }

    fn store(
        &self,
        st: &mut AbstractState,
        insn: &Instruction,
        items: &mut Vec<ContextItem>,
    ) -> Result<(), StepError> {
        let width = insn.mem_width().unwrap_or(8);
        let d = st.regs[insn.dst_reg as usize].clone();
        let off = d.value.unwrap_or(0) + i64::from(insn.offset);
        let mut val = if insn.class() == CLASS_ST {
            TaggedCell::constant(i64::from(insn.imm))
        } else {
            st.regs[insn.src_reg as usize].clone()
        };
        if width < 8 {
            val = match val.const_value() {
                Some(v) => TaggedCell::constant(v & ((1i64 << (width * 8)) - 1)),
                None if matches!(val.tag, Tag::Unknown) => val,
                None => TaggedCell::unknown(),
            };
        }
        match d.tag {
            Tag::PktBuff => items.push(ContextItem::WriteBuff {
                field: self.buffer.field_name(off),
                value: val.const_value(),
            }),
            Tag::PktDataStart => {
                let (name, _) = self.resolve_hdr(st, off, items);
                if let Some(v) = val.const_value() {
                    st.pairs.insert((name.clone(), PairValue::Int(v)));
                }
                items.push(ContextItem::WriteHdr {
                    field: name,
                    value: val.const_value(),
                });
            }
            Tag::StackFrame => {
                let k = self.stack_key(off, width)?;
                Self::clear_stack(st, k, width);
                st.stack.insert(k, (val, width));
            }
            _ => {}
        }
        Ok(())
    }

    /// Map ordinal a key register derives from, if any.
    fn map_derived(&self, st: &AbstractState, cell: &TaggedCell) -> Option<i64> {
        match (cell.tag, &cell.origin) {
            (Tag::RefMap, _) => cell.value,
            (_, Some(Origin::Map(o))) => Some(*o as i64),
            (Tag::StackFrame, _) => {
                let k = STACK_SIZE + cell.value.unwrap_or(0);
                match st.stack.get(&k) {
                    Some((c, _)) if c.tag == Tag::RefMap => c.value,
                    Some((
                        TaggedCell {
                            origin: Some(Origin::Map(o)),
                            ..
                        },
                        _,
                    )) => Some(*o as i64),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Field whose value a map-update value pointer carries.
    fn value_field(&self, st: &AbstractState, cell: &TaggedCell) -> String {
        if let Some((name, _, _)) = cell.field_origin() {
            return name.to_string();
        }
        match cell.tag {
            Tag::StackFrame => {
                let k = STACK_SIZE + cell.value.unwrap_or(0);
                if let Some((c, _)) = st.stack.get(&k) {
                    if let Some((name, _, _)) = c.field_origin() {
                        return name.to_string();
                    }
                }
            }
            Tag::PktDataStart => {
                let abs = cell.value.unwrap_or(0);
                if let Some(layer) = st.layers.iter().rev().find(|l| l.base <= abs) {
                    if let Ok(name) = self.spec.hdr_field_name(&layer.proto, abs - layer.base) {
                        return name;
                    }
                }
            }
            _ => {}
        }
        "unknown".to_string()
    }

    fn call(&self, st: &mut AbstractState, insn: &Instruction, items: &mut Vec<ContextItem>) {
        let id = i64::from(insn.imm);
        items.push(ContextItem::Helper {
            name: self.spec.helper_name(id),
        });
        let r1 = &st.regs[1];
        let map = (r1.tag == Tag::RefMap).then(|| r1.value.unwrap_or(0));
        if let Some(m) = map {
            if id == HELPER_MAP_LOOKUP {
                items.push(ContextItem::MapRead {
                    map: self.map_name(m),
                });
            }
            if id == HELPER_MAP_UPDATE {
                let field = self.value_field(st, &st.regs[3]);
                items.push(ContextItem::MapWrite {
                    map: self.map_name(m),
                    field,
                });
            }
            if matches!(
                id,
                HELPER_MAP_LOOKUP | HELPER_MAP_UPDATE | HELPER_MAP_DELETE | HELPER_REDIRECT_MAP
            ) {
                if let Some(from) = self.map_derived(st, &st.regs[2]) {
                    items.push(ContextItem::CorrelatedMaps {
                        from: self.map_name(from),
                        to: self.map_name(m),
                    });
                }
            }
        }
        for r in 1..=5 {
            st.regs[r] = TaggedCell::unknown();
        }
        st.regs[0] = match (id, map) {
            (HELPER_MAP_LOOKUP, Some(m)) => TaggedCell::pointer(Tag::RefMap, m),
            _ => match self.spec.helper(id).and_then(|h| h.ret) {
                Some(v) => TaggedCell::constant(v),
                None => TaggedCell::unknown(),
            },
        };
    }

    /// Applies the rules attached to one outgoing edge of a conditional
    /// jump. Items returned belong to the destination block.
    pub fn edge(
        &self,
        st: &mut AbstractState,
        insn: &Instruction,
        taken: bool,
    ) -> Vec<ContextItem> {
        let mut items = Vec::new();
        let Some(op) = insn.jmp_op() else {
            return items;
        };
        if op == JmpOp::Ja {
            return items;
        }
        let d = st.regs[insn.dst_reg as usize].clone();
        let s = self.operand(st, insn);

        // Packet bound checks.
        let in_bounds_on_taken = match (d.tag, s.tag) {
            (Tag::PktDataStart, Tag::PktDataEnd) => match op {
                JmpOp::Jgt | JmpOp::Jge | JmpOp::Jsgt | JmpOp::Jsge => Some(false),
                JmpOp::Jlt | JmpOp::Jle | JmpOp::Jslt | JmpOp::Jsle => Some(true),
                _ => None,
            },
            (Tag::PktDataEnd, Tag::PktDataStart) => match op {
                JmpOp::Jlt | JmpOp::Jle | JmpOp::Jslt | JmpOp::Jsle => Some(false),
                JmpOp::Jgt | JmpOp::Jge | JmpOp::Jsgt | JmpOp::Jsge => Some(true),
                _ => None,
            },
            _ => None,
        };
        if let Some(on_taken) = in_bounds_on_taken {
            if on_taken == taken {
                self.commit(st, &mut items);
            }
            return items;
        }

        // Field compared against a constant.
        let (field, k, op) = match (
            d.field_origin(),
            s.const_value(),
            s.field_origin(),
            d.const_value(),
        ) {
            (Some(f), Some(k), _, _) => (f, k, op),
            (None, _, Some(f), Some(k)) if insn.uses_src_reg() => (f, k, flip(op)),
            _ => return items,
        };
        let (name, proto, _) = (field.0.clone(), field.1.cloned(), field.2);
        let Some(rel) = relation(op, taken) else {
            return items;
        };

        let mut value = k;
        if let Some(proto) = &proto {
            if let Ok(Some((canon, next))) = self.spec.tail_match(proto, &name, k as u64) {
                value = canon as i64;
                if rel == Rel::Eq && **proto == *st.curr_proto() {
                    st.pending = Some(Pending {
                        proto: Arc::from(next),
                        via: name.clone(),
                    });
                }
            }
        }
        let pv = match rel {
            Rel::Eq => PairValue::Int(value),
            Rel::Cmp(c) => PairValue::Cmp(c, value),
        };
        st.pairs.insert((name.to_string(), pv));
        items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rel {
    Eq,
    Cmp(CmpOp),
}

/// Relation between field and constant that holds on the chosen edge.
fn relation(op: JmpOp, taken: bool) -> Option<Rel> {
    let r = match op {
        JmpOp::Jeq => Rel::Eq,
        JmpOp::Jne => Rel::Cmp(CmpOp::Ne),
        JmpOp::Jgt | JmpOp::Jsgt => Rel::Cmp(CmpOp::Gt),
        JmpOp::Jge | JmpOp::Jsge => Rel::Cmp(CmpOp::Ge),
        JmpOp::Jlt | JmpOp::Jslt => Rel::Cmp(CmpOp::Lt),
        JmpOp::Jle | JmpOp::Jsle => Rel::Cmp(CmpOp::Le),
        JmpOp::Jset | JmpOp::Ja => return None,
    };
    if taken {
        return Some(r);
    }
    Some(match r {
        Rel::Eq => Rel::Cmp(CmpOp::Ne),
        Rel::Cmp(CmpOp::Ne) => Rel::Eq,
        Rel::Cmp(CmpOp::Gt) => Rel::Cmp(CmpOp::Le),
        Rel::Cmp(CmpOp::Ge) => Rel::Cmp(CmpOp::Lt),
        Rel::Cmp(CmpOp::Lt) => Rel::Cmp(CmpOp::Ge),
        Rel::Cmp(CmpOp::Le) => Rel::Cmp(CmpOp::Gt),
    })
}

/// Same comparison with operands swapped.
fn flip(op: JmpOp) -> JmpOp {
    match op {
        JmpOp::Jgt => JmpOp::Jlt,
        JmpOp::Jge => JmpOp::Jle,
        JmpOp::Jlt => JmpOp::Jgt,
        JmpOp::Jle => JmpOp::Jge,
        JmpOp::Jsgt => JmpOp::Jslt,
        JmpOp::Jsge => JmpOp::Jsle,
        JmpOp::Jslt => JmpOp::Jsgt,
        JmpOp::Jsle => JmpOp::Jsge,
        other => other,
    }
}

fn trunc(v: i64, wide: bool) -> i64 {
    if wide {
        v
    } else {
        v as u32 as i64
    }
}

fn byte_swap(v: i64, bits: i32, to_be: bool) -> i64 {
    let mask = match bits {
        16 => 0xffff,
        32 => 0xffff_ffff,
        _ => u64::MAX,
    };
    let x = v as u64 & mask;
    if !to_be {
        return x as i64;
    }
    (match bits {
        16 => u64::from((x as u16).swap_bytes()),
        32 => u64::from((x as u32).swap_bytes()),
        _ => x.swap_bytes(),
    }) as i64
}

fn is_pointer(tag: Tag) -> bool {
    matches!(
        tag,
        Tag::PktBuff | Tag::PktDataStart | Tag::StackFrame | Tag::RefMap
    )
}

fn binary(op: AluOp, d: &TaggedCell, s: &TaggedCell, wide: bool) -> TaggedCell {
    if let (Some(a), Some(b)) = (d.const_value(), s.const_value()) {
        return match const_op(op, a, b, wide) {
            Some(v) => TaggedCell::constant(v),
            None => d.clone(),
        };
    }
    if wide {
        match (op, d.tag, s.const_value()) {
            (AluOp::Add | AluOp::Sub, Tag::RefMap, Some(_)) => return d.clone(),
            (AluOp::Add, t, Some(k)) if is_pointer(t) => {
                return TaggedCell::pointer(t, d.value.unwrap_or(0).wrapping_add(k));
            }
            (AluOp::Sub, t, Some(k)) if is_pointer(t) => {
                return TaggedCell::pointer(t, d.value.unwrap_or(0).wrapping_sub(k));
            }
            _ => {}
        }
        if op == AluOp::Add && is_pointer(s.tag) && s.tag != Tag::RefMap {
            if let Some(k) = d.const_value() {
                return TaggedCell::pointer(s.tag, s.value.unwrap_or(0).wrapping_add(k));
            }
        }
        if op == AluOp::Sub && d.tag == Tag::PktDataStart && s.tag == Tag::PktDataStart {
            return TaggedCell::constant(d.value.unwrap_or(0) - s.value.unwrap_or(0));
        }
    }
    TaggedCell::unknown()
}

/// Constant folding; `None` means the destination is left unchanged.
fn const_op(op: AluOp, a: i64, b: i64, wide: bool) -> Option<i64> {
    let v = if wide {
        let (ua, ub) = (a as u64, b as u64);
        match op {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => ua.checked_div(ub).unwrap_or(0) as i64,
            AluOp::Mod => ua.checked_rem(ub)? as i64,
            AluOp::Or => a | b,
            AluOp::And => a & b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => (ua << (ub & 63)) as i64,
            AluOp::Rsh => (ua >> (ub & 63)) as i64,
            AluOp::Arsh => a >> (ub & 63),
            AluOp::Mov => b,
            AluOp::Neg | AluOp::End => return None,
        }
    } else {
        let (ua, ub) = (a as u32, b as u32);
        (match op {
            AluOp::Add => ua.wrapping_add(ub),
            AluOp::Sub => ua.wrapping_sub(ub),
            AluOp::Mul => ua.wrapping_mul(ub),
            AluOp::Div => ua.checked_div(ub).unwrap_or(0),
            AluOp::Mod => match ua.checked_rem(ub) {
                Some(r) => r,
                None => ua,
            },
            AluOp::Or => ua | ub,
            AluOp::And => ua & ub,
            AluOp::Xor => ua ^ ub,
            AluOp::Lsh => ua << (ub & 31),
            AluOp::Rsh => ua >> (ub & 31),
            AluOp::Arsh => ((ua as i32) >> (ub & 31)) as u32,
            AluOp::Mov => ub,
            AluOp::Neg | AluOp::End => return None,
        }) as i64
    };
    Some(v)
}

#[derive(Default)]
struct WalkOut {
    block_ctx: BTreeMap<BlockId, BTreeSet<ContextItem>>,
    path_actions: Vec<PathAction>,
}

impl WalkOut {
    fn add(&mut self, block: BlockId, items: Vec<ContextItem>) {
        if !items.is_empty() {
            self.block_ctx.entry(block).or_default().extend(items);
        }
    }

    #[cfg(feature = "parallel")]
    fn merge(&mut self, other: WalkOut) {
        for (b, s) in other.block_ctx {
            self.block_ctx.entry(b).or_default().extend(s);
        }
        self.path_actions.extend(other.path_actions);
    }
}

struct Frame {
    block: BlockId,
    state: AbstractState,
    incoming: Vec<ContextItem>,
    depth: usize,
}

enum BlockEnd {
    Exit,
    Branch(Vec<(BlockId, AbstractState, Vec<ContextItem>)>),
}

struct Walker<'a> {
    an: &'a Analyzer<'a>,
    cfg: &'a Cfg,
}

impl Walker<'_> {
    /// Runs one block and returns what happens at its end.
    fn run_block(
        &self,
        block: BlockId,
        mut state: AbstractState,
        path: &[BlockId],
        out: &mut WalkOut,
    ) -> Result<BlockEnd, AnalyzeError> {
        let bb = self.cfg.block(block);
        let insns = &self.an.nf.instructions[bb.insns.clone()];
        let mut items = Vec::new();
        for insn in insns {
            let emitted = self
                .an
                .step(&mut state, insn)
                .map_err(|source| AnalyzeError::Step {
                    path: path.to_vec(),
                    block,
                    index: insn.index,
                    source,
                })?;
            items.extend(emitted);
        }
        out.add(block, items);
        let last = insns.last().expect("blocks are non-empty");
        if last.kind == InsnKind::Exit {
            let action = self.an.exit_action(&state);
            out.path_actions.push(PathAction {
                hook: self.an.hook.name.clone(),
                action,
                blocks: path.to_vec(),
                pairs: state.pairs,
            });
            return Ok(BlockEnd::Exit);
        }
        let succ = &bb.successors;
        if last.kind == InsnKind::JumpCond && succ.len() == 2 {
            let mut taken_state = state.clone();
            let taken_items = self.an.edge(&mut taken_state, last, true);
            let fall_items = self.an.edge(&mut state, last, false);
            return Ok(BlockEnd::Branch(vec![
                (succ[0], taken_state, taken_items),
                (succ[1], state, fall_items),
            ]));
        }
        Ok(BlockEnd::Branch(
            succ.iter()
                .map(|s| (*s, state.clone(), Vec::new()))
                .collect(),
        ))
    }

    fn walk_seq(
        &self,
        start: Frame,
        prefix: &[BlockId],
        out: &mut WalkOut,
    ) -> Result<(), AnalyzeError> {
        let mut path: Vec<BlockId> = prefix.to_vec();
        let base = prefix.len();
        let mut stack = vec![start];
        while let Some(fr) = stack.pop() {
            path.truncate(base + fr.depth);
            path.push(fr.block);
            out.add(fr.block, fr.incoming);
            if let BlockEnd::Branch(next) = self.run_block(fr.block, fr.state, &path, out)? {
                for (b, s, inc) in next.into_iter().rev() {
                    stack.push(Frame {
                        block: b,
                        state: s,
                        incoming: inc,
                        depth: fr.depth + 1,
                    });
                }
            }
        }
        Ok(())
    }

    #[cfg(feature = "parallel")]
    fn walk_par(
        &self,
        fr: Frame,
        path: &mut Vec<BlockId>,
        forks: u32,
    ) -> Result<WalkOut, AnalyzeError> {
        const MAX_FORK_DEPTH: u32 = 10;
        let mut out = WalkOut::default();
        if forks >= MAX_FORK_DEPTH {
            self.walk_seq(Frame { depth: 0, ..fr }, path, &mut out)?;
            return Ok(out);
        }
        let prefix_len = path.len();
        let mut fr = fr;
        let result = loop {
            path.push(fr.block);
            out.add(fr.block, fr.incoming);
            let next = match self.run_block(fr.block, fr.state, path, &mut out) {
                Ok(BlockEnd::Exit) => break Ok(()),
                Ok(BlockEnd::Branch(next)) => next,
                Err(e) => break Err(e),
            };
            let mut next = next.into_iter();
            let (b0, s0, i0) = next.next().expect("non-exit blocks have successors");
            let Some((b1, s1, i1)) = next.next() else {
                fr = Frame {
                    block: b0,
                    state: s0,
                    incoming: i0,
                    depth: 0,
                };
                continue;
            };
            let mut p0 = path.clone();
            let mut p1 = path.clone();
            let (left, right) = rayon::join(
                || {
                    self.walk_par(
                        Frame {
                            block: b0,
                            state: s0,
                            incoming: i0,
                            depth: 0,
                        },
                        &mut p0,
                        forks + 1,
                    )
                },
                || {
                    self.walk_par(
                        Frame {
                            block: b1,
                            state: s1,
                            incoming: i1,
                            depth: 0,
                        },
                        &mut p1,
                        forks + 1,
                    )
                },
            );
            break left.and_then(|l| right.map(|r| (l, r))).map(|(l, r)| {
                out.merge(l);
                out.merge(r);
            });
        };
        path.truncate(prefix_len);
        result.map(|()| out)
    }
}

/// Builds the CFG of `nf` and annotates it with network context.
pub fn analyze_nf(nf: &NfObject, spec: &NetSpec) -> Result<CfgNc, AnalyzeError> {
    analyze_nf_with(nf, spec, &AnalyzeOptions::default())
}

pub fn analyze_nf_with(
    nf: &NfObject,
    spec: &NetSpec,
    opts: &AnalyzeOptions,
) -> Result<CfgNc, AnalyzeError> {
    let an = Analyzer::new(nf, spec)?;
    let cfg = build_cfg(&nf.instructions)?;
    cfg.check_path_budget(opts.path_budget)?;
    let walker = Walker { an: &an, cfg: &cfg };
    let start = Frame {
        block: cfg.entry,
        state: an.init_state(),
        incoming: Vec::new(),
        depth: 0,
    };

    #[cfg(feature = "parallel")]
    let out = if opts.parallel {
        walker.walk_par(start, &mut Vec::new(), 0)?
    } else {
        let mut out = WalkOut::default();
        walker.walk_seq(start, &[], &mut out)?;
        out
    };
    #[cfg(not(feature = "parallel"))]
    let out = {
        let mut out = WalkOut::default();
        walker.walk_seq(start, &[], &mut out)?;
        out
    };

    Ok(CfgNc {
        cfg,
        block_ctx: out.block_ctx,
        path_actions: out.path_actions,
    })
}
