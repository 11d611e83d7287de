//! Basic blocks, the control-flow graph, and lazy path enumeration.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::isa::{InsnKind, Instruction};

/// Default cap on the number of entry-to-exit paths.
pub const DEFAULT_PATH_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CfgError {
    #[error("empty program")]
    Empty,
    #[error("instruction {index}: control transfer to slot {target} is out of range")]
    JumpOutOfRange { index: usize, target: i64 },
    #[error("cycle: edge {from} -> {to} closes a loop")]
    CycleDetected { from: BlockId, to: BlockId },
    #[error("path count exceeds budget of {budget}")]
    PathBudgetExceeded { budget: u64 },
}

/// Block identifier; blocks are numbered in program order and print as
/// `node_<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node_{}", self.0)
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Slot indices of the first and last instruction.
    pub range: (usize, usize),
    /// Positions in the instruction vector.
    #[serde(skip)]
    pub insns: Range<usize>,
    /// Taken successor first for conditional terminators.
    pub successors: Vec<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub entry: BlockId,
    pub exits: Vec<BlockId>,
}

/// Partitions `insns` into basic blocks and links them.
pub fn build_cfg(insns: &[Instruction]) -> Result<Cfg, CfgError> {
    if insns.is_empty() {
        return Err(CfgError::Empty);
    }
    let last_slot = insns.last().map(|i| i.index + i.slots()).unwrap_or(0);
    let mut pos_of_slot = vec![usize::MAX; last_slot];
    for (pos, insn) in insns.iter().enumerate() {
        pos_of_slot[insn.index] = pos;
    }
    let resolve = |insn: &Instruction, target: i64| -> Result<usize, CfgError> {
        usize::try_from(target)
            .ok()
            .and_then(|t| pos_of_slot.get(t).copied())
            .filter(|&p| p != usize::MAX)
            .ok_or(CfgError::JumpOutOfRange {
                index: insn.index,
                target,
            })
    };

    let mut leaders = BTreeSet::from([0usize]);
    for (pos, insn) in insns.iter().enumerate() {
        match insn.kind {
            InsnKind::JumpCond | InsnKind::JumpUncond => {
                leaders.insert(resolve(insn, insn.jump_target().unwrap_or(-1))?);
                if pos + 1 < insns.len() {
                    leaders.insert(pos + 1);
                }
            }
            InsnKind::Exit if pos + 1 < insns.len() => {
                leaders.insert(pos + 1);
            }
            _ => {}
        }
    }
    let leaders: Vec<usize> = leaders.into_iter().collect();
    let mut block_of_pos = vec![0usize; insns.len()];
    for (b, w) in leaders.iter().enumerate() {
        let end = leaders.get(b + 1).copied().unwrap_or(insns.len());
        block_of_pos[*w..end].fill(b);
    }

    let mut blocks = Vec::with_capacity(leaders.len());
    let mut exits = Vec::new();
    for (b, &start) in leaders.iter().enumerate() {
        let end = leaders.get(b + 1).copied().unwrap_or(insns.len());
        let term = &insns[end - 1];
        let fallthrough = || -> Result<BlockId, CfgError> {
            if end < insns.len() {
                Ok(BlockId(block_of_pos[end]))
            } else {
                Err(CfgError::JumpOutOfRange {
                    index: term.index,
                    target: (term.index + term.slots()) as i64,
                })
            }
        };
        let successors = match term.kind {
            InsnKind::Exit => {
                exits.push(BlockId(b));
                Vec::new()
            }
            InsnKind::JumpUncond => {
                let t = resolve(term, term.jump_target().unwrap_or(-1))?;
                vec![BlockId(block_of_pos[t])]
            }
            InsnKind::JumpCond => {
                let t = BlockId(block_of_pos[resolve(term, term.jump_target().unwrap_or(-1))?]);
                let f = fallthrough()?;
                if t == f {
                    vec![t]
                } else {
                    vec![t, f]
                }
            }
            _ => vec![fallthrough()?],
        };
        blocks.push(BasicBlock {
            id: BlockId(b),
            range: (insns[start].index, term.index),
            insns: start..end,
            successors,
        });
    }
    let cfg = Cfg {
        blocks,
        entry: BlockId(0),
        exits,
    };
    cfg.check_acyclic()?;
    Ok(cfg)
}

impl Cfg {
    pub fn block(&self, id: BlockId) -> &BasicBlock {
        &self.blocks[id.0]
    }

    pub fn edges(&self) -> Vec<(BlockId, BlockId)> {
        self.blocks
            .iter()
            .flat_map(|b| b.successors.iter().map(move |s| (b.id, *s)))
            .collect()
    }

    fn check_acyclic(&self) -> Result<(), CfgError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; self.blocks.len()];
        for root in 0..self.blocks.len() {
            if color[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            color[root] = 1;
            while let Some((b, next)) = stack.last_mut() {
                let b = *b;
                if let Some(&succ) = self.blocks[b].successors.get(*next) {
                    *next += 1;
                    match color[succ.0] {
                        0 => {
                            color[succ.0] = 1;
                            stack.push((succ.0, 0));
                        }
                        1 => {
                            return Err(CfgError::CycleDetected {
                                from: BlockId(b),
                                to: succ,
                            })
                        }
                        _ => {}
                    }
                } else {
                    color[b] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Blocks reachable from the entry, each after all of its successors.
    pub fn post_order(&self) -> Vec<BlockId> {
        let mut seen = vec![false; self.blocks.len()];
        let mut order = Vec::with_capacity(self.blocks.len());
        let mut stack = vec![(self.entry, 0usize)];
        seen[self.entry.0] = true;
        while let Some((b, next)) = stack.last_mut() {
            let b = *b;
            if let Some(&succ) = self.blocks[b.0].successors.get(*next) {
                *next += 1;
                if !seen[succ.0] {
                    seen[succ.0] = true;
                    stack.push((succ, 0));
                }
            } else {
                order.push(b);
                stack.pop();
            }
        }
        order
    }

    /// Number of entry-to-exit paths, saturating at `u64::MAX`.
    pub fn count_paths(&self) -> u64 {
        let mut count = vec![0u64; self.blocks.len()];
        for b in self.post_order() {
            let succs = &self.blocks[b.0].successors;
            count[b.0] = if succs.is_empty() {
                1
            } else {
                succs
                    .iter()
                    .fold(0u64, |acc, s| acc.saturating_add(count[s.0]))
            };
        }
        count[self.entry.0]
    }

    /// Path count, or `PathBudgetExceeded` when it is above `budget`.
    pub fn check_path_budget(&self, budget: u64) -> Result<u64, CfgError> {
        let n = self.count_paths();
        if n > budget {
            Err(CfgError::PathBudgetExceeded { budget })
        } else {
            Ok(n)
        }
    }

    /// Lazily enumerates entry-to-exit paths depth first, taken branch first.
    pub fn paths(&self) -> Paths<'_> {
        Paths {
            cfg: self,
            stack: vec![(self.entry, 0)],
            started: false,
        }
    }

    /// Graphviz rendering, for debugging.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = format!("digraph \"{name}\" {{\n");
        for b in &self.blocks {
            out.push_str(&format!(
                "  {} [label=\"{} [{}..{}]\"];\n",
                b.id, b.id, b.range.0, b.range.1
            ));
        }
        for (from, to) in self.edges() {
            out.push_str(&format!("  {from} -> {to};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Iterator returned by [`Cfg::paths`].
pub struct Paths<'a> {
    cfg: &'a Cfg,
    // (block, index of the next successor to explore)
    stack: Vec<(BlockId, usize)>,
    started: bool,
}

impl Iterator for Paths<'_> {
    type Item = Vec<BlockId>;

    fn next(&mut self) -> Option<Vec<BlockId>> {
        if self.started {
            // backtrack from the last emitted leaf
            self.stack.pop();
        }
        self.started = true;
        loop {
            let &mut (b, ref mut next) = self.stack.last_mut()?;
            let succs = &self.cfg.block(b).successors;
            if succs.is_empty() {
                return Some(self.stack.iter().map(|(b, _)| *b).collect());
            }
            match succs.get(*next) {
                Some(&s) => {
                    *next += 1;
                    self.stack.push((s, 0));
                }
                None => {
                    self.stack.pop();
                }
            }
        }
    }
}
