//! Fact representation, emission from annotated CFGs, and the canonical text
//! form of a knowledge base.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Bound;

use thiserror::Error;

use crate::analyzer::{CfgNc, CmpOp, ContextItem, PairValue};

pub const READ_BUFFER_FIELD: &str = "read_buffer_field";
pub const READ_HEADER_FIELD: &str = "read_header_field";
pub const WRITE_BUFFER_FIELD: &str = "write_buffer_field";
pub const WRITE_HEADER_FIELD: &str = "write_header_field";
pub const READ_FROM_MAP: &str = "read_from_map";
pub const WRITE_INTO_MAP: &str = "write_into_map";
pub const CORRELATED_MAPS: &str = "correlated_maps";
pub const INVOKE_HELPER: &str = "invoke_helper";
pub const PROTOCOL_ACCESSED: &str = "protocol_accessed";
pub const RETURN_ACTION: &str = "return_action";
pub const EDGE: &str = "edge";
pub const NF_EDGE: &str = "nf_edge";

/// Predicates produced by [`emit_facts`] and their arities.
pub const FACT_PREDICATES: &[(&str, usize)] = &[
    (READ_BUFFER_FIELD, 3),
    (READ_HEADER_FIELD, 3),
    (WRITE_BUFFER_FIELD, 3),
    (WRITE_HEADER_FIELD, 3),
    (READ_FROM_MAP, 3),
    (WRITE_INTO_MAP, 4),
    (CORRELATED_MAPS, 4),
    (INVOKE_HELPER, 3),
    (PROTOCOL_ACCESSED, 4),
    (RETURN_ACTION, 4),
    (EDGE, 3),
    (NF_EDGE, 2),
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    Str(String),
    Int(i64),
    List(Vec<Atom>),
    Tuple(Vec<Atom>),
    /// Constraint such as `>=5` or `!=6`.
    Cmp(CmpOp, i64),
}

impl Atom {
    pub fn str(s: impl Into<String>) -> Self {
        Atom::Str(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Atom::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<PairValue> for Atom {
    fn from(v: PairValue) -> Self {
        match v {
            PairValue::Int(k) => Atom::Int(k),
            PairValue::Cmp(op, k) => Atom::Cmp(op, k),
        }
    }
}

fn write_seq(f: &mut fmt::Formatter<'_>, items: &[Atom]) -> fmt::Result {
    for (i, a) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{a}")?;
    }
    Ok(())
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Atom::Int(v) => write!(f, "{v}"),
            Atom::List(items) => {
                f.write_str("[")?;
                write_seq(f, items)?;
                f.write_str("]")
            }
            Atom::Tuple(items) => {
                f.write_str("(")?;
                write_seq(f, items)?;
                f.write_str(")")
            }
            Atom::Cmp(op, v) => write!(f, "{op}{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub pred: String,
    pub args: Vec<Atom>,
}

impl Fact {
    pub fn new(pred: &str, args: Vec<Atom>) -> Self {
        Fact {
            pred: pred.to_string(),
            args,
        }
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.pred)?;
        write_seq(f, &self.args)?;
        f.write_str(").")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactsError {
    #[error("NF id {0} appears more than once in the chain")]
    DuplicateNfId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct KbParseError {
    pub line: usize,
    pub message: String,
}

/// Set of ground facts. Ordering by `(pred, args)` doubles as an index on
/// the predicate and on the predicate plus first argument.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    facts: BTreeSet<Fact>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the fact was already present.
    pub fn insert(&mut self, fact: Fact) -> bool {
        self.facts.insert(fact)
    }

    pub fn extend(&mut self, facts: impl IntoIterator<Item = Fact>) {
        self.facts.extend(facts);
    }

    pub fn contains(&self, fact: &Fact) -> bool {
        self.facts.contains(fact)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter()
    }

    pub fn by_pred<'a>(&'a self, pred: &'a str) -> impl Iterator<Item = &'a Fact> + 'a {
        let lo = Fact::new(pred, Vec::new());
        self.facts
            .range((Bound::Included(lo), Bound::Unbounded))
            .take_while(move |f| f.pred == pred)
    }

    /// Facts of `pred` whose first argument is `first`.
    pub fn by_pred_first<'a>(
        &'a self,
        pred: &'a str,
        first: &'a Atom,
    ) -> impl Iterator<Item = &'a Fact> + 'a {
        let lo = Fact::new(pred, vec![first.clone()]);
        self.facts
            .range((Bound::Included(lo), Bound::Unbounded))
            .take_while(move |f| f.pred == pred && f.args.first() == Some(first))
    }

    /// Distinct NF ids mentioned as first argument of any fact.
    pub fn nf_ids(&self) -> BTreeSet<String> {
        self.facts
            .iter()
            .filter(|f| f.pred != NF_EDGE)
            .filter_map(|f| f.args.first().and_then(Atom::as_str).map(str::to_string))
            .collect()
    }
}

impl FromIterator<Fact> for KnowledgeBase {
    fn from_iter<I: IntoIterator<Item = Fact>>(iter: I) -> Self {
        KnowledgeBase {
            facts: iter.into_iter().collect(),
        }
    }
}

fn item_fact(nf: &Atom, bb: Atom, item: &ContextItem) -> Option<Fact> {
    let s = Atom::str;
    let nf = nf.clone();
    Some(match item {
        ContextItem::ReadBuff { field } => Fact::new(READ_BUFFER_FIELD, vec![nf, bb, s(field)]),
        ContextItem::ReadHdr { field } => Fact::new(READ_HEADER_FIELD, vec![nf, bb, s(field)]),
        ContextItem::WriteBuff { field, .. } => {
            Fact::new(WRITE_BUFFER_FIELD, vec![nf, bb, s(field)])
        }
        ContextItem::WriteHdr { field, .. } => {
            Fact::new(WRITE_HEADER_FIELD, vec![nf, bb, s(field)])
        }
        ContextItem::MapRead { map } => Fact::new(READ_FROM_MAP, vec![nf, bb, s(map)]),
        ContextItem::MapWrite { map, field } => {
            Fact::new(WRITE_INTO_MAP, vec![nf, bb, s(map), s(field)])
        }
        ContextItem::CorrelatedMaps { from, to } => {
            Fact::new(CORRELATED_MAPS, vec![nf, bb, s(from), s(to)])
        }
        ContextItem::Helper { name } => Fact::new(INVOKE_HELPER, vec![nf, bb, s(name)]),
        ContextItem::ProtoAccessed { via, proto } => {
            Fact::new(PROTOCOL_ACCESSED, vec![nf, bb, s(via), s(proto)])
        }
        ContextItem::PktAction { .. } => return None,
    })
}

/// Facts for one analyzed NF.
pub fn emit_facts(nf_id: &str, nc: &CfgNc) -> Vec<Fact> {
    let nf = Atom::str(nf_id);
    let mut out = Vec::new();
    for (bb, item) in nc.all_items() {
        out.extend(item_fact(&nf, Atom::str(bb.to_string()), item));
    }
    for (a, b) in nc.cfg.edges() {
        out.push(Fact::new(
            EDGE,
            vec![
                nf.clone(),
                Atom::str(a.to_string()),
                Atom::str(b.to_string()),
            ],
        ));
    }
    for pa in &nc.path_actions {
        let pairs = pa
            .pairs
            .iter()
            .map(|(f, v)| Atom::Tuple(vec![Atom::str(f), Atom::from(*v)]))
            .collect();
        let blocks = pa.blocks.iter().map(|b| Atom::str(b.to_string())).collect();
        out.push(Fact::new(
            RETURN_ACTION,
            vec![
                nf.clone(),
                Atom::str(&pa.hook),
                Atom::str(&pa.action),
                Atom::List(vec![Atom::List(pairs), Atom::List(blocks)]),
            ],
        ));
    }
    out
}

/// Knowledge base for an ordered chain of NFs, linked by `nf_edge` facts.
pub fn emit_chain_facts<'a>(
    chain: impl IntoIterator<Item = (&'a str, &'a CfgNc)>,
) -> Result<KnowledgeBase, FactsError> {
    let mut kb = KnowledgeBase::new();
    let mut seen: Vec<&str> = Vec::new();
    for (id, nc) in chain {
        if seen.contains(&id) {
            return Err(FactsError::DuplicateNfId(id.to_string()));
        }
        if let Some(prev) = seen.last() {
            kb.insert(Fact::new(NF_EDGE, vec![Atom::str(*prev), Atom::str(id)]));
        }
        seen.push(id);
        kb.extend(emit_facts(id, nc));
    }
    Ok(kb)
}

/// One line of a chain manifest: an NF object path, optionally followed by
/// the program section to load from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub line: usize,
    pub path: String,
    pub section: Option<String>,
}

/// Parses a chain manifest, first NF first. Blank lines and `#` comments
/// are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, KbParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let t = raw.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let mut words = t.split_whitespace();
        let path = words.next().unwrap_or_default().to_string();
        let section = words.next().map(String::from);
        if let Some(extra) = words.next() {
            return Err(KbParseError {
                line: i + 1,
                message: format!("unexpected {extra:?} after section"),
            });
        }
        out.push(ManifestEntry {
            line: i + 1,
            path,
            section,
        });
    }
    if out.is_empty() {
        return Err(KbParseError {
            line: 0,
            message: "manifest lists no NFs".into(),
        });
    }
    Ok(out)
}

/// Canonical text: one fact per line, sorted.
pub fn serialize_kb(kb: &KnowledgeBase) -> String {
    let mut out = String::new();
    for f in kb.iter() {
        out.push_str(&f.to_string());
        out.push('\n');
    }
    out
}

/// Parses the text form. Blank lines and `%` comments are skipped.
pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KbParseError> {
    let mut kb = KnowledgeBase::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fact = parse_fact(t).map_err(|message| KbParseError {
            line: i + 1,
            message,
        })?;
        kb.insert(fact);
    }
    Ok(kb)
}

pub fn parse_fact(text: &str) -> Result<Fact, String> {
    let mut p = AtomParser {
        s: text.as_bytes(),
        pos: 0,
    };
    p.ws();
    let start = p.pos;
    while p.pos < p.s.len() && (p.s[p.pos].is_ascii_alphanumeric() || p.s[p.pos] == b'_') {
        p.pos += 1;
    }
    if p.pos == start {
        return Err("expected predicate name".into());
    }
    let pred = text[start..p.pos].to_string();
    p.expect(b'(')?;
    let args = p.seq(b')')?;
    p.expect(b'.')?;
    p.ws();
    if p.pos != p.s.len() {
        return Err(format!("trailing input at column {}", p.pos + 1));
    }
    Ok(Fact { pred, args })
}

struct AtomParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl AtomParser<'_> {
    fn ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), String> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(format!(
                "expected '{}' at column {}",
                c as char,
                self.pos + 1
            ))
        }
    }

    fn seq(&mut self, close: u8) -> Result<Vec<Atom>, String> {
        let mut out = Vec::new();
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(self.atom()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(c) if c == close => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => {
                    return Err(format!(
                        "expected ',' or '{}' at column {}",
                        close as char,
                        self.pos + 1
                    ))
                }
            }
        }
    }

    fn int(&mut self) -> Result<i64, String> {
        self.ws();
        let start = self.pos;
        if self.s.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("expected integer at column {}", start + 1))
    }

    fn atom(&mut self) -> Result<Atom, String> {
        match self.peek() {
            Some(b'"') => {
                self.pos += 1;
                let mut buf = Vec::new();
                loop {
                    match self.s.get(self.pos) {
                        None => return Err("unterminated string".into()),
                        Some(b'"') => {
                            self.pos += 1;
                            break;
                        }
                        Some(b'\\') => {
                            let c = self.s.get(self.pos + 1).ok_or("unterminated escape")?;
                            buf.push(match c {
                                b'n' => b'\n',
                                b't' => b'\t',
                                other => *other,
                            });
                            self.pos += 2;
                        }
                        Some(c) => {
                            buf.push(*c);
                            self.pos += 1;
                        }
                    }
                }
                String::from_utf8(buf)
                    .map(Atom::Str)
                    .map_err(|e| e.to_string())
            }
            Some(b'[') => {
                self.pos += 1;
                Ok(Atom::List(self.seq(b']')?))
            }
            Some(b'(') => {
                self.pos += 1;
                Ok(Atom::Tuple(self.seq(b')')?))
            }
            Some(b'!' | b'<' | b'>') => {
                let rest = &self.s[self.pos..];
                let (op, len) = if rest.starts_with(b"!=") {
                    (CmpOp::Ne, 2)
                } else if rest.starts_with(b">=") {
                    (CmpOp::Ge, 2)
                } else if rest.starts_with(b"<=") {
                    (CmpOp::Le, 2)
                } else if rest.starts_with(b">") {
                    (CmpOp::Gt, 1)
                } else if rest.starts_with(b"<") {
                    (CmpOp::Lt, 1)
                } else {
                    return Err(format!("bad comparison at column {}", self.pos + 1));
                };
                self.pos += len;
                Ok(Atom::Cmp(op, self.int()?))
            }
            Some(b'-' | b'0'..=b'9') => Ok(Atom::Int(self.int()?)),
            _ => Err(format!("expected atom at column {}", self.pos + 1)),
        }
    }
}
