//! Query language: lexer, parser, printer and classification.
//!
//! A query is a list of predicate applications joined by `,` (and) and `;`
//! (or), terminated by `.`. `,` binds tighter than `;`, parentheses group,
//! and `!` negates the following predicate or parenthesized group.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::analyzer::CmpOp;
use crate::facts::Atom;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// String or integer constant. A string ending in `.*` matches any
    /// field with that prefix.
    Const(Atom),
    /// Named variable; reported in results.
    Var(String),
    /// `_`, or the lowercase placeholders `var`/`val`. Never reported.
    Anon,
    /// `*`
    Wildcard,
    /// `!const`
    NegConst(Atom),
    /// `>= 5`, `<= "ipv4.totlen"`, ...
    Compare(CmpOp, Atom),
    /// `[(a, b), (c, d); (e, f)]`: alternatives separated by `;`, each a
    /// conjunction of pairs.
    Pairs(Vec<Vec<(Term, Term)>>),
}

impl Term {
    pub fn str(s: impl Into<String>) -> Self {
        Term::Const(Atom::Str(s.into()))
    }

    fn visit_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Term::Var(v) => out.push(v),
            Term::Pairs(alts) => {
                for (a, b) in alts.iter().flatten() {
                    a.visit_vars(out);
                    b.visit_vars(out);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    pub pred: String,
    pub args: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expr {
    Lit(Literal),
    Not(Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    /// Named variables in order of first occurrence.
    pub fn vars(&self) -> Vec<String> {
        let mut all = Vec::new();
        self.visit_vars(&mut all);
        let mut out: Vec<String> = Vec::new();
        for v in all {
            if !out.iter().any(|o| o == v) {
                out.push(v.to_string());
            }
        }
        out
    }

    fn visit_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Lit(l) => l.args.iter().for_each(|t| t.visit_vars(out)),
            Expr::Not(e) => e.visit_vars(out),
            Expr::And(es) | Expr::Or(es) => es.iter().for_each(|e| e.visit_vars(out)),
        }
    }

    pub fn literals(&self) -> Vec<&Literal> {
        let mut out = Vec::new();
        self.visit_lits(&mut out);
        out
    }

    fn visit_lits<'a>(&'a self, out: &mut Vec<&'a Literal>) {
        match self {
            Expr::Lit(l) => out.push(l),
            Expr::Not(e) => e.visit_lits(out),
            Expr::And(es) | Expr::Or(es) => es.iter().for_each(|e| e.visit_lits(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    pub body: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Assertion,
    Retrieval,
}

/// Retrieval iff any named variable occurs; wildcards and anonymous
/// variables keep a query an assertion.
pub fn classify(q: &Query) -> QueryKind {
    if q.body.vars().is_empty() {
        QueryKind::Assertion
    } else {
        QueryKind::Retrieval
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("syntax error at offset {position}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        position: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unknown predicate {name} at offset {position}")]
    UnknownPredicate { name: String, position: usize },
    #[error(
        "{name} takes {} argument(s), got {found} at offset {position}",
        fmt_arities(expected)
    )]
    Arity {
        name: String,
        expected: Vec<usize>,
        found: usize,
        position: usize,
    },
}

fn fmt_arities(a: &[usize]) -> String {
    a.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(" or ")
}

pub const FIELD_PREDS: &[&str] = &["readsField", "updatesField"];
pub const ACTION_PREDS: &[&str] = &["passes", "drops", "aborts", "redirects", "tx", "all"];
pub const ORDER_PREDS: &[&str] = &["successorNF", "predecessorNF"];

/// Predicate names and accepted arities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateTable {
    arities: BTreeMap<String, Vec<usize>>,
}

impl PredicateTable {
    pub fn builtin() -> Self {
        let mut arities = BTreeMap::new();
        for p in FIELD_PREDS {
            arities.insert(p.to_string(), vec![2]);
        }
        for p in ACTION_PREDS {
            arities.insert(p.to_string(), vec![3]);
        }
        for p in ORDER_PREDS {
            arities.insert(p.to_string(), vec![2]);
        }
        arities.insert("mapLookup".into(), vec![2]);
        arities.insert("mapWrite".into(), vec![3]);
        arities.insert("correlatedMaps".into(), vec![2, 3]);
        arities.insert("accessesProtocol".into(), vec![3]);
        arities.insert("callsHelper".into(), vec![2]);
        PredicateTable { arities }
    }

    pub fn is_builtin(name: &str) -> bool {
        Self::builtin().arities.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, arity: usize) {
        self.arities.insert(name.to_string(), vec![arity]);
    }

    pub fn arities(&self, name: &str) -> Option<&[usize]> {
        self.arities.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arities.contains_key(name)
    }
}

impl Default for PredicateTable {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn parse_query(text: &str) -> Result<Query, QueryError> {
    parse_query_with(text, &PredicateTable::builtin())
}

pub fn parse_query_with(text: &str, preds: &PredicateTable) -> Result<Query, QueryError> {
    let mut p = Parser::new(text, preds);
    let q = p.query()?;
    p.skip_trivia();
    if p.pos < p.src.len() {
        return Err(p.syntax(&["end of input"]));
    }
    Ok(q)
}

/// Parses every `.`-terminated query in `text`; `#` starts a comment.
pub fn parse_queries(text: &str, preds: &PredicateTable) -> Result<Vec<Query>, QueryError> {
    let mut p = Parser::new(text, preds);
    let mut out = Vec::new();
    loop {
        p.skip_trivia();
        if p.pos >= p.src.len() {
            return Ok(out);
        }
        out.push(p.query()?);
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    preds: &'a PredicateTable,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, preds: &'a PredicateTable) -> Self {
        Parser { src, pos: 0, preds }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_trivia(&mut self) {
        loop {
            let r = self.rest();
            let trimmed = r.trim_start();
            self.pos += r.len() - trimmed.len();
            if trimmed.starts_with('#') || trimmed.starts_with('%') {
                let end = trimmed.find('\n').unwrap_or(trimmed.len());
                self.pos += end;
            } else {
                return;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_trivia();
        self.rest().chars().next()
    }

    fn found(&self) -> String {
        match self.rest().chars().next() {
            None => "end of input".into(),
            Some(c) => format!("'{c}'"),
        }
    }

    fn syntax(&self, expected: &[&str]) -> QueryError {
        QueryError::Syntax {
            position: self.pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.found(),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), QueryError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.syntax(&[&format!("'{c}'")]))
        }
    }

    fn query(&mut self) -> Result<Query, QueryError> {
        let body = self.or()?;
        if !self.eat('.') {
            return Err(self.syntax(&["','", "';'", "'.'"]));
        }
        Ok(Query { body })
    }

    fn or(&mut self) -> Result<Expr, QueryError> {
        let mut parts = vec![self.and()?];
        while self.eat(';') {
            parts.push(self.and()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Expr::Or(parts)
        })
    }

    fn and(&mut self) -> Result<Expr, QueryError> {
        let mut parts = vec![self.unary()?];
        while self.eat(',') {
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Expr::And(parts)
        })
    }

    fn unary(&mut self) -> Result<Expr, QueryError> {
        if self.eat('!') {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if self.eat('(') {
            let e = self.or()?;
            self.expect(')')?;
            return Ok(e);
        }
        self.literal().map(Expr::Lit)
    }

    fn ident(&mut self) -> Option<&'a str> {
        self.skip_trivia();
        let r = self.rest();
        let mut chars = r.char_indices();
        match chars.next() {
            Some((_, c)) if is_ident_start(c) => {}
            _ => return None,
        }
        let end = chars
            .find(|(_, c)| !is_ident_char(*c))
            .map(|(i, _)| i)
            .unwrap_or(r.len());
        self.pos += end;
        Some(&r[..end])
    }

    fn literal(&mut self) -> Result<Literal, QueryError> {
        let start = {
            self.skip_trivia();
            self.pos
        };
        let Some(name) = self.ident() else {
            return Err(self.syntax(&["predicate", "'!'", "'('"]));
        };
        let Some(arities) = self.preds.arities(name) else {
            return Err(QueryError::UnknownPredicate {
                name: name.to_string(),
                position: start,
            });
        };
        let arities = arities.to_vec();
        self.expect('(')?;
        let mut args = vec![self.term()?];
        while self.eat(',') {
            args.push(self.term()?);
        }
        self.expect(')')?;
        if !arities.contains(&args.len()) {
            return Err(QueryError::Arity {
                name: name.to_string(),
                expected: arities,
                found: args.len(),
                position: start,
            });
        }
        Ok(Literal {
            pred: name.to_string(),
            args,
        })
    }

    fn string(&mut self) -> Result<Option<String>, QueryError> {
        self.skip_trivia();
        let r = self.rest();
        let (close, open_len) = match r.chars().next() {
            Some('"') => ('"', 1),
            Some('\'') => ('\'', 1),
            Some('\u{201c}') => ('\u{201d}', '\u{201c}'.len_utf8()),
            _ => return Ok(None),
        };
        let mut out = String::new();
        let mut it = r[open_len..].char_indices();
        while let Some((i, c)) = it.next() {
            if c == close {
                self.pos += open_len + i + c.len_utf8();
                return Ok(Some(out));
            }
            if c == '\\' {
                match it.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, e)) => out.push(e),
                    None => break,
                }
            } else {
                out.push(c);
            }
        }
        self.pos = self.src.len();
        Err(self.syntax(&["closing quote"]))
    }

    /// Integer, IPv4 address, or dotted/bare atom.
    fn bare(&mut self) -> Option<Atom> {
        self.skip_trivia();
        let r = self.rest();
        let bytes = r.as_bytes();
        let first = *bytes.first()?;
        if first.is_ascii_digit() || (first == b'-' && bytes.get(1).is_some_and(u8::is_ascii_digit))
        {
            if let Some(hex) = r.strip_prefix("0x").or_else(|| r.strip_prefix("0X")) {
                let end = hex
                    .find(|c: char| !c.is_ascii_hexdigit())
                    .unwrap_or(hex.len());
                if end > 0 {
                    if let Ok(v) = i64::from_str_radix(&hex[..end], 16) {
                        self.pos += 2 + end;
                        return Some(Atom::Int(v));
                    }
                }
            }
            let mut end = 1;
            while end < bytes.len()
                && (bytes[end].is_ascii_digit()
                    || (bytes[end] == b'.' && bytes.get(end + 1).is_some_and(u8::is_ascii_digit)))
            {
                end += 1;
            }
            let tok = &r[..end];
            self.pos += end;
            return Some(match tok.parse::<i64>() {
                Ok(v) => Atom::Int(v),
                Err(_) => Atom::Str(tok.to_string()),
            });
        }
        if !is_ident_start(first as char) {
            return None;
        }
        let mut end = 0;
        while end < bytes.len() {
            let c = bytes[end] as char;
            let dotted = c == '.'
                && bytes.get(end + 1).is_some_and(|n| {
                    (*n as char).is_ascii_alphanumeric() || *n == b'_' || *n == b'*'
                });
            let star = c == '*' && end > 0 && bytes[end - 1] == b'.';
            if !(is_ident_char(c) || dotted || star) {
                break;
            }
            end += 1;
        }
        self.pos += end;
        Some(Atom::Str(r[..end].to_string()))
    }

    fn constant(&mut self) -> Result<Atom, QueryError> {
        if let Some(s) = self.string()? {
            return Ok(Atom::Str(s));
        }
        match self.bare() {
            Some(a) => Ok(a),
            None => Err(self.syntax(&["constant"])),
        }
    }

    fn term(&mut self) -> Result<Term, QueryError> {
        match self.peek() {
            Some('*') => {
                self.pos += 1;
                return Ok(Term::Wildcard);
            }
            Some('[') => {
                self.pos += 1;
                return self.pair_list();
            }
            Some('!') => {
                self.pos += 1;
                if self.peek() == Some('=') {
                    self.pos += 1;
                    return Ok(Term::Compare(CmpOp::Ne, self.constant()?));
                }
                return Ok(Term::NegConst(self.constant()?));
            }
            Some('<' | '>') => {
                let r = self.rest();
                let (op, len) = if r.starts_with(">=") {
                    (CmpOp::Ge, 2)
                } else if r.starts_with("<=") {
                    (CmpOp::Le, 2)
                } else if r.starts_with('>') {
                    (CmpOp::Gt, 1)
                } else {
                    (CmpOp::Lt, 1)
                };
                self.pos += len;
                return Ok(Term::Compare(op, self.constant()?));
            }
            _ => {}
        }
        if let Some(s) = self.string()? {
            return Ok(Term::Const(Atom::Str(s)));
        }
        let save = self.pos;
        match self.bare() {
            Some(Atom::Str(s)) if !s.contains('.') => Ok(classify_ident(s)),
            Some(a) => Ok(Term::Const(a)),
            None => {
                self.pos = save;
                Err(self.syntax(&["term"]))
            }
        }
    }

    fn pair(&mut self) -> Result<(Term, Term), QueryError> {
        self.expect('(')?;
        let a = self.term()?;
        self.expect(',')?;
        let b = self.term()?;
        self.expect(')')?;
        Ok((a, b))
    }

    fn pair_list(&mut self) -> Result<Term, QueryError> {
        if self.peek() != Some('(') {
            // `[A, B]` is read as the single pair `(A, B)`.
            let a = self.term()?;
            self.expect(',')?;
            let b = self.term()?;
            self.expect(']')?;
            return Ok(Term::Pairs(vec![vec![(a, b)]]));
        }
        let mut alts = vec![vec![self.pair()?]];
        loop {
            if self.eat(',') {
                alts.last_mut().unwrap().push(self.pair()?);
            } else if self.eat(';') {
                alts.push(vec![self.pair()?]);
            } else {
                self.expect(']')?;
                return Ok(Term::Pairs(alts));
            }
        }
    }
}

fn classify_ident(s: String) -> Term {
    if s == "_" || s == "var" || s == "val" {
        return Term::Anon;
    }
    let first = s.chars().next().unwrap_or('a');
    if first.is_ascii_uppercase() || first == '_' {
        Term::Var(s)
    } else {
        Term::Const(Atom::Str(s))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Const(a) => write!(f, "{a}"),
            Term::Var(v) => f.write_str(v),
            Term::Anon => f.write_str("_"),
            Term::Wildcard => f.write_str("*"),
            Term::NegConst(a) => write!(f, "!{a}"),
            Term::Compare(op, a) => write!(f, "{op}{a}"),
            Term::Pairs(alts) => {
                f.write_str("[")?;
                for (i, alt) in alts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    for (j, (a, b)) in alt.iter().enumerate() {
                        if j > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "({a}, {b})")?;
                    }
                }
                f.write_str("]")
            }
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.pred)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(l) => write!(f, "{l}"),
            Expr::Not(e) => match **e {
                Expr::Lit(_) | Expr::Not(_) => write!(f, "!{e}"),
                _ => write!(f, "!({e})"),
            },
            Expr::And(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match e {
                        Expr::Or(_) | Expr::And(_) => write!(f, "({e})")?,
                        _ => write!(f, "{e}")?,
                    }
                }
                Ok(())
            }
            Expr::Or(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    match e {
                        Expr::Or(_) => write!(f, "({e})")?,
                        _ => write!(f, "{e}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.", self.body)
    }
}
