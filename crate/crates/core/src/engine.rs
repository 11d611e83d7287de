//! Top-down query evaluation over a [`KnowledgeBase`].
//!
//! Built-in predicates run natively against the fact indexes. User rules
//! registered through [`Engine::register_rule`] are expanded on demand.
//! Negation is negation-as-failure; a negated goal is deferred inside a
//! conjunction until its named variables are bound.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::analyzer::CmpOp;
use crate::facts::{
    Atom, KnowledgeBase, CORRELATED_MAPS, INVOKE_HELPER, NF_EDGE, PROTOCOL_ACCESSED,
    READ_BUFFER_FIELD, READ_FROM_MAP, READ_HEADER_FIELD, RETURN_ACTION, WRITE_BUFFER_FIELD,
    WRITE_HEADER_FIELD, WRITE_INTO_MAP,
};
use crate::querylang::{
    classify, parse_query_with, Expr, Literal, PredicateTable, Query, QueryError, QueryKind, Term,
};

pub type Bindings = BTreeMap<String, Atom>;

pub const DEFAULT_MAX_DEPTH: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("negated goal {0} has unbound variables")]
    UnboundNegation(String),
    #[error("evaluation exceeded depth {0}")]
    DepthExceeded(usize),
    #[error("rule {0} would shadow a built-in predicate")]
    ShadowsBuiltin(String),
    #[error("rule {0} is already defined")]
    DuplicateRule(String),
    #[error("rule head {0} must list distinct variables")]
    BadRuleHead(String),
    #[error("predicate {0} is not defined")]
    UndefinedPredicate(String),
    #[error("{name} takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("rule {0} negates itself")]
    UnstratifiedNegation(String),
    #[error("rule {0} refers to itself")]
    RecursiveRule(String),
}

/// Result of a query: a truth value for assertions, binding rows for
/// retrievals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Answer {
    Truth(bool),
    Rows(Vec<Bindings>),
}

impl Answer {
    pub fn is_true(&self) -> bool {
        match self {
            Answer::Truth(t) => *t,
            Answer::Rows(r) => !r.is_empty(),
        }
    }
}

/// Prints an atom without quotes when it is a plain token.
pub fn display_atom(a: &Atom) -> String {
    match a {
        Atom::Str(s)
            if !s.is_empty()
                && s.chars().all(|c| {
                    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '@' | '-' | ':')
                }) =>
        {
            s.clone()
        }
        other => other.to_string(),
    }
}

pub fn format_row(b: &Bindings) -> String {
    b.iter()
        .map(|(k, v)| format!("{k} = {}", display_atom(v)))
        .collect::<Vec<_>>()
        .join(", ")
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Truth(t) => write!(f, "{t}"),
            Answer::Rows(rows) if rows.is_empty() => f.write_str("false"),
            Answer::Rows(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    if i > 0 {
                        f.write_str("\n")?;
                    }
                    f.write_str(&format_row(r))?;
                }
                Ok(())
            }
        }
    }
}

/// User-defined predicate `name(params...) :- body`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
}

/// Action names each packet-action predicate accepts; `None` accepts any.
pub fn action_set(pred: &str) -> Option<&'static [&'static str]> {
    match pred {
        "passes" => Some(&["XDP_PASS", "TC_ACT_OK"]),
        "drops" => Some(&["XDP_DROP", "TC_ACT_SHOT"]),
        "aborts" => Some(&["XDP_ABORTED"]),
        "redirects" => Some(&["XDP_REDIRECT", "TC_ACT_REDIRECT"]),
        "tx" => Some(&["XDP_TX"]),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    rules: BTreeMap<String, RuleDef>,
    preds: PredicateTable,
    constants: BTreeMap<String, Atom>,
    max_depth: usize,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine {
    pub fn new() -> Self {
        Engine {
            rules: BTreeMap::new(),
            preds: PredicateTable::builtin(),
            constants: BTreeMap::new(),
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }

    pub fn with_max_depth(mut self, depth: usize) -> Self {
        self.max_depth = depth;
        self
    }

    /// Defines a symbolic constant such as `EXTERNAL`. Occurrences of the
    /// name as a variable or negated constant are replaced by `value`.
    pub fn define_constant(&mut self, name: &str, value: Atom) {
        self.constants.insert(name.to_string(), value);
    }

    pub fn predicates(&self) -> &PredicateTable {
        &self.preds
    }

    pub fn parse(&self, text: &str) -> Result<Query, EngineError> {
        Ok(parse_query_with(text, &self.preds)?)
    }

    /// Parses `body` and registers `name(params...)`.
    pub fn define_rule(
        &mut self,
        name: &str,
        params: &[&str],
        body: &str,
    ) -> Result<(), EngineError> {
        let mut table = self.preds.clone();
        if !PredicateTable::is_builtin(name) {
            table.insert(name, params.len());
        }
        let q = parse_query_with(&format!("{}.", body.trim().trim_end_matches('.')), &table)?;
        self.register_rule(RuleDef {
            name: name.to_string(),
            params: params.iter().map(|p| p.to_string()).collect(),
            body: q.body,
        })
    }

    pub fn register_rule(&mut self, rule: RuleDef) -> Result<(), EngineError> {
        if PredicateTable::is_builtin(&rule.name) {
            return Err(EngineError::ShadowsBuiltin(rule.name));
        }
        if self.rules.contains_key(&rule.name) {
            return Err(EngineError::DuplicateRule(rule.name));
        }
        let distinct: BTreeSet<&String> = rule.params.iter().collect();
        let var_like = rule.params.iter().all(|p| {
            p.chars()
                .next()
                .is_some_and(|c| c.is_ascii_uppercase() || c == '_')
                && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        });
        if distinct.len() != rule.params.len() || !var_like {
            return Err(EngineError::BadRuleHead(rule.name));
        }
        check_body(&rule.body, &rule, &self.preds, false)?;
        self.preds.insert(&rule.name, rule.params.len());
        self.rules.insert(rule.name.clone(), rule);
        Ok(())
    }

    pub fn solve(&self, q: &Query, kb: &KnowledgeBase) -> Result<Answer, EngineError> {
        let body = self.subst_constants(&q.body);
        let kind = classify(&Query { body: body.clone() });
        let rows = self.run(&body, kb)?;
        Ok(match kind {
            QueryKind::Assertion => Answer::Truth(!rows.is_empty()),
            QueryKind::Retrieval => Answer::Rows(rows),
        })
    }

    /// All binding sets, deduplicated and sorted.
    pub fn solutions(&self, q: &Query, kb: &KnowledgeBase) -> Result<Vec<Bindings>, EngineError> {
        self.run(&self.subst_constants(&q.body), kb)
    }

    pub fn holds(&self, q: &Query, kb: &KnowledgeBase) -> Result<bool, EngineError> {
        Ok(!self.solutions(q, kb)?.is_empty())
    }

    fn run(&self, body: &Expr, kb: &KnowledgeBase) -> Result<Vec<Bindings>, EngineError> {
        let ctx = Ctx {
            eng: self,
            kb,
            memo: RefCell::new(HashMap::new()),
            closure: RefCell::new(None),
        };
        let sols = ctx.eval(body, &Bindings::new(), 0)?;
        let set: BTreeSet<Bindings> = sols.into_iter().collect();
        Ok(set.into_iter().collect())
    }

    fn subst_constants(&self, e: &Expr) -> Expr {
        if self.constants.is_empty() {
            return e.clone();
        }
        match e {
            Expr::Lit(l) => Expr::Lit(Literal {
                pred: l.pred.clone(),
                args: l.args.iter().map(|t| self.subst_term(t)).collect(),
            }),
            Expr::Not(inner) => Expr::Not(Box::new(self.subst_constants(inner))),
            Expr::And(es) => Expr::And(es.iter().map(|x| self.subst_constants(x)).collect()),
            Expr::Or(es) => Expr::Or(es.iter().map(|x| self.subst_constants(x)).collect()),
        }
    }

    fn subst_term(&self, t: &Term) -> Term {
        let lookup = |a: &Atom| match a {
            Atom::Str(s) => self.constants.get(s).cloned(),
            _ => None,
        };
        match t {
            Term::Var(v) => match self.constants.get(v) {
                Some(a) => Term::Const(a.clone()),
                None => t.clone(),
            },
            Term::NegConst(a) => Term::NegConst(lookup(a).unwrap_or_else(|| a.clone())),
            Term::Compare(op, a) => Term::Compare(*op, lookup(a).unwrap_or_else(|| a.clone())),
            Term::Pairs(alts) => Term::Pairs(
                alts.iter()
                    .map(|alt| {
                        alt.iter()
                            .map(|(a, b)| (self.subst_term(a), self.subst_term(b)))
                            .collect()
                    })
                    .collect(),
            ),
            _ => t.clone(),
        }
    }
}

fn check_body(
    e: &Expr,
    rule: &RuleDef,
    preds: &PredicateTable,
    negated: bool,
) -> Result<(), EngineError> {
    match e {
        Expr::Lit(l) => {
            if l.pred == rule.name {
                return Err(if negated {
                    EngineError::UnstratifiedNegation(rule.name.clone())
                } else {
                    EngineError::RecursiveRule(rule.name.clone())
                });
            }
            let Some(arities) = preds.arities(&l.pred) else {
                return Err(EngineError::UndefinedPredicate(l.pred.clone()));
            };
            if !arities.contains(&l.args.len()) {
                return Err(EngineError::Arity {
                    name: l.pred.clone(),
                    expected: arities[0],
                    found: l.args.len(),
                });
            }
            Ok(())
        }
        Expr::Not(inner) => check_body(inner, rule, preds, true),
        Expr::And(es) | Expr::Or(es) => es
            .iter()
            .try_for_each(|x| check_body(x, rule, preds, negated)),
    }
}

/// Integer set described by a recorded pair value, as inclusive bounds with
/// an optional single excluded point.
fn value_range(a: &Atom) -> Option<(i128, i128, Option<i128>)> {
    const LO: i128 = i128::MIN;
    const HI: i128 = i128::MAX;
    Some(match a {
        Atom::Int(n) => (*n as i128, *n as i128, None),
        Atom::Cmp(CmpOp::Gt, m) => (*m as i128 + 1, HI, None),
        Atom::Cmp(CmpOp::Ge, m) => (*m as i128, HI, None),
        Atom::Cmp(CmpOp::Lt, m) => (LO, *m as i128 - 1, None),
        Atom::Cmp(CmpOp::Le, m) => (LO, *m as i128, None),
        Atom::Cmp(CmpOp::Ne, m) => (LO, HI, Some(*m as i128)),
        _ => return None,
    })
}

/// Whether every value allowed by `recorded` satisfies `op k`.
pub fn satisfies(recorded: &Atom, op: CmpOp, k: i64) -> bool {
    let Some((lo, hi, hole)) = value_range(recorded) else {
        return false;
    };
    let k = k as i128;
    match op {
        CmpOp::Ne => hole == Some(k) || k < lo || k > hi,
        CmpOp::Gt => lo > k,
        CmpOp::Ge => lo >= k,
        CmpOp::Lt => hi < k,
        CmpOp::Le => hi <= k,
    }
}

fn match_const(c: &Atom, a: &Atom) -> bool {
    match (c, a) {
        (Atom::Str(p), Atom::Str(s)) if p.ends_with(".*") => s.starts_with(&p[..p.len() - 1]),
        _ => c == a,
    }
}

/// Matches `t` against a fact argument, extending `b`.
fn unify(t: &Term, a: &Atom, b: &mut Bindings) -> bool {
    match t {
        Term::Const(c) => match_const(c, a),
        Term::Var(v) => match b.get(v) {
            Some(bound) => bound == a,
            None => {
                b.insert(v.clone(), a.clone());
                true
            }
        },
        Term::Anon | Term::Wildcard => true,
        Term::NegConst(c) => !match_const(c, a),
        Term::Compare(op, Atom::Int(k)) => match a {
            Atom::Int(n) => op.holds(*n, *k),
            Atom::Cmp(..) => satisfies(a, *op, *k),
            _ => false,
        },
        Term::Compare(..) | Term::Pairs(_) => false,
    }
}

fn dont_care(t: &Term) -> bool {
    matches!(t, Term::Anon | Term::Wildcard)
}

/// Matches a pair's value term against a recorded value on one path.
fn match_value(v: &Term, pv: &Atom, path: &[(Atom, Atom)], b: &mut Bindings) -> bool {
    match v {
        Term::Compare(op, Atom::Int(k)) => satisfies(pv, *op, *k),
        Term::Compare(op, other @ Atom::Str(_)) => path.iter().any(|(f, val)| match val {
            Atom::Int(m) => f == other && satisfies(pv, *op, *m),
            _ => false,
        }),
        Term::NegConst(Atom::Int(c)) => satisfies(pv, CmpOp::Ne, *c),
        Term::NegConst(_) => false,
        Term::Const(c) => c == pv,
        _ => unify(v, pv, b),
    }
}

fn path_pairs(ctx: &Atom) -> Option<Vec<(Atom, Atom)>> {
    let Atom::List(parts) = ctx else { return None };
    let Some(Atom::List(pairs)) = parts.first() else {
        return None;
    };
    pairs
        .iter()
        .map(|p| match p {
            Atom::Tuple(fv) if fv.len() == 2 => Some((fv[0].clone(), fv[1].clone())),
            _ => None,
        })
        .collect()
}

struct Ctx<'a> {
    eng: &'a Engine,
    kb: &'a KnowledgeBase,
    memo: RefCell<HashMap<String, bool>>,
    closure: RefCell<Option<BTreeMap<Atom, BTreeSet<Atom>>>>,
}

impl Ctx<'_> {
    fn eval(&self, e: &Expr, b: &Bindings, depth: usize) -> Result<Vec<Bindings>, EngineError> {
        if depth > self.eng.max_depth {
            return Err(EngineError::DepthExceeded(self.eng.max_depth));
        }
        match e {
            Expr::Lit(l) => self.eval_lit(l, b, depth),
            Expr::Not(inner) => {
                if !ready(e, b) {
                    return Err(EngineError::UnboundNegation(inner.to_string()));
                }
                let sols = self.eval(inner, b, depth + 1)?;
                Ok(if sols.is_empty() {
                    vec![b.clone()]
                } else {
                    Vec::new()
                })
            }
            Expr::Or(es) => {
                let mut out = Vec::new();
                for x in es {
                    out.extend(self.eval(x, b, depth + 1)?);
                }
                Ok(out)
            }
            Expr::And(es) => {
                let parts: Vec<&Expr> = es.iter().collect();
                self.eval_conj(&parts, b, depth + 1)
            }
        }
    }

    fn eval_conj(
        &self,
        parts: &[&Expr],
        b: &Bindings,
        depth: usize,
    ) -> Result<Vec<Bindings>, EngineError> {
        if parts.is_empty() {
            return Ok(vec![b.clone()]);
        }
        let Some(i) = parts.iter().position(|p| ready(p, b)) else {
            let Expr::Not(inner) = parts[0] else {
                unreachable!("only negations wait")
            };
            return Err(EngineError::UnboundNegation(inner.to_string()));
        };
        let rest: Vec<&Expr> = parts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| *p)
            .collect();
        let mut out = Vec::new();
        for s in self.eval(parts[i], b, depth)? {
            out.extend(self.eval_conj(&rest, &s, depth)?);
        }
        Ok(out)
    }

    fn eval_lit(
        &self,
        l: &Literal,
        b: &Bindings,
        depth: usize,
    ) -> Result<Vec<Bindings>, EngineError> {
        let args: Vec<Term> = l.args.iter().map(|t| resolve(t, b)).collect();
        let ground = args.iter().all(|t| {
            let mut v = Vec::new();
            collect_vars(t, &mut v);
            v.is_empty()
        });
        let key = ground.then(|| {
            Literal {
                pred: l.pred.clone(),
                args: args.clone(),
            }
            .to_string()
        });
        if let Some(k) = &key {
            if let Some(&hit) = self.memo.borrow().get(k) {
                return Ok(if hit { vec![b.clone()] } else { Vec::new() });
            }
        }
        let local = self.call(&l.pred, &args, depth)?;
        if let Some(k) = key {
            self.memo.borrow_mut().insert(k, !local.is_empty());
        }
        Ok(local
            .into_iter()
            .map(|extra| {
                let mut m = b.clone();
                m.extend(extra);
                m
            })
            .collect())
    }

    /// Solutions binding only the variables in `args`.
    fn call(&self, pred: &str, args: &[Term], depth: usize) -> Result<Vec<Bindings>, EngineError> {
        let kb = self.kb;
        let nf = &args[0];
        Ok(match pred {
            "readsField" => {
                let mut v = self.scan(READ_HEADER_FIELD, nf, &[(2, &args[1])]);
                v.extend(self.scan(READ_BUFFER_FIELD, nf, &[(2, &args[1])]));
                v
            }
            "updatesField" => {
                let mut v = self.scan(WRITE_HEADER_FIELD, nf, &[(2, &args[1])]);
                v.extend(self.scan(WRITE_BUFFER_FIELD, nf, &[(2, &args[1])]));
                v
            }
            "mapLookup" => self.scan(READ_FROM_MAP, nf, &[(2, &args[1])]),
            "mapWrite" => self.scan(WRITE_INTO_MAP, nf, &[(2, &args[1]), (3, &args[2])]),
            "accessesProtocol" => self.scan(PROTOCOL_ACCESSED, nf, &[(2, &args[1]), (3, &args[2])]),
            "callsHelper" => self.scan(INVOKE_HELPER, nf, &[(2, &args[1])]),
            "correlatedMaps" if args.len() == 3 => {
                self.scan(CORRELATED_MAPS, nf, &[(2, &args[1]), (3, &args[2])])
            }
            "correlatedMaps" => match &args[1] {
                Term::Pairs(alts) => {
                    let mut out = Vec::new();
                    for alt in alts {
                        let mut sols = vec![Bindings::new()];
                        for (a, m) in alt {
                            let mut next = Vec::new();
                            for s in &sols {
                                let a2 = resolve(a, s);
                                let m2 = resolve(m, s);
                                let n2 = resolve(nf, s);
                                for extra in self.scan(CORRELATED_MAPS, &n2, &[(2, &a2), (3, &m2)])
                                {
                                    let mut t = s.clone();
                                    t.extend(extra);
                                    next.push(t);
                                }
                            }
                            sols = next;
                        }
                        out.extend(sols);
                    }
                    out
                }
                _ => Vec::new(),
            },
            "successorNF" | "predecessorNF" => {
                let closure = self.closure(depth)?;
                let (from, to) = if pred == "successorNF" {
                    (&args[0], &args[1])
                } else {
                    (&args[1], &args[0])
                };
                let mut out = Vec::new();
                for (src, succs) in closure.iter() {
                    let mut b0 = Bindings::new();
                    if !unify(from, src, &mut b0) {
                        continue;
                    }
                    for s in succs {
                        let mut b1 = b0.clone();
                        if unify(to, s, &mut b1) {
                            out.push(b1);
                        }
                    }
                }
                out
            }
            p if crate::querylang::ACTION_PREDS.contains(&p) => {
                let accepted = action_set(p);
                let mut out = Vec::new();
                let facts: Box<dyn Iterator<Item = _>> = match nf {
                    Term::Const(a) => Box::new(kb.by_pred_first(RETURN_ACTION, a)),
                    _ => Box::new(kb.by_pred(RETURN_ACTION)),
                };
                for f in facts {
                    if f.args.len() != 4 {
                        continue;
                    }
                    if let (Some(set), Some(act)) = (accepted, f.args[2].as_str()) {
                        if !set.contains(&act) {
                            continue;
                        }
                    }
                    let mut b0 = Bindings::new();
                    if !unify(nf, &f.args[0], &mut b0) || !unify(&args[1], &f.args[1], &mut b0) {
                        continue;
                    }
                    let Some(path) = path_pairs(&f.args[3]) else {
                        continue;
                    };
                    match &args[2] {
                        Term::Pairs(alts) => out.extend(match_pairs(alts, &path, &b0)),
                        t => {
                            let list = Atom::List(
                                path.iter()
                                    .map(|(a, v)| Atom::Tuple(vec![a.clone(), v.clone()]))
                                    .collect(),
                            );
                            if unify(t, &list, &mut b0) {
                                out.push(b0);
                            }
                        }
                    }
                }
                out
            }
            name => match self.eng.rules.get(name) {
                Some(rule) => self.call_rule(rule, args, depth + 1)?,
                None => return Err(EngineError::UndefinedPredicate(name.to_string())),
            },
        })
    }

    fn call_rule(
        &self,
        rule: &RuleDef,
        args: &[Term],
        depth: usize,
    ) -> Result<Vec<Bindings>, EngineError> {
        if args.len() != rule.params.len() {
            return Err(EngineError::Arity {
                name: rule.name.clone(),
                expected: rule.params.len(),
                found: args.len(),
            });
        }
        let mut local = Bindings::new();
        for (p, a) in rule.params.iter().zip(args) {
            if let Term::Const(c) = a {
                if !c.as_str().is_some_and(|s| s.ends_with(".*")) {
                    local.insert(p.clone(), c.clone());
                }
            }
        }
        let mut out = Vec::new();
        for s in self.eval(&rule.body, &local, depth)? {
            let mut b = Bindings::new();
            let ok = rule.params.iter().zip(args).all(|(p, a)| match s.get(p) {
                Some(v) => unify(a, v, &mut b),
                None => true,
            });
            if ok {
                out.push(b);
            }
        }
        Ok(out)
    }

    /// Facts of `pred` whose NF argument matches `nf` and whose columns match
    /// the given terms.
    fn scan(&self, pred: &str, nf: &Term, cols: &[(usize, &Term)]) -> Vec<Bindings> {
        let facts: Box<dyn Iterator<Item = _>> = match nf {
            Term::Const(a) if !a.as_str().is_some_and(|s| s.ends_with(".*")) => {
                Box::new(self.kb.by_pred_first(pred, a))
            }
            _ => Box::new(self.kb.by_pred(pred)),
        };
        let mut out = Vec::new();
        for f in facts {
            let mut b = Bindings::new();
            if f.args.is_empty() || !unify(nf, &f.args[0], &mut b) {
                continue;
            }
            if cols
                .iter()
                .all(|(i, t)| f.args.get(*i).is_some_and(|a| unify(t, a, &mut b)))
            {
                out.push(b);
            }
        }
        out
    }

    /// Transitive closure of `nf_edge`, computed once per query.
    fn closure(&self, depth: usize) -> Result<BTreeMap<Atom, BTreeSet<Atom>>, EngineError> {
        if let Some(c) = self.closure.borrow().as_ref() {
            return Ok(c.clone());
        }
        let mut direct: BTreeMap<Atom, Vec<Atom>> = BTreeMap::new();
        for f in self.kb.by_pred(NF_EDGE) {
            if f.args.len() == 2 {
                direct
                    .entry(f.args[0].clone())
                    .or_default()
                    .push(f.args[1].clone());
            }
        }
        let mut closure = BTreeMap::new();
        for src in direct.keys() {
            let mut seen = BTreeSet::new();
            self.reach(&direct, src, &mut seen, depth)?;
            closure.insert(src.clone(), seen);
        }
        *self.closure.borrow_mut() = Some(closure.clone());
        Ok(closure)
    }

    fn reach(
        &self,
        direct: &BTreeMap<Atom, Vec<Atom>>,
        n: &Atom,
        seen: &mut BTreeSet<Atom>,
        depth: usize,
    ) -> Result<(), EngineError> {
        if depth > self.eng.max_depth {
            return Err(EngineError::DepthExceeded(self.eng.max_depth));
        }
        for s in direct.get(n).into_iter().flatten() {
            seen.insert(s.clone());
            self.reach(direct, s, seen, depth + 1)?;
        }
        Ok(())
    }
}

fn match_pairs(alts: &[Vec<(Term, Term)>], path: &[(Atom, Atom)], b0: &Bindings) -> Vec<Bindings> {
    let mut out = Vec::new();
    for alt in alts {
        let mut sols = vec![b0.clone()];
        for (f, v) in alt {
            let mut next = Vec::new();
            for s in &sols {
                if dont_care(f) && dont_care(v) {
                    next.push(s.clone());
                    continue;
                }
                for (pf, pv) in path {
                    let mut t = s.clone();
                    let f2 = resolve(f, &t);
                    let v2 = resolve(v, &t);
                    if unify(&f2, pf, &mut t) && match_value(&v2, pv, path, &mut t) {
                        next.push(t);
                    }
                }
            }
            sols = next;
        }
        out.extend(sols);
    }
    out
}

fn collect_vars<'a>(t: &'a Term, out: &mut Vec<&'a str>) {
    match t {
        Term::Var(v) => out.push(v),
        Term::Pairs(alts) => {
            for (a, b) in alts.iter().flatten() {
                collect_vars(a, out);
                collect_vars(b, out);
            }
        }
        _ => {}
    }
}

/// Replaces bound variables by their values.
fn resolve(t: &Term, b: &Bindings) -> Term {
    match t {
        Term::Var(v) => match b.get(v) {
            Some(a) => Term::Const(a.clone()),
            None => t.clone(),
        },
        Term::Pairs(alts) => Term::Pairs(
            alts.iter()
                .map(|alt| {
                    alt.iter()
                        .map(|(x, y)| (resolve(x, b), resolve(y, b)))
                        .collect()
                })
                .collect(),
        ),
        _ => t.clone(),
    }
}

/// A negation can run once all of its named variables are bound.
fn ready(e: &Expr, b: &Bindings) -> bool {
    match e {
        Expr::Not(inner) => inner.vars().iter().all(|v| b.contains_key(v)),
        _ => true,
    }
}
