//! Exhaustive-grounding oracle for the query engine.
//!
//! Queries are generated as a small AST of their own, printed to text for
//! the engine, and evaluated here by trying every assignment of their
//! variables over the knowledge base's active domain. Each predicate is
//! checked straight from its definition over the fact tables.

use std::collections::{BTreeMap, BTreeSet};

use prashna::analyzer::CmpOp;
use prashna::facts::{Atom, Fact, KnowledgeBase};
use rand::prelude::*;
use rand::rngs::StdRng;

pub const NFS: &[&str] = &["a", "b", "c", "d"];
pub const FIELDS: &[&str] = &[
    "eth.src",
    "ipv4.ttl",
    "ipv4.dst",
    "tcp.sport",
    "sk_buff.mark",
    "xdp_md.ingress_ifindex",
];
pub const MAPS: &[&str] = &["m1", "m2", "m3"];
pub const HELPERS: &[&str] = &["bpf_map_lookup_elem", "bpf_ktime_get_ns"];
pub const PROTOS: &[&str] = &["eth", "ipv4", "tcp"];
pub const VIAS: &[&str] = &["xdp_md.data", "eth.type", "ipv4.proto"];
pub const ACTIONS: &[&str] = &[
    "XDP_PASS",
    "XDP_DROP",
    "XDP_REDIRECT",
    "XDP_TX",
    "XDP_ABORTED",
    "TC_ACT_OK",
    "TC_ACT_SHOT",
];
pub const OPS: &[CmpOp] = &[CmpOp::Ne, CmpOp::Gt, CmpOp::Ge, CmpOp::Lt, CmpOp::Le];

fn s(x: &str) -> Atom {
    Atom::str(x)
}

fn pick<'a>(rng: &mut StdRng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn pair_value(rng: &mut StdRng) -> Atom {
    let k = rng.random_range(0..6);
    if rng.random_bool(0.6) {
        Atom::Int(k)
    } else {
        Atom::Cmp(*OPS.choose(rng).unwrap(), k)
    }
}

/// A random knowledge base of at most `max_facts` facts. nf_edge facts
/// only point forward in [`NFS`] order, so the chain is acyclic.
pub fn random_kb(rng: &mut StdRng, max_facts: usize) -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    let target = rng.random_range(1..=max_facts);
    let mut tries = 0;
    while kb.len() < target && tries < 4 * max_facts {
        tries += 1;
        let nf = s(pick(rng, NFS));
        let bb = s(&format!("node_{}", rng.random_range(0..4)));
        let fact = match rng.random_range(0..11) {
            0 => Fact::new("read_header_field", vec![nf, bb, s(pick(rng, FIELDS))]),
            1 => Fact::new("read_buffer_field", vec![nf, bb, s(pick(rng, FIELDS))]),
            2 => Fact::new("write_header_field", vec![nf, bb, s(pick(rng, FIELDS))]),
            3 => Fact::new("write_buffer_field", vec![nf, bb, s(pick(rng, FIELDS))]),
            4 => Fact::new("read_from_map", vec![nf, bb, s(pick(rng, MAPS))]),
            5 => Fact::new(
                "write_into_map",
                vec![nf, bb, s(pick(rng, MAPS)), s(pick(rng, FIELDS))],
            ),
            6 => Fact::new(
                "correlated_maps",
                vec![nf, bb, s(pick(rng, MAPS)), s(pick(rng, MAPS))],
            ),
            7 => Fact::new("invoke_helper", vec![nf, bb, s(pick(rng, HELPERS))]),
            8 => Fact::new(
                "protocol_accessed",
                vec![nf, bb, s(pick(rng, VIAS)), s(pick(rng, PROTOS))],
            ),
            9 => {
                let n = rng.random_range(0..3);
                let pairs = (0..n)
                    .map(|_| Atom::Tuple(vec![s(pick(rng, FIELDS)), pair_value(rng)]))
                    .collect();
                let hook = if rng.random_bool(0.8) { "xdp" } else { "tc" };
                Fact::new(
                    "return_action",
                    vec![
                        nf,
                        s(hook),
                        s(pick(rng, ACTIONS)),
                        Atom::List(vec![Atom::List(pairs), Atom::List(vec![bb])]),
                    ],
                )
            }
            _ => {
                let i = rng.random_range(0..NFS.len() - 1);
                let j = rng.random_range(i + 1..NFS.len());
                Fact::new("nf_edge", vec![s(NFS[i]), s(NFS[j])])
            }
        };
        kb.insert(fact);
    }
    kb
}

#[derive(Debug, Clone)]
pub enum T {
    C(String),
    /// `"ipv4.*"`
    Prefix(String),
    V(String),
    Any,
    Not(String),
}

#[derive(Debug, Clone)]
pub enum PV {
    Any,
    Int(i64),
    V(String),
    NotInt(i64),
    Cmp(CmpOp, i64),
}

#[derive(Debug, Clone)]
pub enum Arg {
    T(T),
    Pairs(Vec<(T, PV)>),
}

#[derive(Debug, Clone)]
pub struct Lit {
    pub pred: &'static str,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone)]
pub enum Q {
    Lit(Lit),
    Not(Lit),
    Or(Lit, Lit),
}

fn show_t(t: &T) -> String {
    match t {
        T::C(c) | T::Prefix(c) => format!("\"{c}\""),
        T::V(v) => v.clone(),
        T::Any => "_".into(),
        T::Not(c) => format!("!\"{c}\""),
    }
}

fn show_pv(v: &PV) -> String {
    match v {
        PV::Any => "*".into(),
        PV::Int(k) => k.to_string(),
        PV::V(x) => x.clone(),
        PV::NotInt(k) => format!("!{k}"),
        PV::Cmp(op, k) => format!("{op}{k}"),
    }
}

pub fn show_lit(l: &Lit) -> String {
    let args: Vec<String> = l
        .args
        .iter()
        .map(|a| match a {
            Arg::T(t) => show_t(t),
            Arg::Pairs(ps) => {
                let inner: Vec<String> = ps
                    .iter()
                    .map(|(f, v)| format!("({}, {})", show_t(f), show_pv(v)))
                    .collect();
                format!("[{}]", inner.join(", "))
            }
        })
        .collect();
    format!("{}({})", l.pred, args.join(", "))
}

pub fn show(q: &[Q]) -> String {
    let parts: Vec<String> = q
        .iter()
        .map(|x| match x {
            Q::Lit(l) => show_lit(l),
            Q::Not(l) => format!("!{}", show_lit(l)),
            Q::Or(a, b) => format!("({}; {})", show_lit(a), show_lit(b)),
        })
        .collect();
    format!("{}.", parts.join(", "))
}

fn lit_vars(l: &Lit, out: &mut BTreeSet<String>) {
    for a in &l.args {
        match a {
            Arg::T(T::V(v)) => {
                out.insert(v.clone());
            }
            Arg::Pairs(ps) => {
                for (f, v) in ps {
                    if let T::V(x) = f {
                        out.insert(x.clone());
                    }
                    if let PV::V(x) = v {
                        out.insert(x.clone());
                    }
                }
            }
            _ => {}
        }
    }
}

pub fn query_vars(q: &[Q]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for x in q {
        match x {
            Q::Lit(l) | Q::Not(l) => lit_vars(l, &mut out),
            Q::Or(a, b) => {
                lit_vars(a, &mut out);
                lit_vars(b, &mut out);
            }
        }
    }
    out
}

const VARS: &[&str] = &["X", "Y", "Z"];

fn gen_t(rng: &mut StdRng, pool: &[&str], allow_var: bool) -> T {
    match rng.random_range(0..10) {
        0..=3 => T::C(pick(rng, pool).to_string()),
        4..=6 if allow_var => T::V(pick(rng, VARS).to_string()),
        7 => T::Any,
        8 if pool == FIELDS => T::Prefix(format!(
            "{}.*",
            pick(rng, &["ipv4", "eth", "tcp", "sk_buff"])
        )),
        8 | 9 => T::Not(pick(rng, pool).to_string()),
        _ => T::Any,
    }
}

fn gen_pairs(rng: &mut StdRng, allow_var: bool) -> Vec<(T, PV)> {
    let n = rng.random_range(1..=2);
    (0..n)
        .map(|_| {
            let f = match rng.random_range(0..6) {
                0 => T::Any,
                1 if allow_var => T::V(pick(rng, VARS).to_string()),
                _ => T::C(pick(rng, FIELDS).to_string()),
            };
            let k = rng.random_range(0..6);
            let v = match rng.random_range(0..7) {
                0 => PV::Any,
                1 | 2 => PV::Int(k),
                3 if allow_var => PV::V(pick(rng, VARS).to_string()),
                4 => PV::NotInt(k),
                _ => PV::Cmp(*OPS.choose(rng).unwrap(), k),
            };
            (f, v)
        })
        .collect()
}

pub const ALL_PREDS: &[&str] = &[
    "readsField",
    "updatesField",
    "mapLookup",
    "mapWrite",
    "correlatedMaps",
    "accessesProtocol",
    "callsHelper",
    "successorNF",
    "predecessorNF",
    "passes",
    "drops",
    "aborts",
    "redirects",
    "tx",
    "all",
];

pub fn gen_lit(rng: &mut StdRng, pred: &'static str, allow_var: bool) -> Lit {
    let nf = |rng: &mut StdRng| Arg::T(gen_t(rng, NFS, allow_var));
    let args = match pred {
        "readsField" | "updatesField" => vec![nf(rng), Arg::T(gen_t(rng, FIELDS, allow_var))],
        "mapLookup" => vec![nf(rng), Arg::T(gen_t(rng, MAPS, allow_var))],
        "mapWrite" => vec![
            nf(rng),
            Arg::T(gen_t(rng, MAPS, allow_var)),
            Arg::T(gen_t(rng, FIELDS, allow_var)),
        ],
        "correlatedMaps" => vec![
            nf(rng),
            Arg::T(gen_t(rng, MAPS, allow_var)),
            Arg::T(gen_t(rng, MAPS, allow_var)),
        ],
        "accessesProtocol" => vec![
            nf(rng),
            Arg::T(gen_t(rng, VIAS, allow_var)),
            Arg::T(gen_t(rng, PROTOS, allow_var)),
        ],
        "callsHelper" => vec![nf(rng), Arg::T(gen_t(rng, HELPERS, allow_var))],
        "successorNF" | "predecessorNF" => vec![nf(rng), nf(rng)],
        _ => {
            let hook = match rng.random_range(0..4) {
                0 => T::Any,
                1 => T::C("tc".into()),
                _ => T::C("xdp".into()),
            };
            vec![nf(rng), Arg::T(hook), Arg::Pairs(gen_pairs(rng, allow_var))]
        }
    };
    Lit { pred, args }
}

/// A random conjunctive query whose negated literals only use variables
/// that some positive literal also uses.
pub fn random_query(rng: &mut StdRng) -> Vec<Q> {
    loop {
        let n = rng.random_range(1..=3);
        let mut q = Vec::new();
        for _ in 0..n {
            let pred = *ALL_PREDS.choose(rng).unwrap();
            match rng.random_range(0..10) {
                0..=5 => q.push(Q::Lit(gen_lit(rng, pred, true))),
                6..=8 => q.push(Q::Not(gen_lit(rng, pred, true))),
                _ => {
                    let other = *ALL_PREDS.choose(rng).unwrap();
                    q.push(Q::Or(gen_lit(rng, pred, false), gen_lit(rng, other, false)));
                }
            }
        }
        let mut positive = BTreeSet::new();
        for x in &q {
            if let Q::Lit(l) = x {
                lit_vars(l, &mut positive);
            }
        }
        if query_vars(&q).is_subset(&positive) {
            return q;
        }
    }
}

// ---- evaluation ----

fn member(op: CmpOp, k: i64, x: i64) -> bool {
    match op {
        CmpOp::Ne => x != k,
        CmpOp::Gt => x > k,
        CmpOp::Ge => x >= k,
        CmpOp::Lt => x < k,
        CmpOp::Le => x <= k,
    }
}

/// Integers a recorded pair value allows, tested over a window wide
/// enough for the small constants used here.
fn allowed(v: &Atom) -> Vec<i64> {
    (-64..=64)
        .filter(|x| match v {
            Atom::Int(n) => x == n,
            Atom::Cmp(op, m) => member(*op, *m, *x),
            _ => false,
        })
        .collect()
}

fn implies(v: &Atom, op: CmpOp, k: i64) -> bool {
    let xs = allowed(v);
    !xs.is_empty() && xs.iter().all(|x| member(op, k, *x))
}

type Env = BTreeMap<String, Atom>;

fn t_ok(t: &T, a: &Atom, env: &Env) -> bool {
    match t {
        T::C(c) => a.as_str() == Some(c.as_str()),
        T::Prefix(p) => a.as_str().is_some_and(|s| s.starts_with(&p[..p.len() - 1])),
        T::V(v) => env.get(v) == Some(a),
        T::Any => true,
        T::Not(c) => a.as_str() != Some(c.as_str()),
    }
}

fn pv_ok(p: &PV, a: &Atom, env: &Env) -> bool {
    match p {
        PV::Any => true,
        PV::Int(k) => *a == Atom::Int(*k),
        PV::V(x) => env.get(x) == Some(a),
        PV::NotInt(k) => implies(a, CmpOp::Ne, *k),
        PV::Cmp(op, k) => implies(a, *op, *k),
    }
}

fn pairs_ok(pattern: &[(T, PV)], path: &[(Atom, Atom)], env: &Env) -> bool {
    pattern.iter().all(|(f, v)| {
        matches!((f, v), (T::Any, PV::Any))
            || path
                .iter()
                .any(|(pf, pv)| t_ok(f, pf, env) && pv_ok(v, pv, env))
    })
}

fn reach(kb: &KnowledgeBase) -> BTreeSet<(Atom, Atom)> {
    let mut r: BTreeSet<(Atom, Atom)> = kb
        .iter()
        .filter(|f| f.pred == "nf_edge")
        .map(|f| (f.args[0].clone(), f.args[1].clone()))
        .collect();
    loop {
        let mut grew = false;
        let snapshot: Vec<_> = r.iter().cloned().collect();
        for (a, b) in &snapshot {
            for (c, d) in &snapshot {
                if b == c && r.insert((a.clone(), d.clone())) {
                    grew = true;
                }
            }
        }
        if !grew {
            return r;
        }
    }
}

fn accepts(pred: &str, action: &str) -> bool {
    match pred {
        "passes" => action == "XDP_PASS" || action == "TC_ACT_OK",
        "drops" => action == "XDP_DROP" || action == "TC_ACT_SHOT",
        "aborts" => action == "XDP_ABORTED",
        "redirects" => action == "XDP_REDIRECT" || action == "TC_ACT_REDIRECT",
        "tx" => action == "XDP_TX",
        _ => true,
    }
}

pub struct Oracle<'a> {
    kb: &'a KnowledgeBase,
    reach: BTreeSet<(Atom, Atom)>,
}

impl<'a> Oracle<'a> {
    pub fn new(kb: &'a KnowledgeBase) -> Self {
        Oracle {
            kb,
            reach: reach(kb),
        }
    }

    fn any_fact(&self, preds: &[&str], cols: &[&Arg], env: &Env) -> bool {
        self.kb.iter().any(|f| {
            preds.contains(&f.pred.as_str())
                && cols.iter().enumerate().all(|(i, a)| {
                    let col = if i == 0 { 0 } else { i + 1 };
                    match a {
                        Arg::T(t) => f.args.get(col).is_some_and(|x| t_ok(t, x, env)),
                        Arg::Pairs(_) => false,
                    }
                })
        })
    }

    pub fn holds(&self, l: &Lit, env: &Env) -> bool {
        let a: Vec<&Arg> = l.args.iter().collect();
        match l.pred {
            "readsField" => self.any_fact(&["read_header_field", "read_buffer_field"], &a, env),
            "updatesField" => self.any_fact(&["write_header_field", "write_buffer_field"], &a, env),
            "mapLookup" => self.any_fact(&["read_from_map"], &a, env),
            "mapWrite" => self.any_fact(&["write_into_map"], &a, env),
            "correlatedMaps" => self.any_fact(&["correlated_maps"], &a, env),
            "accessesProtocol" => self.any_fact(&["protocol_accessed"], &a, env),
            "callsHelper" => self.any_fact(&["invoke_helper"], &a, env),
            "successorNF" | "predecessorNF" => {
                let (Arg::T(x), Arg::T(y)) = (a[0], a[1]) else {
                    return false;
                };
                let (from, to) = if l.pred == "successorNF" {
                    (x, y)
                } else {
                    (y, x)
                };
                self.reach
                    .iter()
                    .any(|(p, q)| t_ok(from, p, env) && t_ok(to, q, env))
            }
            pred => {
                let (Arg::T(nf), Arg::T(hook), Arg::Pairs(pattern)) = (a[0], a[1], a[2]) else {
                    return false;
                };
                self.kb
                    .iter()
                    .filter(|f| f.pred == "return_action")
                    .any(|f| {
                        let Atom::List(parts) = &f.args[3] else {
                            return false;
                        };
                        let Atom::List(ps) = &parts[0] else {
                            return false;
                        };
                        let path: Vec<(Atom, Atom)> = ps
                            .iter()
                            .filter_map(|p| match p {
                                Atom::Tuple(t) => Some((t[0].clone(), t[1].clone())),
                                _ => None,
                            })
                            .collect();
                        t_ok(nf, &f.args[0], env)
                            && t_ok(hook, &f.args[1], env)
                            && accepts(pred, f.args[2].as_str().unwrap_or(""))
                            && pairs_ok(pattern, &path, env)
                    })
            }
        }
    }

    /// Every atom a variable could be bound to.
    pub fn domain(&self) -> Vec<Atom> {
        let mut d = BTreeSet::new();
        for f in self.kb.iter() {
            for a in &f.args {
                match a {
                    Atom::List(parts) => {
                        if let Some(Atom::List(ps)) = parts.first() {
                            for p in ps {
                                if let Atom::Tuple(t) = p {
                                    d.extend(t.iter().cloned());
                                }
                            }
                        }
                    }
                    other => {
                        d.insert(other.clone());
                    }
                }
            }
        }
        d.into_iter().collect()
    }

    /// All satisfying assignments of the query's variables.
    pub fn solve(&self, q: &[Q]) -> BTreeSet<Env> {
        let vars: Vec<String> = query_vars(q).into_iter().collect();
        let dom = self.domain();
        let mut out = BTreeSet::new();
        let mut idx = vec![0usize; vars.len()];
        if !vars.is_empty() && dom.is_empty() {
            return out;
        }
        loop {
            let env: Env = vars
                .iter()
                .cloned()
                .zip(idx.iter().map(|&i| dom[i].clone()))
                .collect();
            let ok = q.iter().all(|x| match x {
                Q::Lit(l) => self.holds(l, &env),
                Q::Not(l) => !self.holds(l, &env),
                Q::Or(a, b) => self.holds(a, &env) || self.holds(b, &env),
            });
            if ok {
                out.insert(env);
            }
            // odometer
            let mut i = 0;
            loop {
                if i == idx.len() {
                    return out;
                }
                idx[i] += 1;
                if idx[i] < dom.len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }
}
