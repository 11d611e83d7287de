//! Query files, REPL input and assertion suites.

use anyhow::{bail, Context, Result};

/// One statement from a query file or the REPL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    /// A query, with the `Name:` label it was given, if any.
    Query { label: Option<String>, text: String },
    /// `name(A, B) :- body.`
    Rule {
        name: String,
        params: Vec<String>,
        body: String,
    },
}

/// Splits text into `.`-terminated statements. A dot ends a statement only
/// when followed by whitespace or end of input, so dotted field names such
/// as `ipv4.src` survive unquoted. Lines starting with `#` or `%` are
/// comments. Returns the statements and any unterminated remainder.
pub fn split(text: &str) -> (Vec<(usize, String)>, String) {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start_line = 1;
    let mut quote: Option<char> = None;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim_start();
        if quote.is_none() && (trimmed.starts_with('#') || trimmed.starts_with('%')) {
            continue;
        }
        if cur.trim().is_empty() {
            start_line = n + 1;
        }
        let chars: Vec<char> = line.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            cur.push(c);
            match (quote, c) {
                (None, '"') => quote = Some('"'),
                (None, '\u{201c}') => quote = Some('\u{201d}'),
                (Some(q), c) if c == q => quote = None,
                (None, '.') if chars.get(i + 1).is_none_or(|n| n.is_whitespace()) => {
                    out.push((start_line, std::mem::take(&mut cur).trim().to_string()));
                    start_line = n + 1;
                }
                _ => {}
            }
        }
    }
    (out, cur.trim().to_string())
}

fn is_label(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Classifies one statement as a rule or a (possibly labelled) query.
pub fn statement(text: &str) -> Result<Statement> {
    if let Some((head, body)) = text.split_once(":-") {
        let head = head.trim();
        let Some((name, rest)) = head.split_once('(') else {
            bail!("rule head {head:?} has no parameter list");
        };
        let Some(params) = rest.strip_suffix(')') else {
            bail!("rule head {head:?} is missing ')'");
        };
        let params = params.split(',').map(|p| p.trim().to_string()).collect();
        let body = body.trim().trim_end_matches('.').trim().to_string();
        return Ok(Statement::Rule {
            name: name.trim().to_string(),
            params,
            body,
        });
    }
    if let Some((label, rest)) = text.split_once(": ") {
        if is_label(label.trim()) {
            return Ok(Statement::Query {
                label: Some(label.trim().to_string()),
                text: rest.trim().to_string(),
            });
        }
    }
    Ok(Statement::Query {
        label: None,
        text: text.to_string(),
    })
}

/// Reads a whole query file.
pub fn statements(text: &str) -> Result<Vec<(usize, Statement)>> {
    let (parts, rest) = split(text);
    if !rest.is_empty() {
        bail!("unterminated statement at end of file: {rest:?}");
    }
    parts
        .into_iter()
        .map(|(line, s)| {
            statement(&s)
                .map(|st| (line, st))
                .with_context(|| format!("line {line}"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteEntry {
    pub line: usize,
    pub name: String,
    pub expect: Expect,
    pub query: String,
}

/// Parses `expect pass|fail <name>: <query>` lines. Names must be unique.
pub fn parse_suite(text: &str) -> Result<Vec<SuiteEntry>> {
    let mut out: Vec<SuiteEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('%') {
            continue;
        }
        let rest = t
            .strip_prefix("expect ")
            .with_context(|| format!("line {line}: expected `expect pass|fail <name>: <query>`"))?;
        let (expect, rest) = if let Some(r) = rest.strip_prefix("pass ") {
            (Expect::Pass, r)
        } else if let Some(r) = rest.strip_prefix("fail ") {
            (Expect::Fail, r)
        } else {
            bail!("line {line}: expectation must be pass or fail");
        };
        let Some((name, query)) = rest.split_once(':') else {
            bail!("line {line}: missing `<name>:`");
        };
        let name = name.trim().to_string();
        if !is_label(&name) {
            bail!("line {line}: bad entry name {name:?}");
        }
        if out.iter().any(|e| e.name == name) {
            bail!("line {line}: entry {name} is defined twice");
        }
        out.push(SuiteEntry {
            line,
            name,
            expect,
            query: query.trim().to_string(),
        });
    }
    Ok(out)
}
