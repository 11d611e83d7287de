//! Registry of protocol header layouts, kernel buffer layouts, helper IDs and
//! hook return codes, loaded from a small line-oriented config file.
//!
//! ```text
//! [protocol eth len=14]
//! field 12 2 type
//! tail type 0x0800=ipv4
//!
//! [buffer xdp_md]
//! field 0 data
//! field 4 data_end
//! role data=data data_end=data_end
//!
//! [hook xdp buffer=xdp_md entry=eth]
//!
//! [helpers]
//! 1 bpf_map_lookup_elem
//! 51 bpf_redirect_map ret=4
//!
//! [actions xdp]
//! 2 XDP_PASS
//! ```
//!
//! `ret=` pins a helper's return value when it is a fixed action code, and the
//! `hook` section names the context buffer and first protocol of a hook.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// The shipped default configuration.
pub const DEFAULT_NETSPEC: &str = include_str!("default.netspec");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetSpecError {
    #[error("netspec line {line}: {message}")]
    SpecParseError { line: usize, message: String },
    #[error("protocol {proto}: field {second} overlaps field {first}")]
    OverlappingFields {
        proto: String,
        first: String,
        second: String,
    },
    #[error("buffer {0} does not declare both data and data_end roles")]
    MissingDataRole(String),
    #[error("unknown protocol {0}")]
    UnknownProtocol(String),
    #[error("unknown hook {0}")]
    UnknownHook(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

type Result<T> = std::result::Result<T, NetSpecError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub offset: u32,
    pub width: u32,
    /// Short name, without the protocol prefix.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailEntry {
    pub field: String,
    pub value: u64,
    pub next: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub name: String,
    pub header_len: u32,
    pub fields: Vec<FieldSpec>,
    pub tails: Vec<TailEntry>,
}

impl ProtocolSpec {
    /// Field covering `rel_off`, if any.
    pub fn field_at(&self, rel_off: i64) -> Option<&FieldSpec> {
        self.fields
            .iter()
            .find(|f| rel_off >= i64::from(f.offset) && rel_off < i64::from(f.offset + f.width))
    }

    pub fn field(&self, short: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == short)
    }

    pub fn is_tail_field(&self, short: &str) -> bool {
        self.tails.iter().any(|t| t.field == short)
    }

    /// The only protocol that can follow this one, with its dispatch field.
    pub fn sole_successor(&self) -> Option<(&str, &str)> {
        let first = self.tails.first()?;
        self.tails
            .iter()
            .all(|t| t.next == first.next && t.field == first.field)
            .then_some((first.field.as_str(), first.next.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuffRole {
    Data,
    DataEnd,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferSpec {
    pub name: String,
    pub fields: Vec<(u32, String)>,
    pub data_field: String,
    pub data_end_field: String,
}

impl BufferSpec {
    fn short_name(&self, off: i64) -> Option<&str> {
        self.fields
            .iter()
            .find(|(o, _)| i64::from(*o) == off)
            .map(|(_, n)| n.as_str())
    }

    /// `buf.field` for the field at `off`, or `buf.unknown@off`.
    pub fn field_name(&self, off: i64) -> String {
        match self.short_name(off) {
            Some(n) => format!("{}.{}", self.name, n),
            None => format!("{}.unknown@{}", self.name, off),
        }
    }

    pub fn role(&self, off: i64) -> BuffRole {
        match self.short_name(off) {
            Some(n) if n == self.data_field => BuffRole::Data,
            Some(n) if n == self.data_end_field => BuffRole::DataEnd,
            _ => BuffRole::Other,
        }
    }

    pub fn data_field_name(&self) -> String {
        format!("{}.{}", self.name, self.data_field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookSpec {
    pub name: String,
    pub buffer: String,
    pub entry: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelperSpec {
    pub id: i64,
    pub name: String,
    /// Fixed return value, when the helper always returns one action code.
    pub ret: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTable {
    pub hook: String,
    pub codes: Vec<(i64, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub protocols: Vec<ProtocolSpec>,
    pub buffers: Vec<BufferSpec>,
    pub hooks: Vec<HookSpec>,
    pub helpers: Vec<HelperSpec>,
    pub actions: Vec<ActionTable>,
    proto_index: HashMap<String, usize>,
    helper_index: HashMap<i64, usize>,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec::parse(DEFAULT_NETSPEC).expect("shipped netspec is valid")
    }
}

/// Loads and validates a netspec file.
pub fn load_netspec(path: &Path) -> Result<NetSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| NetSpecError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    NetSpec::parse(&text)
}

enum Section {
    None,
    Protocol(usize),
    Buffer(usize, Option<(String, String)>),
    Hook,
    Helpers,
    Actions(usize),
}

fn parse_u64(tok: &str) -> Option<u64> {
    match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => tok.parse().ok(),
    }
}

fn key_value<'a>(tok: &'a str, key: &str) -> Option<&'a str> {
    tok.strip_prefix(key)?.strip_prefix('=')
}

impl NetSpec {
    pub fn parse(text: &str) -> Result<NetSpec> {
        let mut spec = NetSpec {
            protocols: Vec::new(),
            buffers: Vec::new(),
            hooks: Vec::new(),
            helpers: Vec::new(),
            actions: Vec::new(),
            proto_index: HashMap::new(),
            helper_index: HashMap::new(),
        };
        let mut section = Section::None;
        let mut tail_lines: Vec<(usize, usize)> = Vec::new();
        let mut saw_anything = false;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| NetSpecError::SpecParseError { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            saw_anything = true;
            if let Some(header) = content.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                finish_buffer(&mut spec, &mut section, line)?;
                let toks: Vec<&str> = header.split_whitespace().collect();
                section = match toks.as_slice() {
                    ["protocol", name, len] => {
                        let len = key_value(len, "len")
                            .and_then(|v| v.parse::<u32>().ok())
                            .ok_or_else(|| err(format!("bad header length '{len}'")))?;
                        if spec.proto_index.contains_key(*name) {
                            return Err(err(format!("protocol {name} declared twice")));
                        }
                        spec.proto_index
                            .insert(name.to_string(), spec.protocols.len());
                        spec.protocols.push(ProtocolSpec {
                            name: name.to_string(),
                            header_len: len,
                            fields: Vec::new(),
                            tails: Vec::new(),
                        });
                        Section::Protocol(spec.protocols.len() - 1)
                    }
                    ["buffer", name] => {
                        if spec.buffers.iter().any(|b| b.name == *name) {
                            return Err(err(format!("buffer {name} declared twice")));
                        }
                        spec.buffers.push(BufferSpec {
                            name: name.to_string(),
                            fields: Vec::new(),
                            data_field: String::new(),
                            data_end_field: String::new(),
                        });
                        Section::Buffer(spec.buffers.len() - 1, None)
                    }
                    ["hook", name, buffer, entry] => {
                        let buffer = key_value(buffer, "buffer")
                            .ok_or_else(|| err("expected buffer=<name>".into()))?;
                        let entry = key_value(entry, "entry")
                            .ok_or_else(|| err("expected entry=<protocol>".into()))?;
                        spec.hooks.push(HookSpec {
                            name: name.to_string(),
                            buffer: buffer.to_string(),
                            entry: entry.to_string(),
                        });
                        Section::Hook
                    }
                    ["helpers"] => Section::Helpers,
                    ["actions", hook] => {
                        spec.actions.push(ActionTable {
                            hook: hook.to_string(),
                            codes: Vec::new(),
                        });
                        Section::Actions(spec.actions.len() - 1)
                    }
                    _ => return Err(err(format!("unknown section [{header}]"))),
                };
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            match &mut section {
                Section::None | Section::Hook => {
                    return Err(err(format!("'{content}' outside of a section")))
                }
                Section::Protocol(p) => {
                    let proto = &mut spec.protocols[*p];
                    match toks.as_slice() {
                        ["field", off, width, name] => {
                            let offset = off
                                .parse()
                                .map_err(|_| err(format!("bad offset '{off}'")))?;
                            let width: u32 = width
                                .parse()
                                .map_err(|_| err(format!("bad width '{width}'")))?;
                            if width == 0 || offset + width > proto.header_len {
                                return Err(err(format!(
                                    "field {name} does not fit in {} bytes",
                                    proto.header_len
                                )));
                            }
                            let new = FieldSpec {
                                offset,
                                width,
                                name: name.to_string(),
                            };
                            if let Some(old) = proto.fields.iter().find(|f| {
                                f.offset < new.offset + new.width && new.offset < f.offset + f.width
                            }) {
                                return Err(NetSpecError::OverlappingFields {
                                    proto: proto.name.clone(),
                                    first: old.name.clone(),
                                    second: new.name,
                                });
                            }
                            proto.fields.push(new);
                        }
                        ["tail", field, mapping] => {
                            let (value, next) = mapping
                                .split_once('=')
                                .ok_or_else(|| err("expected <value>=<protocol>".into()))?;
                            let value = parse_u64(value)
                                .ok_or_else(|| err(format!("bad tail value '{value}'")))?;
                            if proto.field(field).is_none() {
                                return Err(err(format!(
                                    "tail field {field} is not a field of {}",
                                    proto.name
                                )));
                            }
                            proto.tails.push(TailEntry {
                                field: field.to_string(),
                                value,
                                next: next.to_string(),
                            });
                            tail_lines.push((*p, line));
                        }
                        _ => return Err(err(format!("unrecognized protocol line '{content}'"))),
                    }
                }
                Section::Buffer(b, role) => {
                    let buf = &mut spec.buffers[*b];
                    match toks.as_slice() {
                        ["field", off, name] => {
                            let off: u32 = off
                                .parse()
                                .map_err(|_| err(format!("bad offset '{off}'")))?;
                            if let Some((_, old)) = buf.fields.iter().find(|(o, _)| *o == off) {
                                return Err(NetSpecError::OverlappingFields {
                                    proto: buf.name.clone(),
                                    first: old.clone(),
                                    second: name.to_string(),
                                });
                            }
                            buf.fields.push((off, name.to_string()));
                        }
                        ["role", data, data_end] => {
                            let data = key_value(data, "data")
                                .ok_or_else(|| err("expected data=<field>".into()))?;
                            let end = key_value(data_end, "data_end")
                                .ok_or_else(|| err("expected data_end=<field>".into()))?;
                            *role = Some((data.to_string(), end.to_string()));
                        }
                        _ => return Err(err(format!("unrecognized buffer line '{content}'"))),
                    }
                }
                Section::Helpers => {
                    let (id, name, ret) = match toks.as_slice() {
                        [id, name] => (id, name, None),
                        [id, name, ret] => {
                            let ret = key_value(ret, "ret")
                                .and_then(|v| v.parse::<i64>().ok())
                                .ok_or_else(|| err(format!("bad return spec '{ret}'")))?;
                            (id, name, Some(ret))
                        }
                        _ => return Err(err(format!("unrecognized helper line '{content}'"))),
                    };
                    let id: i64 = id
                        .parse()
                        .map_err(|_| err(format!("bad helper id '{id}'")))?;
                    if spec.helper_index.contains_key(&id) {
                        return Err(err(format!("helper id {id} declared twice")));
                    }
                    spec.helper_index.insert(id, spec.helpers.len());
                    spec.helpers.push(HelperSpec {
                        id,
                        name: name.to_string(),
                        ret,
                    });
                }
                Section::Actions(a) => {
                    let table = &mut spec.actions[*a];
                    let [code, name] = toks.as_slice() else {
                        return Err(err(format!("unrecognized action line '{content}'")));
                    };
                    let code: i64 = code
                        .parse()
                        .map_err(|_| err(format!("bad action code '{code}'")))?;
                    if table.codes.iter().any(|(c, _)| *c == code) {
                        return Err(err(format!("action code {code} declared twice")));
                    }
                    table.codes.push((code, name.to_string()));
                }
            }
        }
        finish_buffer(&mut spec, &mut section, text.lines().count())?;
        if !saw_anything {
            return Err(NetSpecError::SpecParseError {
                line: 0,
                message: "empty netspec".into(),
            });
        }
        for (p, line) in tail_lines {
            for t in &spec.protocols[p].tails {
                if !spec.proto_index.contains_key(&t.next) {
                    return Err(NetSpecError::SpecParseError {
                        line,
                        message: format!("tail target {} is not a declared protocol", t.next),
                    });
                }
            }
        }
        for h in &spec.hooks {
            if !spec.buffers.iter().any(|b| b.name == h.buffer) {
                return Err(NetSpecError::SpecParseError {
                    line: 0,
                    message: format!("hook {} names unknown buffer {}", h.name, h.buffer),
                });
            }
            if !spec.proto_index.contains_key(&h.entry) {
                return Err(NetSpecError::UnknownProtocol(h.entry.clone()));
            }
        }
        Ok(spec)
    }

    /// Canonical text form; the shipped default round-trips byte for byte.
    pub fn to_text(&self) -> String {
        let mut sections = Vec::new();
        for p in &self.protocols {
            let mut s = format!("[protocol {} len={}]", p.name, p.header_len);
            for f in &p.fields {
                let _ = write!(s, "\nfield {} {} {}", f.offset, f.width, f.name);
            }
            for t in &p.tails {
                let width = p.field(&t.field).map_or(1, |f| f.width as usize);
                let _ = write!(
                    s,
                    "\ntail {} 0x{:0w$x}={}",
                    t.field,
                    t.value,
                    t.next,
                    w = width * 2
                );
            }
            sections.push(s);
        }
        for b in &self.buffers {
            let mut s = format!("[buffer {}]", b.name);
            for (off, name) in &b.fields {
                let _ = write!(s, "\nfield {off} {name}");
            }
            let _ = write!(
                s,
                "\nrole data={} data_end={}",
                b.data_field, b.data_end_field
            );
            sections.push(s);
        }
        for h in &self.hooks {
            sections.push(format!(
                "[hook {} buffer={} entry={}]",
                h.name, h.buffer, h.entry
            ));
        }
        if !self.helpers.is_empty() {
            let mut s = String::from("[helpers]");
            for h in &self.helpers {
                let _ = write!(s, "\n{} {}", h.id, h.name);
                if let Some(r) = h.ret {
                    let _ = write!(s, " ret={r}");
                }
            }
            sections.push(s);
        }
        for a in &self.actions {
            let mut s = format!("[actions {}]", a.hook);
            for (code, name) in &a.codes {
                let _ = write!(s, "\n{code} {name}");
            }
            sections.push(s);
        }
        let mut out = sections.join("\n\n");
        out.push('\n');
        out
    }

    pub fn protocol(&self, name: &str) -> Result<&ProtocolSpec> {
        self.proto_index
            .get(name)
            .map(|&i| &self.protocols[i])
            .ok_or_else(|| NetSpecError::UnknownProtocol(name.to_string()))
    }

    /// `proto.field` covering `rel_off`, or `proto.unknown@<off>`.
    pub fn hdr_field_name(&self, proto: &str, rel_off: i64) -> Result<String> {
        let p = self.protocol(proto)?;
        Ok(match p.field_at(rel_off) {
            Some(f) => format!("{}.{}", p.name, f.name),
            None => format!("{}.unknown@{}", p.name, rel_off),
        })
    }

    /// Next protocol selected by `field` (full `proto.field` or short name)
    /// holding `value`.
    ///
    /// Values are matched in network byte order first and then byte-swapped
    /// to the field width, since bytecode compares against host-order loads.
    pub fn next_proto(&self, proto: &str, field: &str, value: u64) -> Result<Option<&str>> {
        Ok(self.tail_match(proto, field, value)?.map(|(_, next)| next))
    }

    /// Like [`NetSpec::next_proto`], also returning the matched value in the
    /// byte order of the dispatch table.
    pub fn tail_match(&self, proto: &str, field: &str, value: u64) -> Result<Option<(u64, &str)>> {
        let p = self.protocol(proto)?;
        let short = field
            .strip_prefix(p.name.as_str())
            .and_then(|s| s.strip_prefix('.'))
            .unwrap_or(field);
        let Some(f) = p.field(short) else {
            return Ok(None);
        };
        let bits = f.width.min(8) * 8;
        let masked = if bits == 64 {
            value
        } else {
            value & ((1u64 << bits) - 1)
        };
        let swapped = masked.swap_bytes() >> (64 - bits);
        for v in [masked, swapped] {
            if let Some(t) = p.tails.iter().find(|t| t.field == short && t.value == v) {
                return Ok(Some((v, t.next.as_str())));
            }
        }
        Ok(None)
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferSpec> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn hook(&self, name: &str) -> Result<&HookSpec> {
        self.hooks
            .iter()
            .find(|h| h.name == name)
            .ok_or_else(|| NetSpecError::UnknownHook(name.to_string()))
    }

    pub fn helper(&self, id: i64) -> Option<&HelperSpec> {
        self.helper_index.get(&id).map(|&i| &self.helpers[i])
    }

    /// Helper name, or `unknown@<id>` for unlisted IDs.
    pub fn helper_name(&self, id: i64) -> String {
        match self.helper(id) {
            Some(h) => h.name.clone(),
            None => format!("unknown@{id}"),
        }
    }

    pub fn action_name(&self, hook: &str, code: i64) -> Result<String> {
        let table = self
            .actions
            .iter()
            .find(|a| a.hook == hook)
            .ok_or_else(|| NetSpecError::UnknownHook(hook.to_string()))?;
        Ok(match table.codes.iter().find(|(c, _)| *c == code) {
            Some((_, name)) => name.clone(),
            None => unknown_action(code),
        })
    }
}

/// Marker used for return codes with no entry in the action table.
pub fn unknown_action(code: i64) -> String {
    format!("UNKNOWN_ACTION({code})")
}

/// Marker used when the return value is not a tracked constant.
pub const UNKNOWN_ACTION: &str = "UNKNOWN_ACTION";

fn finish_buffer(spec: &mut NetSpec, section: &mut Section, line: usize) -> Result<()> {
    if let Section::Buffer(b, role) = section {
        let buf = &mut spec.buffers[*b];
        let Some((data, end)) = role.take() else {
            return Err(NetSpecError::MissingDataRole(buf.name.clone()));
        };
        let known = |n: &str| buf.fields.iter().any(|(_, f)| f == n);
        if !known(&data) || !known(&end) || data == end {
            return Err(NetSpecError::SpecParseError {
                line,
                message: format!("roles of buffer {} must name two declared fields", buf.name),
            });
        }
        buf.data_field = data;
        buf.data_end_field = end;
    }
    *section = Section::None;
    Ok(())
}

/// Tail-dispatch adjacency: each protocol mapped to the distinct protocols
/// it can hand off to.
pub fn dispatch_graph(spec: &NetSpec) -> BTreeMap<String, Vec<String>> {
    let mut g = BTreeMap::new();
    for p in &spec.protocols {
        let mut next: Vec<String> = p.tails.iter().map(|t| t.next.clone()).collect();
        next.sort();
        next.dedup();
        g.insert(p.name.clone(), next);
    }
    g
}
