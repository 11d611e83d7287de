//! Loading network functions from relocatable BPF ELF objects or from text
//! bundles (assembly file plus optional map sidecar).
//!
//! In both cases wide map loads end up with `imm64` holding the map's ordinal
//! in [`NfObject::maps`], which is the order of first reference unless a
//! sidecar fixes it.

use std::collections::BTreeMap;
use std::path::Path;

use object::{Object, ObjectSection, ObjectSymbol, RelocationTarget, SectionKind};
use thiserror::Error;

use crate::isa::{self, InsnKind, Instruction, IsaError, PSEUDO_MAP_FD};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("{path}: not a little-endian BPF ELF object ({message})")]
    NotElf { path: String, message: String },
    #[error("{0}: no program section")]
    NoProgramSection(String),
    #[error("{path}: several program sections ({candidates}); select one")]
    AmbiguousSection { path: String, candidates: String },
    #[error("{path}: no program section named {section}")]
    SectionNotFound { path: String, section: String },
    #[error("section {section}: relocation at byte {offset} has no named map symbol")]
    UnresolvedMapRelocation { section: String, offset: u64 },
    #[error("section {section}: map relocation at byte {offset} does not target a wide load")]
    BadRelocation { section: String, offset: u64 },
    #[error("cannot infer hook from section name {0}")]
    UnknownHookPrefix(String),
    #[error("{location}: {source}")]
    Decode {
        location: String,
        #[source]
        source: IsaError,
    },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("map {0} listed twice in map table")]
    DuplicateMapName(String),
    #[error("map {0} is not in the map table")]
    UnknownMap(String),
    #[error("instruction {index}: map ordinal {ordinal} has no name")]
    MissingMapName { index: usize, ordinal: i64 },
    #[error("empty nf id")]
    EmptyNfId,
}

type Result<T> = std::result::Result<T, LoadError>;

/// One loaded network function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NfObject {
    pub nf_id: String,
    pub hook: String,
    pub instructions: Vec<Instruction>,
    /// Wide-load instruction index to map name.
    pub map_table: BTreeMap<usize, String>,
    /// Map names by ordinal.
    pub maps: Vec<String>,
}

impl NfObject {
    pub fn map_name(&self, ordinal: i64) -> Option<&str> {
        usize::try_from(ordinal)
            .ok()
            .and_then(|o| self.maps.get(o))
            .map(String::as_str)
    }

    /// Builds an NF from text assembly held in memory. `.section <id>` and
    /// `.hook <name>` directives override `default_id` and the xdp default.
    pub fn from_text(default_id: &str, text: &str, sidecar: Option<&str>) -> Result<NfObject> {
        let prog = isa::parse_text_program(text).map_err(|source| LoadError::Decode {
            location: default_id.to_string(),
            source,
        })?;
        let mut nf_id = default_id.to_string();
        let mut hook = "xdp".to_string();
        for (key, value) in &prog.directives {
            match key.as_str() {
                "section" => nf_id = value.clone(),
                "hook" => hook = value.clone(),
                _ => {}
            }
        }
        if nf_id.is_empty() {
            return Err(LoadError::EmptyNfId);
        }
        let fixed = match sidecar {
            Some(text) => Some(parse_sidecar(text)?),
            None => None,
        };
        let mut instructions = prog.instructions;
        let mut maps = fixed.clone().unwrap_or_default();
        let mut map_table = BTreeMap::new();
        for insn in &mut instructions {
            if insn.kind != InsnKind::LoadMapFd {
                continue;
            }
            let name = match prog.map_refs.get(&insn.index) {
                Some(name) => name.clone(),
                None => {
                    let ordinal = insn.imm64.unwrap_or_default();
                    fixed
                        .as_ref()
                        .and_then(|m| usize::try_from(ordinal).ok().and_then(|o| m.get(o)))
                        .cloned()
                        .ok_or(LoadError::MissingMapName {
                            index: insn.index,
                            ordinal,
                        })?
                }
            };
            let ordinal = match maps.iter().position(|m| *m == name) {
                Some(o) => o,
                None if fixed.is_some() => return Err(LoadError::UnknownMap(name)),
                None => {
                    maps.push(name.clone());
                    maps.len() - 1
                }
            };
            set_map_ordinal(insn, ordinal);
            map_table.insert(insn.index, name);
        }
        Ok(NfObject {
            nf_id,
            hook,
            instructions,
            map_table,
            maps,
        })
    }
}

fn set_map_ordinal(insn: &mut Instruction, ordinal: usize) {
    insn.kind = InsnKind::LoadMapFd;
    insn.src_reg = PSEUDO_MAP_FD;
    insn.imm64 = Some(ordinal as i64);
    insn.imm = ordinal as i32;
}

/// Parses a map sidecar: one name per line, line order is ordinal order.
pub fn parse_sidecar(text: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for line in text.lines() {
        let name = line.split('#').next().unwrap_or("").trim();
        if name.is_empty() {
            continue;
        }
        if names.iter().any(|n| n == name) {
            return Err(LoadError::DuplicateMapName(name.to_string()));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LoadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads a text bundle. The nf id defaults to the file stem.
pub fn load_bundle(asm_path: &Path, maps_path: Option<&Path>) -> Result<NfObject> {
    let text = String::from_utf8_lossy(&read(asm_path)?).into_owned();
    let sidecar = match maps_path {
        Some(p) => Some(String::from_utf8_lossy(&read(p)?).into_owned()),
        None => None,
    };
    let stem = asm_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    NfObject::from_text(&stem, &text, sidecar.as_deref()).map_err(|e| match e {
        LoadError::Decode { source, .. } => LoadError::Decode {
            location: asm_path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Hook implied by a program section name.
pub fn hook_for_section(section: &str) -> Option<&'static str> {
    let head = section.split('/').next().unwrap_or(section);
    if head.starts_with("xdp") {
        Some("xdp")
    } else if head.starts_with("tc") || head.starts_with("classifier") {
        Some("tc")
    } else {
        None
    }
}

fn is_map_section(name: &str) -> bool {
    name == "maps" || name == ".maps" || name.starts_with("maps/")
}

/// Loads a program section from a BPF ELF object, inferring the hook from
/// the section name.
pub fn load_object(path: &Path, section: Option<&str>) -> Result<NfObject> {
    load_object_as(path, section, None)
}

/// Like [`load_object`], with an explicit hook overriding inference.
pub fn load_object_as(path: &Path, section: Option<&str>, hook: Option<&str>) -> Result<NfObject> {
    let data = read(path)?;
    let shown = path.display().to_string();
    let not_elf = |message: String| LoadError::NotElf {
        path: shown.clone(),
        message,
    };
    let file = object::File::parse(&*data).map_err(|e| not_elf(e.to_string()))?;
    if file.format() != object::BinaryFormat::Elf {
        return Err(not_elf(format!("{:?} file", file.format())));
    }
    if file.architecture() != object::Architecture::Bpf {
        return Err(not_elf(format!("{:?} architecture", file.architecture())));
    }
    if !file.is_little_endian() {
        return Err(not_elf("big-endian".into()));
    }

    let programs: Vec<_> = file
        .sections()
        .filter(|s| s.kind() == SectionKind::Text && s.size() > 0)
        .collect();
    let named: Vec<_> = programs
        .iter()
        .filter(|s| s.name().is_ok_and(|n| n != ".text"))
        .collect();
    let candidates = if named.is_empty() {
        programs.iter().collect()
    } else {
        named
    };
    let chosen = match section {
        Some(want) => candidates
            .iter()
            .find(|s| s.name().is_ok_and(|n| n == want))
            .ok_or_else(|| LoadError::SectionNotFound {
                path: shown.clone(),
                section: want.to_string(),
            })?,
        None => match candidates.as_slice() {
            [] => return Err(LoadError::NoProgramSection(shown)),
            [one] => *one,
            many => {
                let names: Vec<&str> = many.iter().filter_map(|s| s.name().ok()).collect();
                return Err(LoadError::AmbiguousSection {
                    path: shown,
                    candidates: names.join(", "),
                });
            }
        },
    };
    let sec_name = chosen
        .name()
        .map_err(|e| not_elf(e.to_string()))?
        .to_string();
    let hook = match hook {
        Some(h) => h.to_string(),
        None => hook_for_section(&sec_name)
            .ok_or_else(|| LoadError::UnknownHookPrefix(sec_name.clone()))?
            .to_string(),
    };
    let bytes = chosen.data().map_err(|e| not_elf(e.to_string()))?;
    let mut instructions = isa::decode_program(bytes).map_err(|source| LoadError::Decode {
        location: format!("{shown}:{sec_name}"),
        source,
    })?;

    // slot -> map symbol name
    let mut map_refs: BTreeMap<usize, String> = BTreeMap::new();
    for (offset, reloc) in chosen.relocations() {
        let RelocationTarget::Symbol(idx) = reloc.target() else {
            continue;
        };
        let Ok(sym) = file.symbol_by_index(idx) else {
            return Err(LoadError::UnresolvedMapRelocation {
                section: sec_name.clone(),
                offset,
            });
        };
        let in_maps = sym
            .section_index()
            .and_then(|i| file.section_by_index(i).ok())
            .and_then(|s| s.name().ok().map(is_map_section))
            .unwrap_or(false);
        if !in_maps {
            continue;
        }
        let name = sym.name().unwrap_or("");
        if name.is_empty() {
            return Err(LoadError::UnresolvedMapRelocation {
                section: sec_name.clone(),
                offset,
            });
        }
        map_refs.insert((offset / 8) as usize, name.to_string());
    }

    let mut maps: Vec<String> = Vec::new();
    let mut map_table = BTreeMap::new();
    for (slot, name) in &map_refs {
        let Some(insn) = instructions.iter_mut().find(|i| i.index == *slot) else {
            return Err(LoadError::BadRelocation {
                section: sec_name.clone(),
                offset: (*slot * 8) as u64,
            });
        };
        if !matches!(insn.kind, InsnKind::LoadImm64 | InsnKind::LoadMapFd) {
            return Err(LoadError::BadRelocation {
                section: sec_name.clone(),
                offset: (*slot * 8) as u64,
            });
        }
        let ordinal = match maps.iter().position(|m| m == name) {
            Some(o) => o,
            None => {
                maps.push(name.clone());
                maps.len() - 1
            }
        };
        set_map_ordinal(insn, ordinal);
        map_table.insert(*slot, name.clone());
    }
    if let Some(insn) = instructions
        .iter()
        .find(|i| i.kind == InsnKind::LoadMapFd && !map_table.contains_key(&i.index))
    {
        return Err(LoadError::UnresolvedMapRelocation {
            section: sec_name,
            offset: (insn.index * 8) as u64,
        });
    }
    Ok(NfObject {
        nf_id: sec_name,
        hook,
        instructions,
        map_table,
        maps,
    })
}
