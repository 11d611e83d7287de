//! `prashna`: analyze eBPF network functions into a knowledge base, then
//! query it or check assertion suites against it.
//!
//! Exit codes: 0 success, 1 assertion suite mismatch, 2 any error.

mod script;

use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prashna::analyzer::{analyze_nf_with, AnalyzeOptions};
use prashna::engine::{Answer, Engine};
use prashna::facts::{emit_facts, parse_kb, parse_manifest, serialize_kb, Atom, KnowledgeBase};
use prashna::loader::{load_bundle, load_object_as, NfObject};
use prashna::netspec::{load_netspec, NetSpec};

use script::{Expect, Statement};

const PATH_BUDGET_ENV: &str = "PRASHNA_PATH_BUDGET";

#[derive(Parser)]
#[command(
    name = "prashna",
    version,
    about = "Network-context analysis and queries for eBPF network functions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analyze NF objects or text assembly into a knowledge base file.
    Analyze(AnalyzeArgs),
    /// Run queries against a knowledge base.
    Query(QueryArgs),
    /// Check an assertion suite against a knowledge base.
    Assert(AssertArgs),
    /// Print one NF's control flow graph as DOT, or its annotated CFG as JSON.
    Cfg(CfgArgs),
}

#[derive(Args)]
struct LoadArgs {
    /// Network spec file; the built-in spec is used when omitted.
    #[arg(short = 's', long = "netspec")]
    netspec: Option<PathBuf>,
    /// Program section to load from ELF objects.
    #[arg(long)]
    section: Option<String>,
    /// Hook to assume instead of inferring it.
    #[arg(long)]
    hook: Option<String>,
    /// Map-table sidecar for text assembly inputs.
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    load: LoadArgs,
    /// Output knowledge base path.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
    /// Chain manifest: one object path (and optional section) per line, in
    /// execution order.
    #[arg(long, conflicts_with = "inputs")]
    chain: Option<PathBuf>,
    /// Analyze on one thread.
    #[arg(long)]
    sequential: bool,
    /// ELF objects or text assembly files.
    #[arg(required_unless_present = "chain")]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EngineArgs {
    /// Knowledge base file.
    #[arg(short = 'k', long = "kb")]
    kb: PathBuf,
    /// Bind an unquoted name to a constant, as NAME=VALUE.
    #[arg(long = "define", value_name = "NAME=VALUE")]
    defines: Vec<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Query text; may be repeated.
    #[arg(short = 'e', long = "eval")]
    exprs: Vec<String>,
    /// File of queries and rules.
    #[arg(short = 'f', long = "file")]
    file: Option<PathBuf>,
    /// Read queries interactively after any -e/-f work.
    #[arg(long)]
    repl: bool,
}

#[derive(Args)]
struct AssertArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Suite file of `expect pass|fail <name>: <query>` lines.
    #[arg(short = 'f', long = "file")]
    file: PathBuf,
}

#[derive(Args)]
struct CfgArgs {
    #[command(flatten)]
    load: LoadArgs,
    /// Print the annotated CFG as JSON instead of DOT.
    #[arg(long)]
    json: bool,
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Analyze(a) => analyze(a),
        Cmd::Query(q) => query(q),
        Cmd::Assert(a) => assert_suite(a),
        Cmd::Cfg(c) => cfg(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn netspec(path: Option<&Path>) -> Result<NetSpec> {
    match path {
        Some(p) => load_netspec(p).with_context(|| format!("loading netspec {}", p.display())),
        None => Ok(NetSpec::default()),
    }
}

fn options(sequential: bool) -> Result<AnalyzeOptions> {
    let mut opts = AnalyzeOptions::default();
    if sequential {
        opts.parallel = false;
    }
    if let Ok(v) = std::env::var(PATH_BUDGET_ENV) {
        opts.path_budget = v
            .trim()
            .parse()
            .with_context(|| format!("{PATH_BUDGET_ENV}={v:?} is not a path count"))?;
    }
    Ok(opts)
}

fn is_elf(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(bytes.starts_with(b"\x7fELF"))
}

fn load_one(path: &Path, section: Option<&str>, load: &LoadArgs) -> Result<NfObject> {
    let mut nf = if is_elf(path)? {
        load_object_as(path, section, load.hook.as_deref())?
    } else {
        if section.is_some() {
            bail!("{}: sections only apply to ELF objects", path.display());
        }
        load_bundle(path, load.maps.as_deref())?
    };
    if let Some(h) = &load.hook {
        nf.hook = h.clone();
    }
    Ok(nf)
}

/// Writes through a temporary file in the same directory so a failed run
/// never leaves a partial file behind.
fn write_atomic(path: &Path, data: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, data).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let spec = netspec(a.load.netspec.as_deref())?;
    let opts = options(a.sequential)?;
    let nfs: Vec<NfObject> = match &a.chain {
        Some(manifest) => {
            let text = fs::read_to_string(manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let entries =
                parse_manifest(&text).with_context(|| format!("{}", manifest.display()))?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            entries
                .iter()
                .map(|e| {
                    let section = e.section.as_deref().or(a.load.section.as_deref());
                    load_one(&base.join(&e.path), section, &a.load)
                        .with_context(|| format!("{}:{}", manifest.display(), e.line))
                })
                .collect::<Result<_>>()?
        }
        None => a
            .inputs
            .iter()
            .map(|p| load_one(p, a.load.section.as_deref(), &a.load))
            .collect::<Result<_>>()?,
    };
    let (kb, ncs) = prashna::build_kb(&nfs, &spec, &opts, a.chain.is_some())?;
    write_atomic(&a.out, &serialize_kb(&kb))?;
    for (nf, nc) in nfs.iter().zip(&ncs) {
        println!(
            "{} ({}): {} blocks, {} paths, {} facts",
            nf.nf_id,
            nf.hook,
            nc.cfg.blocks.len(),
            nc.path_actions.len(),
            emit_facts(&nf.nf_id, nc).len()
        );
    }
    println!("wrote {} facts to {}", kb.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn engine(e: &EngineArgs) -> Result<(Engine, KnowledgeBase)> {
    let text = fs::read_to_string(&e.kb).with_context(|| format!("reading {}", e.kb.display()))?;
    let kb = parse_kb(&text).with_context(|| format!("{}", e.kb.display()))?;
    let mut eng = Engine::new();
    for d in &e.defines {
        let Some((name, value)) = d.split_once('=') else {
            bail!("--define expects NAME=VALUE, got {d:?}");
        };
        let atom = match value.trim().parse::<i64>() {
            Ok(n) => Atom::Int(n),
            Err(_) => Atom::str(value.trim()),
        };
        eng.define_constant(name.trim(), atom);
    }
    Ok((eng, kb))
}

fn run_statement(
    eng: &mut Engine,
    kb: &KnowledgeBase,
    st: &Statement,
    out: &mut impl Write,
) -> Result<()> {
    match st {
        Statement::Rule { name, params, body } => {
            let params: Vec<&str> = params.iter().map(String::as_str).collect();
            eng.define_rule(name, &params, body)?;
            writeln!(out, "defined {name}/{}", params.len())?;
        }
        Statement::Query { label, text } => {
            let q = eng.parse(text)?;
            let answer = eng.solve(&q, kb)?;
            if let Some(l) = label {
                writeln!(out, "{l}:")?;
            }
            match &answer {
                Answer::Rows(rows) if !rows.is_empty() => {
                    for r in rows {
                        writeln!(out, "  {}", prashna::engine::format_row(r))?;
                    }
                }
                other => writeln!(out, "  {other}")?,
            }
        }
    }
    Ok(())
}

fn query(a: QueryArgs) -> Result<ExitCode> {
    if a.exprs.is_empty() && a.file.is_none() && !a.repl {
        bail!("nothing to do: give -e, -f or --repl");
    }
    let (mut eng, kb) = engine(&a.engine)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for e in &a.exprs {
        let st = script::statement(e.trim())?;
        run_statement(&mut eng, &kb, &st, &mut out)?;
    }
    if let Some(f) = &a.file {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        for (line, st) in script::statements(&text).with_context(|| format!("{}", f.display()))? {
            run_statement(&mut eng, &kb, &st, &mut out)
                .with_context(|| format!("{}:{line}", f.display()))?;
        }
    }
    drop(out);
    if a.repl {
        repl(&mut eng, &kb)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads `.`-terminated statements from stdin. Errors are reported and the
/// session carries on.
fn repl(eng: &mut Engine, kb: &KnowledgeBase) -> Result<()> {
    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut pending = String::new();
    let prompt = |pending: &str| {
        if interactive {
            eprint!("{}", if pending.is_empty() { "?- " } else { "|  " });
        }
    };
    prompt(&pending);
    for line in stdin.lock().lines() {
        let line = line?;
        if pending.is_empty() && matches!(line.trim(), ":q" | ":quit") {
            break;
        }
        pending.push_str(&line);
        pending.push('\n');
        let (done, rest) = script::split(&pending);
        pending = rest;
        let mut out = io::stdout().lock();
        for (_, text) in done {
            let res = script::statement(&text).and_then(|st| run_statement(eng, kb, &st, &mut out));
            if let Err(e) = res {
                writeln!(out, "  error: {e:#}")?;
            }
        }
        out.flush()?;
        prompt(&pending);
    }
    if !pending.trim().is_empty() {
        bail!("unterminated input: {:?}", pending.trim());
    }
    Ok(())
}

fn assert_suite(a: AssertArgs) -> Result<ExitCode> {
    let (eng, kb) = engine(&a.engine)?;
    let text =
        fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let suite = script::parse_suite(&text).with_context(|| format!("{}", a.file.display()))?;
    // Parse everything before evaluating anything.
    let queries = suite
        .iter()
        .map(|e| {
            eng.parse(&e.query)
                .with_context(|| format!("{}:{} ({})", a.file.display(), e.line, e.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let width = suite.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut mismatches = 0;
    for (e, q) in suite.iter().zip(&queries) {
        let got = if eng
            .holds(q, &kb)
            .with_context(|| format!("evaluating {}", e.name))?
        {
            Expect::Pass
        } else {
            Expect::Fail
        };
        let ok = got == e.expect;
        if !ok {
            mismatches += 1;
        }
        println!(
            "{}  {:width$}  expected {}, got {}",
            if ok { "PASS" } else { "FAIL" },
            e.name,
            word(e.expect),
            word(got)
        );
    }
    println!(
        "{} of {} entries as expected",
        suite.len() - mismatches,
        suite.len()
    );
    Ok(if mismatches == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn word(e: Expect) -> &'static str {
    match e {
        Expect::Pass => "pass",
        Expect::Fail => "fail",
    }
}

fn cfg(c: CfgArgs) -> Result<ExitCode> {
    let nf = load_one(&c.input, c.load.section.as_deref(), &c.load)?;
    if c.json {
        let spec = netspec(c.load.netspec.as_deref())?;
        let nc = analyze_nf_with(&nf, &spec, &options(false)?)?;
        println!("{}", nc.to_json());
    } else {
        let cfg = prashna::cfg::build_cfg(&nf.instructions)?;
        print!("{}", cfg.to_dot(&nf.nf_id));
    }
    Ok(ExitCode::SUCCESS)
}
