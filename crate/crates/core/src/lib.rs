//! Network-context extraction for eBPF network functions and a small logic
//! language for asking questions about it.
//!
//! The pipeline is: [`loader`] turns an object file or text assembly into
//! instructions, [`cfg`] splits them into basic blocks, [`analyzer`] walks
//! every path and annotates blocks with the packet fields, protocols, maps
//! and helpers they touch, and [`facts`] flattens that into a knowledge base
//! that [`engine`] answers [`querylang`] queries against.

pub mod analyzer;
pub mod cfg;
pub mod engine;
pub mod facts;
pub mod isa;
pub mod loader;
pub mod netspec;
pub mod querylang;

use analyzer::{AnalyzeError, AnalyzeOptions, CfgNc};
use facts::{FactsError, KnowledgeBase};
use loader::NfObject;
use netspec::NetSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{nf}: {source}")]
    Analyze {
        nf: String,
        #[source]
        source: AnalyzeError,
    },
    #[error(transparent)]
    Facts(#[from] FactsError),
}

/// Analyzes each NF and builds one knowledge base. With `chained` set, the
/// NFs are taken to run in slice order and nf_edge facts link neighbours.
pub fn build_kb(
    nfs: &[NfObject],
    spec: &NetSpec,
    opts: &AnalyzeOptions,
    chained: bool,
) -> Result<(KnowledgeBase, Vec<CfgNc>), PipelineError> {
    let run = |nf: &NfObject| {
        analyzer::analyze_nf_with(nf, spec, opts).map_err(|source| PipelineError::Analyze {
            nf: nf.nf_id.clone(),
            source,
        })
    };
    #[cfg(feature = "parallel")]
    let ncs: Vec<CfgNc> = if opts.parallel {
        use rayon::prelude::*;
        nfs.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        nfs.iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let ncs: Vec<CfgNc> = nfs.iter().map(run).collect::<Result<_, _>>()?;

    let kb = if chained {
        facts::emit_chain_facts(nfs.iter().map(|n| n.nf_id.as_str()).zip(ncs.iter()))?
    } else {
        let mut seen = std::collections::BTreeSet::new();
        let mut kb = KnowledgeBase::new();
        for (nf, nc) in nfs.iter().zip(&ncs) {
            if !seen.insert(nf.nf_id.as_str()) {
                return Err(FactsError::DuplicateNfId(nf.nf_id.clone()).into());
            }
            kb.extend(facts::emit_facts(&nf.nf_id, nc));
        }
        kb
    };
    Ok((kb, ncs))
}
