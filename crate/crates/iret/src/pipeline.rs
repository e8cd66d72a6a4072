//! End-to-end retrieval experiment plumbing: hold-out splits, descriptor
//! extraction, whitening and held-out mAP evaluation. Shared by the CLI
//! ablation subcommands and the acceptance suite.

use std::collections::BTreeSet;

use crate::aggregate::{AggregatorConfig, Descriptor};
use crate::data::Image;
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, GroundTruth, RankedList};
use crate::retrieval::{build_db, query_named};
use crate::whiten::{fit_whitener, postprocess};

/// Corpus/query split of a labeled dataset.
pub struct Split {
    pub corpus: Vec<(String, u32, Image)>,
    pub queries: Vec<(String, u32, Image)>,
}

/// Hold out the last `per_label` views of every label as queries;
/// everything else forms the corpus.
pub fn split_holdout(dataset: &[(String, u32, Image)], per_label: usize) -> Result<Split> {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for (_, label, _) in dataset {
        match counts.iter_mut().find(|(l, _)| l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((*label, 1)),
        }
    }
    for (label, c) in &counts {
        if *c <= per_label {
            return Err(Error::InvalidArgument(format!(
                "label {label} has only {c} views, cannot hold out {per_label}"
            )));
        }
    }
    let mut seen: Vec<(u32, usize)> = counts.iter().map(|(l, _)| (*l, 0)).collect();
    let mut corpus = Vec::new();
    let mut queries = Vec::new();
    for entry in dataset {
        let label = entry.1;
        let total = counts.iter().find(|(l, _)| *l == label).unwrap().1;
        let idx = seen.iter_mut().find(|(l, _)| *l == label).unwrap();
        if idx.1 < total - per_label {
            corpus.push(entry.clone());
        } else {
            queries.push(entry.clone());
        }
        idx.1 += 1;
    }
    Ok(Split { corpus, queries })
}

/// Encode every image to its raw (pre-whitening) unit descriptor.
pub fn extract_descriptors(
    params: &EncoderParams,
    agg: &AggregatorConfig,
    images: &[(String, u32, Image)],
) -> Result<Vec<(String, Descriptor)>> {
    images
        .iter()
        .map(|(id, _, img)| Ok((id.clone(), encode(params, agg, img)?)))
        .collect()
}

/// Full held-out retrieval evaluation: encode corpus and queries, fit a
/// whitener on the corpus, postprocess both sides, run exhaustive cosine
/// retrieval and return the mAP over queries (positives = corpus images
/// sharing the query's label).
pub fn holdout_map(
    params: &EncoderParams,
    agg: &AggregatorConfig,
    split: &Split,
    out_dim: usize,
) -> Result<f64> {
    let corpus_raw = extract_descriptors(params, agg, &split.corpus)?;
    let whitener = fit_whitener(
        &corpus_raw.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>(),
        out_dim,
    )?;
    let corpus_white: Vec<(String, Descriptor)> = corpus_raw
        .iter()
        .map(|(id, d)| Ok((id.clone(), postprocess(&whitener, d)?)))
        .collect::<Result<_>>()?;
    let db = build_db(&corpus_white)?;

    let mut pairs: Vec<(RankedList, GroundTruth)> = Vec::new();
    for (qid, qlabel, qimg) in &split.queries {
        let raw = encode(params, agg, qimg)?;
        let white = postprocess(&whitener, &raw)?;
        let ranked = query_named(&db, &white, None, qid)?;
        let positives: BTreeSet<String> = split
            .corpus
            .iter()
            .filter(|(_, l, _)| l == qlabel)
            .map(|(id, _, _)| id.clone())
            .collect();
        let gt = GroundTruth::new(qid.clone(), positives, BTreeSet::new(), (0.0, 0.0, 1.0, 1.0))?;
        pairs.push((ranked, gt));
    }
    mean_ap(&pairs)
}
