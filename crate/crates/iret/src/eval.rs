//! Exact retrieval evaluation: per-query average precision with junk
//! handling and corpus mAP, following the Oxford/Paris protocol
//! ("good" + "ok" are positive, "junk" is removed from the ranking).

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Per-query relevance annotation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub query_id: String,
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
    pub bbox: (f64, f64, f64, f64),
}

impl GroundTruth {
    pub fn new(
        query_id: String,
        positives: BTreeSet<String>,
        junk: BTreeSet<String>,
        bbox: (f64, f64, f64, f64),
    ) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::GroundTruth(format!(
                "query '{query_id}' has no positives"
            )));
        }
        if let Some(dup) = positives.intersection(&junk).next() {
            return Err(Error::GroundTruth(format!(
                "query '{query_id}': '{dup}' listed as both positive and junk"
            )));
        }
        let (x1, y1, x2, y2) = bbox;
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::GroundTruth(format!(
                "query '{query_id}': degenerate bbox"
            )));
        }
        Ok(GroundTruth {
            query_id,
            positives,
            junk,
            bbox,
        })
    }
}

/// Retrieval result for one query: (image_id, score) strictly descending
/// by score, ties broken by ascending image id.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn new(query_id: String, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.clone()) {
                return Err(Error::GroundTruth(format!(
                    "ranked list for '{query_id}' repeats image '{id}'"
                )));
            }
        }
        for w in entries.windows(2) {
            let (ref a_id, a_s) = w[0];
            let (ref b_id, b_s) = w[1];
            let ok = a_s > b_s || (a_s == b_s && a_id < b_id);
            if !ok {
                return Err(Error::GroundTruth(format!(
                    "ranked list for '{query_id}' violates ordering at '{b_id}'"
                )));
            }
        }
        Ok(RankedList { query_id, entries })
    }

    /// Constructor for lists read back from TSV, where scores were
    /// rounded to 6 decimals: rounding can turn distinct scores into ties
    /// whose id order reflects the original (unrounded) ordering, so only
    /// non-increasing scores and unique ids are required.
    pub fn parsed(query_id: String, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.clone()) {
                return Err(Error::GroundTruth(format!(
                    "ranked list for '{query_id}' repeats image '{id}'"
                )));
            }
        }
        for w in entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::GroundTruth(format!(
                    "ranked list for '{query_id}' has increasing scores at '{}'",
                    w[1].0
                )));
            }
        }
        Ok(RankedList { query_id, entries })
    }
}

/// Rectangle-rule AP: junk entries are dropped, then
/// AP = sum_i Prec(i) * (Rec(i) - Rec(i-1)) with the recall denominator
/// equal to the full positive count (missing positives are penalized).
pub fn exact_ap(r: &RankedList, gt: &GroundTruth) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(Error::GroundTruth("no positives".into()));
    }
    let filtered: Vec<&String> = r
        .entries
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !gt.junk.contains(*id))
        .collect();
    let total_pos = gt.positives.len() as f64;

    // precision and recall evaluated at each position, rectangle rule
    let relevant: Vec<bool> = filtered.iter().map(|id| gt.positives.contains(*id)).collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 1..=filtered.len() {
        let hits = relevant[..i].iter().filter(|&&r| r).count() as f64;
        let prec = hits / i as f64;
        let rec = hits / total_pos;
        ap += prec * (rec - prev_recall);
        prev_recall = rec;
    }
    Ok(ap)
}

/// Arithmetic mean of exact_ap over queries, reduced in list order.
pub fn mean_ap(pairs: &[(RankedList, GroundTruth)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("mean_ap over empty list".into()));
    }
    let mut sum = 0.0;
    for (r, gt) in pairs {
        sum += exact_ap(r, gt)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Format the evaluation report: one `query_id<TAB>ap` line per query
/// (6 decimals) followed by `mAP<TAB>value`.
pub fn format_report(pairs: &[(RankedList, GroundTruth)]) -> Result<String> {
    let mut out = String::new();
    for (r, gt) in pairs {
        out.push_str(&format!("{}\t{:.6}\n", r.query_id, exact_ap(r, gt)?));
    }
    out.push_str(&format!("mAP\t{:.6}\n", mean_ap(pairs)?));
    Ok(out)
}
