//! Average precision at K.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::fusion::RankedResult;
use crate::matrix::LabelMap;
use crate::{Error, Result};

/// Normalizer of the AP sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApDenominator {
    /// `min(|relevant|, K)`, the usual leaderboard convention.
    #[default]
    MinRelevantK,
    /// `|relevant|`.
    Relevant,
}

/// AP@K of a ranked list against a relevant set. Zero when nothing is relevant.
pub fn ap_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize, denom: ApDenominator) -> Result<f64> {
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    if !ranked.iter().all(|r| seen.insert(r)) {
        return Err(Error::Data("ranked list contains duplicate ids".into()));
    }
    ap_from_relevance(ranked.iter().map(|r| relevant.contains(r)), relevant.len(), k, denom)
}

fn ap_from_relevance(rel: impl Iterator<Item = bool>, n_relevant: usize, k: usize, denom: ApDenominator) -> Result<f64> {
    if n_relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in rel.take(k).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let d = match denom {
        ApDenominator::MinRelevantK => n_relevant.min(k),
        ApDenominator::Relevant => n_relevant,
    };
    Ok(sum / d as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// `(query id, AP@K)` in input order.
    pub per_query: Vec<(String, f64)>,
}

/// mAP@K where a gallery item is relevant iff it shares the query's label.
///
/// `gallery_ids` is the retrieval universe used to count relevant items.
pub fn map_at_k(
    results: &[RankedResult],
    labels: &LabelMap,
    gallery_ids: &[String],
    k: usize,
    denom: ApDenominator,
) -> Result<MapReport> {
    let mut by_label: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for g in gallery_ids {
        by_label.entry(labels.get(g)?).or_default().insert(g.as_str());
    }
    let empty = BTreeSet::new();
    let mut per_query = Vec::with_capacity(results.len());
    for r in results {
        let label = labels.get(&r.query_id)?;
        let relevant = by_label.get(label).unwrap_or(&empty);
        let ranked: Vec<&str> = r.gallery_ids().collect();
        for g in &ranked {
            labels.get(g)?;
        }
        let ap = ap_at_k(&ranked, relevant, k, denom)
            .map_err(|e| Error::Data(format!("query {:?}: {e}", r.query_id)))?;
        per_query.push((r.query_id.clone(), ap));
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|e| e.1).sum::<f64>() / per_query.len() as f64
    };
    Ok(MapReport { map, per_query })
}
