//! Hits@N relation ranking and the uniform random baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{DatasetSplits, Split, Triple};
use crate::model::{predict_batch, ModelParams};
use crate::seed::{self, Stream};

/// Cut-offs reported by [`evaluate`].
pub const HITS_AT: [usize; 4] = [1, 3, 5, 10];

const EVAL_CHUNK: usize = 512;

/// `(relation, score)` in descending score order; ties go to the lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRelations {
    order: Vec<(usize, f64)>,
}

impl RankedRelations {
    pub fn as_slice(&self) -> &[(usize, f64)] {
        &self.order
    }

    pub fn relations(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().map(|&(r, _)| r)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// 0-based rank of relation `p`.
    pub fn position(&self, p: usize) -> Option<usize> {
        self.order.iter().position(|&(r, _)| r == p)
    }
}

fn descending(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

pub fn rank_relations(scores: &[f64]) -> Result<RankedRelations> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score of relation {i}")));
    }
    let mut order: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    order.sort_by(descending);
    Ok(RankedRelations { order })
}

/// 1 if `p` is among the first `n` ranked relations.
pub fn hit_at(ranked: &RankedRelations, p: usize, n: usize) -> u8 {
    match ranked.position(p) {
        Some(pos) if pos < n => 1,
        _ => 0,
    }
}

/// Position `p` would take in [`rank_relations`] order, without sorting.
pub fn rank_of(scores: &[f64], p: usize) -> usize {
    let target = scores[p];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > target || (s == target && i < p))
        .count()
}

/// Per-cutoff hit counts over `triples`, computed in fixed-size chunks so the
/// result does not depend on the thread count.
fn count_hits(params: &ModelParams, triples: &[Triple], cutoffs: &[usize]) -> Result<Vec<u64>> {
    let per_chunk = triples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|t| (t.s, t.o)).collect();
            let scores = predict_batch(params, &pairs)?;
            let mut counts = vec![0u64; cutoffs.len()];
            for (row, t) in scores.outer_iter().zip(chunk) {
                let row = row.as_slice().expect("prediction rows are contiguous");
                if t.p >= row.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "relation",
                        index: t.p,
                        size: row.len(),
                    });
                }
                if let Some(i) = row.iter().position(|s| !s.is_finite()) {
                    return Err(Error::Numeric(format!("score of relation {i}")));
                }
                let rank = rank_of(row, t.p);
                for (c, &n) in counts.iter_mut().zip(cutoffs) {
                    if rank < n {
                        *c += 1;
                    }
                }
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0u64; cutoffs.len()];
    for counts in per_chunk {
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
    }
    Ok(total)
}

/// Fraction of test triples whose relation ranks in the top `n`. Triples
/// dropped as out-of-vocabulary count as misses.
pub fn hits_at_n(params: &ModelParams, test: &[Triple], n: usize, oov_skipped: usize) -> Result<f64> {
    let denom = test.len() + oov_skipped;
    if denom == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    if n == 0 {
        return Err(Error::Config("Hits@N needs N >= 1".into()));
    }
    let hits = count_hits(params, test, &[n])?[0];
    Ok(hits as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub hits: BTreeMap<usize, f64>,
    /// Denominator: evaluated triples plus out-of-vocabulary skips.
    pub num_test_triples: usize,
    pub skipped_oov: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_runtime_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn hits_at(&self, n: usize) -> Option<f64> {
        self.hits.get(&n).copied()
    }

    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (n, v) in &self.hits {
            out.push_str(&format!("hits@{n:<3} {v:.4}\n"));
        }
        out.push_str(&format!(
            "triples  {} ({} skipped as OOV)\n",
            self.num_test_triples, self.skipped_oov
        ));
        if let Some(rt) = self.train_runtime_seconds {
            out.push_str(&format!("train runtime {rt:.2} s\n"));
        }
        out
    }
}

/// Hits@N for arbitrary cut-offs. Cut-offs above `|R|` are evaluated at `|R|`
/// (every in-vocabulary triple hits) and noted in the report.
pub fn evaluate_triples(
    params: &ModelParams,
    triples: &[Triple],
    oov_skipped: usize,
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    let denom = triples.len() + oov_skipped;
    if denom == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    let num_relations = params.num_relations();
    let mut notes = Vec::new();
    let effective: Vec<usize> = cutoffs
        .iter()
        .map(|&n| {
            if n > num_relations {
                notes.push(format!("hits@{n} exceeds |R| = {num_relations}; evaluated as hits@{num_relations}"));
                num_relations
            } else {
                n.max(1)
            }
        })
        .collect();
    let counts = count_hits(params, triples, &effective)?;
    let hits = cutoffs
        .iter()
        .zip(counts)
        .map(|(&n, c)| (n, c as f64 / denom as f64))
        .collect();
    Ok(MetricsReport {
        hits,
        num_test_triples: denom,
        skipped_oov: oov_skipped,
        train_runtime_seconds: None,
        notes,
    })
}

pub fn evaluate(params: &ModelParams, splits: &DatasetSplits, which: Split) -> Result<MetricsReport> {
    let (triples, skipped) = splits.split(which);
    evaluate_triples(params, triples, skipped, &HITS_AT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UrcResult {
    pub analytic: f64,
    pub empirical: f64,
}

/// Uniform random classifier: each of `test_size` triples gets an independent
/// uniformly random permutation of the relations.
pub fn urc_baseline(num_relations: usize, n: usize, test_size: usize, seed: u64) -> Result<UrcResult> {
    if num_relations == 0 || n == 0 || n > num_relations {
        return Err(Error::Config(format!("URC needs 1 <= N <= |R| (N={n}, |R|={num_relations})")));
    }
    if test_size == 0 {
        return Err(Error::Empty("URC test set"));
    }
    let mut rng = seed::rng(seed, Stream::Urc);
    let mut ranking: Vec<usize> = (0..num_relations).collect();
    let mut hits = 0usize;
    for _ in 0..test_size {
        let truth = rng.random_range(0..num_relations);
        ranking.shuffle(&mut rng);
        if ranking[..n].contains(&truth) {
            hits += 1;
        }
    }
    Ok(UrcResult {
        analytic: n as f64 / num_relations as f64,
        empirical: hits as f64 / test_size as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn order(scores: &[f64]) -> Vec<usize> {
        rank_relations(scores).unwrap().relations().collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(order(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(order(&[0.3; 5]), vec![0, 1, 2, 3, 4]);
        assert!(rank_relations(&[0.1, f64::NAN]).is_err());
        assert!(rank_relations(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn hit_examples() {
        let r = rank_relations(&[0.1, 0.9, 0.5]).unwrap();
        assert_eq!(hit_at(&r, 1, 1), 1);
        assert_eq!(hit_at(&r, 0, 2), 0);
        for p in 0..3 {
            assert_eq!(hit_at(&r, p, 3), 1);
        }
    }

    #[test]
    fn urc_full_coverage() {
        let u = urc_baseline(3, 3, 50, 1).unwrap();
        assert_eq!(u.analytic, 1.0);
        assert_eq!(u.empirical, 1.0);
        assert!(urc_baseline(3, 4, 10, 1).is_err());
        assert!(urc_baseline(3, 1, 0, 1).is_err());
    }

    #[test]
    fn urc_analytic_values() {
        let u = urc_baseline(11, 1, 10, 0).unwrap();
        assert!((u.analytic - 1.0 / 11.0).abs() < 1e-15);
        let u = urc_baseline(237, 5, 10, 0).unwrap();
        assert!((u.analytic - 5.0 / 237.0).abs() < 1e-15);
    }

    #[test]
    fn empty_split_is_error() {
        let p = ModelParams::init(3, 2, 2, 2, 0).unwrap();
        assert!(matches!(hits_at_n(&p, &[], 1, 0), Err(Error::Empty(_))));
        assert!(evaluate_triples(&p, &[], 0, &HITS_AT).is_err());
    }

    #[test]
    fn oov_counts_as_miss() {
        let p = ModelParams::init(3, 2, 2, 2, 0).unwrap();
        let test = [Triple::new(0, 0, 1), Triple::new(1, 1, 2)];
        assert_eq!(hits_at_n(&p, &test, 2, 0).unwrap(), 1.0);
        assert_eq!(hits_at_n(&p, &test, 2, 2).unwrap(), 0.5);
        let report = evaluate_triples(&p, &test, 2, &HITS_AT).unwrap();
        assert_eq!(report.num_test_triples, 4);
        assert_eq!(report.hits_at(10), Some(0.5));
        assert!(!report.notes.is_empty());
    }

    proptest! {
        #[test]
        fn rank_of_matches_sorted_position(
            scores in prop::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], 1..40),
            pick in any::<prop::sample::Index>(),
        ) {
            let p = pick.index(scores.len());
            let ranked = rank_relations(&scores).unwrap();
            prop_assert_eq!(ranked.position(p), Some(rank_of(&scores, p)));
        }

        #[test]
        fn hits_are_nested(
            scores in prop::collection::vec(0.0f64..1.0, 1..30),
            pick in any::<prop::sample::Index>(),
            n in 1usize..30,
        ) {
            let p = pick.index(scores.len());
            let ranked = rank_relations(&scores).unwrap();
            if hit_at(&ranked, p, n) == 1 {
                for m in n..=scores.len() {
                    prop_assert_eq!(hit_at(&ranked, p, m), 1);
                }
            }
        }
    }
}
