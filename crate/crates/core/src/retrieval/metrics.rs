use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::sq_distance;

/// Gallery indices sorted by ascending Euclidean distance, ties by index,
/// together with the distances.
pub fn rank(query: &[f32], gallery: &[Vec<f32>]) -> Result<Vec<(usize, f32)>> {
    if gallery.is_empty() {
        return Err(Error::contract("rank", "empty gallery"));
    }
    let mut scored = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.len() != query.len() {
                return Err(Error::shapes("rank", &[query.len()], &[g.len()]));
            }
            Ok((i, sq_distance(query, g).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// AP over the first `k` ranks, normalized by `min(relevant_total, k)`.
/// `relevance` is in rank order.
pub fn average_precision(relevance: &[bool], relevant_total: usize, k: usize) -> f64 {
    let denom = relevant_total.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Fraction of the first `k` ranks that are relevant.
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    relevance.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub map: f64,
    pub precision: f64,
    /// Queries with no relevant gallery item, left out of both means.
    pub excluded: usize,
}

/// mAP and Prec over per-query relevance lists (rank order). `k = None`
/// means the whole gallery.
pub fn mean_average_precision(relevance: &[Vec<bool>], k: Option<usize>) -> Result<MetricSummary> {
    if k == Some(0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (mut ap, mut prec, mut used, mut excluded) = (0.0, 0.0, 0usize, 0usize);
    for rel in relevance {
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            excluded += 1;
            continue;
        }
        let k = k.unwrap_or(rel.len());
        ap += average_precision(rel, total, k);
        prec += precision_at(rel, k);
        used += 1;
    }
    let n = used.max(1) as f64;
    Ok(MetricSummary { map: ap / n, precision: prec / n, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_example() {
        let ap = average_precision(&[true, false, true], 2, 3);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 4], 10, 4), 1.0);
        assert_eq!(precision_at(&[true; 4], 4), 1.0);
        assert_eq!(mean_average_precision(&[vec![true]], Some(0)).unwrap_err().category(), "config");
    }

    #[test]
    fn rank_ties_and_self() {
        let g = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = rank(&[0.0, 1.0], &g).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 2, 1]);
        assert_eq!(rank(&[1.0], &[]).unwrap_err().category(), "contract");
    }

    #[test]
    fn zero_relevance_queries_are_excluded() {
        let s = mean_average_precision(&[vec![false, false], vec![true, false]], Some(2)).unwrap();
        assert_eq!(s.excluded, 1);
        assert_eq!(s.map, 1.0);
        assert_eq!(s.precision, 0.5);
    }

    proptest! {
        #[test]
        fn irrelevant_tail_changes_nothing(rel in proptest::collection::vec(any::<bool>(), 1..30), k in 1usize..30, extra in 1usize..10) {
            let total = rel.iter().filter(|&&r| r).count();
            let mut longer = rel.clone();
            let k = k.min(rel.len());
            longer.extend(std::iter::repeat_n(false, extra));
            prop_assert_eq!(average_precision(&rel, total, k), average_precision(&longer, total, k));
            prop_assert_eq!(precision_at(&rel, k), precision_at(&longer, k));
        }

        #[test]
        fn ranking_ignores_monotone_rescaling(g in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..20), s in 0.5f32..4.0) {
            let q = [0.1f32, -0.2, 0.3];
            let base: Vec<usize> = rank(&q, &g).unwrap().into_iter().map(|x| x.0).collect();
            // scaling every vector about the origin scales every distance
            let gs: Vec<Vec<f32>> = g.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
            let qs: Vec<f32> = q.iter().map(|x| x * s).collect();
            let scaled: Vec<usize> = rank(&qs, &gs).unwrap().into_iter().map(|x| x.0).collect();
            let d: Vec<f32> = g.iter().map(|v| sq_distance(&q, v)).collect();
            // only compare when no two distances are close enough to swap under rounding
            let mut sorted = d.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).all(|w| w[1] - w[0] > 1e-4) {
                prop_assert_eq!(base, scaled);
            }
        }
    }
}
