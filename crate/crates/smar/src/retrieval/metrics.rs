//! Recall/precision/F1 at k, macro-averaged over queries.

use std::collections::BTreeMap;
use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Result, SmarError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub n_relevant: usize,
    pub per_k: BTreeMap<usize, Prf>,
}

/// Macro-averaged metrics for one query set.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub n_queries: usize,
    pub per_k: BTreeMap<usize, Prf>,
    pub per_query: Vec<QueryMetrics>,
}

/// Metrics for one ranked list against a relevant set. P@k divides by k even
/// when fewer than k results exist; F1 is zero when both components are.
pub fn prf_at_k(ranked: &[String], relevant: &HashSet<&str>, k: usize) -> Result<Prf> {
    if k == 0 {
        return Err(SmarError::Contract("metrics need k >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(SmarError::Empty("relevant set is empty".into()));
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_str()))
        .count() as f64;
    let recall = hits / relevant.len() as f64;
    let precision = hits / k as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf {
        recall,
        precision,
        f1,
    })
}

pub fn query_metrics(
    query_id: &str,
    ranked: &[String],
    relevant: &HashSet<&str>,
    ks: &[usize],
) -> Result<QueryMetrics> {
    let mut per_k = BTreeMap::new();
    for &k in ks {
        per_k.insert(k, prf_at_k(ranked, relevant, k)?);
    }
    Ok(QueryMetrics {
        query_id: query_id.to_string(),
        n_relevant: relevant.len(),
        per_k,
    })
}

/// Macro average over per-query metrics.
pub fn macro_report(per_query: Vec<QueryMetrics>, ks: &[usize]) -> Result<MetricsReport> {
    if per_query.is_empty() {
        return Err(SmarError::Empty("no queries to aggregate".into()));
    }
    let n = per_query.len() as f64;
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let mut acc = Prf::default();
        for q in &per_query {
            let m = q.per_k.get(&k).ok_or_else(|| {
                SmarError::Contract(format!("query {} lacks metrics at k={k}", q.query_id))
            })?;
            acc.recall += m.recall;
            acc.precision += m.precision;
            acc.f1 += m.f1;
        }
        per_k.insert(
            k,
            Prf {
                recall: acc.recall / n,
                precision: acc.precision / n,
                f1: acc.f1 / n,
            },
        );
    }
    Ok(MetricsReport {
        ks: ks.to_vec(),
        n_queries: per_query.len(),
        per_k,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_retrieval_is_all_ones() {
        let ranked = ids(&["a", "b", "c"]);
        let relevant: HashSet<&str> = ["a", "b", "c"].into();
        let m = prf_at_k(&ranked, &relevant, 3).unwrap();
        assert_eq!(m, Prf { recall: 1.0, precision: 1.0, f1: 1.0 });
    }

    #[test]
    fn hand_checked_case() {
        // relevant {a,b,c}, top-2 = {a,x}: R=1/3, P=1/2, F1=0.4
        let ranked = ids(&["a", "x"]);
        let relevant: HashSet<&str> = ["a", "b", "c"].into();
        let m = prf_at_k(&ranked, &relevant, 2).unwrap();
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_hits_yield_zero_f1_without_division_error() {
        let ranked = ids(&["x", "y"]);
        let relevant: HashSet<&str> = ["a"].into();
        let m = prf_at_k(&ranked, &relevant, 2).unwrap();
        assert_eq!(m, Prf { recall: 0.0, precision: 0.0, f1: 0.0 });
    }

    #[test]
    fn precision_divides_by_k_when_results_are_short() {
        let ranked = ids(&["a"]);
        let relevant: HashSet<&str> = ["a", "b"].into();
        let m = prf_at_k(&ranked, &relevant, 5).unwrap();
        assert!((m.precision - 0.2).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn macro_average_is_per_query_mean() {
        let relevant_a: HashSet<&str> = ["a"].into();
        let relevant_b: HashSet<&str> = ["b"].into();
        let qa = query_metrics("q1", &ids(&["a"]), &relevant_a, &[1]).unwrap();
        let qb = query_metrics("q2", &ids(&["x"]), &relevant_b, &[1]).unwrap();
        let report = macro_report(vec![qa, qb], &[1]).unwrap();
        assert!((report.per_k[&1].recall - 0.5).abs() < 1e-12);
        assert_eq!(report.n_queries, 2);
    }
}
