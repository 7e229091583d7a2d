//! Top-K metrics with binary relevance.
//!
//! NDCG's ideal gain is taken over all positives (capped at K), not only the
//! positives that were retrieved.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [20, 50];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: u64,
    pub retrieved: Vec<usize>,
    pub positives: Vec<usize>,
}

fn check(record: &EvalRecord, k: usize) -> Result<HashSet<usize>> {
    if record.positives.is_empty() {
        return Err(Error::invalid(format!("user {} has no positives", record.user_id)));
    }
    if k == 0 || k > record.retrieved.len() {
        return Err(Error::invalid(format!(
            "K={k} but user {} has {} retrieved items",
            record.user_id,
            record.retrieved.len()
        )));
    }
    Ok(record.positives.iter().copied().collect())
}

fn hits(record: &EvalRecord, k: usize, pos: &HashSet<usize>) -> usize {
    record.retrieved[..k].iter().filter(|i| pos.contains(i)).count()
}

pub fn recall_at_k(record: &EvalRecord, k: usize) -> Result<f64> {
    let pos = check(record, k)?;
    Ok(hits(record, k, &pos) as f64 / pos.len() as f64)
}

/// 1 if any positive is in the top K.
pub fn hr_at_k(record: &EvalRecord, k: usize) -> Result<f64> {
    let pos = check(record, k)?;
    Ok(if hits(record, k, &pos) > 0 { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(record: &EvalRecord, k: usize) -> Result<f64> {
    let pos = check(record, k)?;
    let dcg: f64 = record.retrieved[..k]
        .iter()
        .enumerate()
        .filter(|(_, i)| pos.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(pos.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: f64,
}

/// Per-metric, per-K means in output order (HR, Recall, NDCG; `ks` order kept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub n_users: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.k == k).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,K,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.metric, r.k, r.value));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes")
    }

    /// Writes `metrics.csv` and `metrics.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("metrics.json");
        fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))
    }
}

pub fn evaluate_split(records: &[EvalRecord], ks: &[usize]) -> Result<MetricTable> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    if ks.is_empty() {
        return Err(Error::invalid("empty K list"));
    }
    type MetricFn = fn(&EvalRecord, usize) -> Result<f64>;
    let metrics: [(&str, MetricFn); 3] = [("HR", hr_at_k), ("Recall", recall_at_k), ("NDCG", ndcg_at_k)];
    let mut rows = Vec::new();
    for (name, f) in metrics {
        for &k in ks {
            let mut sum = 0.0;
            for r in records {
                sum += f(r, k)?;
            }
            rows.push(MetricRow {
                metric: name.to_string(),
                k,
                value: sum / records.len() as f64,
            });
        }
    }
    Ok(MetricTable {
        n_users: records.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(retrieved: &[usize], positives: &[usize]) -> EvalRecord {
        EvalRecord {
            user_id: 0,
            retrieved: retrieved.to_vec(),
            positives: positives.to_vec(),
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&rec(&[1, 2, 3], &[2, 3]), 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&rec(&[1, 2, 3], &[7]), 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&rec(&[1, 2, 3], &[1, 9]), 2).unwrap(), 0.5);
        assert!(recall_at_k(&rec(&[1], &[]), 1).is_err());
        assert!(recall_at_k(&rec(&[1], &[1]), 2).is_err());
    }

    #[test]
    fn hr_examples() {
        let a = rec(&[4, 5], &[5]);
        let b = rec(&[4, 5], &[6]);
        assert_eq!(hr_at_k(&a, 2).unwrap(), 1.0);
        assert_eq!(hr_at_k(&b, 2).unwrap(), 0.0);
        let t = evaluate_split(&[a, b], &[2]).unwrap();
        assert_eq!(t.get("HR", 2), Some(0.5));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&rec(&[3, 1], &[3]), 1).unwrap(), 1.0);
        let v = ndcg_at_k(&rec(&[3, 1], &[3, 8]), 2).unwrap();
        assert!((v - 0.6131).abs() < 1e-4, "{v}");
        assert!((ndcg_at_k(&rec(&[8, 3, 1], &[3, 8]), 2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn table_layout() {
        let r = rec(&[1, 2, 3, 4], &[2, 4]);
        let t = evaluate_split(std::slice::from_ref(&r), &[4, 1]).unwrap();
        let ks: Vec<usize> = t.rows.iter().map(|row| row.k).collect();
        assert_eq!(ks, vec![4, 1, 4, 1, 4, 1]);
        assert_eq!(t.get("Recall", 4), Some(recall_at_k(&r, 4).unwrap()));
        assert!(t.to_csv().starts_with("metric,K,value\nHR,4,1\n"));
        let back: MetricTable = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }
}
