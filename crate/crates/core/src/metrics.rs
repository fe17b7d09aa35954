//! Flow comparison metrics over origin-destination pairs.
//!
//! All metrics run over the union of OD keys from both inputs; a pair
//! missing on one side counts as volume 0 there. CPC (common part of
//! commuters) is 2 * sum(min) / (sum(pred) + sum(real)).

use crate::error::{FlowError, Result};
use crate::predict::Prediction;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub type OdMap = BTreeMap<(String, String), f64>;

/// Collapses predictions into (pred, real) OD maps.
pub fn od_maps(preds: &[Prediction]) -> (OdMap, OdMap) {
    let mut pred = OdMap::new();
    let mut real = OdMap::new();
    for p in preds {
        let k = (p.origin_id.clone(), p.dest_id.clone());
        *pred.entry(k.clone()).or_insert(0.0) += p.volume_pred;
        *real.entry(k).or_insert(0.0) += p.volume_real;
    }
    (pred, real)
}

fn union_pairs<'a>(a: &'a OdMap, b: &'a OdMap) -> Vec<(f64, f64)> {
    let mut keys: Vec<&(String, String)> = a.keys().collect();
    keys.extend(b.keys().filter(|k| !a.contains_key(*k)));
    keys.sort();
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0), b.get(k).copied().unwrap_or(0.0)))
        .collect()
}

pub fn cpc(pred: &OdMap, real: &OdMap) -> Result<f64> {
    let pairs = union_pairs(pred, real);
    let (mut mins, mut total) = (0.0, 0.0);
    for (p, r) in &pairs {
        if !p.is_finite() || !r.is_finite() || *p < 0.0 || *r < 0.0 {
            return Err(FlowError::validation("cpc requires finite nonnegative volumes"));
        }
        mins += p.min(*r);
        total += p + r;
    }
    if total == 0.0 {
        return Err(FlowError::validation("cpc undefined: both flow sets are all zero"));
    }
    Ok(2.0 * mins / total)
}

pub fn mae(pred: &OdMap, real: &OdMap) -> Result<f64> {
    let pairs = union_pairs(pred, real);
    if pairs.is_empty() {
        return Err(FlowError::validation("mae over empty flow sets"));
    }
    Ok(pairs.iter().map(|(p, r)| (p - r).abs()).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(pred: &OdMap, real: &OdMap) -> Result<f64> {
    let pairs = union_pairs(pred, real);
    if pairs.is_empty() {
        return Err(FlowError::validation("rmse over empty flow sets"));
    }
    let mse = pairs.iter().map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub split: String,
    pub cpc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_pairs: usize,
}

impl EvalReport {
    pub fn compute(
        model: impl Into<String>,
        dataset: impl Into<String>,
        split: impl Into<String>,
        pred: &OdMap,
        real: &OdMap,
    ) -> Result<Self> {
        Ok(EvalReport {
            model: model.into(),
            dataset: dataset.into(),
            split: split.into(),
            cpc: cpc(pred, real)?,
            mae: mae(pred, real)?,
            rmse: rmse(pred, real)?,
            n_pairs: union_pairs(pred, real).len(),
        })
    }
}

/// Appends report rows to a CSV, writing the header when the file is new.
pub fn write_report(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "model,dataset,split,cpc,mae,rmse,n_pairs")?;
    }
    for r in reports {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            r.model, r.dataset, r.split, r.cpc, r.mae, r.rmse, r.n_pairs
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use rand::Rng;

    fn map(entries: &[(&str, &str, f64)]) -> OdMap {
        entries
            .iter()
            .map(|(o, d, v)| ((o.to_string(), d.to_string()), *v))
            .collect()
    }

    #[test]
    fn cpc_hand_value() {
        // mins = 1 + 2 = 3, total = (1+3) + (4+2) = 10 -> 0.6
        let a = map(&[("a", "x", 1.0), ("a", "y", 3.0)]);
        let b = map(&[("a", "x", 4.0), ("a", "y", 2.0)]);
        assert!((cpc(&a, &b).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cpc_disjoint_supports_is_zero() {
        let a = map(&[("a", "x", 2.0)]);
        let b = map(&[("a", "y", 2.0)]);
        assert_eq!(cpc(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cpc_identical_is_one() {
        let a = map(&[("a", "x", 2.0), ("b", "y", 5.0)]);
        assert!((cpc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cpc_double_is_two_thirds() {
        let a = map(&[("a", "x", 3.0), ("b", "y", 7.0)]);
        let twice: OdMap = a.iter().map(|(k, v)| (k.clone(), 2.0 * v)).collect();
        assert!((cpc(&twice, &a).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cpc_all_zero_errors() {
        let a = map(&[("a", "x", 0.0)]);
        let b = map(&[("a", "y", 0.0)]);
        assert!(cpc(&a, &b).is_err());
    }

    #[test]
    fn mae_rmse_hand_values() {
        // errors 1 and 1 -> mae 1, rmse 1; errors 0 and 2 -> mae 1, rmse sqrt(2)
        let a = map(&[("a", "x", 1.0), ("a", "y", 3.0)]);
        let b = map(&[("a", "x", 2.0), ("a", "y", 2.0)]);
        assert!((mae(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = map(&[("a", "x", 1.0), ("a", "y", 4.0)]);
        let d = map(&[("a", "x", 1.0), ("a", "y", 2.0)]);
        assert!((mae(&c, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&c, &d).unwrap() - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_pairs_count_as_zero() {
        let a = map(&[("a", "x", 4.0)]);
        let b = map(&[("a", "y", 4.0)]);
        // union has 2 pairs with errors 4 and 4
        assert!((mae(&a, &b).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_rmse_dominates_mae() {
        let mut rng = StreamKey::new(77).rng();
        for _ in 0..50 {
            let mut a = OdMap::new();
            let mut b = OdMap::new();
            for i in 0..20 {
                let k = (format!("o{}", i % 5), format!("d{i}"));
                if rng.gen::<f64>() < 0.8 {
                    a.insert(k.clone(), rng.gen::<f64>() * 10.0);
                }
                if rng.gen::<f64>() < 0.8 {
                    b.insert(k, rng.gen::<f64>() * 10.0);
                }
            }
            if a.is_empty() && b.is_empty() {
                continue;
            }
            let (m1, m2) = (mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            let (r1, r2) = (rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            let (c1, c2) = (cpc(&a, &b).unwrap(), cpc(&b, &a).unwrap());
            assert!((m1 - m2).abs() < 1e-12);
            assert!((r1 - r2).abs() < 1e-12);
            assert!((c1 - c2).abs() < 1e-12);
            assert!(r1 + 1e-12 >= m1);
            assert!((0.0..=1.0).contains(&c1));
        }
    }

    #[test]
    fn report_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let a = map(&[("a", "x", 1.0)]);
        let r = EvalReport::compute("grav", "city", "test", &a, &a).unwrap();
        write_report(&path, std::slice::from_ref(&r)).unwrap();
        write_report(&path, &[r]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "model,dataset,split,cpc,mae,rmse,n_pairs");
        assert_eq!(lines[1], lines[2]);
        assert!(lines[1].starts_with("grav,city,test,1.000000,0.000000,0.000000,1"));
    }
}
