//! Test-time prediction over each origin's full observed destination set.
//!
//! Training samples at most max_destinations candidates; evaluation scores
//! every observed destination. Origins with more destinations than the cap
//! are scored in chunks (each chunk runs through the transformer on its own)
//! and a single softmax over the concatenated raw scores allocates the
//! outflow.

use crate::error::{FlowError, Result};
use crate::geodata::{Dataset, Flow, RegionTable};
use crate::model::{forward_origin, Mode, ModelConfig, ModelParams, OriginBatch};
use crate::par;
use crate::rng::StreamKey;
use crate::train::{normalize_features, NormStats};
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct Prediction {
    pub origin_id: String,
    pub dest_id: String,
    pub prob: f64,
    pub volume_pred: f64,
    pub volume_real: f64,
}

/// Scores one origin over all its observed destinations.
pub fn predict_origin(
    origin_id: &str,
    flows: &[&Flow],
    regions: &RegionTable,
    centroids: &[[f64; 2]],
    lambda_max: f64,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Prediction>> {
    if flows.is_empty() {
        return Err(FlowError::validation(format!("origin {origin_id:?} has no flows")));
    }
    let total: f64 = flows.iter().map(|f| f.volume).sum();
    if total <= 0.0 {
        return Err(FlowError::validation(format!("origin {origin_id:?} has zero outflow")));
    }
    let o_pos = regions
        .position(origin_id)
        .ok_or_else(|| FlowError::validation(format!("unknown origin {origin_id:?}")))?;
    let origin = regions.get(origin_id).unwrap();

    let cap = config.max_destinations;
    let mut scores: Vec<f64> = Vec::with_capacity(flows.len());
    for chunk in flows.chunks(cap) {
        let n = chunk.len();
        let mut batch = OriginBatch {
            origin_id: origin_id.to_string(),
            dest_ids: Vec::with_capacity(n),
            x_origin: origin.features.to_vec(),
            x_dest: Vec::with_capacity(n),
            r_norm: Vec::with_capacity(n),
            rl: Vec::with_capacity(n),
            // targets are unused at predict time; uniform keeps validation happy
            target: vec![1.0 / n as f64; n],
            mask: vec![true; n],
            total_outflow: total,
        };
        for f in chunk {
            let d_pos = regions.position(&f.dest_id).ok_or_else(|| {
                FlowError::validation(format!("unknown destination {:?}", f.dest_id))
            })?;
            let dest = regions.get(&f.dest_id).unwrap();
            let rl = [
                centroids[o_pos][0] - centroids[d_pos][0],
                centroids[o_pos][1] - centroids[d_pos][1],
            ];
            let r = (rl[0] * rl[0] + rl[1] * rl[1]).sqrt();
            batch.dest_ids.push(f.dest_id.clone());
            batch.x_dest.push(dest.features.to_vec());
            batch.r_norm.push(r / lambda_max);
            batch.rl.push(rl);
        }
        let out = forward_origin(&batch, params, config, Mode::Eval, StreamKey::new(0))?;
        scores.extend_from_slice(&out.scores);
    }

    // one softmax over all chunks
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(FlowError::numeric("degenerate score normalization"));
    }

    Ok(flows
        .iter()
        .zip(exps)
        .map(|(f, e)| {
            let p = e / z;
            Prediction {
                origin_id: origin_id.to_string(),
                dest_id: f.dest_id.clone(),
                prob: p,
                volume_pred: p * total,
                volume_real: f.volume,
            }
        })
        .collect())
}

/// Predictions for every origin in `origins`, in sorted origin order.
/// Features are normalized with the training statistics before scoring.
pub fn predict_dataset(
    dataset: &Dataset,
    origins: &BTreeSet<String>,
    params: &ModelParams,
    config: &ModelConfig,
    stats: &NormStats,
) -> Result<Vec<Prediction>> {
    let (regions, _) = normalize_features(&dataset.regions, Some(stats))?;
    let centroids = dataset.planar_centroids();
    let by_origin = dataset.flows_by_origin();
    let origin_list: Vec<&String> = origins.iter().collect();
    let results = par::map(&origin_list, |o| -> Result<Vec<Prediction>> {
        let flows = by_origin
            .get(*o)
            .ok_or_else(|| FlowError::validation(format!("origin {o:?} has no flows")))?;
        predict_origin(o, flows, &regions, &centroids, dataset.lambda_max, params, config)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// `origin_id,dest_id,volume_pred,volume_real` CSV.
pub fn write_predictions(path: impl AsRef<std::path::Path>, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["origin_id", "dest_id", "volume_pred", "volume_real"])?;
    for p in preds {
        w.write_record([
            p.origin_id.as_str(),
            p.dest_id.as_str(),
            &format!("{:.6}", p.volume_pred),
            &format!("{}", p.volume_real),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{synth_city, SynthConfig};
    use crate::locenc::EncoderConfig;

    fn tiny_model(lambda_max: f64, cap: usize) -> (ModelParams, ModelConfig) {
        let mut cfg = ModelConfig::new(lambda_max);
        cfg.d_geo = 12;
        cfg.encoder = EncoderConfig::new(1.0, lambda_max, 3, 4);
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.ffn_hidden = 8;
        cfg.dropout = 0.0;
        cfg.max_destinations = cap;
        let params = ModelParams::init(&cfg, StreamKey::new(3)).unwrap();
        (params, cfg)
    }

    #[test]
    fn volumes_sum_to_outflow_per_origin() {
        let ds = synth_city(&SynthConfig { n_regions: 36, ..SynthConfig::default() }, 4).unwrap();
        let (params, cfg) = tiny_model(ds.lambda_max, 256);
        let stats = NormStats::fit(&ds.regions.iter().collect::<Vec<_>>()).unwrap();
        let origins: BTreeSet<String> = ds.origins_with_flows().into_iter().collect();
        let preds = predict_dataset(&ds, &origins, &params, &cfg, &stats).unwrap();
        let mut by_origin: std::collections::BTreeMap<&str, (f64, f64)> = Default::default();
        for p in &preds {
            let e = by_origin.entry(&p.origin_id).or_default();
            e.0 += p.volume_pred;
            e.1 += p.volume_real;
        }
        for (o, (pred, real)) in by_origin {
            assert!((pred - real).abs() <= 1e-4 * real, "origin {o}: {pred} vs {real}");
        }
    }

    #[test]
    fn chunked_scoring_covers_every_destination() {
        // cap 8 forces chunking for origins with more destinations
        let ds = synth_city(
            &SynthConfig { n_regions: 64, mean_outflow: 200.0, ..SynthConfig::default() },
            6,
        )
        .unwrap();
        let (params, cfg) = tiny_model(ds.lambda_max, 8);
        let stats = NormStats::fit(&ds.regions.iter().collect::<Vec<_>>()).unwrap();
        let by_origin = ds.flows_by_origin();
        let (origin, flows) = by_origin
            .iter()
            .max_by_key(|(_, v)| v.len())
            .unwrap();
        assert!(flows.len() > 8, "need a chunked origin, got {}", flows.len());
        let (regions, _) = normalize_features(&ds.regions, Some(&stats)).unwrap();
        let centroids = ds.planar_centroids();
        let preds =
            predict_origin(origin, flows, &regions, &centroids, ds.lambda_max, &params, &cfg)
                .unwrap();
        assert_eq!(preds.len(), flows.len());
        let psum: f64 = preds.iter().map(|p| p.prob).sum();
        assert!((psum - 1.0).abs() < 1e-9);
        assert!(preds.iter().all(|p| p.prob > 0.0));
    }

    #[test]
    fn prediction_is_deterministic() {
        let ds = synth_city(&SynthConfig { n_regions: 25, ..SynthConfig::default() }, 8).unwrap();
        let (params, cfg) = tiny_model(ds.lambda_max, 256);
        let stats = NormStats::fit(&ds.regions.iter().collect::<Vec<_>>()).unwrap();
        let origins: BTreeSet<String> = ds.origins_with_flows().into_iter().collect();
        let a = predict_dataset(&ds, &origins, &params, &cfg, &stats).unwrap();
        let b = predict_dataset(&ds, &origins, &params, &cfg, &stats).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.origin_id, y.origin_id);
            assert_eq!(x.dest_id, y.dest_id);
            assert_eq!(x.volume_pred.to_bits(), y.volume_pred.to_bits());
        }
    }
}
