//! Synthetic city generator with a known anisotropic ground truth.
//!
//! Regions sit on a jittered grid in planar meters. The ground-truth
//! destination distribution for origin i is
//!
//! ```text
//! P(j|i) ∝ m_j^beta0 * exp(-gamma0 * (1 + eps*cos(2*(theta_ij - theta0))) * r_ij / r_mean)
//! ```
//!
//! where m_j is destination population, theta_ij the bearing of the relative
//! location (origin minus destination), and r_mean the mean pairwise
//! distance. Volumes are drawn multinomially per origin. Generation is fully
//! determined by (config, seed).

use super::{relative_location, CrsMode, Dataset, Flow, Region, RegionTable, N_FEATURES};
use crate::error::{FlowError, Result};
use crate::rng::StreamKey;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_regions: usize,
    /// side of the square study area, meters
    pub extent_m: f64,
    /// ground-truth mass exponent beta0
    pub mass_exponent: f64,
    /// ground-truth base decay gamma0 (per mean pairwise distance)
    pub base_decay: f64,
    /// anisotropy strength eps in [0, 1)
    pub anisotropy: f64,
    /// anisotropy axis theta0, radians
    pub anisotropy_axis: f64,
    /// expected total outflow per origin
    pub mean_outflow: f64,
    /// log-normal population parameters (of ln population)
    pub population_log_mean: f64,
    pub population_log_sd: f64,
    /// Poisson rate for each of the 19 amenity counts
    pub feature_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_regions: 100,
            extent_m: 10_000.0,
            mass_exponent: 1.0,
            base_decay: 2.0,
            anisotropy: 0.0,
            anisotropy_axis: 0.0,
            mean_outflow: 50.0,
            population_log_mean: 6.0,
            population_log_sd: 0.8,
            feature_rate: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 4 {
            return Err(FlowError::validation(format!(
                "n_regions must be >= 4, got {}",
                self.n_regions
            )));
        }
        if self.extent_m <= 0.0 {
            return Err(FlowError::validation("extent_m must be positive"));
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return Err(FlowError::validation(format!(
                "anisotropy must be in [0,1), got {}",
                self.anisotropy
            )));
        }
        if self.mean_outflow <= 0.0 {
            return Err(FlowError::validation("mean_outflow must be positive"));
        }
        if self.base_decay < 0.0 {
            return Err(FlowError::validation("base_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Ground-truth destination probabilities for one origin, over all other
/// regions in position order. Exposed so tests can compare the generated
/// sample against the exact law.
pub fn ground_truth_probs(
    centroids: &[[f64; 2]],
    populations: &[f64],
    origin: usize,
    config: &SynthConfig,
    mean_distance: f64,
) -> Vec<f64> {
    let n = centroids.len();
    let mut w = vec![0.0; n];
    let mut sum = 0.0;
    for j in 0..n {
        if j == origin {
            continue;
        }
        let rl = relative_location(centroids[origin], centroids[j]).unwrap();
        let r = (rl[0] * rl[0] + rl[1] * rl[1]).sqrt();
        let theta = rl[1].atan2(rl[0]);
        let decay = config.base_decay
            * (1.0 + config.anisotropy * (2.0 * (theta - config.anisotropy_axis)).cos());
        let weight = populations[j].powf(config.mass_exponent) * (-decay * r / mean_distance).exp();
        w[j] = weight;
        sum += weight;
    }
    for x in &mut w {
        *x /= sum;
    }
    w
}

pub fn synth_city(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_regions;
    let key = StreamKey::new(seed).with_str("synth");

    // jittered grid placement
    let side = (n as f64).sqrt().ceil() as usize;
    let cell = config.extent_m / side as f64;
    let mut pos_rng = key.with_str("positions").rng();
    let mut centroids = Vec::with_capacity(n);
    for i in 0..n {
        let gx = (i % side) as f64;
        let gy = (i / side) as f64;
        let jx = (pos_rng.gen::<f64>() - 0.5) * 0.7 * cell;
        let jy = (pos_rng.gen::<f64>() - 0.5) * 0.7 * cell;
        centroids.push([(gx + 0.5) * cell + jx, (gy + 0.5) * cell + jy]);
    }

    // features: population log-normal, amenity counts Poisson
    let mut feat_rng = key.with_str("features").rng();
    let lognorm = LogNormal::new(config.population_log_mean, config.population_log_sd)
        .map_err(|e| FlowError::validation(format!("population law: {e}")))?;
    let poisson = Poisson::new(config.feature_rate.max(1e-9))
        .map_err(|e| FlowError::validation(format!("feature law: {e}")))?;
    let mut regions = Vec::with_capacity(n);
    for (i, &c) in centroids.iter().enumerate() {
        let mut features = [0.0; N_FEATURES];
        features[0] = lognorm.sample(&mut feat_rng).round().max(1.0);
        for f in features.iter_mut().skip(1) {
            *f = poisson.sample(&mut feat_rng).round();
        }
        regions.push(Region {
            id: format!("R{i}"),
            centroid: c,
            features,
        });
    }
    let populations: Vec<f64> = regions.iter().map(|r| r.population()).collect();

    // mean pairwise distance
    let mut dist_sum = 0.0;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = centroids[i][0] - centroids[j][0];
            let dy = centroids[i][1] - centroids[j][1];
            dist_sum += (dx * dx + dy * dy).sqrt();
            pairs += 1;
        }
    }
    let mean_distance = dist_sum / pairs as f64;

    // per-origin multinomial draws from the ground-truth law
    let mut flows = Vec::new();
    for i in 0..n {
        let probs = ground_truth_probs(&centroids, &populations, i, config, mean_distance);
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cum.push(acc);
        }
        let mut rng = key.with_str("draws").with(i as u64).rng();
        let total = Poisson::new(config.mean_outflow)
            .map_err(|e| FlowError::validation(format!("outflow law: {e}")))?
            .sample(&mut rng) as u64;
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for _ in 0..total {
            let u = rng.gen::<f64>() * acc;
            let j = cum.partition_point(|&c| c < u).min(n - 1);
            *counts.entry(j).or_default() += 1;
        }
        for (j, c) in counts {
            flows.push(Flow {
                origin_id: format!("R{i}"),
                dest_id: format!("R{j}"),
                volume: c as f64,
            });
        }
    }

    Dataset::new(RegionTable::new(regions)?, flows, CrsMode::Planar)
}
