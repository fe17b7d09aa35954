//! Data model, geometry, and dataset handling.
//!
//! Regions carry a centroid and 20 place features (population plus 19
//! amenity counts). Flows are (origin, destination, volume) triples. All
//! tables are immutable after load and safe to share across threads.

pub mod csvio;
pub mod synth;

pub use csvio::{
    load_flows, load_regions, load_split, save_flows, save_regions, save_split, REGIONS_HEADER,
};
pub use synth::{synth_city, SynthConfig};

use crate::error::{FlowError, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

pub const N_FEATURES: usize = 20;

/// Mean earth radius, meters (haversine).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrsMode {
    Planar,
    Geodesic,
}

impl std::str::FromStr for CrsMode {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(CrsMode::Planar),
            "geodesic" => Ok(CrsMode::Geodesic),
            other => Err(FlowError::validation(format!("unknown crs mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Region {
    pub id: String,
    /// planar meters, or lon/lat degrees in geodesic mode
    pub centroid: [f64; 2],
    /// index 0 = population, 1..19 = amenity counts
    pub features: [f64; N_FEATURES],
}

impl Region {
    pub fn population(&self) -> f64 {
        self.features[0]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.centroid.iter().all(|v| v.is_finite()) {
            return Err(FlowError::validation(format!(
                "region {:?}: non-finite centroid",
                self.id
            )));
        }
        if let Some(f) = self.features.iter().find(|f| **f < 0.0 || !f.is_finite()) {
            return Err(FlowError::validation(format!(
                "region {:?}: invalid feature value {f}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub origin_id: String,
    pub dest_id: String,
    pub volume: f64,
}

/// Region table with an id index.
#[derive(Debug, Clone, Default)]
pub struct RegionTable {
    regions: Vec<Region>,
    index: HashMap<String, usize>,
}

impl RegionTable {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let mut index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            r.validate()?;
            if index.insert(r.id.clone(), i).is_some() {
                return Err(FlowError::validation(format!("duplicate region id {:?}", r.id)));
            }
        }
        Ok(RegionTable { regions, index })
    }

    /// Builds a table from already-normalized regions, whose features may
    /// legitimately be negative. Ids must still be unique.
    pub fn from_normalized(regions: Vec<Region>) -> Self {
        let mut index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            let prev = index.insert(r.id.clone(), i);
            debug_assert!(prev.is_none(), "duplicate region id {:?}", r.id);
        }
        RegionTable { regions, index }
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.index.get(id).map(|&i| &self.regions[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub regions: RegionTable,
    pub flows: Vec<Flow>,
    pub crs_mode: CrsMode,
    /// maximum pairwise centroid distance of the study area, meters
    pub lambda_max: f64,
}

impl Dataset {
    /// Builds a dataset, validating flow endpoints and computing lambda_max
    /// from the actual centroid geometry.
    pub fn new(regions: RegionTable, flows: Vec<Flow>, crs_mode: CrsMode) -> Result<Self> {
        let mut seen: HashSet<(String, String)> = HashSet::with_capacity(flows.len());
        for f in &flows {
            if regions.get(&f.origin_id).is_none() {
                return Err(FlowError::validation(format!("unknown origin {:?}", f.origin_id)));
            }
            if regions.get(&f.dest_id).is_none() {
                return Err(FlowError::validation(format!("unknown destination {:?}", f.dest_id)));
            }
            if f.volume < 0.0 || !f.volume.is_finite() {
                return Err(FlowError::validation(format!(
                    "flow {:?}->{:?}: negative or non-finite volume {}",
                    f.origin_id, f.dest_id, f.volume
                )));
            }
            if !seen.insert((f.origin_id.clone(), f.dest_id.clone())) {
                return Err(FlowError::validation(format!(
                    "duplicate flow {:?}->{:?}",
                    f.origin_id, f.dest_id
                )));
            }
        }
        let mut lambda_max: f64 = 0.0;
        let rs = regions.regions();
        for i in 0..rs.len() {
            for j in (i + 1)..rs.len() {
                let d = distance(rs[i].centroid, rs[j].centroid, crs_mode)?;
                lambda_max = lambda_max.max(d);
            }
        }
        Ok(Dataset {
            regions,
            flows,
            crs_mode,
            lambda_max,
        })
    }

    /// Centroids expressed in planar meters. Planar datasets pass through;
    /// geodesic coordinates go through a local equirectangular projection
    /// about the study-area centroid.
    pub fn planar_centroids(&self) -> Vec<[f64; 2]> {
        match self.crs_mode {
            CrsMode::Planar => self.regions.iter().map(|r| r.centroid).collect(),
            CrsMode::Geodesic => {
                let n = self.regions.len() as f64;
                let lat0: f64 = self.regions.iter().map(|r| r.centroid[1]).sum::<f64>() / n;
                let lon0: f64 = self.regions.iter().map(|r| r.centroid[0]).sum::<f64>() / n;
                let lat0r = lat0.to_radians();
                self.regions
                    .iter()
                    .map(|r| {
                        let dlon = (r.centroid[0] - lon0).to_radians();
                        let dlat = (r.centroid[1] - lat0).to_radians();
                        [EARTH_RADIUS_M * dlon * lat0r.cos(), EARTH_RADIUS_M * dlat]
                    })
                    .collect()
            }
        }
    }

    /// Origins that have at least one flow, sorted.
    pub fn origins_with_flows(&self) -> Vec<String> {
        let mut set: BTreeSet<&str> = BTreeSet::new();
        for f in &self.flows {
            set.insert(&f.origin_id);
        }
        set.into_iter().map(|s| s.to_string()).collect()
    }

    /// Flows grouped by origin, destinations in input order.
    pub fn flows_by_origin(&self) -> BTreeMap<String, Vec<&Flow>> {
        let mut map: BTreeMap<String, Vec<&Flow>> = BTreeMap::new();
        for f in &self.flows {
            map.entry(f.origin_id.clone()).or_default().push(f);
        }
        map
    }
}

/// Distance in meters between two locations.
///
/// Planar mode is the Euclidean norm; geodesic mode is the haversine formula
/// on the mean earth radius with locations given as (lon, lat) degrees.
pub fn distance(a: [f64; 2], b: [f64; 2], crs_mode: CrsMode) -> Result<f64> {
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(FlowError::validation("non-finite coordinates"));
    }
    match crs_mode {
        CrsMode::Planar => Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()),
        CrsMode::Geodesic => {
            for p in [a, b] {
                if p[1].abs() > 90.0 {
                    return Err(FlowError::validation(format!("latitude {} out of range", p[1])));
                }
            }
            let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
            let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
            let dlat = lat2 - lat1;
            let dlon = lon2 - lon1;
            let s = (dlat / 2.0).sin().powi(2)
                + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
            Ok(2.0 * EARTH_RADIUS_M * s.sqrt().asin())
        }
    }
}

/// Componentwise origin minus destination, planar meters.
pub fn relative_location(loc_o: [f64; 2], loc_d: [f64; 2]) -> Result<[f64; 2]> {
    if !loc_o.iter().chain(loc_d.iter()).all(|v| v.is_finite()) {
        return Err(FlowError::validation("non-finite coordinates"));
    }
    Ok([loc_o[0] - loc_d[0], loc_o[1] - loc_d[1]])
}

/// Sum of volumes of all flows leaving `origin_id`; zero if the origin has
/// no flows.
pub fn total_outflow(flows: &[Flow], regions: &RegionTable, origin_id: &str) -> Result<f64> {
    if regions.get(origin_id).is_none() {
        return Err(FlowError::validation(format!("unknown origin {origin_id:?}")));
    }
    Ok(flows
        .iter()
        .filter(|f| f.origin_id == origin_id)
        .map(|f| f.volume)
        .sum())
}

#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub train_origins: BTreeSet<String>,
    pub val_origins: BTreeSet<String>,
    pub test_origins: BTreeSet<String>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn of(&self, origin: &str) -> Option<&'static str> {
        if self.train_origins.contains(origin) {
            Some("train")
        } else if self.val_origins.contains(origin) {
            Some("val")
        } else if self.test_origins.contains(origin) {
            Some("test")
        } else {
            None
        }
    }

    pub fn origins_for(&self, split: &str) -> Option<&BTreeSet<String>> {
        match split {
            "train" => Some(&self.train_origins),
            "val" => Some(&self.val_origins),
            "test" => Some(&self.test_origins),
            _ => None,
        }
    }
}

/// Deterministic per-origin split. Origin counts per split are the rounded
/// ratio shares; when rounding leaves a split empty, one origin moves over
/// from the largest split so every split is usable.
pub fn split_by_origin(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(FlowError::validation("split ratios must be positive and sum to 1"));
    }
    let mut origins = dataset.origins_with_flows();
    if origins.len() < 3 {
        return Err(FlowError::validation(format!(
            "need at least 3 origins with flows, have {}",
            origins.len()
        )));
    }
    let n = origins.len();
    let mut rng = stream(seed, "split");
    origins.shuffle(&mut rng);

    let mut n_train = (r0 * n as f64).round() as usize;
    let mut n_val = (r1 * n as f64).round() as usize;
    if n_train + n_val > n {
        n_train = n - n_val.min(n);
    }
    let mut n_test = n - n_train - n_val;
    // keep every split nonempty
    loop {
        if n_val == 0 && n_train > 1 {
            n_train -= 1;
            n_val += 1;
        } else if n_test == 0 && n_train > 1 {
            n_train -= 1;
            n_test += 1;
        } else if n_train == 0 {
            n_train += 1;
            n_test -= 1;
        } else {
            break;
        }
    }

    let train_origins = origins[..n_train].iter().cloned().collect();
    let val_origins = origins[n_train..n_train + n_val].iter().cloned().collect();
    let test_origins = origins[n_train + n_val..].iter().cloned().collect();
    Ok(SplitAssignment {
        train_origins,
        val_origins,
        test_origins,
        seed,
    })
}
