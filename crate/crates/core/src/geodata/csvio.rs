//! CSV ingestion and export for region and flow tables.

use super::{Flow, Region, RegionTable, SplitAssignment, N_FEATURES};
use crate::error::{FlowError, Result};
use std::path::Path;

pub const REGIONS_HEADER: [&str; 23] = [
    "region_id",
    "x",
    "y",
    "population",
    "food_pt_amenity",
    "food_pt_shop",
    "food_poly_amenity",
    "food_poly_shop",
    "retail_pt_amenity",
    "retail_pt_shop",
    "retail_poly_amenity",
    "retail_poly_shop",
    "edu_pt_amenity",
    "edu_poly_amenity",
    "edu_poly_building",
    "health_pt_amenity",
    "health_poly_amenity",
    "health_poly_building",
    "transport_pt_amenity",
    "transport_pt_public",
    "transport_poly_amenity",
    "transport_poly_building",
    "transport_poly_public",
];

pub const FLOWS_HEADER: [&str; 3] = ["origin_id", "dest_id", "volume"];

fn parse_f64(field: &str, path: &str, line: u64, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| FlowError::Parse {
        path: path.to_string(),
        line,
        msg: format!("cannot parse {what} from {field:?}"),
    })
}

/// Loads the regions table; the header must match [`REGIONS_HEADER`] exactly.
pub fn load_regions(path: impl AsRef<Path>) -> Result<RegionTable> {
    let path_str = path.as_ref().display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    let expect: Vec<&str> = REGIONS_HEADER.to_vec();
    let got: Vec<&str> = header.iter().collect();
    if got != expect {
        return Err(FlowError::Parse {
            path: path_str,
            line: 1,
            msg: format!("header mismatch: expected {} columns of the documented schema, got {:?}", expect.len(), got),
        });
    }
    let mut regions = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let record = record?;
        if record.len() != 3 + N_FEATURES {
            return Err(FlowError::Parse {
                path: path_str.clone(),
                line,
                msg: format!("expected {} columns, got {}", 3 + N_FEATURES, record.len()),
            });
        }
        let id = record[0].to_string();
        let x = parse_f64(&record[1], &path_str, line, "x")?;
        let y = parse_f64(&record[2], &path_str, line, "y")?;
        let mut features = [0.0; N_FEATURES];
        for (k, f) in features.iter_mut().enumerate() {
            *f = parse_f64(&record[3 + k], &path_str, line, REGIONS_HEADER[3 + k])?;
        }
        regions.push(Region {
            id,
            centroid: [x, y],
            features,
        });
    }
    RegionTable::new(regions)
}

/// Loads flows, validating every endpoint against an already-loaded region
/// table. Duplicate (origin, destination) pairs and negative volumes are
/// rejected.
pub fn load_flows(path: impl AsRef<Path>, regions: &RegionTable) -> Result<Vec<Flow>> {
    let path_str = path.as_ref().display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != FLOWS_HEADER.to_vec() {
        return Err(FlowError::Parse {
            path: path_str,
            line: 1,
            msg: format!("header mismatch: expected {FLOWS_HEADER:?}, got {header:?}"),
        });
    }
    let mut flows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let record = record?;
        if record.len() != 3 {
            return Err(FlowError::Parse {
                path: path_str.clone(),
                line,
                msg: format!("expected 3 columns, got {}", record.len()),
            });
        }
        let origin_id = record[0].to_string();
        let dest_id = record[1].to_string();
        let volume = parse_f64(&record[2], &path_str, line, "volume")?;
        if regions.get(&origin_id).is_none() {
            return Err(FlowError::validation(format!("unknown region {origin_id:?} at line {line}")));
        }
        if regions.get(&dest_id).is_none() {
            return Err(FlowError::validation(format!("unknown region {dest_id:?} at line {line}")));
        }
        if volume < 0.0 {
            return Err(FlowError::validation(format!(
                "negative volume {volume} for {origin_id:?}->{dest_id:?} at line {line}"
            )));
        }
        if !seen.insert((origin_id.clone(), dest_id.clone())) {
            return Err(FlowError::validation(format!(
                "duplicate flow {origin_id:?}->{dest_id:?} at line {line}"
            )));
        }
        flows.push(Flow {
            origin_id,
            dest_id,
            volume,
        });
    }
    Ok(flows)
}

pub fn save_regions(path: impl AsRef<Path>, regions: &RegionTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(REGIONS_HEADER)?;
    for r in regions.iter() {
        let mut rec = vec![r.id.clone(), r.centroid[0].to_string(), r.centroid[1].to_string()];
        rec.extend(r.features.iter().map(|f| f.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_flows(path: impl AsRef<Path>, flows: &[Flow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(FLOWS_HEADER)?;
    for f in flows {
        w.write_record([f.origin_id.as_str(), f.dest_id.as_str(), &f.volume.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `origin_id,split` manifest; rows in sorted origin order.
pub fn save_split(path: impl AsRef<Path>, split: &SplitAssignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["origin_id", "split"])?;
    let mut rows: Vec<(&String, &str)> = Vec::new();
    rows.extend(split.train_origins.iter().map(|o| (o, "train")));
    rows.extend(split.val_origins.iter().map(|o| (o, "val")));
    rows.extend(split.test_origins.iter().map(|o| (o, "test")));
    rows.sort();
    for (o, s) in rows {
        w.write_record([o.as_str(), s])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path_str = path.as_ref().display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != vec!["origin_id", "split"] {
        return Err(FlowError::Parse {
            path: path_str,
            line: 1,
            msg: format!("header mismatch: expected [origin_id, split], got {header:?}"),
        });
    }
    let mut split = SplitAssignment {
        train_origins: Default::default(),
        val_origins: Default::default(),
        test_origins: Default::default(),
        seed: 0,
    };
    for (i, record) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let record = record?;
        let origin = record[0].to_string();
        let set = match &record[1] {
            "train" => &mut split.train_origins,
            "val" => &mut split.val_origins,
            "test" => &mut split.test_origins,
            other => {
                return Err(FlowError::Parse {
                    path: path_str,
                    line,
                    msg: format!("unknown split name {other:?}"),
                })
            }
        };
        if !set.insert(origin.clone()) {
            return Err(FlowError::validation(format!(
                "origin {origin:?} listed twice in split manifest"
            )));
        }
    }
    Ok(split)
}
