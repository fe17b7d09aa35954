//! Explainability exports: relative-location residual grids, flow-to-flow
//! attention maps with influencer extraction, and hierarchical clustering of
//! the learned relative-location embedding over a spatial grid.

use crate::error::{FlowError, Result};
use crate::geodata::Dataset;
use crate::locenc::{rle_forward, rle_prime_forward, EncoderConfig, RleParams, RleVars};
use crate::model::{forward_origin, Mode, ModelConfig, ModelParams, OriginBatch};
use crate::nn::{Tape, Tensor};
use crate::par;
use crate::predict::Prediction;
use crate::rng::StreamKey;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

pub const DEFAULT_CELL_SIZE_M: f64 = 20.0;

/// Mean residual (real - predicted) per relative-location cell. Cells are
/// square, the extent is [-lambda_max, lambda_max] on both axes, and empty
/// cells are absent from the map.
#[derive(Debug, Clone)]
pub struct ResidualGrid {
    pub cell_size: f64,
    /// half-width of the extent in meters
    pub extent: f64,
    /// (ix, iy) -> (mean residual, flow count)
    pub cells: BTreeMap<(i64, i64), (f64, usize)>,
    /// flows whose relative location fell outside the extent and were
    /// clamped to the boundary cell
    pub clamped: usize,
}

impl ResidualGrid {
    pub fn n_cells_per_axis(&self) -> i64 {
        (2.0 * self.extent / self.cell_size).ceil() as i64
    }

    pub fn cell_center(&self, ix: i64, iy: i64) -> [f64; 2] {
        [
            -self.extent + (ix as f64 + 0.5) * self.cell_size,
            -self.extent + (iy as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Sum over cells of mean * count; equals the total residual of the
    /// contributing flows.
    pub fn total_mass(&self) -> f64 {
        self.cells.values().map(|(m, c)| m * *c as f64).sum()
    }
}

fn cell_index(v: f64, extent: f64, cell_size: f64, n: i64) -> (i64, bool) {
    let raw = ((v + extent) / cell_size).floor() as i64;
    let clamped = raw.clamp(0, n - 1);
    (clamped, raw != clamped)
}

/// Bins each prediction's residual by the flow's relative location
/// (origin centroid minus destination centroid).
pub fn residual_grid(
    preds: &[Prediction],
    dataset: &Dataset,
    cell_size: f64,
) -> Result<ResidualGrid> {
    if cell_size <= 0.0 || !cell_size.is_finite() {
        return Err(FlowError::validation("cell_size must be positive"));
    }
    let extent = dataset.lambda_max;
    let centroids = dataset.planar_centroids();
    let n = (2.0 * extent / cell_size).ceil() as i64;
    let mut sums: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    let mut clamped = 0usize;
    for p in preds {
        let o = dataset
            .regions
            .position(&p.origin_id)
            .ok_or_else(|| FlowError::validation(format!("unknown origin {:?}", p.origin_id)))?;
        let d = dataset
            .regions
            .position(&p.dest_id)
            .ok_or_else(|| FlowError::validation(format!("unknown destination {:?}", p.dest_id)))?;
        let rl = [centroids[o][0] - centroids[d][0], centroids[o][1] - centroids[d][1]];
        let (ix, cx) = cell_index(rl[0], extent, cell_size, n);
        let (iy, cy) = cell_index(rl[1], extent, cell_size, n);
        if cx || cy {
            clamped += 1;
        }
        let e = sums.entry((ix, iy)).or_insert((0.0, 0));
        e.0 += p.volume_real - p.volume_pred;
        e.1 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|(k, (s, c))| (k, (s / c as f64, c)))
        .collect();
    Ok(ResidualGrid { cell_size, extent, cells, clamped })
}

/// Cellwise difference of two residual grids with matching geometry.
#[derive(Debug, Clone)]
pub struct ResidualDiffGrid {
    pub cell_size: f64,
    pub extent: f64,
    /// (ix, iy) -> (a - b where both occupied, else the present side's mean,
    /// occupied-in-a, occupied-in-b)
    pub cells: BTreeMap<(i64, i64), (f64, bool, bool)>,
}

pub fn residual_diff_grid(a: &ResidualGrid, b: &ResidualGrid) -> Result<ResidualDiffGrid> {
    if a.cell_size != b.cell_size || a.extent != b.extent {
        return Err(FlowError::validation("residual grids have different geometry"));
    }
    let mut cells = BTreeMap::new();
    for (&k, &(ma, _)) in &a.cells {
        match b.cells.get(&k) {
            Some(&(mb, _)) => cells.insert(k, (ma - mb, true, true)),
            None => cells.insert(k, (ma, true, false)),
        };
    }
    for (&k, &(mb, _)) in &b.cells {
        cells.entry(k).or_insert((mb, false, true));
    }
    Ok(ResidualDiffGrid { cell_size: a.cell_size, extent: a.extent, cells })
}

/// Layer-and-head averaged attention over one origin's candidate flows.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub origin_id: String,
    /// unmasked destination ids, row and column order of `matrix`
    pub dest_ids: Vec<String>,
    /// n x n, rows sum to 1 over the unmasked candidates
    pub matrix: Tensor,
    /// (region id, mean incoming attention), descending score
    pub influencers: Vec<(String, f64)>,
}

/// Runs the model in eval mode and averages attention uniformly over layers
/// and heads. The influencer score of column j is the column mean over rows.
pub fn attention_map(
    batch: &OriginBatch,
    params: &ModelParams,
    config: &ModelConfig,
    top_k: usize,
) -> Result<AttentionMap> {
    let out = forward_origin(batch, params, config, Mode::Eval, StreamKey::new(0))?;
    let n_mats: usize = out.attentions.iter().map(|heads| heads.len()).sum();
    if n_mats == 0 {
        return Err(FlowError::validation(
            "model has no attention layers (feedforward-only variant)",
        ));
    }
    let active: Vec<usize> =
        (0..batch.n_slots()).filter(|&i| batch.mask[i]).collect();
    let n = active.len();
    let slots = batch.n_slots();
    let mut mean = vec![0.0; n * n];
    for heads in &out.attentions {
        for h in heads {
            if h.shape() != [slots, slots] {
                return Err(FlowError::shape("attention matrix shape mismatch"));
            }
            let d = h.data();
            for (r, &sr) in active.iter().enumerate() {
                for (c, &sc) in active.iter().enumerate() {
                    mean[r * n + c] += d[sr * slots + sc];
                }
            }
        }
    }
    for v in &mut mean {
        *v /= n_mats as f64;
    }

    let dest_ids: Vec<String> = active.iter().map(|&i| batch.dest_ids[i].clone()).collect();
    let mut scored: Vec<(String, f64)> = (0..n)
        .map(|c| {
            let col_mean = (0..n).map(|r| mean[r * n + c]).sum::<f64>() / n as f64;
            (dest_ids[c].clone(), col_mean)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(top_k);

    Ok(AttentionMap {
        origin_id: batch.origin_id.clone(),
        dest_ids,
        matrix: Tensor::matrix(n, n, mean)?,
        influencers: scored,
    })
}

/// Cluster labels over a grid_n x grid_n grid of relative locations spanning
/// [-lambda_max, lambda_max] on both axes, row-major with iy varying fastest.
#[derive(Debug, Clone)]
pub struct ClusterGrid {
    pub grid_n: usize,
    pub extent: f64,
    pub k: usize,
    /// label per cell, `grid_n * grid_n` entries in [0, k)
    pub labels: Vec<usize>,
    /// all embeddings were identical; a single cluster was returned
    pub degenerate: bool,
}

impl ClusterGrid {
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let step = 2.0 * self.extent / self.grid_n as f64;
        [
            -self.extent + (ix as f64 + 0.5) * step,
            -self.extent + (iy as f64 + 0.5) * step,
        ]
    }

    pub fn label(&self, ix: usize, iy: usize) -> usize {
        self.labels[ix * self.grid_n + iy]
    }
}

/// Grid cell centers in the label array's order.
pub fn grid_points(grid_n: usize, extent: f64) -> Vec<[f64; 2]> {
    let step = 2.0 * extent / grid_n as f64;
    let mut pts = Vec::with_capacity(grid_n * grid_n);
    for ix in 0..grid_n {
        for iy in 0..grid_n {
            pts.push([
                -extent + (ix as f64 + 0.5) * step,
                -extent + (iy as f64 + 0.5) * step,
            ]);
        }
    }
    pts
}

/// Evaluates the relative-location encoder on every grid cell center.
pub fn grid_embeddings(
    rle: &RleParams,
    config: &EncoderConfig,
    points: &[[f64; 2]],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = RleVars::from_params(&mut tape, rle);
    let out = if rle.branch_b.is_some() {
        rle_forward(&mut tape, points, config, &vars)?
    } else {
        rle_prime_forward(&mut tape, points, config, &vars)?
    };
    Ok(tape.val(out).clone())
}

/// Ward-linkage agglomerative clustering of embedding rows, cut at k.
/// Labels are renumbered by first appearance so the output is deterministic.
pub fn cluster_rows(embeddings: &Tensor, k: usize) -> Result<(Vec<usize>, bool)> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if n == 0 || k == 0 {
        return Err(FlowError::validation("clustering needs rows and k >= 1"));
    }
    let data = embeddings.data();
    let first = &data[..d];
    if data.chunks(d).all(|row| row == first) {
        return Ok((vec![0; n], true));
    }
    if n <= k {
        return Ok(((0..n).collect(), false));
    }

    // condensed pairwise Euclidean distances, row-major upper triangle
    let rows: Vec<Vec<f32>> = par::map_range(n - 1, |i| {
        let a = &data[i * d..(i + 1) * d];
        ((i + 1)..n)
            .map(|j| {
                let b = &data[j * d..(j + 1) * d];
                let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                s.sqrt() as f32
            })
            .collect()
    });
    let mut condensed: Vec<f32> = rows.into_iter().flatten().collect();
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Ward);

    // union-find cut: apply all but the last k-1 merges
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step_i, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let merged = n + step_i;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = merged;
        parent[b] = merged;
    }
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let root = find(&mut parent, i);
        let next = relabel.len();
        labels.push(*relabel.entry(root).or_insert(next));
    }
    Ok((labels, false))
}

/// Full pipeline: embed the grid, cluster, package.
pub fn cluster_embeddings(
    rle: &RleParams,
    config: &EncoderConfig,
    lambda_max: f64,
    grid_n: usize,
    k: usize,
) -> Result<ClusterGrid> {
    if grid_n == 0 || lambda_max <= 0.0 {
        return Err(FlowError::validation("grid_n and lambda_max must be positive"));
    }
    let pts = grid_points(grid_n, lambda_max);
    let emb = grid_embeddings(rle, config, &pts)?;
    let (labels, degenerate) = cluster_rows(&emb, k)?;
    Ok(ClusterGrid { grid_n, extent: lambda_max, k, labels, degenerate })
}

pub fn write_residual_grid(path: impl AsRef<Path>, grid: &ResidualGrid) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "ix,iy,x_center_m,y_center_m,mean_residual,count")?;
    for (&(ix, iy), &(mean, count)) in &grid.cells {
        let c = grid.cell_center(ix, iy);
        writeln!(f, "{ix},{iy},{:.3},{:.3},{:.6},{count}", c[0], c[1], mean)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_residual_diff(path: impl AsRef<Path>, grid: &ResidualDiffGrid) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "ix,iy,x_center_m,y_center_m,diff,in_a,in_b")?;
    let half = ResidualGrid {
        cell_size: grid.cell_size,
        extent: grid.extent,
        cells: BTreeMap::new(),
        clamped: 0,
    };
    for (&(ix, iy), &(v, a, b)) in &grid.cells {
        let c = half.cell_center(ix, iy);
        writeln!(f, "{ix},{iy},{:.3},{:.3},{:.6},{a},{b}", c[0], c[1], v)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_attention_map(path: impl AsRef<Path>, map: &AttentionMap) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "row_dest_id,col_dest_id,weight")?;
    let n = map.dest_ids.len();
    let d = map.matrix.data();
    for r in 0..n {
        for c in 0..n {
            writeln!(f, "{},{},{:.6}", map.dest_ids[r], map.dest_ids[c], d[r * n + c])?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_influencers(path: impl AsRef<Path>, map: &AttentionMap) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "rank,region_id,score")?;
    for (rank, (id, score)) in map.influencers.iter().enumerate() {
        writeln!(f, "{},{},{:.6}", rank + 1, id, score)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_cluster_grid(path: impl AsRef<Path>, grid: &ClusterGrid) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "ix,iy,x_center_m,y_center_m,label")?;
    for ix in 0..grid.grid_n {
        for iy in 0..grid.grid_n {
            let c = grid.cell_center(ix, iy);
            writeln!(f, "{ix},{iy},{:.3},{:.3},{}", c[0], c[1], grid.label(ix, iy))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Diverging red/blue ramp anchored at 0: positive residuals red, negative
/// blue, saturation proportional to |value| / max |value|.
fn diverging_color(v: f64, vmax: f64) -> String {
    let t = if vmax > 0.0 { (v.abs() / vmax).min(1.0) } else { 0.0 };
    let other = (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        format!("rgb(255,{other},{other})")
    } else {
        format!("rgb({other},{other},255)")
    }
}

/// One rect per occupied cell plus a two-stop legend.
pub fn residual_heatmap_svg(grid: &ResidualGrid, px_per_cell: f64) -> String {
    let n = grid.n_cells_per_axis();
    let side = n as f64 * px_per_cell;
    let vmax = grid
        .cells
        .values()
        .map(|(m, _)| m.abs())
        .fold(0.0_f64, f64::max);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\">\n",
        side,
        side + 30.0
    ));
    for (&(ix, iy), &(mean, _)) in &grid.cells {
        // SVG y axis points down; flip so +y is up
        let x = ix as f64 * px_per_cell;
        let y = (n - 1 - iy) as f64 * px_per_cell;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{px_per_cell:.1}\" height=\"{px_per_cell:.1}\" fill=\"{}\"/>\n",
            diverging_color(mean, vmax)
        ));
    }
    s.push_str(&format!(
        "<text x=\"4\" y=\"{:.0}\" font-size=\"12\">residual -{vmax:.2} (blue) .. +{vmax:.2} (red)</text>\n",
        side + 20.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Categorical color map over cluster labels, one rect per cell.
pub fn cluster_map_svg(grid: &ClusterGrid, px_per_cell: f64) -> String {
    const PALETTE: [&str; 10] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
        "#7f7f7f", "#bcbd22", "#17becf",
    ];
    let n = grid.grid_n;
    let side = n as f64 * px_per_cell;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\">\n",
        side,
        side + 30.0
    ));
    for ix in 0..n {
        for iy in 0..n {
            let x = ix as f64 * px_per_cell;
            let y = (n - 1 - iy) as f64 * px_per_cell;
            let color = PALETTE[grid.label(ix, iy) % PALETTE.len()];
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{px_per_cell:.1}\" height=\"{px_per_cell:.1}\" fill=\"{color}\"/>\n"
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"4\" y=\"{:.0}\" font-size=\"12\">{} clusters</text>\n",
        side + 20.0,
        grid.k
    ));
    s.push_str("</svg>\n");
    s
}
