//! Recurrent label propagation with restricted top-k attention.

pub mod heatmap;
pub mod metrics;

use std::cmp::Ordering;

use crate::data::{Keypoint, LabelMap};
use crate::encoder::DenseFeatureMap;
use crate::engine::NORM_EPS;
use crate::error::{Result, SfcError};
use crate::par;

pub use heatmap::{affinity_heatmap, dump_affinity_heatmap};
pub use metrics::{boundary, boundary_tolerance, metric_f, metric_j, metric_pck, reference_size};

/// `[rows, cols, channels]` nonnegative label distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LabelGrid {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels || channels == 0 {
            return Err(SfcError::shape(
                "label_grid",
                format!("{} values for {rows}x{cols}x{channels}", data.len()),
            ));
        }
        Ok(LabelGrid {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.cols + j) * self.channels;
        &self.data[off..off + self.channels]
    }

    fn cell_flat(&self, q: usize) -> &[f64] {
        &self.data[q * self.channels..(q + 1) * self.channels]
    }

    /// Class fractions of each cell's pixel block; classes above
    /// `classes − 1` are an error.
    pub fn from_label_map(mask: &LabelMap, rows: usize, cols: usize, classes: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || !mask.height.is_multiple_of(rows) || !mask.width.is_multiple_of(cols) {
            return Err(SfcError::shape(
                "label_grid",
                format!("{}x{} labels on a {rows}x{cols} grid", mask.height, mask.width),
            ));
        }
        if mask.max_label() as usize >= classes {
            return Err(SfcError::Data(format!(
                "label {} exceeds {classes} classes",
                mask.max_label()
            )));
        }
        let (bh, bw) = (mask.height / rows, mask.width / cols);
        let mut data = vec![0.0; rows * cols * classes];
        let share = 1.0 / (bh * bw) as f64;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let q = (y / bh) * cols + x / bw;
                data[q * classes + mask.get(y, x) as usize] += share;
            }
        }
        LabelGrid::new(rows, cols, classes, data)
    }

    /// One channel per keypoint holding a point mass at the cell that
    /// contains it.
    pub fn from_keypoints(kps: &[Keypoint], height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        let n = kps.len();
        if n == 0 {
            return Err(SfcError::Data("no keypoints".into()));
        }
        let mut data = vec![0.0; rows * cols * n];
        for (k, kp) in kps.iter().enumerate() {
            let i = ((kp.y / height as f64 * rows as f64).floor().max(0.0) as usize).min(rows - 1);
            let j = ((kp.x / width as f64 * cols as f64).floor().max(0.0) as usize).min(cols - 1);
            data[(i * cols + j) * n + k] = 1.0;
        }
        LabelGrid::new(rows, cols, n, data)
    }

    /// Argmax class per cell, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.data.chunks(self.channels).map(argmax).collect()
    }

    /// Per-cell argmax upsampled to `height × width` by nearest neighbor.
    pub fn decode(&self, height: usize, width: usize) -> Result<LabelMap> {
        if self.channels > 256 {
            return Err(SfcError::shape("decode", format!("{} classes do not fit 8 bits", self.channels)));
        }
        let cls = self.argmax();
        let mut data = vec![0u8; height * width];
        for y in 0..height {
            let i = (y * self.rows / height).min(self.rows - 1);
            for x in 0..width {
                let j = (x * self.cols / width).min(self.cols - 1);
                data[y * width + x] = cls[i * self.cols + j] as u8;
            }
        }
        LabelMap::new(height, width, data)
    }

    /// Per-channel argmax cell mapped to its center in pixels.
    pub fn decode_keypoints(&self, height: usize, width: usize) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|k| {
                let mut best = 0;
                for q in 1..self.cells() {
                    if self.data[q * self.channels + k] > self.data[best * self.channels + k] {
                        best = q;
                    }
                }
                let (i, j) = (best / self.cols, best % self.cols);
                (
                    (j as f64 + 0.5) * width as f64 / self.cols as f64,
                    (i as f64 + 0.5) * height as f64 / self.rows as f64,
                )
            })
            .collect()
    }

    /// Rescale each channel to sum to one over the grid.
    pub fn normalize_channels(&mut self) {
        for k in 0..self.channels {
            let s: f64 = (0..self.cells()).map(|q| self.data[q * self.channels + k]).sum();
            if s > 0.0 {
                for q in 0..self.cells() {
                    self.data[q * self.channels + k] /= s;
                }
            }
        }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks(self.channels)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Propagation hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationConfig {
    pub top_k: usize,
    /// Preceding frames in the context besides frame 0.
    pub context: usize,
    /// Chebyshev radius in grid cells.
    pub radius: usize,
    pub temperature: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self::single()
    }
}

impl PropagationConfig {
    pub const TEMPERATURE: f64 = 0.07;

    /// Single-network object-mask setting.
    pub fn single() -> Self {
        PropagationConfig {
            top_k: 10,
            context: 20,
            radius: 12,
            temperature: Self::TEMPERATURE,
        }
    }

    /// Fused-feature setting.
    pub fn fused() -> Self {
        PropagationConfig {
            top_k: 15,
            radius: 15,
            ..Self::single()
        }
    }

    /// Radius rescaled to a `grid`-cell feature map (about a third of it).
    pub fn rescaled(self, grid: usize) -> Self {
        let r = (self.radius as f64 * grid as f64 / 36.0).round().max(1.0) as usize;
        PropagationConfig { radius: r, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(SfcError::Config("top_k must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SfcError::Config(format!(
                "propagation temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One context cell considered by a query cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// Position in the context list.
    pub frame: usize,
    /// Row-major cell index.
    pub cell: usize,
    /// `cos/τ`; the affinity is `exp(logit)`.
    pub logit: f64,
}

impl Candidate {
    pub fn affinity(&self) -> f64 {
        self.logit.exp()
    }
}

/// Candidates per query cell, listed in `(frame, row, col)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffinity {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<Candidate>>,
}

/// Unit-normalized cells of one feature map.
struct UnitMap {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f32>,
}

impl UnitMap {
    fn new(f: &DenseFeatureMap) -> Self {
        let mut data = f.data.clone();
        if f.channels > 0 {
            for cell in data.chunks_mut(f.channels) {
                let n = cell.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                let k = (1.0 / n.max(NORM_EPS)) as f32;
                cell.iter_mut().for_each(|v| *v *= k);
            }
        }
        UnitMap {
            rows: f.rows,
            cols: f.cols,
            channels: f.channels,
            data,
        }
    }

    fn cell(&self, q: usize) -> &[f32] {
        &self.data[q * self.channels..(q + 1) * self.channels]
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_grids(query: &DenseFeatureMap, context: &[&DenseFeatureMap]) -> Result<()> {
    for c in context {
        if (c.rows, c.cols, c.channels) != (query.rows, query.cols, query.channels) {
            return Err(SfcError::shape(
                "restricted_affinity",
                format!(
                    "context {}x{}x{} vs query {}x{}x{}",
                    c.rows, c.cols, c.channels, query.rows, query.cols, query.channels
                ),
            ));
        }
    }
    Ok(())
}

fn affinity_units(query: &UnitMap, context: &[&UnitMap], radius: usize, tau: f64) -> SparseAffinity {
    let (rows, cols) = (query.rows, query.cols);
    let entries = par::map_range(rows * cols, |q| {
        let (i, j) = (q / cols, q % cols);
        let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(rows - 1));
        let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(cols - 1));
        let qv = query.cell(q);
        let mut out = Vec::with_capacity(context.len() * (i1 - i0 + 1) * (j1 - j0 + 1));
        for (frame, c) in context.iter().enumerate() {
            for r in i0..=i1 {
                for s in j0..=j1 {
                    let cell = r * cols + s;
                    out.push(Candidate {
                        frame,
                        cell,
                        logit: dot(qv, c.cell(cell)) as f64 / tau,
                    });
                }
            }
        }
        debug_assert!(!out.is_empty());
        out
    });
    SparseAffinity { rows, cols, entries }
}

/// Affinities from each query cell to every context cell within Chebyshev
/// distance `radius`, across all context frames.
pub fn restricted_affinity(
    query: &DenseFeatureMap,
    context: &[&DenseFeatureMap],
    radius: usize,
    temperature: f64,
) -> Result<SparseAffinity> {
    if context.is_empty() {
        return Err(SfcError::Config("restricted_affinity needs at least one context frame".into()));
    }
    if temperature <= 0.0 {
        return Err(SfcError::Config(format!("temperature must be > 0, got {temperature}")));
    }
    check_grids(query, context)?;
    let q = UnitMap::new(query);
    let cs: Vec<UnitMap> = context.iter().map(|c| UnitMap::new(c)).collect();
    let refs: Vec<&UnitMap> = cs.iter().collect();
    Ok(affinity_units(&q, &refs, radius, temperature))
}

/// Larger logit first, then lower `(frame, cell)`.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.logit
        .total_cmp(&a.logit)
        .then(a.frame.cmp(&b.frame))
        .then(a.cell.cmp(&b.cell))
}

/// Top-k weighted vote of context labels for every query cell.
///
/// Weights are `exp(logit − max logit)` renormalized over the kept
/// candidates, which equals renormalizing the raw affinities.
pub fn propagate_frame(affinity: &SparseAffinity, context_labels: &[&LabelGrid], top_k: usize) -> Result<LabelGrid> {
    if top_k == 0 {
        return Err(SfcError::Config("top_k must be >= 1".into()));
    }
    let first = context_labels
        .first()
        .ok_or_else(|| SfcError::Config("propagate_frame needs context labels".into()))?;
    let channels = first.channels;
    for l in context_labels {
        if (l.rows, l.cols, l.channels) != (affinity.rows, affinity.cols, channels) {
            return Err(SfcError::shape(
                "propagate_frame",
                format!(
                    "labels {}x{}x{} for a {}x{} affinity",
                    l.rows, l.cols, l.channels, affinity.rows, affinity.cols
                ),
            ));
        }
    }
    if let Some(c) = affinity.entries.iter().flatten().find(|c| c.frame >= context_labels.len()) {
        return Err(SfcError::Index {
            what: "context frame",
            index: c.frame,
            len: context_labels.len(),
        });
    }
    let rows: Vec<Vec<f64>> = par::map_range(affinity.entries.len(), |q| {
        let mut cand = affinity.entries[q].clone();
        assert!(!cand.is_empty(), "empty neighborhood");
        let k = top_k.min(cand.len());
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, rank);
            cand.truncate(k);
        }
        cand.sort_by(rank);
        let top = cand[0].logit;
        let w: Vec<f64> = cand.iter().map(|c| (c.logit - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut out = vec![0.0; channels];
        for (c, wi) in cand.iter().zip(&w) {
            let wi = wi / total;
            for (o, l) in out.iter_mut().zip(context_labels[c.frame].cell_flat(c.cell)) {
                *o += wi * l;
            }
        }
        out
    });
    LabelGrid::new(affinity.rows, affinity.cols, channels, rows.concat())
}

/// Context frames for frame `t`: frame 0 and up to `m` preceding frames.
pub fn context_frames(t: usize, m: usize) -> Vec<usize> {
    let mut ctx = vec![0];
    ctx.extend(t.saturating_sub(m).max(1)..t);
    ctx
}

fn propagate(features: &[DenseFeatureMap], first: &LabelGrid, cfg: &PropagationConfig, keypoints: bool) -> Result<Vec<LabelGrid>> {
    cfg.validate()?;
    let f0 = features
        .first()
        .ok_or_else(|| SfcError::Data("propagation needs at least one frame".into()))?;
    if (first.rows, first.cols) != (f0.rows, f0.cols) {
        return Err(SfcError::shape(
            "propagate_video",
            format!("labels {}x{} vs features {}x{}", first.rows, first.cols, f0.rows, f0.cols),
        ));
    }
    let refs: Vec<&DenseFeatureMap> = features.iter().collect();
    check_grids(f0, &refs)?;
    let units: Vec<UnitMap> = features.iter().map(UnitMap::new).collect();
    let mut out = vec![first.clone()];
    for t in 1..features.len() {
        let ctx = context_frames(t, cfg.context);
        let cmaps: Vec<&UnitMap> = ctx.iter().map(|&c| &units[c]).collect();
        let aff = affinity_units(&units[t], &cmaps, cfg.radius, cfg.temperature);
        let labels: Vec<&LabelGrid> = ctx.iter().map(|&c| &out[c]).collect();
        let mut next = propagate_frame(&aff, &labels, cfg.top_k)?;
        if keypoints {
            next.normalize_channels();
        }
        out.push(next);
    }
    Ok(out)
}

/// Propagate `first` through every frame; output 0 is `first`.
pub fn propagate_video(features: &[DenseFeatureMap], first: &LabelGrid, cfg: &PropagationConfig) -> Result<Vec<LabelGrid>> {
    propagate(features, first, cfg, false)
}

/// As [`propagate_video`], keeping each channel a distribution over the grid.
pub fn propagate_keypoints(features: &[DenseFeatureMap], first: &LabelGrid, cfg: &PropagationConfig) -> Result<Vec<LabelGrid>> {
    propagate(features, first, cfg, true)
}
