//! Similarity heatmaps of one source cell against a target frame.

use std::path::Path;

use crate::data::LabelMap;
use crate::encoder::DenseFeatureMap;
use crate::engine::NORM_EPS;
use crate::error::{Result, SfcError};

/// Cosine similarity of `source[cell]` to every cell of `target`, min-max
/// scaled to `0..=255` on the target grid. A flat range maps to 128.
pub fn affinity_heatmap(source: &DenseFeatureMap, cell: (usize, usize), target: &DenseFeatureMap) -> Result<LabelMap> {
    if cell.0 >= source.rows || cell.1 >= source.cols {
        return Err(SfcError::Index {
            what: "source cell",
            index: cell.0 * source.cols + cell.1,
            len: source.cells(),
        });
    }
    if source.channels != target.channels {
        return Err(SfcError::shape(
            "affinity_heatmap",
            format!("{} vs {} channels", source.channels, target.channels),
        ));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt().max(NORM_EPS);
    let q = source.cell(cell.0, cell.1);
    let qn = norm(q);
    let sims: Vec<f64> = (0..target.cells())
        .map(|p| {
            let c = target.cell(p / target.cols, p % target.cols);
            let d: f64 = q.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
            d / (qn * norm(c))
        })
        .collect();
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo <= 1e-12 {
        vec![128; sims.len()]
    } else {
        sims.iter().map(|s| (255.0 * (s - lo) / (hi - lo)).round() as u8).collect()
    };
    LabelMap::new(target.rows, target.cols, data)
}

/// [`affinity_heatmap`] written as a binary graymap.
pub fn dump_affinity_heatmap(
    source: &DenseFeatureMap,
    cell: (usize, usize),
    target: &DenseFeatureMap,
    path: impl AsRef<Path>,
) -> Result<LabelMap> {
    let img = affinity_heatmap(source, cell, target)?;
    img.save(path)?;
    Ok(img)
}
