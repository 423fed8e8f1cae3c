//! Late fusion of semantic and fine-grained feature maps.

use crate::encoder::DenseFeatureMap;
use crate::engine::NORM_EPS;
use crate::error::{Result, SfcError};

/// Per-location `[L2Norm(F_s), λ·L2Norm(F_f)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub semantic_channels: usize,
    pub fine_channels: usize,
    pub lambda: f64,
    pub data: Vec<f64>,
}

impl FusedFeatureMap {
    pub fn channels(&self) -> usize {
        self.semantic_channels + self.fine_channels
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels();
        let off = (i * self.cols + j) * c;
        &self.data[off..off + c]
    }

    /// As a plain feature map for propagation, which re-normalizes cells
    /// before matching.
    pub fn to_dense(&self) -> DenseFeatureMap {
        DenseFeatureMap {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Bilinear resampling of a feature map with half-pixel centers.
pub fn resample(f: &DenseFeatureMap, rows: usize, cols: usize) -> DenseFeatureMap {
    if f.rows == rows && f.cols == cols {
        return f.clone();
    }
    let c = f.channels;
    let mut data = vec![0f32; rows * cols * c];
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), (s - i0 as f64) as f32)
    };
    for i in 0..rows {
        let (y0, y1, ty) = coord(i, f.rows, rows);
        for j in 0..cols {
            let (x0, x1, tx) = coord(j, f.cols, cols);
            let out = &mut data[(i * cols + j) * c..(i * cols + j + 1) * c];
            let (a, b, cc, d) = (f.cell(y0, x0), f.cell(y0, x1), f.cell(y1, x0), f.cell(y1, x1));
            for k in 0..c {
                let top = a[k] * (1.0 - tx) + b[k] * tx;
                let bot = cc[k] * (1.0 - tx) + d[k] * tx;
                out[k] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    DenseFeatureMap {
        rows,
        cols,
        channels: c,
        data,
    }
}

fn normalized(v: &[f32], scale: f64, out: &mut Vec<f64>) {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let k = scale / n.max(NORM_EPS);
    out.extend(v.iter().map(|&x| x as f64 * k));
}

/// Fuse on the finer grid; the coarser map is upsampled first.
pub fn fuse_feature_maps(semantic: &DenseFeatureMap, fine: &DenseFeatureMap, lambda: f64) -> Result<FusedFeatureMap> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SfcError::Config(format!("fusion weight must be finite and >= 0, got {lambda}")));
    }
    let (rows, cols) = (semantic.rows.max(fine.rows), semantic.cols.max(fine.cols));
    let s = resample(semantic, rows, cols);
    let f = resample(fine, rows, cols);
    if (s.rows, s.cols) != (f.rows, f.cols) {
        return Err(SfcError::shape(
            "fuse_feature_maps",
            format!("grids {}x{} and {}x{}", s.rows, s.cols, f.rows, f.cols),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols * (s.channels + f.channels));
    for i in 0..rows {
        for j in 0..cols {
            normalized(s.cell(i, j), 1.0, &mut data);
            normalized(f.cell(i, j), lambda, &mut data);
        }
    }
    Ok(FusedFeatureMap {
        rows,
        cols,
        semantic_channels: s.channels,
        fine_channels: f.channels,
        lambda,
        data,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (na * nb)
}

/// Cosine similarity of the query cell to every context cell (row-major)
/// after re-normalizing the fused vectors.
pub fn fused_affinity(query: &FusedFeatureMap, cell: (usize, usize), context: &FusedFeatureMap) -> Result<Vec<f64>> {
    if query.lambda != context.lambda {
        return Err(SfcError::Config(format!(
            "fusion weight mismatch: {} vs {}",
            query.lambda, context.lambda
        )));
    }
    if (query.semantic_channels, query.fine_channels) != (context.semantic_channels, context.fine_channels) {
        return Err(SfcError::shape(
            "fused_affinity",
            format!(
                "channels {}+{} vs {}+{}",
                query.semantic_channels, query.fine_channels, context.semantic_channels, context.fine_channels
            ),
        ));
    }
    if cell.0 >= query.rows || cell.1 >= query.cols {
        return Err(SfcError::Index {
            what: "query cell",
            index: cell.0 * query.cols + cell.1,
            len: query.rows * query.cols,
        });
    }
    let q = query.cell(cell.0, cell.1);
    let c = context.channels();
    Ok(context.data.chunks(c).map(|v| cosine(q, v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: usize, cols: usize, c: usize, data: Vec<f32>) -> DenseFeatureMap {
        DenseFeatureMap::new(rows, cols, c, data).unwrap()
    }

    #[test]
    fn three_four_five() {
        let f = fuse_feature_maps(&map(1, 1, 2, vec![3., 4.]), &map(1, 1, 2, vec![0., 5.]), 2.0).unwrap();
        let expect = [0.6, 0.8, 0.0, 2.0];
        for (a, b) in f.cell(0, 0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vectors_stay_zero() {
        let f = fuse_feature_maps(&map(1, 1, 2, vec![0., 0.]), &map(1, 1, 1, vec![2.]), 1.75).unwrap();
        assert_eq!(f.cell(0, 0), &[0.0, 0.0, 1.75]);
    }

    #[test]
    fn lambda_zero_uses_semantic_only() {
        let s = map(1, 2, 2, vec![1., 0., 1., 1.]);
        let a = fuse_feature_maps(&s, &map(1, 2, 2, vec![1., 0., 0., 1.]), 0.0).unwrap();
        let b = fuse_feature_maps(&s, &map(1, 2, 2, vec![-1., 3., 7., 1.]), 0.0).unwrap();
        assert_eq!(fused_affinity(&a, (0, 0), &a).unwrap(), fused_affinity(&b, (0, 0), &b).unwrap());
    }

    #[test]
    fn antipodal_fine_halves_cancel() {
        let q = fuse_feature_maps(&map(1, 1, 2, vec![1., 2.]), &map(1, 1, 2, vec![1., 0.]), 1.0).unwrap();
        let c = fuse_feature_maps(&map(1, 1, 2, vec![1., 2.]), &map(1, 1, 2, vec![-1., 0.]), 1.0).unwrap();
        assert!(fused_affinity(&q, (0, 0), &c).unwrap()[0].abs() < 1e-12);
        assert!((fused_affinity(&q, (0, 0), &q).unwrap()[0] - 1.0).abs() < 1e-12);
        let other = fuse_feature_maps(&map(1, 1, 2, vec![1., 2.]), &map(1, 1, 2, vec![-1., 0.]), 2.0).unwrap();
        assert!(matches!(fused_affinity(&q, (0, 0), &other), Err(SfcError::Config(_))));
    }

    #[test]
    fn coarse_map_is_upsampled() {
        let coarse = map(1, 1, 1, vec![5.]);
        let fine = map(2, 2, 1, vec![1., 2., 3., 4.]);
        let f = fuse_feature_maps(&coarse, &fine, 1.0).unwrap();
        assert_eq!((f.rows, f.cols), (2, 2));
        assert_eq!(f.cell(1, 1), &[1.0, 1.0]);
        let tall = map(2, 1, 1, vec![1., 2.]);
        let wide = map(1, 2, 1, vec![1., 2.]);
        assert!(fuse_feature_maps(&tall, &wide, 1.0).is_ok());
        let r = resample(&map(2, 2, 1, vec![0., 1., 2., 3.]), 4, 4);
        assert_eq!(r.cell(0, 0), &[0.0]);
        assert_eq!(r.cell(3, 3), &[3.0]);
        assert_eq!(r.cell(0, 1), &[0.25]);
    }
}
