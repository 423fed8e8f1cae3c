//! Region IoU, boundary F-measure and PCK.

use crate::error::{Result, SfcError};

/// `|∩|/|∪|`, 1.0 when both masks are empty.
pub fn metric_j(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(SfcError::shape("metric_j", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.8%` of the image diagonal`)`.
pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    (0.008 * (height as f64).hypot(width as f64)).ceil() as usize
}

/// Mask pixels with a 4-neighbor outside the mask; off-image counts as
/// outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Chebyshev dilation by `r` pixels.
fn dilate(bits: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; bits.len()];
    for y in 0..height {
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(width - 1));
            rows[y * width + x] = (x0..=x1).any(|xx| bits[y * width + xx]);
        }
    }
    let mut out = vec![false; bits.len()];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(height - 1));
        for x in 0..width {
            out[y * width + x] = (y0..=y1).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Boundary F-measure with Chebyshev tolerance `tol_px`.
///
/// An empty predicted boundary has precision 1, an empty ground-truth
/// boundary has recall 1.
pub fn metric_f(pred: &[bool], gt: &[bool], height: usize, width: usize, tol_px: usize) -> Result<f64> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(SfcError::shape(
            "metric_f",
            format!("{} and {} pixels for {height}x{width}", pred.len(), gt.len()),
        ));
    }
    let pb = boundary(pred, height, width);
    let gb = boundary(gt, height, width);
    let pd = dilate(&pb, height, width, tol_px);
    let gd = dilate(&gb, height, width, tol_px);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    let hit = |a: &[bool], b: &[bool]| a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let precision = if np == 0 { 1.0 } else { hit(&pb, &gd) as f64 / np as f64 };
    let recall = if ng == 0 { 1.0 } else { hit(&gb, &pd) as f64 / ng as f64 };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// `max(bbox height, bbox width)` of a keypoint set.
pub fn reference_size(points: &[(f64, f64)]) -> f64 {
    let fold = |f: fn(&(f64, f64)) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|p| p.0);
    let (y0, y1) = fold(|p| p.1);
    if points.is_empty() {
        0.0
    } else {
        (x1 - x0).max(y1 - y0)
    }
}

/// Fraction of keypoints within `alpha·ref_size` (Euclidean) of the truth.
pub fn metric_pck(pred: &[(f64, f64)], gt: &[(f64, f64)], alpha: f64, ref_size: f64) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(SfcError::shape("metric_pck", format!("{} vs {} keypoints", pred.len(), gt.len())));
    }
    let thr = alpha * ref_size;
    let ok = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1) <= thr)
        .count();
    Ok(ok as f64 / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, x0: usize, y0: usize, s: usize) -> Vec<bool> {
        (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                x >= x0 && x < x0 + s && y >= y0 && y < y0 + s
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        let gt = square(8, 8, 2, 2, 4);
        assert_eq!(metric_j(&gt, &gt).unwrap(), 1.0);
        assert_eq!(metric_j(&square(8, 8, 0, 0, 2), &square(8, 8, 5, 5, 2)).unwrap(), 0.0);
        let left: Vec<bool> = (0..64).map(|p| gt[p] && p % 8 < 4).collect();
        assert_eq!(metric_j(&left, &gt).unwrap(), 0.5);
        assert_eq!(metric_j(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(metric_j(&[false; 4], &[false; 5]).is_err());
    }

    #[test]
    fn boundary_f_examples() {
        let (h, w) = (64, 64);
        let tol = boundary_tolerance(h, w);
        assert_eq!(tol, 1);
        let a = square(h, w, 10, 10, 20);
        assert_eq!(metric_f(&a, &a, h, w, tol).unwrap(), 1.0);
        assert_eq!(metric_f(&a, &square(h, w, 40, 40, 10), h, w, tol).unwrap(), 0.0);
        for t in 1..4 {
            assert_eq!(metric_f(&a, &square(h, w, 10 + t, 10, 20), h, w, t).unwrap(), 1.0);
            assert!(metric_f(&a, &square(h, w, 10 + t + 1, 10, 20), h, w, t).unwrap() < 1.0);
        }
        assert_eq!(metric_f(&vec![false; h * w], &a, h, w, tol).unwrap(), 0.0);
        assert_eq!(boundary(&square(4, 4, 0, 0, 4), 4, 4).iter().filter(|&&b| b).count(), 12);
    }

    #[test]
    fn pck_examples() {
        let gt = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)];
        assert_eq!(reference_size(&gt), 10.0);
        assert_eq!(metric_pck(&gt, &gt, 0.1, 10.0).unwrap(), 1.0);
        let far: Vec<_> = gt.iter().map(|p| (p.0 + 5.0, p.1)).collect();
        assert_eq!(metric_pck(&far, &gt, 0.2, 10.0).unwrap(), 0.0);
        let half = [(0.5, 0.0), (10.0, 1.0), (5.0, 10.0), (10.0, 15.0)];
        assert_eq!(metric_pck(&half, &gt, 0.1, 10.0).unwrap(), 0.5);
    }
}
