//! Encoding videos and scoring propagated labels against ground truth.

use crate::data::{Image, LabelMap, SceneSpec, SyntheticVideo};
use crate::encoder::{encode_dense, BackboneConfig, DenseFeatureMap, NetParams};
use crate::engine::{Scalar, Tensor};
use crate::error::{Result, SfcError};
use crate::fusion::fuse_feature_maps;
use crate::propagation::{boundary_tolerance, metric_f, metric_j, propagate_video, LabelGrid, PropagationConfig};

/// Frames encoded per forward pass.
const ENCODE_BATCH: usize = 8;

/// Eval-mode backbone features of each frame. Frames are resized to the
/// encoder input when their size differs.
pub fn encode_frames<T: Scalar>(params: &NetParams<T>, cfg: &BackboneConfig, frames: &[Image]) -> Result<Vec<DenseFeatureMap>> {
    let s = cfg.input_size;
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(ENCODE_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
        for f in chunk {
            if f.channels != 3 {
                return Err(SfcError::Data(format!("frame has {} channels, need 3", f.channels)));
            }
            if f.height == s && f.width == s {
                data.extend(f.data.iter().map(|&v| T::c(v as f64)));
            } else {
                let r = f.crop_resize(0, 0, f.width, f.height, s, s, false);
                data.extend(r.data.iter().map(|&v| T::c(v as f64)));
            }
        }
        let t = Tensor::new(vec![chunk.len(), 3, s, s], data)?;
        out.extend(encode_dense(params, cfg, &t)?);
    }
    Ok(out)
}

/// Fuse per-frame semantic and fine maps.
pub fn fuse_frames(semantic: &[DenseFeatureMap], fine: &[DenseFeatureMap], lambda: f64) -> Result<Vec<DenseFeatureMap>> {
    if semantic.len() != fine.len() {
        return Err(SfcError::shape("fuse_frames", format!("{} vs {} frames", semantic.len(), fine.len())));
    }
    semantic
        .iter()
        .zip(fine)
        .map(|(s, f)| fuse_feature_maps(s, f, lambda).map(|m| m.to_dense()))
        .collect()
}

/// Per-object region and boundary scores of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    /// Mean over frames 1.. of J, one entry per object.
    pub j: Vec<f64>,
    pub f: Vec<f64>,
}

/// Score predicted label maps against ground truth on frames `1..`, per
/// object class `1..classes`.
pub fn score_segmentation(pred: &[LabelMap], gt: &[LabelMap], classes: usize) -> Result<VideoScore> {
    if pred.len() != gt.len() {
        return Err(SfcError::shape("score_segmentation", format!("{} vs {} frames", pred.len(), gt.len())));
    }
    let objects = classes.saturating_sub(1);
    let (mut j, mut f) = (vec![0.0; objects], vec![0.0; objects]);
    let frames = pred.len().saturating_sub(1);
    for t in 1..pred.len() {
        let (p, g) = (&pred[t], &gt[t]);
        let tol = boundary_tolerance(g.height, g.width);
        for k in 0..objects {
            let (pb, gb) = (p.binary(k as u8 + 1), g.binary(k as u8 + 1));
            j[k] += metric_j(&pb, &gb)?;
            f[k] += metric_f(&pb, &gb, g.height, g.width, tol)?;
        }
    }
    if frames > 0 {
        j.iter_mut().chain(f.iter_mut()).for_each(|v| *v /= frames as f64);
    }
    Ok(VideoScore { j, f })
}

/// Mean scores over every object of every video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkScore {
    pub j_mean: f64,
    pub f_mean: f64,
    pub objects: usize,
}

impl BenchmarkScore {
    pub fn jf_mean(&self) -> f64 {
        (self.j_mean + self.f_mean) / 2.0
    }

    pub fn from_videos(scores: &[VideoScore]) -> Self {
        let js: Vec<f64> = scores.iter().flat_map(|s| s.j.iter().copied()).collect();
        let fs: Vec<f64> = scores.iter().flat_map(|s| s.f.iter().copied()).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        BenchmarkScore {
            j_mean: mean(&js),
            f_mean: mean(&fs),
            objects: js.len(),
        }
    }
}

/// Propagate the first ground-truth mask through `features` and decode to
/// label maps at the video's resolution.
pub fn propagate_masks(video: &SyntheticVideo, features: &[DenseFeatureMap], cfg: &PropagationConfig) -> Result<Vec<LabelMap>> {
    let f0 = features
        .first()
        .ok_or_else(|| SfcError::Data("no frames to propagate".into()))?;
    let first = LabelGrid::from_label_map(&video.masks[0], f0.rows, f0.cols, video.classes())?;
    propagate_video(features, &first, cfg)?
        .iter()
        .map(|l| l.decode(video.height, video.width))
        .collect()
}

/// Held-out synthetic videos with exact masks.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub videos: Vec<SyntheticVideo>,
}

impl Benchmark {
    /// `count` videos seeded `seed, seed+1, …`.
    pub fn synthetic(spec: &SceneSpec, count: usize, seed: u64) -> Result<Self> {
        let videos = (0..count)
            .map(|i| crate::data::generate_synthetic_video(spec, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Benchmark { videos })
    }

    /// Score with per-video features from `features(video)`.
    pub fn score_with(
        &self,
        cfg: &PropagationConfig,
        mut features: impl FnMut(&SyntheticVideo) -> Result<Vec<DenseFeatureMap>>,
    ) -> Result<BenchmarkScore> {
        let mut scores = Vec::with_capacity(self.videos.len());
        for v in &self.videos {
            let f = features(v)?;
            let pred = propagate_masks(v, &f, cfg)?;
            scores.push(score_segmentation(&pred, &v.masks, v.classes())?);
        }
        Ok(BenchmarkScore::from_videos(&scores))
    }

    /// Score one encoder's eval-mode features.
    pub fn score_encoder<T: Scalar>(&self, params: &NetParams<T>, backbone: &BackboneConfig, cfg: &PropagationConfig) -> Result<BenchmarkScore> {
        self.score_with(cfg, |v| encode_frames(params, backbone, &v.frames))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_empty_predictions() {
        let spec = SceneSpec { frames: 4, ..SceneSpec::default() };
        let v = crate::data::generate_synthetic_video(&spec, 3).unwrap();
        let s = score_segmentation(&v.masks, &v.masks, v.classes()).unwrap();
        assert!(s.j.iter().chain(&s.f).all(|&x| x == 1.0));
        let empty: Vec<LabelMap> = v.masks.iter().map(|m| LabelMap::new(m.height, m.width, vec![0; m.data.len()]).unwrap()).collect();
        let s = score_segmentation(&empty, &v.masks, v.classes()).unwrap();
        assert!(s.j.iter().all(|&x| x == 0.0));
        let b = BenchmarkScore { j_mean: 0.5, f_mean: 0.7, objects: 1 };
        assert!((b.jf_mean() - 0.6).abs() < 1e-15);
    }
}
