//! Frame collections, the on-disk video layout and the training batch stream.
//!
//! Layout: `videoNNN/frameNNNNN.ppm`, `videoNNN/labels/frameNNNNN.pgm`,
//! `videoNNN/keypoints.txt` with lines `frame_idx kp_idx x y`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{make_view_pair, AugmentationSpec, ViewRngs};
use super::image::{Image, LabelMap};
use super::synthetic::{generate_synthetic_video, Keypoint, SceneSpec, SyntheticVideo};
use crate::engine::Tensor;
use crate::error::{Result, SfcError};
use crate::geometry::{CropSampler, ViewPairGeometry};

/// Frames grouped by video. Training ignores the grouping and the order.
#[derive(Clone, Debug, Default)]
pub struct FrameSet {
    pub videos: Vec<Vec<Image>>,
}

impl FrameSet {
    pub fn from_videos(videos: Vec<Vec<Image>>) -> Self {
        FrameSet { videos }
    }

    /// `count` synthetic videos, video `i` seeded with `seed + i`.
    pub fn synthetic(spec: &SceneSpec, count: usize, seed: u64) -> Result<Self> {
        let videos = (0..count)
            .map(|i| generate_synthetic_video(spec, seed.wrapping_add(i as u64)).map(|v| v.frames))
            .collect::<Result<_>>()?;
        Ok(FrameSet { videos })
    }

    /// Every `videoNNN` directory under `root`.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Self> {
        let videos = list_video_dirs(root.as_ref())?
            .iter()
            .map(|d| load_frames(d))
            .collect::<Result<_>>()?;
        Ok(FrameSet { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame at a flat index over all videos.
    pub fn get(&self, mut index: usize) -> Option<&Image> {
        for v in &self.videos {
            if index < v.len() {
                return Some(&v[index]);
            }
            index -= v.len();
        }
        None
    }
}

fn numbered(path: &Path, prefix: &str, ext: &str) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let rest = name.strip_prefix(prefix)?;
    let digits = if ext.is_empty() { rest } else { rest.strip_suffix(ext)? };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn sorted_entries(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| SfcError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| SfcError::io(dir, e))?.path();
        if let Some(n) = numbered(&p, prefix, ext) {
            out.push((n, p));
        }
    }
    out.sort();
    Ok(out)
}

pub fn list_video_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(root, "video", "")?
        .into_iter()
        .filter(|(_, p)| p.is_dir())
        .map(|(_, p)| p)
        .collect())
}

/// Frame paths of one video directory, checked for gaps.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = sorted_entries(dir, "frame", ".ppm")?;
    check_contiguous(dir, &entries)?;
    Ok(entries.into_iter().map(|(_, p)| p).collect())
}

fn check_contiguous(dir: &Path, entries: &[(usize, PathBuf)]) -> Result<()> {
    for (i, (n, _)) in entries.iter().enumerate() {
        if *n != i {
            return Err(SfcError::Data(format!(
                "{}: frame {i:05} missing (next present is {n:05})",
                dir.display()
            )));
        }
    }
    Ok(())
}

pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    frame_paths(dir)?.iter().map(Image::load).collect()
}

/// Label maps in `dir`, indexed by frame number.
pub fn load_labels(dir: &Path) -> Result<Vec<(usize, LabelMap)>> {
    sorted_entries(dir, "frame", ".pgm")?
        .into_iter()
        .map(|(n, p)| LabelMap::load(&p).map(|l| (n, l)))
        .collect()
}

pub fn label_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame{frame:05}.pgm"))
}

/// Parse `frame_idx kp_idx x y` lines; `#` starts a comment.
pub fn parse_keypoints(text: &str, context: &str) -> Result<Vec<Vec<Keypoint>>> {
    let mut frames: Vec<Vec<Keypoint>> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let err = |detail: String| SfcError::Parse {
                context: context.to_string(),
                offset,
                detail,
            };
            let f: Vec<&str> = body.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let frame: usize = f[0].parse().map_err(|_| err(format!("bad frame index `{}`", f[0])))?;
            let index: usize = f[1].parse().map_err(|_| err(format!("bad keypoint index `{}`", f[1])))?;
            let x: f64 = f[2].parse().map_err(|_| err(format!("bad x `{}`", f[2])))?;
            let y: f64 = f[3].parse().map_err(|_| err(format!("bad y `{}`", f[3])))?;
            if frames.len() <= frame {
                frames.resize(frame + 1, Vec::new());
            }
            frames[frame].push(Keypoint { index, x, y });
        }
        offset += line.len();
    }
    for f in &mut frames {
        f.sort_by_key(|k| k.index);
    }
    Ok(frames)
}

pub fn format_keypoints(frames: &[Vec<Keypoint>]) -> String {
    let mut s = String::new();
    for (t, kps) in frames.iter().enumerate() {
        for k in kps {
            s.push_str(&format!("{t} {} {} {}\n", k.index, k.x, k.y));
        }
    }
    s
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Vec<Keypoint>>> {
    let text = fs::read_to_string(path).map_err(|e| SfcError::io(path, e))?;
    parse_keypoints(&text, &path.display().to_string())
}

/// Write one synthetic video in the dataset layout.
pub fn write_video_dir(dir: &Path, video: &SyntheticVideo) -> Result<()> {
    let labels = dir.join("labels");
    fs::create_dir_all(&labels).map_err(|e| SfcError::io(&labels, e))?;
    for (t, (frame, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
        frame.save(dir.join(format!("frame{t:05}.ppm")))?;
        mask.save(label_path(&labels, t))?;
    }
    let kp = dir.join("keypoints.txt");
    fs::write(&kp, format_keypoints(&video.keypoints)).map_err(|e| SfcError::io(&kp, e))
}

/// Stacked view pairs for one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Flat frame indices, one per sample.
    pub indices: Vec<usize>,
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub geometry: Vec<ViewPairGeometry>,
}

/// Endless stream of view-pair batches drawn uniformly with replacement.
pub struct BatchIterator {
    frames: FrameSet,
    batch_size: usize,
    sampler: CropSampler,
    radius: f64,
    aug: AugmentationSpec,
    index_rng: ChaCha8Rng,
    view_rngs: ViewRngs,
}

impl BatchIterator {
    pub fn new(
        frames: FrameSet,
        batch_size: usize,
        sampler: CropSampler,
        radius: f64,
        aug: AugmentationSpec,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(SfcError::Config(format!(
                "batch size must be >= 2 for batch norm, got {batch_size}"
            )));
        }
        if frames.is_empty() {
            return Err(SfcError::Data("empty dataset".into()));
        }
        sampler.validate()?;
        let mut index_rng = ChaCha8Rng::seed_from_u64(seed);
        index_rng.set_stream(0);
        Ok(BatchIterator {
            frames,
            batch_size,
            sampler,
            radius,
            aug,
            index_rng,
            view_rngs: ViewRngs::new(seed),
        })
    }

    pub fn frames(&self) -> &FrameSet {
        &self.frames
    }

    /// The next `batch_size` flat frame indices, without rendering views.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.frames.len();
        (0..self.batch_size).map(|_| self.index_rng.gen_range(0..n)).collect()
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let indices = self.next_indices();
        let s = self.sampler.out_size;
        let per = 3 * s * s;
        let mut v1 = Vec::with_capacity(indices.len() * per);
        let mut v2 = Vec::with_capacity(indices.len() * per);
        let mut geometry = Vec::with_capacity(indices.len());
        for &i in &indices {
            let img = self.frames.get(i).expect("index in range");
            let pair = make_view_pair(img, &self.sampler, self.radius, &self.aug, &mut self.view_rngs)?;
            v1.extend_from_slice(&pair.view1.data);
            v2.extend_from_slice(&pair.view2.data);
            geometry.push(pair.geometry);
        }
        let shape = vec![indices.len(), 3, s, s];
        Ok(Batch {
            indices,
            view1: Tensor::new(shape.clone(), v1)?,
            view2: Tensor::new(shape, v2)?,
            geometry,
        })
    }
}
