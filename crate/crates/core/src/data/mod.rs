//! Synthetic videos, image I/O, augmentation and batching.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod synthetic;

pub use augment::{make_view_pair, AugmentationSpec, ColorJitter, GaussianBlur, ViewPair, ViewRngs};
pub use dataset::{
    format_keypoints, frame_paths, label_path, list_video_dirs, load_frames, load_keypoints, load_labels, parse_keypoints,
    write_video_dir, Batch, BatchIterator, FrameSet,
};
pub use image::{Image, LabelMap};
pub use synthetic::{generate_synthetic_video, Keypoint, KEYPOINTS_PER_SPRITE, SceneSpec, Shape, Sprite, SyntheticVideo, ValueNoise};
