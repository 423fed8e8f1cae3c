//! Procedural sprite videos with exact masks, keypoints and correspondences.
//!
//! Labels are computed from sprite parameters, never from rendered pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{Image, LabelMap};
use crate::encoder::DenseFeatureMap;
use crate::error::{Result, SfcError};

/// Periodic multi-octave value noise in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNoise {
    lattice: Vec<f32>,
    period: usize,
    /// Pixels per lattice cell at the first octave.
    cell: f64,
    octaves: usize,
}

impl ValueNoise {
    pub fn new(seed: u64, cell: f64, octaves: usize) -> Self {
        let period = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ValueNoise {
            lattice: (0..period * period).map(|_| rng.gen::<f32>()).collect(),
            period,
            cell: cell.max(1e-3),
            octaves: octaves.max(1),
        }
    }

    fn lattice(&self, i: i64, j: i64) -> f32 {
        let p = self.period as i64;
        self.lattice[(i.rem_euclid(p) * p + j.rem_euclid(p)) as usize]
    }

    fn octave(&self, x: f64, y: f64) -> f32 {
        let (fx, fy) = (x.floor(), y.floor());
        let smooth = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
        let (tx, ty) = (smooth(x - fx), smooth(y - fy));
        let (i, j) = (fy as i64, fx as i64);
        let top = self.lattice(i, j) * (1.0 - tx) + self.lattice(i, j + 1) * tx;
        let bot = self.lattice(i + 1, j) * (1.0 - tx) + self.lattice(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    pub fn eval(&self, x: f64, y: f64) -> f32 {
        let (mut sum, mut norm, mut amp, mut freq) = (0.0f32, 0.0f32, 1.0f32, 1.0 / self.cell);
        for o in 0..self.octaves {
            // decorrelate octaves by offsetting into the lattice
            let off = 17.0 * o as f64;
            sum += amp * self.octave(x * freq + off, y * freq + off);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle with full width and height in pixels.
    Rect { w: f64, h: f64 },
    Disc { r: f64 },
}

impl Shape {
    /// Half extents at unit scale.
    pub fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { w, h } => (w / 2.0, h / 2.0),
            Shape::Disc { r } => (r, r),
        }
    }
}

/// A textured sprite under translation and optional uniform scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    /// Center `(x, y)` at frame 0, in pixels.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Scale at frame `t` is `1 + scale_rate·t`.
    pub scale_rate: f64,
    pub colors: [[f32; 3]; 2],
    pub texture: ValueNoise,
}

impl Sprite {
    pub fn solid(shape: Shape, start: (f64, f64), velocity: (f64, f64), color: [f32; 3], seed: u64) -> Self {
        Sprite {
            shape,
            start,
            velocity,
            scale_rate: 0.0,
            colors: [color, color],
            texture: ValueNoise::new(seed, 4.0, 1),
        }
    }

    pub fn center(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        )
    }

    pub fn scale(&self, t: usize) -> f64 {
        1.0 + self.scale_rate * t as f64
    }

    /// `(x0, y0, x1, y1)` bounding box at frame `t`.
    pub fn bbox(&self, t: usize) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center(t);
        let (hw, hh) = self.shape.half_extent();
        let s = self.scale(t);
        (cx - hw * s, cy - hh * s, cx + hw * s, cy + hh * s)
    }

    /// Half-open containment test at pixel coordinates.
    pub fn contains(&self, t: usize, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center(t);
        let s = self.scale(t);
        match self.shape {
            Shape::Rect { w, h } => {
                let (hw, hh) = (w * s / 2.0, h * s / 2.0);
                x >= cx - hw && x < cx + hw && y >= cy - hh && y < cy + hh
            }
            Shape::Disc { r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy < (r * s) * (r * s)
            }
        }
    }

    fn color_at(&self, t: usize, x: f64, y: f64) -> [f32; 3] {
        let (cx, cy) = self.center(t);
        let s = self.scale(t);
        let n = self.texture.eval((x - cx) / s, (y - cy) / s);
        let [a, b] = self.colors;
        [0, 1, 2].map(|c| a[c] * (1.0 - n) + b[c] * n)
    }

    /// Centroid followed by the left, right, top and bottom extremal points.
    pub fn keypoints(&self, t: usize) -> [(f64, f64); KEYPOINTS_PER_SPRITE] {
        let (cx, cy) = self.center(t);
        let (x0, y0, x1, y1) = self.bbox(t);
        [(cx, cy), (x0, cy), (x1, cy), (cx, y0), (cx, y1)]
    }
}

pub const KEYPOINTS_PER_SPRITE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

/// Parameters for random scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive bounds on the sprite count.
    pub sprites: (usize, usize),
    /// Bounds on sprite side length or diameter, pixels.
    pub sprite_size: (f64, f64),
    /// Pixels per frame.
    pub max_speed: f64,
    /// Bound on `|scale_rate|`; zero disables scaling.
    pub max_scale_rate: f64,
    /// Background lattice spacing, pixels.
    pub noise_cell: f64,
    pub octaves: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            frames: 24,
            sprites: (1, 3),
            sprite_size: (14.0, 28.0),
            max_speed: 1.5,
            max_scale_rate: 0.0,
            noise_cell: 16.0,
            octaves: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(SfcError::Config("scene needs nonzero size and frame count".into()));
        }
        let (lo, hi) = self.sprite_size;
        if !(lo > 0.0 && lo <= hi) || self.sprites.0 > self.sprites.1 {
            return Err(SfcError::Config(format!(
                "invalid sprite bounds: size {:?}, count {:?}",
                self.sprite_size, self.sprites
            )));
        }
        let grown = hi * self.max_grow();
        if grown > self.height.min(self.width) as f64 {
            return Err(SfcError::Config(format!(
                "sprite size {grown} exceeds the {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Frame size must be divisible by the encoder's total stride.
    pub fn check_stride(&self, stride: usize) -> Result<()> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(SfcError::Config(format!(
                "frame {}x{} is not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn max_grow(&self) -> f64 {
        1.0 + self.max_scale_rate.abs() * self.frames.saturating_sub(1) as f64
    }
}

/// A rendered video with per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub height: usize,
    pub width: usize,
    pub sprites: Vec<Sprite>,
    pub frames: Vec<Image>,
    /// Class `k+1` marks sprite `k`; later sprites occlude earlier ones.
    pub masks: Vec<LabelMap>,
    pub keypoints: Vec<Vec<Keypoint>>,
}

impl SyntheticVideo {
    /// Render `sprites` over a static value-noise background.
    pub fn render(
        height: usize,
        width: usize,
        frames: usize,
        background: &ValueNoise,
        palette: [[f32; 3]; 2],
        sprites: Vec<Sprite>,
    ) -> Result<Self> {
        if sprites.len() > 254 {
            return Err(SfcError::Config("at most 254 sprites per scene".into()));
        }
        let mut bg = Image::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                let n = background.eval(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..3 {
                    bg.set(c, y, x, palette[0][c] * (1.0 - n) + palette[1][c] * n);
                }
            }
        }
        let mut out_frames = Vec::with_capacity(frames);
        let mut masks = Vec::with_capacity(frames);
        let mut keypoints = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut img = bg.clone();
            let mut mask = vec![0u8; height * width];
            for y in 0..height {
                for x in 0..width {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if let Some(k) = top_sprite(&sprites, t, px, py) {
                        mask[y * width + x] = k as u8 + 1;
                        let col = sprites[k].color_at(t, px, py);
                        for (c, v) in col.into_iter().enumerate() {
                            img.set(c, y, x, v);
                        }
                    }
                }
            }
            out_frames.push(img);
            masks.push(LabelMap::new(height, width, mask)?);
            keypoints.push(
                sprites
                    .iter()
                    .enumerate()
                    .flat_map(|(k, s)| {
                        s.keypoints(t)
                            .into_iter()
                            .enumerate()
                            .map(move |(i, (x, y))| Keypoint {
                                index: k * KEYPOINTS_PER_SPRITE + i,
                                x,
                                y,
                            })
                    })
                    .collect(),
            );
        }
        Ok(SyntheticVideo {
            height,
            width,
            sprites,
            frames: out_frames,
            masks,
            keypoints,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of classes including background.
    pub fn classes(&self) -> usize {
        self.sprites.len() + 1
    }

    /// Ground-truth identity features on a `rows × cols` grid.
    ///
    /// Each cell center gets a one-hot content code (the world cell for
    /// background, the sprite-local cell for sprites) plus a class indicator
    /// scaled by `class_weight`. Under whole-cell translation the same
    /// content keeps the same code across frames.
    pub fn identity_features(&self, t: usize, rows: usize, cols: usize, class_weight: f32) -> Result<DenseFeatureMap> {
        if t >= self.frames.len() || rows == 0 || cols == 0 {
            return Err(SfcError::Index {
                what: "frame",
                index: t,
                len: self.frames.len(),
            });
        }
        let (ch, cw) = (self.height as f64 / rows as f64, self.width as f64 / cols as f64);
        let frames = self.frames.len();
        let mut offsets = Vec::with_capacity(self.sprites.len());
        let mut next = rows * cols;
        let mut local = Vec::with_capacity(self.sprites.len());
        for s in &self.sprites {
            let smax = (0..frames).map(|t| s.scale(t)).fold(0.0, f64::max);
            let (hw, hh) = s.shape.half_extent();
            let bw = (2.0 * hw * smax / cw).ceil() as usize + 1;
            let bh = (2.0 * hh * smax / ch).ceil() as usize + 1;
            offsets.push(next);
            local.push(bw);
            next += bw * bh;
        }
        let content = next;
        let dim = content + self.classes();
        let mut data = vec![0f32; rows * cols * dim];
        for i in 0..rows {
            for j in 0..cols {
                let (px, py) = ((j as f64 + 0.5) * cw, (i as f64 + 0.5) * ch);
                let cell = &mut data[(i * cols + j) * dim..(i * cols + j + 1) * dim];
                match top_sprite(&self.sprites, t, px, py) {
                    Some(k) => {
                        let (x0, y0, _, _) = self.sprites[k].bbox(t);
                        let a = ((py - y0) / ch).floor().max(0.0) as usize;
                        let b = ((px - x0) / cw).floor().max(0.0) as usize;
                        cell[offsets[k] + a * local[k] + b] = 1.0;
                        cell[content + k + 1] = class_weight;
                    }
                    None => {
                        cell[i * cols + j] = 1.0;
                        cell[content] = class_weight;
                    }
                }
            }
        }
        DenseFeatureMap::new(rows, cols, dim, data)
    }
}

fn top_sprite(sprites: &[Sprite], t: usize, x: f64, y: f64) -> Option<usize> {
    sprites.iter().rposition(|s| s.contains(t, x, y))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Sample a scene from `spec` and render it; deterministic given `seed`.
pub fn generate_synthetic_video(spec: &SceneSpec, seed: u64) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = ValueNoise::new(rng.gen(), spec.noise_cell, spec.octaves);
    let palette = [random_color(&mut rng), random_color(&mut rng)];
    let count = rng.gen_range(spec.sprites.0..=spec.sprites.1);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let span = spec.frames.saturating_sub(1) as f64;
    let mut sprites = Vec::with_capacity(count);
    for _ in 0..count {
        let size = rng.gen_range(spec.sprite_size.0..=spec.sprite_size.1);
        let shape = if rng.gen_bool(0.5) {
            let other = (size * rng.gen_range(0.7..=1.3)).clamp(spec.sprite_size.0, spec.sprite_size.1);
            Shape::Rect { w: size, h: other }
        } else {
            Shape::Disc { r: size / 2.0 }
        };
        let scale_rate = if spec.max_scale_rate > 0.0 {
            rng.gen_range(-spec.max_scale_rate..=spec.max_scale_rate)
        } else {
            0.0
        };
        let grow = (0..spec.frames)
            .map(|t| 1.0 + scale_rate * t as f64)
            .fold(0.0, f64::max);
        let (hw, hh) = shape.half_extent();
        // keep the whole sprite inside the frame at its largest
        let (mx, my) = (hw * grow, hh * grow);
        let start = (rng.gen_range(mx..=w - mx), rng.gen_range(my..=h - my));
        let end = (rng.gen_range(mx..=w - mx), rng.gen_range(my..=h - my));
        let mut velocity = if span > 0.0 {
            ((end.0 - start.0) / span, (end.1 - start.1) / span)
        } else {
            (0.0, 0.0)
        };
        let speed = velocity.0.hypot(velocity.1);
        if speed > spec.max_speed {
            let k = spec.max_speed / speed;
            velocity = (velocity.0 * k, velocity.1 * k);
        }
        sprites.push(Sprite {
            shape,
            start,
            velocity,
            scale_rate,
            colors: [random_color(&mut rng), random_color(&mut rng)],
            texture: ValueNoise::new(rng.gen(), rng.gen_range(3.0..=6.0), 2),
        });
    }
    SyntheticVideo::render(spec.height, spec.width, spec.frames, &background, palette, sprites)
}
