//! View-pair augmentation: random resized crops plus optional photometric ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::error::{Result, SfcError};
use crate::geometry::{sample_positive_pair, CropSampler, ViewPairGeometry};

/// Brightness/contrast/saturation/hue jitter, applied with probability `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub p: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            p: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBlur {
    pub sigma: (f64, f64),
    pub p: f64,
}

impl Default for GaussianBlur {
    fn default() -> Self {
        GaussianBlur {
            sigma: (0.1, 1.0),
            p: 0.5,
        }
    }
}

/// Cropping is always on; every other op is independently switchable.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentationSpec {
    pub hflip: bool,
    pub color_jitter: Option<ColorJitter>,
    pub blur: Option<GaussianBlur>,
    pub grayscale: bool,
}

impl AugmentationSpec {
    pub fn crop_only() -> Self {
        Self::default()
    }

    /// Flip, color jitter and blur.
    pub fn photometric() -> Self {
        AugmentationSpec {
            hflip: true,
            color_jitter: Some(ColorJitter::default()),
            blur: Some(GaussianBlur::default()),
            grayscale: false,
        }
    }

    pub fn has_photometric(&self) -> bool {
        self.color_jitter.is_some() || self.blur.is_some() || self.grayscale
    }
}

/// Independent streams for crop geometry and photometric parameters.
#[derive(Clone, Debug)]
pub struct ViewRngs {
    pub geometry: ChaCha8Rng,
    pub photometric: ChaCha8Rng,
}

impl ViewRngs {
    pub fn new(seed: u64) -> Self {
        let mut geometry = ChaCha8Rng::seed_from_u64(seed);
        geometry.set_stream(1);
        let mut photometric = ChaCha8Rng::seed_from_u64(seed);
        photometric.set_stream(2);
        ViewRngs {
            geometry,
            photometric,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    pub geometry: ViewPairGeometry,
}

/// Two crops of `image` with a non-empty positive mask, resized to the
/// sampler's output size, then photometrically augmented independently.
pub fn make_view_pair(
    image: &Image,
    sampler: &CropSampler,
    radius: f64,
    aug: &AugmentationSpec,
    rngs: &mut ViewRngs,
) -> Result<ViewPair> {
    if image.channels != 3 {
        return Err(SfcError::shape("make_view_pair", format!("{} channels, need 3", image.channels)));
    }
    let sampler = CropSampler {
        hflip: aug.hflip,
        ..*sampler
    };
    let geometry = sample_positive_pair((image.height, image.width), &sampler, radius, &mut rngs.geometry)?;
    let render = |g: &crate::geometry::CropGeometry| {
        let c = g.crop;
        image.crop_resize(c.x0, c.y0, c.w, c.h, g.out_size, g.out_size, g.flipped)
    };
    let mut view1 = render(&geometry.a);
    let mut view2 = render(&geometry.b);
    apply_photometric(&mut view1, aug, &mut rngs.photometric);
    apply_photometric(&mut view2, aug, &mut rngs.photometric);
    Ok(ViewPair {
        view1,
        view2,
        geometry,
    })
}

/// Photometric ops in a fixed order: jitter, grayscale, blur.
pub fn apply_photometric<R: Rng + ?Sized>(img: &mut Image, aug: &AugmentationSpec, rng: &mut R) {
    if let Some(j) = aug.color_jitter {
        if rng.gen_bool(j.p) {
            let factor = |rng: &mut R, s: f32| if s > 0.0 { rng.gen_range(1.0 - s..=1.0 + s).max(0.0) } else { 1.0 };
            let b = factor(rng, j.brightness);
            let c = factor(rng, j.contrast);
            let s = factor(rng, j.saturation);
            let h = if j.hue > 0.0 { rng.gen_range(-j.hue..=j.hue) } else { 0.0 };
            adjust_brightness(img, b);
            adjust_contrast(img, c);
            adjust_saturation(img, s);
            adjust_hue(img, h);
        }
    }
    if aug.grayscale {
        to_grayscale(img);
    }
    if let Some(bl) = aug.blur {
        if rng.gen_bool(bl.p) {
            let sigma = rng.gen_range(bl.sigma.0..=bl.sigma.1);
            gaussian_blur(img, sigma);
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn pixels(img: &Image) -> usize {
    img.height * img.width
}

pub fn adjust_brightness(img: &mut Image, f: f32) {
    for v in &mut img.data {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

pub fn adjust_contrast(img: &mut Image, f: f32) {
    let n = pixels(img);
    let mean = (0..n)
        .map(|p| luma(img.data[p], img.data[n + p], img.data[2 * n + p]) as f64)
        .sum::<f64>() as f32
        / n as f32;
    for v in &mut img.data {
        *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0);
    }
}

pub fn adjust_saturation(img: &mut Image, f: f32) {
    let n = pixels(img);
    for p in 0..n {
        let y = luma(img.data[p], img.data[n + p], img.data[2 * n + p]);
        for c in 0..3 {
            let v = &mut img.data[c * n + p];
            *v = (f * *v + (1.0 - f) * y).clamp(0.0, 1.0);
        }
    }
}

/// Rotate hue by `shift` turns.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    if shift == 0.0 {
        return;
    }
    let n = pixels(img);
    for p in 0..n {
        let (r, g, b) = (img.data[p], img.data[n + p], img.data[2 * n + p]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        if d <= 0.0 {
            continue;
        }
        let h = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        } / 6.0;
        let h = (h + shift).rem_euclid(1.0) * 6.0;
        let x = d * (1.0 - ((h % 2.0) - 1.0).abs());
        let (r1, g1, b1) = match h as usize {
            0 => (d, x, 0.0),
            1 => (x, d, 0.0),
            2 => (0.0, d, x),
            3 => (0.0, x, d),
            4 => (x, 0.0, d),
            _ => (d, 0.0, x),
        };
        img.data[p] = r1 + min;
        img.data[n + p] = g1 + min;
        img.data[2 * n + p] = b1 + min;
    }
}

pub fn to_grayscale(img: &mut Image) {
    let n = pixels(img);
    for p in 0..n {
        let y = luma(img.data[p], img.data[n + p], img.data[2 * n + p]);
        for c in 0..3 {
            img.data[c * n + p] = y;
        }
    }
}

/// Separable Gaussian blur with edge clamping, radius `ceil(3σ)`.
pub fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = vec![0f32; (h * w) as usize];
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x + i as isize - r).clamp(0, w - 1);
                    acc += kv * plane[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y + i as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PositiveMask;

    fn noise_image(seed: u64, s: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, s, s, (0..3 * s * s).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn forced_full_frame_views() {
        let img = noise_image(0, 32);
        let sampler = CropSampler::new((1.0, 1.0), 16, (4, 4)).unwrap();
        let pair = make_view_pair(&img, &sampler, 0.5, &AugmentationSpec::crop_only(), &mut ViewRngs::new(1)).unwrap();
        let full = img.crop_resize(0, 0, 32, 32, 16, 16, false);
        assert_eq!(pair.view1, full);
        assert_eq!(pair.view2, full);
        assert_eq!(pair.geometry.mask, PositiveMask::identity(16));
    }

    #[test]
    fn grayscale_views_have_equal_channels() {
        let img = noise_image(1, 32);
        let sampler = CropSampler::new((0.2, 1.0), 16, (4, 4)).unwrap();
        let aug = AugmentationSpec {
            grayscale: true,
            ..AugmentationSpec::photometric()
        };
        let pair = make_view_pair(&img, &sampler, 0.5, &aug, &mut ViewRngs::new(2)).unwrap();
        for v in [&pair.view1, &pair.view2] {
            assert_eq!(v.plane(0), v.plane(1));
            assert_eq!(v.plane(1), v.plane(2));
        }
    }

    #[test]
    fn photometric_flags_do_not_move_geometry() {
        let img = noise_image(2, 48);
        let sampler = CropSampler::new((0.0, 1.0), 16, (4, 4)).unwrap();
        let plain = AugmentationSpec { hflip: true, ..AugmentationSpec::crop_only() };
        for seed in 0..10 {
            let a = make_view_pair(&img, &sampler, 0.5, &plain, &mut ViewRngs::new(seed)).unwrap();
            let b = make_view_pair(&img, &sampler, 0.5, &AugmentationSpec::photometric(), &mut ViewRngs::new(seed)).unwrap();
            assert_eq!(a.geometry.a, b.geometry.a);
            assert_eq!(a.geometry.b, b.geometry.b);
            assert_eq!(a.geometry.mask, b.geometry.mask);
        }
    }

    #[test]
    fn hue_round_trip_and_identities() {
        let img = noise_image(3, 8);
        let mut h = img.clone();
        adjust_hue(&mut h, 0.25);
        adjust_hue(&mut h, -0.25);
        let err = img.data.iter().zip(&h.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "{err}");
        let mut same = img.clone();
        adjust_brightness(&mut same, 1.0);
        adjust_contrast(&mut same, 1.0);
        adjust_saturation(&mut same, 1.0);
        assert_eq!(same, img);
    }

    #[test]
    fn blur_preserves_constants() {
        let mut img = Image::new(3, 9, 9, vec![0.25; 243]).unwrap();
        gaussian_blur(&mut img, 1.3);
        assert!(img.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
