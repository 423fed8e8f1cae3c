//! Crop sampling, the cell-to-image coordinate map and the positive mask.
//!
//! A view's feature cell `(i, j)` is mapped to the image-space center of the
//! region it covers inside its crop box. Two cells from different views are
//! positives when those centers are within `r` cell spacings of each other.

use rand::Rng;

use crate::error::{Result, SfcError};

/// Number of draws before [`CropSampler::sample`] falls back to the full frame.
pub const CROP_ATTEMPTS: usize = 10;
/// Number of view pairs tried before [`sample_positive_pair`] gives up.
pub const PAIR_ATTEMPTS: usize = 10;

/// Axis-aligned crop box in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CropBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// One sampled view: where it came from and how its feature grid lies on it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    /// `(height, width)` of the source frame.
    pub source: (usize, usize),
    pub crop: CropBox,
    pub flipped: bool,
    /// Side length of the square resized view.
    pub out_size: usize,
    /// `(rows, cols)` of the feature grid computed on the view.
    pub grid: (usize, usize),
}

impl CropGeometry {
    pub fn new(
        source: (usize, usize),
        crop: CropBox,
        flipped: bool,
        out_size: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if crop.w == 0 || crop.h == 0 {
            return Err(SfcError::Config(format!("empty crop box {crop:?}")));
        }
        if crop.x0 + crop.w > source.1 || crop.y0 + crop.h > source.0 {
            return Err(SfcError::Config(format!(
                "crop box {crop:?} exceeds source {}x{}",
                source.0, source.1
            )));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(SfcError::Config("feature grid must be non-empty".into()));
        }
        Ok(CropGeometry {
            source,
            crop,
            flipped,
            out_size,
            grid,
        })
    }

    /// The whole source frame, unflipped.
    pub fn full_frame(source: (usize, usize), out_size: usize, grid: (usize, usize)) -> Self {
        CropGeometry {
            source,
            crop: CropBox {
                x0: 0,
                y0: 0,
                w: source.1,
                h: source.0,
            },
            flipped: false,
            out_size,
            grid,
        }
    }

    /// Image-space `(row spacing, column spacing)` between cell centers.
    pub fn cell_spacing(&self) -> (f64, f64) {
        (
            self.crop.h as f64 / self.grid.0 as f64,
            self.crop.w as f64 / self.grid.1 as f64,
        )
    }

    /// Image-space `(x, y)` of the center of cell `(i, j)`.
    pub fn map_to_image(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        if i >= self.grid.0 {
            return Err(SfcError::Index {
                what: "grid row",
                index: i,
                len: self.grid.0,
            });
        }
        if j >= self.grid.1 {
            return Err(SfcError::Index {
                what: "grid column",
                index: j,
                len: self.grid.1,
            });
        }
        Ok(self.center(i, j))
    }

    fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let jj = if self.flipped { self.grid.1 - 1 - j } else { j };
        let (sy, sx) = self.cell_spacing();
        (
            self.crop.x0 as f64 + (jj as f64 + 0.5) * sx,
            self.crop.y0 as f64 + (i as f64 + 0.5) * sy,
        )
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Binary relation between the cells of view A (rows) and view B (columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PositiveMask {
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(SfcError::shape(
                "positive_mask",
                format!("{} bits for {rows}x{cols}", bits.len()),
            ));
        }
        Ok(PositiveMask { rows, cols, bits })
    }

    pub fn identity(n: usize) -> Self {
        PositiveMask {
            rows: n,
            cols: n,
            bits: (0..n * n).map(|k| k / n == k % n).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The mask seen from view B: `Mᵀ`.
    pub fn transposed(&self) -> Self {
        let mut bits = vec![false; self.bits.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                bits[j * self.rows + i] = self.bits[i * self.cols + j];
            }
        }
        PositiveMask {
            rows: self.cols,
            cols: self.rows,
            bits,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Mask as 0/1 weights in row-major order.
    pub fn weights<T: num_traits::Float>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

/// Mask entry `(i, j)` is set iff the image-space distance between cell `i`
/// of `a` and cell `j` of `b`, measured in units of the geometric mean of the
/// two views' mean cell spacings, is at most `radius`.
pub fn build_positive_mask(a: &CropGeometry, b: &CropGeometry, radius: f64) -> Result<PositiveMask> {
    if a.source != b.source {
        return Err(SfcError::Config(format!(
            "views come from different frames: {:?} vs {:?}",
            a.source, b.source
        )));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(SfcError::Config(format!("positive radius must be finite and >= 0, got {radius}")));
    }
    // Coordinates scaled by 2L, with L a common multiple of every grid
    // dimension, are integers; the test dist/unit <= r becomes
    // d² <= r²·S_a·S_b with S = 2L·mean spacing. Integer distances make the
    // mask exactly symmetric under view swaps and mirroring.
    let l = [a.grid.0, a.grid.1, b.grid.0, b.grid.1].into_iter().fold(1u64, |acc, g| lcm(acc, g as u64)) as i128;
    let centers = |g: &CropGeometry| -> Vec<(i128, i128)> {
        let (gh, gw) = (g.grid.0 as i128, g.grid.1 as i128);
        let (x0, y0, w, h) = (g.crop.x0 as i128, g.crop.y0 as i128, g.crop.w as i128, g.crop.h as i128);
        (0..g.grid.0)
            .flat_map(|i| (0..g.grid.1).map(move |j| (i, j)))
            .map(|(i, j)| {
                let jj = if g.flipped { g.grid.1 - 1 - j } else { j } as i128;
                (2 * l * x0 + (2 * jj + 1) * w * (l / gw), 2 * l * y0 + (2 * i as i128 + 1) * h * (l / gh))
            })
            .collect()
    };
    let spacing = |g: &CropGeometry| g.crop.h as i128 * (l / g.grid.0 as i128) + g.crop.w as i128 * (l / g.grid.1 as i128);
    let scale = (spacing(a) * spacing(b)) as f64 * radius * radius;
    let (ca, cb) = (centers(a), centers(b));
    let mut bits = Vec::with_capacity(ca.len() * cb.len());
    for &(xa, ya) in &ca {
        for &(xb, yb) in &cb {
            let d2 = (xa - xb) * (xa - xb) + (ya - yb) * (ya - yb);
            bits.push(d2 as f64 <= scale);
        }
    }
    Ok(PositiveMask {
        rows: ca.len(),
        cols: cb.len(),
        bits,
    })
}

fn lcm(a: u64, b: u64) -> u64 {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Intersection area over the smaller box area.
pub fn overlap_fraction(a: &CropGeometry, b: &CropGeometry) -> f64 {
    let (ra, rb) = (a.crop, b.crop);
    let ix = (ra.x0 + ra.w).min(rb.x0 + rb.w).saturating_sub(ra.x0.max(rb.x0));
    let iy = (ra.y0 + ra.h).min(rb.y0 + rb.h).saturating_sub(ra.y0.max(rb.y0));
    (ix * iy) as f64 / ra.area().min(rb.area()) as f64
}

/// Random-resized-crop sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSampler {
    /// Bounds on the crop's area as a fraction of the frame.
    pub scale: (f64, f64),
    /// Bounds on width/height, sampled log-uniformly.
    pub aspect: (f64, f64),
    /// Mirror the view horizontally with probability 1/2.
    pub hflip: bool,
    pub out_size: usize,
    pub grid: (usize, usize),
}

impl CropSampler {
    pub fn new(scale: (f64, f64), out_size: usize, grid: (usize, usize)) -> Result<Self> {
        let s = CropSampler {
            scale,
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            hflip: false,
            out_size,
            grid,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(SfcError::Config(format!(
                "crop scale bounds must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (alo, ahi) = self.aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(SfcError::Config(format!("invalid aspect range ({alo}, {ahi})")));
        }
        Ok(())
    }

    /// Draw one crop. The aspect range is intersected with what fits at the
    /// drawn area, so the area fraction stays uniform on `scale`.
    pub fn sample<R: Rng + ?Sized>(&self, source: (usize, usize), rng: &mut R) -> Result<CropGeometry> {
        self.validate()?;
        let (sh, sw) = (source.0 as f64, source.1 as f64);
        let frame = sh * sw;
        for _ in 0..CROP_ATTEMPTS {
            let frac = if self.scale.0 == self.scale.1 {
                self.scale.0
            } else {
                rng.gen_range(self.scale.0..=self.scale.1)
            };
            let area = frac * frame;
            if area <= 0.0 {
                continue;
            }
            // w = sqrt(area*ar) <= sw  and  h = sqrt(area/ar) <= sh
            let lo = self.aspect.0.max(area / (sh * sh));
            let hi = self.aspect.1.min(sw * sw / area);
            if lo > hi {
                continue;
            }
            let ar = if lo == hi {
                lo
            } else {
                rng.gen_range(lo.ln()..=hi.ln()).exp()
            };
            let w = (area * ar).sqrt().round() as usize;
            let h = (area / ar).sqrt().round() as usize;
            if w == 0 || h == 0 || w > source.1 || h > source.0 {
                continue;
            }
            let x0 = rng.gen_range(0..=source.1 - w);
            let y0 = rng.gen_range(0..=source.0 - h);
            let flipped = self.hflip && rng.gen_bool(0.5);
            return CropGeometry::new(
                source,
                CropBox { x0, y0, w, h },
                flipped,
                self.out_size,
                self.grid,
            );
        }
        Ok(CropGeometry::full_frame(source, self.out_size, self.grid))
    }
}

/// Outcome of drawing a training view pair.
#[derive(Clone, Debug)]
pub struct ViewPairGeometry {
    pub a: CropGeometry,
    pub b: CropGeometry,
    pub mask: PositiveMask,
    /// Pairs drawn, including the accepted one.
    pub attempts: usize,
    /// True when every attempt produced an empty mask and the identical
    /// full-frame fallback was used.
    pub fell_back: bool,
}

/// Draw view pairs until the positive mask is non-empty; after
/// [`PAIR_ATTEMPTS`] failures use two identical full-frame views.
pub fn sample_positive_pair<R: Rng + ?Sized>(
    source: (usize, usize),
    sampler: &CropSampler,
    radius: f64,
    rng: &mut R,
) -> Result<ViewPairGeometry> {
    for attempt in 1..=PAIR_ATTEMPTS {
        let a = sampler.sample(source, rng)?;
        let b = sampler.sample(source, rng)?;
        let mask = build_positive_mask(&a, &b, radius)?;
        if !mask.is_empty() {
            return Ok(ViewPairGeometry {
                a,
                b,
                mask,
                attempts: attempt,
                fell_back: false,
            });
        }
    }
    let a = CropGeometry::full_frame(source, sampler.out_size, sampler.grid);
    let mask = build_positive_mask(&a, &a, radius)?;
    Ok(ViewPairGeometry {
        a,
        b: a,
        mask,
        attempts: PAIR_ATTEMPTS,
        fell_back: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(x0: usize, y0: usize, w: usize, h: usize, flipped: bool, grid: usize) -> CropGeometry {
        CropGeometry::new((24, 24), CropBox { x0, y0, w, h }, flipped, 16, (grid, grid)).unwrap()
    }

    #[test]
    fn cell_centers() {
        assert_eq!(geom(0, 0, 16, 16, false, 2).map_to_image(0, 0).unwrap(), (4.0, 4.0));
        assert_eq!(geom(0, 0, 16, 16, true, 2).map_to_image(0, 0).unwrap(), (12.0, 4.0));
        assert_eq!(geom(8, 8, 16, 16, false, 2).map_to_image(1, 1).unwrap(), (20.0, 20.0));
        assert!(geom(0, 0, 16, 16, false, 2).map_to_image(2, 0).is_err());
        assert!(geom(0, 0, 16, 16, false, 2).map_to_image(0, 2).is_err());
    }

    #[test]
    fn identical_views_give_identity() {
        let g = geom(3, 5, 16, 12, true, 4);
        assert_eq!(build_positive_mask(&g, &g, 0.5).unwrap(), PositiveMask::identity(16));
    }

    #[test]
    fn shifted_views_share_one_cell() {
        let a = geom(0, 0, 16, 16, false, 2);
        let b = geom(8, 8, 16, 16, false, 2);
        let m = build_positive_mask(&a, &b, 0.5).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(3, 0));
        assert_eq!(build_positive_mask(&a, &b, 1e9).unwrap().count(), 16);
    }

    #[test]
    fn overlap_examples() {
        let a = geom(0, 0, 16, 16, false, 2);
        assert_eq!(overlap_fraction(&a, &a), 1.0);
        assert_eq!(overlap_fraction(&a, &geom(8, 8, 16, 16, false, 2)), 0.25);
        let c = CropGeometry::new((40, 40), CropBox { x0: 20, y0: 20, w: 10, h: 10 }, false, 8, (2, 2)).unwrap();
        let d = CropGeometry::new((40, 40), CropBox { x0: 0, y0: 0, w: 10, h: 10 }, false, 8, (2, 2)).unwrap();
        assert_eq!(overlap_fraction(&c, &d), 0.0);
    }

    #[test]
    fn different_sources_rejected() {
        let a = geom(0, 0, 16, 16, false, 2);
        let b = CropGeometry::full_frame((32, 32), 16, (2, 2));
        assert!(build_positive_mask(&a, &b, 0.5).is_err());
    }

    #[test]
    fn forced_full_frame() {
        let mut s = CropSampler::new((1.0, 1.0), 64, (16, 16)).unwrap();
        s.aspect = (1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = s.sample((64, 64), &mut rng).unwrap();
        assert_eq!(g.crop, CropBox { x0: 0, y0: 0, w: 64, h: 64 });
    }

    #[test]
    fn inverted_scale_is_config_error() {
        assert!(matches!(
            CropSampler::new((0.6, 0.4), 64, (16, 16)),
            Err(SfcError::Config(_))
        ));
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = CropSampler { hflip: true, ..CropSampler::new((0.0, 1.0), 64, (8, 8)).unwrap() };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| s.sample((48, 64), &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert!(draw(9).iter().all(|g| g.crop.x0 + g.crop.w <= 64 && g.crop.y0 + g.crop.h <= 48));
    }

    #[test]
    fn pair_sampling_never_returns_empty_mask() {
        let s = CropSampler::new((0.0, 0.05), 64, (16, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = sample_positive_pair((64, 64), &s, 0.5, &mut rng).unwrap();
            assert!(!p.mask.is_empty());
            if p.fell_back {
                assert_eq!(p.a, p.b);
            }
        }
    }
}
