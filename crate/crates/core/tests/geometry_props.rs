use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfc_core::geometry::{build_positive_mask, sample_positive_pair, CropBox, CropGeometry, CropSampler};

fn geometry() -> impl Strategy<Value = CropGeometry> {
    (8usize..64, 8usize..64, 2usize..10, 2usize..10, any::<bool>()).prop_flat_map(|(sh, sw, gh, gw, flip)| {
        (1..=sw, 1..=sh).prop_flat_map(move |(w, h)| {
            (0..=sw - w, 0..=sh - h).prop_map(move |(x0, y0)| {
                CropGeometry::new((sh, sw), CropBox { x0, y0, w, h }, flip, 32, (gh, gw)).unwrap()
            })
        })
    })
}

fn pair() -> impl Strategy<Value = (CropGeometry, CropGeometry)> {
    (geometry(), geometry()).prop_map(|(a, mut b)| {
        // b must live in a's frame; pin its box inside a's source
        let (sh, sw) = a.source;
        let w = b.crop.w.min(sw);
        let h = b.crop.h.min(sh);
        let crop = CropBox { x0: b.crop.x0.min(sw - w), y0: b.crop.y0.min(sh - h), w, h };
        b = CropGeometry::new(a.source, crop, b.flipped, 32, b.grid).unwrap();
        (a, b)
    })
}

fn mirrored(g: &CropGeometry) -> CropGeometry {
    let crop = CropBox { x0: g.source.1 - g.crop.x0 - g.crop.w, ..g.crop };
    CropGeometry::new(g.source, crop, !g.flipped, g.out_size, g.grid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_grows_with_radius((a, b) in pair(), r in 0.0f64..3.0, dr in 0.0f64..2.0) {
        let small = build_positive_mask(&a, &b, r).unwrap();
        let large = build_positive_mask(&a, &b, r + dr).unwrap();
        for (s, l) in small.bits().iter().zip(large.bits()) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn swapping_views_transposes_the_mask((a, b) in pair(), r in 0.0f64..3.0) {
        let ab = build_positive_mask(&a, &b, r).unwrap();
        let ba = build_positive_mask(&b, &a, r).unwrap();
        prop_assert_eq!(ab.transposed(), ba);
    }

    // Mirroring the frame moves each crop and toggles its flip; every cell
    // keeps its image content, so the relation is unchanged.
    #[test]
    fn mirroring_both_views_preserves_the_mask((a, b) in pair(), r in prop::sample::select(vec![0.25, 0.5, 1.0, 2.0])) {
        let m = build_positive_mask(&a, &b, r).unwrap();
        let mm = build_positive_mask(&mirrored(&a), &mirrored(&b), r).unwrap();
        prop_assert_eq!(m, mm);
    }

    #[test]
    fn identical_views_at_zero_radius_pair_each_cell_with_itself(a in geometry()) {
        let m = build_positive_mask(&a, &a, 0.0).unwrap();
        for i in 0..a.cells() {
            for j in 0..a.cells() {
                prop_assert_eq!(m.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn accepted_pairs_have_positives(seed in any::<u64>(), lo in 0.05f64..0.5, r in 0.25f64..2.0) {
        let sampler = CropSampler::new((lo, 1.0), 32, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_positive_pair((48, 64), &sampler, r, &mut rng).unwrap();
        prop_assert!(p.mask.count() > 0);
        if p.fell_back {
            prop_assert!(p.a == p.b && p.attempts == 10);
        }
    }
}

#[test]
fn crop_area_fraction_is_uniform_on_the_scale_range() {
    const SAMPLES: usize = 100_000;
    const BINS: usize = 10;
    // 4.5 standard deviations of a binomial bin count at p = 0.1
    const BIN_TOL: f64 = 4.5 * 94.868;
    let (lo, hi) = (0.2, 1.0);
    let sampler = CropSampler::new((lo, hi), 64, (8, 8)).unwrap();
    let source = (1000, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0usize; BINS];
    for _ in 0..SAMPLES {
        let g = sampler.sample(source, &mut rng).unwrap();
        let frac = g.crop.area() as f64 / 1e6;
        let bin = (((frac - lo) / (hi - lo)) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
        counts[bin] += 1;
    }
    let expect = SAMPLES as f64 / BINS as f64;
    for (b, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expect).abs() < BIN_TOL, "bin {b}: {c} of {SAMPLES} ({counts:?})");
    }
}

#[test]
fn disjoint_views_fall_back_to_full_frame() {
    // tiny crops at a zero radius almost never share a cell center
    let sampler = CropSampler::new((0.01, 0.01), 32, (2, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = sample_positive_pair((200, 200), &sampler, 0.0, &mut rng).unwrap();
    assert!(p.fell_back);
    assert_eq!(p.a, CropGeometry::full_frame((200, 200), 32, (2, 2)));
    assert_eq!(p.mask.count(), 4);
}
