use proptest::prelude::*;
use sfc_core::encoder::DenseFeatureMap;
use sfc_core::fusion::{fuse_feature_maps, fused_affinity};

const CELLS: usize = 6;

fn unit_away_from_zero() -> impl Strategy<Value = f32> {
    prop_oneof![-2.0f32..-0.1, 0.1f32..2.0]
}

fn map(channels: usize) -> impl Strategy<Value = DenseFeatureMap> {
    prop::collection::vec(unit_away_from_zero(), CELLS * channels)
        .prop_map(move |d| DenseFeatureMap::new(2, 3, channels, d).unwrap())
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let n = |v: &[f32]| v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

fn affinities(s: &DenseFeatureMap, f: &DenseFeatureMap, lambda: f64) -> Vec<f64> {
    let fused = fuse_feature_maps(s, f, lambda).unwrap();
    (0..CELLS).flat_map(|q| fused_affinity(&fused, (q / 3, q % 3), &fused).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fused_cosine_is_a_convex_combination(s in map(3), f in map(4), lambda in 0.0f64..4.0) {
        let got = affinities(&s, &f, lambda);
        let l2 = lambda * lambda;
        for q in 0..CELLS {
            for c in 0..CELLS {
                let want = (cos(s.cell(q / 3, q % 3), s.cell(c / 3, c % 3))
                    + l2 * cos(f.cell(q / 3, q % 3), f.cell(c / 3, c % 3)))
                    / (1.0 + l2);
                prop_assert!((got[q * CELLS + c] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fused_halves_have_unit_and_lambda_norms(s in map(3), f in map(2), lambda in 0.0f64..4.0) {
        let fused = fuse_feature_maps(&s, &f, lambda).unwrap();
        for q in 0..CELLS {
            let v = fused.cell(q / 3, q % 3);
            let n = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
            prop_assert!((n(&v[..3]) - 1.0).abs() < 1e-6);
            prop_assert!((n(&v[3..]) - lambda).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_rescaling_of_a_cell_leaves_affinities_unchanged(
        s in map(3),
        f in map(3),
        lambda in 0.1f64..3.0,
        cell in 0..CELLS,
        k in 0.01f32..100.0,
    ) {
        let before = affinities(&s, &f, lambda);
        let (mut s2, mut f2) = (s.clone(), f.clone());
        for v in &mut s2.data[cell * 3..cell * 3 + 3] {
            *v *= k;
        }
        for v in &mut f2.data[cell * 3..cell * 3 + 3] {
            *v *= 1.0 / k;
        }
        let after = affinities(&s2, &f2, lambda);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn affinity_moves_toward_the_fine_similarity_as_lambda_grows(
        s in map(3),
        f in map(3),
        lo in 0.0f64..2.0,
        step in 0.05f64..2.0,
    ) {
        let (a, b) = (affinities(&s, &f, lo), affinities(&s, &f, lo + step));
        for q in 0..CELLS {
            for c in 0..CELLS {
                let ss = cos(s.cell(q / 3, q % 3), s.cell(c / 3, c % 3));
                let sf = cos(f.cell(q / 3, q % 3), f.cell(c / 3, c % 3));
                let i = q * CELLS + c;
                if sf > ss + 1e-6 {
                    prop_assert!(b[i] > a[i]);
                } else if sf < ss - 1e-6 {
                    prop_assert!(b[i] < a[i]);
                }
            }
        }
    }

    #[test]
    fn huge_lambda_ranks_like_the_fine_branch(s in map(3), f in map(5)) {
        let got = affinities(&s, &f, 1e6);
        for q in 0..CELLS {
            let fine: Vec<f64> = (0..CELLS).map(|c| cos(f.cell(q / 3, q % 3), f.cell(c / 3, c % 3))).collect();
            for x in 0..CELLS {
                for y in 0..CELLS {
                    // ties within the perturbation size are not ordered
                    if fine[x] > fine[y] + 1e-9 {
                        prop_assert!(got[q * CELLS + x] > got[q * CELLS + y]);
                    }
                }
            }
        }
    }
}

#[test]
fn three_four_five_example() {
    let s = DenseFeatureMap::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
    let f = DenseFeatureMap::new(1, 1, 2, vec![0.0, 5.0]).unwrap();
    let fused = fuse_feature_maps(&s, &f, 2.0).unwrap();
    let want = [0.6, 0.8, 0.0, 2.0];
    for (g, w) in fused.cell(0, 0).iter().zip(want) {
        assert!((g - w).abs() < 1e-7, "{:?}", fused.cell(0, 0));
    }
}

#[test]
fn antipodal_fine_halves_cancel_identical_semantic_halves() {
    let s = DenseFeatureMap::new(1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let f = DenseFeatureMap::new(1, 2, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
    let fused = fuse_feature_maps(&s, &f, 1.0).unwrap();
    let a = fused_affinity(&fused, (0, 0), &fused).unwrap();
    assert!((a[0] - 1.0).abs() < 1e-12);
    assert!(a[1].abs() < 1e-12);
}

#[test]
fn mismatched_lambdas_are_a_config_error() {
    let s = DenseFeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
    let a = fuse_feature_maps(&s, &s, 1.0).unwrap();
    let b = fuse_feature_maps(&s, &s, 2.0).unwrap();
    let e = fused_affinity(&a, (0, 0), &b).unwrap_err();
    assert!(matches!(e, sfc_core::SfcError::Config(_)), "{e}");
}
