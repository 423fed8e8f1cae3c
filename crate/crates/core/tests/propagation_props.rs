use proptest::prelude::*;
use sfc_core::encoder::DenseFeatureMap;
use sfc_core::propagation::{
    context_frames, propagate_frame, propagate_keypoints, propagate_video, restricted_affinity, LabelGrid,
    PropagationConfig,
};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Case {
    features: Vec<DenseFeatureMap>,
    first: LabelGrid,
    cfg: PropagationConfig,
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..6, 2usize..6, 2usize..6, 1usize..6, 2usize..5).prop_flat_map(|(rows, cols, frames, dim, classes)| {
        let feats = prop::collection::vec(prop::collection::vec(-1.0f32..1.0, rows * cols * dim), frames);
        let labels = prop::collection::vec(0.0f64..1.0, rows * cols * classes);
        let cfg = (1usize..20, 1usize..6, 0usize..5, prop::sample::select(vec![0.01, 0.07, 0.5, 2.0]));
        (feats, labels, cfg).prop_map(move |(f, l, (top_k, context, radius, temperature))| {
            let features = f.into_iter().map(|d| DenseFeatureMap::new(rows, cols, dim, d).unwrap()).collect();
            let mut data = Vec::with_capacity(l.len());
            for row in l.chunks(classes) {
                let s: f64 = row.iter().sum::<f64>() + 1e-3;
                data.extend(row.iter().enumerate().map(|(c, v)| (v + if c == 0 { 1e-3 } else { 0.0 }) / s));
            }
            Case {
                features,
                first: LabelGrid::new(rows, cols, classes, data).unwrap(),
                cfg: PropagationConfig { top_k, context, radius, temperature },
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn propagated_rows_stay_on_the_simplex(c in case()) {
        let out = propagate_video(&c.features, &c.first, &c.cfg).unwrap();
        prop_assert_eq!(out.len(), c.features.len());
        prop_assert_eq!(&out[0], &c.first);
        for g in &out {
            prop_assert!(g.max_row_sum_error() <= SIMPLEX_TOL);
            prop_assert!(g.data.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn keypoint_channels_stay_distributions_over_the_grid(c in case()) {
        let mut first = c.first.clone();
        first.normalize_channels();
        for g in propagate_keypoints(&c.features, &first, &c.cfg).unwrap().iter().skip(1) {
            for ch in 0..g.channels {
                let s: f64 = (0..g.cells()).map(|q| g.data[q * g.channels + ch]).sum();
                prop_assert!((s - 1.0).abs() <= SIMPLEX_TOL || s == 0.0);
            }
        }
    }

    #[test]
    fn context_holds_the_first_frame_and_the_last_m(t in 1usize..60, m in 1usize..25) {
        let ctx = context_frames(t, m);
        prop_assert_eq!(ctx[0], 0);
        let rest: Vec<usize> = (t.saturating_sub(m).max(1)..t).collect();
        prop_assert_eq!(&ctx[1..], rest.as_slice());
        prop_assert!(ctx.len() <= m + 1);
    }

    // With m = 1, frame t is a function of frames 0 and t-1 alone: older
    // frames have left the window and are discarded.
    #[test]
    fn frames_outside_the_window_are_discarded(c in case()) {
        prop_assume!(c.features.len() >= 3);
        let cfg = PropagationConfig { context: 1, ..c.cfg };
        let out = propagate_video(&c.features, &c.first, &cfg).unwrap();
        let t = c.features.len() - 1;
        let aff = restricted_affinity(&c.features[t], &[&c.features[0], &c.features[t - 1]], cfg.radius, cfg.temperature)
            .unwrap();
        let direct = propagate_frame(&aff, &[&out[0], &out[t - 1]], cfg.top_k).unwrap();
        for (a, b) in direct.data.iter().zip(&out[t].data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn single_and_fused_defaults() {
    let s = PropagationConfig::single();
    assert_eq!((s.top_k, s.context, s.radius, s.temperature), (10, 20, 12, 0.07));
    let f = PropagationConfig::fused();
    assert_eq!((f.top_k, f.context, f.radius), (15, 20, 15));
    assert_eq!(s.rescaled(16).radius, 5);
    assert_eq!(f.rescaled(16).radius, 7);
    assert_eq!(s.rescaled(1).radius, 1);
}
