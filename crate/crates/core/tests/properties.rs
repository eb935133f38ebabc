use proptest::prelude::*;

use locotrack::config::Variant;
use locotrack::correlation::{local_corr_4d, transpose_corr};
use locotrack::metrics::{evaluate, FrameSize, Sample};
use locotrack::refiner::{build_bias, BiasTable, RefinerConfig};
use locotrack::track_init::kernel_softargmax_f64;
use locotrack::{GroundTruthTrack, OcclusionTrack, Tensor, Track, WeightsContainer};

fn map_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softargmax_stays_in_grid((h, w, vals) in map_strategy(), tau in 0.5f64..40.0, sigma in 0.5f64..5.0) {
        let r = kernel_softargmax_f64(&vals, h, w, tau, sigma);
        prop_assert!(r.x >= -1e-9 && r.x <= (w - 1) as f64 + 1e-9);
        prop_assert!(r.y >= -1e-9 && r.y <= (h - 1) as f64 + 1e-9);
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn local_corr_is_cosine_and_transposes(
        data in prop::collection::vec(-1.0f32..1.0, 10 * 10 * 4),
        p in (-3.0f32..12.0, -3.0f32..12.0),
        q in (0.0f32..9.0, 0.0f32..9.0),
    ) {
        let m = Tensor::new(vec![10, 10, 4], data).unwrap();
        let v = m.map_view().unwrap();
        let a = local_corr_4d(v, v, p, q, 3, 3).unwrap();
        prop_assert!(a.vol.data().iter().all(|x| x.abs() <= 1.0 + 1e-5));
        let b = local_corr_4d(v, v, q, p, 3, 3).unwrap();
        prop_assert!(transpose_corr(&a).vol.max_abs_diff(&b.vol) < 1e-6);
    }

    #[test]
    fn container_round_trip_is_bit_exact(
        entries in prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", prop::collection::vec(any::<u32>(), 1..20), 1..5),
    ) {
        let mut w = WeightsContainer::new();
        for (name, bits) in &entries {
            let data = bits.iter().map(|&b| f32::from_bits(b)).collect();
            w.insert(name.clone(), Tensor::new(vec![bits.len()], data).unwrap()).unwrap();
        }
        let back = WeightsContainer::from_bytes(&w.to_bytes()).unwrap();
        for (name, bits) in &entries {
            let got: Vec<u32> = back.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(&got, bits);
        }
    }

    #[test]
    fn truncated_container_never_parses(cut in 1usize..40) {
        let mut w = WeightsContainer::new();
        w.insert("a.b", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = w.to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(WeightsContainer::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn metrics_are_fractions(
        frames in 2usize..12,
        seed_pts in prop::collection::vec((0.0f32..256.0, 0.0f32..256.0, any::<bool>(), -3.0f32..3.0, -30.0f32..30.0), 12),
    ) {
        let pts = &seed_pts[..frames];
        let gt = GroundTruthTrack {
            positions: pts.iter().map(|p| [p.0, p.1]).collect(),
            visible: pts.iter().enumerate().map(|(i, p)| p.2 || i == 0).collect(),
        };
        let track = Track { positions: pts.iter().map(|p| [p.0 + p.4, p.1 - p.4]).collect() };
        let occ = OcclusionTrack { logits: pts.iter().map(|p| p.3).collect() };
        let r = evaluate(&[Sample { track: &track, occlusion: &occ, gt: &gt }], FrameSize::EVAL).unwrap();
        for v in [r.aj, r.pck_avg, r.oa] {
            prop_assert!((0.0..=1.0).contains(&v), "{}", v);
        }
    }

    #[test]
    fn every_bias_row_keeps_the_diagonal(frames in 1usize..40) {
        for variant in [Variant::Small, Variant::Base] {
            let cfg = RefinerConfig::new(variant);
            let b = build_bias(frames, &cfg, &BiasTable::geometric(cfg.heads));
            for h in 0..cfg.heads {
                for t in 0..frames {
                    prop_assert_eq!(b.at(&[h, t, t]), 0.0);
                    let row = &b.data()[(h * frames + t) * frames..][..frames];
                    prop_assert!(row.iter().all(|&v| v <= 0.0));
                }
            }
        }
    }
}
