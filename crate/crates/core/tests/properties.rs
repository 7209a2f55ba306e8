//! Property-based invariants for the data plumbing and routing.

use proptest::prelude::*;
use rare_unet::data::{self, LabelVolume};
use rare_unet::routing::select_entry_depth;

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..8, 2usize..8, 2usize..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Padding to a larger shape and cropping back is the identity.
    #[test]
    fn pad_then_crop_is_identity(
        (d, h, w) in dims(),
        (pd, ph, pw) in (0usize..5, 0usize..5, 0usize..5),
        seed in 0u64..1000,
    ) {
        let n = d * h * w;
        let v: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed + 1) % 97) as f32).collect();
        let big = [d + pd, h + ph, w + pw];
        let padded = data::pad_or_crop(&v, 1, [d, h, w], big, 0.0);
        let back = data::pad_or_crop(&padded, 1, big, [d, h, w], 0.0);
        prop_assert_eq!(back, v);
    }

    /// Nearest-neighbor label resampling never invents label values.
    #[test]
    fn label_resampling_preserves_value_set(
        (d, h, w) in (1usize..5, 1usize..5, 1usize..5),
        seed in 0u64..1000,
    ) {
        let shape = [d * 4, h * 4, w * 4];
        let n = shape.iter().product::<usize>();
        let labels: Vec<u8> = (0..n).map(|i| (((i as u64) ^ seed) % 4) as u8).collect();
        let lv = LabelVolume::new(shape.to_vec(), labels.clone()).unwrap();
        for factor in [2usize, 4] {
            let down = data::downsample_labels(&lv, factor).unwrap();
            for &v in &down.data {
                prop_assert!(labels.contains(&v));
            }
        }
    }

    /// Percentile normalization maps into [0,1] and preserves ordering.
    #[test]
    fn normalize_is_monotone_into_unit_range(seed in 0u64..2000, n in 8usize..200) {
        let v: Vec<f32> = (0..n)
            .map(|i| (((i as u64).wrapping_mul(seed * 2 + 1) % 1013) as f32) * 0.013 - 3.0)
            .collect();
        prop_assume!(v.iter().any(|&x| x != v[0]));
        let z = data::normalize_intensity(&v).unwrap();
        prop_assert!(z.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // the clipped extremes land on 0 and 1 up to one f32 rounding step
        prop_assert!(z.iter().any(|&x| x <= 1e-6) && z.iter().any(|&x| x >= 1.0 - 1e-6));
        for i in 0..n {
            for j in 0..n {
                if v[i] < v[j] {
                    prop_assert!(z[i] <= z[j]);
                }
            }
        }
    }

    /// Routing is monotone: shrinking the input never selects a shallower
    /// entry depth.
    #[test]
    fn routing_monotone_in_shrinkage(
        (d, h, w) in (4usize..64, 4usize..64, 4usize..64),
    ) {
        let full = [32usize, 64, 32];
        let a = select_entry_depth([d, h, w], full, 3).unwrap().entry_depth;
        let smaller = [(d / 2).max(1), (h / 2).max(1), (w / 2).max(1)];
        let b = select_entry_depth(smaller, full, 3).unwrap().entry_depth;
        prop_assert!(b >= a);
    }
}
