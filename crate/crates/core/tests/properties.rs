use disentangle::data::{augment, split_indices, ClipTensor, MaskVolume};
use disentangle::losses::{decompose, weight_mask};
use disentangle::model::{cross_convolve, MotionKernelSet};
use disentangle::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clip_and_mask() -> impl Strategy<Value = (ClipTensor, MaskVolume)> {
    (1usize..4, 1usize..7, 1usize..7, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(t, h, w, c)| {
        (
            prop::collection::vec(-1.0f32..=1.0, t * h * w * c),
            prop::collection::vec(0u8..=1, t * h * w),
        )
            .prop_map(move |(v, m)| {
                (ClipTensor::new([t, h, w, c], v).unwrap(), MaskVolume::new([t, h, w], m).unwrap())
            })
    })
}

proptest! {
    #[test]
    fn foreground_and_background_sum_to_the_clip((clip, mask) in clip_and_mask()) {
        let d = decompose(&clip, &mask).unwrap();
        for ((&x, &f), &b) in clip.values().iter().zip(d.fg.values()).zip(d.bg.values()) {
            prop_assert_eq!(f + b, x);
            prop_assert!(f == 0.0 || b == 0.0);
        }
    }

    #[test]
    fn foreground_weight_never_drops_below_one(mask in prop::collection::vec(0u8..=1, 1..200)) {
        let w = weight_mask::<f64>(&mask).unwrap();
        prop_assert!(w.weights.iter().all(|&v| v >= 1.0));
        prop_assert_eq!(w.fg_area + w.bg_area, mask.len());
        if w.fg_area > 0 && w.fg_area <= w.bg_area {
            let mass: f64 = mask.iter().zip(&w.weights).filter(|(m, _)| **m == 1).map(|(_, v)| v).sum();
            prop_assert!((mass - w.bg_area as f64).abs() < 1e-9 * w.bg_area as f64);
        }
    }

    #[test]
    fn centred_delta_kernels_copy_the_map(c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[c, 1, h, w], (0..c * h * w).map(|_| r.random_range(-2.0f64..2.0)).collect()).unwrap();
        let k = 3;
        let mut delta = vec![0.0; c * k * k];
        for ch in 0..c {
            delta[ch * k * k + 4] = 1.0;
        }
        let kernels = MotionKernelSet { kernels: Tensor::from_vec(&[c, k, k], delta).unwrap() };
        prop_assert_eq!(cross_convolve(&x, &kernels).unwrap(), x);
    }

    #[test]
    fn augmentation_keeps_mask_aligned((clip, mask) in clip_and_mask(), seed in any::<u64>()) {
        let item = disentangle::data::AnnotatedClip::new(clip, Some(mask), Some(0), "v").unwrap();
        let out = augment(&item, &mut ChaCha8Rng::seed_from_u64(seed));
        // Same pixel multiset per frame set, and the foreground stays the
        // foreground: decomposition commutes with the transform.
        let before = decompose(&item.clip, item.mask.as_ref().unwrap()).unwrap();
        let after = decompose(&out.clip, out.mask.as_ref().unwrap()).unwrap();
        let mut a: Vec<f32> = before.fg.values().to_vec();
        let mut b: Vec<f32> = after.fg.values().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(out.label, item.label);
    }

    #[test]
    fn splits_never_share_a_video(n_videos in 2usize..30, per_video in 1usize..4, frac in 0.05f64..0.9, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n_videos).flat_map(|v| (0..per_video).map(move |_| format!("video-{v}"))).collect();
        let (train, val) = split_indices(&ids, frac, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), ids.len());
        let train_ids: std::collections::BTreeSet<_> = train.iter().map(|&i| &ids[i]).collect();
        prop_assert!(val.iter().all(|&i| !train_ids.contains(&ids[i])));
    }
}
