use monobev::camgeom::{CameraRig, RigLayout};
use monobev::maskcurriculum::{
    apply_masks, cyclic_lr, front_only_masks, inverse_block_mask, mask_schedule, sample_camera_masks, sample_ratio,
    LrScheduleSpec, MaskScheduleState, MaskSpec, PatchMask,
};
use monobev::synthscene::{generate_scene, FrameSample, LaneLayout, ObjectClass, SceneSpec};
use monobev::bevmodel::BevGridSpec;
use monobev::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

#[test]
fn schedule_is_a_monotone_staircase() {
    let mut prev = 0.0;
    for e in 0..30 {
        let s = mask_schedule(e).unwrap();
        let step = s.mu - prev;
        assert!(step.abs() < 1e-12 || (step - 0.2).abs() < 1e-12, "epoch {e}: jump {step}");
        assert!([0.0, 0.2, 0.4, 0.6, 0.8, 1.0].contains(&s.mu));
        let edge = e < 4 || e >= 20;
        assert_eq!(s.sigma, if edge { 0.0 } else { 0.2 });
        prev = s.mu;
    }
    assert!(matches!(mask_schedule(30), Err(Error::Validation(_))));
}

/// E[clamp(X, 0, 1)] for X ~ N(mu, sigma^2).
fn clamped_mean(mu: f64, sigma: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let a = (0.0 - mu) / sigma;
    let b = (1.0 - mu) / sigma;
    mu * (n.cdf(b) - n.cdf(a)) + sigma * (n.pdf(a) - n.pdf(b)) + (1.0 - n.cdf(b))
}

#[test]
fn ratio_draws_match_clamped_gaussian_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mu in [0.2, 0.4, 0.8] {
        let st = MaskScheduleState { epoch: 0, mu, sigma: 0.2 };
        let draws: Vec<f64> = (0..10_000).map(|_| sample_ratio(&st, &mut rng)).collect();
        assert!(draws.iter().all(|r| (0.0..=1.0).contains(r)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - clamped_mean(mu, 0.2)).abs() < 0.01, "mu {mu}: {mean}");
    }
}

/// Visible cells plus trimmed cells must be exactly the union of the blocks.
fn check_decomposition(m: &PatchMask) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            let in_block = m.blocks.iter().any(|b| b.contains(r, c));
            let trimmed = m.trimmed.contains(&(r, c));
            assert_eq!(!m.is_masked(r, c) || trimmed, in_block, "cell ({r}, {c})");
        }
    }
    if let Some(last) = m.blocks.last() {
        assert!(m.trimmed.iter().all(|&(r, c)| last.contains(r, c)));
    }
}

#[test]
fn fourteen_square_grid_example() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = inverse_block_mask(14, 14, 0.4, 3, &mut rng).unwrap();
        assert!((m.achieved_ratio() - 0.4).abs() <= 9.0 / 196.0 + 1e-12);
        check_decomposition(&m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inverse_block_mask_properties(
        seed in any::<u64>(),
        rows in 3usize..20,
        cols in 3usize..30,
        target in 0.0f64..=1.0,
        block in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = inverse_block_mask(rows, cols, target, block, &mut rng).unwrap();
        let n = (rows * cols) as f64;
        prop_assert_eq!(m.achieved_ratio(), m.masked_count() as f64 / n);
        prop_assert!((m.achieved_ratio() - target).abs() <= (block * block) as f64 / n + 1e-12);
        check_decomposition(&m);
    }

    #[test]
    fn cyclic_lr_is_smooth_inside_cycles(spe in 2usize..40) {
        let spec = LrScheduleSpec::default();
        let mut flat = Vec::new();
        for e in 0..30 {
            for s in 0..spe {
                flat.push((e, s, cyclic_lr(e, s, spe, &spec).unwrap()));
            }
        }
        let mut resets = Vec::new();
        for w in flat.windows(2) {
            let (e, s, lr) = w[1];
            if lr > w[0].2 {
                prop_assert_eq!(s, 0);
                resets.push(e);
            }
        }
        prop_assert_eq!(resets, vec![4, 8, 12, 16, 20]);
        prop_assert_eq!(flat[0].2, spec.peak_lr);
        let last = flat.last().unwrap().2;
        prop_assert!((last - spec.final_lr).abs() < 1e-15);
    }
}

#[test]
fn last_step_lands_on_final_lr() {
    let spec = LrScheduleSpec::default();
    for spe in [1, 7, 100] {
        let lr = cyclic_lr(29, spe - 1, spe, &spec).unwrap();
        // One cosine step from the end, closed form.
        let steps = (10 * spe) as f64;
        let one_step = (spec.peak_lr - spec.final_lr) * 0.5 * (1.0 - (std::f64::consts::PI / steps).cos());
        assert!((lr - spec.final_lr).abs() <= one_step + 1e-18);
        assert_eq!(cyclic_lr(4, 0, spe, &spec).unwrap(), spec.peak_lr);
    }
}

fn frame() -> (FrameSample, CameraRig<f64>) {
    let rig = CameraRig::surround((32, 56), &RigLayout::default()).unwrap();
    let spec = SceneSpec {
        seed: 4,
        duration_s: 2.0,
        frame_hz: 2.0,
        num_actors: 5,
        lane_layout: LaneLayout::Curve,
        classes: ObjectClass::ALL.to_vec(),
    };
    let seq = generate_scene(&spec, &rig, &BevGridSpec::new(10, 10, 40.0, 8)).unwrap();
    (seq.frames[2].clone(), rig)
}

#[test]
fn all_visible_masks_are_identity() {
    let (f, rig) = frame();
    let masks: Vec<_> = (0..6).map(|_| Some(PatchMask::all_visible(4, 7))).collect();
    assert_eq!(apply_masks(&f, &rig, &masks, 8, 0.0).unwrap(), f);
}

#[test]
fn full_masks_fill_five_cameras() {
    let (f, rig) = frame();
    let out = apply_masks(&f, &rig, &front_only_masks(&rig, (4, 7)), 8, 0.0).unwrap();
    assert_eq!(out.images[rig.front_index()], f.images[rig.front_index()]);
    for (i, img) in out.images.iter().enumerate() {
        if i != rig.front_index() {
            assert!(img.data.iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn single_patch_covers_its_pixels() {
    let (f, rig) = frame();
    let mut m = PatchMask::all_visible(4, 7);
    m.masked[0] = true;
    let mut masks: Vec<Option<PatchMask>> = vec![None; 6];
    masks[1] = Some(m);
    let out = apply_masks(&f, &rig, &masks, 8, -1.0).unwrap();
    for v in 0..32 {
        for u in 0..56 {
            let want = if v < 8 && u < 8 { [-1.0; 3] } else { f.images[1].get(v, u) };
            assert_eq!(out.images[1].get(v, u), want);
        }
    }
}

#[test]
fn masking_is_idempotent_and_spares_front() {
    let (f, rig) = frame();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let st = mask_schedule(10).unwrap();
    let masks = sample_camera_masks(&st, &rig, (4, 7), &MaskSpec { block_size: 2, ..MaskSpec::default() }, &mut rng).unwrap();
    assert!(masks[rig.front_index()].is_none());
    let once = apply_masks(&f, &rig, &masks, 8, 0.0).unwrap();
    let twice = apply_masks(&once, &rig, &masks, 8, 0.0).unwrap();
    assert_eq!(once, twice);

    let mut bad = masks.clone();
    bad[rig.front_index()] = Some(PatchMask::all_masked(4, 7));
    assert!(matches!(apply_masks(&f, &rig, &bad, 8, 0.0), Err(Error::Contract(_))));
}
