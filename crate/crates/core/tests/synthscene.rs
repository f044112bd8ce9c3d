use monobev::bevmodel::BevGridSpec;
use monobev::synthscene::{
    generate_scene, read_blob, temporal_sampler, velocity_consistency_error, write_blob, Dataset, DatasetSpec,
    LaneLayout, ObjectClass, SamplerMode, SceneSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, scenes: usize) -> DatasetSpec {
    DatasetSpec {
        seed,
        scenes,
        image_size: [64, 112],
        grid: BevGridSpec::new(20, 20, 50.0, 8),
        ..DatasetSpec::default()
    }
}

#[test]
fn generation_is_deterministic_and_shaped() {
    let spec = small_spec(3, 3);
    let a = Dataset::generate(&spec).unwrap();
    let b = Dataset::generate(&spec).unwrap();
    assert_eq!(a.scenes, b.scenes);
    let c = Dataset::generate(&small_spec(4, 3)).unwrap();
    assert_ne!(a.scenes, c.scenes);
    for s in &a.scenes {
        assert_eq!(s.frames.len(), 8);
        for f in &s.frames {
            assert_eq!(f.images.len(), 6);
            assert!(f.images.iter().all(|i| (i.height, i.width) == (64, 112)));
            assert!(f.images.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
            assert_eq!((f.bev_seg.rows, f.bev_seg.cols), (20, 20));
            assert!(f.boxes.iter().all(|b| b.size.iter().all(|s| *s > 0.0)));
        }
        assert!(velocity_consistency_error(s) <= 1e-6);
    }
}

/// Every box centre between 3 and 20 m lands inside some camera image, and
/// that camera shows the box's class colour near the projected centre.
#[test]
fn no_phantom_actors() {
    let ds = Dataset::generate(&small_spec(21, 6)).unwrap();
    let (mut checked, mut coloured) = (0, 0);
    for s in &ds.scenes {
        for f in &s.frames {
            for b in &f.boxes {
                let r = b.center[0].hypot(b.center[1]);
                if !(3.0..20.0).contains(&r) {
                    continue;
                }
                let color = ObjectClass::from_id(b.class_id).unwrap().color();
                let p = [b.center[0], b.center[1], b.center[2]];
                let mut seen = false;
                for (ci, cam) in ds.rig.cameras().iter().enumerate() {
                    let Some([u, v]) = cam.project_point(&p) else { continue };
                    let img = &f.images[ci];
                    let (u, v) = (u as i64, v as i64);
                    for dv in -3..=3 {
                        for du in -3..=3 {
                            let (uu, vv) = (u + du, v + dv);
                            if uu >= 0 && vv >= 0 && (uu as usize) < img.width && (vv as usize) < img.height {
                                let px = img.get(vv as usize, uu as usize);
                                seen |= px.iter().zip(color).all(|(a, b)| (a - b).abs() < 0.2);
                            }
                        }
                    }
                }
                let hit = ds.rig.cameras().iter().any(|c| c.project_point(&p).is_some());
                assert!(hit, "box at {:?} outside every camera", b.center);
                checked += 1;
                coloured += seen as usize;
            }
        }
    }
    assert!(checked > 20);
    // A nearer actor can hide the colour, so only most need to show it.
    eprintln!("{coloured}/{checked} boxes show their colour");
    assert!(coloured as f64 >= 0.8 * checked as f64);
}

#[test]
fn save_and_load_round_trip() {
    let ds = Dataset::generate(&small_spec(1, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.rig, ds.rig);
    assert_eq!(back.scenes, ds.scenes);
}

proptest! {
    #[test]
    fn blobs_round_trip(data in prop::collection::vec(-1e6f32..1e6, 0..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_blob(&path, &[data.len()], &data).unwrap();
        let (dims, back) = read_blob(&path).unwrap();
        prop_assert_eq!(dims, vec![data.len()]);
        prop_assert_eq!(back, data);
    }

    #[test]
    fn train_sampler_stays_in_window(seed in any::<u64>(), anchor in 0usize..12) {
        let ts: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = temporal_sampler(&ts, anchor, SamplerMode::Train, &mut rng).unwrap();
        prop_assert_eq!(*idx.last().unwrap(), anchor);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| ts[anchor] - ts[i] <= 2.0 + 1e-9));
        prop_assert_eq!(idx.len(), 3.min(anchor + 1));
    }
}

#[test]
fn sampler_examples() {
    let ts: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(temporal_sampler(&ts, 7, SamplerMode::Infer, &mut rng).unwrap(), vec![6, 7]);
    assert_eq!(temporal_sampler(&ts, 0, SamplerMode::Infer, &mut rng).unwrap(), vec![0]);
    let ts2: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
    for _ in 0..50 {
        let idx = temporal_sampler(&ts2, 10, SamplerMode::Train, &mut rng).unwrap();
        assert!(idx.iter().all(|i| (6..=10).contains(i)));
        assert_eq!(idx[2], 10);
    }
    assert!(temporal_sampler(&ts, 12, SamplerMode::Infer, &mut rng).is_err());
}

#[test]
fn too_short_scenes_are_rejected() {
    let rig = DatasetSpec::default().rig().unwrap();
    let spec = SceneSpec {
        seed: 0,
        duration_s: 1.0,
        frame_hz: 2.0,
        num_actors: 0,
        lane_layout: LaneLayout::Straight,
        classes: vec![],
    };
    assert!(generate_scene(&spec, &rig, &BevGridSpec::new(4, 4, 20.0, 4)).is_err());
    assert!(Dataset::generate(&small_spec(0, 0)).is_err());
}
