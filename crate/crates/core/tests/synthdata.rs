use matnet::grid::Mask;
use matnet::metrics::region_similarity;
use matnet::synthdata::*;
use matnet::tensor::Tensor;
use proptest::prelude::*;

fn spec_with(f: impl FnOnce(&mut SceneSpec)) -> SceneSpec {
    let mut s = SceneSpec::default();
    f(&mut s);
    s
}

#[test]
fn same_seed_gives_identical_clips() {
    let spec = SceneSpec::default();
    assert_eq!(gen_sequence(&spec).unwrap(), gen_sequence(&spec).unwrap());
}

#[test]
fn different_seeds_give_different_clips() {
    let a = gen_sequence(&SceneSpec::default()).unwrap();
    let b = gen_sequence(&spec_with(|s| s.seed = 1)).unwrap();
    assert_ne!(a[0].frame, b[0].frame);
}

#[test]
fn flow_inside_object_equals_motion() {
    let spec = spec_with(|s| {
        s.motion.dx = 2.0;
        s.motion.dy = 3.0;
        s.num_frames = 4;
        s.object.size = 8.0;
    });
    let clip = gen_sequence(&spec).unwrap();
    for s in &clip {
        let hw = s.height() * s.width();
        for (i, &inside) in s.mask.data().iter().enumerate() {
            let (dx, dy) = (s.flow.data()[i], s.flow.data()[hw + i]);
            if inside {
                assert_eq!((dx, dy), (2.0, 3.0));
            } else {
                assert_eq!((dx, dy), (0.0, 0.0));
            }
        }
    }
}

#[test]
fn warping_by_integer_flow_reproduces_next_mask() {
    let spec = spec_with(|s| {
        s.motion.dx = 2.0;
        s.motion.dy = -1.0;
        s.object.kind = ShapeKind::Blob;
    });
    let clip = gen_sequence(&spec).unwrap();
    for pair in clip.windows(2) {
        let warped = pair[0].mask.translate(-1, 2);
        assert_eq!(region_similarity(&warped, &pair[1].mask).unwrap(), 1.0);
    }
}

#[test]
fn edge_oracle_of_constant_frame_is_zero() {
    let e = edge_oracle(&Tensor::full([3, 9, 11], 0.4));
    assert_eq!(e.shape(), &[9, 11]);
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn edge_oracle_of_step_peaks_at_the_step() {
    let (h, w) = (6, 10);
    let frame = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|i| if i % w >= 5 { 1.0 } else { 0.0 }).collect()).unwrap();
    let e = edge_oracle(&frame);
    for y in 0..h {
        for x in 0..w {
            let v = e.data()[y * w + x];
            match x {
                4 | 5 => assert_eq!(v, 1.0),
                _ => assert_eq!(v, 0.0, "({y}, {x})"),
            }
        }
    }
}

#[test]
fn edge_oracle_is_translation_equivariant_in_the_interior() {
    let (h, w) = (16, 16);
    let square = |oy: usize, ox: usize| {
        let mut d = vec![0.2; 3 * h * w];
        for c in 0..3 {
            for y in 5 + oy..9 + oy {
                for x in 5 + ox..9 + ox {
                    d[c * h * w + y * w + x] = 0.2 + 0.1 * (c + 1) as f64;
                }
            }
        }
        Tensor::new(vec![3, h, w], d).unwrap()
    };
    let (a, b) = (edge_oracle(&square(0, 0)), edge_oracle(&square(1, 2)));
    for y in 0..h - 1 {
        for x in 0..w - 2 {
            assert_eq!(a.data()[y * w + x], b.data()[(y + 1) * w + x + 2]);
        }
    }
}

#[test]
fn boundary_examples() {
    assert!(boundary_gt(&Mask::empty(8, 8)).is_empty());
    // Outside the image is background, so a full mask keeps its outer ring.
    assert_eq!(boundary_gt(&Mask::full(8, 8)).count(), 28);
    let sq = Mask::from_fn(20, 20, |y, x| (5..15).contains(&y) && (5..15).contains(&x));
    assert_eq!(boundary_gt(&sq).count(), 36);
    let single = Mask::from_fn(5, 5, |y, x| (y, x) == (2, 2));
    assert_eq!(boundary_gt(&single), single);
}

#[test]
fn flow_encoding_examples() {
    let flow = Tensor::new(vec![2, 1, 3], vec![0.0, 3.0, 3.0, 0.0, 4.0, 4.0]).unwrap();
    let (img, ranges) = encode_flow(&flow);
    assert_eq!(img.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    assert_eq!(ranges, [(0.0, 3.0), (0.0, 4.0), (0.0, 5.0)]);
    let (still, _) = encode_flow(&Tensor::zeros([2, 2, 2]));
    assert!(still.data().iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_scenes_are_rejected() {
    assert!(gen_sequence(&spec_with(|s| s.num_frames = 0)).is_err());
    assert!(gen_sequence(&spec_with(|s| s.motion.dx = f64::NAN)).is_err());
    assert!(gen_sequence(&spec_with(|s| s.object.size = 40.0)).is_err());
}

#[test]
fn scene_collection_is_deterministic_and_varied() {
    let base = SceneSpec::default();
    let a = scene_collection(&base, 3, 6);
    assert_eq!(a, scene_collection(&base, 3, 6));
    assert_ne!(a, scene_collection(&base, 4, 6));
    let kinds: Vec<_> = a.iter().map(|s| s.object.kind).collect();
    assert_eq!(&kinds[..3], &ShapeKind::ALL);
    for s in &a {
        assert!(gen_sequence(s).is_ok(), "{s:?}");
        assert!(s.motion.dx != 0.0 || s.motion.dy != 0.0);
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = spec_with(|s| s.num_frames = 3);
    let specs = scene_collection(&base, 9, 3);
    let clips: Vec<_> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < 2 { Split::Train } else { Split::Eval };
            (
                ClipEntry {
                    name: format!("clip_{i}"),
                    split,
                    frames: 3,
                },
                s.clone(),
            )
        })
        .collect();
    assert_eq!(write_dataset(dir.path(), &clips).unwrap(), 9);
    let entries = read_dataset_manifest(dir.path()).unwrap();
    assert_eq!(entries, clips.iter().map(|c| c.0.clone()).collect::<Vec<_>>());
    let train = load_dataset(dir.path(), Some(Split::Train)).unwrap();
    assert_eq!(train.len(), 2);
    let all = load_dataset(dir.path(), None).unwrap();
    assert_eq!(all.len(), 3);
    for ((_, loaded), (_, spec)) in all.iter().zip(&clips) {
        let fresh = gen_sequence(spec).unwrap();
        for (a, b) in fresh.iter().zip(loaded) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.boundary, b.boundary);
            assert_eq!(a.hem.weights.shape(), b.hem.weights.shape());
        }
    }
    let m = read_mask(&mask_path(&dir.path().join("clip_0"), 1)).unwrap();
    assert_eq!(m, all[0].1[1].mask);
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(&dir.path().join("nope"), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ground_truth_invariants(seed in 0u64..1_000_000, kind in 0usize..3, size in 6.0f64..14.0, drift in -0.02f64..0.02) {
        let spec = SceneSpec {
            seed,
            num_frames: 3,
            object: ObjectSpec { kind: ShapeKind::ALL[kind], size, ..SceneSpec::default().object },
            motion: MotionSpec { scale_drift: drift, ..SceneSpec::default().motion },
            ..SceneSpec::default()
        };
        let clip = gen_sequence(&spec).unwrap();
        for s in &clip {
            let b = &s.boundary;
            prop_assert_eq!(b.and_not(&s.mask.dilate_square(1)).unwrap().count(), 0);
            prop_assert_eq!(b.and(&s.mask.erode_square(2)).unwrap().count(), 0);
            prop_assert_eq!(b.and_not(&s.mask).unwrap().count(), 0);
            prop_assert!(s.frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.edge.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.hem.weights.data().iter().all(|v| (1.0..=2.0).contains(v)));
        }
    }

    #[test]
    fn boundary_of_random_masks(bits in prop::collection::vec(any::<bool>(), 64)) {
        let m = Mask::from_vec(8, 8, bits).unwrap();
        let b = boundary_gt(&m);
        prop_assert_eq!(b.and_not(&m).unwrap().count(), 0);
        prop_assert_eq!(b.and(&m.erode_square(1)).unwrap().count(), 0);
        prop_assert_eq!(b.or(&m.erode_square(1)).unwrap(), m);
    }
}
