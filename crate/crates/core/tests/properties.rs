use proptest::prelude::*;

use maskfeat3d::eval::{evaluate_ap, LabeledMask, SceneEval};
use maskfeat3d::proposals::{InstanceMask3D, MaskProvenance};
use maskfeat3d::scene::{load_scene, save_scene, Scene, SceneLayoutConfig};
use maskfeat3d::synthetic::{generate, write_fixture, SyntheticConfig};
use maskfeat3d::visibility::{build_visibility_table, OcclusionParams};

fn small_fixture(seed: u64) -> maskfeat3d::synthetic::Fixture {
    generate(&SyntheticConfig { seed, num_objects: 3, num_frames: 6, point_spacing: 0.15, floor_half_extent: 1.2, ..Default::default() }).unwrap()
}

#[test]
fn scene_save_load_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = small_fixture(3);
    let paths = write_fixture(&fixture, dir.path()).unwrap();
    let layout = SceneLayoutConfig::from_file(&paths.layout).unwrap();
    let first = load_scene(&paths.scene_root, &layout).unwrap();
    let copy = dir.path().join("copy");
    let layout2 = save_scene(&first, &copy, layout.depth_scale).unwrap();
    let second = load_scene(&copy, &layout2).unwrap();

    let bits = |s: &Scene| s.cloud.points().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&fixture.scene), bits(&first));
    assert_eq!(bits(&first), bits(&second));
    assert_eq!(first.frames.len(), fixture.scene.frames.len());
    for ((a, b), orig) in first.frames.iter().zip(&second.frames).zip(&fixture.scene.frames) {
        assert_eq!((a.index, b.index), (orig.index, orig.index));
        assert_eq!(a.intrinsics, orig.intrinsics);
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.depth.data(), b.depth.data());
        assert_eq!(std::fs::read(&a.color.path).unwrap(), std::fs::read(&b.color.path).unwrap());
        // depth survives the millimeter encoding to within half a millimeter
        for (x, y) in a.depth.data().iter().zip(orig.depth.data()) {
            if y.is_finite() && *y > 0.0 {
                assert!((x - y).abs() <= 5e-4 + 1e-6, "{x} vs {y}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn visible_counts_grow_with_the_threshold(seed in 0u64..4, t1 in 0.0f64..0.5, dt in 0.0f64..1.0) {
        let fixture = small_fixture(seed);
        let masks = fixture.ground_truth_set();
        let lo = build_visibility_table(&masks, &fixture.scene, &OcclusionParams::with_threshold(t1));
        let hi = build_visibility_table(&masks, &fixture.scene, &OcclusionParams::with_threshold(t1 + dt));
        for m in 0..masks.len() {
            for f in 0..fixture.scene.frames.len() {
                prop_assert!(lo.count(m, f) <= hi.count(m, f));
            }
        }
    }

    #[test]
    fn duplicate_predictions_never_raise_ap(
        seed in any::<u64>(),
        dup in proptest::collection::vec((0usize..64, 0.0f64..1.0), 1..6),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let classes: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let mask = |id: usize, m: &[bool]| InstanceMask3D::from_membership(id, m, MaskProvenance { proposal_id: id, cluster: None });
        // one ground-truth instance per class
        let gts: Vec<LabeledMask> = (0..3)
            .map(|c| {
                let m: Vec<bool> = (0..n).map(|p| p % 3 == c && rng.random_bool(0.8)).collect();
                LabeledMask { mask: mask(c, &m), label: classes[c].clone(), confidence: 1.0 }
            })
            .collect();
        let mut preds: Vec<LabeledMask> = (0..rng.random_range(1..8))
            .map(|i| {
                let c = rng.random_range(0..3);
                let m: Vec<bool> = gts[c].mask.membership().iter().map(|&b| if rng.random_bool(0.2) { !b } else { b }).collect();
                LabeledMask { mask: mask(i, &m), label: classes[c].clone(), confidence: rng.random_range(0.0..1.0) }
            })
            .collect();
        let before = evaluate_ap(&[SceneEval::new("s", preds.clone(), gts.clone()).unwrap()], &classes).unwrap();
        for (pick, factor) in dup {
            let original = preds[pick % preds.len()].clone();
            let id = preds.len();
            preds.push(LabeledMask { mask: mask(id, &original.mask.membership()), confidence: original.confidence * factor, ..original });
        }
        let after = evaluate_ap(&[SceneEval::new("s", preds, gts).unwrap()], &classes).unwrap();
        let le = |a: Option<f64>, b: Option<f64>| a.unwrap_or(0.0) <= b.unwrap_or(0.0) + 1e-12;
        prop_assert!(le(after.ap, before.ap));
        prop_assert!(le(after.ap50, before.ap50));
        prop_assert!(le(after.ap25, before.ap25));
    }
}
