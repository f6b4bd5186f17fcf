use defrec::deform::{deform, sample_cap, DeformKind, DeformSpec};
use defrec::pcm::{check_migration, pcm_classify, pcm_segment, MixedLabel};
use defrec::{LabeledCloud, Point3, PointCloud, SegLabeledCloud};
use proptest::prelude::*;

fn cloud(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
        .prop_map(|pts: Vec<Point3>| PointCloud::new(pts).unwrap())
}

fn kind() -> impl Strategy<Value = DeformKind> {
    prop_oneof![
        (1usize..5).prop_map(|k| DeformKind::VoxelGrid { k }),
        (0.05f64..0.8).prop_map(|r| DeformKind::Sphere { r }),
        Just(DeformKind::SampleSplit),
        Just(DeformKind::SampleGradient),
        Just(DeformKind::SampleLambertian),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deformation_only_moves_the_region(c in cloud(20, 200), k in kind(), seed in any::<u64>()) {
        let sample = k.family() == Some(defrec::deform::Family::Sample);
        let pair = deform(&c, &DeformSpec::new(k), None, seed).unwrap();
        prop_assert_eq!(pair.deformed.len(), c.len());
        prop_assert_eq!(pair.original.points(), c.points());
        prop_assert!(!pair.region_indices.is_empty());
        if sample {
            prop_assert!(pair.region_indices.len() <= sample_cap(c.len(), DeformSpec::new(DeformKind::SampleSplit).sample_cap_fraction));
        }
        let mut inside = vec![false; c.len()];
        for &i in &pair.region_indices {
            prop_assert!(i < c.len());
            inside[i] = true;
        }
        for (i, (p, q)) in c.points().iter().zip(pair.deformed.points()).enumerate() {
            if !inside[i] {
                prop_assert_eq!(p.map(f64::to_bits), q.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn classification_mix_is_a_valid_sample(
        a in cloud(8, 64),
        la in 0usize..4,
        lb in 0usize..4,
        seed in any::<u64>(),
    ) {
        let n = a.len();
        let b = PointCloud::new(a.points().iter().map(|p| [p[0] + 4.0, p[1], p[2]]).collect()).unwrap();
        let m = pcm_classify(&LabeledCloud { cloud: a, label: la }, &LabeledCloud { cloud: b, label: lb }, 4, 1.0, 1.0, seed).unwrap();
        prop_assert_eq!(m.cloud.len(), n);
        prop_assert!((m.gamma - m.from_first as f64 / n as f64).abs() < 1e-12);
        let soft = match &m.label { MixedLabel::Soft(v) => v.clone(), _ => unreachable!() };
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(soft.iter().all(|v| *v >= 0.0));
        let from_a = m.cloud.points().iter().filter(|p| p[0] < 2.0).count();
        prop_assert_eq!(from_a, m.from_first);
    }

    #[test]
    fn segmentation_labels_follow_their_points(
        a in cloud(8, 64),
        b in cloud(8, 64),
        seed in any::<u64>(),
    ) {
        let n = a.len().min(b.len());
        let a = SegLabeledCloud::new(PointCloud::new(a.points()[..n].to_vec()).unwrap(), (0..n).map(|i| i % 3).collect()).unwrap();
        let b = SegLabeledCloud::new(PointCloud::new(b.points()[..n].to_vec()).unwrap(), (0..n).map(|i| 3 + i % 2).collect()).unwrap();
        let m = pcm_segment(&a, &b, 1.0, 1.0, seed).unwrap();
        prop_assert_eq!(m.cloud.len(), n);
        prop_assert!(check_migration(&a, &b, &m).is_ok());
    }
}
