//! Properties spanning several modules, checked on generated inputs.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use owod::continual::build_exemplar_set;
use owod::detector::{ArchConfig, Checkpoint, ModelParams};
use owod::inference::pipeline::evidence_batch;
use owod::inference::{
    calculate_class_scores_and_boxes, read_detections, write_detections, InferenceConfig,
    Thresholds,
};
use owod::metrics::{average_precision_voc2010, evaluate, EvalFrame};
use owod::synth::{generate_dataset, SceneConfig};
use owod::{
    known_and_unknown, make_task_view, Annotation, BoundingBox, ClassId, ClassRegistry, Exec,
    ImageRecord, Label, TaskSchedule,
};

fn four_tasks() -> TaskSchedule {
    TaskSchedule::from_ids(&[&[1, 2], &[3, 4], &[5, 6], &[7, 8]]).unwrap()
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..14.0f64, 1.0..14.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_records(max_images: usize) -> impl Strategy<Value = Vec<ImageRecord>> {
    prop::collection::vec(
        prop::collection::vec((1u32..=8, arb_box()), 0..5),
        1..max_images,
    )
    .prop_map(|images| {
        images
            .into_iter()
            .enumerate()
            .map(|(i, anns)| ImageRecord {
                image_id: format!("{i:03}"),
                width: 64,
                height: 64,
                file_name: None,
                annotations: anns
                    .into_iter()
                    .map(|(c, bbox)| Annotation {
                        class_id: ClassId(c),
                        bbox,
                    })
                    .collect(),
                raster: None,
            })
            .collect()
    })
}

#[test]
fn task_views_of_a_synthetic_split_match_a_brute_force_filter() {
    let scene = SceneConfig {
        seed: 5,
        ..SceneConfig::default()
    };
    let data = generate_dataset(&scene, 40, Exec::Sequential).unwrap();
    let schedule = four_tasks();
    for t in 1..=4 {
        let registry = ClassRegistry::new(schedule.clone(), t).unwrap();
        let view = make_task_view(&data, &registry, t).unwrap();
        let wanted: Vec<u32> = match t {
            1 => vec![1, 2],
            2 => vec![3, 4],
            3 => vec![5, 6],
            _ => vec![7, 8],
        };
        let mut images = 0;
        let mut annotations = 0;
        for rec in &data {
            let n = rec
                .annotations
                .iter()
                .filter(|a| wanted.contains(&a.class_id.0))
                .count();
            if n > 0 {
                images += 1;
                annotations += n;
            }
        }
        assert_eq!(view.len(), images, "task {t}");
        assert_eq!(
            view.iter().map(|r| r.annotations.len()).sum::<usize>(),
            annotations,
            "task {t}"
        );
        let (known, unknown) = known_and_unknown(&registry);
        let union: Vec<ClassId> = (1..=2 * t as u32).map(ClassId).collect();
        assert_eq!(known, union);
        assert_eq!(unknown.len(), 8 - 2 * t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_views_only_hold_current_classes(records in arb_records(12), t in 1usize..=4) {
        let registry = ClassRegistry::new(four_tasks(), t).unwrap();
        let current: BTreeSet<ClassId> = registry.current().iter().copied().collect();
        let view = make_task_view(&records, &registry, t).unwrap();
        for rec in &view {
            prop_assert!(!rec.annotations.is_empty());
            prop_assert!(rec.annotations.iter().all(|a| current.contains(&a.class_id)));
        }
        if t < 4 {
            let next = registry.at_task(t + 1).unwrap();
            let known: BTreeSet<ClassId> = registry.known().into_iter().collect();
            let known_next: BTreeSet<ClassId> = next.known().into_iter().collect();
            let unknown: BTreeSet<ClassId> = registry.unknown().into_iter().collect();
            let unknown_next: BTreeSet<ClassId> = next.unknown().into_iter().collect();
            prop_assert!(known.is_subset(&known_next));
            prop_assert!(unknown_next.is_subset(&unknown));
            prop_assert!(known.is_disjoint(&unknown));
        }
    }

    #[test]
    fn exemplar_sets_meet_their_quota_or_exhaust_the_view(records in arb_records(16), n in 1usize..4) {
        let registry = ClassRegistry::new(four_tasks(), 1).unwrap();
        let view = make_task_view(&records, &registry, 1).unwrap();
        let set = build_exemplar_set(&view, registry.current(), n, 1);
        prop_assert_eq!(&set, &build_exemplar_set(&view, registry.current(), n, 1));
        let ids: BTreeSet<&str> = view.iter().map(|r| r.image_id.as_str()).collect();
        prop_assert!(set.image_ids.iter().all(|i| ids.contains(i.as_str())));
        let unique: BTreeSet<&String> = set.image_ids.iter().collect();
        prop_assert_eq!(unique.len(), set.image_ids.len());
        for &c in registry.current() {
            let available = view.iter().flat_map(|r| &r.annotations).filter(|a| a.class_id == c).count();
            prop_assert!(set.class_counts[&c] >= n.min(available));
        }
    }

    #[test]
    fn class_scores_partition_probability_mass(
        logits in prop::collection::vec(-8.0..8.0f64, 2..6),
        s_obj in 0.0..1.0f64,
    ) {
        let k = logits.len() - 1;
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let s = calculate_class_scores_and_boxes(&logits, vec![b; k], b, s_obj, &Thresholds::default());
        let known: f64 = s.known.iter().sum();
        if s.unknown == 0.0 {
            prop_assert!((known + s.background - 1.0).abs() < 1e-12);
        } else {
            // The unknown score takes the place of the background mass.
            prop_assert_eq!(s.unknown, s_obj);
            prop_assert_eq!(s.background, 0.0);
            prop_assert!(known < 1.0);
        }
        prop_assert!(s.known.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn average_precision_is_a_bounded_rate(
        outcomes in prop::collection::vec((0.0..1.0f64, any::<bool>()), 0..20),
        extra_gt in 0usize..5,
    ) {
        let tp = outcomes.iter().filter(|o| o.1).count();
        let num_gt = tp + extra_gt;
        match average_precision_voc2010(&outcomes, num_gt) {
            None => prop_assert_eq!(num_gt, 0),
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                if tp == num_gt && outcomes.iter().all(|o| o.1) {
                    prop_assert!((ap - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

/// Detections from an untrained model obey the output contract, and the
/// dump and checkpoint formats round-trip them exactly.
#[test]
fn untrained_model_outputs_respect_the_detection_contract() {
    let scene = SceneConfig {
        image_size: 64,
        scale_range: (0.2, 0.35),
        ..SceneConfig::default()
    };
    let arch = ArchConfig {
        image_size: 64,
        backbone_channels: [4, 6, 8, 8],
        fpn_channels: 8,
        roi_grid: 2,
        roi_hidden: 16,
        level_split: 24.0,
        ..ArchConfig::default()
    };
    let records = generate_dataset(&scene, 6, Exec::Sequential).unwrap();
    let schedule = four_tasks();
    let registry = ClassRegistry::new(schedule.clone(), 2).unwrap();
    let cfg = InferenceConfig {
        max_per_image: 20,
        ..InferenceConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..4 {
        let params = ModelParams::init(&arch, &schedule.universe(), seed).unwrap();
        let evidence = evidence_batch(&records, &params, cfg.proposals, Exec::Parallel).unwrap();
        assert_eq!(
            evidence,
            evidence_batch(&records, &params, cfg.proposals, Exec::Sequential).unwrap()
        );
        let mut dets = BTreeMap::new();
        for (rec, ev) in records.iter().zip(&evidence) {
            let out = ev.detect(None, &cfg);
            assert!(out.len() <= cfg.max_per_image);
            for d in &out {
                assert!((cfg.score_floor..=1.0).contains(&d.score), "{d:?}");
                assert!(d.bbox.x1() >= 0.0 && d.bbox.y1() >= 0.0);
                assert!(d.bbox.x2() <= rec.width as f64 && d.bbox.y2() <= rec.height as f64);
                if let Label::Known(c) = d.label {
                    assert!(c.0 >= 1 && c.0 <= 8);
                }
            }
            dets.insert(rec.image_id.clone(), out);
        }
        let path = dir.path().join("dets.jsonl");
        write_detections(&path, &dets).unwrap();
        let back = read_detections(&path).unwrap();
        let frame = EvalFrame::build(&records, &dets, &registry, 0.5);
        let frame_back = EvalFrame::build(&records, &back, &registry, 0.5);
        assert_eq!(
            evaluate(&frame, &registry, 0.8),
            evaluate(&frame_back, &registry, 0.8)
        );

        let ckpt = Checkpoint {
            params: params.clone(),
            registry: Some(registry.clone()),
            train: None,
        };
        let ck_path = dir.path().join("model.owck");
        ckpt.save(&ck_path).unwrap();
        assert_eq!(Checkpoint::load(&ck_path).unwrap(), ckpt);
    }
}
