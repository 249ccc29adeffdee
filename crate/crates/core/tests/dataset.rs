use cropweed::io::{scan_dataset, DatasetLayout};
use cropweed::metrics::{evaluate_sample, finalize};
use cropweed::sim::{gen_synthetic, run_pipeline, SimConfig, SyntheticSpec};
use cropweed::{EvalConfig, MetricsAccumulator};

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let layout = DatasetLayout::new(dir.path());
    layout.create().unwrap();
    let samples: Vec<_> = (0..3)
        .map(|seed| {
            gen_synthetic(&SyntheticSpec {
                width: 96,
                height: 80,
                seed,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        s.check_hierarchy().unwrap();
        layout.store(&format!("s{i}"), s).unwrap();
    }
    let scan = scan_dataset(dir.path()).unwrap();
    assert_eq!(scan.ids, ["s0", "s1", "s2"]);
    assert!(scan.warnings.is_empty());
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(&layout.load(&format!("s{i}")).unwrap(), s);
    }
}

#[test]
fn self_evaluation_and_clean_simulation_score_100() {
    let cfg = EvalConfig::default();
    let mut self_acc = MetricsAccumulator::for_config(&cfg);
    let mut sim_acc = MetricsAccumulator::for_config(&cfg);
    for seed in 0..4 {
        let gt = gen_synthetic(&SyntheticSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        evaluate_sample(&mut self_acc, &gt, &gt, &cfg).unwrap();
        let pred = run_pipeline(&gt, &SimConfig::zero_corruption()).unwrap();
        evaluate_sample(&mut sim_acc, &pred, &gt, &cfg).unwrap();
    }
    for r in [finalize(&self_acc), finalize(&sim_acc)] {
        for v in [
            r.iou_soil, r.iou_weed, r.pq_leaf, r.pq_crop, r.pq, r.pq_plus,
        ] {
            assert_eq!(v, Some(100.0));
        }
    }
}

#[test]
fn corrupted_simulation_keeps_hierarchy() {
    let cfg = SimConfig {
        detector_dropout: 0.3,
        mask_erosion: 2,
        mask_noise: 0.3,
        ..Default::default()
    };
    for seed in 0..4 {
        let gt = gen_synthetic(&SyntheticSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let pred = run_pipeline(
            &gt,
            &SimConfig {
                seed,
                ..cfg.clone()
            },
        )
        .unwrap();
        pred.check_hierarchy().unwrap();
    }
}

#[test]
fn prediction_over_ignored_ground_truth_is_a_full_false_positive() {
    use cropweed::mask::{InstanceMap, LabelMap, CROP, IGNORE};
    use cropweed::PanopticSample;

    let (w, h) = (8, 8);
    let gt = PanopticSample::new(
        LabelMap::filled(w, h, IGNORE).unwrap(),
        InstanceMap::filled(w, h, 0).unwrap(),
        InstanceMap::filled(w, h, 0).unwrap(),
    )
    .unwrap();
    let pred = PanopticSample::new(
        LabelMap::filled(w, h, CROP).unwrap(),
        InstanceMap::filled(w, h, 1).unwrap(),
        InstanceMap::filled(w, h, 0).unwrap(),
    )
    .unwrap();
    let cfg = EvalConfig::default();
    let mut acc = MetricsAccumulator::for_config(&cfg);
    evaluate_sample(&mut acc, &pred, &gt, &cfg).unwrap();
    assert_eq!(acc.confusion.total(), 0);
    assert_eq!((acc.crop.tp, acc.crop.fp, acc.crop.fn_), (0, 1, 0));
    assert_eq!(finalize(&acc).pq_crop, Some(0.0));
}
