use t1q_core::autodiff::{decode_checkpoint, Mode};
use t1q_core::relaxometry::{
    build_input_stack, fit_maps, make_phantom, AcqParams, FitOptions, InputConfig, Phantom, PhantomSpec, StackSources,
};
use t1q_core::segnet::{build_unet, predict, train, Fold, Sample, SegModel, Subject, TrainConfig, UNetConfig};
use t1q_core::stats::{tpr_per_class, VwaWeights};

fn phantom(seed: u64) -> Phantom {
    make_phantom(&PhantomSpec::thalamus([16; 3], seed), &AcqParams::default(), seed).unwrap()
}

#[test]
fn noiseless_phantom_fits_back_to_truth() {
    let ph = phantom(3);
    let maps = fit_maps(
        &ph.mprage,
        &ph.fgatir,
        &AcqParams::default(),
        &FitOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(maps.ok_count(), ph.mprage.len());
    for (got, want) in [(&maps.pd, &ph.truth.pd), (&maps.t1, &ph.truth.t1)] {
        let worst = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(g, w)| ((g - w) / w).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }
}

fn subject(seed: u64, config: &InputConfig) -> Subject {
    let ph = phantom(seed);
    let acq = AcqParams::default();
    let maps = fit_maps(&ph.mprage, &ph.fgatir, &acq, &FitOptions::default(), None).unwrap();
    let stack = build_input_stack(
        &StackSources {
            maps: &maps,
            mprage: Some(&ph.mprage),
            fgatir: Some(&ph.fgatir),
            acq,
            wm_mask: Some(&ph.wm_mask),
        },
        config,
    )
    .unwrap();
    Subject {
        id: format!("p{seed}"),
        sample: Sample::from_stack(&stack, &ph.labels).unwrap(),
    }
}

#[test]
fn fitted_stack_trains_predicts_and_scores() {
    let config = InputConfig::preset("ti-top4").unwrap();
    let subjects: Vec<Subject> = (0..4).map(|s| subject(s, &config)).collect();
    assert_eq!(subjects[0].sample.num_channels(), 4);
    let fold = Fold {
        train: vec!["p0".into(), "p1".into()],
        val: vec!["p2".into()],
        test: vec!["p3".into()],
    };
    let mut model = build_unet(&UNetConfig::new(4, 14, 2, 4, 0.1), 0).unwrap();
    let cfg = TrainConfig {
        crop_size: [16; 3],
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &subjects, &fold, &cfg).unwrap();
    assert_eq!(out.report.epochs.len(), 3);

    let test = &subjects[3].sample;
    let pred = predict(&mut model, test, Mode::Eval, 0).unwrap();
    let geom = t1q_core::volume::Geometry::unit(test.dims);
    let tpr = tpr_per_class(&pred.label_volume(&geom).unwrap(), &test.label_volume().unwrap()).unwrap();
    let vwa = tpr.vwa(VwaWeights::LabeledCounts).unwrap();
    assert!((0.0..=1.0).contains(&vwa));

    let bytes = t1q_core::autodiff::encode_checkpoint(&model.to_checkpoint(serde_json::json!({"fold": 0})));
    let (mut restored, extra) = SegModel::from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(extra["fold"], 0);
    assert_eq!(predict(&mut restored, test, Mode::Eval, 0).unwrap(), pred);
    assert_eq!(
        predict(&mut restored, test, Mode::McDropout, 7).unwrap(),
        predict(&mut model, test, Mode::McDropout, 7).unwrap()
    );
}
