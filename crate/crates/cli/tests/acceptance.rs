//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as its own test target without the libtest harness so the
//! lines are always visible.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use t1q_core::autodiff::gradcheck::{all_op_kinds, default_shapes, spot_check_input};
use t1q_core::autodiff::{
    decode_checkpoint, encode_checkpoint, grad_check, load_checkpoint, save_checkpoint, Mode, Tensor,
};
use t1q_core::relaxometry::{
    fit_maps, ir_signal, make_phantom, null_ti, AcqParams, ChannelMeta, FitOptions, PhantomSpec,
};
use t1q_core::rng::{purpose, Stream};
use t1q_core::saliency::{compute_ois, OISConfig, OISSubject};
use t1q_core::segnet::loss::LabelTargets;
use t1q_core::segnet::schedule::PlateauSchedule;
use t1q_core::segnet::unet::{INPUT_CLASS_WEIGHTS, INPUT_IMAGE, INPUT_MASK, INPUT_TARGET};
use t1q_core::segnet::{build_unet, predict, train, Fold, Sample, SegModel, Subject, TrainConfig, UNetConfig};
use t1q_core::stats::{holm_bonferroni, tpr_per_class, volume_weighted_average, wilcoxon_signed_rank, TestMethod};
use t1q_core::volume::{read_volume, write_nifti, Geometry, SparseLabelVolume, Volume3D, UNLABELED};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn serial<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_relaxometry_round_trip() -> Check {
    let t1s = [400.0, 577.0, 800.0, 1000.0, 1400.0, 2000.0];
    let pds = [0.5, 1.0, 800.0];
    let acq = AcqParams::default();
    let geom = Geometry::unit([32; 3]);
    let truth = |v: usize| {
        let c = v % 18;
        (pds[c / 6], t1s[c % 6])
    };
    let signal = |ti: f64| {
        let data = (0..geom.len())
            .map(|v| {
                let (pd, t1) = truth(v);
                ir_signal(pd, t1, ti, acq.tr).unwrap()
            })
            .collect();
        Volume3D::new(geom.clone(), data).unwrap()
    };
    let (mprage, fgatir) = (signal(acq.ti1), signal(acq.ti2));
    let start = Instant::now();
    let maps = serial(|| fit_maps(&mprage, &fgatir, &acq, &FitOptions::default(), None)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        maps.ok_count() == geom.len(),
        format!("{} of {} voxels fitted", maps.ok_count(), geom.len()),
    )?;
    let (mut pd_err, mut t1_err) = (0.0f64, 0.0f64);
    for v in 0..geom.len() {
        let (pd, t1) = truth(v);
        pd_err = pd_err.max(((maps.pd.data()[v] - pd) / pd).abs());
        t1_err = t1_err.max(((maps.t1.data()[v] - t1) / t1).abs());
    }
    let detail = format!("max rel error PD {pd_err:.2e}, T1 {t1_err:.2e}, fit {secs:.2} s on 1 thread");
    ensure(pd_err < 1e-6 && t1_err < 1e-6 && secs < 5.0, detail.clone())?;
    Ok(detail)
}

fn c2_null_points() -> Check {
    let tr = 4000.0;
    let mut parts = Vec::new();
    for (t1, want) in [(577.0, 399.4), (1000.0, 675.0)] {
        let ti = null_ti(t1, tr).map_err(|e| e.to_string())?;
        // Closed form: 1 - 2 e^{-TI/T1} + e^{-TR/T1} = 0.
        let closed = t1 * (2.0 / (1.0 + (-tr / t1).exp())).ln();
        ensure(
            (ti - want).abs() <= 0.1,
            format!("null_ti({t1}) = {ti}, expected {want} ± 0.1"),
        )?;
        ensure(
            (ti - closed).abs() < 1e-6,
            format!("null_ti({t1}) = {ti}, closed form {closed}"),
        )?;
        for pd in [0.5, 1.0, 800.0] {
            let s = ir_signal(pd, t1, ti, tr).map_err(|e| e.to_string())?;
            ensure(s.abs() < 1e-9 * pd, format!("|I| = {s:e} at the null for PD {pd}"))?;
        }
        parts.push(format!("null_ti({t1}) = {ti:.4}"));
    }
    Ok(parts.join(", "))
}

fn c3_gradient_suite() -> Check {
    let start = Instant::now();
    let mut checks = 0;
    let mut worst = 0.0f64;
    for kind in all_op_kinds() {
        let shapes = default_shapes(kind);
        ensure(
            shapes.len() >= 3,
            format!("{} has {} shape sets", kind.name(), shapes.len()),
        )?;
        for (i, s) in shapes.iter().enumerate() {
            let r = grad_check(kind, s, 1e-6, i as u64).map_err(|e| e.to_string())?;
            ensure(
                r.passed(),
                format!("{} on {:?}: relative error {:.2e}", r.op, s, r.max_rel_error),
            )?;
            worst = worst.max(r.max_rel_error);
            checks += 1;
        }
    }

    let dims = [16; 3];
    let ph = make_phantom(&PhantomSpec::thalamus(dims, 2), &AcqParams::default(), 2).map_err(|e| e.to_string())?;
    let mut rng = Stream::new(5, purpose::TEST_DATA, 0);
    let scale = ph.mprage.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut data: Vec<f64> = ph.mprage.data().iter().map(|v| v / scale).collect();
    data.extend((0..ph.mprage.len()).map(|_| rng.normal()));
    let image = Tensor::new([1, 2, 16, 16, 16], data).unwrap();
    let targets = LabelTargets::new(ph.labels.labels(), dims, 14).map_err(|e| e.to_string())?;
    let inputs = [
        (INPUT_IMAGE, &image),
        (INPUT_TARGET, &targets.target),
        (INPUT_MASK, &targets.mask),
        (INPUT_CLASS_WEIGHTS, &targets.class_weights),
    ];
    let mut model = build_unet(&UNetConfig::new(2, 14, 2, 4, 0.1), 8).map_err(|e| e.to_string())?;
    let loss = model.loss_node();
    let unet_err = spot_check_input(
        model.graph_mut(),
        &inputs,
        loss,
        Mode::McDropout,
        0xfeed,
        INPUT_IMAGE,
        100,
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{checks} op checks, worst {worst:.2e} (< 1e-6); U-Net input spot check {unet_err:.2e} (< 1e-4); {secs:.1} s"
    );
    ensure(unet_err < 1e-4 && secs < 60.0, detail.clone())?;
    Ok(detail)
}

fn noise_sample(c: usize, dims: [usize; 3], seed: u64) -> Sample {
    let mut rng = Stream::new(seed, purpose::TEST_DATA, 0);
    let n: usize = dims.iter().product();
    Sample::new(
        dims,
        (0..c).map(|_| (0..n).map(|_| rng.normal()).collect()).collect(),
        vec![UNLABELED; n],
    )
    .unwrap()
}

fn metas(c: usize) -> Vec<ChannelMeta> {
    (0..c)
        .map(|i| ChannelMeta::synthesized(400.0 + 20.0 * i as f64))
        .collect()
}

fn c4_ois_sanity() -> Check {
    serial(|| {
        let cfg = UNetConfig::new(3, 14, 2, 4, 0.1);
        let mut zeroed = build_unet(&cfg, 3).map_err(|e| e.to_string())?;
        let idx = zeroed
            .graph()
            .param_index("enc0.1.conv.w")
            .ok_or("first conv weight missing")?;
        {
            let w = &mut zeroed.graph_mut().params_mut()[idx];
            let [co, ci, k0, k1, k2] = w.shape();
            let per = k0 * k1 * k2;
            for o in 0..co {
                let s = (o * ci + 1) * per;
                w.data_mut()[s..s + per].fill(0.0);
            }
        }
        let samples: Vec<Sample> = (0..3).map(|i| noise_sample(3, [8; 3], 20 + i)).collect();
        let meta = metas(3);
        let ids = ["sub-a", "sub-b", "sub-c"];
        let subjects: Vec<OISSubject> = (0..3)
            .map(|i| OISSubject {
                id: ids[i],
                sample: &samples[i],
                channels: &meta,
                model: 0,
            })
            .collect();
        let ocfg = |runs, p| OISConfig {
            mc_runs: runs,
            dropout_p: p,
            seed: 4,
            ..OISConfig::default()
        };
        let z = compute_ois(std::slice::from_ref(&zeroed), &subjects, &ocfg(5, 0.1)).map_err(|e| e.to_string())?;
        ensure(
            z.channels[1].score == 0.0,
            format!("zero-influence channel scored {:e}", z.channels[1].score),
        )?;

        let m = build_unet(&cfg, 4).map_err(|e| e.to_string())?;
        let one = compute_ois(std::slice::from_ref(&m), &subjects, &ocfg(1, 0.0)).map_err(|e| e.to_string())?;
        let many = compute_ois(std::slice::from_ref(&m), &subjects, &ocfg(100, 0.0)).map_err(|e| e.to_string())?;
        let drift = one
            .scores()
            .iter()
            .zip(many.scores())
            .map(|(a, b)| ((a - b) / a).abs())
            .fold(0.0, f64::max);
        ensure(
            drift <= 1e-12,
            format!("p = 0 drift between M = 1 and M = 100: {drift:e}"),
        )?;

        let fwd = compute_ois(std::slice::from_ref(&m), &subjects, &ocfg(8, 0.1)).map_err(|e| e.to_string())?;
        let perm = [2, 0, 1].map(|i| subjects[i]);
        let back = compute_ois(std::slice::from_ref(&m), &perm, &ocfg(8, 0.1)).map_err(|e| e.to_string())?;
        ensure(fwd.scores() == back.scores(), "subject permutation changed the scores")?;
        Ok(format!(
            "zero channel = 0 exactly, M drift {drift:.1e}, permutation exact"
        ))
    })
}

/// Subjects whose channel `informative` holds the standardised MPRAGE of a
/// thalamus phantom and whose other channels are pure noise.
fn discovery_subjects(seed: u64, informative: usize) -> Vec<Subject> {
    let dims = [24; 3];
    (0..14)
        .map(|i| {
            let spec = PhantomSpec::thalamus(dims, seed * 100 + i);
            let ph = make_phantom(&spec, &AcqParams::default(), seed * 100 + i).unwrap();
            let m = ph.mprage.data();
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            let sd = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
            let mut rng = Stream::new(seed, purpose::TEST_DATA, i);
            let channels = (0..4)
                .map(|c| {
                    if c == informative {
                        m.iter().map(|v| (v - mean) / sd).collect()
                    } else {
                        (0..m.len()).map(|_| rng.normal()).collect()
                    }
                })
                .collect();
            Subject {
                id: format!("s{i:02}"),
                sample: Sample::new(dims, channels, ph.labels.labels().to_vec()).unwrap(),
            }
        })
        .collect()
}

fn c5_ois_discovery() -> Check {
    let start = Instant::now();
    let mut hits = 0;
    let mut log = Vec::new();
    for seed in 0..10u64 {
        let informative = (seed % 4) as usize;
        let subjects = discovery_subjects(seed, informative);
        let fold = Fold {
            train: subjects[..12].iter().map(|s| s.id.clone()).collect(),
            val: vec![subjects[12].id.clone()],
            test: vec![subjects[13].id.clone()],
        };
        let mut model = build_unet(&UNetConfig::new(4, 14, 2, 4, 0.1), seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            crop_size: [16; 3],
            max_epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &subjects, &fold, &cfg).map_err(|e| e.to_string())?;
        let held: Vec<Sample> = subjects[12..]
            .iter()
            .map(|s| s.sample.center_crop([16; 3]).unwrap())
            .collect();
        let meta = metas(4);
        let scored: Vec<OISSubject> = held
            .iter()
            .zip(&subjects[12..])
            .map(|(s, subj)| OISSubject {
                id: &subj.id,
                sample: s,
                channels: &meta,
                model: 0,
            })
            .collect();
        let ocfg = OISConfig {
            mc_runs: 10,
            seed,
            ..OISConfig::default()
        };
        let report = compute_ois(&[model], &scored, &ocfg).map_err(|e| e.to_string())?;
        let top = report.ranking()[0];
        hits += usize::from(top == informative);
        log.push(format!("{seed}:{}", if top == informative { "ok" } else { "miss" }));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "informative channel ranked 1 in {hits}/10 seeds [{}], {secs:.0} s",
        log.join(" ")
    );
    ensure(hits >= 9 && secs < 900.0, detail.clone())?;
    Ok(detail)
}

fn c6_metric_oracles() -> Check {
    let dims = [8; 3];
    let geom = Geometry::unit(dims);
    for seed in 0..100 {
        let mut rng = Stream::new(seed, purpose::TEST_DATA, 6);
        let gt: Vec<u8> = (0..512)
            .map(|_| {
                if rng.uniform() < 0.4 {
                    UNLABELED
                } else {
                    rng.below(14) as u8
                }
            })
            .collect();
        let pred: Vec<u8> = (0..512).map(|_| rng.below(14) as u8).collect();
        let r = tpr_per_class(
            &SparseLabelVolume::new(geom.clone(), pred.clone()).unwrap(),
            &SparseLabelVolume::new(geom.clone(), gt.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        for c in 0..14u8 {
            let mut tp = 0;
            let mut total = 0;
            for k in 0..8 {
                for j in 0..8 {
                    for i in 0..8 {
                        let v = i + 8 * (j + 8 * k);
                        if gt[v] == c {
                            total += 1;
                            tp += usize::from(pred[v] == c);
                        }
                    }
                }
            }
            let t = r.classes[c as usize];
            let want = (total > 0).then(|| tp as f64 / total as f64);
            ensure(
                t.tp == tp && t.fn_ == total - tp && t.tpr == want,
                format!("seed {seed} class {c} differs"),
            )?;
        }
    }
    let vwa = volume_weighted_average(&[Some(1.0), Some(0.0)], &[3.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(vwa == 0.75, format!("VWA hand case gave {vwa}"))?;
    Ok("100 random 8^3 cases exact, VWA([1,0],[3,1]) = 0.75".into())
}

fn enumerate_p(n: usize, w: usize) -> f64 {
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: usize = (0..n).filter(|r| mask >> r & 1 == 1).map(|r| r + 1).sum();
        lo += u64::from(s <= w);
        hi += u64::from(s >= w);
    }
    (2.0 * (lo.min(hi) as f64 / (1u64 << n) as f64)).min(1.0)
}

fn c7_statistics_oracles() -> Check {
    let mut cases = 0;
    for n in 1..=12usize {
        for rep in 0..20 {
            let mut rng = Stream::new(rep, purpose::TEST_DATA, 70 + n as u64);
            let mut mags: Vec<f64> = (1..=n).map(|v| v as f64 * 1.5 + 0.5 * rng.uniform()).collect();
            rng.shuffle(&mut mags);
            let y: Vec<f64> = (0..n).map(|_| rng.uniform() * 10.0).collect();
            let x: Vec<f64> = y
                .iter()
                .zip(&mags)
                .map(|(b, m)| if rng.uniform() < 0.5 { b + m } else { b - m })
                .collect();
            let t = wilcoxon_signed_rank(&x, &y).map_err(|e| e.to_string())?;
            ensure(
                t.method == TestMethod::Exact && t.n_effective == n,
                format!("n {n}: not exact"),
            )?;
            let want = enumerate_p(n, t.statistic as usize);
            ensure(
                t.p_value == want,
                format!("n {n}: p {} vs enumeration {want}", t.p_value),
            )?;
            cases += 1;
        }
    }
    let all = holm_bonferroni(&[0.01, 0.02, 0.03], 0.05).map_err(|e| e.to_string())?;
    ensure(
        all.reject == [true, true, true],
        "Holm [0.01, 0.02, 0.03] should reject all",
    )?;
    let none = holm_bonferroni(&[0.04, 0.04, 0.04], 0.05).map_err(|e| e.to_string())?;
    ensure(
        none.reject == [false, false, false],
        "Holm [0.04, 0.04, 0.04] should reject none",
    )?;
    Ok(format!(
        "{cases} Wilcoxon cases equal 2^n enumeration, Holm hand cases exact"
    ))
}

fn c8_training_protocol() -> Check {
    // Improvement until epoch 3, then flat.
    let losses: Vec<f64> = [1.0, 0.9, 0.8]
        .into_iter()
        .chain(std::iter::repeat_n(0.85, 40))
        .collect();
    let mut s = PlateauSchedule::new(1e-3, 0.9, 5, 15);
    let (mut drops, mut stop) = (Vec::new(), None);
    for (i, &l) in losses.iter().enumerate() {
        let before = s.lr();
        let ev = s.observe(i + 1, l);
        if ev.lr_decreased {
            ensure(
                s.lr() == before * 0.9,
                format!("epoch {}: lr {} is not 0.9 x {before}", i + 1, s.lr()),
            )?;
            drops.push(i + 1);
        } else {
            ensure(s.lr() == before, "lr changed without a decay event")?;
        }
        if ev.stop {
            stop = Some(i + 1);
            break;
        }
    }
    ensure(drops == [8, 13], format!("lr drops at {drops:?}, expected [8, 13]"))?;
    ensure(
        stop == Some(18) && s.best_epoch() == 3,
        format!("stop at {stop:?}, best epoch {}", s.best_epoch()),
    )?;

    let subjects: Vec<Subject> = (0..3)
        .map(|i| {
            let ph = make_phantom(&PhantomSpec::thalamus([16; 3], i), &AcqParams::default(), i).unwrap();
            let scale = ph.mprage.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Subject {
                id: format!("p{i}"),
                sample: Sample::new(
                    [16; 3],
                    vec![ph.mprage.data().iter().map(|v| v / scale).collect()],
                    ph.labels.labels().to_vec(),
                )
                .unwrap(),
            }
        })
        .collect();
    let fold = Fold {
        train: vec!["p0".into(), "p1".into()],
        val: vec!["p2".into()],
        test: vec![],
    };
    let mut model = build_unet(&UNetConfig::new(1, 14, 2, 4, 0.1), 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        crop_size: [16; 3],
        max_epochs: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let r = train(&mut model, &subjects, &fold, &cfg)
        .map_err(|e| e.to_string())?
        .report;
    ensure(
        r.best_val_loss < r.initial_val_loss,
        format!(
            "validation Dice loss {} did not drop below {}",
            r.best_val_loss, r.initial_val_loss
        ),
    )?;
    Ok(format!(
        "drops at {drops:?} (x0.9), stop at 18 = best 3 + 15; phantom val loss {:.4} -> {:.4}",
        r.initial_val_loss, r.best_val_loss
    ))
}

fn c9_io() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Stream::new(9, purpose::TEST_DATA, 0);
    let geom = Geometry::new([7, 5, 6], [0.9, 1.1, 1.25]).unwrap();
    let data: Vec<f64> = (0..geom.len()).map(|_| (rng.normal() * 1e3) as f32 as f64).collect();
    let vol = Volume3D::new(geom, data).unwrap();
    let path = dir.path().join("v.nii");
    write_nifti(&vol, &path).map_err(|e| e.to_string())?;
    let back = read_volume(&path).map_err(|e| e.to_string())?;
    let same_bits = back
        .data()
        .iter()
        .zip(vol.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(
        same_bits && back.dims() == vol.dims(),
        "float32 NIfTI round trip changed values",
    )?;

    let mut model = build_unet(&UNetConfig::new(2, 14, 2, 4, 0.1), 12).map_err(|e| e.to_string())?;
    let sample = noise_sample(2, [8; 3], 5);
    let ckpt_path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt_path, &model.to_checkpoint(serde_json::json!({}))).map_err(|e| e.to_string())?;
    let (mut restored, _) = SegModel::from_checkpoint(&load_checkpoint(&ckpt_path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    for (mode, key) in [(Mode::Eval, 0), (Mode::McDropout, 77)] {
        let a = predict(&mut model, &sample, mode, key).map_err(|e| e.to_string())?;
        let b = predict(&mut restored, &sample, mode, key).map_err(|e| e.to_string())?;
        let bits = a
            .probs
            .iter()
            .flatten()
            .zip(b.probs.iter().flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(
            bits && a.labels == b.labels,
            format!("{mode:?} predictions differ after restore"),
        )?;
    }
    let bytes = encode_checkpoint(&model.to_checkpoint(serde_json::json!({})));
    ensure(
        encode_checkpoint(&decode_checkpoint(&bytes).map_err(|e| e.to_string())?) == bytes,
        "re-encoding differs",
    )?;
    Ok("NIfTI float32 bit-exact, checkpoint restores EVAL and MC predictions bit-exactly".into())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.insert(
                p.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
}

fn run_pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    if root.exists() {
        std::fs::remove_dir_all(root).unwrap();
    }
    let p = |s: &str| root.join(s).display().to_string();
    let common = ["--threads", "1", "--seed", "7"];
    let steps: Vec<Vec<String>> = vec![
        vec![
            "phantom".into(),
            "--out".into(),
            p("ph"),
            "--subjects".into(),
            "4".into(),
            "--dims".into(),
            "16".into(),
        ],
        vec![
            "fit-maps".into(),
            "--out".into(),
            p("maps"),
            "--manifest".into(),
            p("ph/manifest.json"),
        ],
        vec![
            "synthesize".into(),
            "--out".into(),
            p("syn"),
            "--manifest".into(),
            p("ph/manifest.json"),
            "--maps".into(),
            p("maps"),
        ],
        vec![
            "train".into(),
            "--out".into(),
            p("train"),
            "--manifest".into(),
            p("ph/manifest.json"),
            "--maps".into(),
            p("maps"),
            "--config-preset".into(),
            "ti-top4".into(),
            "--folds".into(),
            "2".into(),
            "--epochs".into(),
            "2".into(),
            "--crop".into(),
            "16".into(),
        ],
        vec![
            "ois".into(),
            "--out".into(),
            p("ois"),
            "--manifest".into(),
            p("ph/manifest.json"),
            "--maps".into(),
            p("maps"),
            "--models".into(),
            p("train"),
            "--mc-runs".into(),
            "3".into(),
        ],
        vec![
            "evaluate".into(),
            "--out".into(),
            p("eval"),
            "--manifest".into(),
            p("ph/manifest.json"),
            "--maps".into(),
            p("maps"),
            "--models".into(),
            p("train"),
        ],
    ];
    for step in steps {
        let args: Vec<String> = std::iter::once("t1q".to_string())
            .chain(step.iter().cloned())
            .chain(common.iter().map(|s| s.to_string()))
            .collect();
        let code = t1q_cli::run(&args);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", step[0]));
        }
    }
    let mut files = BTreeMap::new();
    collect_files(root, root, &mut files);
    Ok(files)
}

fn c10_reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("run");
    let a = run_pipeline(&root)?;
    let b = run_pipeline(&root)?;
    ensure(a.keys().eq(b.keys()), "the two runs wrote different file sets")?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), format!("files differ: {differing:?}"))?;
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(format!(
        "{} files ({bytes} bytes) bit-identical across two runs",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("relaxometry round trip", c1_relaxometry_round_trip),
        ("null-point checks", c2_null_points),
        ("gradient suite", c3_gradient_suite),
        ("OIS sanity", c4_ois_sanity),
        ("OIS discovery oracle", c5_ois_discovery),
        ("metric oracles", c6_metric_oracles),
        ("statistics oracles", c7_statistics_oracles),
        ("training-protocol conformance", c8_training_protocol),
        ("I/O", c9_io),
        ("reproducibility", c10_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = Duration::as_secs_f64(&start.elapsed());
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} [{took:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {detail} [{took:.1} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
