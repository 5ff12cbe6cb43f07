use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t1q_core::autodiff::{load_checkpoint, save_checkpoint, Mode};
use t1q_core::relaxometry::{
    build_input_stack, fit_maps, make_phantom, synthesize_series, ChannelMeta, FitOptions, InputConfig, PhantomSpec,
    QuantMaps, SeriesSpec, StackSources,
};
use t1q_core::rng::{derive, purpose};
use t1q_core::saliency::{compute_ois, select_topk, OISSubject};
use t1q_core::segnet::{build_unet, make_folds, predict, train, FoldPlan, Sample, SegModel, Subject};
use t1q_core::stats::{significance_table, summary_table, tpr_per_class, ConfigResults, SubjectScores};
use t1q_core::volume::{read_nifti, write_labels, write_nifti_as, DataType, Geometry, Volume3D, NUCLEUS_NAMES};

use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::manifest::{Manifest, SubjectEntry};
use crate::{read_json, write_file, write_json, CliError, Command, Inputs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const MODEL_FILE: &str = "model.ckpt";

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cmd {
        Command::Phantom {
            subjects,
            dims,
            noise,
            erosion,
            ..
        } => phantom(cfg, out, *subjects, *dims, *noise, *erosion),
        Command::FitMaps {
            manifest, magnitude, ..
        } => fit(out, &Manifest::load(manifest)?, *magnitude),
        Command::Synthesize {
            inputs,
            ti_start,
            ti_end,
            step,
            ..
        } => synthesize(
            out,
            inputs,
            SeriesSpec {
                start: *ti_start,
                end: *ti_end,
                step: *step,
            },
        ),
        Command::Train { inputs, fold, .. } => train_folds(cfg, out, inputs, *fold),
        Command::Ois {
            inputs, models, topk, ..
        } => ois(cfg, out, inputs, models, *topk),
        Command::Evaluate {
            inputs, models, name, ..
        } => evaluate(out, inputs, models, name.as_deref()),
        Command::Stats { results, reference, .. } => stats(cfg, out, results, reference),
        Command::Report { inputs, .. } => report(out, inputs),
    }
}

/// Double precision keeps fitted values exact across the file boundary.
fn write_f64(vol: &Volume3D, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    }
    Ok(write_nifti_as(vol, path, DataType::Float64, true)?)
}

fn phantom(cfg: &RunConfig, out: &Path, n: usize, edge: usize, noise: f64, erosion: usize) -> Result<(), CliError> {
    if n == 0 || edge < 8 {
        return Err(CliError::Usage("need --subjects >= 1 and --dims >= 8".into()));
    }
    let acq = t1q_core::relaxometry::AcqParams::default();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("sub-{i:02}");
        let mut spec = PhantomSpec::thalamus([edge; 3], derive(cfg.seed, purpose::PHANTOM_LAYOUT, i as u64));
        spec.noise_sigma = noise;
        spec.erosion_radius = erosion;
        let ph = make_phantom(&spec, &acq, derive(cfg.seed, purpose::PHANTOM_NOISE, i as u64))?;
        let dir = out.join(&id);
        write_f64(&ph.mprage, &dir.join("mprage.nii"))?;
        write_f64(&ph.fgatir, &dir.join("fgatir.nii"))?;
        write_f64(&ph.wm_mask, &dir.join("wm_mask.nii"))?;
        write_f64(&ph.truth.pd, &dir.join("truth_pd.nii"))?;
        write_f64(&ph.truth.t1, &dir.join("truth_t1.nii"))?;
        write_labels(&ph.labels, dir.join("labels.nii"))?;
        entries.push(SubjectEntry {
            mprage: PathBuf::from(&id).join("mprage.nii"),
            fgatir: PathBuf::from(&id).join("fgatir.nii"),
            labels: PathBuf::from(&id).join("labels.nii"),
            wm_mask: Some(PathBuf::from(&id).join("wm_mask.nii")),
            id,
        });
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &Manifest {
            subjects: entries,
            acquisition: acq,
            root: PathBuf::new(),
        },
    )?;
    eprintln!("wrote {n} phantom subjects to {}", out.display());
    Ok(())
}

fn fit(out: &Path, manifest: &Manifest, magnitude: bool) -> Result<(), CliError> {
    let opts = FitOptions {
        magnitude,
        ..FitOptions::default()
    };
    for s in &manifest.subjects {
        let d = manifest.load_subject(s)?;
        let maps = fit_maps(&d.mprage, &d.fgatir, &manifest.acquisition, &opts, None)?;
        let dir = out.join(&s.id);
        write_f64(&maps.pd, &dir.join("pd.nii"))?;
        write_f64(&maps.t1, &dir.join("t1.nii"))?;
        write_f64(&maps.status_volume(), &dir.join("status.nii"))?;
        eprintln!("{}: {} of {} voxels fitted", s.id, maps.ok_count(), maps.pd.len());
    }
    Ok(())
}

fn load_maps(maps_dir: &Path, id: &str) -> Result<QuantMaps, CliError> {
    let read = |name: &str| -> Result<Volume3D, CliError> {
        let p = maps_dir.join(id).join(name);
        read_nifti(&p, true)
            .map(|l| l.volume)
            .map_err(|e| CliError::Data(format!("{}: {e} (run fit-maps first)", p.display())))
    };
    Ok(QuantMaps::from_volumes(
        read("pd.nii")?,
        read("t1.nii")?,
        &read("status.nii")?,
    )?)
}

fn synthesize(out: &Path, inputs: &Inputs, series: SeriesSpec) -> Result<(), CliError> {
    let manifest = Manifest::load(&inputs.manifest)?;
    for s in &manifest.subjects {
        let maps = load_maps(&inputs.maps, &s.id)?;
        let stack = synthesize_series(&maps, &series, manifest.acquisition.tr)?;
        for (vol, meta) in stack.channels().iter().zip(stack.meta()) {
            write_f64(vol, &out.join(&s.id).join(format!("{}.nii", meta.name)))?;
        }
        eprintln!("{}: {} volumes", s.id, stack.len());
    }
    Ok(())
}

struct Loaded {
    id: String,
    sample: Sample,
    channels: Vec<ChannelMeta>,
}

fn load_samples(inputs: &Inputs, manifest: &Manifest, preset: &str) -> Result<Vec<Loaded>, CliError> {
    let config = InputConfig::preset(preset).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest
        .subjects
        .iter()
        .map(|s| {
            let d = manifest.load_subject(s)?;
            let maps = load_maps(&inputs.maps, &s.id)?;
            let stack = build_input_stack(
                &StackSources {
                    maps: &maps,
                    mprage: Some(&d.mprage),
                    fgatir: Some(&d.fgatir),
                    acq: manifest.acquisition,
                    wm_mask: d.wm_mask.as_ref(),
                },
                &config,
            )?;
            Ok(Loaded {
                id: s.id.clone(),
                sample: Sample::from_stack(&stack, &d.labels)?,
                channels: stack.meta().to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    fold: usize,
    input_preset: String,
    channels: Vec<ChannelMeta>,
    seed: u64,
}

fn fold_dir(models: &Path, fold: usize) -> PathBuf {
    models.join(format!("fold{fold}"))
}

fn train_folds(cfg: &RunConfig, out: &Path, inputs: &Inputs, only: Option<usize>) -> Result<(), CliError> {
    let manifest = Manifest::load(&inputs.manifest)?;
    let data = load_samples(inputs, &manifest, &cfg.input_preset)?;
    let plan = make_folds(&manifest.ids(), cfg.folds, cfg.seed)?;
    if let Some(f) = only {
        if f >= plan.folds.len() {
            return Err(CliError::Usage(format!(
                "--fold {f} but only {} folds",
                plan.folds.len()
            )));
        }
    }
    write_json(&out.join(FOLDS_FILE), &plan)?;
    let mut ucfg = cfg.unet.clone();
    ucfg.in_channels = data[0].sample.num_channels();
    let channels = data[0].channels.clone();
    let subjects: Vec<Subject> = data
        .into_iter()
        .map(|d| Subject {
            id: d.id,
            sample: d.sample,
        })
        .collect();
    for (i, fold) in plan.folds.iter().enumerate() {
        if only.is_some_and(|f| f != i) {
            continue;
        }
        let mut model = build_unet(&ucfg, derive(cfg.seed, purpose::WEIGHT_INIT, i as u64))?;
        let mut tcfg = cfg.train.clone();
        tcfg.seed = derive(cfg.seed, purpose::SHUFFLE, i as u64);
        let outcome = train(&mut model, &subjects, fold, &tcfg)?;
        let dir = fold_dir(out, i);
        let meta = ModelMeta {
            fold: i,
            input_preset: cfg.input_preset.clone(),
            channels: channels.clone(),
            seed: cfg.seed,
        };
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
        save_checkpoint(
            &dir.join(MODEL_FILE),
            &model.to_checkpoint(serde_json::to_value(&meta).expect("meta")),
        )?;
        write_file(&dir.join("train_log.csv"), outcome.report.to_csv().as_bytes())?;
        write_json(&dir.join("report.json"), &outcome.report)?;
        let r = &outcome.report;
        eprintln!(
            "fold {i}: {} epochs, val loss {:.4} -> {:.4} (best epoch {})",
            r.epochs.len(),
            r.initial_val_loss,
            r.best_val_loss,
            r.best_epoch
        );
    }
    Ok(())
}

type FoldModels = Vec<Option<(SegModel, ModelMeta)>>;

/// Fold models keyed by fold index, plus the fold plan.
fn load_models(models: &Path) -> Result<(FoldPlan, FoldModels), CliError> {
    let plan: FoldPlan = read_json(&models.join(FOLDS_FILE))?;
    let mut out = Vec::with_capacity(plan.folds.len());
    for i in 0..plan.folds.len() {
        let p = fold_dir(models, i).join(MODEL_FILE);
        if !p.is_file() {
            out.push(None);
            continue;
        }
        let (model, extra) = SegModel::from_checkpoint(&load_checkpoint(&p)?)?;
        let meta: ModelMeta =
            serde_json::from_value(extra).map_err(|e| CliError::Data(format!("{}: bad metadata: {e}", p.display())))?;
        out.push(Some((model, meta)));
    }
    Ok((plan, out))
}

/// For every manifest subject, the fold whose test set holds it.
fn assign(plan: &FoldPlan, models: &[Option<(SegModel, ModelMeta)>], ids: &[String]) -> Result<Vec<usize>, CliError> {
    ids.iter()
        .map(|id| {
            let f = plan
                .fold_of(id)
                .ok_or_else(|| CliError::Data(format!("subject {id} is in no fold's test set")))?;
            if models[f].is_none() {
                return Err(CliError::Data(format!(
                    "subject {id} needs the fold {f} model, which was not trained"
                )));
            }
            Ok(f)
        })
        .collect()
}

fn common_preset(models: &[Option<(SegModel, ModelMeta)>]) -> Result<String, CliError> {
    let mut presets = models.iter().flatten().map(|(_, m)| m.input_preset.clone());
    let first = presets
        .next()
        .ok_or_else(|| CliError::Data("no trained models found".into()))?;
    if presets.any(|p| p != first) {
        return Err(CliError::Data(
            "fold models were trained on different input presets".into(),
        ));
    }
    Ok(first)
}

fn ois(cfg: &RunConfig, out: &Path, inputs: &Inputs, models_dir: &Path, topk: Option<usize>) -> Result<(), CliError> {
    let manifest = Manifest::load(&inputs.manifest)?;
    let (plan, models) = load_models(models_dir)?;
    let folds = assign(&plan, &models, &manifest.ids())?;
    let preset = common_preset(&models)?;
    let data = load_samples(inputs, &manifest, &preset)?;
    // Compact the model list to the folds that are actually used.
    let mut used: Vec<usize> = folds.clone();
    used.sort_unstable();
    used.dedup();
    let list: Vec<SegModel> = used
        .iter()
        .map(|&f| models[f].as_ref().expect("assigned").0.clone())
        .collect();
    let subjects: Vec<OISSubject> = data
        .iter()
        .zip(&folds)
        .map(|(d, f)| OISSubject {
            id: &d.id,
            sample: &d.sample,
            channels: &d.channels,
            model: used.binary_search(f).expect("used"),
        })
        .collect();
    let mut ocfg = cfg.ois.clone();
    ocfg.classes = list[0].config.num_classes;
    let report = compute_ois(&list, &subjects, &ocfg)?;
    write_file(&out.join("ois.csv"), report.to_csv().as_bytes())?;
    let mut meta = report.metadata();
    meta["input_preset"] = serde_json::json!(preset);
    meta["models"] = serde_json::json!(used.iter().map(|f| format!("fold{f}")).collect::<Vec<_>>());
    write_json(&out.join("ois.json"), &meta)?;
    if let Some(raw) = &report.raw {
        let mut s = String::from("subject,run,class,channel,score\n");
        for r in raw {
            let _ = writeln!(s, "{},{},{},{},{:.17e}", r.subject, r.run, r.class, r.channel, r.score);
        }
        write_file(&out.join("ois_raw.csv"), s.as_bytes())?;
    }
    if let Some(k) = topk {
        let chosen = select_topk(&report, k).map_err(|e| CliError::Usage(e.to_string()))?;
        let names: Vec<&str> = chosen.iter().map(|&i| report.channels[i].meta.name.as_str()).collect();
        write_json(
            &out.join("topk.json"),
            &serde_json::json!({ "k": k, "channels": chosen, "names": names }),
        )?;
    }
    for i in report.ranking().into_iter().take(5) {
        let c = &report.channels[i];
        eprintln!("rank {}: {} ({:.6e})", c.rank, c.meta.name, c.score);
    }
    Ok(())
}

fn evaluate(out: &Path, inputs: &Inputs, models_dir: &Path, name: Option<&str>) -> Result<(), CliError> {
    let manifest = Manifest::load(&inputs.manifest)?;
    let (plan, mut models) = load_models(models_dir)?;
    let folds = assign(&plan, &models, &manifest.ids())?;
    let preset = common_preset(&models)?;
    let data = load_samples(inputs, &manifest, &preset)?;
    let mut csv = String::from("subject,label,name,tp,fn,tpr\n");
    let mut subjects = Vec::with_capacity(data.len());
    for (d, &f) in data.iter().zip(&folds) {
        let (model, _) = models[f].as_mut().expect("assigned");
        let pred = predict(model, &d.sample, Mode::Eval, 0)?;
        let geom = Geometry::unit(d.sample.dims);
        let pred_labels = pred.label_volume(&geom)?;
        let dir = out.join(&d.id);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
        write_labels(&pred_labels, dir.join("pred.nii"))?;
        let tpr = tpr_per_class(&pred_labels, &d.sample.label_volume()?)?;
        for (c, t) in tpr.classes.iter().enumerate().skip(1) {
            let v = t.tpr.map(|x| format!("{x:.17e}")).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{},{},{},{}", d.id, c, NUCLEUS_NAMES[c - 1], t.tp, t.fn_, v);
        }
        subjects.push(SubjectScores {
            subject: d.id.clone(),
            tpr,
        });
    }
    write_file(&out.join("tpr.csv"), csv.as_bytes())?;
    let results = ConfigResults {
        name: name.unwrap_or(&preset).to_string(),
        subjects,
    };
    write_json(&out.join("results.json"), &results)?;
    let table = summary_table(std::slice::from_ref(&results), Default::default())?;
    write_file(&out.join("summary.csv"), table.to_csv().as_bytes())?;
    if let Some(v) = table.rows[0].1.last().copied().flatten() {
        eprintln!("{}: VWA TPR {:.2} ± {:.2}", results.name, 100.0 * v.mean, 100.0 * v.sd);
    }
    Ok(())
}

fn stats(cfg: &RunConfig, out: &Path, files: &[PathBuf], reference: &str) -> Result<(), CliError> {
    let configs: Vec<ConfigResults> = files.iter().map(|f| read_json(f)).collect::<Result<_, _>>()?;
    let summary = summary_table(&configs, cfg.vwa_weights)?;
    write_file(&out.join("summary.csv"), summary.to_csv().as_bytes())?;
    let sig = significance_table(&configs, reference, cfg.alpha, cfg.vwa_weights)?;
    write_file(&out.join("significance.csv"), sig.to_csv().as_bytes())?;
    write_file(&out.join("pvalues.csv"), sig.to_pvalue_csv().as_bytes())?;
    Ok(())
}

fn csv_as_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(head) = lines.next() else {
        return String::new();
    };
    let cols = head.split(',').count();
    let row = |l: &str| format!("| {} |\n", l.split(',').collect::<Vec<_>>().join(" | "));
    let mut s = row(head);
    s.push_str(&format!("|{}\n", " --- |".repeat(cols)));
    for l in lines {
        s.push_str(&row(l));
    }
    s
}

fn report(out: &Path, dirs: &[PathBuf]) -> Result<(), CliError> {
    let mut md = String::from("# t1q report\n");
    for dir in dirs {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("{} is not a directory", dir.display())));
        }
        let _ = write!(md, "\n## {}\n", dir.display());
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).ok();
        let seed = read(RUN_CONFIG_FILE).and_then(|c| serde_json::from_str::<serde_json::Value>(&c).ok());
        if let Some(v) = &seed {
            let _ = writeln!(md, "\nSeed {}.", v["seed"]);
        }
        if let Some(plan) = read(FOLDS_FILE) {
            if let Some(v) = &seed {
                let _ = writeln!(md, "\nInput preset `{}`.", v["input_preset"].as_str().unwrap_or("?"));
            }
            let plan: FoldPlan = serde_json::from_str(&plan).map_err(|e| CliError::Data(e.to_string()))?;
            md.push_str("\n### Training\n\n| fold | epochs | initial val loss | best val loss | best epoch |\n| --- | --- | --- | --- | --- |\n");
            for i in 0..plan.folds.len() {
                if let Ok(r) = read_json::<t1q_core::segnet::TrainReport>(&fold_dir(dir, i).join("report.json")) {
                    let _ = writeln!(
                        md,
                        "| {i} | {} | {:.4} | {:.4} | {} |",
                        r.epochs.len(),
                        r.initial_val_loss,
                        r.best_val_loss,
                        r.best_epoch
                    );
                }
            }
        }
        for (file, title) in [
            ("ois.csv", "Overall Importance Score"),
            ("summary.csv", "TPR (mean ± SD, %)"),
            ("significance.csv", "Significance against the reference"),
        ] {
            if let Some(c) = read(file) {
                let _ = write!(md, "\n### {title}\n\n{}", csv_as_markdown(&c));
            }
        }
    }
    write_file(&out.join("report.md"), md.as_bytes())
}
