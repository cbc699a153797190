use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mlad_core::checkpoint;
use mlad_core::dataset::{
    apply_session_labels, fuse, line_labels_from_text, records_from_keys, session_labels_from_csv, sessionize,
    split, windowize, windows_to_text, Label, SplitSpec, SystemCorpus, WindowMode,
};
use mlad_core::detect::{scores_to_csv, ThresholdPolicy};
use mlad_core::embed::{import_vectors, EmbeddedSet, EmbeddingTable};
use mlad_core::eval::{metrics_of, run_experiment, score_and_threshold, Ablation, ExperimentKind, ExperimentSpec, SystemData};
use mlad_core::logparse::{parse_corpus, parse_keys_text, parse_reader, ParserConfig, TemplateStore};
use mlad_core::synthetic::{generate, SyntheticSpec, System};
use mlad_core::trainer::TrainConfig;
use mlad_core::{MladError, Result};

use crate::manifest::RunManifest;
use crate::prepared::{create_dir, read_text, write_text, Meta, Prepared, KEYS, MANIFEST, META, TEMPLATES, TEST, TRAIN, WINDOWS};
use crate::{EvalArgs, ParseArgs, PolicyFlags, PrepareArgs, ScoreArgs, TrainArgs, TrainFlags};

fn to_json<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

/// Writes each `(file, text)` into `dir` and records it as an output.
fn emit(manifest: &mut RunManifest, dir: &Path, files: &[(&str, &str)]) -> Result<()> {
    for (name, text) in files {
        let path = dir.join(name);
        write_text(&path, text)?;
        manifest.output(&path)?;
    }
    Ok(())
}

pub fn parse(a: &ParseArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| MladError::Config(format!("{}: {e}", p.display())))?,
        None => ParserConfig::default(),
    };
    let file = File::open(&a.log).map_err(|e| MladError::io(&a.log, e))?;
    let parsed = parse_reader(BufReader::new(file), &a.log.display().to_string(), &config)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("parse", 0, to_json(&config));
    manifest.input(&a.log)?;
    if let Some(p) = &a.config {
        manifest.input(p)?;
    }
    emit(&mut manifest, &a.out, &[(TEMPLATES, &parsed.store.to_text()), (KEYS, &parsed.keys_text())])?;
    manifest.write(&a.out.join(MANIFEST))?;
    println!(
        "{} lines parsed into {} templates ({} skipped)",
        parsed.keys.len(),
        parsed.store.len(),
        parsed.skipped
    );
    Ok(())
}

fn label_count(corpus: &SystemCorpus) -> usize {
    corpus.windows.iter().filter(|w| w.label.is_anomalous()).count()
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("prepare", a.seed, serde_json::Value::Null);
    let sliding = SplitSpec::sliding(a.window, a.seed);
    let (corpus, mode, window) = if let Some(name) = &a.synthetic {
        let system = System::parse(name)?;
        let spec = SyntheticSpec {
            window: a.window,
            ..SyntheticSpec::new(system, a.windows, a.seed)
        };
        let synthetic = generate(&spec)?;
        let parsed = parse_corpus(synthetic.lines.iter().map(String::as_str), &ParserConfig::default(), None)?;
        emit(
            &mut manifest,
            &a.out,
            &[
                ("raw.log", &synthetic.log_text()),
                ("labels.txt", &synthetic.labels_text()),
                (KEYS, &parsed.keys_text()),
            ],
        )?;
        let origin = a.name.clone().unwrap_or_else(|| system.name().to_string());
        let records = records_from_keys(&parsed.keys, &synthetic.labels)?;
        let windows = windowize(&records, &sliding, &origin)?;
        let corpus = SystemCorpus {
            origin,
            store: parsed.store,
            windows,
        };
        (corpus, WindowMode::Sliding, a.window)
    } else if !a.fuse.is_empty() {
        let parts = a.fuse.iter().map(|d| Prepared::open(d)).collect::<Result<Vec<_>>>()?;
        for p in &parts {
            for f in p.inputs() {
                manifest.input(&f)?;
            }
        }
        let corpora = parts.iter().map(Prepared::corpus).collect::<Result<Vec<_>>>()?;
        let mut fused = fuse(&corpora, a.seed)?;
        if let Some(name) = &a.name {
            fused.origin = name.clone();
        }
        let first = &parts[0].meta;
        let same = parts.iter().all(|p| p.meta.mode == first.mode && p.meta.window == first.window);
        (fused, first.mode, if same { first.window } else { 0 })
    } else if let Some(dir) = &a.parsed {
        let templates = dir.join(TEMPLATES);
        let keys_path = dir.join(KEYS);
        let store = TemplateStore::from_text(&read_text(&templates)?, &templates.display().to_string())?;
        let keys = parse_keys_text(&read_text(&keys_path)?, &keys_path.display().to_string())?;
        manifest.input(&templates)?;
        manifest.input(&keys_path)?;
        let labels_path = a
            .labels
            .as_ref()
            .ok_or_else(|| MladError::Config("prepare --parsed needs --labels".into()))?;
        manifest.input(labels_path)?;
        let labels_text = read_text(labels_path)?;
        let source = labels_path.display().to_string();
        let origin = match &a.name {
            Some(n) => n.clone(),
            None => dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "S".into()),
        };
        if let Some(pattern) = &a.session_id_regex {
            let log = a
                .log
                .as_ref()
                .ok_or_else(|| MladError::Config("--session-id-regex needs --log".into()))?;
            manifest.input(log)?;
            let lines: Vec<String> = read_text(log)?.lines().map(str::to_string).collect();
            let records = records_from_keys(&keys, &vec![Label::Normal; lines.len()])?;
            let mut sessions = sessionize(&records, &lines, pattern)?;
            apply_session_labels(&mut sessions.records, &session_labels_from_csv(&labels_text, &source)?);
            let spec = SplitSpec {
                seed: a.seed,
                mode: WindowMode::Session,
                window_size: 0,
            };
            let windows = windowize(&sessions.records, &spec, &origin)?;
            (SystemCorpus { origin, store, windows }, WindowMode::Session, 0)
        } else {
            let labels = line_labels_from_text(&labels_text, &source)?;
            let records = records_from_keys(&keys, &labels)?;
            let windows = windowize(&records, &sliding, &origin)?;
            (SystemCorpus { origin, store, windows }, WindowMode::Sliding, a.window)
        }
    } else {
        return Err(MladError::Config("prepare needs one of --parsed, --synthetic or --fuse".into()));
    };

    let parts = split(&corpus.windows, a.seed)?;
    let meta = Meta {
        origin: corpus.origin.clone(),
        mode,
        window,
        seed: a.seed,
    };
    manifest.config = to_json(&meta);
    emit(
        &mut manifest,
        &a.out,
        &[
            (META, &toml::to_string(&meta).expect("meta serializes")),
            (TEMPLATES, &corpus.store.to_text()),
            (WINDOWS, &windows_to_text(&corpus.windows)),
            (TRAIN, &windows_to_text(&parts.train)),
            (TEST, &windows_to_text(&parts.test)),
        ],
    )?;
    manifest.write(&a.out.join(MANIFEST))?;
    println!(
        "{}: {} windows ({} anomalous), {} train, {} test",
        corpus.origin,
        corpus.windows.len(),
        label_count(&corpus),
        parts.train.len(),
        parts.test.len()
    );
    Ok(())
}

fn train_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(a) = flags.alpha {
        cfg.model.alpha = a;
    }
    if let Some(d) = flags.dim {
        cfg.model.d = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policy(flags: &PolicyFlags) -> Result<ThresholdPolicy> {
    let p = match (flags.quantile, flags.rho) {
        (_, Some(rho)) => ThresholdPolicy::Contamination { rho },
        (Some(q), None) => ThresholdPolicy::TrainQuantile { q },
        (None, None) => ThresholdPolicy::default(),
    };
    p.validate()?;
    Ok(p)
}

/// Imported vectors when given, hashed embeddings of width `d` otherwise.
fn embedding_table(prep: &Prepared, imported: Option<&PathBuf>, d: usize) -> Result<EmbeddingTable> {
    match imported {
        Some(p) => {
            let table = import_vectors(p, &prep.store)?;
            if table.dim() != d {
                return Err(MladError::Dimension {
                    op: "imported embeddings",
                    left: vec![table.dim()],
                    right: vec![d],
                });
            }
            Ok(table)
        }
        None => EmbeddingTable::hashed(&prep.store, d),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let prep = Prepared::open(&a.data)?;
    let mut cfg = Ablation::parse(&a.ablate)?.apply(&train_config(&a.train)?);
    if let Some(p) = &a.embeddings {
        // an imported table fixes the model width
        cfg.model.d = import_vectors(p, &prep.store)?.dim();
    }
    let table = embedding_table(&prep, a.embeddings.as_ref(), cfg.model.d)?;
    let windows = prep.windows(TRAIN)?;
    let data = EmbeddedSet::build(&windows, &table)?;
    let (model, report) = mlad_core::trainer::train(&data, &cfg)?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", cfg.seed, to_json(&cfg));
    for f in [prep.path(META), prep.path(TEMPLATES), prep.path(TRAIN)] {
        manifest.input(&f)?;
    }
    for f in a.train.config.iter().chain(&a.embeddings) {
        manifest.input(f)?;
    }
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    manifest.output(&ckpt)?;
    emit(&mut manifest, &a.out, &[("train_report.txt", &report.to_text(false))])?;
    manifest.write(&a.out.join(MANIFEST))?;
    let seconds: f64 = report.epochs.iter().map(|e| e.seconds).sum();
    println!(
        "trained on {} windows for {} epochs in {seconds:.1}s; final loss {}",
        windows.len(),
        report.epochs.len(),
        report.epochs.last().map_or(f64::NAN, |e| e.loss)
    );
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let prep = Prepared::open(&a.data)?;
    let model = checkpoint::load(&a.model)?;
    let file = match a.split.as_str() {
        "test" => TEST,
        "train" => TRAIN,
        "all" => WINDOWS,
        other => return Err(MladError::Config(format!("--split must be test, train or all, got {other:?}"))),
    };
    let policy = policy(&a.policy)?;
    let table = embedding_table(&prep, a.embeddings.as_ref(), model.config.model.d)?;
    let windows = prep.windows(file)?;
    let data = EmbeddedSet::build(&windows, &table)?;
    let (scored, threshold) = score_and_threshold(&model, &windows, &data, policy)?;

    create_dir(&a.out)?;
    let config = serde_json::json!({ "policy": to_json(&policy), "split": a.split, "codes": a.codes });
    let mut manifest = RunManifest::new("score", model.config.seed, config);
    for f in [a.model.clone(), prep.path(META), prep.path(TEMPLATES), prep.path(file)] {
        manifest.input(&f)?;
    }
    if let Some(p) = &a.embeddings {
        manifest.input(p)?;
    }
    emit(&mut manifest, &a.out, &[("scores.csv", &scores_to_csv(&scored, a.codes))])?;
    manifest.write(&a.out.join(MANIFEST))?;
    let m = metrics_of(&scored)?;
    println!(
        "{} windows scored, threshold {threshold}; precision {:.4} recall {:.4} F1 {:.4}",
        scored.len(),
        m.precision,
        m.recall,
        m.f1
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let modes = [a.fuse, !a.target.is_empty(), !a.ablate.is_empty(), !a.alpha_sweep.is_empty()];
    if modes.iter().filter(|&&m| m).count() > 1 {
        return Err(MladError::Config(
            "choose at most one of --fuse, --target, --ablate and --alpha-sweep".into(),
        ));
    }
    let cfg = train_config(&a.train)?;
    let sources = a.data.iter().map(|d| Prepared::open(d)).collect::<Result<Vec<_>>>()?;
    let targets = a.target.iter().map(|d| Prepared::open(d)).collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("eval", cfg.seed, serde_json::Value::Null);
    let mut systems = Vec::new();
    for p in sources.iter().chain(&targets) {
        for f in p.inputs() {
            manifest.input(&f)?;
        }
        systems.push(SystemData::hashed(p.corpus()?));
    }
    if let Some(p) = &a.train.config {
        manifest.input(p)?;
    }
    let names = |ps: &[Prepared]| -> Vec<String> { ps.iter().map(|p| p.meta.origin.clone()).collect() };
    let (train_sets, test_sets) = (names(&sources), names(&targets));
    let kind = if a.fuse {
        ExperimentKind::Fused
    } else if !targets.is_empty() {
        ExperimentKind::Transfer
    } else if !a.ablate.is_empty() {
        ExperimentKind::Ablation
    } else if !a.alpha_sweep.is_empty() {
        ExperimentKind::AlphaSweep
    } else {
        ExperimentKind::Single
    };
    let train_refs: Vec<&str> = train_sets.iter().map(String::as_str).collect();
    let test_refs: Vec<&str> = test_sets.iter().map(String::as_str).collect();
    let mut spec = ExperimentSpec::new(kind, &train_refs, &test_refs);
    spec.policy = policy(&a.policy)?;
    spec.split_seed = sources[0].meta.seed;
    if !a.alpha_sweep.is_empty() {
        spec.alpha_grid = a.alpha_sweep.clone();
    }
    if !a.ablate.is_empty() {
        spec.ablations = vec![Ablation::None];
        for s in &a.ablate {
            let v = Ablation::parse(s)?;
            if !spec.ablations.contains(&v) {
                spec.ablations.push(v);
            }
        }
    }
    let report = run_experiment(&spec, &systems, &cfg)?;

    create_dir(&a.out)?;
    manifest.config = serde_json::json!({
        "experiment": kind.as_str(),
        "policy": to_json(&spec.policy),
        "split_seed": spec.split_seed,
        "alpha_grid": spec.alpha_grid,
        "ablations": spec.ablations.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
        "train": to_json(&cfg),
    });
    let summary = report.summary();
    emit(&mut manifest, &a.out, &[("report.csv", &report.to_csv()), ("summary.txt", &summary)])?;
    manifest.write(&a.out.join(MANIFEST))?;
    print!("{summary}");
    Ok(())
}
