use mlad_core::checkpoint;
use mlad_core::dataset::{split, Label};
use mlad_core::detect::{score, scores_to_csv, ThresholdPolicy};
use mlad_core::embed::{EmbeddedSet, EmbeddingTable};
use mlad_core::encoder::ModelConfig;
use mlad_core::eval::{run_experiment, score_and_threshold, Ablation, ExperimentKind, ExperimentSpec, SystemData};
use mlad_core::logparse::ParserConfig;
use mlad_core::synthetic::{generate, SyntheticSpec, System};
use mlad_core::tensorcore::Tensor;
use mlad_core::trainer::{train, TrainConfig};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch: 64,
        model: ModelConfig {
            d: 16,
            d_h: 4,
            components: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn system(s: System, windows: usize, seed: u64) -> SystemData {
    let corpus = generate(&SyntheticSpec::new(s, windows, seed)).unwrap();
    SystemData::hashed(corpus.to_system(&ParserConfig::default()).unwrap())
}

fn contamination() -> ThresholdPolicy {
    ThresholdPolicy::Contamination { rho: 0.5 }
}

#[test]
fn planted_outliers_score_higher() {
    // normal windows repeat one smooth pattern; outliers are large and random-signed
    let normal = |i: usize| {
        let data = (0..4 * 8).map(|j| ((j % 8) as f64 * 0.3).sin() + 0.01 * ((i * 13 + j) % 5) as f64).collect();
        Tensor::matrix(4, 8, data).unwrap()
    };
    let outlier = |i: usize| {
        let data = (0..4 * 8).map(|j| if (i * 31 + j * 17) % 3 == 0 { 3.0 } else { -2.5 }).collect();
        Tensor::matrix(4, 8, data).unwrap()
    };
    let train_set = EmbeddedSet::new((0..40).map(normal).collect(), vec![Label::Normal; 40]).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch: 20,
        dropout: 0.0,
        lr: 0.01,
        model: ModelConfig {
            d: 8,
            d_h: 2,
            components: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let (model, _) = train(&train_set, &cfg).unwrap();
    let mut mats: Vec<Tensor> = (40..50).map(normal).collect();
    mats.extend((0..5).map(outlier));
    let mut labels = vec![Label::Normal; 10];
    labels.extend([Label::Anomalous; 5]);
    let test = EmbeddedSet::new(mats, labels.clone()).unwrap();
    let windows: Vec<_> = labels
        .iter()
        .map(|&label| mlad_core::dataset::Window {
            keys: vec![0, 0],
            label,
            origin: "P".into(),
            session_id: None,
        })
        .collect();
    let scored = score(&windows, &test, &model).unwrap();
    let worst_normal = scored[..10].iter().map(|s| s.energy.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let best_outlier = scored[10..].iter().map(|s| s.energy.unwrap()).fold(f64::INFINITY, f64::min);
    assert!(best_outlier > worst_normal, "{best_outlier} <= {worst_normal}");
}

#[test]
fn single_run_detects_planted_keywords() {
    let systems = [system(System::A, 600, 4)];
    let mut spec = ExperimentSpec::new(ExperimentKind::Single, &["A"], &[]);
    spec.policy = contamination();
    let report = run_experiment(&spec, &systems, &small_cfg()).unwrap();
    assert_eq!(report.rows.len(), 1);
    let f1 = report.rows[0].metrics.f1;
    assert!(f1 >= 0.8, "f1 {f1}");
    assert!(report.to_csv().starts_with("experiment,train_set,test_set,alpha,ablation,precision,recall,f1,threshold,seed\nsingle,A,A,1.5,none,"));
}

#[test]
fn reruns_are_bit_identical() {
    let data = system(System::B, 300, 8);
    let parts = split(&data.corpus.windows, 1).unwrap();
    let table = EmbeddingTable::hashed(&data.corpus.store, 16).unwrap();
    let train_set = EmbeddedSet::build(&parts.train, &table).unwrap();
    let test_set = EmbeddedSet::build(&parts.test, &table).unwrap();
    let run = || {
        let (model, report) = train(&train_set, &small_cfg()).unwrap();
        let (scored, _) = score_and_threshold(&model, &parts.test, &test_set, contamination()).unwrap();
        (checkpoint::to_bytes(&model), scores_to_csv(&scored, true), report.epochs.len())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let data = system(System::A, 300, 5);
    let parts = split(&data.corpus.windows, 2).unwrap();
    let table = EmbeddingTable::hashed(&data.corpus.store, 16).unwrap();
    let train_set = EmbeddedSet::build(&parts.train, &table).unwrap();
    let test_set = EmbeddedSet::build(&parts.test, &table).unwrap();
    for ablation in [Ablation::None, Ablation::NoGmm] {
        let (model, _) = train(&train_set, &ablation.apply(&small_cfg())).unwrap();
        let path = std::env::temp_dir().join(format!("mlad-pipeline-{}-{}.ckpt", std::process::id(), ablation.as_str()));
        checkpoint::save(&model, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        let before = score(&parts.test, &test_set, &model).unwrap();
        let after = score(&parts.test, &test_set, &back).unwrap();
        assert_eq!(before, after);
        assert_eq!(before[0].energy.is_some(), ablation == Ablation::None);
    }
}

#[test]
fn fused_report_lists_overall_then_each_system() {
    let systems = [system(System::A, 200, 1), system(System::B, 200, 2)];
    let mut spec = ExperimentSpec::new(ExperimentKind::Fused, &["A", "B"], &[]);
    spec.policy = contamination();
    let cfg = TrainConfig { epochs: 1, ..small_cfg() };
    let report = run_experiment(&spec, &systems, &cfg).unwrap();
    let names: Vec<(&str, &str)> = report
        .rows
        .iter()
        .map(|r| (r.train_set.as_str(), r.test_set.as_str()))
        .collect();
    assert_eq!(names, vec![("A+B", "A+B"), ("A+B", "A"), ("A+B", "B")]);
    let per_system: usize = report.rows[1..].iter().map(|r| r.metrics.tp + r.metrics.fp + r.metrics.fn_ + r.metrics.tn).sum();
    let m = report.rows[0].metrics;
    assert_eq!(per_system, m.tp + m.fp + m.fn_ + m.tn);
}

#[test]
fn transfer_never_reads_the_target_while_training() {
    let systems = [system(System::A, 200, 1), system(System::B, 200, 2)];
    let mut spec = ExperimentSpec::new(ExperimentKind::Transfer, &["A"], &["B"]);
    spec.policy = contamination();
    let cfg = TrainConfig { epochs: 1, ..small_cfg() };
    let report = run_experiment(&spec, &systems, &cfg).unwrap();
    assert_eq!(report.target_reads_during_training, Some(0));
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].test_set, "B");
    let bad = ExperimentSpec::new(ExperimentKind::Transfer, &["A"], &["A"]);
    assert!(run_experiment(&bad, &systems, &cfg).is_err());
}

#[test]
fn sweeps_and_ablations_emit_one_row_per_variant() {
    let systems = [system(System::A, 120, 3)];
    let cfg = TrainConfig { epochs: 1, ..small_cfg() };
    let mut sweep = ExperimentSpec::new(ExperimentKind::AlphaSweep, &["A"], &[]);
    sweep.alpha_grid = vec![1.0, 1.2, 1.5];
    sweep.policy = contamination();
    let rows = run_experiment(&sweep, &systems, &cfg).unwrap().rows;
    assert_eq!(rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![1.0, 1.2, 1.5]);
    let mut ablate = ExperimentSpec::new(ExperimentKind::Ablation, &["A"], &[]);
    ablate.policy = contamination();
    let rows = run_experiment(&ablate, &systems, &cfg).unwrap().rows;
    let kinds: Vec<Ablation> = rows.iter().map(|r| r.ablation).collect();
    assert_eq!(kinds, vec![Ablation::None, Ablation::NoEntmax, Ablation::NoGmm]);
    assert_eq!(rows[1].alpha, 1.0);
}
