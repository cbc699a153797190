//! Detection metrics and the experiment protocols: single-system runs,
//! ablations, α sweeps, multi-system fusion and cross-system transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{fuse, split, Label, SystemCorpus, Window};
use crate::detect::{score, score_mode, threshold, ScoreMode, ScoredWindow, ThresholdPolicy, Verdict};
use crate::embed::{EmbeddedSet, EmbeddingTable};
use crate::error::{MladError, Result};
use crate::trainer::{train, TrainConfig, TrainReport, TrainedModel};

/// The α grid swept in the reference ablation.
pub const REFERENCE_ALPHA_GRID: [f64; 7] = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when `tp + fp == 0` and precision was defined as 0.
    pub precision_degenerate: bool,
    /// Set when `tp + fn == 0` and recall was defined as 0.
    pub recall_degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        let ratio = |a: usize, b: usize| if a + b > 0 { a as f64 / (a + b) as f64 } else { 0.0 };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            precision_degenerate: tp + fp == 0,
            recall_degenerate: tp + fn_ == 0,
        }
    }
}

pub fn metrics(verdicts: &[Verdict], labels: &[Label]) -> Result<Metrics> {
    if verdicts.len() != labels.len() {
        return Err(MladError::Contract(format!(
            "{} verdicts but {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (v, l) in verdicts.iter().zip(labels) {
        match (v, l) {
            (Verdict::Anomalous, Label::Anomalous) => tp += 1,
            (Verdict::Anomalous, Label::Normal) => fp += 1,
            (Verdict::Normal, Label::Anomalous) => fn_ += 1,
            (Verdict::Normal, Label::Normal) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

pub fn metrics_of<'a>(scored: impl IntoIterator<Item = &'a ScoredWindow>) -> Result<Metrics> {
    let (mut verdicts, mut labels) = (Vec::new(), Vec::new());
    for s in scored {
        verdicts.push(
            s.verdict
                .ok_or_else(|| MladError::Contract("window scored without a verdict".into()))?,
        );
        labels.push(s.label);
    }
    metrics(&verdicts, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Softmax (α = 1) in attention and membership.
    NoEntmax,
    /// Reconstruction-only training and scoring.
    NoGmm,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoEntmax => "no_entmax",
            Ablation::NoGmm => "no_gmm",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "no_entmax" => Ok(Ablation::NoEntmax),
            "no_gmm" => Ok(Ablation::NoGmm),
            _ => Err(MladError::Config(format!("unknown ablation {s:?}"))),
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            Ablation::None => {}
            Ablation::NoEntmax => {
                cfg.model.alpha = 1.0;
                cfg.model.membership_alpha = 1.0;
            }
            Ablation::NoGmm => {
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
            }
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Single,
    Fused,
    Transfer,
    Ablation,
    AlphaSweep,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Single => "single",
            ExperimentKind::Fused => "fused",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::AlphaSweep => "alpha_sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub train_sets: Vec<String>,
    pub test_sets: Vec<String>,
    /// Variants for ablation runs; empty means all three.
    pub ablations: Vec<Ablation>,
    pub alpha_grid: Vec<f64>,
    pub policy: ThresholdPolicy,
    pub split_seed: u64,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, train_sets: &[&str], test_sets: &[&str]) -> Self {
        ExperimentSpec {
            kind,
            train_sets: train_sets.iter().map(|s| s.to_string()).collect(),
            test_sets: test_sets.iter().map(|s| s.to_string()).collect(),
            ablations: Vec::new(),
            alpha_grid: REFERENCE_ALPHA_GRID.to_vec(),
            policy: ThresholdPolicy::default(),
            split_seed: 0,
        }
    }

    pub fn validate(&self, systems: &[SystemData]) -> Result<()> {
        self.policy.validate()?;
        for name in self.train_sets.iter().chain(&self.test_sets) {
            if !systems.iter().any(|s| &s.corpus.origin == name) {
                return Err(MladError::Config(format!("no prepared data for system {name:?}")));
            }
        }
        let need = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(MladError::Config(format!("{} experiment: {msg}", self.kind.as_str())))
            }
        };
        match self.kind {
            ExperimentKind::Single | ExperimentKind::Ablation | ExperimentKind::AlphaSweep => {
                need(self.train_sets.len() == 1, "needs exactly one training set")?;
                need(
                    self.test_sets.is_empty() || self.test_sets == self.train_sets,
                    "tests on the training system's own split",
                )?;
                if self.kind == ExperimentKind::AlphaSweep {
                    need(!self.alpha_grid.is_empty(), "needs a non-empty alpha grid")?;
                    need(
                        self.alpha_grid.iter().all(|a| (1.0..=2.0).contains(a)),
                        "alpha values must lie in [1, 2]",
                    )?;
                }
                Ok(())
            }
            ExperimentKind::Fused => {
                need(self.train_sets.len() >= 2, "needs at least two systems")?;
                need(
                    self.test_sets.is_empty() || self.test_sets == self.train_sets,
                    "tests on the fused split",
                )
            }
            ExperimentKind::Transfer => {
                need(!self.train_sets.is_empty() && !self.test_sets.is_empty(), "needs source and target systems")?;
                need(
                    !self.train_sets.iter().any(|t| self.test_sets.contains(t)),
                    "training and test systems must be disjoint",
                )
            }
        }
    }
}

/// One system's prepared windows, with an optional imported embedding table.
/// Without a table, hashed embeddings of the configured width are used.
#[derive(Clone, Debug)]
pub struct SystemData {
    pub corpus: SystemCorpus,
    pub table: Option<EmbeddingTable>,
}

impl SystemData {
    pub fn hashed(corpus: SystemCorpus) -> Self {
        SystemData { corpus, table: None }
    }

    fn table(&self, d: usize) -> Result<EmbeddingTable> {
        match &self.table {
            Some(t) if t.dim() != d => Err(MladError::Dimension {
                op: "embedding table",
                left: vec![t.dim()],
                right: vec![d],
            }),
            Some(t) => Ok(t.clone()),
            None => EmbeddingTable::hashed(&self.corpus.store, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub train_set: String,
    pub test_set: String,
    pub alpha: f64,
    pub ablation: Ablation,
    pub metrics: Metrics,
    pub threshold: f64,
    pub seed: u64,
}

/// A trained model with its scored test windows.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub train_report: TrainReport,
    pub scored: Vec<ScoredWindow>,
    pub threshold: f64,
    pub metrics: Metrics,
}

pub fn score_and_threshold(
    model: &TrainedModel,
    windows: &[Window],
    data: &EmbeddedSet,
    policy: ThresholdPolicy,
) -> Result<(Vec<ScoredWindow>, f64)> {
    let mut scored = score(windows, data, model)?;
    let mode = score_mode(model);
    let train_scores = match mode {
        ScoreMode::Energy => &model.train_energies,
        ScoreMode::Recon => &model.train_recon_errors,
    };
    let t = threshold(policy, Some(train_scores), &mut scored, mode)?;
    Ok((scored, t))
}

/// Trains on `train` and scores `test_windows`.
pub fn train_and_score(
    train_data: &EmbeddedSet,
    test_windows: &[Window],
    test_data: &EmbeddedSet,
    cfg: &TrainConfig,
    policy: ThresholdPolicy,
) -> Result<RunOutcome> {
    let (model, train_report) = train(train_data, cfg)?;
    let (scored, threshold) = score_and_threshold(&model, test_windows, test_data, policy)?;
    let metrics = metrics_of(&scored)?;
    Ok(RunOutcome {
        model,
        train_report,
        scored,
        threshold,
        metrics,
    })
}

#[derive(Clone, Debug)]
pub struct ScoredRun {
    /// `train_set->test_set/ablation/alpha`.
    pub name: String,
    pub scored: Vec<ScoredWindow>,
    pub train_report: TrainReport,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<ScoredRun>,
    /// Target-system matrix reads observed while training (transfer only).
    pub target_reads_during_training: Option<usize>,
}

fn find<'a>(systems: &'a [SystemData], name: &str) -> &'a SystemData {
    systems
        .iter()
        .find(|s| s.corpus.origin == name)
        .expect("validated system name")
}

/// Runs an experiment. `spec` is validated before any training starts.
pub fn run_experiment(spec: &ExperimentSpec, systems: &[SystemData], cfg: &TrainConfig) -> Result<ExperimentReport> {
    spec.validate(systems)?;
    cfg.validate()?;
    let mut report = ExperimentReport::default();
    let kind = spec.kind.as_str();
    let d = cfg.model.d;
    match spec.kind {
        ExperimentKind::Single | ExperimentKind::Ablation | ExperimentKind::AlphaSweep => {
            let sys = find(systems, &spec.train_sets[0]);
            let table = sys.table(d)?;
            let parts = split(&sys.corpus.windows, spec.split_seed)?;
            let train_data = EmbeddedSet::build(&parts.train, &table)?;
            let test_data = EmbeddedSet::build(&parts.test, &table)?;
            let variants: Vec<(Ablation, TrainConfig)> = match spec.kind {
                ExperimentKind::Single => vec![(Ablation::None, cfg.clone())],
                ExperimentKind::Ablation => {
                    let list = if spec.ablations.is_empty() {
                        vec![Ablation::None, Ablation::NoEntmax, Ablation::NoGmm]
                    } else {
                        spec.ablations.clone()
                    };
                    list.into_iter().map(|a| (a, a.apply(cfg))).collect()
                }
                _ => spec
                    .alpha_grid
                    .iter()
                    .map(|&alpha| {
                        let mut c = cfg.clone();
                        c.model.alpha = alpha;
                        (Ablation::None, c)
                    })
                    .collect(),
            };
            for (ablation, c) in variants {
                let out = train_and_score(&train_data, &parts.test, &test_data, &c, spec.policy)?;
                push_run(&mut report, kind, &sys.corpus.origin, &sys.corpus.origin, ablation, &c, out.scored, out.train_report, out.threshold, out.metrics);
            }
        }
        ExperimentKind::Fused => {
            let parts: Vec<&SystemData> = spec.train_sets.iter().map(|n| find(systems, n)).collect();
            let corpora: Vec<SystemCorpus> = parts.iter().map(|s| s.corpus.clone()).collect();
            let fused = fuse(&corpora, spec.split_seed)?;
            let table = if parts.iter().all(|s| s.table.is_none()) {
                EmbeddingTable::hashed(&fused.store, d)?
            } else {
                let tables = parts
                    .iter()
                    .map(|s| Ok((s.table(d)?, s.corpus.store.len())))
                    .collect::<Result<Vec<_>>>()?;
                EmbeddingTable::concat(&tables)?
            };
            let halves = split(&fused.windows, spec.split_seed)?;
            let train_data = EmbeddedSet::build(&halves.train, &table)?;
            let test_data = EmbeddedSet::build(&halves.test, &table)?;
            let out = train_and_score(&train_data, &halves.test, &test_data, cfg, spec.policy)?;
            for name in &spec.train_sets {
                let m = metrics_of(out.scored.iter().filter(|s| &s.origin == name))?;
                report.rows.push(row(kind, &fused.origin, name, Ablation::None, cfg, out.threshold, m));
            }
            push_run(&mut report, kind, &fused.origin, &fused.origin, Ablation::None, cfg, out.scored, out.train_report, out.threshold, out.metrics);
            // overall row first, then the per-origin breakdown
            report.rows.rotate_right(1);
        }
        ExperimentKind::Transfer => {
            let sources: Vec<&SystemData> = spec.train_sets.iter().map(|n| find(systems, n)).collect();
            let targets: Vec<&SystemData> = spec.test_sets.iter().map(|n| find(systems, n)).collect();
            let imported = sources.iter().chain(&targets).filter(|s| s.table.is_some()).count();
            if imported != 0 && imported != sources.len() + targets.len() {
                return Err(MladError::Config(
                    "transfer needs hashed embeddings unless every system has an imported table".into(),
                ));
            }
            let (source_corpus, source_table) = if sources.len() == 1 {
                (sources[0].corpus.clone(), sources[0].table(d)?)
            } else {
                let fused = fuse(&sources.iter().map(|s| s.corpus.clone()).collect::<Vec<_>>(), spec.split_seed)?;
                let table = if imported == 0 {
                    EmbeddingTable::hashed(&fused.store, d)?
                } else {
                    let tables = sources
                        .iter()
                        .map(|s| Ok((s.table(d)?, s.corpus.store.len())))
                        .collect::<Result<Vec<_>>>()?;
                    EmbeddingTable::concat(&tables)?
                };
                (fused, table)
            };
            let train_windows = split(&source_corpus.windows, spec.split_seed)?.train;
            let train_data = EmbeddedSet::build(&train_windows, &source_table)?;
            // targets are embedded up front so that any read during training is counted
            let mut target_sets = Vec::new();
            for t in &targets {
                let test = split(&t.corpus.windows, spec.split_seed)?.test;
                let data = EmbeddedSet::build(&test, &t.table(d)?)?;
                target_sets.push((t.corpus.origin.clone(), test, data));
            }
            let (model, train_report) = train(&train_data, cfg)?;
            let reads: usize = target_sets.iter().map(|(_, _, data)| data.reads()).sum();
            report.target_reads_during_training = Some(reads);
            for (name, test, data) in &target_sets {
                let (scored, t) = score_and_threshold(&model, test, data, spec.policy)?;
                let m = metrics_of(&scored)?;
                push_run(&mut report, kind, &source_corpus.origin, name, Ablation::None, cfg, scored, train_report.clone(), t, m);
            }
        }
    }
    Ok(report)
}

fn row(kind: &str, train: &str, test: &str, ablation: Ablation, cfg: &TrainConfig, threshold: f64, metrics: Metrics) -> ReportRow {
    ReportRow {
        experiment: kind.to_string(),
        train_set: train.to_string(),
        test_set: test.to_string(),
        alpha: cfg.model.alpha,
        ablation,
        metrics,
        threshold,
        seed: cfg.seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn push_run(
    report: &mut ExperimentReport,
    kind: &str,
    train: &str,
    test: &str,
    ablation: Ablation,
    cfg: &TrainConfig,
    scored: Vec<ScoredWindow>,
    train_report: TrainReport,
    threshold: f64,
    metrics: Metrics,
) {
    report.rows.push(row(kind, train, test, ablation, cfg, threshold, metrics));
    report.runs.push(ScoredRun {
        name: format!("{train}->{test}/{}/{}", ablation.as_str(), cfg.model.alpha),
        scored,
        train_report,
    });
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,train_set,test_set,alpha,ablation,precision,recall,f1,threshold,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.experiment,
                r.train_set,
                r.test_set,
                r.alpha,
                r.ablation.as_str(),
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.threshold,
                r.seed
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<12} {:<8} {:<8} {:>5} {:<10} {:>9} {:>9} {:>9}\n",
            "experiment", "train", "test", "alpha", "ablation", "precision", "recall", "f1"
        );
        for r in &self.rows {
            let flag = if r.metrics.precision_degenerate || r.metrics.recall_degenerate {
                " (degenerate)"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:<8} {:>5.2} {:<10} {:>9.4} {:>9.4} {:>9.4}{flag}",
                r.experiment,
                r.train_set,
                r.test_set,
                r.alpha,
                r.ablation.as_str(),
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1
            );
        }
        if let Some(n) = self.target_reads_during_training {
            let _ = writeln!(out, "target-system reads during training: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_formulas() {
        let m = Metrics::from_counts(3, 1, 1, 5);
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
        let perfect = Metrics::from_counts(4, 0, 0, 4);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = Metrics::from_counts(0, 0, 3, 3);
        assert!(none.precision_degenerate && !none.recall_degenerate);
        assert_eq!(none.f1, 0.0);
        // the reference precision and recall give an F1 near 0.9203
        let f1: f64 = 2.0 * 0.9492 * 0.8932 / (0.9492 + 0.8932);
        assert!((f1 - 0.9203).abs() < 1e-4);
    }

    #[test]
    fn metrics_checks_alignment() {
        assert!(metrics(&[Verdict::Normal], &[]).is_err());
        let m = metrics(
            &[Verdict::Anomalous, Verdict::Anomalous, Verdict::Normal, Verdict::Normal],
            &[Label::Anomalous, Label::Normal, Label::Anomalous, Label::Normal],
        )
        .unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
    }

    #[test]
    fn ablations_rewrite_config() {
        let base = TrainConfig::default();
        let a = Ablation::NoEntmax.apply(&base);
        assert_eq!((a.model.alpha, a.model.membership_alpha), (1.0, 1.0));
        let g = Ablation::NoGmm.apply(&base);
        assert!(!g.uses_gmm());
        assert_eq!(Ablation::None.apply(&base), base);
        assert_eq!(Ablation::parse("no_gmm").unwrap(), Ablation::NoGmm);
    }

    #[test]
    fn spec_validation_precedes_training() {
        let corpus = |name: &str| SystemData::hashed(SystemCorpus {
            origin: name.into(),
            store: Default::default(),
            windows: Vec::new(),
        });
        let systems = [corpus("A"), corpus("B")];
        let overlap = ExperimentSpec::new(ExperimentKind::Transfer, &["A"], &["A", "B"]);
        assert!(matches!(overlap.validate(&systems), Err(MladError::Config(_))));
        assert!(run_experiment(&overlap, &systems, &TrainConfig::default()).is_err());
        assert!(ExperimentSpec::new(ExperimentKind::Single, &["C"], &[]).validate(&systems).is_err());
        assert!(ExperimentSpec::new(ExperimentKind::Fused, &["A"], &[]).validate(&systems).is_err());
        assert!(ExperimentSpec::new(ExperimentKind::Transfer, &["A"], &["B"]).validate(&systems).is_ok());
        let mut sweep = ExperimentSpec::new(ExperimentKind::AlphaSweep, &["A"], &[]);
        sweep.alpha_grid = vec![1.0, 2.5];
        assert!(sweep.validate(&systems).is_err());
    }
}
