//! Window scoring and threshold decisions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Window};
use crate::embed::EmbeddedSet;
use crate::encoder::encode_batch;
use crate::error::{MladError, Result};
use crate::tensorcore::Tensor;
use crate::trainer::TrainedModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomalous,
}

/// Which score the threshold applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Energy,
    /// Reconstruction error; used by models trained without the mixture.
    Recon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredWindow {
    pub origin: String,
    pub session_id: Option<String>,
    pub label: Label,
    /// Absent for models without a mixture.
    pub energy: Option<f64>,
    pub recon_error: f64,
    pub h: Vec<f64>,
    pub verdict: Option<Verdict>,
}

impl ScoredWindow {
    pub fn score(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::Energy => self.energy.expect("energy mode requires mixture energies"),
            ScoreMode::Recon => self.recon_error,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdPolicy {
    /// Empirical `q`-quantile of the training scores.
    TrainQuantile { q: f64 },
    /// Flag the `⌈rho·N⌉` highest-scoring test windows.
    Contamination { rho: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::TrainQuantile { q: 0.99 }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::TrainQuantile { q } if q > 0.0 && q <= 1.0 => Ok(()),
            ThresholdPolicy::Contamination { rho } if rho > 0.0 && rho < 1.0 => Ok(()),
            other => Err(MladError::Config(format!("threshold policy out of range: {other:?}"))),
        }
    }
}

pub fn score_mode(model: &TrainedModel) -> ScoreMode {
    if model.stats.is_some() {
        ScoreMode::Energy
    } else {
        ScoreMode::Recon
    }
}

/// Eval-mode scores in input order. `windows` supplies metadata and must be
/// aligned with `data`.
pub fn score(windows: &[Window], data: &EmbeddedSet, model: &TrainedModel) -> Result<Vec<ScoredWindow>> {
    if windows.len() != data.len() {
        return Err(MladError::Contract(format!(
            "{} windows but {} embedded matrices",
            windows.len(),
            data.len()
        )));
    }
    let mats: Vec<&Tensor> = (0..data.len()).map(|i| data.get(i)).collect();
    let codes = encode_batch(&model.params, &model.config.model, &mats)?;
    windows
        .iter()
        .zip(codes)
        .map(|(w, c)| {
            let energy = match &model.stats {
                Some(s) => Some(s.energy(&c.h)?),
                None => None,
            };
            Ok(ScoredWindow {
                origin: w.origin.clone(),
                session_id: w.session_id.clone(),
                label: w.label,
                energy,
                recon_error: c.recon_error,
                h: c.h,
                verdict: None,
            })
        })
        .collect()
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(MladError::Contract("quantile of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Assigns verdicts and returns the threshold.
///
/// Train-quantile flags every window scoring strictly above the quantile.
/// Contamination ranks windows by descending score, earlier input first
/// among equal scores, and flags the first `⌈rho·N⌉`; the returned
/// threshold is the midpoint between the last flagged and the first
/// unflagged score.
pub fn threshold(
    policy: ThresholdPolicy,
    train_scores: Option<&[f64]>,
    scored: &mut [ScoredWindow],
    mode: ScoreMode,
) -> Result<f64> {
    policy.validate()?;
    match policy {
        ThresholdPolicy::TrainQuantile { q } => {
            let train = train_scores.ok_or_else(|| {
                MladError::Contract("train-quantile thresholds need training scores".into())
            })?;
            let t = quantile(train, q)?;
            for s in scored.iter_mut() {
                s.verdict = Some(if s.score(mode) > t {
                    Verdict::Anomalous
                } else {
                    Verdict::Normal
                });
            }
            Ok(t)
        }
        ThresholdPolicy::Contamination { rho } => {
            let n = scored.len();
            if n == 0 {
                return Err(MladError::Contract("contamination threshold on no windows".into()));
            }
            let k = ((rho * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scored[b].score(mode).total_cmp(&scored[a].score(mode)).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                scored[i].verdict = Some(if rank < k {
                    Verdict::Anomalous
                } else {
                    Verdict::Normal
                });
            }
            let last_in = scored[order[k - 1]].score(mode);
            Ok(if k < n {
                0.5 * (last_in + scored[order[k]].score(mode))
            } else {
                last_in - 1.0
            })
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `origin,session_id,label,energy,recon_error,verdict`, plus `h0..` columns
/// when `with_codes` is set.
pub fn scores_to_csv(scored: &[ScoredWindow], with_codes: bool) -> String {
    let mut out = String::from("origin,session_id,label,energy,recon_error,verdict");
    let width = if with_codes {
        scored.first().map_or(0, |s| s.h.len())
    } else {
        0
    };
    for j in 0..width {
        let _ = write!(out, ",h{j}");
    }
    out.push('\n');
    for s in scored {
        let verdict = match s.verdict {
            Some(Verdict::Anomalous) => "anomalous",
            Some(Verdict::Normal) => "normal",
            None => "",
        };
        let energy = s.energy.map_or(String::new(), |e| e.to_string());
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&s.origin),
            csv_field(s.session_id.as_deref().unwrap_or("")),
            s.label.as_digit(),
            energy,
            s.recon_error,
            verdict
        );
        for x in s.h.iter().take(width) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(energies: &[f64]) -> Vec<ScoredWindow> {
        energies
            .iter()
            .map(|&e| ScoredWindow {
                origin: "A".into(),
                session_id: None,
                label: Label::Normal,
                energy: Some(e),
                recon_error: -e,
                h: vec![e, 0.0],
                verdict: None,
            })
            .collect()
    }

    fn flagged(s: &[ScoredWindow]) -> Vec<bool> {
        s.iter().map(|w| w.verdict == Some(Verdict::Anomalous)).collect()
    }

    #[test]
    fn contamination_flags_top_share() {
        let mut s = scored(&[1.0, 2.0, 3.0, 4.0]);
        let t = threshold(ThresholdPolicy::Contamination { rho: 0.25 }, None, &mut s, ScoreMode::Energy).unwrap();
        assert_eq!(flagged(&s), vec![false, false, false, true]);
        assert_eq!(t, 3.5);
        let mut s = scored(&[5.0, 1.0, 7.0, 2.0, 9.0, 0.0]);
        threshold(ThresholdPolicy::Contamination { rho: 0.5 }, None, &mut s, ScoreMode::Energy).unwrap();
        assert_eq!(flagged(&s).iter().filter(|&&f| f).count(), 3);
        // recon mode reverses the ordering here
        threshold(ThresholdPolicy::Contamination { rho: 0.5 }, None, &mut s, ScoreMode::Recon).unwrap();
        assert_eq!(flagged(&s), vec![false, true, false, true, false, true]);
    }

    #[test]
    fn contamination_ties_go_to_earlier_windows() {
        let mut s = scored(&[2.0, 2.0, 2.0, 1.0]);
        threshold(ThresholdPolicy::Contamination { rho: 0.5 }, None, &mut s, ScoreMode::Energy).unwrap();
        assert_eq!(flagged(&s), vec![true, true, false, false]);
    }

    #[test]
    fn train_quantile_policy() {
        let train = [1.0, 2.0, 3.0, 4.0, 5.0];
        let mut s = scored(&[0.5, 4.5, 5.0, 6.0]);
        let t = threshold(ThresholdPolicy::TrainQuantile { q: 0.5 }, Some(&train), &mut s, ScoreMode::Energy).unwrap();
        assert_eq!(t, 3.0);
        assert_eq!(flagged(&s), vec![false, true, true, true]);
        let mut on_train = scored(&train);
        threshold(ThresholdPolicy::TrainQuantile { q: 1.0 }, Some(&train), &mut on_train, ScoreMode::Energy).unwrap();
        assert!(flagged(&on_train).iter().all(|&f| !f));
        assert_eq!(quantile(&[4.0, 1.0, 2.0, 3.0], 0.25).unwrap(), 1.75);
        assert!(threshold(ThresholdPolicy::TrainQuantile { q: 0.5 }, Some(&[]), &mut s, ScoreMode::Energy).is_err());
        assert!(threshold(ThresholdPolicy::TrainQuantile { q: 0.5 }, None, &mut s, ScoreMode::Energy).is_err());
        assert!(threshold(ThresholdPolicy::Contamination { rho: 1.5 }, None, &mut s, ScoreMode::Energy).is_err());
    }

    #[test]
    fn verdicts_are_monotone_in_score() {
        let energies: Vec<f64> = (0..50).map(|i| ((i * 37) % 23) as f64).collect();
        for policy in [
            ThresholdPolicy::Contamination { rho: 0.3 },
            ThresholdPolicy::TrainQuantile { q: 0.7 },
        ] {
            let mut s = scored(&energies);
            threshold(policy, Some(&energies), &mut s, ScoreMode::Energy).unwrap();
            for a in &s {
                for b in &s {
                    if a.energy > b.energy && b.verdict == Some(Verdict::Anomalous) {
                        assert_eq!(a.verdict, Some(Verdict::Anomalous));
                    }
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let mut s = scored(&[1.5]);
        s[0].session_id = Some("blk,1".into());
        s[0].verdict = Some(Verdict::Anomalous);
        let csv = scores_to_csv(&s, true);
        assert_eq!(
            csv,
            "origin,session_id,label,energy,recon_error,verdict,h0,h1\nA,\"blk,1\",0,1.5,-1.5,anomalous,1.5,0\n"
        );
        s[0].energy = None;
        assert!(scores_to_csv(&s, false).ends_with("A,\"blk,1\",0,,-1.5,anomalous\n"));
    }
}
