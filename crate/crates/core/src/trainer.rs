//! Joint training of the encoder and the mixture head.
//!
//! ```text
//! loss = mean(recon_error) + λ1·mean(E(h)) + λ2·P(Σ)
//! ```
//!
//! Mixture statistics are re-estimated from every batch inside the graph,
//! so gradients reach the memberships as well as the codes. After the last
//! epoch the statistics are frozen from one eval-mode pass over the whole
//! training set. With `λ1 = λ2 = 0` the mixture is never built and the model
//! is a plain reconstruction scorer.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::embed::EmbeddedSet;
use crate::encoder::{encode_batch, forward, Batch, Dropout, ModelConfig, ModelParams};
use crate::error::{MladError, Result};
use crate::gmm::{gmm_graph, GmmStats};
use crate::tensorcore::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: -0.005,
            lr: 0.001,
            batch: 512,
            epochs: 30,
            dropout: 0.5,
            seed: 0,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(MladError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch < 2 {
            return Err(MladError::Config(format!("batch must be >= 2, got {}", self.batch)));
        }
        if self.epochs == 0 {
            return Err(MladError::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MladError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(MladError::Config("invalid moment decay or stability epsilon".into()));
        }
        if !(self.clip_norm >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(MladError::Config("lambdas and clip_norm must be finite".into()));
        }
        self.model.validate()
    }

    /// Whether the mixture head takes part in training and scoring.
    pub fn uses_gmm(&self) -> bool {
        self.lambda1 != 0.0 || self.lambda2 != 0.0
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| MladError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scalar loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    /// Mean batch energy, before weighting.
    pub energy: Option<NodeId>,
    /// Covariance penalty, before weighting.
    pub penalty: Option<NodeId>,
}

/// Builds the training loss for one batch of normal windows.
pub fn loss(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    cfg: &TrainConfig,
    batch: &Batch,
    labels: &[Label],
    dropout: Option<Dropout<'_>>,
) -> Result<LossNodes> {
    if labels.len() != batch.len() {
        return Err(MladError::Contract(format!(
            "{} labels for {} windows",
            labels.len(),
            batch.len()
        )));
    }
    if labels.iter().any(|l| l.is_anomalous()) {
        return Err(MladError::Contract("anomalous window in a training batch".into()));
    }
    let f = forward(g, p, &cfg.model, batch, dropout)?;
    let recon = g.mean(f.recon_error)?;
    if !cfg.uses_gmm() {
        return Ok(LossNodes {
            total: recon,
            recon,
            energy: None,
            penalty: None,
        });
    }
    let nodes = gmm_graph(g, f.h, f.membership, cfg.model.epsilon)?;
    let energy = g.mean(nodes.energies)?;
    let mut total = recon;
    if cfg.lambda1 != 0.0 {
        let term = g.scale(energy, cfg.lambda1)?;
        total = g.add(total, term)?;
    }
    if cfg.lambda2 != 0.0 {
        let term = g.scale(nodes.penalty, cfg.lambda2)?;
        total = g.add(total, term)?;
    }
    Ok(LossNodes {
        total,
        recon,
        energy: Some(energy),
        penalty: Some(nodes.penalty),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub energy: f64,
    pub penalty: f64,
    /// Steps whose gradient norm exceeded the clipping ceiling.
    pub clipped: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Mean training energy under statistics frozen at initialization.
    pub initial_energy: Option<f64>,
    pub final_energy: Option<f64>,
}

impl TrainReport {
    /// One line per epoch, then a summary block.
    /// One line per epoch plus a summary. Wall time is only included when
    /// `timing` is set, so the untimed text is reproducible byte for byte.
    pub fn to_text(&self, timing: bool) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = write!(
                out,
                "epoch={} loss={} recon={} energy={} penalty={} clipped={}",
                e.epoch, e.loss, e.recon, e.energy, e.penalty, e.clipped
            );
            if timing {
                let _ = write!(out, " seconds={:.3}", e.seconds);
            }
            out.push('\n');
        }
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(out, "# summary");
        let _ = writeln!(out, "epochs={}", self.epochs.len());
        if let Some(last) = self.epochs.last() {
            let _ = writeln!(out, "final_loss={}", last.loss);
        }
        let _ = writeln!(out, "initial_energy={}", opt(self.initial_energy));
        let _ = writeln!(out, "final_energy={}", opt(self.final_energy));
        out
    }
}

/// Everything needed to score new windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ModelParams<Tensor>,
    /// Frozen mixture; absent when the model was trained without it.
    pub stats: Option<GmmStats>,
    pub train_energies: Vec<f64>,
    pub train_recon_errors: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams<Tensor>) -> Adam {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams<Tensor>, grads: &[Tensor], scale: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, p) in params.values_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    // a lone trailing window cannot support mixture estimation
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn diverged(epoch: usize, term: &'static str) -> impl Fn(MladError) -> MladError {
    move |e| {
        if e.is_numeric() {
            MladError::Diverged { epoch, term }
        } else {
            e
        }
    }
}

/// Eval-mode codes of every window, then (optionally) frozen statistics and
/// per-window energies.
fn freeze(
    params: &ModelParams<Tensor>,
    cfg: &TrainConfig,
    data: &EmbeddedSet,
) -> Result<(Option<GmmStats>, Vec<f64>, Vec<f64>)> {
    let mats: Vec<&Tensor> = (0..data.len()).map(|i| data.get(i)).collect();
    let codes = encode_batch(params, &cfg.model, &mats)?;
    let recon: Vec<f64> = codes.iter().map(|c| c.recon_error).collect();
    if !cfg.uses_gmm() {
        return Ok((None, Vec::new(), recon));
    }
    let (n, dh, k) = (codes.len(), cfg.model.d_h, cfg.model.components);
    let h = Tensor::matrix(n, dh, codes.iter().flat_map(|c| c.h.iter().copied()).collect())?;
    let y = Tensor::matrix(n, k, codes.iter().flat_map(|c| c.membership.iter().copied()).collect())?;
    let stats = GmmStats::estimate(&h, &y, cfg.model.epsilon)?;
    let energies = codes.iter().map(|c| stats.energy(&c.h)).collect::<Result<Vec<_>>>()?;
    Ok((Some(stats), energies, recon))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains on normal windows only. `(seed, data, config)` determine the
/// result bit for bit; wall-clock times in the report are the only
/// run-dependent values.
pub fn train(data: &EmbeddedSet, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(MladError::Config(format!("need at least 2 training windows, got {n}")));
    }
    if data.labels().iter().any(|l| l.is_anomalous()) {
        return Err(MladError::Contract("training data contains anomalous windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    let initial_energy = if cfg.uses_gmm() {
        let (_, e, _) = freeze(&params, cfg, data).map_err(diverged(0, "initial energy"))?;
        Some(mean(&e))
    } else {
        None
    };
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_recon, mut sum_energy, mut sum_pen) = (0.0, 0.0, 0.0, 0.0);
        let mut clipped = 0;
        let ranges = batch_ranges(n, cfg.batch);
        for range in &ranges {
            let idx = &order[range.clone()];
            let mats: Vec<&Tensor> = idx.iter().map(|&i| data.get(i)).collect();
            let labels: Vec<Label> = idx.iter().map(|&i| data.labels()[i]).collect();
            let batch = Batch::pack(&mats)?;
            let mut g = Graph::new();
            let p = params.to_graph(&mut g, true);
            let dropout = Some(Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            });
            let nodes = loss(&mut g, &p, cfg, &batch, &labels, dropout).map_err(diverged(epoch, "loss"))?;
            g.backward(nodes.total).map_err(diverged(epoch, "gradient"))?;
            let grads: Vec<Tensor> = p.entries().iter().map(|(_, &id)| g.grad(id)).collect();
            let norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(MladError::Diverged {
                    epoch,
                    term: "gradient",
                });
            }
            let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                clipped += 1;
                cfg.clip_norm / norm
            } else {
                1.0
            };
            adam.update(&mut params, &grads, scale, cfg);
            if params.entries().iter().any(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
                return Err(MladError::Diverged {
                    epoch,
                    term: "parameters",
                });
            }
            sum_loss += g.value(nodes.total).item();
            sum_recon += g.value(nodes.recon).item();
            sum_energy += nodes.energy.map_or(0.0, |e| g.value(e).item());
            sum_pen += nodes.penalty.map_or(0.0, |e| g.value(e).item());
        }
        let nb = ranges.len() as f64;
        if clipped > 0 {
            log::debug!("epoch {epoch}: clipped {clipped} of {} steps", ranges.len());
        }
        let record = EpochRecord {
            epoch,
            loss: sum_loss / nb,
            recon: sum_recon / nb,
            energy: sum_energy / nb,
            penalty: sum_pen / nb,
            clipped,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} recon {:.6} energy {:.4} penalty {:.4}",
            record.loss,
            record.recon,
            record.energy,
            record.penalty
        );
        epochs.push(record);
    }
    let (stats, train_energies, train_recon_errors) =
        freeze(&params, cfg, data).map_err(diverged(cfg.epochs, "frozen statistics"))?;
    let final_energy = stats.as_ref().map(|_| mean(&train_energies));
    Ok((
        TrainedModel {
            config: cfg.clone(),
            params,
            stats,
            train_energies,
            train_recon_errors,
        },
        TrainReport {
            epochs,
            initial_energy,
            final_energy,
        },
    ))
}
