//! Entmax self-attention encoder with a pooled code, a reconstruction head
//! and a mixture-membership head.
//!
//! Each layer is a post-norm residual block pair:
//!
//! ```text
//! x ← LN(x + Attention(x))
//! x ← LN(x + CeLU(x·W₁ + b₁)·W₂ + b₂)
//! ```
//!
//! The window code is `h = mean_rows(x)·W_p + b_p`, the reconstruction is
//! `h·W_r + b_r` and the membership is `entmax(h·W_h + b_h)`. Windows are
//! packed row-wise into one matrix; attention and pooling never cross a
//! window boundary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entmax::EntmaxConfig;
use crate::error::{MladError, Result};
use crate::tensorcore::{Graph, NodeId, Segment, Tensor, UnaryOp};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CELU_ALPHA: f64 = 1.0;

/// Windows encoded per graph during inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Reconstruct the row-mean of the window's embedding matrix.
    Pooled,
    /// Reconstruct every row and average the per-row errors.
    PerPosition,
}

impl ReconTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconTarget::Pooled => "pooled",
            ReconTarget::PerPosition => "per_position",
        }
    }

    pub fn parse(s: &str) -> Result<ReconTarget> {
        match s {
            "pooled" => Ok(ReconTarget::Pooled),
            "per_position" => Ok(ReconTarget::PerPosition),
            _ => Err(MladError::Config(format!("unknown recon_target {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_h: usize,
    /// Feed-forward width; 0 means `4·d`.
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    /// Mixture components `K`.
    pub components: usize,
    pub alpha: f64,
    /// Entmax α of the membership head; 0 reuses `alpha`.
    pub membership_alpha: f64,
    pub positional: bool,
    pub recon_target: ReconTarget,
    /// Diagonal covariance regularizer.
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 100,
            d_h: 16,
            d_ff: 0,
            heads: 1,
            layers: 1,
            components: 4,
            alpha: 1.5,
            membership_alpha: 0.0,
            positional: false,
            recon_target: ReconTarget::Pooled,
            epsilon: crate::gmm::DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d
        } else {
            self.d_ff
        }
    }

    pub fn attention_entmax(&self) -> Result<EntmaxConfig> {
        EntmaxConfig::with_alpha(self.alpha)
    }

    pub fn membership_entmax(&self) -> Result<EntmaxConfig> {
        EntmaxConfig::with_alpha(if self.membership_alpha == 0.0 {
            self.alpha
        } else {
            self.membership_alpha
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_h == 0 || self.layers == 0 {
            return Err(MladError::Config("d, d_h and layers must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(MladError::Config(format!(
                "{} heads do not divide d = {}",
                self.heads, self.d
            )));
        }
        if !(1..=16).contains(&self.components) {
            return Err(MladError::Config(format!(
                "components must lie in 1..=16, got {}",
                self.components
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(MladError::Config("epsilon must be positive".into()));
        }
        self.attention_entmax()?;
        self.membership_entmax()?;
        Ok(())
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn refs(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            fn refs_mut(&mut self) -> Vec<&mut T> {
                vec![$(&mut self.$field),*]
            }

            fn try_map<U>(
                &self,
                prefix: &str,
                f: &mut impl FnMut(&str, &T) -> Result<U>,
            ) -> Result<$name<U>> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}

param_group!(
    /// One post-norm block pair.
    LayerParams { w_q, w_k, w_v, w_1, b_1, w_2, b_2, ln1_gain, ln1_bias, ln2_gain, ln2_bias }
);

param_group!(
    /// Pooling projection, reconstruction head and membership head.
    HeadParams { w_p, b_p, w_r, b_r, w_h, b_h }
);

/// Every learnable tensor. `T` is [`Tensor`] for stored weights and
/// [`NodeId`] once they are placed on a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    /// Applies `f` to every parameter with its stable name (`layer0.w_q`,
    /// `head.w_p`, ...), in a fixed order.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ModelParams<U>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layer{i}."), &mut f))
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            layers,
            head: self.head.try_map("head.", &mut f)?,
        })
    }

    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.refs().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.extend(self.head.refs().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    /// Mutable references in [`ModelParams::entries`] order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend(self.head.refs_mut());
        out
    }

    /// Same structure, filled from `values` in entry order.
    pub fn rebuild<U>(&self, values: impl IntoIterator<Item = U>) -> Result<ModelParams<U>> {
        let mut it = values.into_iter();
        self.try_map(|name, _| {
            it.next()
                .ok_or_else(|| MladError::Contract(format!("no value for parameter {name}")))
        })
    }
}

impl ModelParams<Tensor> {
    /// Weights uniform in `±1/√fan_in`, biases zero, normalization gains one.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams<Tensor>> {
        cfg.validate()?;
        let (d, dff, dh, k) = (cfg.d, cfg.ff_width(), cfg.d_h, cfg.components);
        let mut weight = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let ones = |n: usize| Tensor::filled(&[1, n], 1.0);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                w_q: weight(d, d)?,
                w_k: weight(d, d)?,
                w_v: weight(d, d)?,
                w_1: weight(d, dff)?,
                b_1: zeros(dff),
                w_2: weight(dff, d)?,
                b_2: zeros(d),
                ln1_gain: ones(d)?,
                ln1_bias: zeros(d),
                ln2_gain: ones(d)?,
                ln2_bias: zeros(d),
            });
        }
        let head = HeadParams {
            w_p: weight(d, dh)?,
            b_p: zeros(dh),
            w_r: weight(dh, d)?,
            b_r: zeros(d),
            w_h: weight(dh, k)?,
            b_h: zeros(k),
        };
        Ok(ModelParams { layers, head })
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> ModelParams<NodeId> {
        self.try_map(|_, t| {
            Ok(if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            })
        })
        .expect("placing tensors cannot fail")
    }
}

/// Embedding matrices packed row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn pack(mats: &[&Tensor]) -> Result<Batch> {
        let d = mats
            .first()
            .ok_or_else(|| MladError::Contract("empty batch".into()))?
            .cols();
        let mut data = Vec::with_capacity(mats.iter().map(|m| m.numel()).sum());
        for m in mats {
            if m.cols() != d || m.rows() == 0 {
                return Err(MladError::Dimension {
                    op: "batch pack",
                    left: vec![d],
                    right: m.shape().to_vec(),
                });
            }
            data.extend_from_slice(m.data());
        }
        let segments = Segment::packed(mats.iter().map(|m| m.rows()));
        let rows = data.len() / d;
        Ok(Batch {
            inputs: Tensor::matrix(rows, d, data)?,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Row-mean of every window, `B×d`.
    pub fn pooled_inputs(&self) -> Tensor {
        let d = self.inputs.cols();
        let mut out = vec![0.0; self.segments.len() * d];
        for (s, seg) in self.segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for i in seg.start..seg.start + seg.len {
                for (a, v) in o.iter_mut().zip(self.inputs.row(i)) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a /= seg.len as f64);
        }
        Tensor::matrix(self.segments.len(), d, out).expect("means of finite rows are finite")
    }
}

/// Inverted-dropout mask source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }
}

/// Graph outputs of a forward pass over a batch of `B` windows.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `B×d_h` codes.
    pub h: NodeId,
    /// `B×d` reconstructions of the pooled input.
    pub recon: NodeId,
    /// `B×1` reconstruction errors.
    pub recon_error: NodeId,
    /// `B×K` mixture memberships.
    pub membership: NodeId,
}

/// `x·W + 1·b` with `ones` an `rows×1` column of ones.
fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, ones: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    let bias = g.matmul(ones, b)?;
    g.add(xw, bias)
}

fn sinusoidal(batch: &Batch) -> Tensor {
    let d = batch.inputs.cols();
    let mut out = batch.inputs.clone().into_data();
    for seg in &batch.segments {
        for pos in 0..seg.len {
            let row = &mut out[(seg.start + pos) * d..(seg.start + pos + 1) * d];
            for (j, v) in row.iter_mut().enumerate() {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
                let angle = pos as f64 * freq;
                *v += if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Tensor::matrix(batch.inputs.rows(), d, out).expect("bounded shift keeps rows finite")
}

/// Builds the encoder on `g`. Dropout is active iff `dropout` is given with
/// a positive rate.
pub fn forward(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardNodes> {
    if batch.inputs.cols() != cfg.d {
        return Err(MladError::Dimension {
            op: "encoder input",
            left: batch.inputs.shape().to_vec(),
            right: vec![cfg.d],
        });
    }
    if dropout.as_ref().is_some_and(|d| d.rate <= 0.0) {
        dropout = None;
    }
    let rows = batch.inputs.rows();
    let b = batch.len();
    let segs = &batch.segments;
    let attn_cfg = cfg.attention_entmax()?;
    let input = if cfg.positional {
        sinusoidal(batch)
    } else {
        batch.inputs.clone()
    };
    let mut x = g.constant(input);
    let ones_rows = g.constant(Tensor::filled(&[rows, 1], 1.0)?);
    let ones_b = g.constant(Tensor::filled(&[b, 1], 1.0)?);

    for layer in &p.layers {
        let q = g.matmul(x, layer.w_q)?;
        let k = g.matmul(x, layer.w_k)?;
        let v = g.matmul(x, layer.w_v)?;
        let keep = dropout
            .as_mut()
            .map(|d| d.mask(Graph::attention_weight_count(segs, cfg.heads)));
        let a = g.attention(q, k, v, segs, cfg.heads, &attn_cfg, keep)?;
        let r = g.add(x, a)?;
        x = g.layer_norm(r, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;

        let f = affine(g, x, layer.w_1, layer.b_1, ones_rows)?;
        let mut f = g.unary(UnaryOp::Celu(CELU_ALPHA), f)?;
        if let Some(d) = dropout.as_mut() {
            let width = cfg.ff_width();
            let mask = g.constant(Tensor::matrix(rows, width, d.mask(rows * width))?);
            f = g.mul(f, mask)?;
        }
        let f = affine(g, f, layer.w_2, layer.b_2, ones_rows)?;
        let r = g.add(x, f)?;
        x = g.layer_norm(r, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
    }

    let hd = &p.head;
    let pooled = g.segment_mean(x, segs)?;
    let h = affine(g, pooled, hd.w_p, hd.b_p, ones_b)?;
    let inv_d = 1.0 / cfg.d as f64;
    let (recon, recon_error) = match cfg.recon_target {
        ReconTarget::Pooled => {
            let recon = affine(g, h, hd.w_r, hd.b_r, ones_b)?;
            let target = g.constant(batch.pooled_inputs());
            let diff = g.sub(recon, target)?;
            let sq = g.unary(UnaryOp::Square, diff)?;
            let err = g.row_sum(sq)?;
            (recon, g.scale(err, inv_d)?)
        }
        ReconTarget::PerPosition => {
            let proj = affine(g, x, hd.w_p, hd.b_p, ones_rows)?;
            let rows_recon = affine(g, proj, hd.w_r, hd.b_r, ones_rows)?;
            let target = g.constant(batch.inputs.clone());
            let diff = g.sub(rows_recon, target)?;
            let sq = g.unary(UnaryOp::Square, diff)?;
            let per_row = g.row_sum(sq)?;
            let per_row = g.scale(per_row, inv_d)?;
            let recon = g.segment_mean(rows_recon, segs)?;
            (recon, g.segment_mean(per_row, segs)?)
        }
    };
    let logits = affine(g, h, hd.w_h, hd.b_h, ones_b)?;
    let membership = g.row_entmax(logits, &cfg.membership_entmax()?)?;
    Ok(ForwardNodes {
        h,
        recon,
        recon_error,
        membership,
    })
}

/// Eval-mode encoding of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowCode {
    pub h: Vec<f64>,
    pub recon: Vec<f64>,
    pub recon_error: f64,
    pub membership: Vec<f64>,
}

/// Deterministic eval-mode encoding (dropout off), in input order.
pub fn encode_batch(params: &ModelParams<Tensor>, cfg: &ModelConfig, mats: &[&Tensor]) -> Result<Vec<WindowCode>> {
    let mut out = Vec::with_capacity(mats.len());
    for chunk in mats.chunks(INFERENCE_CHUNK) {
        let batch = Batch::pack(chunk)?;
        let mut g = Graph::new();
        let p = params.to_graph(&mut g, false);
        let nodes = forward(&mut g, &p, cfg, &batch, None)?;
        let (h, recon) = (g.value(nodes.h), g.value(nodes.recon));
        let (err, y) = (g.value(nodes.recon_error), g.value(nodes.membership));
        for i in 0..batch.len() {
            out.push(WindowCode {
                h: h.row(i).to_vec(),
                recon: recon.row(i).to_vec(),
                recon_error: err.data()[i],
                membership: y.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn encode(params: &ModelParams<Tensor>, cfg: &ModelConfig, t: &Tensor) -> Result<WindowCode> {
    Ok(encode_batch(params, cfg, &[t])?.remove(0))
}
