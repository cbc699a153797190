//! α-entmax: the family of simplex projections between softmax (α = 1) and
//! sparsemax (α = 2).
//!
//! For `x ∈ ℝⁿ`, `entmax_α(x) = argmax_{p ∈ Δⁿ⁻¹} pᵀx + H_α(p)` where `H_α`
//! is the Tsallis entropy. For `1 < α < 2` the solution has the form
//!
//! ```text
//! p_i = [(α − 1)·x_i − τ]₊^{1/(α−1)}
//! ```
//!
//! with the threshold `τ` fixed by `Σ p_i = 1`. It is located by bisection and
//! then polished with Newton steps, which converge monotonically here because
//! the constraint residual is convex and decreasing in `τ`.

use serde::{Deserialize, Serialize};

use crate::error::{MladError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntmaxConfig {
    pub alpha: f64,
    pub bisection_iters: usize,
    /// Bisection stops once the bracket on τ is narrower than this.
    pub tol: f64,
}

impl Default for EntmaxConfig {
    fn default() -> Self {
        EntmaxConfig {
            alpha: 1.5,
            bisection_iters: 50,
            tol: 1e-9,
        }
    }
}

impl EntmaxConfig {
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        let cfg = EntmaxConfig {
            alpha,
            ..EntmaxConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=2.0).contains(&self.alpha) {
            return Err(MladError::Config(format!(
                "entmax alpha must lie in [1, 2], got {}",
                self.alpha
            )));
        }
        if self.bisection_iters == 0 || !(self.tol > 0.0) {
            return Err(MladError::Config(
                "entmax needs at least one bisection step and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

/// Projects `x` onto the simplex with α-entmax.
pub fn entmax(x: &[f64], cfg: &EntmaxConfig) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(MladError::Contract("entmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MladError::NumericDomain {
            op: "entmax",
            detail: "non-finite input".into(),
        });
    }
    let mut out = vec![0.0; x.len()];
    entmax_into(x, cfg, &mut out);
    Ok(out)
}

/// Allocation-free kernel behind [`entmax`]. Inputs must be finite and
/// non-empty.
pub fn entmax_into(x: &[f64], cfg: &EntmaxConfig, out: &mut [f64]) {
    let alpha = cfg.alpha;
    if alpha == 1.0 {
        softmax_into(x, out);
    } else if alpha == 2.0 {
        sparsemax_into(x, out);
    } else {
        bisect_into(x, cfg, out);
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Euclidean projection onto the simplex via the sorted-threshold rule.
pub fn sparsemax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    sparsemax_into(x, &mut out);
    out
}

fn sparsemax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted: Vec<f64> = x.iter().map(|v| v - max).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &z) in sorted.iter().enumerate() {
        cumsum += z;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if z > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max - tau).max(0.0);
    }
}

/// `x^e` for `x > 0`, with cheap paths for integer and half-integer `e`.
/// These cover α = 1.2, 1.25, 1.4 and 1.5, where `powf` would dominate
/// training time.
#[derive(Clone, Copy)]
enum Power {
    Int(i32),
    /// `x^k · √x`
    Half(i32),
    General(f64),
}

impl Power {
    fn new(e: f64) -> Power {
        let twice = (2.0 * e).round();
        if (2.0 * e - twice).abs() > 1e-9 || twice.abs() > 64.0 {
            return Power::General(e);
        }
        let t = twice as i32;
        if t % 2 == 0 {
            Power::Int(t / 2)
        } else {
            Power::Half(t.div_euclid(2))
        }
    }

    #[inline]
    fn of(self, x: f64) -> f64 {
        match self {
            Power::Int(k) => x.powi(k),
            Power::Half(k) => x.powi(k) * x.sqrt(),
            Power::General(e) => x.powf(e),
        }
    }
}

fn bisect_into(x: &[f64], cfg: &EntmaxConfig, out: &mut [f64]) {
    let am1 = cfg.alpha - 1.0;
    let inv = 1.0 / am1;
    let pow_inv = Power::new(inv);
    let pow_grad = Power::new(inv - 1.0);
    let n = x.len();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Shifted so the largest entry is 0; the root lies in [lo, hi].
    let z: Vec<f64> = x.iter().map(|v| (v - max) * am1).collect();
    let mass = |tau: f64| -> f64 {
        z.iter()
            .map(|&zi| if zi > tau { pow_inv.of(zi - tau) } else { 0.0 })
            .sum::<f64>()
    };
    let mut lo = -1.0;
    let mut hi = -(1.0 / n as f64).powf(am1);
    for _ in 0..cfg.bisection_iters {
        if hi - lo < cfg.tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton from the left never overshoots on a convex decreasing residual.
    let mut tau = lo;
    for _ in 0..30 {
        let mut f = -1.0;
        let mut df = 0.0;
        for &zi in &z {
            if zi > tau {
                let base = zi - tau;
                let pw = pow_grad.of(base);
                f += pw * base;
                df += pw;
            }
        }
        df *= inv;
        if f <= 0.0 || df <= 0.0 {
            break;
        }
        let step = f / df;
        tau += step;
        if step <= 1e-17 * tau.abs().max(1.0) {
            break;
        }
    }
    let mut sum = 0.0;
    for (o, &zi) in out.iter_mut().zip(&z) {
        *o = if zi > tau { pow_inv.of(zi - tau) } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Tsallis α-entropy; Shannon entropy at α = 1.
pub fn tsallis_entropy(p: &[f64], alpha: f64) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < -1e-6) {
        return Err(MladError::Contract(format!(
            "tsallis_entropy expects a probability vector (sum {sum})"
        )));
    }
    let h = if alpha == 1.0 {
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    } else {
        p.iter()
            .map(|&v| {
                let v = v.max(0.0);
                v - v.powf(alpha)
            })
            .sum::<f64>()
            / (alpha * (alpha - 1.0))
    };
    Ok(h.max(0.0))
}

/// `Jᵀ·upstream` for the entmax map evaluated at output `p`.
///
/// On the support `S = {i : p_i > 0}` the Jacobian is
/// `diag(s) − s·sᵀ / Σs` with `s_i = p_i^{2−α}`, and zero elsewhere. The
/// Jacobian is symmetric, so this is also `J·upstream`.
pub fn entmax_jacobian_vp(p: &[f64], alpha: f64, upstream: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    entmax_jvp_into(p, alpha, upstream, &mut out);
    out
}

/// Writes `Jᵀ·upstream` into `out` (overwriting).
pub fn entmax_jvp_into(p: &[f64], alpha: f64, upstream: &[f64], out: &mut [f64]) {
    let power = Power::new(2.0 - alpha);
    let mut s_sum = 0.0;
    let mut su = 0.0;
    for ((o, &pi), &ui) in out.iter_mut().zip(p).zip(upstream) {
        let s = if pi > 0.0 {
            power.of(pi)
        } else {
            0.0
        };
        *o = s;
        s_sum += s;
        su += s * ui;
    }
    assert!(s_sum > 0.0, "entmax output has empty support");
    let mean = su / s_sum;
    for (o, &ui) in out.iter_mut().zip(upstream) {
        *o *= ui - mean;
    }
}
