//! Mixture membership, parameter estimation and sample energy.
//!
//! Energies are computed in the log domain: each component's log-density
//! uses a Cholesky factor of its covariance (solves, never an explicit
//! inverse) and the components are combined with log-sum-exp. The same
//! computation exists twice: [`GmmStats`] for frozen-model scoring and
//! [`gmm_graph`] for differentiable training.

use std::f64::consts::PI;

use crate::entmax::{entmax, EntmaxConfig};
use crate::error::{MladError, Result};
use crate::tensorcore::{logsumexp, Cholesky, Graph, NodeId, Tensor, UnaryOp};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Components whose total membership does not exceed this are inactive.
pub const MIN_MASS: f64 = 1e-10;

/// `ŷ = entmax(h·W_h + b)`; `w` is `d_h×K`, `b` holds `K` entries.
pub fn membership(h: &[f64], w: &Tensor, b: &Tensor, cfg: &EntmaxConfig) -> Result<Vec<f64>> {
    let (dh, k) = (w.rows(), w.cols());
    if h.len() != dh || b.numel() != k {
        return Err(MladError::Dimension {
            op: "membership",
            left: vec![h.len()],
            right: w.shape().to_vec(),
        });
    }
    let logits: Vec<f64> = (0..k)
        .map(|j| b.data()[j] + (0..dh).map(|i| h[i] * w.get(i, j)).sum::<f64>())
        .collect();
    entmax(&logits, cfg)
}

#[derive(Clone, Debug)]
pub struct GmmStats {
    pub phi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Row-major `d_h×d_h` covariances with ε already added to the diagonal.
    pub sigma: Vec<Vec<f64>>,
    pub epsilon: f64,
    factors: Vec<Option<Cholesky>>,
}

impl PartialEq for GmmStats {
    fn eq(&self, other: &Self) -> bool {
        self.phi == other.phi
            && self.mu == other.mu
            && self.sigma == other.sigma
            && self.epsilon == other.epsilon
    }
}

impl GmmStats {
    /// Validates and factors the components. Components with `phi == 0` are
    /// inactive and never factored.
    pub fn new(phi: Vec<f64>, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, epsilon: f64) -> Result<GmmStats> {
        let k = phi.len();
        if k == 0 || mu.len() != k || sigma.len() != k {
            return Err(MladError::Dimension {
                op: "gmm stats",
                left: vec![phi.len(), mu.len()],
                right: vec![sigma.len()],
            });
        }
        let m = mu[0].len();
        if mu.iter().any(|v| v.len() != m) || sigma.iter().any(|s| s.len() != m * m) {
            return Err(MladError::Dimension {
                op: "gmm stats",
                left: vec![m],
                right: sigma.iter().map(Vec::len).collect(),
            });
        }
        if phi.iter().any(|&p| !(p >= 0.0)) || (phi.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return Err(MladError::Estimation(format!("mixture weights {phi:?} are not a distribution")));
        }
        let factors = phi
            .iter()
            .zip(&sigma)
            .enumerate()
            .map(|(c, (&p, s))| {
                if p > 0.0 {
                    Cholesky::factor(s, m)
                        .map(Some)
                        .ok_or(MladError::Factorization { component: c })
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmStats {
            phi,
            mu,
            sigma,
            epsilon,
            factors,
        })
    }

    pub fn components(&self) -> usize {
        self.phi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.factors[k].is_some()
    }

    /// Mixture weights, means and covariances from a batch of codes `h`
    /// (`N×d_h`) and memberships `y` (`N×K`).
    pub fn estimate(h: &Tensor, y: &Tensor, epsilon: f64) -> Result<GmmStats> {
        let (n, m) = (h.rows(), h.cols());
        let k = y.cols();
        if y.rows() != n {
            return Err(MladError::Dimension {
                op: "estimate",
                left: h.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        if n < 2 {
            return Err(MladError::Estimation(format!("need at least 2 samples, got {n}")));
        }
        let mut phi = vec![0.0; k];
        let mut mu = vec![vec![0.0; m]; k];
        let mut sigma = vec![vec![0.0; m * m]; k];
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| y.get(i, c)).sum();
            if mass <= MIN_MASS {
                for j in 0..m {
                    sigma[c][j * m + j] = 1.0;
                }
                continue;
            }
            phi[c] = mass / n as f64;
            let mean = &mut mu[c];
            for i in 0..n {
                let w = y.get(i, c);
                for (a, x) in mean.iter_mut().zip(h.row(i)) {
                    *a += w * x;
                }
            }
            mean.iter_mut().for_each(|a| *a /= mass);
            let s = &mut sigma[c];
            let mut dev = vec![0.0; m];
            for i in 0..n {
                let w = y.get(i, c);
                for ((d, x), mu) in dev.iter_mut().zip(h.row(i)).zip(mean.iter()) {
                    *d = x - mu;
                }
                for a in 0..m {
                    let wa = w * dev[a];
                    for b in 0..m {
                        s[a * m + b] += wa * dev[b];
                    }
                }
            }
            for a in 0..m {
                for b in 0..a {
                    let avg = 0.5 * (s[a * m + b] + s[b * m + a]) / mass;
                    s[a * m + b] = avg;
                    s[b * m + a] = avg;
                }
                s[a * m + a] = s[a * m + a] / mass + epsilon;
            }
        }
        let total: f64 = phi.iter().sum();
        if total <= 0.0 {
            return Err(MladError::Estimation("every mixture component is empty".into()));
        }
        GmmStats::new(phi, mu, sigma, epsilon)
    }

    /// `E(h) = −log Σ_k φ_k N(h; μ_k, Σ_k)`.
    pub fn energy(&self, h: &[f64]) -> Result<f64> {
        let m = self.dim();
        if h.len() != m {
            return Err(MladError::Dimension {
                op: "energy",
                left: vec![h.len()],
                right: vec![m],
            });
        }
        let half_log_2pi = 0.5 * m as f64 * (2.0 * PI).ln();
        let mut terms = Vec::with_capacity(self.components());
        let mut dev = vec![0.0; m];
        for (c, f) in self.factors.iter().enumerate() {
            let Some(chol) = f else { continue };
            for ((d, x), mu) in dev.iter_mut().zip(h).zip(&self.mu[c]) {
                *d = x - mu;
            }
            terms.push(self.phi[c].ln() - 0.5 * chol.quad_form(&dev) - 0.5 * chol.log_det() - half_log_2pi);
        }
        let e = -logsumexp(&terms);
        if e.is_finite() {
            Ok(e)
        } else {
            Err(MladError::NonFinite("mixture energy".into()))
        }
    }

    /// `P = Σ_k Σ_j 1/Σ_k[j,j]` over active components.
    pub fn cov_penalty(&self) -> f64 {
        let m = self.dim();
        (0..self.components())
            .filter(|&c| self.is_active(c))
            .map(|c| (0..m).map(|j| 1.0 / self.sigma[c][j * m + j]).sum::<f64>())
            .sum()
    }
}

/// Graph nodes of the batch-estimated mixture.
#[derive(Clone, Debug)]
pub struct GmmNodes {
    /// `N×1` per-sample energies.
    pub energies: NodeId,
    /// Scalar covariance penalty.
    pub penalty: NodeId,
    pub active: Vec<bool>,
}

/// Differentiable estimate + energy + penalty for codes `h` (`N×d_h`) and
/// memberships `y` (`N×K`). Gradients flow into both.
pub fn gmm_graph(g: &mut Graph, h: NodeId, y: NodeId, epsilon: f64) -> Result<GmmNodes> {
    let (n, m) = (g.value(h).rows(), g.value(h).cols());
    let k = g.value(y).cols();
    if g.value(y).rows() != n {
        return Err(MladError::Dimension {
            op: "gmm_graph",
            left: g.value(h).shape().to_vec(),
            right: g.value(y).shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(MladError::Estimation(format!("need at least 2 samples, got {n}")));
    }
    let yv = g.value(y);
    let active: Vec<bool> = (0..k)
        .map(|c| (0..n).map(|i| yv.get(i, c)).sum::<f64>() > MIN_MASS)
        .collect();
    if !active.iter().any(|&a| a) {
        return Err(MladError::Estimation("every mixture component is empty".into()));
    }
    let ones_col = g.constant(Tensor::filled(&[n, 1], 1.0)?);
    let ones_row = g.constant(Tensor::filled(&[1, m], 1.0)?);
    let eps_eye = g.constant(Tensor::eye(m).map(|x| x * epsilon)?);
    let half_log_2pi = 0.5 * m as f64 * (2.0 * PI).ln();
    let mut log_terms = Vec::new();
    let mut penalties = Vec::new();
    for c in (0..k).filter(|&c| active[c]) {
        let yc = g.select_col(y, c)?;
        let mass = g.sum(yc)?;
        let phi = g.scale(mass, 1.0 / n as f64)?;
        let yct = g.transpose(yc)?;
        let weighted_sum = g.matmul(yct, h)?;
        let mu = g.div(weighted_sum, mass)?;
        let mu_rows = g.matmul(ones_col, mu)?;
        let dev = g.sub(h, mu_rows)?;
        let y_wide = g.matmul(yc, ones_row)?;
        let weighted_dev = g.mul(dev, y_wide)?;
        let wdt = g.transpose(weighted_dev)?;
        let scatter = g.matmul(wdt, dev)?;
        let cov = g.div(scatter, mass)?;
        let cov_t = g.transpose(cov)?;
        let sym = g.add(cov, cov_t)?;
        let sym = g.scale(sym, 0.5)?;
        let sigma = g.add(sym, eps_eye)?;

        let maha = g.mahalanobis(dev, sigma)?;
        let logdet = g.logdet_spd(sigma)?;
        let log_phi = g.unary(UnaryOp::Log, phi)?;
        let neg_half_logdet = g.scale(logdet, -0.5)?;
        let offset = g.add(log_phi, neg_half_logdet)?;
        let offset = shift(g, offset, -half_log_2pi)?;
        let quad = g.scale(maha, -0.5)?;
        log_terms.push(g.add(quad, offset)?);

        let diag = g.diag(sigma)?;
        let recip = g.unary(UnaryOp::Recip, diag)?;
        penalties.push(g.sum(recip)?);
    }
    let stacked = g.concat_cols(&log_terms)?;
    let lse = g.logsumexp_rows(stacked)?;
    let energies = g.unary(UnaryOp::Neg, lse)?;
    let mut penalty = penalties[0];
    for &p in &penalties[1..] {
        penalty = g.add(penalty, p)?;
    }
    Ok(GmmNodes {
        energies,
        penalty,
        active,
    })
}

fn shift(g: &mut Graph, x: NodeId, c: f64) -> Result<NodeId> {
    let c = g.constant(Tensor::scalar(c)?);
    g.add(x, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_identity(mu: Vec<f64>) -> GmmStats {
        let m = mu.len();
        GmmStats::new(vec![1.0], vec![mu], vec![Tensor::eye(m).into_data()], 0.0).unwrap()
    }

    #[test]
    fn energy_at_mode_of_standard_normal() {
        let s = stats_identity(vec![0.0, 0.0]);
        assert!((s.energy(&[0.0, 0.0]).unwrap() - (2.0 * PI).ln()).abs() < 1e-12);
        assert!(s.energy(&[3.0, 0.0]).unwrap() > s.energy(&[1.0, 0.0]).unwrap());
        // affine in the squared distance: E = log 2π + ½‖h‖²
        let e = s.energy(&[1.5, -2.0]).unwrap();
        assert!((e - (2.0 * PI).ln() - 0.5 * 6.25).abs() < 1e-12);
    }

    #[test]
    fn estimate_matches_hand_computation() {
        let h = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let y = Tensor::filled(&[2, 1], 1.0).unwrap();
        let s = GmmStats::estimate(&h, &y, 1e-6).unwrap();
        assert_eq!(s.phi, vec![1.0]);
        assert_eq!(s.mu[0], vec![1.0, 0.0]);
        assert_eq!(s.sigma[0], vec![1.0 + 1e-6, 0.0, 0.0, 1e-6]);

        let same = Tensor::from_rows(&vec![vec![0.3, -1.2]; 5]).unwrap();
        let s = GmmStats::estimate(&same, &Tensor::filled(&[5, 1], 1.0).unwrap(), 1e-6).unwrap();
        assert_eq!(s.sigma[0], vec![1e-6, 0.0, 0.0, 1e-6]);
    }

    #[test]
    fn hard_memberships_give_cluster_means() {
        let h = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, 3.0],
            vec![10.0, 10.0],
            vec![12.0, 14.0],
            vec![11.0, 12.0],
        ])
        .unwrap();
        let y = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let s = GmmStats::estimate(&h, &y, 1e-6).unwrap();
        assert_eq!(s.phi, vec![0.4, 0.6]);
        assert_eq!(s.mu[0], vec![1.0, 2.0]);
        assert_eq!(s.mu[1], vec![11.0, 12.0]);
    }

    #[test]
    fn empty_components_are_inactive() {
        let h = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s = GmmStats::estimate(&h, &y, 1e-6).unwrap();
        assert!(s.is_active(0) && !s.is_active(1));
        assert_eq!(s.phi, vec![1.0, 0.0]);
        assert!(s.energy(&[1.0, 2.0]).unwrap().is_finite());
        let none = Tensor::zeros(&[2, 2]);
        assert!(matches!(GmmStats::estimate(&h, &none, 1e-6), Err(MladError::Estimation(_))));
        assert!(GmmStats::estimate(&Tensor::zeros(&[1, 2]), &Tensor::filled(&[1, 1], 1.0).unwrap(), 1e-6).is_err());
    }

    #[test]
    fn symmetric_pair_energy_is_reflection_invariant() {
        let s = GmmStats::new(
            vec![0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![Tensor::eye(2).into_data(); 2],
            0.0,
        )
        .unwrap();
        let a = s.energy(&[0.7, 0.3]).unwrap();
        let b = s.energy(&[-0.7, 0.3]).unwrap();
        assert!((a - b).abs() < 1e-12);
        // permuting components leaves energy unchanged
        let swapped = GmmStats::new(
            vec![0.5, 0.5],
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            vec![Tensor::eye(2).into_data(); 2],
            0.0,
        )
        .unwrap();
        assert_eq!(swapped.energy(&[0.7, 0.3]).unwrap(), a);
    }

    #[test]
    fn penalty_values() {
        assert_eq!(stats_identity(vec![0.0, 0.0]).cov_penalty(), 2.0);
        let s = GmmStats::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![0.5, 0.0, 0.0, 2.0]], 0.0).unwrap();
        assert_eq!(s.cov_penalty(), 2.5);
        let smaller = GmmStats::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![0.4, 0.0, 0.0, 2.0]], 0.0).unwrap();
        assert!(smaller.cov_penalty() > s.cov_penalty());
    }

    #[test]
    fn factorization_failure_names_component() {
        let err = GmmStats::new(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![-1.0]],
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, MladError::Factorization { component: 1 }));
    }

    #[test]
    fn membership_cases() {
        let cfg = EntmaxConfig::default();
        let w = Tensor::zeros(&[3, 1]);
        let b = Tensor::zeros(&[1, 1]);
        assert_eq!(membership(&[1.0, -2.0, 0.5], &w, &b, &cfg).unwrap(), vec![1.0]);
        let w = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[1, 4]);
        let y = membership(&[1.0, -2.0, 0.5], &w, &b, &cfg).unwrap();
        assert!(y.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = membership(&h, &w, &b, &cfg).unwrap();
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(y.iter().all(|&p| p >= 0.0));
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> (Tensor, Tensor) {
        let h = Tensor::matrix(n, m, (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = Vec::new();
        for i in 0..n {
            y.extend(crate::entmax::softmax(&logits[i * k..(i + 1) * k]));
        }
        (h, Tensor::matrix(n, k, y).unwrap())
    }

    #[test]
    fn graph_agrees_with_plain_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, y) = random_batch(&mut rng, 12, 3, 2);
        let stats = GmmStats::estimate(&h, &y, 1e-6).unwrap();
        let mut g = Graph::new();
        let (hn, yn) = (g.param(h.clone()), g.param(y.clone()));
        let nodes = gmm_graph(&mut g, hn, yn, 1e-6).unwrap();
        for i in 0..12 {
            let plain = stats.energy(h.row(i)).unwrap();
            let graph = g.value(nodes.energies).data()[i];
            assert!((plain - graph).abs() < 1e-9 * plain.abs().max(1.0), "{plain} {graph}");
        }
        assert!((g.value(nodes.penalty).item() - stats.cov_penalty()).abs() < 1e-9 * stats.cov_penalty());
    }

    #[test]
    fn energy_and_penalty_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, y) = random_batch(&mut rng, 6, 2, 2);
        let err = grad_check(
            |g, p| {
                let nodes = gmm_graph(g, p[0], p[1], 1e-3)?;
                let e = g.mean(nodes.energies)?;
                let pen = g.scale(nodes.penalty, 0.01)?;
                g.add(e, pen)
            },
            &[h, y],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_batch_energies_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, y) = random_batch(&mut rng, 40, 4, 3);
        let s = GmmStats::estimate(&h, &y, 1e-6).unwrap();
        for i in 0..40 {
            assert!(s.energy(h.row(i)).unwrap().is_finite());
        }
    }
}
