//! Second-order Taylor approximations to the Gaussian-perturbed softmax.
//!
//! For `s = softmax(z)` and `eps ~ N(0, Sigma)`,
//! `E[s_k(z + eps)] ≈ s_k + ½ tr(H_k Sigma)` where `H_k` is the Hessian of
//! `s_k`. Dividing the correction by `s_k` and using `log(1 + t) ≈ t` gives
//! closed-form log-likelihood approximations whose coefficients show how
//! each covariance entry moves the likelihood of the observed class `k`.

use ndarray::{Array1, Array2};

use crate::error::{domain_err, Result};

/// Strictly positive probability vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPoint {
    s: Array1<f64>,
}

impl SoftmaxPoint {
    pub fn new(s: Array1<f64>) -> Result<Self> {
        if s.len() < 2 {
            return Err(domain_err("softmax point needs at least 2 classes"));
        }
        let total = s.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(domain_err(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        if s.iter().any(|&p| !(p > 0.0)) {
            return Err(domain_err("probabilities must be strictly positive"));
        }
        Ok(Self { s })
    }

    pub fn from_logits(z: &[f64]) -> Self {
        let mut s = vec![0.0; z.len()];
        softmax(z, &mut s);
        Self { s: Array1::from(s) }
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

fn softmax(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Hessian of `s_k` with respect to the logits.
///
/// Entries: `(k,k)`: `s_k(1-s_k)(1-2s_k)`; `(j,k)`: `-s_j s_k (1-2s_k)`;
/// `(i,j)`, `i != j`, both not `k`: `2 s_k s_i s_j`; `(j,j)`, `j != k`:
/// `-s_k s_j (1-2s_j)`.
pub fn softmax_hessian(point: &SoftmaxPoint, k: usize) -> Array2<f64> {
    let s = &point.s;
    let n = s.len();
    assert!(k < n, "class {k} out of range");
    let sk = s[k];
    let mut h = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = if i == k && j == k {
                sk * (1.0 - sk) * (1.0 - 2.0 * sk)
            } else if i == k || j == k {
                let other = if i == k { j } else { i };
                -s[other] * sk * (1.0 - 2.0 * sk)
            } else if i == j {
                -sk * s[j] * (1.0 - 2.0 * s[j])
            } else {
                2.0 * sk * s[i] * s[j]
            };
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    h
}

/// `s_k + ½ tr(H_k Sigma)`. Not clamped; may leave `[0, 1]` for large `Sigma`.
pub fn approx_prob_general(point: &SoftmaxPoint, k: usize, sigma: &Array2<f64>) -> f64 {
    let h = softmax_hessian(point, k);
    let trace: f64 = h.iter().zip(sigma.iter()).map(|(a, b)| a * b).sum();
    point.s[k] + 0.5 * trace
}

/// [`approx_prob_general`] clamped to `[1e-12, 1]`.
pub fn approx_prob_clamped(point: &SoftmaxPoint, k: usize, sigma: &Array2<f64>) -> f64 {
    approx_prob_general(point, k, sigma).clamp(crate::head::PROB_FLOOR, 1.0)
}

/// Coefficient of `sigma_j^2` (`j != k`) in the diagonal correction, up to ½.
pub fn other_class_coefficient(s_j: f64) -> f64 {
    -s_j * (1.0 - 2.0 * s_j)
}

/// Coefficient of `sigma_k^2` for the observed class, up to ½.
pub fn own_class_coefficient(s_k: f64) -> f64 {
    (1.0 - s_k) * (1.0 - 2.0 * s_k)
}

/// Coefficient of `Sigma_jk` (observed class `k`), per ordered entry, up to ½.
pub fn cross_coefficient(s_j: f64, s_k: f64) -> f64 {
    -s_j * (1.0 - 2.0 * s_k)
}

/// Coefficient of `Sigma_ij` for `i != j`, both not the observed class, up to ½.
pub fn pair_coefficient(s_i: f64, s_j: f64) -> f64 {
    2.0 * s_i * s_j
}

/// Diagonal-covariance log-likelihood approximation, split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagLogLik {
    /// `log s_k`, the homoscedastic log-likelihood.
    pub log_sk: f64,
    /// `-½ Σ_{j≠k} s_j (1 - 2 s_j) sigma_j^2`
    pub other_term: f64,
    /// `½ (1 - s_k)(1 - 2 s_k) sigma_k^2`
    pub own_term: f64,
}

impl DiagLogLik {
    pub fn value(&self) -> f64 {
        self.log_sk + self.other_term + self.own_term
    }
}

pub fn approx_loglik_diag(point: &SoftmaxPoint, k: usize, sigma_sq: &[f64]) -> Result<DiagLogLik> {
    let s = &point.s;
    if sigma_sq.len() != s.len() {
        return Err(domain_err(format!(
            "variance vector has length {}, expected {}",
            sigma_sq.len(),
            s.len()
        )));
    }
    if sigma_sq.iter().any(|&v| v < 0.0) {
        return Err(domain_err("variances must be non-negative"));
    }
    let other: f64 = (0..s.len())
        .filter(|&j| j != k)
        .map(|j| other_class_coefficient(s[j]) * sigma_sq[j])
        .sum();
    Ok(DiagLogLik {
        log_sk: s[k].ln(),
        other_term: 0.5 * other,
        own_term: 0.5 * own_class_coefficient(s[k]) * sigma_sq[k],
    })
}

/// Full-covariance log-likelihood approximation, `log s_k + ½ tr(H_k Sigma) / s_k`
/// written out by term. Off-diagonal sums run over ordered index pairs, so
/// each symmetric entry contributes twice.
pub fn approx_loglik_full(point: &SoftmaxPoint, k: usize, sigma: &Array2<f64>) -> f64 {
    let s = &point.s;
    let n = s.len();
    let mut pairs = 0.0;
    let mut cross = 0.0;
    let mut diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = sigma[[i, j]];
            if i == j {
                if i == k {
                    diag += own_class_coefficient(s[k]) * v;
                } else {
                    diag += other_class_coefficient(s[i]) * v;
                }
            } else if i == k || j == k {
                let other = if i == k { j } else { i };
                cross += cross_coefficient(s[other], s[k]) * v;
            } else {
                pairs += pair_coefficient(s[i], s[j]) * v;
            }
        }
    }
    s[k].ln() + 0.5 * (pairs + cross + diag)
}

/// Training form of the diagonal Taylor objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorForm {
    /// `log s_k + t`; linear in the variances and unbounded above.
    Log,
    /// `log(s_k (1 + t))`, capped at zero, with a linear tail for small `1 + t`.
    #[default]
    ClampedProb,
}

/// Objective and gradients for `form`.
pub fn diag_training_objective(
    form: TaylorForm,
    z: &[f64],
    k: usize,
    sigma_sq: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    match form {
        TaylorForm::Log => diag_objective_with_grad(z, k, sigma_sq),
        TaylorForm::ClampedProb => diag_prob_objective_with_grad(z, k, sigma_sq),
    }
}

/// Diagonal log-likelihood approximation at logits `z` with its gradients
/// with respect to `z` and to each variance.
pub fn diag_objective_with_grad(
    z: &[f64],
    k: usize,
    sigma_sq: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = z.len();
    let mut s = vec![0.0; n];
    softmax(z, &mut s);
    let mut value = s[k].max(crate::head::PROB_FLOOR).ln();
    let mut g_sigma = vec![0.0; n];
    // d value / d s_m
    let mut a = vec![0.0; n];
    for m in 0..n {
        if m == k {
            value += 0.5 * own_class_coefficient(s[k]) * sigma_sq[k];
            g_sigma[k] = 0.5 * own_class_coefficient(s[k]);
            a[k] = 1.0 / s[k].max(crate::head::PROB_FLOOR) + 0.5 * sigma_sq[k] * (4.0 * s[k] - 3.0);
        } else {
            value += 0.5 * other_class_coefficient(s[m]) * sigma_sq[m];
            g_sigma[m] = 0.5 * other_class_coefficient(s[m]);
            a[m] = 0.5 * sigma_sq[m] * (4.0 * s[m] - 1.0);
        }
    }
    let inner: f64 = a.iter().zip(&s).map(|(x, y)| x * y).sum();
    let g_z = (0..n).map(|m| s[m] * (a[m] - inner)).collect();
    (value, g_z, g_sigma)
}

/// Below this value of `1 + t` the log is continued linearly.
pub const TAYLOR_LINEAR_BELOW: f64 = 0.1;

/// Bounded probability form `log(s_k (1 + t))`, where `t` is the variance
/// correction of [`diag_objective_with_grad`]. Capped at zero once the
/// approximate probability reaches one; below `1 + t = 0.1` the log of
/// `1 + t` is continued linearly so the gradient never vanishes there.
pub fn diag_prob_objective_with_grad(
    z: &[f64],
    k: usize,
    sigma_sq: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = z.len();
    let mut s = vec![0.0; n];
    softmax(z, &mut s);
    let sk = s[k].max(crate::head::PROB_FLOOR);
    let mut t = 0.0;
    let mut g_sigma = vec![0.0; n];
    // d t / d s_m
    let mut a = vec![0.0; n];
    for m in 0..n {
        if m == k {
            t += 0.5 * own_class_coefficient(s[k]) * sigma_sq[k];
            g_sigma[k] = 0.5 * own_class_coefficient(s[k]);
            a[k] = 0.5 * sigma_sq[k] * (4.0 * s[k] - 3.0);
        } else {
            t += 0.5 * other_class_coefficient(s[m]) * sigma_sq[m];
            g_sigma[m] = 0.5 * other_class_coefficient(s[m]);
            a[m] = 0.5 * sigma_sq[m] * (4.0 * s[m] - 1.0);
        }
    }
    let q = 1.0 + t;
    if sk * q >= 1.0 {
        return (0.0, vec![0.0; n], vec![0.0; n]);
    }
    let delta = TAYLOR_LINEAR_BELOW;
    let (log_q, slope) = if q >= delta {
        (q.ln(), 1.0 / q)
    } else {
        (delta.ln() + (q - delta) / delta, 1.0 / delta)
    };
    for (g, am) in g_sigma.iter_mut().zip(a.iter_mut()) {
        *g *= slope;
        *am *= slope;
    }
    a[k] += 1.0 / sk;
    let inner: f64 = a.iter().zip(&s).map(|(x, y)| x * y).sum();
    let g_z = (0..n).map(|m| s[m] * (a[m] - inner)).collect();
    (sk.ln() + log_q, g_z, g_sigma)
}
