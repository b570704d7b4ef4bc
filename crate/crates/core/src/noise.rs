//! Low-rank Gaussian label-noise models.
//!
//! A [`NoiseModel`] describes the latent utility distribution for one input:
//! `u = mu + eps` with `eps ~ N(0, diag(d^2) + V V^T)`. The factor `V` is
//! either stored directly (`K x R`) or in the parameter-efficient form
//! `V = diag(v) V_shared`, where `v` has one entry per class and `V_shared`
//! is a `K x R` matrix shared by all inputs.
//!
//! Samples are drawn as `eps = d * eps_K + V eps_R`. For each sample the
//! `K` entries of `eps_K` are drawn first, then the `R` entries of `eps_R`,
//! from a single stream.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{config_err, Result};
use crate::rng::RandomSource;

/// Correlated part of the noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Diagonal-only (or no) noise.
    None,
    /// Per-input factor `V(x)`, shape `K x R`.
    Full(Array2<f64>),
    /// `V(x) = v(x) 1_R^T ⊙ shared`: row `k` of `shared` scaled by `scale[k]`.
    Efficient {
        scale: Array1<f64>,
        shared: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub mu: Array1<f64>,
    /// Diagonal correction. Any sign; its square enters the covariance.
    pub d: Array1<f64>,
    pub factor: Factor,
}

impl NoiseModel {
    pub fn new(mu: Array1<f64>, d: Array1<f64>, factor: Factor) -> Result<Self> {
        let model = Self { mu, d, factor };
        model.validate()?;
        Ok(model)
    }

    /// Zero-noise model centred on `mu`.
    pub fn deterministic(mu: Array1<f64>) -> Self {
        let k = mu.len();
        Self {
            mu,
            d: Array1::zeros(k),
            factor: Factor::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.mu.len();
        if k < 2 {
            return Err(config_err(format!("need at least 2 classes, got {k}")));
        }
        if self.d.len() != k {
            return Err(config_err(format!(
                "diagonal correction has length {}, expected {k}",
                self.d.len()
            )));
        }
        match &self.factor {
            Factor::None => {}
            Factor::Full(v) => check_factor_shape(v, k)?,
            Factor::Efficient { scale, shared } => {
                check_factor_shape(shared, k)?;
                if scale.len() != k {
                    return Err(config_err(format!(
                        "efficient scale vector has length {}, expected {k}",
                        scale.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.mu.len()
    }

    /// Rank of the correlated component (0 when absent).
    pub fn rank(&self) -> usize {
        match &self.factor {
            Factor::None => 0,
            Factor::Full(v) => v.ncols(),
            Factor::Efficient { shared, .. } => shared.ncols(),
        }
    }

    /// `V(x)` as a dense `K x R` matrix, if a factor is present.
    pub fn materialized_factor(&self) -> Option<Array2<f64>> {
        match &self.factor {
            Factor::None => None,
            Factor::Full(v) => Some(v.clone()),
            Factor::Efficient { scale, shared } => {
                let mut v = shared.clone();
                for (mut row, &s) in v.rows_mut().into_iter().zip(scale.iter()) {
                    row *= s;
                }
                Some(v)
            }
        }
    }

    /// `diag(d^2) + V V^T`, exactly symmetric.
    pub fn reconstruct_covariance(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let k = self.classes();
        let mut sigma = Array2::<f64>::zeros((k, k));
        if let Some(v) = self.materialized_factor() {
            for i in 0..k {
                let vi = v.row(i);
                for j in i..k {
                    let c = vi.dot(&v.row(j));
                    sigma[[i, j]] = c;
                    sigma[[j, i]] = c;
                }
            }
        }
        for i in 0..k {
            sigma[[i, i]] += self.d[i] * self.d[i];
        }
        Ok(sigma)
    }

    /// Writes `d ⊙ eps_k + V eps_r` into `out`.
    ///
    /// `scratch` must have length `K` and is used by the efficient factor.
    pub fn noise_from(&self, eps_k: &[f64], eps_r: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        for ((o, &d), &e) in out.iter_mut().zip(self.d.iter()).zip(eps_k) {
            *o = d * e;
        }
        match &self.factor {
            Factor::None => {}
            Factor::Full(v) => {
                for (k, o) in out.iter_mut().enumerate() {
                    let row = v.row(k);
                    *o += dot_view(row, eps_r);
                }
            }
            Factor::Efficient { scale, shared } => {
                for (k, w) in scratch.iter_mut().enumerate() {
                    *w = dot_view(shared.row(k), eps_r);
                }
                for ((o, &s), &w) in out.iter_mut().zip(scale.iter()).zip(scratch.iter()) {
                    *o += s * w;
                }
            }
        }
    }

    /// Draws one noise vector, returning the underlying standard normals in
    /// `eps_k` (length `K`) and `eps_r` (length `R`).
    pub fn draw_into(
        &self,
        rng: &mut RandomSource,
        eps_k: &mut [f64],
        eps_r: &mut [f64],
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        rng.fill_normal(eps_k);
        rng.fill_normal(eps_r);
        self.noise_from(eps_k, eps_r, scratch, out);
    }

    /// `count` independent noise vectors, one per row.
    pub fn sample_noise(&self, rng: &mut RandomSource, count: usize) -> Result<Array2<f64>> {
        self.validate()?;
        if count == 0 {
            return Err(config_err("sample count must be at least 1"));
        }
        let k = self.classes();
        let r = self.rank();
        let mut out = Array2::<f64>::zeros((count, k));
        let mut eps_k = vec![0.0; k];
        let mut eps_r = vec![0.0; r];
        let mut scratch = vec![0.0; k];
        let mut buf = vec![0.0; k];
        for mut row in out.rows_mut() {
            self.draw_into(rng, &mut eps_k, &mut eps_r, &mut scratch, &mut buf);
            row.assign(&ArrayView1::from(&buf[..]));
        }
        Ok(out)
    }
}

fn check_factor_shape(v: &Array2<f64>, k: usize) -> Result<()> {
    let (rows, r) = v.dim();
    if rows != k {
        return Err(config_err(format!("factor has {rows} rows, expected {k}")));
    }
    if r == 0 || r > k {
        return Err(config_err(format!(
            "factor rank must be in 1..={k}, got {r}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot_view(row: ArrayView1<f64>, x: &[f64]) -> f64 {
    match row.as_slice() {
        Some(s) => s.iter().zip(x).map(|(a, b)| a * b).sum(),
        None => row.iter().zip(x).map(|(a, b)| a * b).sum(),
    }
}

/// Sample covariance (divisor `n`) of the rows of `samples`.
pub fn empirical_covariance(samples: &Array2<f64>) -> Array2<f64> {
    let n = samples.nrows() as f64;
    let mean = samples.sum_axis(ndarray::Axis(0)) / n;
    let centred = samples - &mean;
    centred.t().dot(&centred) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reconstruct_two_class_example() {
        let m = NoiseModel::new(
            array![0.0, 0.0],
            array![1.0, 2.0],
            Factor::Full(array![[1.0], [-1.0]]),
        )
        .unwrap();
        assert_eq!(
            m.reconstruct_covariance().unwrap(),
            array![[2.0, -1.0], [-1.0, 5.0]]
        );
    }

    #[test]
    fn zero_factor_gives_diagonal() {
        let m = NoiseModel::new(
            array![0.0, 0.0, 0.0],
            array![0.5, -1.5, 3.0],
            Factor::Full(Array2::zeros((3, 2))),
        )
        .unwrap();
        assert_eq!(
            m.reconstruct_covariance().unwrap(),
            Array2::from_diag(&array![0.25, 2.25, 9.0])
        );
    }

    #[test]
    fn pure_rank_one() {
        let m = NoiseModel::new(
            array![0.0, 0.0],
            array![0.0, 0.0],
            Factor::Full(array![[1.0], [1.0]]),
        )
        .unwrap();
        assert_eq!(
            m.reconstruct_covariance().unwrap(),
            array![[1.0, 1.0], [1.0, 1.0]]
        );
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = NoiseModel::new(array![0.0, 0.0], array![1.0], Factor::None).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        let err = NoiseModel::new(
            array![0.0, 0.0],
            array![1.0, 1.0],
            Factor::Full(Array2::zeros((3, 1))),
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        let err = NoiseModel::new(
            array![0.0, 0.0],
            array![1.0, 1.0],
            Factor::Full(Array2::zeros((2, 3))),
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        assert!(NoiseModel::new(array![0.0], array![0.0], Factor::None).is_err());
    }

    #[test]
    fn degenerate_noise_samples_are_zero() {
        let m = NoiseModel::new(
            array![1.0, 2.0],
            array![0.0, 0.0],
            Factor::Full(Array2::zeros((2, 1))),
        )
        .unwrap();
        let s = m.sample_noise(&mut RandomSource::new(1), 50).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_count_rejected() {
        let m = NoiseModel::deterministic(array![0.0, 0.0]);
        assert!(m.sample_noise(&mut RandomSource::new(1), 0).is_err());
    }

    #[test]
    fn efficient_matches_materialized_full() {
        let shared = array![[0.3, -1.2], [2.0, 0.7]];
        let scale = array![1.0, 2.0];
        let eff = NoiseModel::new(
            array![0.0, 0.0],
            array![0.1, 0.2],
            Factor::Efficient {
                scale: scale.clone(),
                shared: shared.clone(),
            },
        )
        .unwrap();
        let full = NoiseModel::new(
            array![0.0, 0.0],
            array![0.1, 0.2],
            Factor::Full(eff.materialized_factor().unwrap()),
        )
        .unwrap();
        let a = eff.sample_noise(&mut RandomSource::new(5), 100).unwrap();
        let b = full.sample_noise(&mut RandomSource::new(5), 100).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        assert_eq!(
            eff.reconstruct_covariance().unwrap(),
            full.reconstruct_covariance().unwrap()
        );
    }

    #[test]
    fn unit_coordinate_large_sample_statistics() {
        // d = (1, 0), V = 0: coordinate 0 is standard normal.
        let m = NoiseModel::new(array![0.0, 0.0], array![1.0, 0.0], Factor::None).unwrap();
        let s = m
            .sample_noise(&mut RandomSource::new(11), 1_000_000)
            .unwrap();
        let col = s.column(0);
        let mean = col.mean().unwrap();
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() <= 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
        assert!(s.column(1).iter().all(|&x| x == 0.0));
    }
}
