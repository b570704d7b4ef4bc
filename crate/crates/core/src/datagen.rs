//! Simulator for the latent-utility label process.
//!
//! Inputs are drawn around class prototypes; each input gets a reference
//! utility `mu*(x) = A^T x + b` plus noise, and the label is the argmax of
//! the noisy utility (multiclass) or the set of positive utilities
//! (multilabel). All maps act on the normalized features that are written
//! to disk, so the ground truth can be evaluated directly on a dataset row.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::noise::{Factor, NoiseModel};
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Negatively correlated noise: the two classes replace each other.
    Substitute,
    /// Positively correlated noise: the two classes appear together.
    CoOccurrence,
}

impl PairKind {
    pub fn sign(self) -> f64 {
        match self {
            PairKind::Substitute => -1.0,
            PairKind::CoOccurrence => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub a: usize,
    pub b: usize,
    pub kind: PairKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    /// i.i.d. standard Gumbel noise on every utility.
    Gumbel,
    /// Independent Gaussian noise with per-class standard deviations.
    DiagGaussian { sigma: Array1<f64> },
    /// `diag(d^2) + V V^T` Gaussian noise.
    LowRankGaussian { d: Array1<f64>, v: Array2<f64> },
}

/// Scalar multiplier `g(x)` applied to the Gaussian noise (so the covariance
/// scales by `g(x)^2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScaleHook {
    Constant {
        value: f64,
    },
    /// `g(x) = <direction, x> + offset`.
    Affine {
        direction: Array1<f64>,
        offset: f64,
    },
}

impl Default for ScaleHook {
    fn default() -> Self {
        ScaleHook::Constant { value: 1.0 }
    }
}

/// Fully materialized ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub classes: usize,
    pub dim: usize,
    /// Prototype of each class in feature space, `K x D`.
    pub prototypes: Array2<f64>,
    /// Isotropic jitter around a prototype, in feature units per dimension.
    pub jitter: Array1<f64>,
    /// `A`, shape `D x K`.
    pub utility_weight: Array2<f64>,
    pub utility_bias: Array1<f64>,
    pub noise: NoiseKind,
    pub planted_pairs: Vec<PlantedPair>,
    pub scale_hook: ScaleHook,
}

/// Minimum |correlation| a planted pair must reach in the base covariance.
pub const MIN_PLANTED_CORRELATION: f64 = 0.3;

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.classes, self.dim);
        if k < 2 || d == 0 {
            return Err(config_err(format!(
                "need K >= 2 and D >= 1, got K={k}, D={d}"
            )));
        }
        if self.prototypes.dim() != (k, d) {
            return Err(config_err(format!("prototypes must be {k}x{d}")));
        }
        if self.jitter.len() != d {
            return Err(config_err(format!("jitter must have length {d}")));
        }
        if self.utility_weight.dim() != (d, k) || self.utility_bias.len() != k {
            return Err(config_err(format!(
                "utility map must be {d}x{k} plus bias of length {k}"
            )));
        }
        match &self.noise {
            NoiseKind::Gumbel => {}
            NoiseKind::DiagGaussian { sigma } => {
                if sigma.len() != k {
                    return Err(config_err(format!("sigma must have length {k}")));
                }
            }
            NoiseKind::LowRankGaussian { d: dv, v } => {
                NoiseModel::new(Array1::zeros(k), dv.clone(), Factor::Full(v.clone()))?;
            }
        }
        match &self.scale_hook {
            ScaleHook::Affine { direction, .. } => {
                if direction.len() != d {
                    return Err(config_err(format!(
                        "scale hook direction must have length {d}"
                    )));
                }
            }
            ScaleHook::Constant { .. } => {}
        }
        let base = match &self.noise {
            NoiseKind::Gumbel => None,
            _ => Some(self.base_covariance()?),
        };
        for pair in &self.planted_pairs {
            if pair.a >= k || pair.b >= k || pair.a == pair.b {
                return Err(config_err(format!("invalid planted pair {pair:?}")));
            }
            let Some(sigma) = &base else {
                return Err(config_err("planted pairs need Gaussian noise"));
            };
            let denom = (sigma[[pair.a, pair.a]] * sigma[[pair.b, pair.b]]).sqrt();
            let corr = if denom > 0.0 {
                sigma[[pair.a, pair.b]] / denom
            } else {
                0.0
            };
            if corr.abs() < MIN_PLANTED_CORRELATION || corr.signum() != pair.kind.sign() {
                return Err(config_err(format!(
                    "planted pair ({}, {}) has correlation {corr:.3}; needs |corr| >= {MIN_PLANTED_CORRELATION} with sign {}",
                    pair.a,
                    pair.b,
                    pair.kind.sign()
                )));
            }
        }
        Ok(())
    }

    /// Reference utility `mu*(x)`.
    pub fn utility(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.utility_weight.t().dot(&x) + &self.utility_bias
    }

    /// Noise scale multiplier `g(x)`.
    pub fn noise_scale(&self, x: ArrayView1<f64>) -> f64 {
        match &self.scale_hook {
            ScaleHook::Constant { value } => *value,
            ScaleHook::Affine { direction, offset } => direction.dot(&x) + offset,
        }
    }

    /// Covariance before the input-dependent scaling.
    pub fn base_covariance(&self) -> Result<Array2<f64>> {
        match &self.noise {
            NoiseKind::Gumbel => Err(Error::Unsupported(
                "Gumbel noise has no Gaussian covariance".into(),
            )),
            NoiseKind::DiagGaussian { sigma } => Ok(Array2::from_diag(&sigma.mapv(|s| s * s))),
            NoiseKind::LowRankGaussian { d, v } => NoiseModel::new(
                Array1::zeros(self.classes),
                d.clone(),
                Factor::Full(v.clone()),
            )?
            .reconstruct_covariance(),
        }
    }

    /// Canonical SHA-256 of the serialized spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&json)
    }

    /// Draws one noisy utility vector for `x`.
    pub fn sample_utility(&self, x: ArrayView1<f64>, rng: &mut RandomSource) -> Array1<f64> {
        let mut u = self.utility(x);
        match &self.noise {
            NoiseKind::Gumbel => {
                for v in u.iter_mut() {
                    *v += rng.gumbel();
                }
            }
            NoiseKind::DiagGaussian { sigma } => {
                let g = self.noise_scale(x);
                for (v, s) in u.iter_mut().zip(sigma.iter()) {
                    *v += g * s * rng.normal();
                }
            }
            NoiseKind::LowRankGaussian { d, v } => {
                let g = self.noise_scale(x);
                let k = self.classes;
                let r = v.ncols();
                let mut ek = vec![0.0; k];
                let mut er = vec![0.0; r];
                rng.fill_normal(&mut ek);
                rng.fill_normal(&mut er);
                for c in 0..k {
                    let corr: f64 = v.row(c).iter().zip(&er).map(|(a, b)| a * b).sum();
                    u[c] += g * (d[c] * ek[c] + corr);
                }
            }
        }
        u
    }

    /// Draws a feature vector around the prototype of a uniformly chosen class.
    pub fn sample_features(&self, rng: &mut RandomSource) -> Array1<f64> {
        let c = rng.below(self.classes);
        let mut x = self.prototypes.row(c).to_owned();
        for (xi, j) in x.iter_mut().zip(self.jitter.iter()) {
            *xi += j * rng.normal();
        }
        x
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(u: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in u.iter().enumerate().skip(1) {
        if v > u[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class indices in `0..K`.
    Multiclass(Vec<u32>),
    /// `N x K` multi-hot rows.
    Multilabel(Array2<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Multiclass,
    Multilabel,
}

impl Labels {
    pub fn kind(&self) -> LabelKind {
        match self {
            Labels::Multiclass(_) => LabelKind::Multiclass,
            Labels::Multilabel(_) => LabelKind::Multilabel,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Multiclass(v) => v.len(),
            Labels::Multilabel(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x D` features.
    pub features: Array2<f32>,
    pub labels: Labels,
    pub classes: usize,
    pub seed: u64,
    pub spec_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature_row(&self, i: usize) -> Array1<f64> {
        self.features.row(i).mapv(|v| v as f64)
    }

    /// Rows `range` as a new dataset with the same metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let features = self
            .features
            .slice(ndarray::s![range.clone(), ..])
            .to_owned();
        let labels = match &self.labels {
            Labels::Multiclass(v) => Labels::Multiclass(v[range].to_vec()),
            Labels::Multilabel(m) => Labels::Multilabel(m.slice(ndarray::s![range, ..]).to_owned()),
        };
        Dataset {
            features,
            labels,
            classes: self.classes,
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
        }
    }

    /// Consecutive train/validation/test splits with the given fractions.
    pub fn split(&self, train: f64, val: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.len();
        let n_train = ((n as f64) * train).round() as usize;
        let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        (
            self.slice(0..n_train),
            self.slice(n_train..n_train + n_val),
            self.slice(n_train + n_val..n),
        )
    }
}

fn draw_features(spec: &GenerativeSpec, n: usize, rng: &mut RandomSource) -> Array2<f32> {
    let mut features = Array2::<f32>::zeros((n, spec.dim));
    for mut row in features.rows_mut() {
        let x = spec.sample_features(rng);
        for (dst, v) in row.iter_mut().zip(x.iter()) {
            *dst = *v as f32;
        }
    }
    features
}

/// Multiclass labels `y = argmax(mu*(x) + eps)`, ties to the lowest index.
pub fn synthesize_multiclass(
    spec: &GenerativeSpec,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(config_err("dataset size must be at least 1"));
    }
    let seed = rng.seed();
    let features = draw_features(spec, n, rng);
    let mut labels = Vec::with_capacity(n);
    for row in features.rows() {
        let x = row.mapv(|v| v as f64);
        let u = spec.sample_utility(x.view(), rng);
        labels.push(argmax(u.as_slice().unwrap()) as u32);
    }
    Ok(Dataset {
        features,
        labels: Labels::Multiclass(labels),
        classes: spec.classes,
        seed,
        spec_hash: spec.hash(),
    })
}

/// Multilabel targets `y_c = 1{mu*(x)_c + eps_c > 0}`.
pub fn synthesize_multilabel(
    spec: &GenerativeSpec,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(config_err("dataset size must be at least 1"));
    }
    let seed = rng.seed();
    let features = draw_features(spec, n, rng);
    let mut labels = Array2::<u8>::zeros((n, spec.classes));
    for (row, mut y) in features.rows().into_iter().zip(labels.rows_mut()) {
        let x = row.mapv(|v| v as f64);
        let u = spec.sample_utility(x.view(), rng);
        for (yc, uc) in y.iter_mut().zip(u.iter()) {
            *yc = (*uc > 0.0) as u8;
        }
    }
    Ok(Dataset {
        features,
        labels: Labels::Multilabel(labels),
        classes: spec.classes,
        seed,
        spec_hash: spec.hash(),
    })
}

/// Ground-truth noise covariance `g(x)^2 (diag(d^2) + V V^T)` at `x`.
pub fn true_covariance(spec: &GenerativeSpec, x: ArrayView1<f64>) -> Result<Array2<f64>> {
    let g = spec.noise_scale(x);
    Ok(spec.base_covariance()? * (g * g))
}

/// Knobs for building the default planted-noise ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub dim: usize,
    /// Rank of the planted noise factor.
    pub noise_rank: usize,
    /// Norm of the background prototypes.
    pub prototype_norm: f64,
    /// Side of the triangle formed by a substitute pair and its host class.
    pub substitute_distance: f64,
    /// Standard deviation of the isotropic jitter around a prototype.
    pub jitter: f64,
    /// Scale of the reference utilities.
    pub utility_scale: f64,
    pub noise: NoiseChoice,
    /// Loading of each substitute pair on its noise column.
    pub substitute_strength: f64,
    /// Loading of each co-occurrence pair on its noise column.
    pub cooccurrence_strength: f64,
    /// Per-class diagonal noise.
    pub diag_noise: f64,
    pub substitute_pairs: usize,
    pub cooccurrence_pairs: usize,
    /// Whether the noise scale varies with the input.
    pub input_dependent: bool,
    /// Slope of the noise scale along its direction, per raw input unit.
    pub scale_slope: f64,
    /// Noise scale on the plane through the substitute triangles.
    pub scale_offset: f64,
    /// Seed for the prototype geometry and pair placement.
    pub structure_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChoice {
    Gumbel,
    DiagGaussian,
    LowRankGaussian,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 32,
            noise_rank: 3,
            prototype_norm: 3.0,
            substitute_distance: 1.5,
            jitter: 0.6,
            utility_scale: 1.0,
            noise: NoiseChoice::LowRankGaussian,
            substitute_strength: 2.5,
            cooccurrence_strength: 0.8,
            diag_noise: 0.3,
            substitute_pairs: 3,
            cooccurrence_pairs: 2,
            input_dependent: true,
            scale_slope: 2.0,
            scale_offset: 0.0,
            structure_seed: 20_211,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 3 {
            return Err(config_err("classes must be >= 2 and dim >= 3"));
        }
        let needed = 3 * self.substitute_pairs + 2 * self.cooccurrence_pairs;
        if needed > self.classes {
            return Err(config_err(format!(
                "the planted structure needs {needed} distinct classes, only {} available",
                self.classes
            )));
        }
        if self.noise == NoiseChoice::LowRankGaussian
            && (self.noise_rank == 0 || self.noise_rank > self.classes)
        {
            return Err(config_err("noise_rank must be in 1..=classes"));
        }
        for (name, v) in [
            ("prototype_norm", self.prototype_norm),
            ("substitute_distance", self.substitute_distance),
            ("jitter", self.jitter),
            ("utility_scale", self.utility_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Materializes the ground truth.
    ///
    /// Utilities are nearest-prototype scores `beta (<p_c, x> - |p_c|^2 / 2)`.
    /// Each substitute pair shares an equilateral triangle with a host class;
    /// the pair loads on one noise column with opposite signs, so under large
    /// noise one of the two overtakes the host. Co-occurrence pairs load with
    /// equal signs. With `input_dependent`, the noise is scaled by an affine
    /// function of the input that vanishes on a hyperplane through every
    /// triangle, so the host wins near the plane and the pair away from it.
    pub fn build(&self) -> Result<GenerativeSpec> {
        self.validate()?;
        let (k, d) = (self.classes, self.dim);
        let mut rng = RandomSource::new(self.structure_seed);
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let mut pairs = Vec::new();
        let mut hosts = Vec::new();
        let mut next = 0;
        for _ in 0..self.substitute_pairs {
            pairs.push(PlantedPair {
                a: order[next],
                b: order[next + 1],
                kind: PairKind::Substitute,
            });
            hosts.push(order[next + 2]);
            next += 3;
        }
        for _ in 0..self.cooccurrence_pairs {
            pairs.push(PlantedPair {
                a: order[next],
                b: order[next + 1],
                kind: PairKind::CoOccurrence,
            });
            next += 2;
        }

        let random_unit = |rng: &mut RandomSource, avoid: &[&Array1<f64>]| {
            let mut v = Array1::from_iter((0..d).map(|_| rng.normal()));
            for u in avoid {
                let along = v.dot(*u);
                v = &v - &(*u * along);
            }
            let norm = v.dot(&v).sqrt();
            v / norm
        };
        let w = random_unit(&mut rng, &[]);
        let mut prototypes = Array2::zeros((k, d));
        for c in 0..k {
            let p = random_unit(&mut rng, &[]) * self.prototype_norm;
            prototypes.row_mut(c).assign(&p);
        }
        let side = self.substitute_distance;
        let circumradius = side / 3f64.sqrt();
        for (pair, &host) in pairs.iter().zip(&hosts) {
            // Triangle centred on the host's old prototype, moved onto the
            // plane `<w, x> = 0` and spanned by two directions orthogonal to `w`.
            let mut centre = prototypes.row(host).to_owned();
            let off = centre.dot(&w);
            centre = &centre - &(&w * off);
            let e1 = random_unit(&mut rng, &[&w]);
            let e2 = random_unit(&mut rng, &[&w, &e1]);
            for (i, class) in [host, pair.a, pair.b].into_iter().enumerate() {
                let angle = std::f64::consts::TAU * i as f64 / 3.0;
                let p = &centre
                    + &(&e1 * (circumradius * angle.cos()))
                    + &(&e2 * (circumradius * angle.sin()));
                prototypes.row_mut(class).assign(&p);
            }
        }

        // Normalize features analytically from the prototype mixture.
        let mean = prototypes.mean_axis(ndarray::Axis(0)).unwrap();
        let centred = &prototypes - &mean;
        let var = centred.mapv(|v| v * v).mean_axis(ndarray::Axis(0)).unwrap()
            + self.jitter * self.jitter;
        let std = var.mapv(f64::sqrt);
        let proto_feat = &centred / &std;
        let jitter = std.mapv(|s| self.jitter / s);

        // mu*_c = beta (<p_c, x_raw> - |p_c|^2 / 2) with x_raw = mean + std * x.
        let beta = self.utility_scale;
        let mut weight = Array2::zeros((d, k));
        let mut bias = Array1::zeros(k);
        for c in 0..k {
            let p = prototypes.row(c);
            for j in 0..d {
                weight[[j, c]] = beta * p[j] * std[j];
            }
            bias[c] = beta * (p.dot(&mean) - 0.5 * p.dot(&p));
        }

        let noise = match self.noise {
            NoiseChoice::Gumbel => NoiseKind::Gumbel,
            NoiseChoice::DiagGaussian => NoiseKind::DiagGaussian {
                sigma: Array1::from_elem(k, self.diag_noise),
            },
            NoiseChoice::LowRankGaussian => {
                let r = self.noise_rank;
                let mut v = Array2::zeros((k, r));
                for (i, pair) in pairs.iter().enumerate() {
                    let col = i % r;
                    let s = match pair.kind {
                        PairKind::Substitute => self.substitute_strength,
                        PairKind::CoOccurrence => self.cooccurrence_strength,
                    };
                    v[[pair.a, col]] = s;
                    v[[pair.b, col]] = s * pair.kind.sign();
                }
                NoiseKind::LowRankGaussian {
                    d: Array1::from_elem(k, self.diag_noise),
                    v,
                }
            }
        };
        // g(x_raw) = slope <w, x_raw> + offset, rewritten on features.
        let scale_hook = if self.input_dependent && self.noise != NoiseChoice::Gumbel {
            ScaleHook::Affine {
                direction: &w * &std * self.scale_slope,
                offset: self.scale_slope * w.dot(&mean) + self.scale_offset,
            }
        } else {
            ScaleHook::default()
        };
        let planted_pairs = match self.noise {
            NoiseChoice::LowRankGaussian => pairs,
            _ => Vec::new(),
        };
        let spec = GenerativeSpec {
            classes: k,
            dim: d,
            prototypes: proto_feat,
            jitter,
            utility_weight: weight,
            utility_bias: bias,
            noise,
            planted_pairs,
            scale_hook,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Spec with a constant reference utility `mu` for every input (features are
/// a single zero column) and the given noise.
pub fn constant_utility_spec(mu: &[f64], noise: NoiseKind) -> GenerativeSpec {
    let k = mu.len();
    GenerativeSpec {
        classes: k,
        dim: 1,
        prototypes: Array2::zeros((k, 1)),
        jitter: Array1::zeros(1),
        utility_weight: Array2::zeros((1, k)),
        utility_bias: Array1::from(mu.to_vec()),
        noise,
        planted_pairs: Vec::new(),
        scale_hook: ScaleHook::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dominant_utility_wins() {
        let spec = constant_utility_spec(
            &[10.0, -10.0],
            NoiseKind::DiagGaussian {
                sigma: array![1.0, 1.0],
            },
        );
        let ds = synthesize_multiclass(&spec, 10_000, &mut RandomSource::new(1)).unwrap();
        let Labels::Multiclass(y) = &ds.labels else {
            panic!()
        };
        let freq = y.iter().filter(|&&c| c == 0).count() as f64 / y.len() as f64;
        assert!(freq >= 0.999);
    }

    #[test]
    fn zero_noise_is_deterministic_argmax() {
        let cfg = GeneratorConfig {
            noise: NoiseChoice::DiagGaussian,
            diag_noise: 0.0,
            ..GeneratorConfig::default()
        };
        let spec = cfg.build().unwrap();
        let ds = synthesize_multiclass(&spec, 500, &mut RandomSource::new(2)).unwrap();
        let Labels::Multiclass(y) = &ds.labels else {
            panic!()
        };
        for (i, &label) in y.iter().enumerate() {
            let u = spec.utility(ds.feature_row(i).view());
            assert_eq!(label as usize, argmax(u.as_slice().unwrap()));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let spec = constant_utility_spec(
            &[0.0, 0.0, 0.0],
            NoiseKind::DiagGaussian {
                sigma: array![0.0, 0.0, 0.0],
            },
        );
        let ds = synthesize_multiclass(&spec, 10, &mut RandomSource::new(0)).unwrap();
        assert_eq!(ds.labels, Labels::Multiclass(vec![0; 10]));
    }

    #[test]
    fn multilabel_dominant() {
        let spec = constant_utility_spec(
            &[5.0, -5.0],
            NoiseKind::DiagGaussian {
                sigma: array![0.5, 0.5],
            },
        );
        let ds = synthesize_multilabel(&spec, 10_000, &mut RandomSource::new(4)).unwrap();
        let Labels::Multilabel(y) = &ds.labels else {
            panic!()
        };
        let hits = y
            .rows()
            .into_iter()
            .filter(|r| r[0] == 1 && r[1] == 0)
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn multilabel_symmetric_marginals() {
        let spec = constant_utility_spec(
            &[0.0, 0.0, 0.0],
            NoiseKind::DiagGaussian {
                sigma: array![1.0, 1.0, 1.0],
            },
        );
        let n = 100_000;
        let ds = synthesize_multilabel(&spec, n, &mut RandomSource::new(5)).unwrap();
        let Labels::Multilabel(y) = &ds.labels else {
            panic!()
        };
        let se = (0.25 / n as f64).sqrt();
        for c in 0..3 {
            let m = y.column(c).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            assert!((m - 0.5).abs() < 3.0 * se, "class {c}: {m}");
        }
    }

    #[test]
    fn true_covariance_contracts() {
        let mut spec = constant_utility_spec(
            &[0.0, 0.0],
            NoiseKind::LowRankGaussian {
                d: array![1.0, 1.0],
                v: Array2::zeros((2, 1)),
            },
        );
        let x = array![0.0];
        assert_eq!(
            true_covariance(&spec, x.view()).unwrap(),
            Array2::<f64>::eye(2)
        );
        spec.scale_hook = ScaleHook::Constant { value: 2.0 };
        assert_eq!(
            true_covariance(&spec, x.view()).unwrap(),
            Array2::<f64>::eye(2) * 4.0
        );
        spec.noise = NoiseKind::Gumbel;
        assert!(matches!(
            true_covariance(&spec, x.view()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn default_spec_plants_pairs_with_sign() {
        let spec = GeneratorConfig::default().build().unwrap();
        assert_eq!(spec.planted_pairs.len(), 5);
        let x = Array1::zeros(spec.dim);
        let sigma = true_covariance(&spec, x.view()).unwrap();
        for p in &spec.planted_pairs {
            assert!(sigma[[p.a, p.b]] != 0.0);
            assert_eq!(sigma[[p.a, p.b]].signum(), p.kind.sign());
        }
    }

    #[test]
    fn unrealizable_pair_rejected() {
        let mut spec = GeneratorConfig::default().build().unwrap();
        if let NoiseKind::LowRankGaussian { d, .. } = &mut spec.noise {
            d.fill(10.0);
        }
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = GeneratorConfig::default().build().unwrap();
        let a = synthesize_multiclass(&spec, 300, &mut RandomSource::new(7)).unwrap();
        let b = synthesize_multiclass(&spec, 300, &mut RandomSource::new(7)).unwrap();
        assert_eq!(a, b);
        let c = synthesize_multiclass(&spec, 300, &mut RandomSource::new(8)).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            spec.hash(),
            GeneratorConfig::default().build().unwrap().hash()
        );
    }

    #[test]
    fn zero_rows_rejected() {
        let spec = GeneratorConfig::default().build().unwrap();
        assert!(synthesize_multiclass(&spec, 0, &mut RandomSource::new(1)).is_err());
    }
}
