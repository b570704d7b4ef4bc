//! Heteroscedastic output head.
//!
//! Maps a representation `r` to a [`NoiseModel`] through affine maps and
//! estimates class probabilities by averaging a temperature-smoothed link
//! over Monte-Carlo utility samples `u = mu + eps`:
//!
//! * softmax link: `p_c ≈ (1/S) Σ_i softmax(u_i / tau)_c`
//! * sigmoid link: `p_c ≈ (1/S) Σ_i sigmoid(u_ic / tau)`
//!
//! The objective is the negative log of the averaged probability (softmax)
//! or the sum of per-class Bernoulli negative log-likelihoods (sigmoid).
//! Gradients are exact pathwise gradients of that objective for the noise
//! draws taken during the call, so a matched `nll`/`grad_nll` pair seeded
//! identically sees identical samples.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::noise::{dot_view, Factor, NoiseModel};
use crate::rng::RandomSource;
use crate::taylor;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Homoscedastic,
    Diagonal,
    Full,
    Efficient,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Homoscedastic,
        Variant::Diagonal,
        Variant::Full,
        Variant::Efficient,
    ];

    pub fn has_diag(self) -> bool {
        !matches!(self, Variant::Homoscedastic)
    }

    pub fn has_factor(self) -> bool {
        matches!(self, Variant::Full | Variant::Efficient)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Homoscedastic => "homoscedastic",
            Variant::Diagonal => "diagonal",
            Variant::Full => "full",
            Variant::Efficient => "efficient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: Variant,
    pub link: Link,
    /// Temperature of the smoothed link.
    pub tau: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Rank of the correlated noise factor (ignored unless full/efficient).
    pub rank: usize,
    pub classes: usize,
    pub repr_dim: usize,
}

impl HeadConfig {
    pub fn new(variant: Variant, classes: usize, repr_dim: usize) -> Self {
        Self {
            variant,
            link: Link::Softmax,
            tau: 1.0,
            train_samples: 1000,
            eval_samples: 1000,
            rank: 3,
            classes,
            repr_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.train_samples == 0 {
            return Err(config_err("train_samples must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval_samples must be at least 1"));
        }
        if self.classes < 2 {
            return Err(config_err(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.repr_dim == 0 {
            return Err(config_err("repr_dim must be at least 1"));
        }
        if self.variant.has_factor() && (self.rank == 0 || self.rank > self.classes) {
            return Err(config_err(format!(
                "rank must be in 1..={} for the {} variant, got {}",
                self.classes,
                self.variant.name(),
                self.rank
            )));
        }
        Ok(())
    }

    /// Rank actually used by the variant.
    pub fn effective_rank(&self) -> usize {
        if self.variant.has_factor() {
            self.rank
        } else {
            0
        }
    }
}

/// `out = weight^T r + bias` with `weight` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn random(input: usize, output: usize, scale: f64, rng: &mut RandomSource) -> Self {
        let mut weight = Array2::zeros((input, output));
        for w in weight.iter_mut() {
            *w = scale * rng.normal();
        }
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, r: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias.as_slice().expect("contiguous bias"));
        let w = self.weight.as_slice().expect("contiguous weight");
        let m = self.output_dim();
        for (i, &ri) in r.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            let row = &w[i * m..(i + 1) * m];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += ri * wv;
            }
        }
    }

    /// Accumulates `d out` into this gradient container and adds `W d_out`
    /// into `d_r` when requested.
    pub(crate) fn backprop(
        &self,
        grad: &mut Affine,
        r: &[f64],
        d_out: &[f64],
        d_r: Option<&mut [f64]>,
    ) {
        let m = self.output_dim();
        {
            let gw = grad.weight.as_slice_mut().expect("contiguous");
            for (i, &ri) in r.iter().enumerate() {
                if ri == 0.0 {
                    continue;
                }
                let row = &mut gw[i * m..(i + 1) * m];
                for (g, &d) in row.iter_mut().zip(d_out) {
                    *g += ri * d;
                }
            }
        }
        for (g, &d) in grad.bias.iter_mut().zip(d_out) {
            *g += d;
        }
        if let Some(d_r) = d_r {
            let w = self.weight.as_slice().expect("contiguous");
            for (i, dr) in d_r.iter_mut().enumerate() {
                let row = &w[i * m..(i + 1) * m];
                *dr += row.iter().zip(d_out).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Parameters producing the correlated noise factor.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorParams {
    /// `V(x) = reshape(W_V^T r + b_V, [K, R])`, row-major (entry `k * R + j`).
    Full(Affine),
    /// `v(x) = W_v^T r + b_v` (length `K`) and shared `V` (`K x R`).
    Efficient { scale: Affine, shared: Array2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub mean: Affine,
    pub diag: Option<Affine>,
    pub factor: Option<FactorParams>,
}

/// Regularization group of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
    /// Weights feeding the low-rank factor (and the shared factor itself).
    FactorWeight,
}

/// Extra scale applied to the initial diagonal and factor weights so that
/// training starts close to the homoscedastic model.
pub const NOISE_INIT_SCALE: f64 = 0.1;

impl HeadParameters {
    /// All-zero parameters shaped for `config` (also used as gradient storage).
    pub fn zeros(config: &HeadConfig) -> Self {
        let (d, k, r) = (config.repr_dim, config.classes, config.effective_rank());
        let diag = config.variant.has_diag().then(|| Affine::zeros(d, k));
        let factor = match config.variant {
            Variant::Full => Some(FactorParams::Full(Affine::zeros(d, k * r))),
            Variant::Efficient => Some(FactorParams::Efficient {
                scale: Affine::zeros(d, k),
                shared: Array2::zeros((k, r)),
            }),
            _ => None,
        };
        Self {
            mean: Affine::zeros(d, k),
            diag,
            factor,
        }
    }

    /// Zero-mean Gaussian weights with scale `1/sqrt(D)`; noise weights get
    /// an extra [`NOISE_INIT_SCALE`]; biases start at zero.
    pub fn init(config: &HeadConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let (d, k, r) = (config.repr_dim, config.classes, config.effective_rank());
        let scale = 1.0 / (d as f64).sqrt();
        let mean = Affine::random(d, k, scale, rng);
        let diag = config
            .variant
            .has_diag()
            .then(|| Affine::random(d, k, scale * NOISE_INIT_SCALE, rng));
        let factor = match config.variant {
            Variant::Full => Some(FactorParams::Full(Affine::random(
                d,
                k * r,
                scale * NOISE_INIT_SCALE,
                rng,
            ))),
            Variant::Efficient => {
                let scale_map = Affine::random(d, k, scale * NOISE_INIT_SCALE, rng);
                let mut shared = Array2::zeros((k, r));
                for v in shared.iter_mut() {
                    *v = rng.normal();
                }
                Some(FactorParams::Efficient {
                    scale: scale_map,
                    shared,
                })
            }
            _ => None,
        };
        Ok(Self { mean, diag, factor })
    }

    pub fn variant(&self) -> Variant {
        match (&self.diag, &self.factor) {
            (None, _) => Variant::Homoscedastic,
            (Some(_), None) => Variant::Diagonal,
            (Some(_), Some(FactorParams::Full(_))) => Variant::Full,
            (Some(_), Some(FactorParams::Efficient { .. })) => Variant::Efficient,
        }
    }

    pub fn classes(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn rank(&self) -> usize {
        match &self.factor {
            None => 0,
            Some(FactorParams::Full(a)) => a.output_dim() / self.classes(),
            Some(FactorParams::Efficient { shared, .. }) => shared.ncols(),
        }
    }

    /// Checks that the parameter set matches `config` exactly.
    pub fn check(&self, config: &HeadConfig) -> Result<()> {
        config.validate()?;
        if self.variant() != config.variant {
            return Err(config_err(format!(
                "parameters are for the {} variant, config says {}",
                self.variant().name(),
                config.variant.name()
            )));
        }
        let reference = HeadParameters::zeros(config);
        let mut mine = Vec::new();
        self.visit(&mut |name, _, shape, _| mine.push((name.to_string(), shape.to_vec())));
        let mut theirs = Vec::new();
        reference.visit(&mut |name, _, shape, _| theirs.push((name.to_string(), shape.to_vec())));
        if mine != theirs {
            return Err(config_err(format!(
                "parameter shapes {mine:?} do not match config (expected {theirs:?})"
            )));
        }
        Ok(())
    }

    /// Visits every block in a fixed order: name, kind, shape, data.
    pub fn visit(&self, f: &mut dyn FnMut(&str, BlockKind, &[usize], &[f64])) {
        visit_affine("head/mean", &self.mean, BlockKind::Weight, f);
        if let Some(diag) = &self.diag {
            visit_affine("head/diag", diag, BlockKind::Weight, f);
        }
        match &self.factor {
            None => {}
            Some(FactorParams::Full(a)) => {
                visit_affine("head/factor", a, BlockKind::FactorWeight, f)
            }
            Some(FactorParams::Efficient { scale, shared }) => {
                visit_affine("head/scale", scale, BlockKind::FactorWeight, f);
                f(
                    "head/shared",
                    BlockKind::FactorWeight,
                    shared.shape(),
                    shared.as_slice().expect("contiguous"),
                );
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, BlockKind, &mut [f64])) {
        visit_affine_mut("head/mean", &mut self.mean, BlockKind::Weight, f);
        if let Some(diag) = &mut self.diag {
            visit_affine_mut("head/diag", diag, BlockKind::Weight, f);
        }
        match &mut self.factor {
            None => {}
            Some(FactorParams::Full(a)) => {
                visit_affine_mut("head/factor", a, BlockKind::FactorWeight, f)
            }
            Some(FactorParams::Efficient { scale, shared }) => {
                visit_affine_mut("head/scale", scale, BlockKind::FactorWeight, f);
                f(
                    "head/shared",
                    BlockKind::FactorWeight,
                    shared.as_slice_mut().expect("contiguous"),
                );
            }
        }
    }
}

fn visit_affine(
    prefix: &str,
    a: &Affine,
    weight_kind: BlockKind,
    f: &mut dyn FnMut(&str, BlockKind, &[usize], &[f64]),
) {
    f(
        &format!("{prefix}/weight"),
        weight_kind,
        a.weight.shape(),
        a.weight.as_slice().expect("contiguous"),
    );
    f(
        &format!("{prefix}/bias"),
        BlockKind::Bias,
        a.bias.shape(),
        a.bias.as_slice().expect("contiguous"),
    );
}

fn visit_affine_mut(
    prefix: &str,
    a: &mut Affine,
    weight_kind: BlockKind,
    f: &mut dyn FnMut(&str, BlockKind, &mut [f64]),
) {
    f(
        &format!("{prefix}/weight"),
        weight_kind,
        a.weight.as_slice_mut().expect("contiguous"),
    );
    f(
        &format!("{prefix}/bias"),
        BlockKind::Bias,
        a.bias.as_slice_mut().expect("contiguous"),
    );
}

/// Map a representation to its noise model.
pub fn resolve_noise_model(params: &HeadParameters, r: ArrayView1<f64>) -> Result<NoiseModel> {
    let (k, d) = (params.classes(), params.repr_dim());
    if r.len() != d {
        return Err(config_err(format!(
            "representation has length {}, expected {d}",
            r.len()
        )));
    }
    let r = r.to_vec();
    let mut mu = Array1::zeros(k);
    params.mean.apply(&r, mu.as_slice_mut().unwrap());
    let mut dvec = Array1::zeros(k);
    if let Some(diag) = &params.diag {
        diag.apply(&r, dvec.as_slice_mut().unwrap());
    }
    let factor = match &params.factor {
        None => Factor::None,
        Some(FactorParams::Full(a)) => {
            let rank = params.rank();
            let mut flat = vec![0.0; k * rank];
            a.apply(&r, &mut flat);
            Factor::Full(Array2::from_shape_vec((k, rank), flat).expect("shape"))
        }
        Some(FactorParams::Efficient { scale, shared }) => {
            let mut v = Array1::zeros(k);
            scale.apply(&r, v.as_slice_mut().unwrap());
            Factor::Efficient {
                scale: v,
                shared: shared.clone(),
            }
        }
    };
    NoiseModel::new(mu, dvec, factor)
}

/// Observed label for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target<'a> {
    /// Class index in `0..K`.
    Class(usize),
    /// Multi-hot vector of length `K`.
    MultiHot(&'a [u8]),
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub repr: ArrayView1<'a, f64>,
    pub target: Target<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub link: Link,
    pub probs: Array1<f64>,
}

/// Gradient of a batch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub params: HeadParameters,
    /// Gradient with respect to each example's representation.
    pub repr: Vec<Array1<f64>>,
}

/// Reusable buffers for one example's Monte-Carlo pass.
#[derive(Debug, Default)]
pub struct Workspace {
    k: usize,
    rank: usize,
    eps_k: Vec<f64>,
    eps_r: Vec<f64>,
    link: Vec<f64>,
    mean_probs: Vec<f64>,
    r: Vec<f64>,
    mu: Vec<f64>,
    d: Vec<f64>,
    factor: Vec<f64>,
    noise: Vec<f64>,
    scratch: Vec<f64>,
    coef: Vec<f64>,
    g_u: Vec<f64>,
    g_mu: Vec<f64>,
    g_d: Vec<f64>,
    g_factor: Vec<f64>,
    g_shared: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, k: usize, rank: usize, d: usize, samples: usize) {
        self.k = k;
        self.rank = rank;
        let resize = |v: &mut Vec<f64>, n: usize| {
            v.clear();
            v.resize(n, 0.0);
        };
        resize(&mut self.eps_k, samples * k);
        resize(&mut self.eps_r, samples * rank);
        resize(&mut self.link, samples * k);
        resize(&mut self.mean_probs, k);
        resize(&mut self.r, d);
        resize(&mut self.mu, k);
        resize(&mut self.d, k);
        resize(&mut self.factor, k * rank);
        resize(&mut self.noise, k);
        resize(&mut self.scratch, k);
        resize(&mut self.coef, k);
        resize(&mut self.g_u, k);
        resize(&mut self.g_mu, k);
        resize(&mut self.g_d, k);
        resize(&mut self.g_factor, k * rank);
        resize(&mut self.g_shared, k * rank);
    }

    /// Averaged probabilities of the most recent pass.
    pub fn mean_probs(&self) -> &[f64] {
        &self.mean_probs
    }
}

/// Temperature-smoothed link applied to one utility vector.
pub fn apply_link(link: Link, tau: f64, u: &[f64], out: &mut [f64]) {
    match link {
        Link::Softmax => {
            let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(u) {
                *o = ((x - max) / tau).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Link::Sigmoid => {
            for (o, &x) in out.iter_mut().zip(u) {
                *o = sigmoid(x / tau);
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_target(target: Target, link: Link, k: usize) -> Result<()> {
    match (target, link) {
        (Target::Class(c), _) if c >= k => Err(domain_err(format!(
            "label {c} out of range for {k} classes"
        ))),
        (Target::Class(_), _) => Ok(()),
        (Target::MultiHot(_), Link::Softmax) => {
            Err(domain_err("multi-hot labels require the sigmoid link"))
        }
        (Target::MultiHot(y), Link::Sigmoid) if y.len() != k => Err(domain_err(format!(
            "multi-hot label has length {}, expected {k}",
            y.len()
        ))),
        (Target::MultiHot(_), Link::Sigmoid) => Ok(()),
    }
}

#[inline]
fn target_bit(target: Target, c: usize) -> f64 {
    match target {
        Target::Class(y) => (y == c) as u8 as f64,
        Target::MultiHot(y) => (y[c] != 0) as u8 as f64,
    }
}

/// Negative log-likelihood of `target` under averaged probabilities `p`.
pub fn nll_from_probs(link: Link, p: &[f64], target: Target) -> f64 {
    match (link, target) {
        (Link::Softmax, Target::Class(y)) => -p[y].max(PROB_FLOOR).ln(),
        (Link::Softmax, Target::MultiHot(_)) => f64::NAN,
        (Link::Sigmoid, _) => p
            .iter()
            .enumerate()
            .map(|(c, &pc)| {
                if target_bit(target, c) > 0.0 {
                    -pc.max(PROB_FLOOR).ln()
                } else {
                    -(1.0 - pc).max(PROB_FLOOR).ln()
                }
            })
            .sum(),
    }
}

/// Gradient contributions of one example, before mapping to parameters.
pub struct NoiseGrads<'a> {
    pub mu: &'a [f64],
    pub d: Option<&'a [f64]>,
    /// Full: `K x R` row-major. Efficient: gradient of the scale vector `v`.
    pub factor: Option<&'a [f64]>,
    /// Efficient only: gradient of the shared `K x R` factor.
    pub shared: Option<&'a [f64]>,
}

/// Accumulates per-example noise-model gradients into parameter gradients and
/// (optionally) the representation gradient.
pub fn backprop_to_params(
    params: &HeadParameters,
    r: &[f64],
    grads: &NoiseGrads,
    out: &mut HeadParameters,
    mut d_r: Option<&mut [f64]>,
) {
    params
        .mean
        .backprop(&mut out.mean, r, grads.mu, d_r.as_deref_mut());
    if let (Some(p), Some(g), Some(gd)) = (&params.diag, &mut out.diag, grads.d) {
        p.backprop(g, r, gd, d_r.as_deref_mut());
    }
    match (&params.factor, &mut out.factor) {
        (Some(FactorParams::Full(p)), Some(FactorParams::Full(g))) => {
            if let Some(gf) = grads.factor {
                p.backprop(g, r, gf, d_r.as_deref_mut());
            }
        }
        (
            Some(FactorParams::Efficient { scale: p, .. }),
            Some(FactorParams::Efficient {
                scale: g,
                shared: gs,
            }),
        ) => {
            if let Some(gf) = grads.factor {
                p.backprop(g, r, gf, d_r);
            }
            if let Some(gsh) = grads.shared {
                for (a, b) in gs.as_slice_mut().unwrap().iter_mut().zip(gsh) {
                    *a += b;
                }
            }
        }
        _ => {}
    }
}

/// One example's Monte-Carlo pass.
///
/// Writes averaged probabilities into `ws` and returns the example's
/// objective (when `target` is given). With `grad` present, adds `weight`
/// times the objective's gradient into the parameter gradient and the
/// representation gradient.
#[allow(clippy::too_many_arguments)]
pub fn mc_pass(
    params: &HeadParameters,
    config: &HeadConfig,
    r: ArrayView1<f64>,
    target: Option<Target>,
    samples: usize,
    rng: &mut RandomSource,
    ws: &mut Workspace,
    grad: Option<(&mut HeadParameters, &mut [f64], f64)>,
) -> Result<f64> {
    let k = params.classes();
    let rank = params.rank();
    let dim = params.repr_dim();
    if r.len() != dim {
        return Err(config_err(format!(
            "representation has length {}, expected {dim}",
            r.len()
        )));
    }
    if samples == 0 {
        return Err(config_err("sample count must be at least 1"));
    }
    if let Some(t) = target {
        check_target(t, config.link, k)?;
    }
    let variant = params.variant();
    let noisy = variant != Variant::Homoscedastic;
    let s_eff = if noisy { samples } else { 1 };
    ws.prepare(k, rank, dim, s_eff);
    for (dst, &src) in ws.r.iter_mut().zip(r.iter()) {
        *dst = src;
    }

    params.mean.apply(&ws.r, &mut ws.mu);
    if let Some(diag) = &params.diag {
        diag.apply(&ws.r, &mut ws.d);
    }
    match &params.factor {
        None => {}
        Some(FactorParams::Full(a)) => a.apply(&ws.r, &mut ws.factor),
        // For the efficient variant `ws.factor` holds the length-K scale v(x).
        Some(FactorParams::Efficient { scale, .. }) => scale.apply(&ws.r, &mut ws.factor[..k]),
    }

    let tau = config.tau;
    let link = config.link;
    for i in 0..s_eff {
        let u = &mut ws.noise;
        if noisy {
            let ek = &mut ws.eps_k[i * k..(i + 1) * k];
            rng.fill_normal(ek);
            let er = &mut ws.eps_r[i * rank..(i + 1) * rank];
            rng.fill_normal(er);
            for c in 0..k {
                u[c] = ws.mu[c] + ws.d[c] * ek[c];
            }
            match &params.factor {
                None => {}
                Some(FactorParams::Full(_)) => {
                    for c in 0..k {
                        let row = &ws.factor[c * rank..(c + 1) * rank];
                        u[c] += row.iter().zip(er.iter()).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Some(FactorParams::Efficient { shared, .. }) => {
                    for c in 0..k {
                        u[c] += ws.factor[c] * dot_view(shared.row(c), er);
                    }
                }
            }
        } else {
            u.copy_from_slice(&ws.mu);
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { sample: i });
        }
        let out = &mut ws.link[i * k..(i + 1) * k];
        apply_link(link, tau, u, out);
        for (m, &p) in ws.mean_probs.iter_mut().zip(out.iter()) {
            *m += p;
        }
    }
    let inv_s = 1.0 / s_eff as f64;
    for m in ws.mean_probs.iter_mut() {
        *m *= inv_s;
    }

    let Some(target) = target else {
        return Ok(0.0);
    };
    let loss = nll_from_probs(link, &ws.mean_probs, target);
    let Some((grad_params, d_r, weight)) = grad else {
        return Ok(loss);
    };

    // d loss / d mean_prob
    for c in 0..k {
        let p = ws.mean_probs[c];
        ws.coef[c] = match link {
            Link::Softmax => {
                if target_bit(target, c) > 0.0 && p > PROB_FLOOR {
                    -1.0 / p
                } else {
                    0.0
                }
            }
            Link::Sigmoid => {
                if target_bit(target, c) > 0.0 {
                    if p > PROB_FLOOR {
                        -1.0 / p
                    } else {
                        0.0
                    }
                } else if 1.0 - p > PROB_FLOOR {
                    1.0 / (1.0 - p)
                } else {
                    0.0
                }
            }
        };
    }
    let scale = weight * inv_s / tau;
    for v in ws.g_mu.iter_mut().chain(ws.g_d.iter_mut()) {
        *v = 0.0;
    }
    for v in ws.g_factor.iter_mut().chain(ws.g_shared.iter_mut()) {
        *v = 0.0;
    }
    for i in 0..s_eff {
        let p = &ws.link[i * k..(i + 1) * k];
        match link {
            Link::Softmax => {
                let inner: f64 = ws.coef.iter().zip(p).map(|(a, b)| a * b).sum();
                for c in 0..k {
                    ws.g_u[c] = scale * p[c] * (ws.coef[c] - inner);
                }
            }
            Link::Sigmoid => {
                for c in 0..k {
                    ws.g_u[c] = scale * ws.coef[c] * p[c] * (1.0 - p[c]);
                }
            }
        }
        for c in 0..k {
            ws.g_mu[c] += ws.g_u[c];
        }
        if !noisy {
            continue;
        }
        let ek = &ws.eps_k[i * k..(i + 1) * k];
        let er = &ws.eps_r[i * rank..(i + 1) * rank];
        for c in 0..k {
            ws.g_d[c] += ws.g_u[c] * ek[c];
        }
        match &params.factor {
            None => {}
            Some(FactorParams::Full(_)) => {
                for c in 0..k {
                    let g = ws.g_u[c];
                    let row = &mut ws.g_factor[c * rank..(c + 1) * rank];
                    for (a, &e) in row.iter_mut().zip(er) {
                        *a += g * e;
                    }
                }
            }
            Some(FactorParams::Efficient { shared, .. }) => {
                for c in 0..k {
                    let g = ws.g_u[c];
                    ws.g_factor[c] += g * dot_view(shared.row(c), er);
                    let gv = g * ws.factor[c];
                    let row = &mut ws.g_shared[c * rank..(c + 1) * rank];
                    for (a, &e) in row.iter_mut().zip(er) {
                        *a += gv * e;
                    }
                }
            }
        }
    }

    let grads = NoiseGrads {
        mu: &ws.g_mu,
        d: params.diag.as_ref().map(|_| &ws.g_d[..]),
        factor: match &params.factor {
            None => None,
            Some(FactorParams::Full(_)) => Some(&ws.g_factor[..]),
            Some(FactorParams::Efficient { .. }) => Some(&ws.g_factor[..k]),
        },
        shared: match &params.factor {
            Some(FactorParams::Efficient { .. }) => Some(&ws.g_shared[..]),
            _ => None,
        },
    };
    backprop_to_params(params, &ws.r, &grads, grad_params, Some(d_r));
    Ok(loss)
}

/// Second-order Taylor objective for the diagonal softmax head.
///
/// Returns the negative approximate log-likelihood for `target`; with `grad`
/// present, accumulates `weight` times its gradient. The temperature enters
/// as `s = softmax(mu / tau)` and per-class variances `d^2 / tau^2`.
pub fn taylor_pass(
    params: &HeadParameters,
    config: &HeadConfig,
    r: ArrayView1<f64>,
    target: usize,
    form: taylor::TaylorForm,
    ws: &mut Workspace,
    grad: Option<(&mut HeadParameters, &mut [f64], f64)>,
) -> Result<f64> {
    if params.variant() != Variant::Diagonal || config.link != Link::Softmax {
        return Err(Error::Unsupported(
            "the Taylor objective is defined for the diagonal softmax head only".into(),
        ));
    }
    let k = params.classes();
    let dim = params.repr_dim();
    if r.len() != dim {
        return Err(config_err(format!(
            "representation has length {}, expected {dim}",
            r.len()
        )));
    }
    check_target(Target::Class(target), Link::Softmax, k)?;
    ws.prepare(k, 0, dim, 1);
    for (dst, &src) in ws.r.iter_mut().zip(r.iter()) {
        *dst = src;
    }
    params.mean.apply(&ws.r, &mut ws.mu);
    params
        .diag
        .as_ref()
        .expect("diagonal variant")
        .apply(&ws.r, &mut ws.d);
    let tau = config.tau;
    let z: Vec<f64> = ws.mu.iter().map(|m| m / tau).collect();
    let sigma_sq: Vec<f64> = ws.d.iter().map(|d| d * d / (tau * tau)).collect();
    let (value, g_z, g_sigma) = taylor::diag_training_objective(form, &z, target, &sigma_sq);
    apply_link(Link::Softmax, tau, &ws.mu, &mut ws.mean_probs);
    let loss = -value;
    if let Some((grad_params, d_r, weight)) = grad {
        for c in 0..k {
            ws.g_mu[c] = -weight * g_z[c] / tau;
            ws.g_d[c] = -weight * g_sigma[c] * 2.0 * ws.d[c] / (tau * tau);
        }
        let grads = NoiseGrads {
            mu: &ws.g_mu,
            d: Some(&ws.g_d),
            factor: None,
            shared: None,
        };
        backprop_to_params(params, &ws.r, &grads, grad_params, Some(d_r));
    }
    Ok(loss)
}

/// MC predictive distribution with `config.eval_samples` samples.
pub fn predict_probs(
    params: &HeadParameters,
    r: ArrayView1<f64>,
    config: &HeadConfig,
    rng: &mut RandomSource,
) -> Result<PredictiveDistribution> {
    predict_probs_with(params, r, config, config.eval_samples, rng)
}

pub fn predict_probs_with(
    params: &HeadParameters,
    r: ArrayView1<f64>,
    config: &HeadConfig,
    samples: usize,
    rng: &mut RandomSource,
) -> Result<PredictiveDistribution> {
    params.check(config)?;
    let mut ws = Workspace::new();
    mc_pass(params, config, r, None, samples, rng, &mut ws, None)?;
    Ok(PredictiveDistribution {
        link: config.link,
        probs: Array1::from(ws.mean_probs.clone()),
    })
}

/// Mean negative log-likelihood over a batch with `config.train_samples`
/// samples per example.
pub fn nll(
    params: &HeadParameters,
    batch: &[Example],
    config: &HeadConfig,
    rng: &mut RandomSource,
) -> Result<f64> {
    params.check(config)?;
    if batch.is_empty() {
        return Err(domain_err("empty batch"));
    }
    let mut ws = Workspace::new();
    let mut total = 0.0;
    for ex in batch {
        total += mc_pass(
            params,
            config,
            ex.repr,
            Some(ex.target),
            config.train_samples,
            rng,
            &mut ws,
            None,
        )?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean negative log-likelihood and its gradient; consumes the same random
/// draws as [`nll`] for the same seed.
pub fn grad_nll(
    params: &HeadParameters,
    batch: &[Example],
    config: &HeadConfig,
    rng: &mut RandomSource,
) -> Result<(f64, HeadGradient)> {
    params.check(config)?;
    if batch.is_empty() {
        return Err(domain_err("empty batch"));
    }
    let mut ws = Workspace::new();
    let mut g = HeadParameters::zeros(config);
    let weight = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut reprs = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut d_r = vec![0.0; params.repr_dim()];
        total += mc_pass(
            params,
            config,
            ex.repr,
            Some(ex.target),
            config.train_samples,
            rng,
            &mut ws,
            Some((&mut g, &mut d_r, weight)),
        )?;
        reprs.push(Array1::from(d_r));
    }
    Ok((
        total * weight,
        HeadGradient {
            params: g,
            repr: reprs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_params(config: &HeadConfig) -> HeadParameters {
        HeadParameters::zeros(config)
    }

    #[test]
    fn zero_weights_resolve_to_biases() {
        let mut cfg = HeadConfig::new(Variant::Full, 3, 4);
        cfg.rank = 2;
        let mut p = zero_params(&cfg);
        p.mean.bias = array![1.0, 2.0, 3.0];
        p.diag.as_mut().unwrap().bias = array![0.5, -0.5, 2.0];
        if let Some(FactorParams::Full(a)) = &mut p.factor {
            a.bias = Array1::from_iter((0..6).map(|x| x as f64));
        }
        let m = resolve_noise_model(&p, array![0.3, -1.0, 2.0, 7.0].view()).unwrap();
        assert_eq!(m.mu, array![1.0, 2.0, 3.0]);
        assert_eq!(m.d, array![0.5, -0.5, 2.0]);
        assert_eq!(
            m.factor,
            Factor::Full(array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
        );
    }

    #[test]
    fn homoscedastic_has_no_noise() {
        let cfg = HeadConfig::new(Variant::Homoscedastic, 3, 2);
        let p = HeadParameters::init(&cfg, &mut RandomSource::new(1)).unwrap();
        let m = resolve_noise_model(&p, array![5.0, -3.0].view()).unwrap();
        assert!(m.d.iter().all(|&x| x == 0.0));
        assert_eq!(m.factor, Factor::None);
    }

    #[test]
    fn basis_probe_reads_weight_row() {
        let cfg = HeadConfig::new(Variant::Diagonal, 3, 2);
        let mut p = HeadParameters::init(&cfg, &mut RandomSource::new(2)).unwrap();
        p.mean.bias = array![0.1, 0.2, 0.3];
        let m = resolve_noise_model(&p, array![1.0, 0.0].view()).unwrap();
        let expected = &p.mean.weight.row(0) + &p.mean.bias;
        assert_eq!(m.mu, expected);
    }

    #[test]
    fn symmetric_zero_noise_is_half() {
        let mut cfg = HeadConfig::new(Variant::Full, 2, 1);
        cfg.rank = 1;
        cfg.eval_samples = 7;
        let p = zero_params(&cfg);
        let pd = predict_probs(&p, array![0.0].view(), &cfg, &mut RandomSource::new(3)).unwrap();
        assert_eq!(pd.probs, array![0.5, 0.5]);
    }

    #[test]
    fn ln2_gives_two_thirds() {
        let cfg = HeadConfig::new(Variant::Homoscedastic, 2, 1);
        let mut p = zero_params(&cfg);
        p.mean.bias = array![2f64.ln(), 0.0];
        let pd = predict_probs(&p, array![0.0].view(), &cfg, &mut RandomSource::new(3)).unwrap();
        assert!((pd.probs[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((pd.probs[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn nll_examples() {
        let cfg = HeadConfig::new(Variant::Homoscedastic, 2, 1);
        let mut p = zero_params(&cfg);
        let r = array![0.0];
        let batch = [Example {
            repr: r.view(),
            target: Target::Class(0),
        }];
        let v = nll(&p, &batch, &cfg, &mut RandomSource::new(0)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        // A dominant utility drives the probability to 1 and the loss to 0.
        p.mean.bias = array![800.0, 0.0];
        let v = nll(&p, &batch, &cfg, &mut RandomSource::new(0)).unwrap();
        assert_eq!(v, 0.0);

        let empty: [Example; 0] = [];
        assert!(matches!(
            nll(&p, &empty, &cfg, &mut RandomSource::new(0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bernoulli_nll_hand_value() {
        let v = nll_from_probs(Link::Sigmoid, &[0.9, 0.2], Target::MultiHot(&[1, 0]));
        assert!((v - 0.328504066972036).abs() < 1e-12, "{v}");
    }

    #[test]
    fn softmax_gradient_is_prob_minus_onehot() {
        let cfg = HeadConfig::new(Variant::Homoscedastic, 3, 1);
        let mut p = zero_params(&cfg);
        p.mean.bias = array![0.3, -1.0, 0.5];
        let r = array![0.0];
        let batch = [Example {
            repr: r.view(),
            target: Target::Class(1),
        }];
        let (_, g) = grad_nll(&p, &batch, &cfg, &mut RandomSource::new(0)).unwrap();
        let mut s = [0.0; 3];
        apply_link(Link::Softmax, 1.0, p.mean.bias.as_slice().unwrap(), &mut s);
        for c in 0..3 {
            let expected = s[c] - if c == 1 { 1.0 } else { 0.0 };
            assert!((g.params.mean.bias[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_mean_gradient_sums_to_zero() {
        let cfg = HeadConfig::new(Variant::Full, 4, 2);
        let mut p = zero_params(&cfg);
        if let Some(FactorParams::Full(a)) = &mut p.factor {
            a.bias.fill(0.4);
        }
        p.diag.as_mut().unwrap().bias.fill(0.7);
        let r = array![0.0, 0.0];
        let batch = [Example {
            repr: r.view(),
            target: Target::Class(2),
        }];
        let mut c = cfg.clone();
        c.train_samples = 50;
        let (_, g) = grad_nll(&p, &batch, &c, &mut RandomSource::new(9)).unwrap();
        assert!(g.params.mean.bias.sum().abs() < 1e-14);
    }

    #[test]
    fn non_finite_utility_reports_sample() {
        let cfg = HeadConfig::new(Variant::Diagonal, 2, 1);
        let mut p = zero_params(&cfg);
        p.diag.as_mut().unwrap().bias = array![f64::INFINITY, 0.0];
        let err =
            predict_probs(&p, array![0.0].view(), &cfg, &mut RandomSource::new(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { sample: 0 }));
    }

    #[test]
    fn multi_hot_needs_sigmoid() {
        let cfg = HeadConfig::new(Variant::Homoscedastic, 2, 1);
        let p = zero_params(&cfg);
        let r = array![0.0];
        let y = [1u8, 0];
        let batch = [Example {
            repr: r.view(),
            target: Target::MultiHot(&y),
        }];
        assert!(matches!(
            nll(&p, &batch, &cfg, &mut RandomSource::new(0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = HeadConfig::new(Variant::Full, 5, 3);
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 1.0;
        cfg.rank = 6;
        assert!(cfg.validate().is_err());
        cfg.rank = 0;
        assert!(cfg.validate().is_err());
        cfg.variant = Variant::Diagonal;
        assert!(cfg.validate().is_ok());
        cfg.train_samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameters_must_match_variant() {
        let cfg = HeadConfig::new(Variant::Full, 3, 2);
        let p = HeadParameters::zeros(&HeadConfig::new(Variant::Diagonal, 3, 2));
        assert!(p.check(&cfg).is_err());
        for v in Variant::ALL {
            let c = HeadConfig::new(v, 3, 2);
            let p = HeadParameters::zeros(&c);
            assert_eq!(p.variant(), v);
            assert!(p.check(&c).is_ok());
        }
    }
}
