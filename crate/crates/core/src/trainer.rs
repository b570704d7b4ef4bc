//! Mini-batch SGD training of a feature map plus noise head.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, EvalReport};
use crate::datagen::{Dataset, LabelKind, Labels};
use crate::error::{config_err, domain_err, Error, Result};
use crate::head::{
    mc_pass, taylor_pass, Affine, BlockKind, HeadConfig, HeadParameters, Link,
    PredictiveDistribution, Target, Variant, Workspace,
};
use crate::rng::{RandomSource, RngState};
use crate::taylor::TaylorForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureNet {
    Identity,
    /// One fully connected layer with ReLU activation.
    OneHidden {
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Monte-Carlo negative log-likelihood.
    McNll,
    /// Deterministic second-order Taylor objective (diagonal softmax only).
    TaylorDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Dimension of the dataset features.
    pub input_dim: usize,
    pub feature_net: FeatureNet,
    /// Head configuration; `repr_dim` must equal the feature map's output.
    pub head: HeadConfig,
    pub objective: Objective,
    /// Form of the Taylor objective; ignored for `mc_nll`.
    #[serde(default)]
    pub taylor_form: TaylorForm,
}

impl ModelSpec {
    /// Builds a spec whose head reads the feature map's output.
    pub fn new(
        input_dim: usize,
        feature_net: FeatureNet,
        variant: Variant,
        classes: usize,
    ) -> Self {
        let repr_dim = match feature_net {
            FeatureNet::Identity => input_dim,
            FeatureNet::OneHidden { width } => width,
        };
        Self {
            input_dim,
            feature_net,
            head: HeadConfig::new(variant, classes, repr_dim),
            objective: Objective::McNll,
            taylor_form: TaylorForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.input_dim == 0 {
            return Err(config_err("model.input_dim must be at least 1"));
        }
        let repr = match self.feature_net {
            FeatureNet::Identity => self.input_dim,
            FeatureNet::OneHidden { width } => {
                if width == 0 {
                    return Err(config_err("model.feature_net.width must be at least 1"));
                }
                width
            }
        };
        if self.head.repr_dim != repr {
            return Err(config_err(format!(
                "head.repr_dim is {} but the feature map produces {repr}",
                self.head.repr_dim
            )));
        }
        if self.objective == Objective::TaylorDiag
            && (self.head.variant != Variant::Diagonal || self.head.link != Link::Softmax)
        {
            return Err(config_err(
                "the taylor_diag objective requires the diagonal variant with a softmax link",
            ));
        }
        Ok(())
    }

    /// Representation fed to the head.
    pub fn represent(&self, params: &ModelParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim {
            return Err(config_err(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        match &params.hidden {
            None => Ok(x.to_owned()),
            Some(layer) => {
                let mut h = vec![0.0; layer.output_dim()];
                layer.apply(x.as_slice().expect("contiguous input"), &mut h);
                Ok(Array1::from_iter(h.into_iter().map(|v| v.max(0.0))))
            }
        }
    }

    fn label_kind(&self) -> LabelKind {
        match self.head.link {
            Link::Softmax => LabelKind::Multiclass,
            Link::Sigmoid => LabelKind::Multilabel,
        }
    }

    /// Checks that `dataset` fits this model.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.dim() != self.input_dim {
            return Err(config_err(format!(
                "dataset has {} features, model expects {}",
                dataset.dim(),
                self.input_dim
            )));
        }
        if dataset.classes != self.head.classes {
            return Err(config_err(format!(
                "dataset has {} classes, model expects {}",
                dataset.classes, self.head.classes
            )));
        }
        if dataset.labels.kind() != self.label_kind() {
            return Err(domain_err(format!(
                "{:?} labels cannot be scored with a {:?} link",
                dataset.labels.kind(),
                self.head.link
            )));
        }
        Ok(())
    }
}

/// Feature-map and head parameters (also used for gradients and momenta).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Option<Affine>,
    pub head: HeadParameters,
}

impl ModelParams {
    pub fn zeros(model: &ModelSpec) -> Self {
        let hidden = match model.feature_net {
            FeatureNet::Identity => None,
            FeatureNet::OneHidden { width } => Some(Affine::zeros(model.input_dim, width)),
        };
        Self {
            hidden,
            head: HeadParameters::zeros(&model.head),
        }
    }

    pub fn init(model: &ModelSpec, rng: &mut RandomSource) -> Result<Self> {
        model.validate()?;
        let hidden = match model.feature_net {
            FeatureNet::Identity => None,
            FeatureNet::OneHidden { width } => Some(Affine::random(
                model.input_dim,
                width,
                (2.0 / model.input_dim as f64).sqrt(),
                rng,
            )),
        };
        Ok(Self {
            hidden,
            head: HeadParameters::init(&model.head, rng)?,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, BlockKind, &[usize], &[f64])) {
        if let Some(h) = &self.hidden {
            f(
                "feature/hidden/weight",
                BlockKind::Weight,
                h.weight.shape(),
                h.weight.as_slice().unwrap(),
            );
            f(
                "feature/hidden/bias",
                BlockKind::Bias,
                h.bias.shape(),
                h.bias.as_slice().unwrap(),
            );
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, BlockKind, &mut [f64])) {
        if let Some(h) = &mut self.hidden {
            f(
                "feature/hidden/weight",
                BlockKind::Weight,
                h.weight.as_slice_mut().unwrap(),
            );
            f(
                "feature/hidden/bias",
                BlockKind::Bias,
                h.bias.as_slice_mut().unwrap(),
            );
        }
        self.head.visit_mut(f);
    }

    /// Flattened copy of every block in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, _, data| out.extend_from_slice(data));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// L2 weight on weight matrices (biases are not regularized).
    pub l2: f64,
    /// Multiplier on `l2` for the parameters producing the noise factor.
    pub factor_l2_multiplier: f64,
    /// Linear warmup length; `None` uses 3% of all steps.
    pub warmup_steps: Option<u64>,
    /// Fractions of the schedule at which the learning rate drops 10x.
    pub decay_milestones: Vec<f64>,
    pub grad_clip_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Monte-Carlo samples for the per-epoch validation pass.
    pub validation_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            l2: 1e-4,
            factor_l2_multiplier: 3.33,
            warmup_steps: None,
            decay_milestones: vec![1.0 / 3.0, 2.0 / 3.0, 8.0 / 9.0],
            grad_clip_norm: None,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            validation_samples: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err("optimizer.base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("optimizer.momentum must be in [0, 1)"));
        }
        if !(self.l2 >= 0.0) || !(self.factor_l2_multiplier >= 0.0) {
            return Err(config_err(
                "optimizer.l2 and factor_l2_multiplier must be non-negative",
            ));
        }
        let mut prev = 0.0;
        for &m in &self.decay_milestones {
            if !(m > prev && m < 1.0) {
                return Err(config_err(
                    "optimizer.decay_milestones must be strictly increasing inside (0, 1)",
                ));
            }
            prev = m;
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(config_err("optimizer.grad_clip_norm must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_err("optimizer.batch_size must be at least 1"));
        }
        if self.validation_samples == 0 {
            return Err(config_err(
                "optimizer.validation_samples must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.steps_per_epoch(n_train) * self.epochs as u64
    }

    pub fn warmup(&self, total_steps: u64) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (0.03 * total_steps as f64).round() as u64)
    }

    /// Learning rate at `step`.
    pub fn learning_rate(&self, step: u64, total_steps: u64) -> f64 {
        let warmup = self.warmup(total_steps);
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let drops = self
            .decay_milestones
            .iter()
            .filter(|&&m| step as f64 >= m * total_steps as f64)
            .count();
        self.base_lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestParams {
    pub epoch: usize,
    pub val_nll: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub params: ModelParams,
    pub momentum: ModelParams,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    /// Parameters with the lowest validation NLL seen so far.
    pub best: Option<BestParams>,
}

impl TrainState {
    /// Fresh state at initialization.
    pub fn new(model: ModelSpec, optimizer: OptimizerConfig) -> Result<Self> {
        model.validate()?;
        optimizer.validate()?;
        let mut rng = RandomSource::new(optimizer.seed);
        let params = ModelParams::init(&model, &mut rng)?;
        Ok(Self {
            momentum: ModelParams::zeros(&model),
            params,
            model,
            optimizer,
            step: 0,
            epoch: 0,
            rng: rng.state(),
            history: Vec::new(),
            best: None,
        })
    }

    /// Parameters used for prediction: the best validation epoch when one
    /// exists, otherwise the latest.
    pub fn selected_params(&self) -> &ModelParams {
        self.best
            .as_ref()
            .map(|b| &b.params)
            .unwrap_or(&self.params)
    }

    /// Predictive probabilities for every dataset row.
    pub fn predict_dataset(
        &self,
        dataset: &Dataset,
        samples: usize,
        rng: &mut RandomSource,
    ) -> Result<Array2<f64>> {
        predict_with(
            &self.model,
            &self.model.head,
            self.selected_params(),
            dataset,
            samples,
            rng,
        )
    }
}

fn predict_with(
    model: &ModelSpec,
    head: &HeadConfig,
    params: &ModelParams,
    dataset: &Dataset,
    samples: usize,
    rng: &mut RandomSource,
) -> Result<Array2<f64>> {
    if dataset.dim() != model.input_dim {
        return Err(config_err(format!(
            "dataset has {} features, model expects {}",
            dataset.dim(),
            model.input_dim
        )));
    }
    let k = head.classes;
    let mut out = Array2::zeros((dataset.len(), k));
    let mut ws = Workspace::new();
    for i in 0..dataset.len() {
        let r = model.represent(params, dataset.feature_row(i).view())?;
        mc_pass(
            &params.head,
            head,
            r.view(),
            None,
            samples,
            rng,
            &mut ws,
            None,
        )?;
        out.row_mut(i).assign(&ArrayView1::from(ws.mean_probs()));
    }
    Ok(out)
}

fn target_of(labels: &Labels, i: usize) -> Target<'_> {
    match labels {
        Labels::Multiclass(y) => Target::Class(y[i] as usize),
        Labels::Multilabel(m) => Target::MultiHot(m.row(i).to_slice().expect("contiguous labels")),
    }
}

/// Data loss and gradient of one mini-batch, accumulated into `grad`.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &ModelSpec,
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    rng: &mut RandomSource,
    ws: &mut Workspace,
    grad: &mut ModelParams,
) -> Result<f64> {
    let weight = 1.0 / indices.len() as f64;
    let head = &model.head;
    let mut total = 0.0;
    let mut x = vec![0.0; model.input_dim];
    let mut d_r = vec![0.0; head.repr_dim];
    let mut pre = vec![0.0; head.repr_dim];
    let mut r = vec![0.0; head.repr_dim];
    for &i in indices {
        for (dst, &src) in x.iter_mut().zip(dataset.features.row(i).iter()) {
            *dst = src as f64;
        }
        match &params.hidden {
            None => r.copy_from_slice(&x),
            Some(layer) => {
                layer.apply(&x, &mut pre);
                for (dst, &p) in r.iter_mut().zip(&pre) {
                    *dst = p.max(0.0);
                }
            }
        }
        d_r.fill(0.0);
        let target = target_of(&dataset.labels, i);
        let rv = ArrayView1::from(&r[..]);
        let loss = match model.objective {
            Objective::McNll => mc_pass(
                &params.head,
                head,
                rv,
                Some(target),
                head.train_samples,
                rng,
                ws,
                Some((&mut grad.head, &mut d_r, weight)),
            )?,
            Objective::TaylorDiag => {
                let Target::Class(c) = target else {
                    return Err(domain_err("the Taylor objective needs class labels"));
                };
                taylor_pass(
                    &params.head,
                    head,
                    rv,
                    c,
                    model.taylor_form,
                    ws,
                    Some((&mut grad.head, &mut d_r, weight)),
                )?
            }
        };
        total += loss;
        if let (Some(layer), Some(g)) = (&params.hidden, &mut grad.hidden) {
            for (d, &p) in d_r.iter_mut().zip(&pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            layer.backprop(g, &x, &d_r, None);
        }
    }
    Ok(total * weight)
}

fn l2_multiplier(kind: BlockKind, opt: &OptimizerConfig) -> f64 {
    match kind {
        BlockKind::Weight => opt.l2,
        BlockKind::FactorWeight => opt.l2 * opt.factor_l2_multiplier,
        BlockKind::Bias => 0.0,
    }
}

/// `(l2 / 2) * sum of squared regularized weights`, factor blocks scaled.
pub fn l2_penalty(params: &ModelParams, opt: &OptimizerConfig) -> f64 {
    let mut total = 0.0;
    params.visit(&mut |_, kind, _, data| {
        total += 0.5 * l2_multiplier(kind, opt) * data.iter().map(|v| v * v).sum::<f64>();
    });
    total
}

/// Regularized training objective on `indices`: mean data loss plus the L2
/// penalty, using the model's training sample count.
pub fn regularized_loss(
    model: &ModelSpec,
    params: &ModelParams,
    opt: &OptimizerConfig,
    dataset: &Dataset,
    indices: &[usize],
    rng: &mut RandomSource,
) -> Result<f64> {
    model.check_dataset(dataset)?;
    if indices.is_empty() {
        return Err(domain_err("empty batch"));
    }
    let mut grad = ModelParams::zeros(model);
    let data = batch_gradient(
        model,
        params,
        dataset,
        indices,
        rng,
        &mut Workspace::new(),
        &mut grad,
    )?;
    Ok(data + l2_penalty(params, opt))
}

/// Gradient of [`regularized_loss`] as a flat vector in visiting order.
pub fn regularized_gradient(
    model: &ModelSpec,
    params: &ModelParams,
    opt: &OptimizerConfig,
    dataset: &Dataset,
    indices: &[usize],
    rng: &mut RandomSource,
) -> Result<(f64, ModelParams)> {
    model.check_dataset(dataset)?;
    if indices.is_empty() {
        return Err(domain_err("empty batch"));
    }
    let mut grad = ModelParams::zeros(model);
    let data = batch_gradient(
        model,
        params,
        dataset,
        indices,
        rng,
        &mut Workspace::new(),
        &mut grad,
    )?;
    add_l2_gradient(params, opt, &mut grad);
    Ok((data + l2_penalty(params, opt), grad))
}

fn add_l2_gradient(params: &ModelParams, opt: &OptimizerConfig, grad: &mut ModelParams) {
    let mut weights: Vec<(f64, Vec<f64>)> = Vec::new();
    params.visit(&mut |_, kind, _, data| weights.push((l2_multiplier(kind, opt), data.to_vec())));
    let mut idx = 0;
    grad.visit_mut(&mut |_, _, g| {
        let (m, w) = &weights[idx];
        if *m != 0.0 {
            for (gv, wv) in g.iter_mut().zip(w) {
                *gv += m * wv;
            }
        }
        idx += 1;
    });
}

/// Trains from initialization for `opt.epochs` epochs.
pub fn train(
    model: ModelSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    opt: OptimizerConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(model, opt)?;
    let epochs = state.optimizer.epochs;
    train_epochs(&mut state, train_set, val_set, epochs)?;
    Ok(state)
}

/// Continues `state` until `until_epoch` epochs are complete.
///
/// On divergence `state` holds the last parameters with a finite loss and a
/// [`Error::Divergence`] is returned.
pub fn train_epochs(
    state: &mut TrainState,
    train_set: &Dataset,
    val_set: &Dataset,
    until_epoch: usize,
) -> Result<()> {
    let model = state.model.clone();
    let opt = state.optimizer.clone();
    model.validate()?;
    opt.validate()?;
    model.check_dataset(train_set)?;
    if !val_set.is_empty() {
        model.check_dataset(val_set)?;
    }
    if train_set.is_empty() && until_epoch > state.epoch {
        return Err(domain_err("empty training set"));
    }
    let total_steps = opt.total_steps(train_set.len());
    let mut rng = RandomSource::from_state(state.rng);
    let mut ws = Workspace::new();
    let mut grad = ModelParams::zeros(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while state.epoch < until_epoch.min(opt.epochs) {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(opt.batch_size) {
            grad.visit_mut(&mut |_, _, g| g.fill(0.0));
            let loss = match batch_gradient(
                &model,
                &state.params,
                train_set,
                batch,
                &mut rng,
                &mut ws,
                &mut grad,
            ) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                state.rng = rng.state();
                return Err(Error::Divergence {
                    step: state.step,
                    epoch: state.epoch,
                    loss,
                });
            }
            add_l2_gradient(&state.params, &opt, &mut grad);
            if let Some(max_norm) = opt.grad_clip_norm {
                let mut sq = 0.0;
                grad.visit(&mut |_, _, _, g| sq += g.iter().map(|v| v * v).sum::<f64>());
                let norm = sq.sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    grad.visit_mut(&mut |_, _, g| g.iter_mut().for_each(|v| *v *= s));
                }
            }
            lr = opt.learning_rate(state.step, total_steps);
            let previous = (state.params.clone(), state.momentum.clone());
            apply_momentum(
                &mut state.params,
                &mut state.momentum,
                &grad,
                lr,
                opt.momentum,
            );
            if !all_finite(&state.params) || !all_finite(&state.momentum) {
                (state.params, state.momentum) = previous;
                state.rng = rng.state();
                return Err(Error::Divergence {
                    step: state.step,
                    epoch: state.epoch,
                    loss: f64::INFINITY,
                });
            }
            state.step += 1;
            loss_sum += loss * batch.len() as f64;
        }
        let mut record = EpochRecord {
            epoch: state.epoch + 1,
            lr,
            train_nll: loss_sum / train_set.len() as f64,
            val_nll: None,
            val_top1: None,
            val_gap: None,
        };
        if !val_set.is_empty() {
            let mut val_rng = RandomSource::substream(opt.seed, 1 + state.epoch as u64);
            let probs = predict_with(
                &model,
                &model.head,
                &state.params,
                val_set,
                opt.validation_samples,
                &mut val_rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence {
                    step: state.step,
                    epoch: state.epoch,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            match &val_set.labels {
                Labels::Multiclass(y) => {
                    record.val_nll = Some(analysis::multiclass_nll(probs.view(), y)?);
                    record.val_top1 = Some(analysis::topk_accuracy(probs.view(), y, 1)?);
                }
                Labels::Multilabel(y) => {
                    record.val_nll = Some(analysis::multilabel_nll(probs.view(), y.view())?);
                    record.val_gap = analysis::gap(probs.view(), y.view()).ok().map(|g| g.gap);
                }
            }
            let val_nll = record.val_nll.unwrap();
            if state.best.as_ref().is_none_or(|b| val_nll < b.val_nll) {
                state.best = Some(BestParams {
                    epoch: state.epoch + 1,
                    val_nll,
                    params: state.params.clone(),
                });
            }
        }
        state.history.push(record);
        state.epoch += 1;
        state.rng = rng.state();
    }
    Ok(())
}

fn all_finite(params: &ModelParams) -> bool {
    let mut ok = true;
    params.visit(&mut |_, _, _, v| ok &= v.iter().all(|x| x.is_finite()));
    ok
}

fn apply_momentum(
    params: &mut ModelParams,
    momentum: &mut ModelParams,
    grad: &ModelParams,
    lr: f64,
    mu: f64,
) {
    let mut grads: Vec<&[f64]> = Vec::new();
    // Visiting order is identical for all three containers.
    let mut flat = Vec::new();
    grad.visit(&mut |_, _, _, g| flat.push(g.to_vec()));
    grads.extend(flat.iter().map(|v| v.as_slice()));
    let mut idx = 0;
    let mut velocities = Vec::new();
    momentum.visit_mut(&mut |_, _, m| {
        for (mv, &g) in m.iter_mut().zip(grads[idx]) {
            *mv = mu * *mv + g;
        }
        velocities.push(m.to_vec());
        idx += 1;
    });
    let mut idx = 0;
    params.visit_mut(&mut |_, _, w| {
        for (wv, &m) in w.iter_mut().zip(&velocities[idx]) {
            *wv -= lr * m;
        }
        idx += 1;
    });
}

/// Evaluation-time overrides of the head configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOverrides {
    pub eval_samples: Option<usize>,
    pub tau: Option<f64>,
}

/// Scores the selected parameters on `dataset`; deterministic given `seed`.
pub fn evaluate(
    state: &TrainState,
    dataset: &Dataset,
    overrides: &EvalOverrides,
    seed: u64,
) -> Result<EvalReport> {
    let mut head = state.model.head.clone();
    if let Some(s) = overrides.eval_samples {
        head.eval_samples = s;
    }
    if let Some(t) = overrides.tau {
        head.tau = t;
    }
    head.validate()?;
    state.model.check_dataset(dataset)?;
    if dataset.is_empty() {
        return Err(domain_err("empty evaluation set"));
    }
    let mut rng = RandomSource::new(seed);
    let probs = predict_with(
        &state.model,
        &head,
        state.selected_params(),
        dataset,
        head.eval_samples,
        &mut rng,
    )?;
    EvalReport::from_probs(
        probs.view(),
        &dataset.labels,
        head.eval_samples,
        analysis::count_parameters(&state.model),
    )
}

/// Arithmetic mean of the members' predictive distributions at input `x`.
pub fn ensemble_predict(
    states: &[&TrainState],
    x: ArrayView1<f64>,
    rng: &mut RandomSource,
) -> Result<PredictiveDistribution> {
    let first = check_members(states)?;
    let mut probs = Array1::zeros(first.model.head.classes);
    let mut ws = Workspace::new();
    for s in states {
        let params = s.selected_params();
        let r = s.model.represent(params, x)?;
        mc_pass(
            &params.head,
            &s.model.head,
            r.view(),
            None,
            s.model.head.eval_samples,
            rng,
            &mut ws,
            None,
        )?;
        probs += &ArrayView1::from(ws.mean_probs());
    }
    probs /= states.len() as f64;
    Ok(PredictiveDistribution {
        link: first.model.head.link,
        probs,
    })
}

fn check_members<'a>(states: &[&'a TrainState]) -> Result<&'a TrainState> {
    let first = *states
        .first()
        .ok_or_else(|| domain_err("an ensemble needs at least one member"))?;
    for s in states {
        if s.model.head.classes != first.model.head.classes
            || s.model.head.link != first.model.head.link
        {
            return Err(domain_err("ensemble members disagree on classes or link"));
        }
    }
    Ok(first)
}

/// Per-member and averaged probabilities over a dataset.
pub fn ensemble_predict_dataset(
    states: &[&TrainState],
    dataset: &Dataset,
    samples: Option<usize>,
    seed: u64,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    let first = check_members(states)?;
    let mut members = Vec::with_capacity(states.len());
    let mut mean = Array2::zeros((dataset.len(), first.model.head.classes));
    for (m, s) in states.iter().enumerate() {
        let mut rng = RandomSource::substream(seed, m as u64);
        let p = s.predict_dataset(
            dataset,
            samples.unwrap_or(s.model.head.eval_samples),
            &mut rng,
        )?;
        mean += &p;
        members.push(p);
    }
    mean /= states.len() as f64;
    Ok((members, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let opt = OptimizerConfig {
            warmup_steps: Some(10),
            ..OptimizerConfig::default()
        };
        assert_eq!(opt.learning_rate(0, 900), 0.0);
        assert!((opt.learning_rate(5, 900) - 0.05).abs() < 1e-15);
        assert_eq!(opt.learning_rate(10, 900), 0.1);
        assert!((opt.learning_rate(300, 900) - 0.01).abs() < 1e-15);
        assert!((opt.learning_rate(600, 900) - 0.001).abs() < 1e-15);
        assert!((opt.learning_rate(800, 900) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn optimizer_validation() {
        let bad = [
            OptimizerConfig {
                base_lr: 0.0,
                ..Default::default()
            },
            OptimizerConfig {
                decay_milestones: vec![0.5, 0.4],
                ..Default::default()
            },
            OptimizerConfig {
                decay_milestones: vec![1.0],
                ..Default::default()
            },
            OptimizerConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for opt in bad {
            assert!(matches!(opt.validate(), Err(Error::Config(_))), "{opt:?}");
        }
    }

    #[test]
    fn taylor_objective_needs_diagonal_softmax() {
        let mut spec = ModelSpec::new(4, FeatureNet::Identity, Variant::Full, 3);
        spec.objective = Objective::TaylorDiag;
        assert!(spec.validate().is_err());
        spec.head.variant = Variant::Diagonal;
        assert!(spec.validate().is_ok());
        spec.head.link = Link::Sigmoid;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn hidden_width_feeds_head() {
        let spec = ModelSpec::new(4, FeatureNet::OneHidden { width: 7 }, Variant::Diagonal, 3);
        assert_eq!(spec.head.repr_dim, 7);
        spec.validate().unwrap();
        let params = ModelParams::init(&spec, &mut RandomSource::new(0)).unwrap();
        let r = spec.represent(&params, Array1::ones(4).view()).unwrap();
        assert_eq!(r.len(), 7);
        assert!(r.iter().all(|&v| v >= 0.0));
    }
}
