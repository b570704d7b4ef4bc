//! Classification metrics and covariance diagnostics.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Labels};
use crate::error::{domain_err, Error, Result};
use crate::head::{resolve_noise_model, HeadConfig, Variant};
use crate::rng::RandomSource;
use crate::trainer::{FeatureNet, ModelSpec, TrainState};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Index of the largest probability, ties to the lowest index.
pub fn predicted_class(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `label` when classes are sorted by descending probability
/// with ties broken by class index.
pub fn label_rank(p: ArrayView1<f64>, label: usize) -> usize {
    let py = p[label];
    1 + p
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > py || (v == py && j < label))
        .count()
}

fn check_multiclass(probs: ArrayView2<f64>, labels: &[u32]) -> Result<()> {
    if probs.nrows() == 0 {
        return Err(domain_err("no examples to score"));
    }
    if probs.nrows() != labels.len() {
        return Err(domain_err(format!(
            "{} probability rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= probs.ncols()) {
        return Err(domain_err(format!(
            "label {bad} out of range for {} classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// Fraction of examples whose label is among the `k` most probable classes.
pub fn topk_accuracy(probs: ArrayView2<f64>, labels: &[u32], k: usize) -> Result<f64> {
    check_multiclass(probs, labels)?;
    if k == 0 || k > probs.ncols() {
        return Err(domain_err(format!(
            "k must be in 1..={}, got {k}",
            probs.ncols()
        )));
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(p, &y)| label_rank(p.view(), y as usize) <= k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean per-example negative log-likelihood of categorical predictions.
pub fn multiclass_nll(probs: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    check_multiclass(probs, labels)?;
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| -p[y as usize].max(crate::head::PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean per-example Bernoulli negative log-likelihood summed over classes.
pub fn multilabel_nll(probs: ArrayView2<f64>, labels: ArrayView2<u8>) -> Result<f64> {
    if probs.nrows() == 0 || probs.dim() != labels.dim() {
        return Err(domain_err(
            "probabilities and labels must be non-empty with equal shapes",
        ));
    }
    let floor = crate::head::PROB_FLOOR;
    let total: f64 = probs
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            if y == 1 {
                -p.max(floor).ln()
            } else {
                -(1.0 - p).max(floor).ln()
            }
        })
        .sum();
    Ok(total / probs.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

/// Bin of `conf` among `bins` equal-width bins with `(lo, hi]` membership;
/// the lowest bin also takes `0`.
pub fn confidence_bin(conf: f64, bins: usize) -> usize {
    let edge = |i: usize| i as f64 / bins as f64;
    let mut b = ((conf * bins as f64).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while b > 0 && conf <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && conf > edge(b + 1) {
        b += 1;
    }
    b
}

pub fn reliability_bins(
    confidences: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    if bins < 1 {
        return Err(domain_err("ECE needs at least one bin"));
    }
    if confidences.len() != correct.len() {
        return Err(domain_err("confidences and correctness differ in length"));
    }
    if confidences.is_empty() {
        return Err(domain_err("no examples to score"));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(domain_err(format!("confidence {c} outside [0, 1]")));
        }
        let b = confidence_bin(c, bins);
        count[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += c;
    }
    Ok((0..bins)
        .map(|b| ReliabilityBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            accuracy: (count[b] > 0).then(|| hits[b] as f64 / count[b] as f64),
            confidence: (count[b] > 0).then(|| conf_sum[b] / count[b] as f64),
        })
        .collect())
}

pub fn ece_from_confidences(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let table = reliability_bins(confidences, correct, bins)?;
    let n = confidences.len() as f64;
    Ok(table
        .iter()
        .filter_map(|b| Some(b.count as f64 / n * (b.accuracy? - b.confidence?).abs()))
        .sum())
}

fn confidences_and_correct(probs: ArrayView2<f64>, labels: &[u32]) -> (Vec<f64>, Vec<bool>) {
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| {
            let top = predicted_class(p.view());
            (p[top], top == y as usize)
        })
        .unzip()
}

/// Expected calibration error of the top-1 prediction.
pub fn ece(probs: ArrayView2<f64>, labels: &[u32], bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(domain_err("ECE needs at least one bin"));
    }
    check_multiclass(probs, labels)?;
    let (conf, correct) = confidences_and_correct(probs, labels);
    ece_from_confidences(&conf, &correct, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap: f64,
    /// Average precision per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded_classes: usize,
}

/// Average precision of one ranked column.
pub fn average_precision(scores: ArrayView1<f64>, positives: ArrayView1<u8>) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut seen = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] == 1 {
            seen += 1;
            total += seen as f64 / (rank + 1) as f64;
        }
    }
    (seen > 0).then(|| total / seen as f64)
}

/// Mean per-class average precision; classes without positives are skipped
/// and counted.
pub fn gap(probs: ArrayView2<f64>, labels: ArrayView2<u8>) -> Result<GapResult> {
    if probs.dim() != labels.dim() || probs.nrows() == 0 {
        return Err(domain_err(
            "scores and labels must be non-empty with equal shapes",
        ));
    }
    let per_class: Vec<Option<f64>> = (0..probs.ncols())
        .map(|c| average_precision(probs.column(c), labels.column(c)))
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(domain_err("no class has a positive example"));
    }
    Ok(GapResult {
        gap: scored.iter().sum::<f64>() / scored.len() as f64,
        excluded_classes: per_class.len() - scored.len(),
        per_class,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Exact count per block.
    pub blocks: BTreeMap<String, u64>,
    pub total: u64,
}

impl ParamCounts {
    pub fn block(&self, name: &str) -> u64 {
        self.blocks.get(name).copied().unwrap_or(0)
    }
}

/// Per-block parameter counts of a head.
///
/// `factor` covers the low-rank factor: `D*K*R + K*R` for the full variant,
/// and the scale map plus the shared matrix, `D*K + K + K*R`, for the
/// efficient one.
pub fn count_head_parameters(config: &HeadConfig) -> ParamCounts {
    let (d, k) = (config.repr_dim as u64, config.classes as u64);
    let r = config.effective_rank() as u64;
    let mut blocks = BTreeMap::new();
    blocks.insert("head/mean".to_string(), d * k + k);
    blocks.insert(
        "head/diag".to_string(),
        if config.variant.has_diag() {
            d * k + k
        } else {
            0
        },
    );
    let factor = match config.variant {
        Variant::Full => d * k * r + k * r,
        Variant::Efficient => d * k + k + k * r,
        _ => 0,
    };
    blocks.insert("head/factor".to_string(), factor);
    let total = blocks.values().sum();
    ParamCounts { blocks, total }
}

pub fn count_parameters(model: &ModelSpec) -> ParamCounts {
    let mut counts = count_head_parameters(&model.head);
    let hidden = match model.feature_net {
        FeatureNet::Identity => 0,
        FeatureNet::OneHidden { width } => {
            let input = model.input_dim as u64;
            input * width as u64 + width as u64
        }
    };
    counts.blocks.insert("feature/hidden".to_string(), hidden);
    counts.total = counts.blocks.values().sum();
    counts
}

/// Mean over the dataset of the head's per-example noise covariance.
pub fn average_covariance(state: &TrainState, dataset: &Dataset) -> Result<Array2<f64>> {
    let params = state.selected_params();
    if params.head.variant() == Variant::Homoscedastic {
        return Err(Error::Unsupported(
            "the homoscedastic head has no noise covariance".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(domain_err("empty dataset"));
    }
    let k = params.head.classes();
    let mut total = Array2::<f64>::zeros((k, k));
    for i in 0..dataset.len() {
        let r = state
            .model
            .represent(params, dataset.feature_row(i).view())?;
        total += &resolve_noise_model(&params.head, r.view())?.reconstruct_covariance()?;
    }
    total /= dataset.len() as f64;
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePair {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPairs {
    pub pairs: Vec<CovariancePair>,
    /// Set when more pairs were requested than exist.
    pub clipped: bool,
}

/// The `n` off-diagonal pairs of largest magnitude, signed values kept.
pub fn top_covariance_pairs(sigma: ArrayView2<f64>, n: usize) -> Result<TopPairs> {
    let k = sigma.nrows();
    if sigma.ncols() != k {
        return Err(domain_err("covariance must be square"));
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let (x, y) = (sigma[[a, b]], sigma[[b, a]]);
            if (x - y).abs() > 1e-9 * (1.0 + x.abs().max(y.abs())) {
                return Err(domain_err(format!(
                    "covariance is not symmetric at ({a}, {b})"
                )));
            }
        }
    }
    let available = k * k.saturating_sub(1) / 2;
    let mut pairs: Vec<CovariancePair> = (0..k)
        .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
        .map(|(a, b)| CovariancePair {
            a,
            b,
            value: sigma[[a, b]],
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.value
            .abs()
            .total_cmp(&x.value.abs())
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    pairs.truncate(n.min(available));
    Ok(TopPairs {
        pairs,
        clipped: n > available,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// `counts[i]` is the number of examples at rank `i + 1`.
    pub counts: Vec<u64>,
    pub qualifying: u64,
    /// Qualifying examples whose covariance row had no nonzero
    /// off-diagonal entry (ranked by class index only).
    pub degenerate: u64,
}

impl RankHistogram {
    /// Fraction of qualifying examples at rank `<= max_rank`.
    pub fn mass_up_to(&self, max_rank: usize) -> f64 {
        if self.qualifying == 0 {
            return 0.0;
        }
        self.counts.iter().take(max_rank).sum::<u64>() as f64 / self.qualifying as f64
    }

    /// Expected fraction at rank `<= max_rank` under a uniform rank.
    pub fn uniform_mass_up_to(&self, max_rank: usize) -> f64 {
        max_rank.min(self.counts.len()) as f64 / self.counts.len().max(1) as f64
    }
}

/// Rank (1 = largest) of `|sigma[truth, other]|` among `|sigma[truth, j]|`,
/// `j != truth`, ties by class index; the flag marks an all-zero row.
pub fn covariance_rank(sigma: ArrayView2<f64>, truth: usize, other: usize) -> (usize, bool) {
    let row = sigma.row(truth);
    let target = row[other].abs();
    let rank = 1
        + (0..row.len())
            .filter(|&j| j != truth && j != other)
            .filter(|&j| row[j].abs() > target || (row[j].abs() == target && j < other))
            .count();
    let degenerate = (0..row.len())
        .filter(|&j| j != truth)
        .all(|j| row[j] == 0.0);
    (rank, degenerate)
}

/// Histogram of covariance ranks between the true class and the baseline's
/// wrong prediction, over examples the heteroscedastic model gets right and
/// the baseline gets wrong.
pub fn covariance_rank_histogram(
    het: &TrainState,
    baseline: &TrainState,
    dataset: &Dataset,
    rng: &mut RandomSource,
) -> Result<RankHistogram> {
    let Labels::Multiclass(labels) = &dataset.labels else {
        return Err(domain_err("the rank histogram needs multiclass labels"));
    };
    let het_params = het.selected_params();
    if het_params.head.variant() == Variant::Homoscedastic {
        return Err(Error::Unsupported(
            "the homoscedastic head has no noise covariance".into(),
        ));
    }
    let k = het_params.head.classes();
    if baseline.model.head.classes != k {
        return Err(domain_err("models disagree on the number of classes"));
    }
    let het_probs = het.predict_dataset(dataset, het.model.head.eval_samples, rng)?;
    let base_probs = baseline.predict_dataset(dataset, baseline.model.head.eval_samples, rng)?;
    let mut hist = RankHistogram {
        counts: vec![0; k - 1],
        qualifying: 0,
        degenerate: 0,
    };
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let het_pred = predicted_class(het_probs.row(i));
        let base_pred = predicted_class(base_probs.row(i));
        if het_pred != y || base_pred == y {
            continue;
        }
        let r = het
            .model
            .represent(het_params, dataset.feature_row(i).view())?;
        let sigma = resolve_noise_model(&het_params.head, r.view())?.reconstruct_covariance()?;
        let (rank, degenerate) = covariance_rank(sigma.view(), y, base_pred);
        hist.counts[rank - 1] += 1;
        hist.qualifying += 1;
        hist.degenerate += degenerate as u64;
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// Row-major `K x K` average covariance.
    pub average: Vec<Vec<f64>>,
    pub top_pairs: TopPairs,
    pub rank_histogram: Option<RankHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub eval_samples: usize,
    /// Multiclass only.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub nll: f64,
    pub ece: Option<f64>,
    pub reliability: Option<Vec<ReliabilityBin>>,
    /// Multilabel only.
    pub gap: Option<f64>,
    pub gap_excluded_classes: Option<usize>,
    pub param_counts: ParamCounts,
    pub covariance: Option<CovarianceReport>,
}

impl EvalReport {
    /// Scores a matrix of predictive probabilities against `labels`.
    pub fn from_probs(
        probs: ArrayView2<f64>,
        labels: &Labels,
        eval_samples: usize,
        param_counts: ParamCounts,
    ) -> Result<Self> {
        let mut report = EvalReport {
            examples: probs.nrows(),
            eval_samples,
            top1: None,
            top5: None,
            nll: 0.0,
            ece: None,
            reliability: None,
            gap: None,
            gap_excluded_classes: None,
            param_counts,
            covariance: None,
        };
        match labels {
            Labels::Multiclass(y) => {
                report.top1 = Some(topk_accuracy(probs, y, 1)?);
                report.top5 = Some(topk_accuracy(probs, y, 5.min(probs.ncols()))?);
                report.nll = multiclass_nll(probs, y)?;
                let (conf, correct) = confidences_and_correct(probs, y);
                report.ece = Some(ece_from_confidences(&conf, &correct, DEFAULT_ECE_BINS)?);
                report.reliability = Some(reliability_bins(&conf, &correct, DEFAULT_ECE_BINS)?);
            }
            Labels::Multilabel(y) => {
                report.nll = multilabel_nll(probs, y.view())?;
                let g = gap(probs, y.view())?;
                report.gap = Some(g.gap);
                report.gap_excluded_classes = Some(g.excluded_classes);
            }
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
