pub mod ensemble;
pub mod eval;
pub mod simulate;
pub mod sweep;
pub mod train;

use hetnoise::analysis::{EvalReport, ReliabilityBin};

pub const RELIABILITY_HEADER: [&str; 6] =
    ["bin", "lower", "upper", "count", "confidence", "accuracy"];

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn reliability_rows(bins: &[ReliabilityBin]) -> Vec<Vec<String>> {
    bins.iter()
        .enumerate()
        .map(|(i, b)| {
            vec![
                i.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                opt(b.confidence),
                opt(b.accuracy),
            ]
        })
        .collect()
}

/// One-line metric summary.
pub(crate) fn summary_line(r: &EvalReport) -> String {
    let mut s = format!("n={} S={} nll={:.4}", r.examples, r.eval_samples, r.nll);
    if let Some(t) = r.top1 {
        s += &format!(" top1={:.4}", t);
    }
    if let Some(t) = r.top5 {
        s += &format!(" top5={:.4}", t);
    }
    if let Some(e) = r.ece {
        s += &format!(" ece={:.4}", e);
    }
    if let Some(g) = r.gap {
        s += &format!(" gap={:.4}", g);
    }
    s
}
