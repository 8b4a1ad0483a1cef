//! Small statistics helpers: medians and ROC-AUC for the pruning heads.

use crate::model::{KeepRule, Graph, Model};
use crate::synth::{SceneDataset, Split};

/// Median of the values (mean of the central pair for even counts); NaN for
/// empty input.
pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Area under the ROC curve via the rank statistic, with tie handling.
/// Returns NaN when either class is empty.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over ties
    let n = all.len();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in all.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Pruning-head ROC-AUC of reliable vs distractor features over a split.
/// Scores come from a forward pass with an empty teacher keep set, which
/// computes every alpha without running the regressors.
pub fn pruning_auc(
    dataset: &SceneDataset,
    model: &Model,
    split: Split,
) -> (Option<f64>, Option<f64>) {
    let mut pt_pos = Vec::new();
    let mut pt_neg = Vec::new();
    let mut ln_pos = Vec::new();
    let mut ln_neg = Vec::new();
    let cfg = &model.config;
    for &i in &dataset.indices_of(split) {
        let fs = &dataset.features[i];
        let g = Graph::new(&model.store, false);
        let none_pts = vec![false; fs.points.len()];
        let desc = g.constant(fs.point_descriptor_matrix(cfg.descriptor_dim));
        let bg = model
            .points
            .forward_graph(&g, &desc, KeepRule::Teacher(&none_pts), 0)
            .expect("teacher pass cannot fail");
        let alphas = bg.alphas.value();
        for (p, a) in fs.points.iter().zip(alphas.column(0)) {
            if p.reliable {
                pt_pos.push(*a);
            } else {
                pt_neg.push(*a);
            }
        }
        let none_lines = vec![false; fs.lines.len()];
        let tokens = g.constant(fs.line_token_matrix(cfg.descriptor_dim, cfg.line_tokens));
        let bg = model
            .lines
            .forward_graph(&g, &tokens, fs.lines.len(), cfg.line_tokens, KeepRule::Teacher(&none_lines))
            .expect("teacher pass cannot fail");
        let alphas = bg.alphas.value();
        for (l, a) in fs.lines.iter().zip(alphas.column(0)) {
            if l.reliable {
                ln_pos.push(*a);
            } else {
                ln_neg.push(*a);
            }
        }
    }
    let pt = roc_auc(&pt_pos, &pt_neg);
    let ln = roc_auc(&ln_pos, &ln_neg);
    (
        (!pt.is_nan()).then_some(pt),
        (!ln.is_nan()).then_some(ln),
    )
}
