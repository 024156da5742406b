//! Ranking metrics and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk tie groups in ascending score; all counts stay exact integers or halves
    let mut u = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u += (pos * neg_below) as f64 + 0.5 * (pos * neg) as f64;
        neg_below += neg;
        i = j;
    }
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAuc {
    pub mean: f64,
    /// `None` for questions with a single class in the evaluation set.
    pub per_question: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Unweighted mean of per-question AUCs; `scores[q][i]`, `labels[q][i]`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroAuc> {
    if scores.len() != labels.len() {
        return Err(contract("score and label question counts differ"));
    }
    let mut per_question = Vec::with_capacity(scores.len());
    let mut excluded = Vec::new();
    for (q, (s, y)) in scores.iter().zip(labels).enumerate() {
        match auc(s, y) {
            Ok(a) => per_question.push(Some(a)),
            Err(Error::UndefinedMetric(_)) => {
                excluded.push(q);
                per_question.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let kept: Vec<f64> = per_question.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::UndefinedMetric("every question has a single class".into()));
    }
    if !excluded.is_empty() {
        log::warn!("{} single-class questions left out of the macro AUC", excluded.len());
    }
    Ok(MacroAuc {
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        per_question,
        excluded,
    })
}

/// Mean and sample standard deviation over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}
