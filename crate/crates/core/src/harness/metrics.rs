//! Per-run metrics and their aggregation over seeds.

use serde::{Deserialize, Serialize};

use crate::learner::{EpisodeOutcome, LearnerMode};

/// Switch-detection quality against ground truth, step 0 excluded.
/// Undefined ratios are `NaN` and come with a warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn precision_recall(outcomes: &[EpisodeOutcome]) -> PrecisionRecall {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for o in outcomes.iter().skip(1) {
        match (o.detected_switch, o.truth_switched) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let mut warnings = Vec::new();
    let precision = if tp + fp == 0 {
        warnings.push("no detected switches after step 0: precision undefined".to_string());
        f64::NAN
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        warnings.push("no true switches after step 0: recall undefined".to_string());
        f64::NAN
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    PrecisionRecall {
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        warnings,
    }
}

fn mean_where(outcomes: &[EpisodeOutcome], keep: impl Fn(&EpisodeOutcome) -> bool) -> f64 {
    let (sum, n) = outcomes
        .iter()
        .filter(|o| keep(o))
        .fold((0.0, 0usize), |(s, n), o| (s + o.query_accuracy, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_steps: usize,
    pub overall_acc: f64,
    pub pretrain_acc: f64,
    /// `(domain_id, accuracy)` for every shift domain, `NaN` if never visited.
    pub ood_acc: Vec<(u32, f64)>,
    pub precision: f64,
    pub recall: f64,
}

pub fn run_metrics(outcomes: &[EpisodeOutcome], shift_domains: &[u32]) -> RunMetrics {
    let pr = precision_recall(outcomes);
    RunMetrics {
        n_steps: outcomes.len(),
        overall_acc: mean_where(outcomes, |_| true),
        pretrain_acc: mean_where(outcomes, |o| o.truth_is_pretrain),
        ood_acc: shift_domains
            .iter()
            .map(|&d| (d, mean_where(outcomes, |o| o.truth_domain_id == d)))
            .collect(),
        precision: pr.precision,
        recall: pr.recall,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: LearnerMode,
    pub seed_count: usize,
    pub overall_acc_mean: f64,
    pub overall_acc_std: f64,
    pub pretrain_acc_mean: f64,
    pub ood_acc_mean: Vec<(u32, f64)>,
    pub precision_mean: f64,
    pub recall_mean: f64,
    pub per_seed: Vec<RunMetrics>,
}

impl ModeSummary {
    pub fn ood_acc(&self, domain_id: u32) -> Option<f64> {
        self.ood_acc_mean.iter().find(|(d, _)| *d == domain_id).map(|(_, a)| *a)
    }

    /// Mean accuracy over every shift-domain column.
    pub fn ood_acc_overall(&self) -> f64 {
        mean(&self.ood_acc_mean.iter().map(|(_, a)| *a).collect::<Vec<_>>())
    }
}

/// Aggregates per-seed metrics with arithmetic means. `per_seed` must be non-empty.
pub fn summarize(mode: LearnerMode, per_seed: Vec<RunMetrics>) -> ModeSummary {
    assert!(!per_seed.is_empty(), "summarize needs at least one seed");
    let col = |f: &dyn Fn(&RunMetrics) -> f64| per_seed.iter().map(f).collect::<Vec<f64>>();
    let overall = col(&|m| m.overall_acc);
    let ood_acc_mean = per_seed[0]
        .ood_acc
        .iter()
        .enumerate()
        .map(|(i, (d, _))| (*d, mean(&col(&|m| m.ood_acc[i].1))))
        .collect();
    ModeSummary {
        mode,
        seed_count: per_seed.len(),
        overall_acc_mean: mean(&overall),
        overall_acc_std: std_dev(&overall),
        pretrain_acc_mean: mean(&col(&|m| m.pretrain_acc)),
        ood_acc_mean,
        precision_mean: mean(&col(&|m| m.precision)),
        recall_mean: mean(&col(&|m| m.recall)),
        per_seed,
    }
}
