//! Evaluation metrics (MAE and F-measure) and per-setting report assembly.

use std::collections::BTreeMap;

use crate::error::{AmsnError, Result};
use crate::tensor::{Element, Tensor};

/// Binarization rule applied to a saliency map before precision/recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// tau = min(2 * mean(S), 1), the dominant convention for mean F-measure.
    AdaptiveTwiceMean,
    Fixed(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::AdaptiveTwiceMean
    }
}

impl ThresholdRule {
    pub fn parse(s: &str) -> Option<ThresholdRule> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Some(ThresholdRule::AdaptiveTwiceMean);
        }
        s.parse::<f64>().ok().map(ThresholdRule::Fixed)
    }

    fn threshold<E: Element>(self, s: &Tensor<E>) -> f64 {
        match self {
            ThresholdRule::AdaptiveTwiceMean => {
                let mean: f64 =
                    s.data().iter().map(|v| v.to_f64()).sum::<f64>() / s.numel() as f64;
                (2.0 * mean).min(1.0)
            }
            ThresholdRule::Fixed(v) => v,
        }
    }
}

/// Mean absolute error between a saliency map and the ground truth, both in
/// [0,1] and of identical shape.
pub fn mae<E: Element>(s: &Tensor<E>, y: &Tensor<E>) -> Result<f64> {
    if s.shape() != y.shape() {
        return Err(AmsnError::Eval(format!(
            "mae shape mismatch: {:?} vs {:?}",
            s.shape(),
            y.shape()
        )));
    }
    let sum: f64 = s
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
        .sum();
    Ok(sum / s.numel() as f64)
}

/// F-measure with omega^2 weighting over an adaptively binarized map:
/// (1+w2) * P * R / (w2 * P + R). Degenerate cases (empty prediction or
/// empty ground truth) return 0.
pub fn f_beta<E: Element>(s: &Tensor<E>, y: &Tensor<E>, omega2: f64, rule: ThresholdRule) -> Result<f64> {
    if s.shape() != y.shape() {
        return Err(AmsnError::Eval(format!(
            "f_beta shape mismatch: {:?} vs {:?}",
            s.shape(),
            y.shape()
        )));
    }
    let tau = rule.threshold(s);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (sv, yv) in s.data().iter().zip(y.data()) {
        let pred = sv.to_f64() >= tau;
        let truth = yv.to_f64() >= 0.5;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 || tp + fn_ == 0 || tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok((1.0 + omega2) * precision * recall / (omega2 * precision + recall))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingStats {
    pub setting: String,
    pub count: usize,
    pub mae: f64,
    pub fbeta: f64,
}

/// Per-setting evaluation aggregates. Settings that received no samples are
/// omitted (their count is zero).
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<SettingStats>,
}

/// Canonical row order for reports.
const SETTING_ORDER: [&str; 8] = ["RGB", "D", "T", "RGB-D", "RGB-T", "D-T", "RGB-D-T", "ALL"];

/// Order-independent accumulator of per-sample metric pairs.
#[derive(Debug, Default)]
pub struct EvalAccumulator {
    sums: BTreeMap<String, (usize, f64, f64)>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, setting: &str, mae: f64, fbeta: f64) {
        let e = self.sums.entry(setting.to_string()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += mae;
        e.2 += fbeta;
    }

    pub fn finish(self) -> EvalReport {
        let mut rows = Vec::new();
        let mut remaining = self.sums;
        for name in SETTING_ORDER {
            if let Some((count, mae_sum, f_sum)) = remaining.remove(name) {
                rows.push(SettingStats {
                    setting: name.to_string(),
                    count,
                    mae: mae_sum / count as f64,
                    fbeta: f_sum / count as f64,
                });
            }
        }
        // Anything non-canonical (not expected in practice) goes last, sorted.
        for (name, (count, mae_sum, f_sum)) in remaining {
            rows.push(SettingStats {
                setting: name,
                count,
                mae: mae_sum / count as f64,
                fbeta: f_sum / count as f64,
            });
        }
        EvalReport { rows }
    }
}

impl EvalReport {
    /// Fixed-header delimiter-separated table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,count,MAE,Fbeta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.setting, r.count, r.mae, r.fbeta
            ));
        }
        out
    }

    pub fn row(&self, setting: &str) -> Option<&SettingStats> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}
