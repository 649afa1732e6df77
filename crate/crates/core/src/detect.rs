//! Task-switch and distribution-shift detectors, plus threshold heuristics.
//!
//! The switch detector thresholds the loss of the previous online model on the
//! new support set. The shift detector thresholds the mean negative free
//! energy of the meta model's logits over the support set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{self, LabeledBatch, Matrix, NetConfig, ParamSet};

/// Sign inside the exponent of the free energy.
///
/// `Paper` is `E = -delta * log sum_k exp(-g_k / delta)`;
/// `Literature` is `E = -delta * log sum_k exp(g_k / delta)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergySign {
    #[default]
    Paper,
    Literature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// Switch threshold on the support loss.
    pub ell: f64,
    /// Shift threshold on the mean negative energy.
    pub tau: f64,
    /// Energy temperature.
    pub delta: f64,
    #[serde(default)]
    pub energy_sign: EnergySign,
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ell > 0.0) || self.ell.is_nan() {
            return Err(Error::config(format!("det.ell = {} must be > 0", self.ell)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("det.delta = {} must be > 0", self.delta)));
        }
        if self.tau.is_nan() {
            return Err(Error::config("det.tau is NaN"));
        }
        Ok(())
    }
}

/// Free energy of one logit vector.
pub fn energy(logits: &[f64], delta: f64, sign: EnergySign) -> f64 {
    let s = match sign {
        EnergySign::Paper => -1.0,
        EnergySign::Literature => 1.0,
    };
    let scaled: Vec<f64> = logits.iter().map(|&g| s * g / delta).collect();
    -delta * netcore::log_sum_exp(&scaled)
}

/// Mean of `-E` over the rows of `logits`.
pub fn mean_negative_energy(logits: &Matrix, delta: f64, sign: EnergySign) -> f64 {
    let total: f64 = logits.iter_rows().map(|row| -energy(row, delta, sign)).sum();
    total / logits.rows().max(1) as f64
}

/// Set-level score: mean negative energy of the model's logits over the support inputs.
pub fn support_score(
    support_inputs: &Matrix,
    params: &ParamSet,
    cfg: &NetConfig,
    delta: f64,
    sign: EnergySign,
) -> Result<f64> {
    if support_inputs.rows() == 0 {
        return Err(Error::argument("empty support set"));
    }
    let logits = netcore::forward(params, cfg, support_inputs)?;
    Ok(mean_negative_energy(&logits, delta, sign))
}

/// True when the support set looks shifted away from the pre-training
/// distribution (`score <= tau`).
pub fn ood_classify(
    support_inputs: &Matrix,
    params: &ParamSet,
    cfg: &NetConfig,
    det: &DetectorParams,
) -> Result<bool> {
    let score = support_score(support_inputs, params, cfg, det.delta, det.energy_sign)?;
    Ok(score <= det.tau)
}

/// Switch decision and the support loss it was based on. A loss equal to
/// `ell` counts as no switch.
pub fn switch_detect(
    prev_online: &ParamSet,
    cfg: &NetConfig,
    support: &LabeledBatch,
    ell: f64,
) -> Result<(bool, f64)> {
    let loss = netcore::loss(prev_online, cfg, support)?;
    Ok((loss > ell, loss))
}

/// Threshold from already-computed scores such that at least `coverage` of
/// them lie strictly above it.
///
/// With `n` scores and `k = floor(n (1 - coverage))`, the threshold is the
/// `k`-th smallest score (the lower-interpolated `(1 - coverage)` quantile).
/// When `k = 0`, or when ties at the boundary would push more than `k`
/// scores to or below the threshold, it steps down below the next distinct
/// value.
pub fn tau_from_scores(scores: &[f64], coverage: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::argument("no calibration scores"));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::argument(format!("coverage {coverage} must lie in (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("calibration score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((n as f64) * (1.0 - coverage) + 1e-9).floor() as usize;
    // largest j <= k such that sorted[j - 1] < sorted[j] (or j == 0)
    let mut j = k.min(n);
    while j > 0 && j < n && sorted[j - 1] == sorted[j] {
        j -= 1;
    }
    if j == 0 {
        let min = sorted[0];
        return Ok(min - 1e-9 * min.abs().max(1.0));
    }
    Ok(sorted[j - 1])
}

/// Calibrates `tau` on pre-training supports at the given coverage.
pub fn calibrate_tau(
    pretrain_supports: &[Matrix],
    params: &ParamSet,
    cfg: &NetConfig,
    delta: f64,
    sign: EnergySign,
    coverage: f64,
) -> Result<f64> {
    if pretrain_supports.is_empty() {
        return Err(Error::argument("no pretrain supports to calibrate on"));
    }
    if pretrain_supports.len() < 20 {
        return Err(Error::argument(format!(
            "calibration needs at least 20 supports, got {}",
            pretrain_supports.len()
        )));
    }
    let scores = pretrain_supports
        .iter()
        .map(|s| support_score(s, params, cfg, delta, sign))
        .collect::<Result<Vec<_>>>()?;
    tau_from_scores(&scores, coverage)
}

/// Loss of a uniform predictor over `n_ways` classes.
pub fn default_ell(n_ways: usize) -> f64 {
    assert!(n_ways >= 2, "default_ell needs at least two classes");
    (n_ways as f64).ln()
}
