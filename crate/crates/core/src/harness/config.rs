//! Experiment configuration: one JSON document, unknown fields rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::detect::{self, DetectorParams, EnergySign};
use crate::error::{Error, Result};
use crate::learner::{Hyperparams, LearnerMode};
use crate::netcore::NetConfig;
use crate::stream::StreamConfig;
use crate::theory::{self, QuadSettings, TheoryConfig};

/// A number, or `"auto"` for a value derived at run time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum Setting {
    #[default]
    Auto,
    Value(f64),
}

impl Setting {
    pub fn resolve(self, auto: impl FnOnce() -> f64) -> f64 {
        match self {
            Setting::Auto => auto(),
            Setting::Value(v) => v,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Setting::Auto => None,
            Setting::Value(v) => Some(v),
        }
    }
}

impl Serialize for Setting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Setting::Auto => s.serialize_str("auto"),
            Setting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Setting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"auto\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Setting, E> {
                Ok(Setting::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Setting, E> {
                Ok(Setting::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Setting, E> {
                Ok(Setting::Value(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Setting, E> {
                if v == "auto" {
                    Ok(Setting::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSettings {
    /// `auto` is `ln K`.
    #[serde(default)]
    pub ell: Setting,
    /// `auto` is calibrated per seed on pre-training supports.
    #[serde(default)]
    pub tau: Setting,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default)]
    pub energy_sign: EnergySign,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            ell: Setting::Auto,
            tau: Setting::Auto,
            delta: 1.0,
            energy_sign: EnergySign::Paper,
        }
    }
}

impl DetectorSettings {
    pub fn resolve(&self, n_ways: usize, calibrated_tau: impl FnOnce() -> f64) -> DetectorParams {
        DetectorParams {
            ell: self.ell.resolve(|| detect::default_ell(n_ways)),
            tau: self.tau.resolve(calibrated_tau),
            delta: self.delta,
            energy_sign: self.energy_sign,
        }
    }
}

/// `"auto"` or an object of [`DetectorSettings`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorSpec {
    Auto,
    Explicit(DetectorSettings),
}

impl DetectorSpec {
    pub fn settings(&self) -> DetectorSettings {
        match self {
            DetectorSpec::Auto => DetectorSettings::default(),
            DetectorSpec::Explicit(s) => *s,
        }
    }
}

impl Serialize for DetectorSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DetectorSpec::Auto => s.serialize_str("auto"),
            DetectorSpec::Explicit(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for DetectorSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "auto" => Ok(DetectorSpec::Auto),
            v @ Value::Object(_) => serde_json::from_value(v)
                .map(DetectorSpec::Explicit)
                .map_err(de::Error::custom),
            other => Err(de::Error::custom(format!(
                "expected \"auto\" or a detector object, got {other}"
            ))),
        }
    }
}

fn default_coverage() -> f64 {
    0.95
}

fn default_n_supports() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Fraction of pre-training supports that must score above `tau`.
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    #[serde(default = "default_n_supports")]
    pub n_supports: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            coverage: default_coverage(),
            n_supports: default_n_supports(),
        }
    }
}

fn d_rho_target() -> f64 {
    0.9
}
fn d_tol() -> f64 {
    1e-4
}
fn d_lr() -> f64 {
    0.5
}
fn d_adapt() -> usize {
    10
}
fn d_cal() -> usize {
    500
}
fn d_s_grid() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn d_trials() -> usize {
    10_000
}
fn d_regret_steps() -> usize {
    100
}
fn d_horizons() -> Vec<usize> {
    vec![20, 200, 400]
}
fn d_spreads() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn d_quad_seeds() -> usize {
    20
}
fn d_contraction_trials() -> usize {
    50
}

/// Theory-report settings. Level fields accept `"auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySettings {
    /// `auto` is `2 ln K`.
    #[serde(default)]
    pub m_clip: Setting,
    /// `auto` is estimated by a calibration pass.
    #[serde(default)]
    pub ell_m: Setting,
    #[serde(default)]
    pub ell_p: Setting,
    /// `auto` is `ceil(4 M^2 / (ell_p - ell_m)^2) + 1`.
    #[serde(default)]
    pub c_support: Setting,
    #[serde(default = "d_rho_target")]
    pub rho_target: f64,
    #[serde(default = "d_tol")]
    pub comparator_tol: f64,
    #[serde(default = "d_lr")]
    pub comparator_lr: f64,
    #[serde(default = "d_adapt")]
    pub adapt_steps: usize,
    #[serde(default = "d_cal")]
    pub calibration_episodes: usize,
    #[serde(default = "d_s_grid")]
    pub s_grid: Vec<usize>,
    #[serde(default = "d_trials")]
    pub trials: usize,
    /// Length of the neural run whose regret is reported.
    #[serde(default = "d_regret_steps")]
    pub regret_steps: usize,
    #[serde(default = "d_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "d_spreads")]
    pub spreads: Vec<f64>,
    #[serde(default = "d_quad_seeds")]
    pub quad_seeds: usize,
    #[serde(default = "d_contraction_trials")]
    pub contraction_trials: usize,
    #[serde(default)]
    pub quad: QuadSettings,
}

impl Default for TheorySettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all theory settings have defaults")
    }
}

impl TheorySettings {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("m_clip", self.m_clip),
            ("ell_m", self.ell_m),
            ("ell_p", self.ell_p),
            ("c_support", self.c_support),
        ] {
            if let Some(v) = s.value() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::config(format!("theory.{name} = {v} must be finite and >= 0")));
                }
            }
        }
        if let (Some(m), Some(p)) = (self.ell_m.value(), self.ell_p.value()) {
            if m > p {
                return Err(Error::config(format!("theory.ell_m = {m} exceeds theory.ell_p = {p}")));
            }
        }
        if !(self.rho_target > 0.0 && self.rho_target < 1.0) {
            return Err(Error::config("theory.rho_target must lie in (0, 1)"));
        }
        if self.s_grid.is_empty() || self.s_grid.contains(&0) {
            return Err(Error::config("theory.s_grid must be non-empty and positive"));
        }
        if self.trials < 1000 {
            return Err(Error::config("theory.trials must be >= 1000"));
        }
        if self.horizons.len() != 3 || self.horizons.windows(2).any(|w| w[0] >= w[1]) || self.horizons[0] == 0 {
            return Err(Error::config("theory.horizons must be three increasing positive task counts"));
        }
        if self.spreads.len() < 2 || self.spreads.windows(2).any(|w| !(w[0] < w[1])) || self.spreads[0] <= 0.0 {
            return Err(Error::config("theory.spreads must be increasing and positive"));
        }
        if self.quad_seeds == 0 || self.contraction_trials == 0 {
            return Err(Error::config("theory.quad_seeds and theory.contraction_trials must be >= 1"));
        }
        self.quad.validate()?;
        // the parts that do not depend on calibrated levels
        let probe = TheoryConfig {
            m_clip: self.m_clip.value().unwrap_or(1.0),
            ell_m: 0.0,
            ell_p: 0.0,
            c_support: 1.0,
            rho_target: self.rho_target,
            comparator_tol: self.comparator_tol,
            comparator_lr: self.comparator_lr,
            adapt_steps: self.adapt_steps,
            calibration_episodes: self.calibration_episodes,
        };
        probe.validate()
    }

    /// Fills in everything except calibrated levels.
    pub fn base_config(&self, n_ways: usize) -> TheoryConfig {
        let m_clip = self.m_clip.resolve(|| theory::default_m_clip(n_ways));
        TheoryConfig {
            m_clip,
            ell_m: self.ell_m.value().unwrap_or(0.0),
            ell_p: self.ell_p.value().unwrap_or(m_clip),
            c_support: self.c_support.value().unwrap_or(1.0),
            rho_target: self.rho_target,
            comparator_tol: self.comparator_tol,
            comparator_lr: self.comparator_lr,
            adapt_steps: self.adapt_steps,
            calibration_episodes: self.calibration_episodes,
        }
    }

    pub fn levels_are_auto(&self) -> bool {
        self.ell_m == Setting::Auto || self.ell_p == Setting::Auto
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub stream: StreamConfig,
    pub hp: Hyperparams,
    pub det: DetectorSpec,
    pub modes: Vec<LearnerMode>,
    pub n_steps: usize,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySettings>,
    /// Where pre-trained initializations are cached; defaults to `output_dir/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.stream.validate()?;
        self.hp.validate()?;
        if self.net.input_dim != self.stream.input_dim() {
            return Err(Error::config(format!(
                "net.input_dim = {} but stream domains have dimension {}",
                self.net.input_dim,
                self.stream.input_dim()
            )));
        }
        if self.net.n_classes != self.stream.n_ways() {
            return Err(Error::config(format!(
                "net.n_classes = {} but stream domains have n_ways = {}",
                self.net.n_classes,
                self.stream.n_ways()
            )));
        }
        let det = self.det.settings();
        if let Some(ell) = det.ell.value() {
            if !(ell > 0.0) {
                return Err(Error::config(format!("det.ell = {ell} must be > 0")));
            }
        }
        if let Some(tau) = det.tau.value() {
            if tau.is_nan() {
                return Err(Error::config("det.tau is NaN"));
            }
        }
        if !(det.delta > 0.0 && det.delta.is_finite()) {
            return Err(Error::config(format!("det.delta = {} must be > 0", det.delta)));
        }
        if self.modes.is_empty() {
            return Err(Error::config("modes must list at least one learner mode"));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::config(format!("mode `{m}` listed twice")));
            }
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be >= 1"));
        }
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be >= 1"));
        }
        let c = &self.calibration;
        if !(c.coverage > 0.0 && c.coverage < 1.0) {
            return Err(Error::config("calibration.coverage must lie in (0, 1)"));
        }
        if c.n_supports < 20 {
            return Err(Error::config("calibration.n_supports must be >= 20"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be >= 1"));
        }
        if let Some(t) = &self.theory {
            t.validate()?;
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn parse_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, overrides and validates a config file.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_raw(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the field at a dotted path (`stream.p_stay`, `stream.domains.1.sample_noise_sigma`).
/// A string `"auto"` along the path is replaced by an empty object.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override path `{path}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if matches!(node, Value::String(s) if s == "auto") {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), parse_raw(raw));
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| Error::config(format!("override `{path}`: no field `{part}`")))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(format!("override `{path}`: `{part}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::config(format!("override `{path}`: index {idx} out of range for {len} items"))
                })?;
                if last {
                    *slot = parse_raw(raw);
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::config(format!(
                    "override `{path}`: `{part}` is not inside an object or list"
                )))
            }
        };
    }
    unreachable!("loop returns on the last path segment")
}
