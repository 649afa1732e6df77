//! MAML pre-training and the online learners.
//!
//! The online learner keeps two parameter sets: the meta model `meta` that new
//! tasks adapt from, and the online model `online` carried across steps of
//! the same task. All meta gradients are first order: the query gradient is
//! evaluated at the adapted parameters and applied to the meta parameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detect::{self, DetectorParams};
use crate::error::{Error, Result};
use crate::netcore::{self, LabeledBatch, NetConfig, ParamSet};
use crate::rng::Rng64;
use crate::stream::{self, DomainSpec, Episode, EpisodeStream, StreamConfig};

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Adaptation step size.
    pub alpha1: f64,
    /// Meta step size.
    pub alpha2: f64,
    pub inner_steps_pretrain: usize,
    /// Total number of pre-training task draws.
    pub pretrain_tasks: usize,
    pub pretrain_meta_batch: usize,
    /// Meta step size during pre-training; falls back to `alpha2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_alpha2: Option<f64>,
    /// Loss-jump threshold of the successive-loss switch detector.
    #[serde(default = "default_gamma")]
    pub cmaml_gamma: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("hp.{name} = {v} must be finite and > 0")))
            }
        };
        positive("alpha1", self.alpha1)?;
        positive("alpha2", self.alpha2)?;
        if let Some(lr) = self.pretrain_alpha2 {
            positive("pretrain_alpha2", lr)?;
        }
        if self.inner_steps_pretrain == 0 {
            return Err(Error::config("hp.inner_steps_pretrain must be >= 1"));
        }
        if self.pretrain_meta_batch == 0 {
            return Err(Error::config("hp.pretrain_meta_batch must be >= 1"));
        }
        if self.cmaml_gamma.is_nan() {
            return Err(Error::config("hp.cmaml_gamma is NaN"));
        }
        Ok(())
    }

    pub fn pretrain_iterations(&self) -> usize {
        self.pretrain_tasks.div_ceil(self.pretrain_meta_batch.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerMode {
    Leeds,
    LeedsNoDa,
    MamlReset,
    MetaOgd,
    CmamlDetect,
}

impl LearnerMode {
    pub const ALL: [LearnerMode; 5] = [
        LearnerMode::Leeds,
        LearnerMode::LeedsNoDa,
        LearnerMode::MamlReset,
        LearnerMode::MetaOgd,
        LearnerMode::CmamlDetect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerMode::Leeds => "leeds",
            LearnerMode::LeedsNoDa => "leeds_no_da",
            LearnerMode::MamlReset => "maml_reset",
            LearnerMode::MetaOgd => "meta_ogd",
            LearnerMode::CmamlDetect => "cmaml_detect",
        }
    }
}

impl fmt::Display for LearnerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LearnerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown learner mode `{s}`")))
    }
}

/// Which update pattern an episode went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Adapted from the meta model, then updated the meta model.
    Switch,
    /// Continued the online model; meta model untouched.
    NoSwitchInd,
    /// Continued the online model and updated the meta model.
    NoSwitchOod,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Switch => "switch",
            Branch::NoSwitchInd => "no_switch_ind",
            Branch::NoSwitchOod => "no_switch_ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub meta: ParamSet,
    /// `None` until the first episode has been processed.
    pub online: Option<ParamSet>,
    pub det: DetectorParams,
    pub mode: LearnerMode,
    pub last_support_loss: Option<f64>,
}

impl LearnerState {
    pub fn new(meta: ParamSet, det: DetectorParams, mode: LearnerMode) -> Self {
        Self {
            meta,
            online: None,
            det,
            mode,
            last_support_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub step: u64,
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub detected_switch: bool,
    pub detected_ood: bool,
    pub truth_switched: bool,
    pub truth_domain_id: u32,
    pub truth_is_pretrain: bool,
    pub task_uid: u64,
    /// Loss on the support set of the model the step started from.
    pub support_loss: f64,
    pub branch: Branch,
}

/// Where switch and shift decisions come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decisions {
    #[default]
    Detected,
    /// Ground truth replaces both detectors (LEEDS control flow only).
    Oracle,
}

fn tag(branch: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("{branch} branch: {context}"),
        },
        other => other,
    }
}

/// `theta - alpha1 * grad L(theta; S)` together with `L(theta; S)`.
fn adapt(params: &ParamSet, net: &NetConfig, support: &LabeledBatch, lr: f64) -> Result<(ParamSet, f64)> {
    let (loss, grad) = netcore::loss_and_grad(params, net, support)?;
    Ok((netcore::sgd_step(params, &grad, lr)?, loss))
}

/// First-order meta step: adapt on the support set, then move the meta
/// parameters along the query gradient taken at the adapted point.
fn meta_update(
    meta: &ParamSet,
    adapted: &ParamSet,
    net: &NetConfig,
    query: &LabeledBatch,
    lr: f64,
) -> Result<ParamSet> {
    let (_, grad) = netcore::loss_and_grad(adapted, net, query)?;
    netcore::sgd_step(meta, &grad, lr)
}

struct Step {
    meta: ParamSet,
    online: ParamSet,
    switched: bool,
    ood: bool,
    support_loss: f64,
    branch: Branch,
}

/// Adapt from the meta model; the meta model is updated when `update_meta`.
fn switch_branch(
    meta: &ParamSet,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
    update_meta: bool,
) -> Result<(ParamSet, ParamSet, f64)> {
    let (adapted, support_loss) = adapt(meta, net, &ep.batch.support, hp.alpha1)?;
    let meta = if update_meta {
        meta_update(meta, &adapted, net, &ep.batch.query, hp.alpha2)?
    } else {
        meta.clone()
    };
    Ok((meta, adapted, support_loss))
}

fn leeds_like(
    state: &LearnerState,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
    decisions: Decisions,
) -> Result<Step> {
    let Some(prev) = &state.online else {
        let (meta, online, support_loss) =
            switch_branch(&state.meta, ep, net, hp, true).map_err(tag("switch"))?;
        return Ok(Step {
            meta,
            online,
            switched: true,
            ood: false,
            support_loss,
            branch: Branch::Switch,
        });
    };

    let (prev_loss, prev_grad) =
        netcore::loss_and_grad(prev, net, &ep.batch.support).map_err(tag("detect"))?;
    let switched = match (decisions, state.mode) {
        (Decisions::Oracle, _) => ep.truth_switched,
        (_, LearnerMode::CmamlDetect) => match state.last_support_loss {
            Some(last) => prev_loss - last > hp.cmaml_gamma,
            None => true,
        },
        _ => prev_loss > state.det.ell,
    };

    if switched {
        let (meta, online, _) =
            switch_branch(&state.meta, ep, net, hp, true).map_err(tag("switch"))?;
        return Ok(Step {
            meta,
            online,
            switched: true,
            ood: false,
            support_loss: prev_loss,
            branch: Branch::Switch,
        });
    }

    let online = netcore::sgd_step(prev, &prev_grad, hp.alpha1).map_err(tag("no-switch"))?;
    let ood = match (decisions, state.mode) {
        (Decisions::Oracle, _) => !ep.truth_is_pretrain,
        (_, LearnerMode::Leeds) => {
            detect::ood_classify(&ep.batch.support.inputs, &state.meta, net, &state.det)?
        }
        _ => false,
    };
    if ood {
        let (adapted, _) = adapt(&state.meta, net, &ep.batch.support, hp.alpha1)
            .map_err(tag("no-switch ood"))?;
        let meta = meta_update(&state.meta, &adapted, net, &ep.batch.query, hp.alpha2)
            .map_err(tag("no-switch ood"))?;
        Ok(Step {
            meta,
            online,
            switched: false,
            ood: true,
            support_loss: prev_loss,
            branch: Branch::NoSwitchOod,
        })
    } else {
        Ok(Step {
            meta: state.meta.clone(),
            online,
            switched: false,
            ood: false,
            support_loss: prev_loss,
            branch: Branch::NoSwitchInd,
        })
    }
}

fn reset_like(state: &LearnerState, ep: &Episode, net: &NetConfig, hp: &Hyperparams) -> Result<Step> {
    let update_meta = state.mode == LearnerMode::MetaOgd;
    let (meta, online, support_loss) =
        switch_branch(&state.meta, ep, net, hp, update_meta).map_err(tag("reset"))?;
    Ok(Step {
        meta,
        online,
        switched: true,
        ood: false,
        support_loss,
        branch: Branch::Switch,
    })
}

fn finish(state: &LearnerState, ep: &Episode, net: &NetConfig, step: Step) -> Result<(LearnerState, EpisodeOutcome)> {
    let (query_loss, query_accuracy) = netcore::evaluate(&step.online, net, &ep.batch.query)?;
    let outcome = EpisodeOutcome {
        step: ep.step_index,
        query_loss,
        query_accuracy,
        detected_switch: step.switched,
        detected_ood: step.ood,
        truth_switched: ep.truth_switched,
        truth_domain_id: ep.truth_domain_id,
        truth_is_pretrain: ep.truth_is_pretrain,
        task_uid: ep.task_uid,
        support_loss: step.support_loss,
        branch: step.branch,
    };
    let next = LearnerState {
        meta: step.meta,
        online: Some(step.online),
        det: state.det,
        mode: state.mode,
        last_support_loss: Some(step.support_loss),
    };
    Ok((next, outcome))
}

/// One step of the detection-driven learner for any LEEDS-family mode.
///
/// * no switch: continue the online model one step on the support set; if the
///   support set is flagged as shifted, also take a meta step;
/// * switch (always at the first step): adapt from the meta model and take a
///   meta step regardless of the shift detector.
pub fn leeds_step(
    state: &LearnerState,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
) -> Result<(LearnerState, EpisodeOutcome)> {
    leeds_step_with(state, ep, net, hp, Decisions::Detected)
}

pub fn leeds_step_with(
    state: &LearnerState,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
    decisions: Decisions,
) -> Result<(LearnerState, EpisodeOutcome)> {
    let step = leeds_like(state, ep, net, hp, decisions)?;
    finish(state, ep, net, step)
}

/// Dispatches on `state.mode`.
pub fn baseline_step(
    state: &LearnerState,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
) -> Result<(LearnerState, EpisodeOutcome)> {
    step_with(state, ep, net, hp, Decisions::Detected)
}

pub fn step_with(
    state: &LearnerState,
    ep: &Episode,
    net: &NetConfig,
    hp: &Hyperparams,
    decisions: Decisions,
) -> Result<(LearnerState, EpisodeOutcome)> {
    let step = match state.mode {
        LearnerMode::Leeds | LearnerMode::LeedsNoDa | LearnerMode::CmamlDetect => {
            leeds_like(state, ep, net, hp, decisions)?
        }
        LearnerMode::MamlReset | LearnerMode::MetaOgd => reset_like(state, ep, net, hp)?,
    };
    finish(state, ep, net, step)
}

/// First-order MAML on tasks from one pre-training domain.
pub fn pretrain_maml(
    init: ParamSet,
    domain: &DomainSpec,
    net: &NetConfig,
    hp: &Hyperparams,
    n_shot: usize,
    n_query: usize,
    rng: &mut Rng64,
) -> Result<ParamSet> {
    if !domain.is_pretrain {
        return Err(Error::argument(format!(
            "domain {} is not a pre-training domain",
            domain.domain_id
        )));
    }
    let meta_lr = hp.pretrain_alpha2.unwrap_or(hp.alpha2);
    let mut theta = init;
    let mut remaining = hp.pretrain_tasks;
    let mut iteration = 0;
    while remaining > 0 {
        let batch = remaining.min(hp.pretrain_meta_batch);
        remaining -= batch;
        let mut acc = vec![0.0; theta.len()];
        for _ in 0..batch {
            let task = stream::sample_task(domain, 0, rng)?;
            let data = stream::sample_batch(&task, n_shot, n_query, domain.sample_noise_sigma, rng)?;
            let mut phi = theta.clone();
            for _ in 0..hp.inner_steps_pretrain {
                phi = adapt(&phi, net, &data.support, hp.alpha1)
                    .map_err(|e| diverged(iteration, e))?
                    .0;
            }
            let (qloss, grad) =
                netcore::loss_and_grad(&phi, net, &data.query).map_err(|e| diverged(iteration, e))?;
            if !(qloss.is_finite() && qloss <= 1e3) {
                return Err(Error::Training {
                    iteration,
                    detail: format!("query loss {qloss}"),
                });
            }
            acc.iter_mut().zip(grad.values()).for_each(|(a, g)| *a += g);
        }
        let mean = theta.with_values(acc.into_iter().map(|g| g / batch as f64).collect())?;
        theta = netcore::sgd_step(&theta, &mean, meta_lr).map_err(|e| diverged(iteration, e))?;
        iteration += 1;
    }
    Ok(theta)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric { context } => Error::Training {
            iteration,
            detail: context,
        },
        other => other,
    }
}

/// Parameters a ground-truth task started adapting from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStart {
    pub step: u64,
    pub task_uid: u64,
    pub domain_id: u32,
    pub start_params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: LearnerMode,
    pub outcomes: Vec<EpisodeOutcome>,
    pub task_starts: Vec<TaskStart>,
    /// Full episodes, kept only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<Vec<Episode>>,
    pub final_meta: ParamSet,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub decisions: Decisions,
    pub keep_episodes: bool,
}

/// Receives outcomes as they are produced.
pub trait OutcomeSink {
    fn record(&mut self, outcome: &EpisodeOutcome) -> Result<()>;
}

impl OutcomeSink for Vec<EpisodeOutcome> {
    fn record(&mut self, outcome: &EpisodeOutcome) -> Result<()> {
        self.push(outcome.clone());
        Ok(())
    }
}

/// Advances the stream and the learner together for `n_steps` episodes.
pub fn run_stream(
    initial: LearnerState,
    scfg: &StreamConfig,
    n_steps: usize,
    net: &NetConfig,
    hp: &Hyperparams,
    opts: RunOptions,
    mut sink: Option<&mut dyn OutcomeSink>,
) -> Result<RunRecord> {
    if n_steps == 0 {
        return Err(Error::argument("n_steps must be >= 1"));
    }
    let mut stream = EpisodeStream::new(scfg.clone())?;
    let mut state = initial;
    let mut outcomes = Vec::with_capacity(n_steps);
    let mut task_starts = Vec::new();
    let mut episodes = opts.keep_episodes.then(|| Vec::with_capacity(n_steps));
    for _ in 0..n_steps {
        let ep = stream.next_episode()?;
        let (next, outcome) = step_with(&state, &ep, net, hp, opts.decisions)?;
        if ep.truth_switched {
            let start_params = match (&state.online, outcome.branch) {
                (Some(online), Branch::NoSwitchInd | Branch::NoSwitchOod) => online.clone(),
                _ => state.meta.clone(),
            };
            task_starts.push(TaskStart {
                step: ep.step_index,
                task_uid: ep.task_uid,
                domain_id: ep.truth_domain_id,
                start_params,
            });
        }
        if let Some(sink) = sink.as_deref_mut() {
            sink.record(&outcome)?;
        }
        outcomes.push(outcome);
        if let Some(eps) = episodes.as_mut() {
            eps.push(ep);
        }
        state = next;
    }
    Ok(RunRecord {
        mode: state.mode,
        outcomes,
        task_starts,
        episodes,
        final_meta: state.meta,
    })
}
