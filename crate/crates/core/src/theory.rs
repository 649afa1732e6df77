//! Regret accounting and empirical checks of the assumptions behind the
//! task-averaged regret guarantee.
//!
//! Exact statements are checked on quadratic task families, where the
//! minimizer of every task is known in closed form and gradient descent is a
//! linear map. For the neural learner the same quantities are estimated and
//! reported rather than asserted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Hyperparams, RunRecord};
use crate::netcore::{self, LabeledBatch, NetConfig, ParamSet};
use crate::rng::Rng64;
use crate::stream::{self, StreamConfig, TaskSpec};

fn default_comparator_lr() -> f64 {
    0.5
}

fn default_adapt_steps() -> usize {
    10
}

fn default_calibration_episodes() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Upper bound `M` applied to per-sample losses in detection experiments.
    pub m_clip: f64,
    /// High quantile of same-task losses after adaptation.
    pub ell_m: f64,
    /// Low quantile of cross-task losses.
    pub ell_p: f64,
    /// Support-size constant: `S = c log R`.
    pub c_support: f64,
    pub rho_target: f64,
    /// Gradient-norm stopping tolerance for comparator fits.
    pub comparator_tol: f64,
    #[serde(default = "default_comparator_lr")]
    pub comparator_lr: f64,
    /// SGD steps a learner takes on a task before its loss is measured.
    #[serde(default = "default_adapt_steps")]
    pub adapt_steps: usize,
    #[serde(default = "default_calibration_episodes")]
    pub calibration_episodes: usize,
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_clip > 0.0 && self.m_clip.is_finite()) {
            return Err(Error::config(format!("theory.m_clip = {} must be > 0", self.m_clip)));
        }
        if !(0.0 <= self.ell_m && self.ell_m <= self.ell_p && self.ell_p <= self.m_clip) {
            return Err(Error::config(format!(
                "theory levels must satisfy 0 <= ell_m ({}) <= ell_p ({}) <= m_clip ({})",
                self.ell_m, self.ell_p, self.m_clip
            )));
        }
        if !(self.c_support > 0.0 && self.c_support.is_finite()) {
            return Err(Error::config("theory.c_support must be > 0"));
        }
        if !(self.rho_target > 0.0 && self.rho_target < 1.0) {
            return Err(Error::config("theory.rho_target must lie in (0, 1)"));
        }
        if !(self.comparator_tol > 0.0) {
            return Err(Error::config("theory.comparator_tol must be > 0"));
        }
        if !(self.comparator_lr > 0.0 && self.comparator_lr.is_finite()) {
            return Err(Error::config("theory.comparator_lr must be > 0"));
        }
        if self.calibration_episodes < 20 {
            return Err(Error::config("theory.calibration_episodes must be >= 20"));
        }
        Ok(())
    }

    /// Midpoint threshold between the two loss levels.
    pub fn threshold(&self) -> f64 {
        0.5 * (self.ell_m + self.ell_p)
    }
}

/// `2 ln K`.
pub fn default_m_clip(n_ways: usize) -> f64 {
    2.0 * (n_ways as f64).ln()
}

/// `ceil(4 M^2 / (ell_p - ell_m)^2) + 1`, which exceeds `4 M^2 / (ell_p - ell_m)^2`.
pub fn default_c_support(m_clip: f64, ell_m: f64, ell_p: f64) -> Result<f64> {
    let gap = ell_p - ell_m;
    if !(gap > 0.0) {
        return Err(Error::Regime(format!(
            "ell_m = {ell_m:.4} is not below ell_p = {ell_p:.4}"
        )));
    }
    Ok((4.0 * m_clip * m_clip / (gap * gap)).ceil() + 1.0)
}

/// `ceil(c ln R)`, at least 1.
pub fn support_size(c: f64, total_steps: usize) -> usize {
    let r = (total_steps.max(2)) as f64;
    ((c * r.ln()).ceil() as usize).max(1)
}

/// `exp(-S (ell_p - ell_m)^2 / (2 M^2))`.
pub fn hoeffding_bound(s: usize, cfg: &TheoryConfig) -> f64 {
    let gap = cfg.ell_p - cfg.ell_m;
    (-(s as f64) * gap * gap / (2.0 * cfg.m_clip * cfg.m_clip)).exp()
}

// ---------------------------------------------------------------------------
// Quadratic tasks

/// `f(phi) = 1/2 sum_i curvature_i (phi_i - center_i)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadTask {
    pub center: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl QuadTask {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn loss(&self, phi: &[f64]) -> f64 {
        0.5 * phi
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((p, c), l)| l * (p - c) * (p - c))
            .sum::<f64>()
    }

    pub fn grad(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((p, c), l)| l * (p - c))
            .collect()
    }

    /// One gradient step: the adaptation map `U`.
    pub fn gd_step(&self, phi: &[f64], alpha: f64) -> Vec<f64> {
        phi.iter()
            .zip(self.grad(phi))
            .map(|(p, g)| p - alpha * g)
            .collect()
    }

    /// The minimizer, which is also the fixed point of `U`.
    pub fn comparator(&self) -> Vec<f64> {
        self.center.clone()
    }

    /// Loss of one noisy observation: the center is displaced by `N(0, noise^2 I)`.
    pub fn sample_loss(&self, phi: &[f64], noise: f64, rng: &mut Rng64) -> f64 {
        0.5 * phi
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((p, c), l)| {
                let d = p - c - noise * rng.normal();
                l * d * d
            })
            .sum::<f64>()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A sequence of quadratic tasks played one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadTaskFamily {
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub curvatures: Vec<Vec<f64>>,
    pub curvature_lo: f64,
    pub curvature_hi: f64,
    pub alpha: f64,
    pub k_per_task: Vec<usize>,
    /// Initial meta parameters.
    pub theta0: Vec<f64>,
}

/// Recipe for [`QuadTaskFamily::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub dim: usize,
    pub n_tasks: usize,
    /// Mean of the task centers.
    pub center_mean: Vec<f64>,
    /// Per-coordinate standard deviation of the centers around their mean.
    pub spread: f64,
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl QuadTaskFamily {
    pub fn generate(spec: &FamilySpec, rng: &mut Rng64) -> Result<Self> {
        if spec.center_mean.len() != spec.dim {
            return Err(Error::argument("center_mean length differs from dim"));
        }
        if spec.k_min == 0 || spec.k_max < spec.k_min {
            return Err(Error::argument("need 1 <= k_min <= k_max"));
        }
        let mut centers = Vec::with_capacity(spec.n_tasks);
        let mut curvatures = Vec::with_capacity(spec.n_tasks);
        let mut ks = Vec::with_capacity(spec.n_tasks);
        for _ in 0..spec.n_tasks {
            centers.push(
                spec.center_mean
                    .iter()
                    .map(|m| m + spec.spread * rng.normal())
                    .collect(),
            );
            curvatures.push((0..spec.dim).map(|_| rng.uniform_range(spec.mu, spec.beta)).collect());
            ks.push(spec.k_min + rng.index(spec.k_max - spec.k_min + 1));
        }
        let fam = Self {
            dim: spec.dim,
            centers,
            curvatures,
            curvature_lo: spec.mu,
            curvature_hi: spec.beta,
            alpha: spec.alpha,
            k_per_task: ks,
            theta0: vec![0.0; spec.dim],
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.curvature_lo > 0.0 && self.curvature_lo <= self.curvature_hi) {
            return Err(Error::argument("need 0 < mu <= beta"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0 / self.curvature_hi) {
            return Err(Error::argument(format!(
                "alpha = {} outside (0, 2/beta]",
                self.alpha
            )));
        }
        let t = self.centers.len();
        if t == 0 || self.curvatures.len() != t || self.k_per_task.len() != t {
            return Err(Error::argument("centers, curvatures and k_per_task must align and be non-empty"));
        }
        if self.k_per_task.contains(&0) {
            return Err(Error::argument("every task needs at least one step"));
        }
        let dims_ok = self.theta0.len() == self.dim
            && self.centers.iter().all(|c| c.len() == self.dim)
            && self.curvatures.iter().all(|c| c.len() == self.dim);
        if !dims_ok {
            return Err(Error::argument("dimension mismatch in quadratic family"));
        }
        let in_range = self
            .curvatures
            .iter()
            .flatten()
            .all(|&l| l >= self.curvature_lo && l <= self.curvature_hi);
        if !in_range {
            return Err(Error::argument("curvature outside [mu, beta]"));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.centers.len()
    }

    pub fn total_steps(&self) -> usize {
        self.k_per_task.iter().sum()
    }

    pub fn task(&self, t: usize) -> QuadTask {
        QuadTask {
            center: self.centers[t].clone(),
            curvature: self.curvatures[t].clone(),
        }
    }

    /// The first `n` tasks.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.n_tasks());
        Self {
            centers: self.centers[..n].to_vec(),
            curvatures: self.curvatures[..n].to_vec(),
            k_per_task: self.k_per_task[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// `max(|1 - alpha mu|, |1 - alpha beta|)`.
pub fn closed_form_rho(mu: f64, beta: f64, alpha: f64) -> f64 {
    (1.0 - alpha * mu).abs().max((1.0 - alpha * beta).abs())
}

/// Empirical Lipschitz constant of the gradient-descent map on random diagonal
/// quadratics whose spectrum spans `[mu, beta]`, next to the closed form.
pub fn contraction_ratio(
    mu: f64,
    beta: f64,
    alpha: f64,
    trials: usize,
    rng: &mut Rng64,
) -> Result<(f64, f64)> {
    if !(mu > 0.0 && mu <= beta && alpha > 0.0) {
        return Err(Error::argument("need 0 < mu <= beta and alpha > 0"));
    }
    let mut empirical: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let dim = 2 + rng.index(7);
        let mut curvature: Vec<f64> = (0..dim).map(|_| rng.uniform_range(mu, beta)).collect();
        curvature[0] = mu;
        curvature[1] = beta;
        let task = QuadTask {
            center: (0..dim).map(|_| rng.normal()).collect(),
            curvature,
        };
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for i in 0..dim {
            let a: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let mut b = a.clone();
            b[i] += rng.uniform_range(0.5, 2.0);
            pairs.push((a, b));
        }
        for _ in 0..4 {
            pairs.push((
                (0..dim).map(|_| rng.normal()).collect(),
                (0..dim).map(|_| rng.normal()).collect(),
            ));
        }
        for (a, b) in pairs {
            let ua = task.gd_step(&a, alpha);
            let ub = task.gd_step(&b, alpha);
            let ratio = sq_dist(&ua, &ub).sqrt() / sq_dist(&a, &b).sqrt();
            empirical = empirical.max(ratio);
        }
    }
    Ok((empirical, closed_form_rho(mu, beta, alpha)))
}

/// `||phi^k - phi*||` for `k = 0..=steps` under repeated gradient steps.
pub fn contraction_chain(task: &QuadTask, alpha: f64, phi0: &[f64], steps: usize) -> Vec<f64> {
    let star = task.comparator();
    let mut phi = phi0.to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(sq_dist(&phi, &star).sqrt());
    for _ in 0..steps {
        phi = task.gd_step(&phi, alpha);
        out.push(sq_dist(&phi, &star).sqrt());
    }
    out
}

/// `||grad f(a) - grad f(b)|| / ||a - b||` for a quadratic task.
pub fn gradient_lipschitz_ratio(task: &QuadTask, a: &[f64], b: &[f64]) -> f64 {
    sq_dist(&task.grad(a), &task.grad(b)).sqrt() / sq_dist(a, b).sqrt()
}

/// Monte-Carlo estimate of the local gradient Lipschitz ratio of the neural
/// loss around `params`, over random perturbations of norm `radius`.
pub fn neural_lipschitz_estimate(
    params: &ParamSet,
    net: &NetConfig,
    batch: &LabeledBatch,
    radius: f64,
    trials: usize,
    rng: &mut Rng64,
) -> Result<f64> {
    let (_, g0) = netcore::loss_and_grad(params, net, batch)?;
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let dir: Vec<f64> = (0..params.len()).map(|_| rng.normal()).collect();
        let scale = radius / norm(&dir);
        let moved: Vec<f64> = params.values().iter().zip(&dir).map(|(p, d)| p + scale * d).collect();
        let (_, g1) = netcore::loss_and_grad(&params.with_values(moved)?, net, batch)?;
        best = best.max(sq_dist(g0.values(), g1.values()).sqrt() / radius);
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Threshold detection on the neural learner

/// Mean of per-sample losses clipped to `[0, m]`.
pub fn clipped_mean_loss(params: &ParamSet, net: &NetConfig, batch: &LabeledBatch, m: f64) -> Result<f64> {
    let losses = netcore::per_sample_losses(params, net, batch)?;
    Ok(losses.iter().map(|l| l.min(m)).sum::<f64>() / losses.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn adapt_to_task(
    init: &ParamSet,
    net: &NetConfig,
    task: &TaskSpec,
    sigma: f64,
    n_shot: usize,
    alpha1: f64,
    steps: usize,
    rng: &mut Rng64,
) -> Result<ParamSet> {
    let mut phi = init.clone();
    for _ in 0..steps {
        let support = stream::sample_balanced(task, n_shot, sigma, rng)?;
        let (_, g) = netcore::loss_and_grad(&phi, net, &support)?;
        phi = netcore::sgd_step(&phi, &g, alpha1)?;
    }
    Ok(phi)
}

fn lower_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).floor() as usize]
}

/// Loss levels estimated from a calibration pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLevels {
    pub ell_m: f64,
    pub ell_p: f64,
    /// Expected clipped same-task losses, one per calibration episode.
    pub same_task: Vec<f64>,
    /// Expected clipped cross-task losses, one per calibration episode.
    pub cross_task: Vec<f64>,
}

impl DetectionLevels {
    /// True when the levels are separated, `ell_m < ell_p`.
    pub fn separated(&self) -> bool {
        self.ell_m < self.ell_p
    }

    pub fn check(&self) -> Result<()> {
        if self.separated() {
            Ok(())
        } else {
            Err(Error::Regime(format!(
                "same-task level {:.4} is not below cross-task level {:.4}",
                self.ell_m, self.ell_p
            )))
        }
    }

    pub fn apply(&self, cfg: &TheoryConfig) -> TheoryConfig {
        TheoryConfig {
            ell_m: self.ell_m,
            ell_p: self.ell_p,
            ..cfg.clone()
        }
    }
}

const LEVEL_SAMPLE: usize = 400;

/// Estimates `ell_m` (95th percentile of same-task expected losses after
/// adaptation) and `ell_p` (5th percentile of cross-task expected losses).
/// Expected losses are clipped at `cfg.m_clip` and averaged over a large fresh
/// sample of the task.
pub fn calibrate_levels(
    scfg: &StreamConfig,
    learner_init: &ParamSet,
    net: &NetConfig,
    hp: &Hyperparams,
    cfg: &TheoryConfig,
    rng: &mut Rng64,
) -> Result<DetectionLevels> {
    scfg.validate()?;
    let mut same = Vec::with_capacity(cfg.calibration_episodes);
    let mut cross = Vec::with_capacity(cfg.calibration_episodes);
    for _ in 0..cfg.calibration_episodes {
        let a = stream::draw_new_task(scfg, 0, rng)?;
        let sigma_a = scfg.domain(a.domain_id)?.sample_noise_sigma;
        let phi = adapt_to_task(learner_init, net, &a, sigma_a, scfg.n_shot, hp.alpha1, cfg.adapt_steps, rng)?;
        let held_out = stream::sample_iid(&a, LEVEL_SAMPLE, sigma_a, rng)?;
        same.push(clipped_mean_loss(&phi, net, &held_out, cfg.m_clip)?);
        let b = stream::draw_new_task(scfg, 1, rng)?;
        let sigma_b = scfg.domain(b.domain_id)?.sample_noise_sigma;
        let other = stream::sample_iid(&b, LEVEL_SAMPLE, sigma_b, rng)?;
        cross.push(clipped_mean_loss(&phi, net, &other, cfg.m_clip)?);
    }
    Ok(DetectionLevels {
        ell_m: lower_quantile(&same, 0.95),
        ell_p: lower_quantile(&cross, 0.05),
        same_task: same,
        cross_task: cross,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub s_support: usize,
    pub trials: usize,
    pub switches: usize,
    pub misses: usize,
    pub false_alarms: usize,
    /// `(misses + false_alarms) / trials`.
    pub rate: f64,
    pub threshold: f64,
    pub bound: f64,
}

impl DetectionReport {
    /// Monte-Carlo slack `3 sqrt(bound / trials)`, an upper bound on three
    /// standard deviations of a binomial rate whose mean is the bound.
    pub fn slack(&self) -> f64 {
        3.0 * (self.bound.min(1.0) / self.trials as f64).sqrt()
    }

    pub fn dominated(&self) -> bool {
        self.rate <= self.bound + self.slack()
    }
}

/// Error rate of the clipped-loss threshold detector with `s_support` i.i.d.
/// samples per decision. Each trial adapts the learner to a task, then asks
/// whether the next episode's support came from a new task.
#[allow(clippy::too_many_arguments)]
pub fn empirical_detection_error(
    scfg: &StreamConfig,
    learner_init: &ParamSet,
    net: &NetConfig,
    hp: &Hyperparams,
    s_support: usize,
    trials: usize,
    cfg: &TheoryConfig,
    rng: &mut Rng64,
) -> Result<DetectionReport> {
    if trials < 1000 {
        return Err(Error::argument(format!("need at least 1000 trials, got {trials}")));
    }
    if s_support == 0 {
        return Err(Error::argument("support size must be >= 1"));
    }
    if !(cfg.ell_m < cfg.ell_p) {
        return Err(Error::Regime(format!(
            "ell_m = {:.4} is not below ell_p = {:.4}",
            cfg.ell_m, cfg.ell_p
        )));
    }
    scfg.validate()?;
    let threshold = cfg.threshold();
    let (mut switches, mut misses, mut false_alarms) = (0, 0, 0);
    for _ in 0..trials {
        let a = stream::draw_new_task(scfg, 0, rng)?;
        let sigma_a = scfg.domain(a.domain_id)?.sample_noise_sigma;
        let phi = adapt_to_task(learner_init, net, &a, sigma_a, scfg.n_shot, hp.alpha1, cfg.adapt_steps, rng)?;
        let switched = !rng.bernoulli(scfg.p_stay);
        let next = if switched { stream::draw_new_task(scfg, 1, rng)? } else { a };
        let sigma = scfg.domain(next.domain_id)?.sample_noise_sigma;
        let support = stream::sample_iid(&next, s_support, sigma, rng)?;
        let detected = clipped_mean_loss(&phi, net, &support, cfg.m_clip)? > threshold;
        if switched {
            switches += 1;
            if !detected {
                misses += 1;
            }
        } else if detected {
            false_alarms += 1;
        }
    }
    Ok(DetectionReport {
        s_support,
        trials,
        switches,
        misses,
        false_alarms,
        rate: (misses + false_alarms) as f64 / trials as f64,
        threshold,
        bound: hoeffding_bound(s_support, cfg),
    })
}

// ---------------------------------------------------------------------------
// Comparators and task-averaged regret

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorFit {
    pub params: ParamSet,
    pub residual_loss: f64,
    pub grad_norm: f64,
    pub steps: usize,
    /// Set when the fit did not reach a loss below 0.1.
    pub warning: bool,
}

const COMPARATOR_MAX_STEPS: usize = 5000;

/// Per-task minimizer fitted by full-batch gradient descent on
/// `20 * n_shot` samples per class.
pub fn compute_comparator(
    task: &TaskSpec,
    sigma: f64,
    n_shot: usize,
    net: &NetConfig,
    cfg: &TheoryConfig,
    rng: &mut Rng64,
) -> Result<ComparatorFit> {
    let data = stream::sample_balanced(task, 20 * n_shot.max(1), sigma, rng)?;
    let mut params = ParamSet::glorot(net, rng);
    let mut steps = 0;
    loop {
        let (loss, grad) = netcore::loss_and_grad(&params, net, &data)?;
        let grad_norm = grad.norm();
        if grad_norm < cfg.comparator_tol || steps == COMPARATOR_MAX_STEPS {
            return Ok(ComparatorFit {
                params,
                residual_loss: loss,
                grad_norm,
                steps,
                warning: loss >= 0.1,
            });
        }
        params = netcore::sgd_step(&params, &grad, cfg.comparator_lr)?;
        steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub tar: f64,
    /// Mean squared distance of the comparators to their mean.
    pub sigma_star_sq: f64,
    pub phi_star_mean: Vec<f64>,
    pub per_task_regret: Vec<f64>,
    /// Closed-form upper bound on `tar`, `NaN` where the constants are unknown.
    pub bound_value: f64,
    /// Mean of `||phi_t^0 - phi_t*||^2` over tasks, `NaN` when unavailable.
    pub init_gap_mean: f64,
    /// Fraction of steps where the detector disagreed with the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_error: Option<f64>,
}

fn comparator_spread(comparators: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let t = comparators.len() as f64;
    let dim = comparators[0].len();
    let mut mean = vec![0.0; dim];
    for c in comparators {
        mean.iter_mut().zip(c).for_each(|(m, v)| *m += v / t);
    }
    let var = comparators.iter().map(|c| sq_dist(c, &mean)).sum::<f64>() / t;
    (var, mean)
}

/// Regret from per-step losses of the learner and of the comparators, one
/// vector per task.
pub fn regret_from_losses(
    learner: &[Vec<f64>],
    comparator_losses: &[Vec<f64>],
    comparators: &[Vec<f64>],
) -> Result<RegretReport> {
    if learner.is_empty() || learner.len() != comparator_losses.len() || learner.len() != comparators.len() {
        return Err(Error::argument("learner losses, comparator losses and comparators must align"));
    }
    let mut per_task = Vec::with_capacity(learner.len());
    for (l, c) in learner.iter().zip(comparator_losses) {
        if l.len() != c.len() {
            return Err(Error::argument("per-task step counts differ"));
        }
        per_task.push(l.iter().zip(c).map(|(a, b)| a - b).sum::<f64>());
    }
    let (sigma_star_sq, phi_star_mean) = comparator_spread(comparators);
    Ok(RegretReport {
        tar: per_task.iter().sum::<f64>() / per_task.len() as f64,
        sigma_star_sq,
        phi_star_mean,
        per_task_regret: per_task,
        bound_value: f64::NAN,
        init_gap_mean: f64::NAN,
        detection_error: None,
    })
}

/// Task-averaged regret of a recorded run against one comparator per
/// ground-truth task, using the recorded query losses and the comparators'
/// losses on the same query sets.
pub fn task_averaged_regret(run: &RunRecord, comparators: &[ParamSet], net: &NetConfig) -> Result<RegretReport> {
    let episodes = run
        .episodes
        .as_ref()
        .ok_or_else(|| Error::argument("run record does not keep its episodes"))?;
    let mut learner: Vec<Vec<f64>> = Vec::new();
    let mut comp: Vec<Vec<f64>> = Vec::new();
    for (o, ep) in run.outcomes.iter().zip(episodes) {
        if o.truth_switched || learner.is_empty() {
            learner.push(Vec::new());
            comp.push(Vec::new());
        }
        let t = learner.len() - 1;
        let star = comparators.get(t).ok_or_else(|| {
            Error::argument(format!("{} comparators for more task segments", comparators.len()))
        })?;
        learner[t].push(o.query_loss);
        comp[t].push(netcore::loss(star, net, &ep.batch.query)?);
    }
    if learner.len() != comparators.len() {
        return Err(Error::argument(format!(
            "{} task segments but {} comparators",
            learner.len(),
            comparators.len()
        )));
    }
    let vecs: Vec<Vec<f64>> = comparators.iter().map(|c| c.values().to_vec()).collect();
    let mut report = regret_from_losses(&learner, &comp, &vecs)?;
    if run.task_starts.len() == comparators.len() {
        report.init_gap_mean = run
            .task_starts
            .iter()
            .zip(comparators)
            .map(|(s, c)| s.start_params.distance(c).powi(2))
            .sum::<f64>()
            / comparators.len() as f64;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// The meta-OGD construction on quadratic families

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLrSchedule {
    /// `2 / (t + 1)` at the `t`-th meta step (1-based).
    Harmonic,
    Constant(f64),
}

impl MetaLrSchedule {
    pub fn rate(self, t: usize) -> f64 {
        match self {
            MetaLrSchedule::Harmonic => 2.0 / (t as f64 + 1.0),
            MetaLrSchedule::Constant(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportRule {
    Fixed(usize),
    /// `ceil(c ln R)` with `R` the total number of steps.
    LogR(f64),
}

/// Threshold boundary detector on noisy quadratic losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadDetector {
    pub support: SupportRule,
    pub noise_sigma: f64,
    pub m_clip: f64,
    pub calibration_pairs: usize,
}

fn expected_clipped(task: &QuadTask, phi: &[f64], det: &QuadDetector, n: usize, rng: &mut Rng64) -> f64 {
    (0..n)
        .map(|_| task.sample_loss(phi, det.noise_sigma, rng).min(det.m_clip))
        .sum::<f64>()
        / n as f64
}

/// `(ell_m, ell_p)` for the quadratic detector: the 95th percentile of the
/// expected clipped loss one step into a task, and the 5th percentile of the
/// expected clipped loss of a converged iterate on a different task.
pub fn quad_levels(fam: &QuadTaskFamily, det: &QuadDetector, rng: &mut Rng64) -> (f64, f64) {
    let t = fam.n_tasks();
    let (_, mean) = comparator_spread(&fam.centers);
    let mut same = Vec::with_capacity(det.calibration_pairs);
    let mut cross = Vec::with_capacity(det.calibration_pairs);
    for _ in 0..det.calibration_pairs.max(20) {
        let i = rng.index(t);
        let task = fam.task(i);
        let mut phi = task.gd_step(&mean, fam.alpha);
        same.push(expected_clipped(&task, &phi, det, 200, rng));
        for _ in 1..fam.k_per_task[i] {
            phi = task.gd_step(&phi, fam.alpha);
        }
        let j = if t > 1 { (i + 1 + rng.index(t - 1)) % t } else { i };
        cross.push(expected_clipped(&fam.task(j), &phi, det, 200, rng));
    }
    (lower_quantile(&same, 0.95), lower_quantile(&cross, 0.05))
}

/// Plays the tasks of `fam` in order. Each task starts from the current meta
/// parameters and takes `K_t` gradient steps; after a task the meta
/// parameters take one OGD step on `1/2 ||theta - phi_t*||^2`.
///
/// With a detector, task boundaries are not given: before every step the
/// clipped noisy loss of the current iterate is thresholded at the midpoint of
/// the calibrated levels, and a detected boundary triggers the meta step
/// (towards the comparator of the task the ending segment started on) and a
/// reset to the meta parameters.
pub fn theory_run(
    fam: &QuadTaskFamily,
    schedule: MetaLrSchedule,
    detector: Option<&QuadDetector>,
    rng: &mut Rng64,
) -> Result<RegretReport> {
    fam.validate()?;
    let n = fam.n_tasks();
    let detect = match detector {
        Some(det) => {
            let (ell_m, ell_p) = quad_levels(fam, det, rng);
            let s = match det.support {
                SupportRule::Fixed(s) => s.max(1),
                SupportRule::LogR(c) => support_size(c, fam.total_steps()),
            };
            Some((det, 0.5 * (ell_m + ell_p), s))
        }
        None => None,
    };

    let mut theta = fam.theta0.clone();
    let mut phi = theta.clone();
    let mut meta_steps = 0usize;
    let mut segment_task = 0usize;
    let mut per_task = vec![0.0; n];
    let mut init_gaps = vec![0.0; n];
    let mut g_sq: f64 = 0.0;
    let mut errors = 0usize;
    let mut decisions = 0usize;

    let meta_step = |theta: &mut Vec<f64>, target: &[f64], meta_steps: &mut usize, g_sq: &mut f64| {
        *meta_steps += 1;
        let eta = schedule.rate(*meta_steps);
        *g_sq = g_sq.max(sq_dist(theta, target));
        for (th, c) in theta.iter_mut().zip(target) {
            *th -= eta * (*th - c);
        }
    };

    for t in 0..n {
        let task = fam.task(t);
        for k in 0..fam.k_per_task[t] {
            let first = t == 0 && k == 0;
            let boundary = match (&detect, first) {
                (_, true) => true,
                (None, false) => k == 0,
                (Some((det, threshold, s)), false) => {
                    let stat = (0..*s)
                        .map(|_| task.sample_loss(&phi, det.noise_sigma, rng).min(det.m_clip))
                        .sum::<f64>()
                        / *s as f64;
                    let detected = stat > *threshold;
                    decisions += 1;
                    if detected != (k == 0) {
                        errors += 1;
                    }
                    detected
                }
            };
            if boundary {
                if !first {
                    let target = fam.centers[segment_task].clone();
                    meta_step(&mut theta, &target, &mut meta_steps, &mut g_sq);
                }
                phi = theta.clone();
                segment_task = t;
            }
            if k == 0 {
                init_gaps[t] = sq_dist(&phi, &fam.centers[t]);
            }
            per_task[t] += task.loss(&phi);
            phi = task.gd_step(&phi, fam.alpha);
        }
    }

    let (sigma_star_sq, phi_star_mean) = comparator_spread(&fam.centers);
    let rho = closed_form_rho(fam.curvature_lo, fam.curvature_hi, fam.alpha);
    let lead = if rho < 1.0 {
        fam.curvature_hi / (2.0 * (1.0 - rho * rho))
    } else {
        f64::INFINITY
    };
    let nt = n as f64;
    Ok(RegretReport {
        tar: per_task.iter().sum::<f64>() / nt,
        sigma_star_sq,
        phi_star_mean,
        per_task_regret: per_task,
        bound_value: lead * (sigma_star_sq + 2.0 * g_sq * (nt + 1.0).ln() / nt),
        init_gap_mean: init_gaps.iter().sum::<f64>() / nt,
        detection_error: detect.map(|_| errors as f64 / decisions.max(1) as f64),
    })
}

/// `L / (2 (1 - rho^2))`, the per-unit-gap regret constant of a task.
pub fn regret_constant(fam: &QuadTaskFamily) -> f64 {
    let rho = closed_form_rho(fam.curvature_lo, fam.curvature_hi, fam.alpha);
    fam.curvature_hi / (2.0 * (1.0 - rho * rho))
}

fn five() -> usize {
    5
}

/// Shape of the quadratic experiments run by [`quad_mean`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadSettings {
    #[serde(default = "five")]
    pub dim: usize,
    #[serde(default = "QuadSettings::d_mu")]
    pub mu: f64,
    #[serde(default = "QuadSettings::d_beta")]
    pub beta: f64,
    #[serde(default = "QuadSettings::d_alpha")]
    pub alpha: f64,
    #[serde(default = "five")]
    pub k_min: usize,
    #[serde(default = "QuadSettings::d_k_max")]
    pub k_max: usize,
    /// Every coordinate of every center's mean.
    #[serde(default = "QuadSettings::d_center")]
    pub center_mean: f64,
    #[serde(default = "QuadSettings::d_noise")]
    pub noise_sigma: f64,
    #[serde(default = "QuadSettings::d_m_clip")]
    pub m_clip: f64,
    #[serde(default = "QuadSettings::d_support")]
    pub support: SupportRule,
    #[serde(default = "QuadSettings::d_pairs")]
    pub calibration_pairs: usize,
}

impl QuadSettings {
    fn d_mu() -> f64 {
        0.5
    }
    fn d_beta() -> f64 {
        2.0
    }
    fn d_alpha() -> f64 {
        0.4
    }
    fn d_k_max() -> usize {
        15
    }
    fn d_center() -> f64 {
        1.0
    }
    fn d_noise() -> f64 {
        1.0
    }
    fn d_m_clip() -> f64 {
        20.0
    }
    fn d_support() -> SupportRule {
        SupportRule::Fixed(4)
    }
    fn d_pairs() -> usize {
        200
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("theory.quad.dim must be >= 1"));
        }
        if !(self.mu > 0.0 && self.mu <= self.beta && self.beta.is_finite()) {
            return Err(Error::config("theory.quad needs 0 < mu <= beta"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0 / self.beta) {
            return Err(Error::config("theory.quad.alpha must lie in (0, 2/beta]"));
        }
        if self.k_min == 0 || self.k_max < self.k_min {
            return Err(Error::config("theory.quad needs 1 <= k_min <= k_max"));
        }
        if !(self.noise_sigma >= 0.0 && self.m_clip > 0.0) {
            return Err(Error::config("theory.quad needs noise_sigma >= 0 and m_clip > 0"));
        }
        Ok(())
    }

    pub fn family_spec(&self, n_tasks: usize, spread: f64) -> FamilySpec {
        FamilySpec {
            dim: self.dim,
            n_tasks,
            center_mean: vec![self.center_mean; self.dim],
            spread,
            mu: self.mu,
            beta: self.beta,
            alpha: self.alpha,
            k_min: self.k_min,
            k_max: self.k_max,
        }
    }

    pub fn detector(&self) -> QuadDetector {
        QuadDetector {
            support: self.support,
            noise_sigma: self.noise_sigma,
            m_clip: self.m_clip,
            calibration_pairs: self.calibration_pairs,
        }
    }
}

impl Default for QuadSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all quad settings have defaults")
    }
}

/// Seed-averaged results of [`theory_run`] on one task-family shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadMean {
    pub n_tasks: usize,
    pub spread: f64,
    pub seeds: usize,
    pub tar: f64,
    pub bound_value: f64,
    pub sigma_star_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_error: Option<f64>,
}

/// Averages [`theory_run`] over `seeds` families. Family `i` is generated from
/// `derive_seed(base_seed, i)` with `max_tasks` tasks and truncated to
/// `n_tasks`, so shorter horizons are prefixes of longer ones.
pub fn quad_mean(
    q: &QuadSettings,
    spread: f64,
    n_tasks: usize,
    max_tasks: usize,
    detector: bool,
    seeds: usize,
    base_seed: u64,
) -> Result<QuadMean> {
    if seeds == 0 || n_tasks == 0 || max_tasks < n_tasks {
        return Err(Error::argument("need seeds >= 1 and 1 <= n_tasks <= max_tasks"));
    }
    let det = q.detector();
    let spec = q.family_spec(max_tasks, spread);
    let mut out = QuadMean {
        n_tasks,
        spread,
        seeds,
        tar: 0.0,
        bound_value: 0.0,
        sigma_star_sq: 0.0,
        detection_error: detector.then_some(0.0),
    };
    let w = 1.0 / seeds as f64;
    for i in 0..seeds {
        let seed = crate::rng::derive_seed(base_seed, i as u64);
        let fam = QuadTaskFamily::generate(&spec, &mut Rng64::new(seed, crate::rng::streams::THEORY))?.prefix(n_tasks);
        let mut rng = Rng64::new(seed, crate::rng::streams::COMPARATOR);
        let r = theory_run(&fam, MetaLrSchedule::Harmonic, detector.then_some(&det), &mut rng)?;
        out.tar += w * r.tar;
        out.bound_value += w * r.bound_value;
        out.sigma_star_sq += w * r.sigma_star_sq;
        if let (Some(acc), Some(e)) = (out.detection_error.as_mut(), r.detection_error) {
            *acc += w * e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TheoryConfig {
        TheoryConfig {
            m_clip: 2.302585,
            ell_m: 0.5,
            ell_p: 1.5,
            c_support: 4.0,
            rho_target: 0.5,
            comparator_tol: 1e-4,
            comparator_lr: 0.5,
            adapt_steps: 10,
            calibration_episodes: 500,
        }
    }

    #[test]
    fn hoeffding_hand_value() {
        let b = hoeffding_bound(20, &cfg());
        assert!((b - (-1.8861f64).exp()).abs() < 1e-4, "{b}");
        assert!((b - 0.1517).abs() < 1e-4);
    }

    #[test]
    fn hoeffding_vacuous_when_levels_coincide() {
        let c = TheoryConfig { ell_p: 0.5, ..cfg() };
        assert_eq!(hoeffding_bound(100, &c), 1.0);
    }

    #[test]
    fn hoeffding_doubling_squares() {
        let c = cfg();
        for s in [1, 4, 7, 30] {
            let b = hoeffding_bound(s, &c);
            assert!((hoeffding_bound(2 * s, &c) - b * b).abs() < 1e-15);
        }
    }

    #[test]
    fn default_c_exceeds_sample_constant() {
        let c = default_c_support(2.0, 0.5, 1.5).unwrap();
        assert_eq!(c, 17.0);
        assert!(default_c_support(2.0, 1.5, 1.5).is_err());
        assert_eq!(support_size(2.0, 100), (2.0 * 100f64.ln()).ceil() as usize);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TheoryConfig { ell_m: 2.0, ..cfg() }.validate().is_err());
        assert!(TheoryConfig { rho_target: 1.0, ..cfg() }.validate().is_err());
        assert!(TheoryConfig { ell_p: 3.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn identity_quadratic_newton_step() {
        let (emp, closed) = contraction_ratio(1.0, 1.0, 1.0, 10, &mut Rng64::new(0, 0)).unwrap();
        assert_eq!(closed, 0.0);
        assert!(emp < 1e-12);
    }

    #[test]
    fn contraction_hand_case() {
        let (emp, closed) = contraction_ratio(0.5, 2.0, 0.5, 20, &mut Rng64::new(1, 0)).unwrap();
        assert_eq!(closed, 0.75);
        assert!((emp - closed).abs() < 1e-8);
    }

    #[test]
    fn contraction_boundary() {
        let (emp, closed) = contraction_ratio(0.5, 2.0, 1.0, 20, &mut Rng64::new(2, 0)).unwrap();
        assert_eq!(closed, 1.0);
        assert!(emp <= 1.0 + 1e-10);
    }

    #[test]
    fn quadratic_comparator_is_center_and_fixed_point() {
        let task = QuadTask {
            center: vec![1.0, -2.0],
            curvature: vec![0.5, 2.0],
        };
        let star = task.comparator();
        assert_eq!(star, vec![1.0, -2.0]);
        assert_eq!(task.gd_step(&star, 0.3), star);
        assert_eq!(task.loss(&star), 0.0);
    }

    #[test]
    fn smoothness_witness_is_exact_on_quadratics() {
        let mut rng = Rng64::new(3, 0);
        let task = QuadTask {
            center: vec![0.0; 4],
            curvature: vec![0.5, 1.0, 1.5, 2.0],
        };
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            assert!(gradient_lipschitz_ratio(&task, &a, &b) <= 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn regret_hand_arithmetic() {
        let r = regret_from_losses(&[vec![1.0]], &[vec![0.25]], &[vec![0.0]]).unwrap();
        assert_eq!(r.tar, 0.75);
        assert_eq!(r.sigma_star_sq, 0.0);
    }

    #[test]
    fn regret_against_own_trajectory_is_zero() {
        let losses = vec![vec![0.3, 0.2, 0.1], vec![0.9]];
        let r = regret_from_losses(&losses, &losses, &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(r.tar, 0.0);
        assert_eq!(r.phi_star_mean, vec![0.0, 0.0]);
        assert_eq!(r.sigma_star_sq, 1.0);
        assert!(regret_from_losses(&losses, &losses[..1], &[vec![0.0]]).is_err());
    }

    #[test]
    fn one_step_convergence_when_rho_is_zero() {
        let fam = QuadTaskFamily {
            dim: 1,
            centers: vec![vec![2.0], vec![-1.0]],
            curvatures: vec![vec![1.0], vec![1.0]],
            curvature_lo: 1.0,
            curvature_hi: 1.0,
            alpha: 1.0,
            k_per_task: vec![3, 4],
            theta0: vec![0.5],
        };
        let r = theory_run(&fam, MetaLrSchedule::Harmonic, None, &mut Rng64::new(0, 0)).unwrap();
        // task 1 starts at 0.5: gap 1.5, loss 1/2 * 1.5^2; then theta moves fully to 2.
        assert!((r.per_task_regret[0] - 1.125).abs() < 1e-12);
        // task 2 starts at 2: gap 3
        assert!((r.per_task_regret[1] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn per_task_regret_is_bounded_by_initial_gap() {
        let spec = FamilySpec {
            dim: 5,
            n_tasks: 50,
            center_mean: vec![1.0; 5],
            spread: 1.0,
            mu: 0.5,
            beta: 2.0,
            alpha: 0.4,
            k_min: 2,
            k_max: 15,
        };
        let fam = QuadTaskFamily::generate(&spec, &mut Rng64::new(4, 0)).unwrap();
        let r = theory_run(&fam, MetaLrSchedule::Harmonic, None, &mut Rng64::new(5, 0)).unwrap();
        assert!(r.per_task_regret.iter().all(|&v| v >= -1e-10));
        assert!(r.tar <= regret_constant(&fam) * r.init_gap_mean * (1.0 + 1e-12));
        assert!(r.tar <= r.bound_value);
    }

    #[test]
    fn lower_quantile_is_an_order_statistic() {
        let v: Vec<f64> = (0..101).map(f64::from).collect();
        assert_eq!(lower_quantile(&v, 0.95), 95.0);
        assert_eq!(lower_quantile(&v, 0.05), 5.0);
    }
}
