//! Non-stationary episode stream over synthetic Gaussian-prototype domains.
//!
//! A domain places `n_ways` class prototypes uniformly on a sphere around its
//! center; a task is one such draw of prototypes, and samples are prototype
//! plus isotropic Gaussian noise. The stream is a Markov chain over tasks: each
//! step stays on the current task with probability `p_stay`, and otherwise
//! draws a fresh task from a pre-training domain with probability `eta_ind` or
//! from one of the other domains (uniformly) with probability `1 - eta_ind`.
//!
//! Task boundaries and domain ids are recorded on every [`Episode`] so the
//! detectors can be scored, but learners never read them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{LabeledBatch, Matrix};
use crate::rng::Rng64;

const MAX_TASK_TRIES: usize = 1000;
const MIN_PROTOTYPE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub prototype_center: Vec<f64>,
    pub prototype_radius: f64,
    pub sample_noise_sigma: f64,
    pub n_ways: usize,
    #[serde(default)]
    pub is_pretrain: bool,
}

impl DomainSpec {
    pub fn input_dim(&self) -> usize {
        self.prototype_center.len()
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.domain_id;
        if self.prototype_center.is_empty() {
            return Err(Error::config(format!("domain {id}: prototype_center is empty")));
        }
        if self.prototype_center.iter().any(|c| !c.is_finite()) {
            return Err(Error::config(format!("domain {id}: prototype_center not finite")));
        }
        if !(self.prototype_radius > 0.0 && self.prototype_radius.is_finite()) {
            return Err(Error::config(format!("domain {id}: prototype_radius must be > 0")));
        }
        if !(self.sample_noise_sigma > 0.0 && self.sample_noise_sigma.is_finite()) {
            return Err(Error::config(format!("domain {id}: sample_noise_sigma must be > 0")));
        }
        if self.n_ways < 2 {
            return Err(Error::config(format!("domain {id}: n_ways must be >= 2")));
        }
        Ok(())
    }
}

/// One task: a concrete set of class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub domain_id: u32,
    pub prototypes: Matrix,
    pub task_uid: u64,
}

impl TaskSpec {
    pub fn n_ways(&self) -> usize {
        self.prototypes.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub support: LabeledBatch,
    pub query: LabeledBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub batch: TaskBatch,
    pub truth_switched: bool,
    pub truth_domain_id: u32,
    pub truth_is_pretrain: bool,
    pub task_uid: u64,
    pub step_index: u64,
    pub within_task_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub p_stay: f64,
    pub eta_ind: f64,
    pub domains: Vec<DomainSpec>,
    pub n_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_stay > 0.0 && self.p_stay < 1.0) {
            return Err(Error::config(format!("stream.p_stay = {} must lie in (0, 1)", self.p_stay)));
        }
        if !(self.eta_ind > 0.0 && self.eta_ind < 1.0) {
            return Err(Error::config(format!(
                "stream.eta_ind = {} must lie in (0, 1)",
                self.eta_ind
            )));
        }
        if self.n_shot == 0 || self.n_query == 0 {
            return Err(Error::config("stream.n_shot and stream.n_query must be >= 1"));
        }
        if self.domains.is_empty() {
            return Err(Error::config("stream.domains is empty"));
        }
        for d in &self.domains {
            d.validate()?;
        }
        let first = &self.domains[0];
        for d in &self.domains[1..] {
            if d.n_ways != first.n_ways {
                return Err(Error::config("all domains must share n_ways"));
            }
            if d.input_dim() != first.input_dim() {
                return Err(Error::config("all domain centers must share one dimension"));
            }
        }
        let mut ids: Vec<u32> = self.domains.iter().map(|d| d.domain_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate domain_id"));
        }
        if self.pretrain_domains().next().is_none() {
            return Err(Error::config("stream needs at least one domain with is_pretrain = true"));
        }
        if self.shift_domains().next().is_none() {
            return Err(Error::config(
                "stream needs at least one non-pretrain domain for the 1 - eta_ind branch",
            ));
        }
        Ok(())
    }

    pub fn pretrain_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.is_pretrain)
    }

    pub fn shift_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| !d.is_pretrain)
    }

    pub fn pretrain_domain(&self) -> Result<&DomainSpec> {
        self.pretrain_domains()
            .next()
            .ok_or_else(|| Error::config("no pretrain domain configured"))
    }

    pub fn domain(&self, id: u32) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::config(format!("unknown domain id {id}")))
    }

    pub fn n_ways(&self) -> usize {
        self.domains.first().map_or(0, |d| d.n_ways)
    }

    pub fn input_dim(&self) -> usize {
        self.domains.first().map_or(0, DomainSpec::input_dim)
    }
}

/// The three default domains: the pre-training domain plus a shifted copy of
/// equal geometry and a tighter, noisier one further along another axis.
pub fn default_domains(input_dim: usize, n_ways: usize) -> Vec<DomainSpec> {
    assert!(input_dim >= 2, "default domains need at least two input dimensions");
    let axis = |i: usize, v: f64| {
        let mut c = vec![0.0; input_dim];
        c[i] = v;
        c
    };
    vec![
        DomainSpec {
            domain_id: 0,
            prototype_center: vec![0.0; input_dim],
            prototype_radius: 3.0,
            sample_noise_sigma: 0.5,
            n_ways,
            is_pretrain: true,
        },
        DomainSpec {
            domain_id: 1,
            prototype_center: axis(0, 6.0),
            prototype_radius: 3.0,
            sample_noise_sigma: 0.5,
            n_ways,
            is_pretrain: false,
        },
        DomainSpec {
            domain_id: 2,
            prototype_center: axis(1, 6.0),
            prototype_radius: 1.5,
            sample_noise_sigma: 1.0,
            n_ways,
            is_pretrain: false,
        },
    ]
}

fn unit_direction(dim: usize, rng: &mut Rng64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws `n_ways` prototypes uniformly on the domain's sphere.
pub fn sample_task(domain: &DomainSpec, task_uid: u64, rng: &mut Rng64) -> Result<TaskSpec> {
    domain.validate()?;
    let dim = domain.input_dim();
    for _ in 0..MAX_TASK_TRIES {
        let rows: Vec<Vec<f64>> = (0..domain.n_ways)
            .map(|_| {
                unit_direction(dim, rng)
                    .into_iter()
                    .zip(&domain.prototype_center)
                    .map(|(u, c)| c + domain.prototype_radius * u)
                    .collect()
            })
            .collect();
        if min_pairwise_distance(&rows) > MIN_PROTOTYPE_GAP {
            return Ok(TaskSpec {
                domain_id: domain.domain_id,
                prototypes: Matrix::from_rows(&rows)?,
                task_uid,
            });
        }
    }
    Err(Error::Generation(format!(
        "domain {}: no distinct prototype set after {MAX_TASK_TRIES} tries",
        domain.domain_id
    )))
}

fn min_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

fn draw_sample(task: &TaskSpec, label: usize, sigma: f64, rng: &mut Rng64, out: &mut Vec<f64>) {
    out.extend(task.prototypes.row(label).iter().map(|&c| c + sigma * rng.normal()));
}

/// Balanced batch with `per_class` samples of every class, labels interleaved.
pub fn sample_balanced(
    task: &TaskSpec,
    per_class: usize,
    sigma: f64,
    rng: &mut Rng64,
) -> Result<LabeledBatch> {
    let k = task.n_ways();
    let dim = task.prototypes.cols();
    let n = per_class * k;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        draw_sample(task, y, sigma, rng, &mut data);
        labels.push(y);
    }
    LabeledBatch::new(Matrix::new(n, dim, data)?, labels)
}

/// `n` i.i.d. samples with uniformly random labels.
pub fn sample_iid(task: &TaskSpec, n: usize, sigma: f64, rng: &mut Rng64) -> Result<LabeledBatch> {
    let k = task.n_ways();
    let dim = task.prototypes.cols();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.index(k);
        draw_sample(task, y, sigma, rng, &mut data);
        labels.push(y);
    }
    LabeledBatch::new(Matrix::new(n, dim, data)?, labels)
}

/// Independent support and query sets for one episode.
pub fn sample_batch(
    task: &TaskSpec,
    n_shot: usize,
    n_query: usize,
    sigma: f64,
    rng: &mut Rng64,
) -> Result<TaskBatch> {
    let support = sample_balanced(task, n_shot, sigma, rng)?;
    let query = sample_balanced(task, n_query, sigma, rng)?;
    Ok(TaskBatch { support, query })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub current: Option<TaskSpec>,
    pub next_step: u64,
    pub within_task: u64,
    pub next_uid: u64,
}

impl StreamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Draws a fresh task: a pre-training domain with probability `eta_ind`, otherwise a
/// uniformly chosen shift domain.
pub fn draw_new_task(cfg: &StreamConfig, uid: u64, rng: &mut Rng64) -> Result<TaskSpec> {
    let pool: Vec<&DomainSpec> = if rng.bernoulli(cfg.eta_ind) {
        cfg.pretrain_domains().collect()
    } else {
        cfg.shift_domains().collect()
    };
    if pool.is_empty() {
        return Err(Error::config("the drawn branch has no domain configured"));
    }
    let domain = pool[rng.index(pool.len())];
    sample_task(domain, uid, rng)
}

/// Advances the task chain by one step and samples that step's data.
pub fn next_episode(
    state: &StreamState,
    cfg: &StreamConfig,
    rng: &mut Rng64,
) -> Result<(Episode, StreamState)> {
    let (task, switched) = match &state.current {
        Some(task) if rng.bernoulli(cfg.p_stay) => (task.clone(), false),
        _ => (draw_new_task(cfg, state.next_uid, rng)?, true),
    };
    let domain = cfg.domain(task.domain_id)?;
    let batch = sample_batch(&task, cfg.n_shot, cfg.n_query, domain.sample_noise_sigma, rng)?;
    let within = if switched { 0 } else { state.within_task + 1 };
    let episode = Episode {
        batch,
        truth_switched: switched,
        truth_domain_id: task.domain_id,
        truth_is_pretrain: domain.is_pretrain,
        task_uid: task.task_uid,
        step_index: state.next_step,
        within_task_index: within,
    };
    let next = StreamState {
        next_uid: if switched { state.next_uid + 1 } else { state.next_uid },
        current: Some(task),
        next_step: state.next_step + 1,
        within_task: within,
    };
    Ok((episode, next))
}

/// Owning iterator over a configured stream; its generator is keyed by `cfg.seed`.
#[derive(Debug, Clone)]
pub struct EpisodeStream {
    cfg: StreamConfig,
    state: StreamState,
    rng: Rng64,
}

impl EpisodeStream {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng64::new(cfg.seed, crate::rng::streams::EPISODES);
        Ok(Self {
            cfg,
            state: StreamState::new(),
            rng,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// The task the last emitted episode came from.
    pub fn current_task(&self) -> Option<&TaskSpec> {
        self.state.current.as_ref()
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        let (ep, state) = next_episode(&self.state, &self.cfg, &mut self.rng)?;
        self.state = state;
        Ok(ep)
    }
}

impl Iterator for EpisodeStream {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_episode())
    }
}
