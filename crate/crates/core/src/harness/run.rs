use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{self, DetectorParams};
use crate::error::{Error, Result};
use crate::learner::{self, LearnerMode, LearnerState, RunOptions, RunRecord};
use crate::netcore::{Matrix, ParamSet};
use crate::rng::{derive_seed, streams, Rng64};
use crate::stream::{self, StreamConfig};

use super::config::{ExperimentConfig, Setting};
use super::metrics::{self, ModeSummary};
use super::output::{self, EpisodeCsvWriter};

pub const VERSION: &str = concat!("leeds-core ", env!("CARGO_PKG_VERSION"));

/// Seed of the `index`-th run of an experiment.
pub fn seed_for(cfg: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(cfg.stream.seed, index as u64)
}

pub fn stream_for_seed(cfg: &ExperimentConfig, seed: u64) -> StreamConfig {
    StreamConfig {
        seed,
        ..cfg.stream.clone()
    }
}

/// Shift-domain ids in ascending order.
pub fn shift_domain_ids(scfg: &StreamConfig) -> Vec<u32> {
    let mut ids: Vec<u32> = scfg.shift_domains().map(|d| d.domain_id).collect();
    ids.sort_unstable();
    ids
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::argument(format!("cannot build worker pool: {e}")))
}

#[derive(Serialize)]
struct CacheKey<'a> {
    version: &'a str,
    net: &'a crate::netcore::NetConfig,
    domain: &'a stream::DomainSpec,
    hp: &'a learner::Hyperparams,
    n_shot: usize,
    n_query: usize,
    seed: u64,
}

/// Hex digest identifying a pre-training run.
pub fn theta0_cache_key(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let key = CacheKey {
        version: VERSION,
        net: &cfg.net,
        domain: cfg.stream.pretrain_domain()?,
        hp: &cfg.hp,
        n_shot: cfg.stream.n_shot,
        n_query: cfg.stream.n_query,
        seed,
    };
    let digest = Sha256::digest(serde_json::to_vec(&key)?);
    Ok(hex::encode(digest))
}

/// The pre-trained initialization for one seed, read from or written to
/// `cache` when given. The flag reports a cache hit.
pub fn pretrained_init(cfg: &ExperimentConfig, seed: u64, cache: Option<&Path>) -> Result<(ParamSet, bool)> {
    let path = match cache {
        Some(dir) => Some(dir.join(format!("theta0-{}.json", &theta0_cache_key(cfg, seed)?[..24]))),
        None => None,
    };
    if let Some(p) = &path {
        if let Ok(text) = std::fs::read_to_string(p) {
            if let Ok(params) = serde_json::from_str::<ParamSet>(&text) {
                if params.dims() == cfg.net.dims().as_slice() {
                    return Ok((params, true));
                }
            }
        }
    }
    let init = ParamSet::glorot(&cfg.net, &mut Rng64::new(seed, streams::INIT));
    let theta0 = learner::pretrain_maml(
        init,
        cfg.stream.pretrain_domain()?,
        &cfg.net,
        &cfg.hp,
        cfg.stream.n_shot,
        cfg.stream.n_query,
        &mut Rng64::new(seed, streams::PRETRAIN),
    )?;
    if let Some(p) = &path {
        output::write_json(p, &theta0)?;
    }
    Ok((theta0, false))
}

/// Support inputs of `n` fresh tasks from the pre-training domains.
pub fn pretrain_supports(scfg: &StreamConfig, n: usize, rng: &mut Rng64) -> Result<Vec<Matrix>> {
    let domains: Vec<_> = scfg.pretrain_domains().collect();
    if domains.is_empty() {
        return Err(Error::config("calibration needs a pretrain domain"));
    }
    (0..n)
        .map(|_| {
            let d = domains[rng.index(domains.len())];
            let task = stream::sample_task(d, 0, rng)?;
            Ok(stream::sample_balanced(&task, scfg.n_shot, d.sample_noise_sigma, rng)?.inputs)
        })
        .collect()
}

/// `tau` calibrated on pre-training supports drawn from the seed's calibration stream.
pub fn calibrate_seed_tau(cfg: &ExperimentConfig, theta0: &ParamSet, seed: u64) -> Result<f64> {
    let det = cfg.det.settings();
    let sups = pretrain_supports(
        &cfg.stream,
        cfg.calibration.n_supports,
        &mut Rng64::new(seed, streams::CALIBRATION),
    )?;
    detect::calibrate_tau(&sups, theta0, &cfg.net, det.delta, det.energy_sign, cfg.calibration.coverage)
}

/// Fraction of `n` fresh pre-training supports classified in-distribution.
pub fn held_out_ind_rate(
    cfg: &ExperimentConfig,
    theta0: &ParamSet,
    det: &DetectorParams,
    n: usize,
    rng: &mut Rng64,
) -> Result<f64> {
    let sups = pretrain_supports(&cfg.stream, n, rng)?;
    let mut ind = 0usize;
    for s in &sups {
        if !detect::ood_classify(s, theta0, &cfg.net, det)? {
            ind += 1;
        }
    }
    Ok(ind as f64 / n as f64)
}

/// Everything one seed's runs share.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub index: usize,
    pub seed: u64,
    pub theta0: ParamSet,
    pub det: DetectorParams,
    pub calibrated_tau: Option<f64>,
    pub cache_hit: bool,
}

pub fn prepare_seed(cfg: &ExperimentConfig, index: usize) -> Result<SeedContext> {
    let seed = seed_for(cfg, index);
    let cache = cfg.cache_dir();
    let (theta0, cache_hit) = pretrained_init(cfg, seed, Some(&cache))?;
    let settings = cfg.det.settings();
    let calibrated_tau = match settings.tau {
        Setting::Auto => Some(calibrate_seed_tau(cfg, &theta0, seed)?),
        Setting::Value(_) => None,
    };
    let det = settings.resolve(cfg.net.n_classes, || calibrated_tau.unwrap_or(f64::NAN));
    det.validate()?;
    Ok(SeedContext {
        index,
        seed,
        theta0,
        det,
        calibrated_tau,
        cache_hit,
    })
}

pub fn episodes_path(output_dir: &Path, mode: LearnerMode, index: usize) -> PathBuf {
    output_dir.join("episodes").join(format!("{mode}_seed{index}.csv"))
}

/// One learner over one seed's stream, rows streamed to `csv` when given.
pub fn run_mode(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    mode: LearnerMode,
    csv: Option<&Path>,
    keep_episodes: bool,
) -> Result<RunRecord> {
    let state = LearnerState::new(ctx.theta0.clone(), ctx.det, mode);
    let scfg = stream_for_seed(cfg, ctx.seed);
    let opts = RunOptions {
        keep_episodes,
        ..RunOptions::default()
    };
    match csv {
        Some(path) => {
            let mut writer = EpisodeCsvWriter::create(path)?;
            let record = learner::run_stream(state, &scfg, cfg.n_steps, &cfg.net, &cfg.hp, opts, Some(&mut writer))?;
            writer.finish()?;
            Ok(record)
        }
        None => learner::run_stream(state, &scfg, cfg.n_steps, &cfg.net, &cfg.hp, opts, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedHeader {
    pub index: usize,
    pub seed: u64,
    pub ell: f64,
    pub tau: f64,
    pub calibrated_tau: Option<f64>,
    pub theta0_cached: bool,
}

/// `run.json`: what was run and with which resolved thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedHeader>,
    pub episode_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryFile<'a> {
    pub version: &'a str,
    pub shift_domains: &'a [u32],
    pub modes: &'a [ModeSummary],
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub output_dir: PathBuf,
    pub shift_domains: Vec<u32>,
    pub seeds: Vec<SeedHeader>,
    pub summaries: Vec<ModeSummary>,
    /// `(mode, seed index, record)` in mode-major order.
    pub records: Vec<(LearnerMode, usize, RunRecord)>,
}

impl ExperimentResult {
    pub fn summary(&self, mode: LearnerMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }
}

/// Pre-trains (or loads) one initialization per seed, runs every mode on every
/// seed's stream, and writes `run.json`, one episodes CSV per run,
/// `summary.csv` and `summary.json` under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    output::ensure_dir(&out)?;
    let pool = pool(cfg)?;
    let contexts: Vec<SeedContext> = pool.install(|| {
        (0..cfg.n_seeds)
            .into_par_iter()
            .map(|i| prepare_seed(cfg, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let seeds: Vec<SeedHeader> = contexts
        .iter()
        .map(|c| SeedHeader {
            index: c.index,
            seed: c.seed,
            ell: c.det.ell,
            tau: c.det.tau,
            calibrated_tau: c.calibrated_tau,
            theta0_cached: c.cache_hit,
        })
        .collect();
    let header = RunHeader {
        version: VERSION.to_string(),
        config: cfg.clone(),
        seeds: seeds.clone(),
        episode_columns: output::EPISODE_COLUMNS.iter().map(|s| s.to_string()).collect(),
    };
    output::write_json(&out.join("run.json"), &header)?;

    let jobs: Vec<(LearnerMode, &SeedContext)> = cfg
        .modes
        .iter()
        .flat_map(|&m| contexts.iter().map(move |c| (m, c)))
        .collect();
    let records: Vec<(LearnerMode, usize, RunRecord)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, ctx)| {
                let path = episodes_path(&out, mode, ctx.index);
                run_mode(cfg, ctx, mode, Some(&path), false).map(|r| (mode, ctx.index, r))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let shift_domains = shift_domain_ids(&cfg.stream);
    let summaries: Vec<ModeSummary> = cfg
        .modes
        .iter()
        .map(|&mode| {
            let per_seed = records
                .iter()
                .filter(|(m, _, _)| *m == mode)
                .map(|(_, _, r)| metrics::run_metrics(&r.outcomes, &shift_domains))
                .collect();
            metrics::summarize(mode, per_seed)
        })
        .collect();
    output::atomic_write(&out.join("summary.csv"), &output::summary_csv(&summaries, &shift_domains)?)?;
    output::write_json(
        &out.join("summary.json"),
        &SummaryFile {
            version: VERSION,
            shift_domains: &shift_domains,
            modes: &summaries,
        },
    )?;
    Ok(ExperimentResult {
        output_dir: out,
        shift_domains,
        seeds,
        summaries,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Ell,
    Tau,
    Delta,
    PStay,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Ell => "ell",
            SweepParam::Tau => "tau",
            SweepParam::Delta => "delta",
            SweepParam::PStay => "p_stay",
        }
    }

    /// Dotted config path the parameter overrides.
    pub fn path(self) -> &'static str {
        match self {
            SweepParam::Ell => "det.ell",
            SweepParam::Tau => "det.tau",
            SweepParam::Delta => "det.delta",
            SweepParam::PStay => "stream.p_stay",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ell" => Ok(SweepParam::Ell),
            "tau" => Ok(SweepParam::Tau),
            "delta" => Ok(SweepParam::Delta),
            "p_stay" | "p" => Ok(SweepParam::PStay),
            other => Err(Error::config(format!(
                "unknown sweep parameter `{other}` (expected ell, tau, delta or p_stay)"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    pub result: Result<ExperimentResult>,
}

/// Config of one sweep point: `base` with the parameter overridden and its
/// own output directory under `base.output_dir/sweep`. The cache is shared.
pub fn sweep_point_config(base: &ExperimentConfig, param: SweepParam, value: &str, index: usize) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(base)?;
    super::config::apply_override(&mut v, param.path(), value)?;
    let out = base.output_dir.join("sweep").join(format!("{}_{index}", param.as_str()));
    super::config::apply_override(&mut v, "output_dir", &serde_json::to_string(&out)?)?;
    super::config::apply_override(&mut v, "cache_dir", &serde_json::to_string(&base.cache_dir())?)?;
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one experiment per value, holding everything else fixed, and writes
/// `sweep.csv` under `base.output_dir`. A value that fails becomes an error
/// row and the sweep continues.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[String]) -> Result<Vec<SweepPoint>> {
    base.validate()?;
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let points: Vec<SweepPoint> = values
        .iter()
        .enumerate()
        .map(|(i, v)| SweepPoint {
            value: v.clone(),
            result: sweep_point_config(base, param, v, i).and_then(|c| run_experiment(&c)),
        })
        .collect();
    let shift = shift_domain_ids(&base.stream);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["param".to_string(), "value".to_string(), "status".to_string(), "error".to_string()];
    header.extend(output::summary_header(&shift));
    w.write_record(&header)?;
    for p in &points {
        match &p.result {
            Ok(res) => {
                for s in &res.summaries {
                    let mut row = vec![param.as_str().to_string(), p.value.clone(), "ok".to_string(), String::new()];
                    row.extend(output::summary_row(s));
                    w.write_record(&row)?;
                }
            }
            Err(e) => {
                let mut row = vec![param.as_str().to_string(), p.value.clone(), "error".to_string(), e.to_string()];
                row.resize(header.len(), String::new());
                w.write_record(&row)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(csv::Error::from(e.into_error())))?;
    output::atomic_write(&base.output_dir.join("sweep.csv"), &bytes)?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCalibration {
    pub index: usize,
    pub seed: u64,
    pub tau: f64,
    /// In-distribution rate on as many fresh pre-training supports as were used to calibrate.
    pub held_out_ind_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: String,
    pub ell_default: f64,
    pub coverage: f64,
    pub n_supports: usize,
    pub delta: f64,
    pub seeds: Vec<SeedCalibration>,
}

/// Default `ell` and per-seed calibrated `tau`; writes `calibration.json`.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    output::ensure_dir(&cfg.output_dir)?;
    let settings = cfg.det.settings();
    let pool = pool(cfg)?;
    let seeds = pool.install(|| {
        (0..cfg.n_seeds)
            .into_par_iter()
            .map(|i| {
                let seed = seed_for(cfg, i);
                let (theta0, _) = pretrained_init(cfg, seed, Some(&cfg.cache_dir()))?;
                let tau = calibrate_seed_tau(cfg, &theta0, seed)?;
                let det = DetectorParams {
                    tau,
                    ..settings.resolve(cfg.net.n_classes, || tau)
                };
                let mut rng = Rng64::new(derive_seed(seed, 1), streams::CALIBRATION);
                let rate = held_out_ind_rate(cfg, &theta0, &det, cfg.calibration.n_supports, &mut rng)?;
                Ok(SeedCalibration {
                    index: i,
                    seed,
                    tau,
                    held_out_ind_rate: rate,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = CalibrationReport {
        version: VERSION.to_string(),
        ell_default: detect::default_ell(cfg.net.n_classes),
        coverage: cfg.calibration.coverage,
        n_supports: cfg.calibration.n_supports,
        delta: settings.delta,
        seeds,
    };
    output::write_json(&cfg.output_dir.join("calibration.json"), &report)?;
    Ok(report)
}
