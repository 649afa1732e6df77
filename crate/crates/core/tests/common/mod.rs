#![allow(dead_code)]

use std::path::PathBuf;

use leeds_core::detect::{DetectorParams, EnergySign};
use leeds_core::learner::Hyperparams;
use leeds_core::netcore::{Activation, LabeledBatch, Matrix, NetConfig, ParamSet};
use leeds_core::rng::Rng64;
use leeds_core::stream::{default_domains, StreamConfig};
use leeds_core::ExperimentConfig;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name), &[]).expect("config loads")
}

pub fn net(hidden: Vec<usize>, activation: Activation) -> NetConfig {
    NetConfig {
        input_dim: 8,
        hidden_dims: hidden,
        n_classes: 5,
        activation,
    }
}

pub fn default_net() -> NetConfig {
    net(vec![32], Activation::Relu)
}

pub fn stream(p_stay: f64, seed: u64) -> StreamConfig {
    StreamConfig {
        p_stay,
        eta_ind: 0.5,
        domains: default_domains(8, 5),
        n_shot: 10,
        n_query: 10,
        seed,
    }
}

pub fn hp(pretrain_tasks: usize) -> Hyperparams {
    Hyperparams {
        alpha1: 0.15,
        alpha2: 0.05,
        inner_steps_pretrain: 1,
        pretrain_tasks,
        pretrain_meta_batch: 8,
        pretrain_alpha2: Some(0.2),
        cmaml_gamma: 1.0,
    }
}

pub fn det(ell: f64, tau: f64) -> DetectorParams {
    DetectorParams {
        ell,
        tau,
        delta: 1.0,
        energy_sign: EnergySign::Paper,
    }
}

pub fn random_params(cfg: &NetConfig, seed: u64) -> ParamSet {
    ParamSet::glorot(cfg, &mut Rng64::new(seed, 77))
}

pub fn random_batch(cfg: &NetConfig, n: usize, scale: f64, rng: &mut Rng64) -> LabeledBatch {
    let data = (0..n * cfg.input_dim).map(|_| scale * rng.normal()).collect();
    let labels = (0..n).map(|_| rng.index(cfg.n_classes)).collect();
    LabeledBatch::new(Matrix::new(n, cfg.input_dim, data).unwrap(), labels).unwrap()
}
