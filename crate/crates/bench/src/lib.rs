//! Shared fixtures for the criterion benchmarks.

use leeds_core::detect::{DetectorParams, EnergySign};
use leeds_core::learner::Hyperparams;
use leeds_core::netcore::{Activation, NetConfig, ParamSet};
use leeds_core::rng::Rng64;
use leeds_core::stream::{default_domains, StreamConfig};

pub fn net(hidden: usize) -> NetConfig {
    NetConfig {
        input_dim: 8,
        hidden_dims: vec![hidden],
        n_classes: 5,
        activation: Activation::Relu,
    }
}

pub fn stream(seed: u64) -> StreamConfig {
    StreamConfig {
        p_stay: 0.9,
        eta_ind: 0.5,
        domains: default_domains(8, 5),
        n_shot: 10,
        n_query: 10,
        seed,
    }
}

pub fn hyperparams(pretrain_tasks: usize) -> Hyperparams {
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

pub fn detector() -> DetectorParams {
    DetectorParams {
        ell: 5f64.ln(),
        tau: 0.0,
        delta: 1.0,
        energy_sign: EnergySign::Paper,
    }
}

pub fn params(cfg: &NetConfig, seed: u64) -> ParamSet {
    ParamSet::glorot(cfg, &mut Rng64::new(seed, 0))
}
