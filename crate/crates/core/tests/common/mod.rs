#![allow(dead_code)]

use pathway_cl::harness::{LayoutConfig, Method, RunConfig};
use pathway_cl::tasks::{StreamConfig, TaskFamily};

pub fn rotated_stream(n_tasks: usize, seed: u64) -> StreamConfig {
    StreamConfig::new(TaskFamily::RotatedGaussians, n_tasks, seed)
}

pub fn disjoint(head_hidden_total: usize) -> LayoutConfig {
    LayoutConfig {
        encoder: None,
        head_hidden_total,
        activation: pathway_cl::nn::Activation::Tanh,
    }
}

pub fn config(method: Method, stream: StreamConfig, layout: LayoutConfig, k: usize, seed: u64) -> RunConfig {
    RunConfig::new(method, stream, layout, k, seed)
}

/// Smaller data sizes for tests that only need the mechanics.
pub fn quick(mut cfg: RunConfig) -> RunConfig {
    cfg.stream.n_train = 200;
    cfg.stream.n_eval = 100;
    cfg.epochs_per_task = 1;
    cfg.fisher_samples = 50;
    cfg.router_samples_per_task = 32;
    cfg.router_epochs = 2;
    cfg.baseline_inits = 2;
    cfg
}
