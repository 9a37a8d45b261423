#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use bdgxrl::datasets::{Dataset, Transition, TransitionLayout};
use bdgxrl::Rng;
use bdgxrl_cli::ExperimentConfig;

/// A pointmass config small enough to run the whole pipeline in about a second.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.source_transitions = 400;
    c.target_transitions = 400;
    c.expert.steps = 600;
    c.expert.early_step = 200;
    c.expert.mid_step = 400;
    for a in [&mut c.expert.agent, &mut c.agent] {
        a.hidden = vec![16, 16];
        a.batch = 32;
        a.random_start_steps = 100;
        a.eval_interval = 200;
        a.buffer_capacity = 1000;
        a.refresh_period = 250;
    }
    c.agent.bc_pretrain_steps = 50;
    c.bridge.hidden = vec![16, 16];
    c.bridge.n_outer = 2;
    c.bridge.inner_steps = 30;
    c.bridge.batch = 64;
    c.bridge.steps = 10;
    c.bridge.cache_size = 128;
    c.bridge.diagnostic_samples = 64;
    c.reward.hidden = vec![16, 16];
    c.reward.steps = 200;
    c.reward.refresh_steps = 20;
    c.reward.max_rmse_fraction = 1.0;
    c.budget_steps = 500;
    c.seeds = vec![0, 1];
    c.eval_episodes = 2;
    c.reference_episodes = 2;
    c.out_dir = out.to_path_buf();
    c
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    cfg.save(path).unwrap();
}

pub fn bdgxrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdgxrl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// One-dimensional linear-Gaussian transitions `s' = s + 0.1·a + shift + 0.05·ε`.
pub fn gaussian_dataset(n: usize, shift: f64, seed: u64) -> Dataset {
    let mut rng = Rng::seed_from(seed);
    let mut ds = Dataset::new(TransitionLayout::new(1, 1), false);
    for _ in 0..n {
        let s = rng.normal();
        let a = rng.uniform(-1.0, 1.0);
        let sn = s + 0.1 * a + shift + 0.05 * rng.normal();
        ds.push(Transition {
            s: vec![s],
            a: vec![a],
            s_next: vec![sn],
            r: None,
            done: false,
        })
        .unwrap();
    }
    ds
}
