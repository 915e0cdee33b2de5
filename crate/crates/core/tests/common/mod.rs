#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wemoe_core::model::init_params;
use wemoe_core::params::task_vector;
use wemoe_core::{Batch, ModelConfig, NamedParamSet, TaskVector, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d=8, L=2, two heads, one classifier per task.
pub fn tiny(n_tasks: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        seq_len: 4,
        input_dim: 4,
        n_classes: (0..n_tasks).map(|t| 2 + t % 3).collect(),
    }
}

/// A pretrained model and one perturbation of it per task, heads included.
pub fn family(cfg: &ModelConfig, seed: u64) -> (NamedParamSet, Vec<NamedParamSet>) {
    let theta_0 = init_params(cfg, &mut rng(seed)).unwrap();
    let finetuned = (0..cfg.n_tasks())
        .map(|t| {
            let mut r = rng(seed.wrapping_mul(31).wrapping_add(t as u64 + 1));
            let mut p = theta_0.clone();
            for (_, x) in p.iter_mut() {
                let noise = Tensor::randn(x.shape().to_vec(), 0.08, &mut r);
                x.axpy(1.0, &noise).unwrap();
            }
            p
        })
        .collect();
    (theta_0, finetuned)
}

pub fn vectors(theta_0: &NamedParamSet, finetuned: &[NamedParamSet]) -> Vec<TaskVector> {
    finetuned.iter().map(|f| task_vector(f, theta_0).unwrap()).collect()
}

pub fn batch(cfg: &ModelConfig, rows: usize, task: usize, seed: u64) -> Batch {
    let x = Tensor::randn([rows, cfg.seq_len, cfg.input_dim], 1.0, &mut rng(seed));
    Batch::new(x, None, task).unwrap()
}

pub fn labeled(cfg: &ModelConfig, rows: usize, task: usize, seed: u64) -> Batch {
    let mut b = batch(cfg, rows, task, seed);
    let c = cfg.n_classes[task];
    b.labels = Some((0..rows).map(|i| (i * 7 + seed as usize) % c).collect());
    b
}
