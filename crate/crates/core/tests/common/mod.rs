#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use std::path::Path;

use teata_core::config::{DomainConfig, Method, RunConfig};
use teata_core::data::{generate_synthetic_domain, BatchSpec, ClothingState};
use teata_core::encoders::ModelConfig;
use teata_core::kap::{Stage1Plan, Stage2Plan};

/// Encoders small enough for sub-second steps: 16x8 images, width 16.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 8,
        patch_size: 4,
        vision_width: 16,
        vision_depth: 1,
        vision_heads: 2,
        embed_dim: 8,
        token_dim: 8,
        text_depth: 1,
        text_heads: 2,
        mlp_ratio: 2,
        prompt_tokens: 2,
        ..ModelConfig::default()
    }
}

pub fn toy_domain(name: &str, state: ClothingState, seed: u64, identities: usize) -> DomainConfig {
    DomainConfig {
        num_identities: identities,
        images_per_identity: 8,
        ..DomainConfig::synthetic(name, state, seed)
    }
}

/// A short run over `domains` with data under `root`; nothing is generated.
pub fn toy_config(root: &Path, method: Method, domains: Vec<DomainConfig>) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.root = root.to_path_buf();
    cfg.data.domains = domains;
    cfg.model = toy_model();
    cfg.train.method = method;
    cfg.train.stage1_epochs = 3;
    cfg.train.stage2_epochs = 3;
    cfg.train.batch = BatchSpec {
        batch_size: 16,
        instances_per_identity: 4,
    };
    cfg.train.stage1 = Stage1Plan { lr: 5e-3 };
    cfg.train.stage2 = Stage2Plan {
        warmup_start_lr: 1e-4,
        peak_lr: 1e-3,
        warmup_epochs: 2,
        decay_epoch: 2,
        decay_factor: 0.1,
    };
    cfg.eval.batch_size = 32;
    cfg
}

/// SC then CC, 8 identities each.
pub fn two_domains() -> Vec<DomainConfig> {
    vec![
        toy_domain("a_sc", ClothingState::SC, 11, 8),
        toy_domain("b_cc", ClothingState::CC, 12, 8),
    ]
}

pub fn generate_all(cfg: &RunConfig) {
    for d in cfg.data.domains.iter().chain(&cfg.eval.unseen) {
        generate_synthetic_domain(
            &d.generator_params(&cfg.model),
            d.resolved_root(&cfg.data.root),
        )
        .expect("generate toy domain");
    }
}
