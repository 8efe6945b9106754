//! Fixtures shared by the criterion benchmarks.

use shallowpi_core::flow::FlowBatch;
use shallowpi_core::flow::FlowSample;
use shallowpi_core::policy::{ObsBatch, PolicyConfig, PolicyParams, TokenizedObservation};
use shallowpi_core::{Rng, Tensor};

/// Randomly initialised default-width policy with the given depth and
/// visual-token count.
pub fn policy(n_layers: usize, n_vis_tokens: usize) -> PolicyParams<f32> {
    let cfg = PolicyConfig {
        n_layers,
        n_vis_tokens,
        ..PolicyConfig::default()
    };
    PolicyParams::init(&cfg, &mut Rng::new(0, 0)).expect("valid config")
}

pub fn observation(cfg: &PolicyConfig, rng: &mut Rng) -> TokenizedObservation<f32> {
    TokenizedObservation {
        vis_tokens: Tensor::randn(&[cfg.n_vis_tokens, cfg.d_model], 1.0, rng),
        lang_tokens: Tensor::randn(&[cfg.n_lang_tokens, cfg.d_model], 1.0, rng),
        state: Tensor::randn(&[cfg.state_dim], 1.0, rng),
    }
}

pub fn obs_batch(cfg: &PolicyConfig, batch: usize, seed: u64) -> ObsBatch<f32> {
    let mut rng = Rng::new(seed, 1);
    let obs: Vec<_> = (0..batch).map(|_| observation(cfg, &mut rng)).collect();
    let refs: Vec<_> = obs.iter().collect();
    ObsBatch::stack(&refs, cfg).expect("consistent shapes")
}

pub fn flow_batch(cfg: &PolicyConfig, batch: usize, seed: u64) -> FlowBatch<f32> {
    let mut rng = Rng::new(seed, 2);
    let obs: Vec<_> = (0..batch).map(|_| observation(cfg, &mut rng)).collect();
    let refs: Vec<_> = obs.iter().collect();
    let shape = [cfg.chunk_len, cfg.action_dim];
    let samples: Vec<_> = (0..batch)
        .map(|_| {
            let a = Tensor::randn(&shape, 1.0, &mut rng);
            let e = Tensor::randn(&shape, 1.0, &mut rng);
            FlowSample::from_parts(a, e, rng.uniform()).expect("tau in range")
        })
        .collect();
    FlowBatch::new(cfg, &refs, &samples).expect("consistent shapes")
}
