use super::world::{Vec2, WorldState, N_TASKS};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, TokenizedObservation};
use crate::tensor::{Rng, Scalar, Tensor};

const CODEBOOK_STREAM: u64 = 0xc0de;
/// Per-cell features: offsets to agent, target and distractor, plus one
/// proximity bump per entity.
const N_FEATURES: usize = 9;

/// Fixed random "vision encoder": a linear codebook from per-cell geometry
/// to token space, plus per-cell positional codes and task embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    side: usize,
    d_model: usize,
    n_lang: usize,
    /// `[N_FEATURES, d]`
    codebook: Vec<f64>,
    /// `[side², d]`
    positions: Vec<f64>,
    /// `[N_TASKS · n_lang, d]`
    language: Vec<f64>,
}

impl Tokenizer {
    pub fn new(cfg: &PolicyConfig) -> Result<Self> {
        let side = (cfg.n_vis_tokens as f64).sqrt().round() as usize;
        if side * side != cfg.n_vis_tokens || side == 0 {
            return Err(Error::config(format!(
                "n_vis_tokens = {} is not a positive square",
                cfg.n_vis_tokens
            )));
        }
        if cfg.state_dim != 2 || cfg.action_dim != 2 {
            return Err(Error::config("the reaching task has 2-d state and actions"));
        }
        let d = cfg.d_model;
        let mut rng = Rng::new(cfg.codebook_seed, CODEBOOK_STREAM);
        let mut draw = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.normal()).collect() };
        let codebook = draw(N_FEATURES * d, 1.0 / (N_FEATURES as f64).sqrt());
        let positions = draw(side * side * d, 0.5);
        let language = draw(N_TASKS * cfg.n_lang_tokens * d, 1.0);
        Ok(Self {
            side,
            d_model: d,
            n_lang: cfg.n_lang_tokens,
            codebook,
            positions,
            language,
        })
    }

    fn cell_center(&self, cell: usize) -> Vec2 {
        let s = self.side as f64;
        [
            ((cell % self.side) as f64 + 0.5) / s,
            ((cell / self.side) as f64 + 0.5) / s,
        ]
    }

    fn features(&self, world: &WorldState, cell: usize) -> [f64; N_FEATURES] {
        let c = self.cell_center(cell);
        let width = 1.0 / self.side as f64;
        let mut f = [0.0; N_FEATURES];
        let entities = [world.agent_pos, world.target_pos, world.distractor_pos];
        for (e, p) in entities.iter().enumerate() {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            f[2 * e] = dx;
            f[2 * e + 1] = dy;
            f[6 + e] = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
        }
        f
    }

    pub fn tokenize<F: Scalar>(&self, world: &WorldState) -> Result<TokenizedObservation<F>> {
        if world.task_id >= N_TASKS {
            return Err(Error::Index {
                what: "task id",
                index: world.task_id,
                len: N_TASKS,
            });
        }
        let d = self.d_model;
        let cells = self.side * self.side;
        let mut vis = Vec::with_capacity(cells * d);
        for cell in 0..cells {
            let f = self.features(world, cell);
            for j in 0..d {
                let mut v = self.positions[cell * d + j];
                for (k, fk) in f.iter().enumerate() {
                    v += fk * self.codebook[k * d + j];
                }
                vis.push(F::of(v));
            }
        }
        let lang_start = world.task_id * self.n_lang * d;
        let lang = self.language[lang_start..lang_start + self.n_lang * d]
            .iter()
            .map(|&v| F::of(v))
            .collect();
        let state = world.agent_pos.iter().map(|&p| F::of(2.0 * p - 1.0)).collect();
        Ok(TokenizedObservation {
            vis_tokens: Tensor::new(&[cells, d], vis)?,
            lang_tokens: Tensor::new(&[self.n_lang, d], lang)?,
            state: Tensor::new(&[2], state)?,
        })
    }
}

/// Tokenizes one world with the codebook named in `cfg`.
pub fn tokenize<F: Scalar>(world: &WorldState, cfg: &PolicyConfig) -> Result<TokenizedObservation<F>> {
    Tokenizer::new(cfg)?.tokenize(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn world(agent: Vec2, target: Vec2, task_id: usize) -> WorldState {
        WorldState {
            agent_pos: agent,
            target_pos: target,
            target_vel: [0.0, 0.0],
            distractor_pos: [0.3, 0.7],
            task_id,
            time_step: 0,
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = PolicyConfig::default();
        let w = world([0.1, 0.2], [0.8, 0.4], 0);
        let a: TokenizedObservation<f32> = tokenize(&w, &cfg).unwrap();
        let b: TokenizedObservation<f32> = tokenize(&w, &cfg).unwrap();
        assert_eq!(a, b);
        let other = PolicyConfig {
            codebook_seed: 1,
            ..cfg
        };
        let c: TokenizedObservation<f32> = tokenize(&w, &other).unwrap();
        assert_ne!(a.vis_tokens, c.vis_tokens);
    }

    #[test]
    fn task_id_only_changes_language() {
        let cfg = PolicyConfig::default();
        let a: TokenizedObservation<f64> = tokenize(&world([0.1, 0.2], [0.8, 0.4], 0), &cfg).unwrap();
        let b: TokenizedObservation<f64> = tokenize(&world([0.1, 0.2], [0.8, 0.4], 1), &cfg).unwrap();
        assert!(a.vis_tokens.bitwise_eq(&b.vis_tokens));
        assert!(a.state.bitwise_eq(&b.state));
        assert!(!a.lang_tokens.bitwise_eq(&b.lang_tokens));
    }

    #[test]
    fn injective_on_position_grid() {
        let cfg = PolicyConfig::default();
        let tok = Tokenizer::new(&cfg).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        let mut seen = HashSet::new();
        let mut count = 0;
        for &ax in &grid {
            for &ay in &grid {
                for &tx in &grid {
                    for &ty in &grid {
                        let obs: TokenizedObservation<f32> = tok.tokenize(&world([ax, ay], [tx, ty], 0)).unwrap();
                        let key: Vec<u32> = obs
                            .vis_tokens
                            .data()
                            .iter()
                            .chain(obs.state.data())
                            .map(|v| v.to_bits())
                            .collect();
                        seen.insert(key);
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(seen.len(), count);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = PolicyConfig {
            n_vis_tokens: 9,
            n_lang_tokens: 2,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            ..PolicyConfig::default()
        };
        let obs: TokenizedObservation<f32> = tokenize(&world([0.5, 0.5], [0.1, 0.1], 1), &cfg).unwrap();
        obs.check(&cfg).unwrap();
        assert!(tokenize::<f32>(&world([0.5, 0.5], [0.1, 0.1], 0), &PolicyConfig {
            n_vis_tokens: 10,
            ..cfg
        })
        .unwrap_err()
        .is_config());
    }
}
