use super::world::{clip_norm, WorldState, A_MAX};
use crate::tensor::{Rng, Tensor};

/// Proportional gain of the scripted demonstrator.
pub const EXPERT_GAIN: f64 = 0.5;
/// Standard deviation of the demonstrator's exploration noise, arena units.
pub const EXPERT_NOISE: f64 = 0.01;

/// Chunk of `chunk_len` displacements toward the goal, each clipped to
/// `A_MAX` and perturbed by Gaussian noise. Actions are returned divided by
/// `A_MAX`, shape `[H, 2]`.
pub fn expert_controller(world: &WorldState, chunk_len: usize, rng: &mut Rng) -> Tensor<f64> {
    let goal = world.goal();
    let mut p = world.agent_pos;
    let mut out = Vec::with_capacity(chunk_len * 2);
    for _ in 0..chunk_len {
        let d = clip_norm(
            [EXPERT_GAIN * (goal[0] - p[0]), EXPERT_GAIN * (goal[1] - p[1])],
            A_MAX,
        );
        p = [p[0] + d[0], p[1] + d[1]];
        for v in d {
            out.push((v + EXPERT_NOISE * rng.normal()) / A_MAX);
        }
    }
    Tensor::new(&[chunk_len, 2], out).expect("chunk shape")
}
