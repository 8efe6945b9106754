use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

pub type Vec2 = [f64; 2];

/// Maximum per-step agent displacement, arena units.
pub const A_MAX: f64 = 0.1;
/// Maximum goal speed in the dynamic suite, arena units per step.
pub const V_MAX: f64 = 0.01;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const HORIZON: usize = 200;
/// Number of task ids understood by the tokenizer.
pub const N_TASKS: usize = 2;

/// Minimum initial distance between the agent and each object, and between
/// the two objects.
const MIN_SEPARATION: f64 = 0.2;
const SPAWN_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Static,
    Dynamic,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Suite::Static),
            "dynamic" => Ok(Suite::Dynamic),
            other => Err(format!("unknown suite {other:?} (expected static or dynamic)")),
        }
    }
}

/// Two objects on the unit square; `task_id` names the one to reach.
/// `target_vel` moves the selected object and is zero in the static suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: Vec2,
    pub target_pos: Vec2,
    pub target_vel: Vec2,
    pub distractor_pos: Vec2,
    pub task_id: usize,
    pub time_step: usize,
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_arena(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Scales `d` down to norm `max` if it is longer.
pub fn clip_norm(d: Vec2, max: f64) -> Vec2 {
    let n = d[0].hypot(d[1]);
    if n > max {
        [d[0] * max / n, d[1] * max / n]
    } else {
        d
    }
}

impl WorldState {
    /// Random initial world with well-separated agent and objects.
    pub fn sample(suite: Suite, rng: &mut Rng) -> Self {
        let point = |rng: &mut Rng| {
            [
                rng.uniform_range(SPAWN_MARGIN, 1.0 - SPAWN_MARGIN),
                rng.uniform_range(SPAWN_MARGIN, 1.0 - SPAWN_MARGIN),
            ]
        };
        loop {
            let agent_pos = point(rng);
            let target_pos = point(rng);
            let distractor_pos = point(rng);
            let task_id = rng.below(N_TASKS);
            let speed = rng.uniform_range(0.0, V_MAX);
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let separated = dist(agent_pos, target_pos) >= MIN_SEPARATION
                && dist(agent_pos, distractor_pos) >= MIN_SEPARATION
                && dist(target_pos, distractor_pos) >= MIN_SEPARATION;
            if !separated {
                continue;
            }
            let target_vel = match suite {
                Suite::Static => [0.0, 0.0],
                Suite::Dynamic => [speed * angle.cos(), speed * angle.sin()],
            };
            return Self {
                agent_pos,
                target_pos,
                target_vel,
                distractor_pos,
                task_id,
                time_step: 0,
            };
        }
    }

    /// Position of the object selected by `task_id`.
    pub fn goal(&self) -> Vec2 {
        if self.task_id == 0 {
            self.target_pos
        } else {
            self.distractor_pos
        }
    }

    fn goal_mut(&mut self) -> &mut Vec2 {
        if self.task_id == 0 {
            &mut self.target_pos
        } else {
            &mut self.distractor_pos
        }
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.agent_pos, self.goal())
    }

    pub fn is_success(&self) -> bool {
        self.goal_distance() < SUCCESS_RADIUS
    }

    /// Moves the agent by `move_` (clipped to `A_MAX`), advances the goal
    /// with reflection at the walls, and increments time.
    pub fn step(&mut self, move_: Vec2) {
        let d = clip_norm(move_, A_MAX);
        self.agent_pos = clamp_arena([self.agent_pos[0] + d[0], self.agent_pos[1] + d[1]]);
        let mut vel = self.target_vel;
        let goal = self.goal_mut();
        for axis in 0..2 {
            let mut x = goal[axis] + vel[axis];
            if x < 0.0 {
                x = -x;
                vel[axis] = -vel[axis];
            } else if x > 1.0 {
                x = 2.0 - x;
                vel[axis] = -vel[axis];
            }
            goal[axis] = x;
        }
        self.target_vel = vel;
        self.time_step += 1;
    }

    /// Flat record `[agent, target, vel, distractor, task_id, time_step]`.
    pub fn to_record(&self) -> [f64; 10] {
        [
            self.agent_pos[0],
            self.agent_pos[1],
            self.target_pos[0],
            self.target_pos[1],
            self.target_vel[0],
            self.target_vel[1],
            self.distractor_pos[0],
            self.distractor_pos[1],
            self.task_id as f64,
            self.time_step as f64,
        ]
    }

    pub fn from_record(r: &[f64]) -> Self {
        Self {
            agent_pos: [r[0], r[1]],
            target_pos: [r[2], r[3]],
            target_vel: [r[4], r[5]],
            distractor_pos: [r[6], r[7]],
            task_id: r[8] as usize,
            time_step: r[9] as usize,
        }
    }
}
