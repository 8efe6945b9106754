use std::io::Write;

use serde::{Deserialize, Serialize};

use super::expert::expert_controller;
use super::tokenize::Tokenizer;
use super::world::{Suite, Vec2, WorldState, A_MAX, HORIZON};
use crate::error::{Error, Result};
use crate::flow::{sample_chunks, SkippedPolicy, DEFAULT_DIFFUSION_STEPS};
use crate::policy::{LayerSkip, ObsBatch, PolicyParams, TokenizedObservation};
use crate::tensor::{Rng, Tensor};

const WORLD_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

/// Receding-horizon execution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub chunk_len: usize,
    /// Actions played between consecutive policy queries.
    pub actions_per_replan: usize,
    /// Age, in control steps, of the observation each query sees.
    pub staleness_frames: usize,
    pub ensemble_decay: f64,
    /// When false only the newest chunk drives the agent.
    pub temporal_ensemble: bool,
    pub horizon: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            chunk_len: 8,
            actions_per_replan: 4,
            staleness_frames: 0,
            ensemble_decay: 0.1,
            temporal_ensemble: true,
            horizon: HORIZON,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions_per_replan == 0 || self.actions_per_replan > self.chunk_len {
            return Err(Error::config(format!(
                "actions_per_replan must be in 1..={}",
                self.chunk_len
            )));
        }
        if !(self.ensemble_decay.is_finite() && self.ensemble_decay >= 0.0) {
            return Err(Error::config("ensemble_decay must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Frames elapsed while an inference of `latency_ms` completes.
pub fn staleness_model(latency_ms: f64, control_period_ms: f64) -> Result<usize> {
    if !(control_period_ms > 0.0) || !(latency_ms >= 0.0) || !latency_ms.is_finite() {
        return Err(Error::Domain {
            op: "staleness_model",
            msg: format!("latency {latency_ms} ms, period {control_period_ms} ms"),
        });
    }
    Ok((latency_ms / control_period_ms).ceil() as usize)
}

/// Hardware-independent staleness: `ceil(c0 + c1·n_layers)` frames,
/// floored at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearStaleness {
    pub c0: f64,
    pub c1: f64,
}

impl Default for LinearStaleness {
    /// Eight layers give 11 frames and four layers give 4.
    fn default() -> Self {
        Self { c0: -3.0, c1: 1.75 }
    }
}

impl LinearStaleness {
    pub fn frames(&self, n_layers: usize) -> usize {
        (self.c0 + self.c1 * n_layers as f64).ceil().max(0.0) as usize
    }
}

/// Normalised temporal-ensemble weights `∝ exp(−m·age)`.
pub fn ensemble_weights(ages: &[usize], decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = ages.iter().map(|&a| (-decay * a as f64).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Anything that maps observed worlds to normalised action chunks.
pub trait ChunkPolicy {
    fn chunk_len(&self) -> usize;

    /// One `[H, 2]` chunk per world; row `i` draws randomness from `rngs[i]`.
    fn act(&self, worlds: &[WorldState], rngs: &mut [Rng]) -> Result<Vec<Tensor<f64>>>;
}

/// The scripted demonstrator, with privileged access to the world.
#[derive(Debug, Clone, Copy)]
pub struct ExpertPolicy {
    pub chunk_len: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn act(&self, worlds: &[WorldState], rngs: &mut [Rng]) -> Result<Vec<Tensor<f64>>> {
        Ok(worlds
            .iter()
            .zip(rngs.iter_mut())
            .map(|(w, rng)| expert_controller(w, self.chunk_len, rng))
            .collect())
    }
}

/// A trained policy sampled with Euler integration, optionally with layers
/// bypassed.
pub struct LearnedPolicy<'a> {
    pub params: &'a PolicyParams<f32>,
    pub skip: LayerSkip,
    pub n_steps: usize,
    tokenizer: Tokenizer,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(params: &'a PolicyParams<f32>) -> Result<Self> {
        Ok(Self {
            params,
            skip: LayerSkip::none(),
            n_steps: DEFAULT_DIFFUSION_STEPS,
            tokenizer: Tokenizer::new(params.config())?,
        })
    }

    pub fn with_skip(mut self, skip: LayerSkip) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }
}

impl ChunkPolicy for LearnedPolicy<'_> {
    fn chunk_len(&self) -> usize {
        self.params.config().chunk_len
    }

    fn act(&self, worlds: &[WorldState], rngs: &mut [Rng]) -> Result<Vec<Tensor<f64>>> {
        let cfg = self.params.config();
        let obs = worlds
            .iter()
            .map(|w| self.tokenizer.tokenize(w))
            .collect::<Result<Vec<TokenizedObservation<f32>>>>()?;
        let refs: Vec<&TokenizedObservation<f32>> = obs.iter().collect();
        let batch = ObsBatch::stack(&refs, cfg)?;
        let model = SkippedPolicy {
            params: self.params,
            skip: &self.skip,
        };
        let chunks = sample_chunks(&model, &batch, rngs, self.n_steps)?;
        let per = cfg.chunk_len * cfg.action_dim;
        Ok(chunks
            .data()
            .chunks(per)
            .map(|c| {
                let v = c.iter().map(|&x| x as f64).collect();
                Tensor::new(&[cfg.chunk_len, cfg.action_dim], v).expect("chunk shape")
            })
            .collect())
    }
}

/// One rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    /// World at every control step, starting with the initial state.
    pub observations: Vec<WorldState>,
    /// Executed (clipped) agent displacements.
    pub actions: Vec<Vec2>,
    pub success: bool,
    /// Steps until success, or the horizon.
    pub steps: usize,
    pub final_dist: f64,
}

impl Episode {
    pub fn initial(&self) -> &WorldState {
        &self.observations[0]
    }
}

struct LiveChunk {
    start: usize,
    waypoints: Vec<Vec2>,
}

struct Rollout {
    world: WorldState,
    policy_rng: Rng,
    live: Vec<LiveChunk>,
    episode: Episode,
    done: bool,
}

fn waypoints(anchor: Vec2, chunk: &Tensor<f64>) -> Vec<Vec2> {
    let mut p = anchor;
    chunk
        .data()
        .chunks(2)
        .map(|a| {
            p = [p[0] + A_MAX * a[0], p[1] + A_MAX * a[1]];
            p
        })
        .collect()
}

fn ensembled_waypoint(live: &[LiveChunk], t: usize, exec: &ExecutorConfig) -> Vec2 {
    let usable: Vec<&LiveChunk> = live
        .iter()
        .filter(|c| t - c.start < c.waypoints.len())
        .collect();
    if !exec.temporal_ensemble || usable.len() == 1 {
        let newest = usable.last().expect("a live chunk");
        return newest.waypoints[t - newest.start];
    }
    let ages: Vec<usize> = usable.iter().map(|c| t - c.start).collect();
    let weights = ensemble_weights(&ages, exec.ensemble_decay);
    let mut w = [0.0; 2];
    for (c, wt) in usable.iter().zip(weights) {
        let p = c.waypoints[t - c.start];
        w[0] += wt * p[0];
        w[1] += wt * p[1];
    }
    w
}

/// Runs all episodes in lockstep so each replan is a single batched query.
/// Each episode's outcome depends only on its own initial world and noise
/// stream.
pub fn run_episodes<P: ChunkPolicy>(
    policy: &P,
    starts: Vec<(u64, WorldState, Rng)>,
    exec: &ExecutorConfig,
) -> Result<Vec<Episode>> {
    exec.validate()?;
    if policy.chunk_len() != exec.chunk_len {
        return Err(Error::config(format!(
            "policy chunk length {} differs from executor chunk length {}",
            policy.chunk_len(),
            exec.chunk_len
        )));
    }
    let mut runs: Vec<Rollout> = starts
        .into_iter()
        .map(|(seed, world, policy_rng)| Rollout {
            world,
            policy_rng,
            live: Vec::new(),
            episode: Episode {
                seed,
                observations: vec![world],
                actions: Vec::new(),
                success: world.is_success(),
                steps: 0,
                final_dist: world.goal_distance(),
            },
            done: world.is_success(),
        })
        .collect();
    for t in 0..exec.horizon {
        let active: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].done).collect();
        if active.is_empty() {
            break;
        }
        if t % exec.actions_per_replan == 0 {
            let observed: Vec<WorldState> = active
                .iter()
                .map(|&i| runs[i].episode.observations[t.saturating_sub(exec.staleness_frames)])
                .collect();
            let mut rngs: Vec<Rng> = active.iter().map(|&i| runs[i].policy_rng.clone()).collect();
            let chunks = policy.act(&observed, &mut rngs)?;
            for (((&i, rng), chunk), obs) in active.iter().zip(rngs).zip(chunks).zip(&observed) {
                let run = &mut runs[i];
                run.policy_rng = rng;
                run.live.push(LiveChunk {
                    start: t,
                    waypoints: waypoints(obs.agent_pos, &chunk),
                });
            }
        }
        for &i in &active {
            let run = &mut runs[i];
            let target = ensembled_waypoint(&run.live, t, exec);
            let before = run.world.agent_pos;
            run.world.step([target[0] - before[0], target[1] - before[1]]);
            let after = run.world.agent_pos;
            run.episode.actions.push([after[0] - before[0], after[1] - before[1]]);
            run.episode.observations.push(run.world);
            run.live.retain(|c| t + 1 - c.start < c.waypoints.len());
            run.episode.steps = t + 1;
            run.episode.final_dist = run.world.goal_distance();
            if run.world.is_success() {
                run.episode.success = true;
                run.done = true;
            }
        }
    }
    Ok(runs.into_iter().map(|r| r.episode).collect())
}

fn episode_start(suite: Suite, seed: u64) -> (u64, WorldState, Rng) {
    let world = WorldState::sample(suite, &mut Rng::new(seed, WORLD_STREAM));
    (seed, world, Rng::new(seed, POLICY_STREAM))
}

/// Rolls out one seeded episode.
pub fn run_episode<P: ChunkPolicy>(policy: &P, suite: Suite, seed: u64, exec: &ExecutorConfig) -> Result<Episode> {
    Ok(run_episodes(policy, vec![episode_start(suite, seed)], exec)?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: Vec<Episode>,
}

impl EvalReport {
    /// Per-episode CSV: `episode,seed,success,steps,final_dist`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["episode", "seed", "success", "steps", "final_dist"])?;
        for (i, e) in self.episodes.iter().enumerate() {
            out.write_record([
                i.to_string(),
                e.seed.to_string(),
                u8::from(e.success).to_string(),
                e.steps.to_string(),
                format!("{:.6}", e.final_dist),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean success over episodes seeded `base_seed, base_seed + 1, …`.
pub fn evaluate<P: ChunkPolicy>(
    policy: &P,
    suite: Suite,
    n_episodes: usize,
    base_seed: u64,
    exec: &ExecutorConfig,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be positive"));
    }
    let starts = (0..n_episodes as u64)
        .map(|i| episode_start(suite, base_seed.wrapping_add(i)))
        .collect();
    let episodes = run_episodes(policy, starts, exec)?;
    let wins = episodes.iter().filter(|e| e.success).count();
    Ok(EvalReport {
        success_rate: wins as f64 / n_episodes as f64,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::dist;

    #[test]
    fn staleness_examples() {
        assert_eq!(staleness_model(364.0, 33.3).unwrap(), 11);
        assert_eq!(staleness_model(110.0, 33.3).unwrap(), 4);
        assert_eq!(staleness_model(0.0, 20.0).unwrap(), 0);
        assert!(staleness_model(10.0, 0.0).is_err());
        let lin = LinearStaleness::default();
        assert_eq!(lin.frames(8), 11);
        assert_eq!(lin.frames(4), 4);
        assert_eq!(lin.frames(1), 0);
    }

    #[test]
    fn weights_normalise() {
        for ages in [vec![0], vec![0, 4], vec![3, 7, 1], vec![0, 1, 2, 3, 4, 5, 6, 7]] {
            let w = ensemble_weights(&ages, 0.1);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(ensemble_weights(&[5], 0.3), vec![1.0]);
        let w = ensemble_weights(&[0, 4], 0.1);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn single_chunk_is_played_exactly() {
        let live = vec![LiveChunk {
            start: 2,
            waypoints: vec![[0.1, 0.2], [0.3, 0.4]],
        }];
        assert_eq!(ensembled_waypoint(&live, 3, &ExecutorConfig::default()), [0.3, 0.4]);
    }

    #[test]
    fn open_loop_expert_solves_static_task() {
        let exec = ExecutorConfig {
            actions_per_replan: 8,
            temporal_ensemble: false,
            ..ExecutorConfig::default()
        };
        let policy = ExpertPolicy { chunk_len: 8 };
        for seed in 0..50 {
            let ep = run_episode(&policy, Suite::Static, seed, &exec).unwrap();
            assert!(ep.success, "seed {seed}");
        }
    }

    #[test]
    fn displacement_never_exceeds_a_max() {
        let policy = ExpertPolicy { chunk_len: 8 };
        let exec = ExecutorConfig {
            staleness_frames: 11,
            ..ExecutorConfig::default()
        };
        let report = evaluate(&policy, Suite::Dynamic, 30, 0, &exec).unwrap();
        for ep in &report.episodes {
            for a in &ep.actions {
                assert!(a[0].hypot(a[1]) <= A_MAX + 1e-12);
            }
            assert_eq!(ep.observations.len(), ep.steps + 1);
            let last = ep.observations.last().unwrap();
            assert_eq!(ep.success, dist(last.agent_pos, last.goal()) < 0.05);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_batch_independent() {
        let policy = ExpertPolicy { chunk_len: 8 };
        let exec = ExecutorConfig {
            staleness_frames: 4,
            ..ExecutorConfig::default()
        };
        let a = evaluate(&policy, Suite::Dynamic, 20, 7, &exec).unwrap();
        let b = evaluate(&policy, Suite::Dynamic, 20, 7, &exec).unwrap();
        assert_eq!(a, b);
        let single = run_episode(&policy, Suite::Dynamic, 12, &exec).unwrap();
        assert_eq!(single, a.episodes[5]);
    }

    #[test]
    fn rejects_bad_executor() {
        let policy = ExpertPolicy { chunk_len: 8 };
        let exec = ExecutorConfig {
            actions_per_replan: 9,
            ..ExecutorConfig::default()
        };
        assert!(run_episode(&policy, Suite::Static, 0, &exec).unwrap_err().is_config());
        let mismatched = ExpertPolicy { chunk_len: 4 };
        assert!(run_episode(&mismatched, Suite::Static, 0, &ExecutorConfig::default()).is_err());
    }

    #[test]
    fn csv_log_columns() {
        let policy = ExpertPolicy { chunk_len: 8 };
        let report = evaluate(&policy, Suite::Static, 3, 0, &ExecutorConfig::default()).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,seed,success,steps,final_dist\n0,0,1,"));
        assert_eq!(text.lines().count(), 4);
    }
}
