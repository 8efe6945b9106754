//! Flow-matching targets and Euler integration of the learned velocity field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    forward_on_tape, BoundParams, ForwardOptions, KVCache, LayerSkip, ObsBatch, PolicyConfig,
    PolicyParams, TokenizedObservation,
};
use crate::tensor::{concat, Rng, Scalar, Tape, Tensor, Var};

pub const DEFAULT_DIFFUSION_STEPS: usize = 10;

/// Distribution of the interpolation time τ used for training samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum TauDist {
    /// Uniform on `[0, 1)`.
    #[default]
    Uniform,
    Fixed(f64),
}

impl TauDist {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            TauDist::Uniform => rng.uniform(),
            TauDist::Fixed(t) => t,
        }
    }
}

/// One training target: `noisy = τ·action + (1−τ)·noise`, `target = action − noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<F> {
    pub action: Tensor<F>,
    pub noise: Tensor<F>,
    pub tau: f64,
    pub noisy: Tensor<F>,
    pub target: Tensor<F>,
}

impl<F: Scalar> FlowSample<F> {
    pub fn from_parts(action: Tensor<F>, noise: Tensor<F>, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain {
                op: "FlowSample",
                msg: format!("tau {tau} outside [0, 1]"),
            });
        }
        let t = F::of(tau);
        let s = F::one() - t;
        let noisy = action.zip_map(&noise, "flow_interpolate", |a, e| t * a + s * e)?;
        let target = action.sub(&noise)?;
        Ok(Self {
            action,
            noise,
            tau,
            noisy,
            target,
        })
    }
}

/// Draws `ε ~ N(0, I)` and `τ ~ tau_dist` for a ground-truth chunk.
pub fn make_flow_sample<F: Scalar>(
    action: &Tensor<F>,
    rng: &mut Rng,
    tau_dist: TauDist,
) -> Result<FlowSample<F>> {
    if !action.all_finite() {
        return Err(Error::Numeric {
            op: "make_flow_sample",
            msg: "non-finite action".into(),
        });
    }
    let noise = Tensor::randn(action.shape(), 1.0, rng);
    let tau = tau_dist.sample(rng);
    FlowSample::from_parts(action.clone(), noise, tau)
}

/// Stacked observations and flow samples, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct FlowBatch<F> {
    pub obs: ObsBatch<F>,
    /// `[B, H, D]`
    pub noisy: Tensor<F>,
    /// `[B, H, D]`
    pub target: Tensor<F>,
    pub tau: Vec<f64>,
}

impl<F: Scalar> FlowBatch<F> {
    pub fn new(
        cfg: &PolicyConfig,
        obs: &[&TokenizedObservation<F>],
        samples: &[FlowSample<F>],
    ) -> Result<Self> {
        if obs.is_empty() || obs.len() != samples.len() {
            return Err(Error::shape("FlowBatch", &[obs.len()], &[samples.len()]));
        }
        let chunk = [1, cfg.chunk_len, cfg.action_dim];
        let stack = |pick: fn(&FlowSample<F>) -> &Tensor<F>| -> Result<Tensor<F>> {
            let rows = samples
                .iter()
                .map(|s| pick(s).reshape(&chunk))
                .collect::<Result<Vec<_>>>()?;
            concat(&rows.iter().collect::<Vec<_>>(), 0)
        };
        Ok(Self {
            obs: ObsBatch::stack(obs, cfg)?,
            noisy: stack(|s| &s.noisy)?,
            target: stack(|s| &s.target)?,
            tau: samples.iter().map(|s| s.tau).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Mean squared error between predicted velocities and flow targets.
pub fn task_loss_on_tape<'t, F: Scalar>(
    params: &BoundParams<'t, F>,
    batch: &FlowBatch<F>,
) -> Result<Var<'t, F>> {
    let tape = params.tape();
    let trace = forward_on_tape(
        params,
        &batch.obs,
        tape.constant(batch.noisy.clone()),
        &batch.tau,
        &ForwardOptions::default(),
    )?;
    trace.velocity.mse(tape.constant(batch.target.clone()))
}

pub fn task_loss<F: Scalar>(params: &PolicyParams<F>, batch: &FlowBatch<F>) -> Result<f64> {
    let tape = Tape::inference();
    let bound = BoundParams::bind(&tape, params, false);
    Ok(task_loss_on_tape(&bound, batch)?.value().item().as_f64())
}

/// A velocity field over action chunks, split into an observation-only
/// stage and a per-step stage.
pub trait VelocityModel<F: Scalar> {
    type Cache;

    /// `(H, D)`
    fn chunk_shape(&self) -> (usize, usize);

    fn build_cache(&self, obs: &ObsBatch<F>) -> Result<Self::Cache>;

    /// `a` is `[B, H, D]`; returns `[B, H, D]`.
    fn velocity(&self, cache: &Self::Cache, state: &Tensor<F>, a: &Tensor<F>, tau: &[f64]) -> Result<Tensor<F>>;
}

impl<F: Scalar> VelocityModel<F> for PolicyParams<F> {
    type Cache = KVCache<F>;

    fn chunk_shape(&self) -> (usize, usize) {
        (self.config().chunk_len, self.config().action_dim)
    }

    fn build_cache(&self, obs: &ObsBatch<F>) -> Result<KVCache<F>> {
        self.build_cache_batch(obs, &LayerSkip::none())
    }

    fn velocity(&self, cache: &KVCache<F>, state: &Tensor<F>, a: &Tensor<F>, tau: &[f64]) -> Result<Tensor<F>> {
        Ok(self.forward_cached_batch(cache, state, a, tau, None)?.0)
    }
}

/// A policy evaluated with a fixed set of layers bypassed.
#[derive(Debug, Clone, Copy)]
pub struct SkippedPolicy<'a, F> {
    pub params: &'a PolicyParams<F>,
    pub skip: &'a LayerSkip,
}

impl<F: Scalar> VelocityModel<F> for SkippedPolicy<'_, F> {
    type Cache = KVCache<F>;

    fn chunk_shape(&self) -> (usize, usize) {
        self.params.chunk_shape()
    }

    fn build_cache(&self, obs: &ObsBatch<F>) -> Result<KVCache<F>> {
        self.params.build_cache_batch(obs, self.skip)
    }

    fn velocity(&self, cache: &KVCache<F>, state: &Tensor<F>, a: &Tensor<F>, tau: &[f64]) -> Result<Tensor<F>> {
        self.params.velocity(cache, state, a, tau)
    }
}

/// Integrates from `noise` (τ = 0) to τ = 1 with `n_steps` Euler steps.
/// The observation stage runs once.
pub fn euler_from<F: Scalar, M: VelocityModel<F>>(
    model: &M,
    obs: &ObsBatch<F>,
    noise: Tensor<F>,
    n_steps: usize,
) -> Result<Tensor<F>> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be at least 1"));
    }
    let batch = obs.batch();
    let (h, d) = model.chunk_shape();
    if noise.shape() != [batch, h, d] {
        return Err(Error::shape("euler_integrate", &[batch, h, d], noise.shape()));
    }
    let cache = model.build_cache(obs)?;
    let delta = F::one() / F::of(n_steps as f64);
    let mut a = noise;
    for k in 0..n_steps {
        let tau = k as f64 / n_steps as f64;
        let v = model.velocity(&cache, &obs.state, &a, &vec![tau; batch])?;
        a = a.zip_map(&v, "euler_step", |x, v| x + delta * v)?;
    }
    Ok(a)
}

/// Samples one action chunk per observation, each batch row drawing its
/// noise from its own stream.
pub fn sample_chunks<F: Scalar, M: VelocityModel<F>>(
    model: &M,
    obs: &ObsBatch<F>,
    rngs: &mut [Rng],
    n_steps: usize,
) -> Result<Tensor<F>> {
    if rngs.len() != obs.batch() {
        return Err(Error::shape("sample_chunks", &[obs.batch()], &[rngs.len()]));
    }
    let (h, d) = model.chunk_shape();
    let mut noise = Vec::with_capacity(rngs.len() * h * d);
    for rng in rngs.iter_mut() {
        noise.extend(Tensor::<F>::randn(&[h, d], 1.0, rng).into_vec());
    }
    euler_from(model, obs, Tensor::new(&[rngs.len(), h, d], noise)?, n_steps)
}

/// Samples an `[H, D]` action chunk for one observation.
pub fn euler_integrate<F: Scalar, M: VelocityModel<F>>(
    model: &M,
    obs: &ObsBatch<F>,
    rng: &mut Rng,
    n_steps: usize,
) -> Result<Tensor<F>> {
    if obs.batch() != 1 {
        return Err(Error::shape("euler_integrate", &[1], &[obs.batch()]));
    }
    let (h, d) = model.chunk_shape();
    sample_chunks(model, obs, std::slice::from_mut(rng), n_steps)?.reshape(&[h, d])
}
