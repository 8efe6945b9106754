//! Helpers shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use shallowpi_core::distill::{attn_layers, uniform_subsample, AttnPlacement, AttnScope};
use shallowpi_core::flow::{FlowBatch, FlowSample};
use shallowpi_core::policy::{
    forward_on_tape, BoundParams, ForwardOptions, ObsBatch, PolicyConfig, PolicyParams,
    TokenizedObservation,
};
use shallowpi_core::train::{objective_on_tape, LossWeights, Objective};
use shallowpi_core::{Rng, Scalar, Tape, Tensor};

/// Random small architecture: at most 3 layers, width at most 16, at most
/// 4 heads.
pub fn tiny_config(rng: &mut Rng) -> PolicyConfig {
    let n_heads = 1 + rng.below(4);
    let d_head = 1 + rng.below(16 / n_heads);
    PolicyConfig {
        n_layers: 1 + rng.below(3),
        d_model: n_heads * d_head,
        n_heads,
        d_head,
        d_ff: 4 + rng.below(13),
        n_vis_tokens: 1 + rng.below(6),
        n_lang_tokens: rng.below(3),
        n_state_tokens: rng.below(2),
        state_dim: 1 + rng.below(3),
        chunk_len: 1 + rng.below(4),
        action_dim: 1 + rng.below(3),
        tau_embed: 2 * (1 + rng.below(4)),
        codebook_seed: 0,
    }
}

pub fn random_obs<F: Scalar>(cfg: &PolicyConfig, rng: &mut Rng) -> TokenizedObservation<F> {
    TokenizedObservation {
        vis_tokens: Tensor::randn(&[cfg.n_vis_tokens, cfg.d_model], 1.0, rng),
        lang_tokens: Tensor::randn(&[cfg.n_lang_tokens, cfg.d_model], 1.0, rng),
        state: Tensor::randn(&[cfg.state_dim], 1.0, rng),
    }
}

pub fn random_batch<F: Scalar>(cfg: &PolicyConfig, batch: usize, rng: &mut Rng) -> FlowBatch<F> {
    let obs: Vec<TokenizedObservation<F>> = (0..batch).map(|_| random_obs(cfg, rng)).collect();
    let refs: Vec<&TokenizedObservation<F>> = obs.iter().collect();
    let shape = [cfg.chunk_len, cfg.action_dim];
    let samples: Vec<FlowSample<F>> = (0..batch)
        .map(|_| {
            let a = Tensor::randn(&shape, 1.0, rng);
            let e = Tensor::randn(&shape, 1.0, rng);
            FlowSample::from_parts(a, e, rng.uniform()).unwrap()
        })
        .collect();
    FlowBatch::new(cfg, &refs, &samples).unwrap()
}

/// Everything needed to evaluate one weighted objective.
pub struct ObjectiveCase {
    pub student: PolicyParams<f64>,
    pub teacher: PolicyParams<f64>,
    pub batch: FlowBatch<f64>,
    pub weights: LossWeights,
    pub layers: (usize, usize),
    pub scope: AttnScope,
}

impl ObjectiveCase {
    /// Independent random student and teacher; the student is no deeper.
    pub fn random(seed: u64, weights: LossWeights) -> Self {
        let mut rng = Rng::new(seed, 0x9e);
        let tcfg = tiny_config(&mut rng);
        let s_depth = 1 + rng.below(tcfg.n_layers);
        let scfg = tcfg.with_layers(s_depth);
        let teacher = PolicyParams::<f64>::init(&tcfg, &mut rng).unwrap();
        let student = PolicyParams::<f64>::init(&scfg, &mut rng).unwrap();
        let batch = random_batch(&tcfg, 1 + rng.below(3), &mut rng);
        let map = uniform_subsample(tcfg.n_layers, s_depth).unwrap();
        let placement = [AttnPlacement::Initial, AttnPlacement::Middle, AttnPlacement::Later][rng.below(3)];
        let scope = if rng.below(2) == 0 {
            AttnScope::ActionOnly
        } else {
            AttnScope::AllTokens
        };
        Self {
            student,
            teacher,
            batch,
            weights,
            layers: attn_layers(placement, &map),
            scope,
        }
    }

    fn objective(&self) -> Objective<'_, f64> {
        Objective {
            weights: self.weights,
            teacher: Some(&self.teacher),
            attn_layers: Some(self.layers),
            attn_scope: self.scope,
        }
    }

    pub fn loss_at(&self, student: &PolicyParams<f64>) -> f64 {
        let tape = Tape::inference();
        let bound = BoundParams::bind(&tape, student, false);
        let terms = objective_on_tape(&bound, &self.batch, &self.objective()).unwrap();
        terms.total.value().item()
    }

    /// Analytic gradient for every student tensor, in `iter()` order.
    pub fn gradients(&self) -> Vec<(String, Tensor<f64>)> {
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &self.student, true);
        let terms = objective_on_tape(&bound, &self.batch, &self.objective()).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        bound
            .iter()
            .map(|(name, var)| (name.to_string(), grads.wrt(var)))
            .collect()
    }

    /// Worst relative error of analytic against central-difference
    /// derivatives: along random directions and at the largest coordinates.
    pub fn max_relative_error(&self, seed: u64) -> f64 {
        let grads = self.gradients();
        let mut rng = Rng::new(seed, 0xfd);
        let mut worst: f64 = 0.0;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-10);

        for _ in 0..3 {
            let h = 1e-6;
            let dirs: Vec<Tensor<f64>> = grads
                .iter()
                .map(|(_, g)| Tensor::randn(g.shape(), 1.0, &mut rng))
                .collect();
            let analytic: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|((_, g), d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let shifted = |sign: f64| {
                let mut p = self.student.clone();
                for ((name, _), d) in grads.iter().zip(&dirs) {
                    let t = p.get_mut(name).unwrap();
                    for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
                        *x += sign * h * dx;
                    }
                }
                self.loss_at(&p)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            worst = worst.max(rel(analytic, numeric));
        }

        let mut coords: Vec<(f64, usize, usize)> = grads
            .iter()
            .enumerate()
            .flat_map(|(ti, (_, g))| g.data().iter().enumerate().map(move |(i, v)| (v.abs(), ti, i)))
            .collect();
        coords.sort_by(|a, b| b.0.total_cmp(&a.0));
        for &(_, ti, i) in coords.iter().take(5) {
            let (name, g) = &grads[ti];
            let h = 1e-6 * (1.0 + self.student.get(name).unwrap().data()[i].abs());
            let shifted = |delta: f64| {
                let mut p = self.student.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                self.loss_at(&p)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max(rel(g.data()[i], numeric));
        }
        worst
    }
}

/// Largest gap between full and cached velocities along a 10-step Euler
/// path, at 32-bit.
pub fn cache_gap(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 0xca);
    let cfg = tiny_config(&mut rng);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let cache = params.build_cache(&obs).unwrap();
    let mut a: Tensor<f32> = Tensor::randn(&[cfg.chunk_len, cfg.action_dim], 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    let n = 10;
    for k in 0..n {
        let tau = k as f64 / n as f64;
        let full = params.forward(&obs, &a, tau, None).unwrap().velocity;
        let (cached, _) = params.forward_cached(&cache, &obs.state, &a, tau, None).unwrap();
        worst = worst.max(full.max_abs_diff(&cached).unwrap());
        a = a.add(&full.scale(1.0 / n as f32)).unwrap();
    }
    worst
}

/// True when every prefix hidden state is bitwise unchanged by new
/// actions, τ and proprioceptive state.
pub fn prefix_is_masked(seed: u64) -> bool {
    let mut rng = Rng::new(seed, 0x3a);
    let cfg = tiny_config(&mut rng);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let mut other = obs.clone();
    other.state = Tensor::randn(&[cfg.state_dim], 1.0, &mut rng);
    let shape = [1, cfg.chunk_len, cfg.action_dim];
    let runs = [
        (obs.clone(), Tensor::randn(&shape, 1.0, &mut rng), rng.uniform()),
        (other, Tensor::randn(&shape, 3.0, &mut rng), rng.uniform()),
    ];
    let opts = ForwardOptions {
        collect_hidden: true,
        ..ForwardOptions::default()
    };
    let hidden: Vec<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> = runs
        .iter()
        .map(|(o, a, tau)| {
            let tape = Tape::inference();
            let bound = BoundParams::bind(&tape, &params, false);
            let batch = ObsBatch::stack(&[o], &cfg).unwrap();
            let trace = forward_on_tape(&bound, &batch, tape.constant(a.clone()), &[*tau], &opts).unwrap();
            (trace.hidden_prefix, trace.hidden_suffix)
        })
        .collect();
    let (p0, s0) = &hidden[0];
    let (p1, s1) = &hidden[1];
    assert_eq!(p0.len(), cfg.n_layers + 1);
    // The perturbation must actually reach the suffix for the check to mean anything.
    assert!(!s0.last().unwrap().bitwise_eq(s1.last().unwrap()));
    p0.iter().zip(p1).all(|(a, b)| a.bitwise_eq(b))
}
