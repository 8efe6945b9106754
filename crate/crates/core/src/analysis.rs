//! Layer-redundancy diagnostics: adjacent-layer similarity, single-layer
//! skip sensitivity and progressive removal.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    forward_on_tape, skip_layers, BoundParams, ForwardOptions, LayerSkip, ObsBatch, PolicyParams,
    TokenizedObservation,
};
use crate::sim::{evaluate, ExecutorConfig, LearnedPolicy, Suite};
use crate::tensor::{Rng, Scalar, Tape, Tensor};
use crate::train::Example;

pub const DEFAULT_TAU_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const NOISE_STREAM: u64 = 0x51a1;
const SIM_BATCH: usize = 64;

/// Mean cosine similarity between consecutive-layer action-token states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub taus: Vec<f64>,
    /// `values[layer][tau]` compares the input and output of `layer`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// CSV with columns `layer,tau,cosine`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "tau", "cosine"])?;
        for (layer, row) in self.values.iter().enumerate() {
            for (tau, c) in self.taus.iter().zip(row) {
                out.write_record([layer.to_string(), format!("{tau}"), format!("{c:.8}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Cosine of two vectors, clamped to `[-1, 1]`; zero if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// For each τ, builds `a_τ = τa + (1-τ)ε` from the eval actions and averages
/// per-token cosine similarity across every layer boundary. Skipped layers
/// report similarity 1.
pub fn cosine_similarity_profile<F: Scalar>(
    params: &PolicyParams<F>,
    eval: &[Example<F>],
    tau_grid: &[f64],
    skip: &LayerSkip,
    seed: u64,
) -> Result<SimilarityMatrix> {
    if eval.is_empty() {
        return Err(Error::config("similarity profile needs a nonempty eval set"));
    }
    if tau_grid.is_empty() || tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("tau grid must be nonempty and within [0, 1]"));
    }
    let cfg = params.config();
    let (h, d, width) = (cfg.chunk_len, cfg.action_dim, cfg.d_model);
    let start = cfg.n_state_tokens;
    let mut values = vec![vec![0.0; tau_grid.len()]; cfg.n_layers];
    let mut rng = Rng::new(seed, NOISE_STREAM);
    let noise: Vec<f64> = (0..eval.len() * h * d).map(|_| rng.normal()).collect();
    let opts = ForwardOptions {
        skip: skip.clone(),
        collect_hidden: true,
        ..ForwardOptions::default()
    };
    for (ti, &tau) in tau_grid.iter().enumerate() {
        let mut sums = vec![0.0; cfg.n_layers];
        for (bi, group) in eval.chunks(SIM_BATCH).enumerate() {
            let b = group.len();
            let obs: Vec<&TokenizedObservation<F>> = group.iter().map(|e| &e.obs).collect();
            let batch = ObsBatch::stack(&obs, cfg)?;
            let offset = bi * SIM_BATCH * h * d;
            let mut noisy = Vec::with_capacity(b * h * d);
            for (i, ex) in group.iter().enumerate() {
                for (j, a) in ex.actions.data().iter().enumerate() {
                    let eps = noise[offset + i * h * d + j];
                    noisy.push(F::of(tau * a.as_f64() + (1.0 - tau) * eps));
                }
            }
            let tape = Tape::inference();
            let bound = BoundParams::bind(&tape, params, false);
            let actions = tape.constant(Tensor::new(&[b, h, d], noisy)?);
            let trace = forward_on_tape(&bound, &batch, actions, &vec![tau; b], &opts)?;
            let hs = &trace.hidden_suffix;
            let s = cfg.suffix_len();
            for (layer, sum) in sums.iter_mut().enumerate() {
                let (x, y) = (hs[layer].data(), hs[layer + 1].data());
                for row in 0..b {
                    for tok in start..start + h {
                        let at = (row * s + tok) * width;
                        let xa: Vec<f64> = x[at..at + width].iter().map(|v| v.as_f64()).collect();
                        let ya: Vec<f64> = y[at..at + width].iter().map(|v| v.as_f64()).collect();
                        *sum += cosine(&xa, &ya);
                    }
                }
            }
        }
        let count = (eval.len() * h) as f64;
        for (layer, sum) in sums.into_iter().enumerate() {
            values[layer][ti] = sum / count;
        }
    }
    Ok(SimilarityMatrix {
        taus: tau_grid.to_vec(),
        values,
    })
}

/// Closed-loop evaluation settings shared by the skip analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub suite: Suite,
    pub n_episodes: usize,
    pub base_seed: u64,
    pub n_diffusion_steps: usize,
    pub executor: ExecutorConfig,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            suite: Suite::Static,
            n_episodes: 200,
            base_seed: 10_000,
            n_diffusion_steps: crate::flow::DEFAULT_DIFFUSION_STEPS,
            executor: ExecutorConfig::default(),
        }
    }
}

/// Success rate of `params` with `skip` applied.
pub fn success_rate(params: &PolicyParams<f32>, skip: LayerSkip, spec: &EvalSpec) -> Result<f64> {
    let policy = LearnedPolicy::new(params)?
        .with_skip(skip)
        .with_steps(spec.n_diffusion_steps);
    Ok(evaluate(&policy, spec.suite, spec.n_episodes, spec.base_seed, &spec.executor)?.success_rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRow {
    pub layer: usize,
    pub skipped: f64,
    pub drop: f64,
}

/// Success-rate cost of bypassing each layer on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    pub baseline: f64,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    pub fn from_rates(baseline: f64, skipped: &[f64]) -> Self {
        let rows = skipped
            .iter()
            .enumerate()
            .map(|(layer, &s)| SensitivityRow {
                layer,
                skipped: s,
                drop: baseline - s,
            })
            .collect();
        Self { baseline, rows }
    }

    /// Layers from least to most harmful to remove; ties keep layer order.
    pub fn ascending_order(&self) -> Vec<usize> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.drop.total_cmp(&b.drop).then(a.layer.cmp(&b.layer)));
        rows.into_iter().map(|r| r.layer).collect()
    }

    /// Largest over smallest drop. Infinite when the smallest is not
    /// positive but the largest is; NaN when no layer hurts.
    pub fn spread_ratio(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.drop).fold(f64::NEG_INFINITY, f64::max);
        let min = self.rows.iter().map(|r| r.drop).fold(f64::INFINITY, f64::min);
        if !(max > 0.0) {
            f64::NAN
        } else if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// CSV with columns `layer,baseline,skipped,drop`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "baseline", "skipped", "drop"])?;
        for r in &self.rows {
            out.write_record([
                r.layer.to_string(),
                format!("{:.6}", self.baseline),
                format!("{:.6}", r.skipped),
                format!("{:.6}", r.drop),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evaluates the unmodified policy, then each single-layer skip.
pub fn sensitivity_sweep(params: &PolicyParams<f32>, spec: &EvalSpec) -> Result<SensitivityTable> {
    let cfg = params.config();
    let baseline = success_rate(params, LayerSkip::none(), spec)?;
    let skipped = (0..cfg.n_layers)
        .map(|l| success_rate(params, skip_layers(cfg, [l])?, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityTable::from_rates(baseline, &skipped))
}

/// Success rate after removing the first `n` layers of an order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveCurve {
    pub order: Vec<usize>,
    pub success: Vec<f64>,
}

impl ProgressiveCurve {
    /// CSV with columns `n_removed,success_rate`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n_removed", "success_rate"])?;
        for (n, s) in self.success.iter().enumerate() {
            out.write_record([n.to_string(), format!("{s:.6}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Skips `order[..n]` for `n = 0..=max_removed`.
pub fn progressive_skip_eval(
    params: &PolicyParams<f32>,
    order: &[usize],
    max_removed: usize,
    spec: &EvalSpec,
) -> Result<ProgressiveCurve> {
    let cfg = params.config();
    if max_removed >= cfg.n_layers || max_removed > order.len() {
        return Err(Error::config(format!(
            "max_removed = {max_removed} must be below n_layers = {} and within the order",
            cfg.n_layers
        )));
    }
    let success = (0..=max_removed)
        .map(|n| {
            let skip = if n == 0 {
                LayerSkip::none()
            } else {
                skip_layers(cfg, order[..n].iter().copied())?
            };
            success_rate(params, skip, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProgressiveCurve {
        order: order.to_vec(),
        success,
    })
}
