//! Wall-clock latency of full policy inference as depth and visual-token
//! count vary.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_integrate, DEFAULT_DIFFUSION_STEPS};
use crate::policy::{ObsBatch, PolicyConfig, PolicyParams, TokenizedObservation};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub base: PolicyConfig,
    pub depth_grid: Vec<usize>,
    pub token_grid: Vec<usize>,
    pub n_steps: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            base: PolicyConfig::default(),
            depth_grid: vec![2, 4, 6, 8, 12, 18],
            token_grid: vec![4, 16, 64],
            n_steps: DEFAULT_DIFFUSION_STEPS,
            trials: 30,
            warmup: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub const MIN_TRIALS: usize = 30;
    pub const MIN_WARMUP: usize = 5;

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.depth_grid.is_empty() || self.token_grid.is_empty() {
            return Err(Error::config("depth and token grids must be nonempty"));
        }
        if self.depth_grid.contains(&0) || self.token_grid.contains(&0) {
            return Err(Error::config("grid entries must be positive"));
        }
        if self.trials < Self::MIN_TRIALS || self.warmup < Self::MIN_WARMUP {
            return Err(Error::config(format!(
                "need at least {} trials and {} warmup runs",
                Self::MIN_TRIALS,
                Self::MIN_WARMUP
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be positive"));
        }
        Ok(())
    }

    /// Grid points: the depth axis at base tokens, then the token axis at
    /// base depth, without repeating the base point.
    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut pts: Vec<(usize, usize)> = Vec::new();
        let mut push = |p: (usize, usize)| {
            if !pts.contains(&p) {
                pts.push(p);
            }
        };
        for &l in &self.depth_grid {
            push((l, self.base.n_vis_tokens));
        }
        for &v in &self.token_grid {
            push((self.base.n_layers, v));
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub n_layers: usize,
    pub n_vis_tokens: usize,
    pub n_diffusion_steps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub hardware: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub dtype: String,
}

impl Environment {
    pub fn detect<F: Scalar>() -> Self {
        let hardware = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            hardware,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: 1,
            dtype: F::DTYPE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub environment: Environment,
}

impl LatencyReport {
    pub fn find(&self, n_layers: usize, n_vis_tokens: usize) -> Option<&LatencyRow> {
        self.rows
            .iter()
            .find(|r| r.n_layers == n_layers && r.n_vis_tokens == n_vis_tokens)
    }

    /// `median(a) / median(b)`.
    pub fn ratio(&self, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
        let get = |p: (usize, usize)| {
            self.find(p.0, p.1)
                .ok_or_else(|| Error::config(format!("no row for {} layers, {} tokens", p.0, p.1)))
        };
        Ok(get(a)?.median_ms / get(b)?.median_ms)
    }

    /// Rows at `n_vis_tokens`, sorted by depth.
    pub fn depth_axis(&self, n_vis_tokens: usize) -> Vec<&LatencyRow> {
        let mut rows: Vec<_> = self.rows.iter().filter(|r| r.n_vis_tokens == n_vis_tokens).collect();
        rows.sort_by_key(|r| r.n_layers);
        rows
    }

    /// Rows at `n_layers`, sorted by token count.
    pub fn token_axis(&self, n_layers: usize) -> Vec<&LatencyRow> {
        let mut rows: Vec<_> = self.rows.iter().filter(|r| r.n_layers == n_layers).collect();
        rows.sort_by_key(|r| r.n_vis_tokens);
        rows
    }

    /// CSV with one column per [`LatencyRow`] field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Value at fraction `q` of the sorted sample, linearly interpolated.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(median, p10, p90)` of a timing sample.
pub fn robust_stats(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (percentile(&s, 0.5), percentile(&s, 0.1), percentile(&s, 0.9))
}

/// Least-squares line `y = slope * x + intercept` and its R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::config("a line fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::config("x values are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Multiply-adds of one inference: prefix pass plus `n_steps` suffix passes.
pub fn inference_flops(cfg: &PolicyConfig, n_steps: usize) -> f64 {
    let d = cfg.d_model as f64;
    let inner = (cfg.n_heads * cfg.d_head) as f64;
    let ff = cfg.d_ff as f64;
    let p = cfg.prefix_len() as f64;
    let s = cfg.suffix_len() as f64;
    let dense = |tokens: f64| tokens * (4.0 * d * inner + 2.0 * d * ff);
    let prefix = dense(p) + 2.0 * p * p * inner;
    let suffix = dense(s) + 2.0 * s * (p + s) * inner;
    cfg.n_layers as f64 * (prefix + n_steps as f64 * suffix)
}

fn random_obs(cfg: &PolicyConfig, rng: &mut Rng) -> Result<ObsBatch<f32>> {
    let obs = TokenizedObservation {
        vis_tokens: Tensor::randn(&[cfg.n_vis_tokens, cfg.d_model], 1.0, rng),
        lang_tokens: Tensor::randn(&[cfg.n_lang_tokens, cfg.d_model], 1.0, rng),
        state: Tensor::randn(&[cfg.state_dim], 1.0, rng),
    };
    ObsBatch::stack(&[&obs], cfg)
}

/// Times `trials` full inferences (cache build plus `n_steps` Euler steps)
/// after `warmup` untimed ones, in milliseconds.
pub fn time_inference(cfg: &PolicyConfig, n_steps: usize, trials: usize, warmup: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed, 0);
    let params = PolicyParams::<f32>::init(cfg, &mut rng)?;
    let obs = random_obs(cfg, &mut rng)?;
    let mut noise_rng = Rng::new(seed, 1);
    for _ in 0..warmup {
        std::hint::black_box(euler_integrate(&params, &obs, &mut noise_rng, n_steps)?);
    }
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        std::hint::black_box(euler_integrate(&params, &obs, &mut noise_rng, n_steps)?);
        out.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

/// Varies one axis at a time around the base configuration.
pub fn bench_sweep(cfg: &BenchConfig) -> Result<LatencyReport> {
    cfg.validate()?;
    let rows = cfg
        .points()
        .into_iter()
        .map(|(n_layers, n_vis_tokens)| {
            let point = PolicyConfig {
                n_layers,
                n_vis_tokens,
                ..cfg.base.clone()
            };
            let times = time_inference(&point, cfg.n_steps, cfg.trials, cfg.warmup, cfg.seed)?;
            let (median_ms, p10_ms, p90_ms) = robust_stats(&times);
            Ok(LatencyRow {
                n_layers,
                n_vis_tokens,
                n_diffusion_steps: cfg.n_steps,
                median_ms,
                p10_ms,
                p90_ms,
                n_trials: times.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyReport {
        rows,
        environment: Environment::detect::<f32>(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// `depth` or `tokens`.
    pub axis: String,
    /// `(n_layers, n_vis_tokens)` of the larger configuration.
    pub large: (usize, usize),
    pub small: (usize, usize),
    pub latency_ratio: f64,
    pub flop_ratio: f64,
    /// `(latency_ratio - 1) / (flop_ratio - 1)`: the share of the work
    /// reduction that shows up as saved time, comparable across axes.
    pub efficiency: f64,
}

/// Latency ratios between the extremes of each axis.
pub fn speedup_summary(report: &LatencyReport, base: &PolicyConfig) -> Result<Vec<Speedup>> {
    let n_steps = report.rows.first().map_or(DEFAULT_DIFFUSION_STEPS, |r| r.n_diffusion_steps);
    let flops = |(l, v): (usize, usize)| {
        inference_flops(
            &PolicyConfig {
                n_layers: l,
                n_vis_tokens: v,
                ..base.clone()
            },
            n_steps,
        )
    };
    let mut out = Vec::new();
    for (axis, rows) in [
        ("depth", report.depth_axis(base.n_vis_tokens)),
        ("tokens", report.token_axis(base.n_layers)),
    ] {
        let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
            continue;
        };
        let large = (last.n_layers, last.n_vis_tokens);
        let small = (first.n_layers, first.n_vis_tokens);
        let latency_ratio = report.ratio(large, small)?;
        let flop_ratio = flops(large) / flops(small);
        out.push(Speedup {
            axis: axis.into(),
            large,
            small,
            latency_ratio,
            flop_ratio,
            efficiency: (latency_ratio - 1.0) / (flop_ratio - 1.0).max(f64::MIN_POSITIVE),
        });
    }
    Ok(out)
}
