//! Minibatch training loop shared by teacher training and distillation.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{attn_layers, attn_term, kd_term, run_forward, AttnScope, DistillConfig, LayerMap};
use crate::error::{Error, Result};
use crate::flow::{make_flow_sample, task_loss_on_tape, FlowBatch, FlowSample, TauDist};
use crate::policy::{BoundParams, PolicyConfig, PolicyParams, TokenizedObservation};
use crate::tensor::{Adam, AdamConfig, Rng, Scalar, Tape, Tensor, Var};

const BATCH_STREAM: u64 = 0x7261;

/// One supervised pair: an observation and its ground-truth action chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<F> {
    pub obs: TokenizedObservation<F>,
    /// `[H, D]`
    pub actions: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau_dist: TauDist,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            tau_dist: TauDist::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub task: f64,
    pub kd: f64,
    pub attn: f64,
}

/// What the student is trained to minimise. Terms with zero weight are not
/// evaluated.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a, F> {
    pub weights: LossWeights,
    pub teacher: Option<&'a PolicyParams<F>>,
    /// `(student layer, teacher layer)` compared by the attention term.
    pub attn_layers: Option<(usize, usize)>,
    pub attn_scope: AttnScope,
}

impl<'a, F: Scalar> Objective<'a, F> {
    pub fn task_only() -> Self {
        Self {
            weights: LossWeights {
                task: 1.0,
                kd: 0.0,
                attn: 0.0,
            },
            teacher: None,
            attn_layers: None,
            attn_scope: AttnScope::ActionOnly,
        }
    }

    pub fn distill(teacher: &'a PolicyParams<F>, map: &LayerMap, cfg: &DistillConfig) -> Self {
        Self {
            weights: LossWeights {
                task: cfg.lambda_task,
                kd: cfg.lambda_kd,
                attn: cfg.lambda_attn,
            },
            teacher: Some(teacher),
            attn_layers: Some(attn_layers(cfg.attn_placement, map)),
            attn_scope: cfg.attn_scope,
        }
    }

    fn needs_teacher(&self) -> bool {
        self.weights.kd > 0.0 || self.weights.attn > 0.0
    }
}

/// Loss components on a tape; absent terms had zero weight.
pub struct LossTerms<'t, F> {
    pub task: Option<Var<'t, F>>,
    pub kd: Option<Var<'t, F>>,
    pub attn: Option<Var<'t, F>>,
    pub total: Var<'t, F>,
}

pub fn objective_on_tape<'t, F: Scalar>(
    student: &BoundParams<'t, F>,
    batch: &FlowBatch<F>,
    objective: &Objective<'_, F>,
) -> Result<LossTerms<'t, F>> {
    let tape = student.tape();
    let w = objective.weights;
    let mut terms = LossTerms {
        task: None,
        kd: None,
        attn: None,
        total: tape.constant(Tensor::scalar(F::zero())),
    };
    let mut parts = Vec::new();
    if objective.needs_teacher() {
        let teacher_params = objective
            .teacher
            .ok_or_else(|| Error::config("distillation terms need a teacher"))?;
        let teacher = BoundParams::bind(tape, teacher_params, false);
        let (s_layer, t_layer) = match objective.attn_layers {
            Some(layers) if w.attn > 0.0 => (Some(layers.0), Some(layers.1)),
            None if w.attn > 0.0 => return Err(Error::config("attention term needs capture layers")),
            _ => (None, None),
        };
        let s = run_forward(student, batch, s_layer)?;
        let t = run_forward(&teacher, batch, t_layer)?;
        if w.task > 0.0 {
            let target = tape.constant(batch.target.clone());
            terms.task = Some(s.velocity.mse(target)?);
        }
        if w.kd > 0.0 {
            terms.kd = Some(kd_term(&s, &t)?);
        }
        if w.attn > 0.0 {
            terms.attn = Some(attn_term(
                &s,
                &t,
                student.config(),
                teacher_params.config(),
                objective.attn_scope,
            )?);
        }
    } else if w.task > 0.0 {
        terms.task = Some(task_loss_on_tape(student, batch)?);
    }
    for (term, weight) in [(terms.task, w.task), (terms.kd, w.kd), (terms.attn, w.attn)] {
        if let Some(v) = term {
            parts.push(if weight == 1.0 { v } else { v.scale(F::of(weight)) });
        }
    }
    let mut total = match parts.first() {
        Some(&first) => first,
        None => return Err(Error::config("objective has no positive weight")),
    };
    for &p in &parts[1..] {
        total = total.add(p)?;
    }
    terms.total = total;
    Ok(terms)
}

/// Per-step loss components as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task_loss: f64,
    pub kd_loss: f64,
    pub attn_loss: f64,
    pub total: f64,
    #[serde(skip)]
    pub grad_norm: f64,
}

/// Loss-curve CSV with columns `step,task_loss,kd_loss,attn_loss,total`.
pub struct LossLog {
    writer: csv::Writer<BufWriter<File>>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_writer(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn write(&mut self, record: &LossRecord) -> Result<()> {
        self.writer.serialize(record)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Draws a minibatch with replacement plus one flow sample per item.
pub fn sample_batch<F: Scalar>(
    cfg: &PolicyConfig,
    examples: &[Example<F>],
    batch_size: usize,
    tau_dist: TauDist,
    rng: &mut Rng,
) -> Result<FlowBatch<F>> {
    if examples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let picks: Vec<usize> = (0..batch_size).map(|_| rng.below(examples.len())).collect();
    let samples = picks
        .iter()
        .map(|&i| make_flow_sample(&examples[i].actions, rng, tau_dist))
        .collect::<Result<Vec<FlowSample<F>>>>()?;
    let obs: Vec<&TokenizedObservation<F>> = picks.iter().map(|&i| &examples[i].obs).collect();
    FlowBatch::new(cfg, &obs, &samples)
}

fn check_finite(name: &'static str, v: Option<f64>, step: usize) -> Result<f64> {
    match v {
        Some(x) if !x.is_finite() => Err(Error::NonFiniteLoss { component: name, step }),
        Some(x) => Ok(x),
        None => Ok(0.0),
    }
}

/// Adam on `objective` for `cfg.steps` steps. Deterministic in `cfg.seed`.
pub fn train_policy<F: Scalar>(
    params: &mut PolicyParams<F>,
    examples: &[Example<F>],
    objective: &Objective<'_, F>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut rng = Rng::new(cfg.seed, BATCH_STREAM);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(params.config(), examples, cfg.batch_size, cfg.tau_dist, &mut rng)?;
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, params, true);
        let terms = objective_on_tape(&bound, &batch, objective)?;
        let scalar = |v: Option<Var<'_, F>>| v.map(|v| v.value().item().as_f64());
        let task = check_finite("task", scalar(terms.task), step)?;
        let kd = check_finite("kd", scalar(terms.kd), step)?;
        let attn = check_finite("attn", scalar(terms.attn), step)?;
        let total = check_finite("total", scalar(Some(terms.total)), step)?;
        let grads = tape.backward(terms.total)?;
        let grad_tensors: Vec<Tensor<F>> = bound.iter().map(|(_, v)| grads.wrt(v)).collect();
        drop(bound);
        let mut entries: Vec<(&str, &mut Tensor<F>, &Tensor<F>)> = params
            .iter_mut()
            .zip(&grad_tensors)
            .map(|((n, p), g)| (n, p, g))
            .collect();
        let grad_norm = adam.step(&mut entries);
        let record = LossRecord {
            step,
            task_loss: task,
            kd_loss: kd,
            attn_loss: attn,
            total,
            grad_norm,
        };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
