//! Shallow-student construction and the three-term distillation objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowBatch, TauDist};
use crate::policy::{
    forward_on_tape, layer_param_name, BoundParams, Expert, ForwardOptions, ForwardTrace,
    PolicyConfig, PolicyParams, LAYER_TENSORS,
};
use crate::tensor::{Scalar, Tape, Var};
use crate::train::{train_policy, Example, LossRecord, Objective, TrainConfig};

/// Student layer that carries the attention-alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnPlacement {
    Initial,
    #[default]
    Middle,
    Later,
}

/// Which attention rows the alignment term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScope {
    /// Action-token queries over vision-language keys.
    #[default]
    ActionOnly,
    /// Every query over every key it can see.
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub student_layers: usize,
    pub lambda_task: f64,
    pub lambda_kd: f64,
    pub lambda_attn: f64,
    pub attn_placement: AttnPlacement,
    pub attn_scope: AttnScope,
    pub head_aggregation: HeadAggregation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau_dist: TauDist,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_layers: 4,
            lambda_task: 1.0,
            lambda_kd: 1.0,
            lambda_attn: 0.1,
            attn_placement: AttnPlacement::Middle,
            attn_scope: AttnScope::ActionOnly,
            head_aggregation: HeadAggregation::Mean,
            steps: 1000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            tau_dist: TauDist::Uniform,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, teacher_depth: usize) -> Result<()> {
        if self.student_layers == 0 || self.student_layers > teacher_depth {
            return Err(Error::config(format!(
                "student depth {} must be in 1..={teacher_depth}",
                self.student_layers
            )));
        }
        let lambdas = [self.lambda_task, self.lambda_kd, self.lambda_attn];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            tau_dist: self.tau_dist,
        }
    }
}

/// Teacher layer assigned to each student layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub teacher_depth: usize,
    pub indices: Vec<usize>,
}

impl LayerMap {
    pub fn identity(depth: usize) -> Self {
        Self {
            teacher_depth: depth,
            indices: (0..depth).collect(),
        }
    }

    pub fn student_depth(&self) -> usize {
        self.indices.len()
    }

    fn check(&self) -> Result<()> {
        let increasing = self.indices.windows(2).all(|w| w[0] < w[1]);
        match self.indices.last() {
            Some(&last) if increasing && last < self.teacher_depth => Ok(()),
            _ => Err(Error::config(format!(
                "invalid layer map {:?} for teacher depth {}",
                self.indices, self.teacher_depth
            ))),
        }
    }
}

/// End-aligned uniform stride: student layer `i` takes teacher layer
/// `ceil((i+1)·L_T/L_S) − 1`.
pub fn uniform_subsample(teacher_depth: usize, student_depth: usize) -> Result<LayerMap> {
    if student_depth == 0 || student_depth > teacher_depth {
        return Err(Error::config(format!(
            "cannot subsample {teacher_depth} layers to {student_depth}"
        )));
    }
    let indices = (1..=student_depth)
        .map(|i| (i * teacher_depth).div_ceil(student_depth) - 1)
        .collect();
    Ok(LayerMap {
        teacher_depth,
        indices,
    })
}

/// Student layer index that carries the attention term.
pub fn placement_rule(placement: AttnPlacement, student_depth: usize) -> usize {
    match placement {
        AttnPlacement::Initial => 0,
        AttnPlacement::Middle => student_depth / 2,
        AttnPlacement::Later => student_depth.saturating_sub(1),
    }
}

/// Copies embeddings, projections and the mapped layers of both experts.
pub fn init_student<F: Scalar>(teacher: &PolicyParams<F>, map: &LayerMap) -> Result<PolicyParams<F>> {
    let cfg = teacher.config().with_layers(map.student_depth());
    init_student_as(teacher, &cfg, map)
}

/// Like [`init_student`] with an explicit student configuration, which must
/// match the teacher in everything but depth.
pub fn init_student_as<F: Scalar>(
    teacher: &PolicyParams<F>,
    student_cfg: &PolicyConfig,
    map: &LayerMap,
) -> Result<PolicyParams<F>> {
    let tcfg = teacher.config();
    if !tcfg.same_width(student_cfg) {
        return Err(Error::config("student and teacher differ in more than depth"));
    }
    map.check()?;
    if map.teacher_depth != tcfg.n_layers || map.student_depth() != student_cfg.n_layers {
        return Err(Error::config(format!(
            "layer map {}->{} does not fit teacher {} / student {}",
            map.teacher_depth,
            map.student_depth(),
            tcfg.n_layers,
            student_cfg.n_layers
        )));
    }
    let mut student = PolicyParams::zeros(student_cfg)?;
    let names: Vec<String> = student.names().filter(|n| !n.starts_with("layers.")).map(str::to_string).collect();
    for name in names {
        student.set(&name, teacher.get(&name)?.clone())?;
    }
    for (s, &t) in map.indices.iter().enumerate() {
        for expert in [Expert::Prefix, Expert::Suffix] {
            for tensor in LAYER_TENSORS {
                let src = teacher.get(&layer_param_name(t, expert, tensor))?;
                student.set(&layer_param_name(s, expert, tensor), src.clone())?;
            }
        }
    }
    Ok(student)
}

/// Capture layers for the attention term: `(student, teacher)`.
pub fn attn_layers(placement: AttnPlacement, map: &LayerMap) -> (usize, usize) {
    let s = placement_rule(placement, map.student_depth());
    (s, map.indices[s])
}

pub(crate) fn run_forward<'t, F: Scalar>(
    params: &BoundParams<'t, F>,
    batch: &FlowBatch<F>,
    capture_layer: Option<usize>,
) -> Result<ForwardTrace<'t, F>> {
    let opts = ForwardOptions {
        capture_layer,
        ..ForwardOptions::default()
    };
    let actions = params.tape().constant(batch.noisy.clone());
    forward_on_tape(params, &batch.obs, actions, &batch.tau, &opts)
}

/// Mean squared distance between student and teacher velocities.
pub fn kd_term<'t, F: Scalar>(student: &ForwardTrace<'t, F>, teacher: &ForwardTrace<'t, F>) -> Result<Var<'t, F>> {
    student.velocity.mse(teacher.velocity)
}

fn flat_rows<'t, F: Scalar>(kl: Var<'t, F>) -> Result<Var<'t, F>> {
    let n = kl.value().len();
    kl.reshape(&[n])
}

/// `KL(teacher ‖ student)` per attention row, averaged over heads, rows
/// and batch.
pub fn attn_term<'t, F: Scalar>(
    student: &ForwardTrace<'t, F>,
    teacher: &ForwardTrace<'t, F>,
    cfg: &PolicyConfig,
    teacher_cfg: &PolicyConfig,
    scope: AttnScope,
) -> Result<Var<'t, F>> {
    if cfg.n_heads != teacher_cfg.n_heads {
        return Err(Error::config(format!(
            "head count differs: student {} vs teacher {}",
            cfg.n_heads, teacher_cfg.n_heads
        )));
    }
    let missing = || Error::config("attention was not captured");
    let s = student.attention.as_ref().ok_or_else(missing)?;
    let t = teacher.attention.as_ref().ok_or_else(missing)?;
    match scope {
        AttnScope::ActionOnly => {
            let kl = t.action_to_prefix(teacher_cfg)?.kl_div(s.action_to_prefix(cfg)?)?;
            Ok(kl.mean())
        }
        AttnScope::AllTokens => {
            let (sp, tp) = match (s.prefix_probs, t.prefix_probs) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(missing()),
            };
            let prefix = flat_rows(tp.kl_div(sp)?)?;
            let suffix = flat_rows(t.suffix_probs.kl_div(s.suffix_probs)?)?;
            Ok(Var::concat(&[prefix, suffix], 0)?.mean())
        }
    }
}

/// Velocity-matching loss against a frozen teacher.
pub fn kd_loss<F: Scalar>(
    student: &PolicyParams<F>,
    teacher: &PolicyParams<F>,
    batch: &FlowBatch<F>,
) -> Result<f64> {
    let tape = Tape::inference();
    let s = run_forward(&BoundParams::bind(&tape, student, false), batch, None)?;
    let t = run_forward(&BoundParams::bind(&tape, teacher, false), batch, None)?;
    Ok(kd_term(&s, &t)?.value().item().as_f64())
}

/// Attention-alignment loss at the layers chosen by `cfg.attn_placement`.
pub fn attn_loss<F: Scalar>(
    student: &PolicyParams<F>,
    teacher: &PolicyParams<F>,
    batch: &FlowBatch<F>,
    cfg: &DistillConfig,
    map: &LayerMap,
) -> Result<f64> {
    let (sl, tl) = attn_layers(cfg.attn_placement, map);
    let tape = Tape::inference();
    let s = run_forward(&BoundParams::bind(&tape, student, false), batch, Some(sl))?;
    let t = run_forward(&BoundParams::bind(&tape, teacher, false), batch, Some(tl))?;
    Ok(attn_term(&s, &t, student.config(), teacher.config(), cfg.attn_scope)?
        .value()
        .item()
        .as_f64())
}

/// Subsamples the teacher and trains the student on the weighted objective.
pub fn distill<F: Scalar>(
    teacher: &PolicyParams<F>,
    examples: &[Example<F>],
    cfg: &DistillConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<(PolicyParams<F>, LayerMap, Vec<LossRecord>)> {
    cfg.validate(teacher.config().n_layers)?;
    let map = uniform_subsample(teacher.config().n_layers, cfg.student_layers)?;
    let mut student = init_student(teacher, &map)?;
    let objective = Objective::distill(teacher, &map, cfg);
    let records = train_policy(&mut student, examples, &objective, &cfg.train_config(), on_step)?;
    Ok((student, map, records))
}

/// File-level distillation run: reads a teacher checkpoint and a dataset,
/// writes `student.ckpt`, `loss.csv` and `distill_config.json` to `out_dir`.
pub fn distill_train(
    teacher_ckpt: &Path,
    dataset: &Path,
    cfg: &DistillConfig,
    out_dir: &Path,
) -> Result<PolicyParams<f32>> {
    let teacher = crate::policy::load_checkpoint::<f32>(teacher_ckpt)?;
    let data = crate::sim::Dataset::load(dataset)?;
    let examples = data.examples(teacher.config())?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("distill_config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut log = crate::train::LossLog::create(&out_dir.join("loss.csv"))?;
    let mut log_err = None;
    let (student, _, _) = distill(&teacher, &examples, cfg, |r| {
        if log_err.is_none() {
            log_err = log.write(r).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    crate::policy::save_checkpoint(&student, out_dir.join("student.ckpt"))?;
    Ok(student)
}
