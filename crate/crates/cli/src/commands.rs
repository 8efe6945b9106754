use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use shallowpi_core::analysis::{
    cosine_similarity_profile, progressive_skip_eval, sensitivity_sweep, EvalSpec,
};
use shallowpi_core::bench::{bench_sweep, speedup_summary, time_inference, robust_stats};
use shallowpi_core::distill::distill_train;
use shallowpi_core::policy::{load_checkpoint, save_checkpoint, skip_layers, LayerSkip};
use shallowpi_core::sim::{evaluate, gen_dataset, staleness_model, Dataset, LearnedPolicy};
use shallowpi_core::train::{train_policy, LossLog, Objective};
use shallowpi_core::{PolicyParams, Rng};

use crate::config::{self, require, LatencyModel, Staleness};
use crate::{Command, Common, EvalFlags, List, UsageError};

const CONFIG_FILE: &str = "config.json";
const INIT_STREAM: u64 = 0x1417;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            episodes,
            suite,
            codebook_seed,
            chunk_len,
        } => {
            let mut run: config::GenDataRun = config::load(common.config.as_deref())?;
            set(&mut run.out, common.out.map(Some));
            set(&mut run.gen.seed, common.seed);
            set(&mut run.gen.n_episodes, episodes);
            set(&mut run.gen.suite, suite);
            set(&mut run.gen.codebook_seed, codebook_seed);
            set(&mut run.gen.chunk_len, chunk_len);
            gen_data(&run)
        }
        Command::TrainTeacher {
            common,
            data,
            steps,
            layers,
            batch_size,
            lr,
        } => {
            let mut run: config::TrainTeacherRun = config::load(common.config.as_deref())?;
            set(&mut run.out, common.out.map(Some));
            set(&mut run.data, data.map(Some));
            set(&mut run.train.seed, common.seed);
            set(&mut run.train.steps, steps);
            set(&mut run.policy.n_layers, layers);
            set(&mut run.train.batch_size, batch_size);
            set(&mut run.train.lr, lr);
            train_teacher(run)
        }
        Command::Distill {
            common,
            teacher,
            data,
            layers,
            steps,
            lambda_task,
            lambda_kd,
            lambda_attn,
            placement,
            scope,
            batch_size,
            lr,
        } => {
            let mut run: config::DistillRun = config::load(common.config.as_deref())?;
            let d = &mut run.distill;
            set(&mut d.seed, common.seed);
            set(&mut d.student_layers, layers);
            set(&mut d.steps, steps);
            set(&mut d.lambda_task, lambda_task);
            set(&mut d.lambda_kd, lambda_kd);
            set(&mut d.lambda_attn, lambda_attn);
            set(&mut d.attn_placement, placement);
            set(&mut d.attn_scope, scope);
            set(&mut d.batch_size, batch_size);
            set(&mut d.lr, lr);
            set(&mut run.out, common.out.map(Some));
            set(&mut run.teacher, teacher.map(Some));
            set(&mut run.data, data.map(Some));
            distill(&run)
        }
        Command::Eval {
            common,
            eval,
            staleness,
            control_period_ms,
            skip,
        } => {
            let mut run: config::EvalRun = config::load(common.config.as_deref())?;
            apply_eval(&mut run.ckpt, &mut run.eval, &common, eval);
            set(&mut run.out, common.out.map(Some));
            set(&mut run.staleness, staleness);
            set(
                &mut run.latency_model,
                control_period_ms.map(|p| LatencyModel::Measured { control_period_ms: p }),
            );
            set(&mut run.skip, skip.map(|List(v)| v));
            eval_cmd(run)
        }
        Command::AnalyzeSimilarity {
            common,
            ckpt,
            data,
            taus,
            examples,
        } => {
            let mut run: config::SimilarityRun = config::load(common.config.as_deref())?;
            set(&mut run.out, common.out.map(Some));
            set(&mut run.seed, common.seed);
            set(&mut run.ckpt, ckpt.map(Some));
            set(&mut run.data, data.map(Some));
            set(&mut run.taus, taus.map(|List(v)| v));
            set(&mut run.n_examples, examples);
            similarity(&run)
        }
        Command::AnalyzeSensitivity { common, eval } => {
            let mut run: config::SensitivityRun = config::load(common.config.as_deref())?;
            apply_eval(&mut run.ckpt, &mut run.eval, &common, eval);
            set(&mut run.out, common.out.map(Some));
            sensitivity(&run)
        }
        Command::AnalyzeProgressive {
            common,
            eval,
            max_removed,
            order,
        } => {
            let mut run: config::ProgressiveRun = config::load(common.config.as_deref())?;
            apply_eval(&mut run.ckpt, &mut run.eval, &common, eval);
            set(&mut run.out, common.out.map(Some));
            set(&mut run.max_removed, max_removed.map(Some));
            set(&mut run.order, order.map(|List(v)| Some(v)));
            progressive(&run)
        }
        Command::BenchLatency {
            common,
            layers,
            depths,
            tokens,
            trials,
            warmup,
            diffusion_steps,
            json,
        } => {
            let mut run: config::BenchRun = config::load(common.config.as_deref())?;
            set(&mut run.out, common.out.map(Some));
            let b = &mut run.bench;
            set(&mut b.seed, common.seed);
            set(&mut b.base.n_layers, layers);
            set(&mut b.depth_grid, depths.map(|List(v)| v));
            set(&mut b.token_grid, tokens.map(|List(v)| v));
            set(&mut b.trials, trials);
            set(&mut b.warmup, warmup);
            set(&mut b.n_steps, diffusion_steps);
            run.json |= json;
            bench(&run)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_eval(ckpt: &mut Option<std::path::PathBuf>, spec: &mut EvalSpec, common: &Common, flags: EvalFlags) {
    set(ckpt, flags.ckpt.map(Some));
    set(&mut spec.base_seed, common.seed);
    set(&mut spec.suite, flags.suite);
    set(&mut spec.n_episodes, flags.episodes);
    set(&mut spec.n_diffusion_steps, flags.diffusion_steps);
    set(&mut spec.executor.horizon, flags.horizon);
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates the run directory and records the resolved configuration.
fn start_run(out: &Option<std::path::PathBuf>, run: &impl Serialize) -> Result<std::path::PathBuf> {
    let dir = require(out, "--out")?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join(CONFIG_FILE), run)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_params(path: &Option<std::path::PathBuf>) -> Result<PolicyParams<f32>> {
    let path = require(path, "--ckpt")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(run: &config::GenDataRun) -> Result<()> {
    let out = require(&run.out, "--out")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".config.json");
    write_json(Path::new(&sidecar), run)?;
    let data = gen_dataset(&run.gen)?;
    data.save(out)?;
    println!("{} records from {} episodes -> {}", data.len(), data.n_episodes(), out.display());
    Ok(())
}

fn train_teacher(mut run: config::TrainTeacherRun) -> Result<()> {
    let data = Dataset::load(require(&run.data, "--data")?).context("loading dataset")?;
    // The tokenizer and chunk length are fixed by the data.
    run.policy.codebook_seed = data.config.codebook_seed;
    run.policy.chunk_len = data.config.chunk_len;
    run.policy.validate()?;
    let dir = start_run(&run.out, &run)?;
    let examples = data.examples(&run.policy)?;
    let mut params = PolicyParams::<f32>::init(&run.policy, &mut Rng::new(run.train.seed, INIT_STREAM))?;
    let mut log = LossLog::create(&dir.join("loss.csv"))?;
    let mut log_err = None;
    let records = train_policy(&mut params, &examples, &Objective::task_only(), &run.train, |r| {
        if log_err.is_none() {
            log_err = log.write(r).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&params, dir.join("teacher.ckpt"))?;
    if let Some(last) = records.last() {
        println!("step {} task_loss {:.6}", last.step, last.task_loss);
    }
    Ok(())
}

fn distill(run: &config::DistillRun) -> Result<()> {
    let teacher = require(&run.teacher, "--teacher")?;
    let data = require(&run.data, "--data")?;
    let dir = start_run(&run.out, run)?;
    distill_train(teacher, data, &run.distill, &dir)?;
    println!("student -> {}", dir.join("student.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    success_rate: f64,
    n_episodes: usize,
    staleness_frames: usize,
    effective_depth: usize,
}

fn eval_cmd(mut run: config::EvalRun) -> Result<()> {
    let params = load_params(&run.ckpt)?;
    let cfg = params.config().clone();
    let skip = if run.skip.is_empty() {
        LayerSkip::none()
    } else {
        skip_layers(&cfg, run.skip.iter().copied())?
    };
    let depth = cfg.n_layers - skip.len();
    let frames = match run.staleness {
        Staleness::Frames(n) => n,
        Staleness::Auto => match run.latency_model {
            LatencyModel::Synthetic(model) => model.frames(depth),
            LatencyModel::Measured { control_period_ms } => {
                let times = time_inference(&cfg.with_layers(depth), run.eval.n_diffusion_steps, 30, 5, 0)?;
                staleness_model(robust_stats(&times).0, control_period_ms)?
            }
        },
    };
    run.eval.executor.staleness_frames = frames;
    run.eval.executor.chunk_len = cfg.chunk_len;
    run.eval.executor.validate()?;
    let dir = start_run(&run.out, &run)?;
    let policy = LearnedPolicy::new(&params)?
        .with_skip(skip)
        .with_steps(run.eval.n_diffusion_steps);
    let spec = &run.eval;
    let report = evaluate(&policy, spec.suite, spec.n_episodes, spec.base_seed, &spec.executor)?;
    report.write_csv(create(&dir.join("episodes.csv"))?)?;
    let summary = EvalSummary {
        success_rate: report.success_rate,
        n_episodes: spec.n_episodes,
        staleness_frames: frames,
        effective_depth: depth,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("success_rate {:.4} (staleness {frames} frames)", report.success_rate);
    Ok(())
}

fn similarity(run: &config::SimilarityRun) -> Result<()> {
    let params = load_params(&run.ckpt)?;
    let data = Dataset::load(require(&run.data, "--data")?).context("loading dataset")?;
    let dir = start_run(&run.out, run)?;
    let mut examples = data.examples(params.config())?;
    examples.truncate(run.n_examples);
    let m = cosine_similarity_profile(&params, &examples, &run.taus, &LayerSkip::none(), run.seed)?;
    m.write_csv(create(&dir.join("similarity.csv"))?)?;
    println!("similarity over {} examples -> {}", examples.len(), dir.display());
    Ok(())
}

fn sensitivity(run: &config::SensitivityRun) -> Result<()> {
    let params = load_params(&run.ckpt)?;
    let dir = start_run(&run.out, run)?;
    let table = sensitivity_sweep(&params, &run.eval)?;
    table.write_csv(create(&dir.join("sensitivity.csv"))?)?;
    println!("baseline {:.4}", table.baseline);
    for r in &table.rows {
        println!("layer {} skipped {:.4} drop {:+.4}", r.layer, r.skipped, r.drop);
    }
    Ok(())
}

fn progressive(run: &config::ProgressiveRun) -> Result<()> {
    let params = load_params(&run.ckpt)?;
    let n_layers = params.config().n_layers;
    let max_removed = run.max_removed.unwrap_or(n_layers.saturating_sub(1));
    if let Some(order) = &run.order {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != order.len() || order.iter().any(|&l| l >= n_layers) {
            return Err(UsageError(format!("order must list distinct layers below {n_layers}")).into());
        }
    }
    let dir = start_run(&run.out, run)?;
    let order = match &run.order {
        Some(o) => o.clone(),
        None => {
            let table = sensitivity_sweep(&params, &run.eval)?;
            table.write_csv(create(&dir.join("sensitivity.csv"))?)?;
            table.ascending_order()
        }
    };
    let curve = progressive_skip_eval(&params, &order, max_removed, &run.eval)?;
    curve.write_csv(create(&dir.join("progressive.csv"))?)?;
    for (n, s) in curve.success.iter().enumerate() {
        println!("removed {n} success {s:.4}");
    }
    Ok(())
}

fn bench(run: &config::BenchRun) -> Result<()> {
    run.bench.validate()?;
    let dir = start_run(&run.out, run)?;
    let report = bench_sweep(&run.bench)?;
    report.write_csv(create(&dir.join("bench.csv"))?)?;
    let speedups = speedup_summary(&report, &run.bench.base)?;
    let mut out = csv::Writer::from_writer(create(&dir.join("speedup.csv"))?);
    out.write_record(["axis", "large", "small", "latency_ratio", "flop_ratio", "efficiency"])?;
    for s in &speedups {
        out.write_record([
            s.axis.clone(),
            format!("{}x{}", s.large.0, s.large.1),
            format!("{}x{}", s.small.0, s.small.1),
            format!("{:.6}", s.latency_ratio),
            format!("{:.6}", s.flop_ratio),
            format!("{:.6}", s.efficiency),
        ])?;
    }
    out.flush()?;
    if run.json {
        write_json(
            &dir.join("bench.json"),
            &serde_json::json!({ "report": report, "speedups": speedups }),
        )?;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", report.environment.hardware)?;
    for r in &report.rows {
        writeln!(
            stdout,
            "layers {:>3} tokens {:>4} median {:.3} ms (p10 {:.3}, p90 {:.3})",
            r.n_layers, r.n_vis_tokens, r.median_ms, r.p10_ms, r.p90_ms
        )?;
    }
    for s in &speedups {
        writeln!(stdout, "{} speedup {:.2}x for {:.2}x work", s.axis, s.latency_ratio, s.flop_ratio)?;
    }
    Ok(())
}
