//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use shallowpi_core::analysis::{progressive_skip_eval, sensitivity_sweep, success_rate, EvalSpec};
use shallowpi_core::bench::{bench_sweep, fit_line, BenchConfig};
use shallowpi_core::distill::{
    attn_loss, distill, init_student, kd_loss, uniform_subsample, AttnPlacement, AttnScope,
    DistillConfig,
};
use shallowpi_core::policy::{load_checkpoint, LayerSkip};
use shallowpi_core::sim::{Dataset, ExecutorConfig, LinearStaleness, Suite};
use shallowpi_core::train::{train_policy, Example, LossWeights, Objective, TrainConfig};
use shallowpi_core::{PolicyParams, Rng};

/// Teacher optimisation budget; the requirement allows up to 20k steps.
const TEACHER_STEPS: usize = 1000;
const TEACHER_STEP_LIMIT: usize = 20_000;
const TEACHER_TIME_LIMIT: Duration = Duration::from_secs(60 * 60);
/// Student optimisation budget shared by every distillation arm and the
/// from-scratch baseline.
const STUDENT_STEPS: usize = 400;
const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_EPISODES: usize = 200;
const DYNAMIC_EPISODES: usize = 400;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_shallowpi")
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(binary()).args(args).output().expect("spawn cli");
    assert!(
        out.status.success(),
        "shallowpi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn static_spec() -> EvalSpec {
    EvalSpec {
        n_episodes: EVAL_EPISODES,
        ..EvalSpec::default()
    }
}

fn one_hot(i: usize) -> LossWeights {
    let mut w = [0.0; 3];
    w[i] = 1.0;
    LossWeights {
        task: w[0],
        kd: w[1],
        attn: w[2],
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for (term, w) in worst.iter_mut().enumerate() {
        for seed in 0..20 {
            let case = common::ObjectiveCase::random(1000 * term as u64 + seed, one_hot(term));
            *w = w.max(case.max_relative_error(seed));
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst.iter().all(|&e| e < 1e-4) && elapsed < Duration::from_secs(120),
        format!(
            "max rel err task {:.1e} kd {:.1e} attn {:.1e} over 20 configs each, {:.1?}",
            worst[0], worst[1], worst[2], elapsed
        ),
    )
}

fn cache_equivalence() -> Outcome {
    let start = Instant::now();
    let worst = (0..100).map(common::cache_gap).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!("max |full - cached| {worst:.2e} over 100 configs x 10 steps, {elapsed:.1?}"),
    )
}

fn mask_invariant() -> Outcome {
    let masked = (0..50).filter(|&s| common::prefix_is_masked(s)).count();
    Outcome::new(masked == 50, format!("{masked}/50 configs bitwise invariant at every layer"))
}

fn identity_distillation() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = Rng::new(seed, 4);
        let cfg = common::tiny_config(&mut rng);
        let teacher = PolicyParams::<f64>::init(&cfg, &mut rng).unwrap();
        let map = uniform_subsample(cfg.n_layers, cfg.n_layers).unwrap();
        let student = init_student(&teacher, &map).unwrap();
        let batch = common::random_batch(&cfg, 4, &mut rng);
        worst = worst.max(kd_loss(&student, &teacher, &batch).unwrap().abs());
        for scope in [AttnScope::ActionOnly, AttnScope::AllTokens] {
            let dc = DistillConfig {
                attn_scope: scope,
                ..DistillConfig::default()
            };
            worst = worst.max(attn_loss(&student, &teacher, &batch, &dc, &map).unwrap().abs());
        }
    }
    Outcome::new(worst < 1e-10, format!("max kd/attn loss {worst:.1e} over 20 configs"))
}

struct Teacher {
    params: PolicyParams<f32>,
    examples: Vec<Example<f32>>,
    static_success: f64,
}

fn teacher_capability(work: &Path) -> (Outcome, Teacher) {
    let data = work.join("static.bin");
    let run = work.join("teacher");
    let start = Instant::now();
    cli(&["gen-data", "--episodes", "2000", "--suite", "static", "--seed", "0", "--out", data.to_str().unwrap()]);
    let steps = TEACHER_STEPS.to_string();
    cli(&[
        "train-teacher", "--data", data.to_str().unwrap(), "--steps", &steps, "--layers", "8", "--seed", "0",
        "--out", run.to_str().unwrap(),
    ]);
    let elapsed = start.elapsed();
    let ckpt = run.join("teacher.ckpt");
    let eval_dir = work.join("teacher_eval");
    cli(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--suite", "static", "--episodes", "200",
        "--out", eval_dir.to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    let rate = summary["success_rate"].as_f64().unwrap();
    let params: PolicyParams<f32> = load_checkpoint(&ckpt).unwrap();
    let cfg = params.config();
    let shape_ok = cfg.n_layers == 8 && cfg.d_model == 64 && cfg.n_heads == 4 && cfg.n_vis_tokens == 16 && cfg.chunk_len == 8;
    let examples = Dataset::load(&data).unwrap().examples(cfg).unwrap();
    let outcome = Outcome::new(
        shape_ok && rate >= 0.9 && TEACHER_STEPS <= TEACHER_STEP_LIMIT && elapsed <= TEACHER_TIME_LIMIT,
        format!("success {rate:.3} over 200 episodes after {TEACHER_STEPS} steps, data + training {elapsed:.1?}"),
    );
    (
        outcome,
        Teacher {
            params,
            examples,
            static_success: rate,
        },
    )
}

fn arm(name: &str, cfg: DistillConfig) -> (String, DistillConfig) {
    (name.to_string(), cfg)
}

/// Mean static success over seeds for each distillation arm.
fn distillation_arms(teacher: &Teacher) -> (BTreeMap<String, f64>, Vec<PolicyParams<f32>>) {
    let base = DistillConfig {
        student_layers: 4,
        steps: STUDENT_STEPS,
        ..DistillConfig::default()
    };
    let arms = [
        arm("full", base.clone()),
        arm("task+kd", DistillConfig { lambda_attn: 0.0, ..base.clone() }),
        arm("task", DistillConfig { lambda_attn: 0.0, lambda_kd: 0.0, ..base.clone() }),
        arm("full/initial", DistillConfig { attn_placement: AttnPlacement::Initial, ..base.clone() }),
    ];
    let mut means = BTreeMap::new();
    let mut full_students = Vec::new();
    for (name, cfg) in arms {
        let mut rates = Vec::new();
        for seed in SEEDS {
            let dc = DistillConfig { seed, ..cfg.clone() };
            let (student, _, _) = distill(&teacher.params, &teacher.examples, &dc, |_| {}).unwrap();
            rates.push(success_rate(&student, LayerSkip::none(), &static_spec()).unwrap());
            if name == "full" {
                full_students.push(student);
            }
        }
        println!("    arm {name:<13} {rates:?}");
        means.insert(name, mean(&rates));
    }
    let scfg = teacher.params.config().with_layers(4);
    let mut rates = Vec::new();
    for seed in SEEDS {
        let mut scratch = PolicyParams::<f32>::init(&scfg, &mut Rng::new(seed, 0x5c)).unwrap();
        let tc = TrainConfig {
            steps: STUDENT_STEPS,
            seed,
            ..TrainConfig::default()
        };
        train_policy(&mut scratch, &teacher.examples, &Objective::task_only(), &tc, |_| {}).unwrap();
        rates.push(success_rate(&scratch, LayerSkip::none(), &static_spec()).unwrap());
    }
    println!("    arm {:<13} {rates:?}", "scratch");
    means.insert("scratch".into(), mean(&rates));
    (means, full_students)
}

fn layer_skipping(teacher: &Teacher) -> Outcome {
    let spec = static_spec();
    let table = sensitivity_sweep(&teacher.params, &spec).unwrap();
    let n = teacher.params.config().n_layers;
    let curve = progressive_skip_eval(&teacher.params, &table.ascending_order(), n - 1, &spec).unwrap();
    let half = n.div_ceil(2);
    let collapsed = curve.success[half..].iter().all(|&s| s < 0.5 * curve.success[0]);
    let ratio = table.spread_ratio();
    let drops: Vec<String> = table.rows.iter().map(|r| format!("{:.3}", r.drop)).collect();
    let curve_s: Vec<String> = curve.success.iter().map(|s| format!("{s:.3}")).collect();
    Outcome::new(
        collapsed && ratio > 2.0,
        format!(
            "drops [{}] ratio {ratio:.2}; removal curve [{}] (order {:?})",
            drops.join(", "),
            curve_s.join(", "),
            curve.order
        ),
    )
}

fn latency_scaling() -> Outcome {
    let cfg = BenchConfig {
        depth_grid: vec![2, 4, 6, 8, 12, 18],
        token_grid: vec![16],
        ..BenchConfig::default()
    };
    let report = bench_sweep(&cfg).unwrap();
    let axis = report.depth_axis(cfg.base.n_vis_tokens);
    let xs: Vec<f64> = axis.iter().map(|r| r.n_layers as f64).collect();
    let ys: Vec<f64> = axis.iter().map(|r| r.median_ms).collect();
    let fit = fit_line(&xs, &ys).unwrap();
    let ratio = report.ratio((18, 16), (6, 16)).unwrap();
    let env = &report.environment;
    Outcome::new(
        fit.r_squared > 0.95 && ratio >= 1.8,
        format!(
            "R2 {:.4}, depth 18/6 latency ratio {ratio:.2}, medians {:?} ms on {} ({} thread, {})",
            fit.r_squared,
            ys.iter().map(|y| (y * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            env.hardware,
            env.threads,
            env.dtype
        ),
    )
}

fn dynamic_advantage(teacher: &Teacher, student: &PolicyParams<f32>) -> Outcome {
    let model = LinearStaleness::default();
    let frames = |p: &PolicyParams<f32>| model.frames(p.config().n_layers);
    let dynamic = |p: &PolicyParams<f32>| {
        let spec = EvalSpec {
            suite: Suite::Dynamic,
            n_episodes: DYNAMIC_EPISODES,
            executor: ExecutorConfig {
                staleness_frames: frames(p),
                ..ExecutorConfig::default()
            },
            ..EvalSpec::default()
        };
        success_rate(p, LayerSkip::none(), &spec).unwrap()
    };
    let (t_dyn, s_dyn) = (dynamic(&teacher.params), dynamic(student));
    let s_static = success_rate(student, LayerSkip::none(), &static_spec()).unwrap();
    let gap = s_dyn - t_dyn;
    let static_gap = (s_static - teacher.static_success).abs();
    Outcome::new(
        gap >= 0.05 && static_gap <= 0.05,
        format!(
            "dynamic: student {s_dyn:.3} ({} frames) vs teacher {t_dyn:.3} ({} frames) over {DYNAMIC_EPISODES}; static gap {static_gap:.3}",
            frames(student),
            frames(&teacher.params)
        ),
    )
}

fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if path.is_file() && !skip.contains(&name.as_str()) {
            out.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn determinism(work: &Path) -> Outcome {
    let w = |p: &str| work.join(p).to_str().unwrap().to_string();
    let data = w("d.bin");
    let teacher = w("t");
    let student = w("s");
    let t_ckpt = format!("{teacher}/teacher.ckpt");
    let s_ckpt = format!("{student}/student.ckpt");
    let runs: Vec<(&str, Vec<String>, String, Vec<&str>)> = vec![
        ("gen-data", vec!["gen-data", "--episodes", "30", "--seed", "7", "--out", &data].into_iter().map(String::from).collect(), work.to_str().unwrap().to_string(), vec![]),
        ("train-teacher", vec!["train-teacher", "--data", &data, "--steps", "20", "--layers", "3", "--out", &teacher].into_iter().map(String::from).collect(), teacher.clone(), vec![]),
        ("distill", vec!["distill", "--teacher", &t_ckpt, "--data", &data, "--layers", "2", "--steps", "10", "--out", &student].into_iter().map(String::from).collect(), student.clone(), vec![]),
        ("eval", vec!["eval", "--ckpt", &s_ckpt, "--suite", "dynamic", "--staleness", "auto", "--episodes", "10", "--horizon", "40", "--out", &w("e")].into_iter().map(String::from).collect(), w("e"), vec![]),
        ("analyze-similarity", vec!["analyze-similarity", "--ckpt", &t_ckpt, "--data", &data, "--examples", "40", "--out", &w("sim")].into_iter().map(String::from).collect(), w("sim"), vec![]),
        ("analyze-sensitivity", vec!["analyze-sensitivity", "--ckpt", &t_ckpt, "--episodes", "10", "--horizon", "40", "--out", &w("sens")].into_iter().map(String::from).collect(), w("sens"), vec![]),
        ("analyze-progressive", vec!["analyze-progressive", "--ckpt", &t_ckpt, "--episodes", "10", "--horizon", "40", "--out", &w("prog")].into_iter().map(String::from).collect(), w("prog"), vec![]),
        ("bench-latency", vec!["bench-latency", "--depths", "1,2", "--tokens", "4", "--json", "--out", &w("bench")].into_iter().map(String::from).collect(), w("bench"), vec!["bench.csv", "bench.json", "speedup.csv"]),
    ];
    let mut failures = Vec::new();
    let mut checked = 0;
    for (name, args, dir, timing) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        cli(&args);
        let first = snapshot(Path::new(dir), timing);
        cli(&args);
        let second = snapshot(Path::new(dir), timing);
        checked += first.len();
        if first.is_empty() || first != second {
            failures.push(name.to_string());
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("8 subcommands rerun, {checked} artifacts byte-identical")
        } else {
            format!("artifacts differ for {failures:?}")
        },
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // Cargo passes libtest flags such as --list; this harness has one case.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {id:>2} {:<31} {} | {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    record(1, "gradient correctness", gradient_correctness());
    record(2, "kv-cache equivalence", cache_equivalence());
    record(3, "prefix mask invariant", mask_invariant());
    record(4, "identity distillation", identity_distillation());

    let (outcome, teacher) = teacher_capability(work.path());
    record(5, "teacher capability", outcome);

    let (means, students) = distillation_arms(&teacher);
    let full = means["full"];
    record(
        6,
        "distillation preserves success",
        Outcome::new(
            (teacher.static_success - full) <= 0.05,
            format!("student {full:.3} vs teacher {:.3} (3 seeds, {STUDENT_STEPS} steps)", teacher.static_success),
        ),
    );
    let (kd, task, initial) = (means["task+kd"], means["task"], means["full/initial"]);
    let tol = 0.01;
    record(
        7,
        "ablation ordering",
        Outcome::new(
            full + tol >= kd && kd + tol >= task && full + tol >= initial,
            format!("task+kd+attn {full:.3} >= task+kd {kd:.3} >= task {task:.3}; middle {full:.3} >= initial {initial:.3}"),
        ),
    );
    let scratch = means["scratch"];
    record(
        8,
        "distilled beats scratch",
        Outcome::new(
            full - scratch >= 0.03,
            format!("distilled {full:.3} vs scratch {scratch:.3} at {STUDENT_STEPS} steps"),
        ),
    );
    record(9, "layer-skipping collapse", layer_skipping(&teacher));
    record(10, "latency scaling", latency_scaling());
    record(11, "dynamic-task advantage", dynamic_advantage(&teacher, &students[0]));
    record(12, "determinism", determinism(&work.path().join("det")));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1?}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
