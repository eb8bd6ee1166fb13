//! Command-line surface: synthetic data generation, matching, two-view and
//! multi-view pose estimation, training, evaluation and numerical
//! verification.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 training divergence.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{ConfigError, RunConfig};
use pke2_core::autodiff::Tape;
use pke2_core::geometry::pose_error;
use pke2_core::matcher::{
    count_messages, match_tuple, FrameNodes, MatchMode, MatcherWeights,
};
use pke2_core::multiview::{auc, evaluate_tuples, PipelineConfig, TwoViewSolver};
use pke2_core::posesolver::{
    bundle_adjust, recover_pose, weighted_eight_point, MatchNodes, RecoveryMode, WeightedMatches,
};
use pke2_core::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, TupleSample};
use pke2_core::training::{
    run_gradcheck_suite, train_toy, Stage, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "pke2", version, about = "Multi-view matching with differentiable pose optimization")]
struct Cli {
    /// Configuration profile: toy or paper.
    #[arg(long, global = true, default_value = "toy")]
    profile: String,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed; falls back to the PKE2_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for per-tuple commands.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        tuples: Option<usize>,
        #[arg(long)]
        outliers: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match all pairs of every tuple and report correspondences.
    Match {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "joint")]
        mode: String,
        #[arg(long)]
        conf_threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-view pose estimation on all pairs.
    Pose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// 8pt or 8pt+ba.
        #[arg(long, default_value = "8pt+ba")]
        solver: String,
        #[arg(long)]
        ba_iters: Option<usize>,
        #[arg(long, default_value = "joint")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-view pipeline with spanning tree, averaging and global BA.
    Multiview {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "joint")]
        mode: String,
        #[arg(long)]
        no_global_ba: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the matcher (stage 1: match loss; stage 2: ramped combined).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: u32,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "joint")]
        mode: String,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Two-view pose AUC evaluation over all pairs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "8pt+ba")]
        solver: String,
        #[arg(long, default_value = "joint")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical verification of the differentiable pipeline.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(AppError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(AppError::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(3)
        }
        Err(AppError::Divergence(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(4)
        }
        Err(AppError::Other(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

enum AppError {
    Config(ConfigError),
    Solver(String),
    Divergence(String),
    Other(String),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

macro_rules! other {
    ($($t:tt)*) => { AppError::Other(format!($($t)*)) };
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::for_profile(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    for kv in &cli.sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError(format!("--set expects key=value, got '{kv}'")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("PKE2_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| ConfigError(format!("PKE2_SEED='{env_seed}' is not a u64")))?;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs.max(1);
    }
    Ok(cfg)
}

fn parse_mode(mode: &str) -> Result<MatchMode, ConfigError> {
    match mode {
        "joint" => Ok(MatchMode::Joint),
        "pairwise" => Ok(MatchMode::Pairwise),
        other => Err(ConfigError(format!("unknown match mode '{other}'"))),
    }
}

fn parse_solver(solver: &str) -> Result<TwoViewSolver, ConfigError> {
    match solver {
        "8pt" => Ok(TwoViewSolver::EightPoint),
        "8pt+ba" => Ok(TwoViewSolver::EightPointWithBa),
        other => Err(ConfigError(format!("unknown solver '{other}'"))),
    }
}

fn load_weights(path: &Path, cfg: &RunConfig) -> Result<MatcherWeights, AppError> {
    let expected = cfg.matcher_config()?;
    MatcherWeights::load(path, Some(&expected))
        .map_err(|e| AppError::Config(ConfigError(format!("weights: {e}"))))
}

fn load_data(path: &Path) -> Result<Dataset, AppError> {
    read_dataset(path).map_err(|e| other!("dataset: {e}"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), AppError> {
    let mut text =
        serde_json::to_string(value).map_err(|e| other!("serialize output: {e}"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| other!("write {}: {e}", path.display()))
}

/// Ordered parallel map over tuples; deterministic regardless of job count.
fn parallel_map<R: Send, F>(items: &[TupleSample], jobs: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &TupleSample) -> R + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<R>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                **slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    out.into_iter().map(Option::unwrap).collect()
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen { tuples, outliers, out } => cmd_gen(&cli, cfg, *tuples, *outliers, out),
        Command::Match {
            data,
            weights,
            mode,
            conf_threshold,
            out,
        } => cmd_match(cfg, data, weights, mode, *conf_threshold, out),
        Command::Pose {
            data,
            weights,
            solver,
            ba_iters,
            mode,
            out,
        } => cmd_pose(cfg, data, weights, solver, *ba_iters, mode, out),
        Command::Multiview {
            data,
            weights,
            mode,
            no_global_ba,
            out,
        } => cmd_multiview(cfg, data, weights, mode, *no_global_ba, out),
        Command::Train {
            data,
            stage,
            init,
            mode,
            out_weights,
            log,
        } => cmd_train(cfg, data, *stage, init.as_deref(), mode, out_weights, log),
        Command::Eval {
            data,
            weights,
            solver,
            mode,
            out,
        } => cmd_eval(cfg, data, weights, solver, mode, out),
        Command::Gradcheck { eps } => cmd_gradcheck(*eps),
    }
}

fn cmd_gen(
    _cli: &Cli,
    mut cfg: RunConfig,
    tuples: Option<usize>,
    outliers: Option<f64>,
    out: &Path,
) -> Result<ExitCode, AppError> {
    if let Some(t) = tuples {
        cfg.tuples = t;
    }
    if let Some(o) = outliers {
        if !(0.0..=0.5).contains(&o) {
            return Err(AppError::Config(ConfigError(format!(
                "outlier fraction {o} outside [0, 0.5]"
            ))));
        }
        cfg.outliers = o;
    }
    let dataset = generate_dataset(&cfg.scene_config(), &cfg.render_params(), cfg.tuples, cfg.seed)
        .map_err(|e| other!("generation: {e}"))?;
    write_dataset(&dataset, out).map_err(|e| other!("write dataset: {e}"))?;
    // Echo the resolved config next to the data for reproducibility.
    append_config_key(out, &cfg)?;
    eprintln!("wrote {} tuples to {}", dataset.tuples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Datasets carry the resolved config as an extra top-level key.
fn append_config_key(path: &Path, cfg: &RunConfig) -> Result<(), AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| other!("reread dataset: {e}"))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| other!("reparse dataset: {e}"))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("config".into(), cfg.to_json());
    }
    write_json(path, &value)
}

fn cmd_match(
    cfg: RunConfig,
    data: &Path,
    weights_path: &Path,
    mode: &str,
    conf_threshold: Option<f64>,
    out: &Path,
) -> Result<ExitCode, AppError> {
    let mode = parse_mode(mode)?;
    let dataset = load_data(data)?;
    let weights = load_weights(weights_path, &cfg)?;
    let mcfg = cfg.matcher_config()?;
    let threshold = conf_threshold.or(cfg.conf_threshold);

    let results = parallel_map(&dataset.tuples, cfg.jobs, |ti, tuple| {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let frames: Result<Vec<FrameNodes>, _> = tuple
            .frames
            .iter()
            .map(|f| {
                FrameNodes::from_keypoints(
                    &mut tape,
                    &f.keypoints,
                    (f.intrinsics.width, f.intrinsics.height),
                    false,
                )
            })
            .collect();
        let frames = match frames {
            Ok(f) => f,
            Err(e) => return json!({"tuple": ti, "error": e.to_string()}),
        };
        match match_tuple(&mut tape, &frames, &bound, &mcfg, mode) {
            Ok(tm) => {
                let ms = tm.to_match_set(&tape, threshold);
                let pairs: Vec<serde_json::Value> = tm
                    .pairs
                    .iter()
                    .map(|p| {
                        let matches: Vec<serde_json::Value> = ms
                            .for_pair(p.a, p.b)
                            .map(|m| {
                                json!({"i": m.idx_a, "j": m.idx_b, "weight": m.weight, "score": m.score})
                            })
                            .collect();
                        json!({"a": p.a, "b": p.b, "matches": matches})
                    })
                    .collect();
                let counts: Vec<serde_json::Value> = tm
                    .counter
                    .per_layer
                    .iter()
                    .map(|(e, c)| json!({"edge": format!("{e:?}"), "messages": c}))
                    .collect();
                json!({"tuple": ti, "pairs": pairs, "message_counts": counts})
            }
            Err(e) => json!({"tuple": ti, "error": e.to_string()}),
        }
    });

    let n = dataset.tuples[0].frames.len();
    let k = dataset.tuples[0].frames[0].keypoints.len();
    let expected: Vec<serde_json::Value> = count_messages(n, k, &mcfg.schedule, mode)
        .iter()
        .map(|lm| json!({"edge": format!("{:?}", lm.edge), "messages": lm.messages}))
        .collect();
    write_json(
        out,
        &json!({
            "config": cfg.to_json(),
            "mode": format!("{mode:?}"),
            "expected_messages_per_tuple": expected,
            "tuples": results,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

struct PairPoseResult {
    a: usize,
    b: usize,
    ok: bool,
    rot_deg: f64,
    transl_deg: f64,
    matches: usize,
    detail: String,
}

fn estimate_tuple_pairs(
    tuple: &TupleSample,
    weights: &MatcherWeights,
    mcfg: &pke2_core::matcher::MatcherConfig,
    mode: MatchMode,
    solver: TwoViewSolver,
    ba: &pke2_core::posesolver::BaConfig,
    conf_threshold: Option<f64>,
) -> Vec<PairPoseResult> {
    let mut out = Vec::new();
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let frames: Result<Vec<FrameNodes>, _> = tuple
        .frames
        .iter()
        .map(|f| {
            FrameNodes::from_keypoints(
                &mut tape,
                &f.keypoints,
                (f.intrinsics.width, f.intrinsics.height),
                false,
            )
        })
        .collect();
    let Ok(frames) = frames else {
        return out;
    };
    let Ok(tm) = match_tuple(&mut tape, &frames, &bound, mcfg, mode) else {
        return out;
    };
    for pair in &tm.pairs {
        let gt = tuple.relative_gt(pair.a, pair.b);
        let mut result = PairPoseResult {
            a: pair.a,
            b: pair.b,
            ok: false,
            rot_deg: 180.0,
            transl_deg: 180.0,
            matches: pair.matches.len(),
            detail: String::new(),
        };
        let fa = &tuple.frames[pair.a];
        let fb = &tuple.frames[pair.b];
        let estimate = (|| -> Result<pke2_core::geometry::RelativePose, String> {
            let wn = pair.weights_node.ok_or("no matches")?;
            let conf = tape.value(wn).data().to_vec();
            let mut wm = WeightedMatches::default();
            for (k, &(i, j, _)) in pair.matches.iter().enumerate() {
                if conf_threshold.is_some_and(|t| conf[k] < t) {
                    continue;
                }
                wm.push_xy(
                    fa.keypoints.coords[i][0],
                    fa.keypoints.coords[i][1],
                    fb.keypoints.coords[j][0],
                    fb.keypoints.coords[j][1],
                    conf[k],
                );
            }
            if wm.len() < 8 {
                return Err(format!("{} matches after thresholding", wm.len()));
            }
            let nodes = MatchNodes::from_weighted(&mut tape, &wm, false, false);
            let f = weighted_eight_point(&mut tape, &nodes).map_err(|e| e.to_string())?;
            let px: Vec<_> = wm
                .x_a
                .iter()
                .zip(wm.x_b.iter())
                .map(|(a, b)| (*a, *b))
                .collect();
            let (pose8, _, _) = recover_pose(
                &mut tape,
                f,
                &px,
                &fa.intrinsics,
                &fb.intrinsics,
                RecoveryMode::Cheirality,
            )
            .map_err(|e| e.to_string())?;
            Ok(match solver {
                TwoViewSolver::EightPoint => pose8,
                TwoViewSolver::EightPointWithBa => bundle_adjust(
                    &mut tape,
                    &pose8,
                    &nodes,
                    &fa.intrinsics,
                    &fb.intrinsics,
                    ba,
                )
                .map(|r| r.pose)
                .unwrap_or(pose8),
            })
        })();
        match estimate {
            Ok(pose) => {
                let e = pose_error(&pose, &gt);
                result.ok = true;
                result.rot_deg = e.rot_deg;
                result.transl_deg = e.transl_deg.unwrap_or(180.0);
            }
            Err(msg) => result.detail = msg,
        }
        out.push(result);
    }
    out
}

fn cmd_pose(
    mut cfg: RunConfig,
    data: &Path,
    weights_path: &Path,
    solver: &str,
    ba_iters: Option<usize>,
    mode: &str,
    out: &Path,
) -> Result<ExitCode, AppError> {
    if let Some(t) = ba_iters {
        cfg.ba_iters = t;
    }
    let solver = parse_solver(solver)?;
    let mode = parse_mode(mode)?;
    let dataset = load_data(data)?;
    let weights = load_weights(weights_path, &cfg)?;
    let mcfg = cfg.matcher_config()?;
    let ba = cfg.ba_config();
    let threshold = cfg.conf_threshold;

    let results = parallel_map(&dataset.tuples, cfg.jobs, |_, tuple| {
        estimate_tuple_pairs(tuple, &weights, &mcfg, mode, solver, &ba, threshold)
    });

    let mut ok = 0usize;
    let mut failed = 0usize;
    let tuples: Vec<serde_json::Value> = results
        .iter()
        .enumerate()
        .map(|(ti, pairs)| {
            let pj: Vec<serde_json::Value> = pairs
                .iter()
                .map(|p| {
                    if p.ok {
                        ok += 1;
                    } else {
                        failed += 1;
                    }
                    json!({
                        "a": p.a, "b": p.b, "ok": p.ok,
                        "rot_deg": p.rot_deg, "transl_deg": p.transl_deg,
                        "matches": p.matches,
                        "detail": p.detail,
                    })
                })
                .collect();
            json!({"tuple": ti, "pairs": pj})
        })
        .collect();

    write_json(
        out,
        &json!({
            "config": cfg.to_json(),
            "solver": solver_name(solver),
            "pairs_ok": ok,
            "pairs_failed": failed,
            "tuples": tuples,
        }),
    )?;
    if ok == 0 {
        return Err(AppError::Solver("no pair could be estimated".into()));
    }
    Ok(ExitCode::SUCCESS)
}

fn solver_name(s: TwoViewSolver) -> &'static str {
    match s {
        TwoViewSolver::EightPoint => "8pt",
        TwoViewSolver::EightPointWithBa => "8pt+ba",
    }
}

fn cmd_eval(
    cfg: RunConfig,
    data: &Path,
    weights_path: &Path,
    solver: &str,
    mode: &str,
    out: &Path,
) -> Result<ExitCode, AppError> {
    let solver = parse_solver(solver)?;
    let mode = parse_mode(mode)?;
    let dataset = load_data(data)?;
    let weights = load_weights(weights_path, &cfg)?;
    let mcfg = cfg.matcher_config()?;
    let ba = cfg.ba_config();
    let threshold = cfg.conf_threshold;

    let results = parallel_map(&dataset.tuples, cfg.jobs, |_, tuple| {
        estimate_tuple_pairs(tuple, &weights, &mcfg, mode, solver, &ba, threshold)
    });
    let mut pose_errors = Vec::new();
    let mut rot_errors = Vec::new();
    let mut transl_errors = Vec::new();
    let mut pairs = Vec::new();
    for (ti, tuple_pairs) in results.iter().enumerate() {
        for p in tuple_pairs {
            pose_errors.push(p.rot_deg.max(p.transl_deg));
            rot_errors.push(p.rot_deg);
            transl_errors.push(p.transl_deg);
            pairs.push(json!({
                "tuple": ti, "a": p.a, "b": p.b, "ok": p.ok,
                "rot_deg": p.rot_deg, "transl_deg": p.transl_deg,
            }));
        }
    }
    let thresholds = cfg.auc_thresholds.clone();
    write_json(
        out,
        &json!({
            "config": cfg.to_json(),
            "solver": solver_name(solver),
            "mode": format!("{mode:?}"),
            "thresholds_deg": thresholds,
            "pose_auc": auc(&pose_errors, &thresholds),
            "rot_auc": auc(&rot_errors, &thresholds),
            "transl_auc": auc(&transl_errors, &thresholds),
            "pairs": pairs,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_multiview(
    cfg: RunConfig,
    data: &Path,
    weights_path: &Path,
    mode: &str,
    no_global_ba: bool,
    out: &Path,
) -> Result<ExitCode, AppError> {
    let mode = parse_mode(mode)?;
    let dataset = load_data(data)?;
    let weights = load_weights(weights_path, &cfg)?;
    let mcfg = cfg.matcher_config()?;
    let pipeline = PipelineConfig {
        mode,
        solver: TwoViewSolver::EightPointWithBa,
        ba: cfg.ba_config(),
        conf_threshold: cfg.conf_threshold,
        global_ba: !no_global_ba,
    };
    // evaluate_tuples is sequential inside; parallelize across chunks of one
    // tuple to honor --jobs while keeping output order.
    let thresholds = cfg.auc_thresholds.clone();
    let chunks = parallel_map(&dataset.tuples, cfg.jobs, |ti, tuple| {
        let (report, diags) = evaluate_tuples(
            std::slice::from_ref(tuple),
            &weights,
            &mcfg,
            &pipeline,
            &thresholds,
        );
        (ti, report, diags)
    });
    let mut per_pair = Vec::new();
    let mut diagnostics = Vec::new();
    for (ti, report, diags) in chunks {
        for mut p in report.per_pair {
            p.tuple = ti;
            per_pair.push(p);
        }
        for mut d in diags {
            d.tuple = ti;
            diagnostics.push(d);
        }
    }
    let rot: Vec<f64> = per_pair.iter().map(|p| p.rot_deg).collect();
    let transl: Vec<f64> = per_pair.iter().map(|p| p.transl_deg).collect();
    let solved = diagnostics.iter().filter(|d| d.pipeline_error.is_none()).count();
    write_json(
        out,
        &json!({
            "config": cfg.to_json(),
            "thresholds_deg": thresholds,
            "rot_auc": auc(&rot, &thresholds),
            "transl_auc": auc(&transl, &thresholds),
            "per_pair": serde_json::to_value(&per_pair).unwrap(),
            "diagnostics": serde_json::to_value(&diagnostics).unwrap(),
        }),
    )?;
    if solved == 0 {
        return Err(AppError::Solver("every tuple failed the pipeline".into()));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    cfg: RunConfig,
    data: &Path,
    stage: u32,
    init: Option<&Path>,
    mode: &str,
    out_weights: &Path,
    log: &Path,
) -> Result<ExitCode, AppError> {
    let mode = parse_mode(mode)?;
    let stage = match stage {
        1 => Stage::One,
        2 => Stage::Two,
        other => {
            return Err(AppError::Config(ConfigError(format!(
                "stage must be 1 or 2, got {other}"
            ))))
        }
    };
    let dataset = load_data(data)?;
    let mcfg = cfg.matcher_config()?;
    let init_weights = match init {
        Some(path) => Some(
            MatcherWeights::load(path, Some(&mcfg))
                .map_err(|e| AppError::Config(ConfigError(format!("init weights: {e}"))))?,
        ),
        None => None,
    };
    let tc = TrainConfig {
        mode,
        stage,
        iterations: cfg.iterations,
        schedule: cfg.loss_schedule(),
        adam: cfg.adam(),
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
        val_tuples: cfg.val_tuples,
        val_every: cfg.val_every,
    };
    let outcome = match train_toy(&dataset, &mcfg, init_weights, &tc) {
        Ok(o) => o,
        Err(TrainError::Divergence { iteration }) => {
            return Err(AppError::Divergence(format!(
                "training diverged at iteration {iteration}"
            )))
        }
        Err(e) => return Err(other!("training: {e}")),
    };
    outcome
        .weights
        .save(out_weights)
        .map_err(|e| other!("save weights: {e}"))?;
    let mut lines = String::new();
    lines.push_str(&serde_json::to_string(&json!({"config": cfg.to_json()})).unwrap());
    lines.push('\n');
    for r in &outcome.records {
        lines.push_str(&serde_json::to_string(r).unwrap());
        lines.push('\n');
    }
    std::fs::write(log, lines).map_err(|e| other!("write log: {e}"))?;
    eprintln!(
        "trained stage {} for {} iterations: val match loss {:.4}, val pose loss {:.4}, val AUC@10 {:.2}",
        match stage {
            Stage::One => 1,
            Stage::Two => 2,
        },
        cfg.iterations,
        outcome.val_match_loss,
        outcome.val_pose_loss,
        outcome.val_auc10
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(eps: f64) -> Result<ExitCode, AppError> {
    let results = run_gradcheck_suite(eps).map_err(|e| other!("gradcheck: {e}"))?;
    let mut all_ok = true;
    println!("{:<16} {:>14} {:>12} {:>8}", "check", "max_error", "tolerance", "status");
    for r in &results {
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{:<16} {:>14.3e} {:>12.1e} {:>8}",
            r.name,
            r.max_error,
            r.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(AppError::Solver("gradient checks failed".into()))
    }
}
