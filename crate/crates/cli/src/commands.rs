use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use diffdrive::evaluator::{evaluate, evaluate_scenario, EvalConfig, ExpertPlanner, MetricsReport, NetworkPlanner, Planner};
use diffdrive::policy::{Checkpoint, Policy};
use diffdrive::scene::{load_scenario, ScenarioLog};
use diffdrive::trainer::{train, Method, TrainCheckpoint, TrainError, TrainIo};
use diffdrive::Real;
use serde::Serialize;
use toml::Value;

use crate::config::{Layered, Precision, RunConfig};
use crate::data::{self, write_json, write_run_manifest};
use crate::render::{render_frame, Overlay};
use crate::{usage, Axis, Command, Common, PlannerArg, TrainArgs};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const POLICY_FILE: &str = "policy.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            common,
            n_scenarios,
            test_fraction,
            frames,
        } => {
            let mut l = layers(&common)?;
            put(&mut l, "data.n_scenarios", n_scenarios.map(|v| Value::Integer(v as i64)))?;
            put(&mut l, "data.test_fraction", test_fraction.map(Value::Float))?;
            put(&mut l, "data.frames_per_scenario", frames.map(|v| Value::Integer(v as i64)))?;
            let cfg = finish(&l)?;
            let m = data::gen_data(&cfg)?;
            println!(
                "wrote {} train and {} test scenarios to {} (manifest {})",
                m.train.len(),
                m.test.len(),
                cfg.data_dir.display(),
                m.hash
            );
            Ok(())
        }
        Command::Train { common, train, resume } => {
            let mut l = layers(&common)?;
            apply_train_args(&mut l, &train)?;
            let cfg = resolve_method(&l, finish(&l)?)?;
            let report = train_run(&cfg, resume)?;
            println!("{}", report.display());
            Ok(())
        }
        Command::Eval {
            common,
            planner,
            checkpoint,
            offroad_threshold,
            split,
        } => {
            let mut l = layers(&common)?;
            put(&mut l, "eval.offroad_threshold", offroad_threshold.map(Value::Float))?;
            let cfg = finish(&l)?;
            let logs = data::load_split(&cfg.data_dir, &split)?;
            let report = match planner {
                PlannerArg::ExpertOracle => evaluate(&ExpertPlanner, "expert-oracle", &logs, &cfg.eval)?,
                PlannerArg::Network => {
                    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(POLICY_FILE));
                    let name = planner_name(&path)?;
                    with_planner(&cfg, &path, |p| Ok(evaluate(p, &name, &logs, &cfg.eval)?))?
                }
            };
            let dir = cfg.out_dir.join("eval");
            write_report(&dir, &report)?;
            fs::write(cfg.out_dir.join("eval_config.toml"), cfg.to_toml()?)?;
            write_run_manifest(&cfg.out_dir, "eval")?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Sweep {
            common,
            train,
            axis,
            values,
        } => {
            let mut l = layers(&common)?;
            apply_train_args(&mut l, &train)?;
            let base = resolve_method(&l, finish(&l)?)?;
            sweep(&base, axis, &values)
        }
        Command::Render {
            common,
            scenario,
            index,
            split,
            checkpoint,
            frames,
        } => {
            let cfg = finish(&layers(&common)?)?;
            let log = match &scenario {
                Some(p) => load_scenario(p).with_context(|| format!("loading {}", p.display()))?,
                None => {
                    let files = data::split_files(&cfg.data_dir, &split)?;
                    let p = files
                        .get(index)
                        .ok_or_else(|| usage(format!("--index {index} but the {split} split has {} scenarios", files.len())))?;
                    load_scenario(p)?
                }
            };
            let (start, end) = parse_frames(frames.as_deref(), log.frames.len())?;
            let overlay = match &checkpoint {
                Some(path) => Some(policy_overlay(&cfg, &log, path, start, end)?),
                None => None,
            };
            let dir = cfg.out_dir.join("render");
            fs::create_dir_all(&dir)?;
            for t in start..end {
                fs::write(dir.join(format!("frame_{t:04}.svg")), render_frame(&log, t, overlay.as_ref()))?;
            }
            write_run_manifest(&cfg.out_dir, "render")?;
            println!("wrote {} frames to {}", end - start, dir.display());
            Ok(())
        }
    }
}

fn layers(common: &Common) -> Result<Layered> {
    let mut l = Layered::new();
    if let Some(p) = &common.config {
        l.merge_file(p).map_err(|e| usage(format!("{e:#}")))?;
    }
    l.merge_env(std::env::vars()).map_err(|e| usage(e.to_string()))?;
    for s in &common.set {
        l.set_assignment(s).map_err(|e| usage(e.to_string()))?;
    }
    put(&mut l, "seed", common.seed.map(|v| Value::Integer(v as i64)))?;
    put(&mut l, "out_dir", common.out_dir.as_ref().map(|p| Value::String(p.display().to_string())))?;
    put(&mut l, "data_dir", common.data_dir.as_ref().map(|p| Value::String(p.display().to_string())))?;
    put(&mut l, "workers", common.workers.map(|v| Value::Integer(v as i64)))?;
    Ok(l)
}

fn put(l: &mut Layered, key: &str, v: Option<Value>) -> Result<()> {
    if let Some(v) = v {
        l.set_value(key, v)?;
    }
    Ok(())
}

fn apply_train_args(l: &mut Layered, a: &TrainArgs) -> Result<()> {
    let int = |v: Option<usize>| v.map(|v| Value::Integer(v as i64));
    put(l, "train.method", a.method.map(|m| Value::String(m.config_name().into())))?;
    put(l, "train.horizon", int(a.horizon))?;
    put(l, "train.discard", int(a.discard))?;
    put(l, "train.weights.gamma", a.gamma.map(Value::Float))?;
    put(l, "train.weights.alpha", a.alpha.map(Value::Float))?;
    put(l, "train.weights.beta", a.beta.map(Value::Float))?;
    put(l, "train.epochs", int(a.epochs))?;
    put(l, "train.lr", a.lr.map(Value::Float))?;
    put(l, "train.batch_size", int(a.batch_size))?;
    put(l, "policy.use_sdv_history", a.use_sdv_history.map(Value::Boolean))?;
    put(l, "data_fraction", a.data_fraction.map(Value::Float))?;
    Ok(())
}

fn finish(l: &Layered) -> Result<RunConfig> {
    let cfg = l.build().map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    init_threads(cfg.workers);
    Ok(cfg)
}

fn init_threads(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

/// BC never sees the SDV history: an explicit request for it is a usage error,
/// otherwise the default is switched off.
fn resolve_method(l: &Layered, mut cfg: RunConfig) -> Result<RunConfig> {
    if cfg.train.method == Method::Bc {
        if l.contains("policy.use_sdv_history") && cfg.policy.use_sdv_history {
            return Err(usage("--method bc does not take the SDV history; drop --use-sdv-history true"));
        }
        cfg.policy.use_sdv_history = false;
        cfg.policy.history_dropout_prob = 0.0;
    }
    Ok(cfg)
}

fn train_run(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, resume),
        Precision::F64 => train_typed::<f64>(cfg, resume),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let logs = data::take_fraction(data::load_split(&cfg.data_dir, "train")?, cfg.data_fraction);
    let out = &cfg.out_dir;
    let ck_dir = out.join(CHECKPOINT_DIR);
    let resume_ck = if resume {
        let p = ck_dir.join("latest.json");
        if !p.exists() {
            return Err(usage(format!("--resume but {} does not exist", p.display())));
        }
        let ck = TrainCheckpoint::load(&p)?;
        if ck.config != cfg.train {
            return Err(usage("training config differs from the checkpoint being resumed"));
        }
        Some(ck)
    } else {
        None
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let policy = Policy::<T>::new(cfg.policy.clone(), cfg.seed).map_err(|e| usage(e.to_string()))?;
    let io = TrainIo {
        checkpoint_dir: Some(ck_dir),
        log_path: Some(out.join(TRAIN_LOG)),
        resume: resume_ck,
        dump_dir: None,
    };
    let outcome = train(&logs, policy, &cfg.train, &io).map_err(|e| match e {
        TrainError::Config(m) => usage(m),
        e => anyhow!(e),
    })?;
    outcome.policy.save(&out.join(POLICY_FILE))?;
    write_json(&out.join("curve.json"), &outcome.curve)?;
    write_run_manifest(out, "train")?;
    Ok(out.join(POLICY_FILE))
}

/// Reads either a bare policy file or a training checkpoint.
fn load_policy<T: Real>(path: &Path) -> Result<Policy<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(ck) = serde_json::from_str::<Checkpoint>(&text) {
        return Ok(Policy::from_checkpoint(&ck)?);
    }
    let ck: TrainCheckpoint = serde_json::from_str(&text).with_context(|| format!("{} is neither a policy nor a checkpoint", path.display()))?;
    Ok(Policy::from_checkpoint(&ck.policy)?)
}

/// Names a network planner by its checkpoint content, so reports do not depend
/// on where the run directory lives.
fn planner_name(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("network-{}", &data::sha256_hex(&bytes)[..12]))
}

fn with_planner<R>(cfg: &RunConfig, path: &Path, f: impl FnOnce(&dyn Planner) -> Result<R>) -> Result<R> {
    match cfg.precision {
        Precision::F32 => f(&NetworkPlanner {
            policy: load_policy::<f32>(path)?,
        }),
        Precision::F64 => f(&NetworkPlanner {
            policy: load_policy::<f64>(path)?,
        }),
    }
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    i1k: f64,
    collisions: u64,
    front: u64,
    side: u64,
    rear: u64,
    off_road: u64,
    comfort_acc: u64,
    l2: f64,
}

fn sweep(base: &RunConfig, axis: Axis, values: &[f64]) -> Result<()> {
    let name = match axis {
        Axis::Alpha => "alpha",
        Axis::Beta => "beta",
        Axis::K => "K",
        Axis::DataFraction => "data_fraction",
    };
    let root = base.out_dir.join(format!("sweep_{name}"));
    let test = data::load_split(&base.data_dir, "test")?;
    let mut rows = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            Axis::Alpha => cfg.train.weights.alpha = v,
            Axis::Beta => cfg.train.weights.beta = v,
            Axis::K => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(usage(format!("K must be a non-negative integer, got {v}")));
                }
                cfg.train.discard = v as usize;
            }
            Axis::DataFraction => cfg.data_fraction = v,
        }
        cfg.out_dir = root.join(format!("{name}_{v}"));
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let policy = train_run(&cfg, false)?;
        let report = with_planner(&cfg, &policy, |p| Ok(evaluate(p, &format!("{name}={v}"), &test, &cfg.eval)?))?;
        write_report(&cfg.out_dir.join("eval"), &report)?;
        write_run_manifest(&cfg.out_dir, "sweep")?;
        rows.push(SweepRow {
            value: v,
            i1k: report.i1k,
            collisions: report.collisions_total,
            front: report.counts.front,
            side: report.counts.side,
            rear: report.counts.rear,
            off_road: report.counts.off_road,
            comfort_acc: report.counts.comfort_acc,
            l2: report.l2,
        });
    }
    let mut csv = format!("{name},i1k,collisions,front,side,rear,off_road,comfort_acc,l2\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.3},{},{},{},{},{},{},{:.6}\n",
            r.value, r.i1k, r.collisions, r.front, r.side, r.rear, r.off_road, r.comfort_acc, r.l2
        ));
    }
    fs::write(root.join("summary.csv"), &csv)?;
    write_json(&root.join("summary.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

fn parse_frames(spec: Option<&str>, n: usize) -> Result<(usize, usize)> {
    let (start, end) = match spec {
        None => (0, n),
        Some(s) => {
            let (a, b) = s
                .split_once("..")
                .ok_or_else(|| usage(format!("--frames expects START..END, got {s:?}")))?;
            let p = |x: &str| x.trim().parse::<usize>().map_err(|_| usage(format!("bad frame number {x:?}")));
            (p(a)?, p(b)?)
        }
    };
    if start >= end || end > n {
        return Err(usage(format!("frame range {start}..{end} outside the log's {n} frames")));
    }
    Ok((start, end))
}

fn policy_overlay(cfg: &RunConfig, log: &ScenarioLog, path: &Path, start: usize, end: usize) -> Result<Overlay> {
    let eval = EvalConfig {
        start_frame: start.max(cfg.eval.start_frame),
        max_frames: Some(end.saturating_sub(1).saturating_sub(start.max(cfg.eval.start_frame))),
        ..cfg.eval.clone()
    };
    let result = with_planner(cfg, path, |p| Ok(evaluate_scenario(p, log, &eval)?))?;
    Ok(Overlay {
        expert: log.frames[start..end].iter().map(|f| [f.sdv_pose.x, f.sdv_pose.y]).collect(),
        policy: result.poses,
        first_frame: eval.start_frame,
    })
}
