//! Closed-loop training through the simulator, plus the open-loop and
//! detached baselines.
//!
//! Every rollout step records its own tape: the state block `S_t` enters as a
//! leaf, so the backward recursion can hand the state adjoint of step `t + 1`
//! to step `t` as an extra seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{AdamConfig, BoundParams, GradError, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::losses::{step_cost, CostWeights, LossError, StepCostInput};
use crate::policy::{first_action_var, Checkpoint, HistoryMode, Policy, PolicyError};
use crate::real::Real;
use crate::scene::{ScenarioLog, HISTORY_POINTS};
use crate::se2::Pose;
use crate::sim::{
    init_rollout, policy_input, state_from_tensor, state_tensor, transition, Kinematics, SimContext, SimError,
    SimState, TapeState,
};

pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss in epoch {epoch} (scenario {scenario}, t0 {t0}); dump at {dump}")]
    NonFinite {
        epoch: usize,
        scenario: usize,
        t0: usize,
        dump: String,
    },
    #[error("dataset has no usable samples")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ours,
    Bc,
    BcPerturb,
    MsPrediction,
}

impl Method {
    pub fn closed_loop(self) -> bool {
        matches!(self, Method::Ours | Method::MsPrediction)
    }
}

/// Start-pose noise and recovery target for the perturbation baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub prob: f64,
    pub lateral: f64,
    pub yaw: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            lateral: 1.0,
            yaw: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Rollout length `T`.
    pub horizon: usize,
    /// Discarded prefix `K`.
    pub discard: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    /// Fraction of the epochs after which the learning rate drops.
    pub lr_drop_fraction: f64,
    pub seed: u64,
    pub weights: CostWeights,
    pub kinematics: Kinematics,
    /// Spacing between rollout start frames.
    pub sample_stride: usize,
    /// 1 runs every rollout on the calling thread; otherwise the rayon pool is used.
    pub workers: usize,
    pub perturb: PerturbConfig,
    pub adam: AdamConfig,
    /// Stop the backward recursion at step `K` instead of the rollout start.
    pub truncate_at_discard: bool,
    /// Upper bound on each sample's gradient norm before batch averaging.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            horizon: 32,
            discard: 20,
            epochs: 61,
            batch_size: 16,
            lr: 1e-4,
            lr_drop_factor: 0.1,
            lr_drop_fraction: 54.0 / 61.0,
            seed: 0,
            weights: CostWeights::default(),
            kinematics: Kinematics::Unconstrained,
            sample_stride: 10,
            workers: 0,
            perturb: PerturbConfig::default(),
            adam: AdamConfig::default(),
            truncate_at_discard: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.horizon == 0 || self.discard >= self.horizon {
            return bad(format!("need 0 <= K < T, got K = {}, T = {}", self.discard, self.horizon));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.sample_stride == 0 {
            return bad("epochs, batch_size and sample_stride must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.perturb.prob) {
            return bad(format!("perturb.prob {} outside [0, 1]", self.perturb.prob));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        Ok(())
    }

    /// First epoch (0-based) that runs at the reduced rate.
    pub fn lr_drop_epoch(&self) -> usize {
        (self.epochs as f64 * self.lr_drop_fraction + 1e-9).floor() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    /// Per-step loss weight `gamma^t [t >= K]`.
    pub fn step_weight(&self, t: usize) -> f64 {
        if t >= self.discard {
            self.weights.gamma.powi(t as i32)
        } else {
            0.0
        }
    }
}

/// Anything that maps a tape state to a `1 x 3` action on the same tape.
pub trait ActionModel<T: Real>: Sync {
    fn params(&self) -> &ParamStore<T>;
    fn act(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        ctx: &SimContext,
        state: &TapeState,
        history: HistoryMode,
    ) -> Result<Var, TrainError>;
}

impl<T: Real> ActionModel<T> for Policy<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn act(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        ctx: &SimContext,
        state: &TapeState,
        history: HistoryMode,
    ) -> Result<Var, TrainError> {
        let input = policy_input(tape, ctx, state)?;
        let f = self.forward(tape, bound, &input, history)?;
        Ok(first_action_var(tape, f.trajectory)?)
    }
}

/// Replays the logged increments; has no parameters.
pub struct ExpertOracle {
    params: ParamStore<f64>,
}

impl Default for ExpertOracle {
    fn default() -> Self {
        Self { params: ParamStore::new() }
    }
}

impl ActionModel<f64> for ExpertOracle {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn act(
        &self,
        tape: &mut Tape<f64>,
        _bound: &BoundParams,
        ctx: &SimContext,
        state: &TapeState,
        _history: HistoryMode,
    ) -> Result<Var, TrainError> {
        let f = &ctx.log.frames;
        let a = f[state.t].sdv_pose.relative(&f[state.t + 1].sdv_pose);
        Ok(tape.constant(Tensor::row(&[a.x, a.y, a.yaw])))
    }
}

/// One rollout start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub scenario: usize,
    pub t0: usize,
}

/// Start frames with full history and `lookahead` future frames.
pub fn enumerate_samples(logs: &[ScenarioLog], lookahead: usize, stride: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for (scenario, log) in logs.iter().enumerate() {
        let first = HISTORY_POINTS - 1;
        let mut t0 = first;
        while t0 + lookahead < log.frames.len() {
            out.push(Sample { scenario, t0 });
            t0 += stride;
        }
    }
    out
}

pub struct RolloutStep<T: Real> {
    pub tape: Tape<T>,
    pub bound: BoundParams,
    pub state_leaf: Var,
    pub next_state: Var,
    pub cost: Var,
    pub state: SimState,
    pub action: Pose,
    pub expert_next: Pose,
    pub cost_value: f64,
    pub l1: f64,
    pub acc: f64,
    pub collision: f64,
    pub in_loss: bool,
}

pub struct Rollout<T: Real> {
    pub t0: usize,
    pub history: HistoryMode,
    pub steps: Vec<RolloutStep<T>>,
    pub final_state: SimState,
}

impl<T: Real> Rollout<T> {
    /// `sum_t gamma^t [t >= K] L_t`.
    pub fn objective(&self, cfg: &TrainConfig) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| cfg.step_weight(t) * s.cost_value)
            .sum()
    }

    pub fn loss_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.in_loss).count()
    }

    fn mean_over_loss_steps(&self, f: impl Fn(&RolloutStep<T>) -> f64) -> f64 {
        let n = self.loss_steps().max(1) as f64;
        self.steps.iter().filter(|s| s.in_loss).map(f).sum::<f64>() / n
    }
}

/// Closed-loop unroll of `cfg.horizon` steps from the expert state at `t0`.
pub fn sample_rollout<T: Real, M: ActionModel<T>>(
    log: &ScenarioLog,
    t0: usize,
    model: &M,
    cfg: &TrainConfig,
    history: HistoryMode,
) -> Result<Rollout<T>, TrainError> {
    let (ctx, mut state) = init_rollout(log, t0, cfg.horizon)?;
    let mut steps = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let state_leaf = tape.leaf(state_tensor(&state));
        let ts = TapeState {
            var: state_leaf,
            t: state.t,
            known: state.known,
        };
        let action = model.act(&mut tape, &bound, &ctx, &ts, history)?;
        let next = transition(&mut tape, &ts, action, cfg.kinematics)?;
        let rows: Vec<Var> = (0..3)
            .map(|k| tape.slice_rows(next.var, k, 1))
            .collect::<Result<_, _>>()?;
        let frame = &log.frames[state.t + 1];
        let input = StepCostInput {
            expert_next: frame.sdv_pose,
            prev: rows[2],
            cur: rows[1],
            next: rows[0],
            sdv_extent: log.sdv_extent,
            agents: &frame.agents,
            dt: log.dt,
        };
        let cost = step_cost(&mut tape, &input, &cfg.weights)?;
        let val = |v: Option<Var>, tape: &Tape<T>| v.map_or(0.0, |v| tape.scalar_value(v).to_f64_lossy());
        let a = tape.value(action).data();
        let action_pose = Pose {
            x: a[0].to_f64_lossy(),
            y: a[1].to_f64_lossy(),
            yaw: a[2].to_f64_lossy(),
        };
        let next_state = state_from_tensor(next.t, next.known, tape.value(next.var));
        steps.push(RolloutStep {
            cost_value: tape.scalar_value(cost.total).to_f64_lossy(),
            l1: tape.scalar_value(cost.l1).to_f64_lossy(),
            acc: val(cost.acc, &tape),
            collision: val(cost.collision, &tape),
            in_loss: t >= cfg.discard,
            state: state.clone(),
            action: action_pose,
            expert_next: frame.sdv_pose,
            state_leaf,
            next_state: next.var,
            cost: cost.total,
            bound,
            tape,
        });
        state = next_state;
    }
    Ok(Rollout {
        t0,
        history,
        steps,
        final_state: state,
    })
}

/// Gradient of the rollout objective via the backward recursion over step tapes.
///
/// Returns the parameter gradient and the state adjoint at the rollout start.
pub fn bptt_gradient<T: Real>(
    rollout: &Rollout<T>,
    params: &ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<(ParamGrads<T>, Vec<T>), TrainError> {
    let gamma = T::lit(cfg.weights.gamma);
    let state_len = HISTORY_POINTS * 3;
    let mut j_theta = ParamGrads::zeros_like(params);
    let mut j_s = vec![T::zero(); state_len];
    for (t, step) in rollout.steps.iter().enumerate().rev() {
        let loss_seed = [T::lit(if t >= cfg.discard { 1.0 } else { 0.0 })];
        let state_seed: Vec<T> = j_s.iter().map(|&v| gamma * v).collect();
        let grads = step
            .tape
            .backward(&[(step.cost, &loss_seed), (step.next_state, &state_seed)])?;
        let step_theta = params.collect_grads(&step.bound, &grads);
        j_theta.scale(gamma);
        j_theta.add_assign(&step_theta);
        j_s = grads.get_or_zeros(step.state_leaf, state_len);
        if cfg.truncate_at_discard && t == cfg.discard {
            // Same objective scale as the full recursion, which decays by gamma per step down to 0.
            j_theta.scale(gamma.powi(t as i32));
            break;
        }
    }
    Ok((j_theta, j_s))
}

/// Gradient with every state input held constant: only the action path of each step.
pub fn ms_gradient<T: Real>(rollout: &Rollout<T>, params: &ParamStore<T>, cfg: &TrainConfig) -> Result<ParamGrads<T>, TrainError> {
    let mut total = ParamGrads::zeros_like(params);
    for (t, step) in rollout.steps.iter().enumerate() {
        let w = cfg.step_weight(t);
        if w == 0.0 {
            continue;
        }
        let grads = step.tape.backward(&[(step.cost, &[T::lit(w)])])?;
        total.add_assign(&params.collect_grads(&step.bound, &grads));
    }
    Ok(total)
}

/// Reference gradient from a single tape spanning the whole rollout.
///
/// With `detach_between` the state passed to each step goes through a detach,
/// which severs every simulator path.
pub fn whole_tape_gradient<T: Real, M: ActionModel<T>>(
    log: &ScenarioLog,
    t0: usize,
    model: &M,
    cfg: &TrainConfig,
    history: HistoryMode,
    detach_between: bool,
) -> Result<(f64, ParamGrads<T>), TrainError> {
    let (ctx, state) = init_rollout(log, t0, cfg.horizon)?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut s = TapeState {
        var: tape.constant(state_tensor(&state)),
        t: state.t,
        known: state.known,
    };
    let mut objective: Option<Var> = None;
    for t in 0..cfg.horizon {
        if detach_between {
            s.var = tape.detach(s.var)?;
        }
        let action = model.act(&mut tape, &bound, &ctx, &s, history)?;
        let next = transition(&mut tape, &s, action, cfg.kinematics)?;
        let rows: Vec<Var> = (0..3)
            .map(|k| tape.slice_rows(next.var, k, 1))
            .collect::<Result<_, _>>()?;
        let frame = &log.frames[s.t + 1];
        let input = StepCostInput {
            expert_next: frame.sdv_pose,
            prev: rows[2],
            cur: rows[1],
            next: rows[0],
            sdv_extent: log.sdv_extent,
            agents: &frame.agents,
            dt: log.dt,
        };
        let cost = step_cost(&mut tape, &input, &cfg.weights)?;
        let w = cfg.step_weight(t);
        if w > 0.0 {
            let term = tape.scale(cost.total, T::lit(w))?;
            objective = Some(match objective {
                Some(o) => tape.add(o, term)?,
                None => term,
            });
        }
        s = next;
    }
    let obj = objective.ok_or_else(|| TrainError::Config("no loss steps".into()))?;
    let grads = tape.backward_scalar(obj)?;
    Ok((
        tape.scalar_value(obj).to_f64_lossy(),
        model.params().collect_grads(&bound, &grads),
    ))
}

/// `smoothstep(u) = 3u^2 - 2u^3` on `[0, 1]`.
pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Start offset of a perturbed sample in the expert's frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub lateral: f64,
    pub yaw: f64,
}

/// Recovery poses `r_0 .. r_n`: the lateral and heading offsets decay to zero
/// along the expert path, so `r_n` is the expert pose.
pub fn recovery_poses(expert: &[Pose], p: Perturbation) -> Vec<Pose> {
    let n = expert.len() - 1;
    expert
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let keep = 1.0 - smoothstep(k as f64 / n.max(1) as f64);
            e.compose(&Pose::new(0.0, p.lateral * keep, p.yaw * keep))
        })
        .collect()
}

/// Open-loop training target: increments between consecutive poses.
pub fn increments(poses: &[Pose]) -> Vec<Pose> {
    poses.windows(2).map(|w| w[0].relative(&w[1])).collect()
}

/// State and target of one open-loop sample.
pub struct OpenLoopSample {
    pub state: SimState,
    pub target: Vec<Pose>,
}

pub fn open_loop_sample(log: &ScenarioLog, t0: usize, steps: usize, perturbation: Option<Perturbation>) -> Result<OpenLoopSample, TrainError> {
    if t0 + steps >= log.frames.len() {
        return Err(SimError::Horizon {
            requested: t0 + steps,
            frames: log.frames.len(),
        }
        .into());
    }
    let expert: Vec<Pose> = (t0..=t0 + steps).map(|t| log.frames[t].sdv_pose).collect();
    let mut state = SimState::expert(log, t0);
    let poses = match perturbation {
        Some(p) => recovery_poses(&expert, p),
        None => expert,
    };
    state.poses[0] = poses[0];
    Ok(OpenLoopSample {
        state,
        target: increments(&poses),
    })
}

/// Loss `mean_k |pi(s)_k - target_k|_1` and its parameter gradient.
pub fn open_loop_gradient<T: Real>(
    log: &ScenarioLog,
    t0: usize,
    policy: &Policy<T>,
    sample: &OpenLoopSample,
    history: HistoryMode,
    detach_state: bool,
) -> Result<(f64, ParamGrads<T>, Vec<T>), TrainError> {
    let steps = policy.config.output_steps;
    let (ctx, _) = init_rollout(log, t0, steps)?;
    let mut tape = Tape::new();
    let bound = policy.params.bind(&mut tape);
    let leaf = tape.leaf(state_tensor(&sample.state));
    let var = if detach_state { tape.detach(leaf)? } else { leaf };
    let ts = TapeState {
        var,
        t: sample.state.t,
        known: sample.state.known,
    };
    let input = policy_input(&mut tape, &ctx, &ts)?;
    let f = policy.forward(&mut tape, &bound, &input, history)?;
    let target: Vec<T> = sample
        .target
        .iter()
        .flat_map(|p| [p.x, p.y, p.yaw])
        .map(T::lit)
        .collect();
    let target = tape.constant(Tensor::from_vec(steps, 3, target)?);
    let l1 = tape.l1_pose(f.trajectory, target)?;
    let loss = tape.scale(l1, T::one() / T::lit(steps as f64))?;
    let grads = tape.backward_scalar(loss)?;
    Ok((
        tape.scalar_value(loss).to_f64_lossy(),
        policy.params.collect_grads(&bound, &grads),
        grads.get_or_zeros(leaf, HISTORY_POINTS * 3),
    ))
}

/// Per-sample loss terms averaged over the loss steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub objective: f64,
    pub l1: f64,
    pub acc: f64,
    pub collision: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.objective += o.objective;
        self.l1 += o.l1;
        self.acc += o.acc;
        self.collision += o.collision;
    }

    fn scale(&mut self, c: f64) {
        self.objective *= c;
        self.l1 *= c;
        self.acc *= c;
        self.collision *= c;
    }

    fn is_finite(&self) -> bool {
        self.objective.is_finite() && self.l1.is_finite() && self.acc.is_finite() && self.collision.is_finite()
    }
}

#[derive(Serialize)]
struct RolloutDump<'a> {
    epoch: usize,
    sample: Sample,
    method: Method,
    history_dropped: bool,
    poses: Vec<Pose>,
    actions: Vec<Pose>,
    costs: Vec<f64>,
    config: &'a TrainConfig,
}

struct SampleResult<T> {
    sample: Sample,
    terms: LossTerms,
    grads: ParamGrads<T>,
    dump: Option<(Vec<Pose>, Vec<Pose>, Vec<f64>, bool)>,
}

fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

fn run_sample<T: Real>(
    logs: &[ScenarioLog],
    policy: &Policy<T>,
    cfg: &TrainConfig,
    sample: Sample,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult<T>, TrainError> {
    let log = &logs[sample.scenario];
    let history = policy.sample_history_mode(rng);
    match cfg.method {
        Method::Ours | Method::MsPrediction => {
            let rollout = sample_rollout(log, sample.t0, policy, cfg, history)?;
            let grads = if cfg.method == Method::Ours {
                bptt_gradient(&rollout, &policy.params, cfg)?.0
            } else {
                ms_gradient(&rollout, &policy.params, cfg)?
            };
            let terms = LossTerms {
                objective: rollout.objective(cfg),
                l1: rollout.mean_over_loss_steps(|s| s.l1),
                acc: rollout.mean_over_loss_steps(|s| s.acc),
                collision: rollout.mean_over_loss_steps(|s| s.collision),
            };
            let dump = (!terms.is_finite() || !grads.is_finite()).then(|| {
                let mut poses: Vec<Pose> = rollout.steps.iter().map(|s| s.state.sdv_pose()).collect();
                poses.push(rollout.final_state.sdv_pose());
                (
                    poses,
                    rollout.steps.iter().map(|s| s.action).collect(),
                    rollout.steps.iter().map(|s| s.cost_value).collect(),
                    history == HistoryMode::Drop,
                )
            });
            Ok(SampleResult {
                sample,
                terms,
                grads,
                dump,
            })
        }
        Method::Bc | Method::BcPerturb => {
            let steps = policy.config.output_steps;
            let perturbation = if cfg.method == Method::BcPerturb && rng.gen_bool(cfg.perturb.prob) {
                Some(Perturbation {
                    lateral: rng.gen_range(-cfg.perturb.lateral..=cfg.perturb.lateral),
                    yaw: rng.gen_range(-cfg.perturb.yaw..=cfg.perturb.yaw),
                })
            } else {
                None
            };
            let s = open_loop_sample(log, sample.t0, steps, perturbation)?;
            let (loss, grads, _) = open_loop_gradient(log, sample.t0, policy, &s, history, false)?;
            let terms = LossTerms {
                objective: loss,
                l1: loss,
                ..LossTerms::default()
            };
            let dump = (!loss.is_finite() || !grads.is_finite())
                .then(|| (vec![s.state.sdv_pose()], s.target.clone(), vec![loss], history == HistoryMode::Drop));
            Ok(SampleResult {
                sample,
                terms,
                grads,
                dump,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub policy: Checkpoint,
    pub curve: Vec<EpochStats>,
}

impl TrainCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let ck: Self = serde_path_to_error::deserialize(de).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.version != TRAIN_CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}

/// Where training writes its artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub resume: Option<TrainCheckpoint>,
    /// Where a non-finite loss dump is written when there is no checkpoint dir.
    pub dump_dir: Option<PathBuf>,
}

pub struct TrainOutcome<T: Real> {
    pub policy: Policy<T>,
    pub curve: Vec<EpochStats>,
}

pub const LOG_HEADER: &str = "epoch,step,lr,objective,l1,acc,collision";

/// Trains `policy` on `logs` with `cfg.method`.
pub fn train<T: Real>(logs: &[ScenarioLog], mut policy: Policy<T>, cfg: &TrainConfig, io: &TrainIo) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if cfg.method == Method::Bc && policy.config.use_sdv_history {
        return Err(TrainError::Config("behavioral cloning excludes the SDV history; set use_sdv_history = false".into()));
    }
    let lookahead = if cfg.method.closed_loop() {
        cfg.horizon
    } else {
        policy.config.output_steps
    };
    let samples = enumerate_samples(logs, lookahead, cfg.sample_stride);
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut curve = Vec::new();
    let mut start = 0;
    if let Some(ck) = &io.resume {
        policy = Policy::from_checkpoint(&ck.policy)?;
        curve = ck.curve.clone();
        start = ck.epoch;
    }
    if let Some(dir) = &io.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = match &io.log_path {
        Some(p) => {
            let fresh = start == 0 || !p.exists();
            let mut f = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    for epoch in start..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = samples.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(u64::MAX - epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_terms = LossTerms::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let base = b * cfg.batch_size;
            let job = |(i, s): (usize, &Sample)| {
                let mut rng = sample_rng(cfg.seed, epoch, base + i);
                run_sample(logs, &policy, cfg, *s, &mut rng)
            };
            let results: Vec<Result<SampleResult<T>, TrainError>> = if cfg.workers == 1 {
                batch.iter().enumerate().map(job).collect()
            } else {
                batch.par_iter().enumerate().map(job).collect()
            };
            let mut grads = ParamGrads::zeros_like(&policy.params);
            let mut terms = LossTerms::default();
            for r in results {
                let r = r?;
                if let Some((poses, actions, costs, dropped)) = &r.dump {
                    let dump = RolloutDump {
                        epoch,
                        sample: r.sample,
                        method: cfg.method,
                        history_dropped: *dropped,
                        poses: poses.clone(),
                        actions: actions.clone(),
                        costs: costs.clone(),
                        config: cfg,
                    };
                    let dir = io
                        .checkpoint_dir
                        .clone()
                        .or_else(|| io.dump_dir.clone())
                        .unwrap_or_else(std::env::temp_dir);
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("nonfinite_epoch{epoch}_s{}_t{}.json", r.sample.scenario, r.sample.t0));
                    fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default())?;
                    return Err(TrainError::NonFinite {
                        epoch,
                        scenario: r.sample.scenario,
                        t0: r.sample.t0,
                        dump: path.display().to_string(),
                    });
                }
                let mut g = r.grads;
                if let Some(c) = cfg.grad_clip {
                    let norm = g.norm().to_f64_lossy();
                    if norm > c {
                        g.scale(T::lit(c / norm));
                    }
                }
                grads.add_assign(&g);
                terms.add(&r.terms);
            }
            let n = batch.len() as f64;
            grads.scale(T::lit(1.0 / n));
            policy.params.adam_step(&grads, lr, &cfg.adam);
            epoch_terms.add(&terms);
            terms.scale(1.0 / n);
            if let Some(f) = log_file.as_mut() {
                writeln!(
                    f,
                    "{epoch},{},{lr:e},{:.6},{:.6},{:.6},{:.6}",
                    policy.params.steps_taken(),
                    terms.objective,
                    terms.l1,
                    terms.acc,
                    terms.collision
                )?;
            }
        }
        epoch_terms.scale(1.0 / order.len() as f64);
        curve.push(EpochStats {
            epoch,
            lr,
            samples: order.len(),
            terms: epoch_terms,
        });
        if let Some(dir) = &io.checkpoint_dir {
            let ck = TrainCheckpoint {
                version: TRAIN_CHECKPOINT_VERSION,
                epoch: epoch + 1,
                config: cfg.clone(),
                policy: policy.to_checkpoint(),
                curve: curve.clone(),
            };
            ck.save(&dir.join(format!("epoch_{:03}.json", epoch + 1)))?;
            ck.save(&dir.join("latest.json"))?;
        }
    }
    Ok(TrainOutcome { policy, curve })
}
