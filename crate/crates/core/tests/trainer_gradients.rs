mod common;

use common::{busy_log, rel_err};
use diffdrive::grad::{BoundParams, ParamStore, Tape, Tensor, Var};
use diffdrive::losses::CostWeights;
use diffdrive::policy::{HistoryMode, Policy, PolicyConfig};
use diffdrive::sim::{SimContext, TapeState};
use diffdrive::trainer::{
    bptt_gradient, ms_gradient, sample_rollout, whole_tape_gradient, ActionModel, ExpertOracle, TrainConfig, TrainError,
};

fn small_policy(seed: u64) -> Policy<f64> {
    Policy::new(
        PolicyConfig {
            embed_dim: 8,
            output_steps: 4,
            history_dropout_prob: 0.0,
            ..PolicyConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn cfg(horizon: usize, discard: usize) -> TrainConfig {
    TrainConfig {
        horizon,
        discard,
        weights: CostWeights {
            alpha: 0.05,
            beta: 1.0,
            gamma: 0.8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn recursion_matches_whole_tape() {
    let log = busy_log(30);
    for (seed, h, k) in [(1, 6, 2), (2, 5, 0), (3, 4, 3)] {
        let p = small_policy(seed);
        let c = cfg(h, k);
        for history in [HistoryMode::Keep, HistoryMode::Drop] {
            let r = sample_rollout(&log, 4, &p, &c, history).unwrap();
            let (g, _) = bptt_gradient(&r, &p.params, &c).unwrap();
            let (obj, oracle) = whole_tape_gradient(&log, 4, &p, &c, history, false).unwrap();
            assert!((obj - r.objective(&c)).abs() < 1e-10);
            let diff = g.max_abs_diff(&oracle);
            assert!(diff <= 1e-10, "seed {seed}: {diff}");
            assert!(g.flat().iter().any(|v| v.abs() > 1e-6));
        }
    }
}

#[test]
fn recursion_matches_finite_differences() {
    let log = busy_log(30);
    let mut p = small_policy(7);
    let c = cfg(5, 2);
    let r = sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap();
    let g = bptt_gradient(&r, &p.params, &c).unwrap().0.flat();
    let n = g.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
    let h = 1e-6;
    let mut checked = 0;
    for &i in idx.iter().take(12) {
        let mut delta = vec![0.0; n];
        delta[i] = h;
        p.params.perturb_flat(&delta);
        let up = sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap().objective(&c);
        delta[i] = -2.0 * h;
        p.params.perturb_flat(&delta);
        let down = sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap().objective(&c);
        delta[i] = h;
        p.params.perturb_flat(&delta);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(fd, g[i], 1e-4) < 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        checked += 1;
    }
    assert_eq!(checked, 12);
}

#[test]
fn ms_matches_detached_tape_and_differs_from_bptt() {
    let log = busy_log(30);
    let p = small_policy(5);
    let c = cfg(6, 2);
    let r = sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap();
    let ms = ms_gradient(&r, &p.params, &c).unwrap();
    let (_, oracle) = whole_tape_gradient(&log, 4, &p, &c, HistoryMode::Keep, true).unwrap();
    assert!(ms.max_abs_diff(&oracle) <= 1e-10);
    let (ours, _) = bptt_gradient(&r, &p.params, &c).unwrap();
    assert!(ours.max_abs_diff(&ms) > 1e-4);
}

#[test]
fn single_step_methods_coincide() {
    let log = busy_log(30);
    let p = small_policy(9);
    // T = 1: no cross-step path at all.
    let c = cfg(1, 0);
    let r = sample_rollout(&log, 6, &p, &c, HistoryMode::Keep).unwrap();
    let a = bptt_gradient(&r, &p.params, &c).unwrap().0;
    let b = ms_gradient(&r, &p.params, &c).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-14);
    // T - K = 1 with the recursion stopped at K.
    let c = TrainConfig {
        truncate_at_discard: true,
        ..cfg(5, 4)
    };
    let r = sample_rollout(&log, 6, &p, &c, HistoryMode::Keep).unwrap();
    let a = bptt_gradient(&r, &p.params, &c).unwrap().0;
    let b = ms_gradient(&r, &p.params, &c).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-14);
}

#[test]
fn discount_scales_single_step_contribution() {
    let log = busy_log(30);
    let p = small_policy(3);
    let t = 3;
    let grad_at = |gamma: f64| {
        let mut c = cfg(t + 1, t);
        c.weights.gamma = gamma;
        let r = sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap();
        bptt_gradient(&r, &p.params, &c).unwrap().0.flat()
    };
    let (a, b) = (grad_at(0.8), grad_at(0.5));
    let ratio = (0.8f64 / 0.5).powi(t as i32);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - ratio * y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn expert_poses_before_k_do_not_matter() {
    let log = busy_log(30);
    let p = small_policy(4);
    let c = cfg(6, 3);
    let base = bptt_gradient(&sample_rollout(&log, 4, &p, &c, HistoryMode::Keep).unwrap(), &p.params, &c)
        .unwrap()
        .0;
    let mut moved = log.clone();
    for t in 5..=7 {
        moved.frames[t].sdv_pose.x += 3.0;
        moved.frames[t].sdv_pose.yaw -= 0.4;
    }
    let other = bptt_gradient(&sample_rollout(&moved, 4, &p, &c, HistoryMode::Keep).unwrap(), &p.params, &c)
        .unwrap()
        .0;
    assert_eq!(base, other);
}

#[test]
fn expert_oracle_rollout_costs_nothing() {
    let log = busy_log(40);
    let mut c = cfg(32, 20);
    c.weights = CostWeights::default();
    let r = sample_rollout(&log, 3, &ExpertOracle::default(), &c, HistoryMode::Keep).unwrap();
    assert_eq!(r.loss_steps(), 12);
    assert!(r.objective(&c) < 1e-9);
    let c = cfg(32, 31);
    let r = sample_rollout(&log, 3, &ExpertOracle::default(), &c, HistoryMode::Keep).unwrap();
    assert_eq!(r.loss_steps(), 1);
    assert!(matches!(
        sample_rollout(&log, 10, &ExpertOracle::default(), &c, HistoryMode::Keep),
        Err(TrainError::Sim(_))
    ));
}

/// `a_t = (1, theta * y_t, 0)`: with zero yaw the SDV's `y` obeys
/// `y_{t+1} = (1 + theta) y_t`.
struct LinearLateral {
    params: ParamStore<f64>,
}

impl ActionModel<f64> for LinearLateral {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn act(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        _ctx: &SimContext,
        state: &TapeState,
        _history: HistoryMode,
    ) -> Result<Var, TrainError> {
        let row = tape.slice_rows(state.var, 0, 1)?;
        let y = tape.slice_cols(row, 1, 1)?;
        let dy = tape.mul(y, bound.var(0))?;
        let one = tape.constant(Tensor::row(&[1.0]));
        let zero = tape.constant(Tensor::row(&[0.0]));
        Ok(tape.concat_cols(&[one, dy, zero])?)
    }
}

#[test]
fn two_step_linear_policy_matches_hand_expansion() {
    let mut log = busy_log(12);
    let y0 = 0.5;
    for (t, f) in log.frames.iter_mut().enumerate() {
        f.sdv_pose = diffdrive::Pose::new(t as f64, y0 + 0.01 * t as f64, 0.0);
        f.agents.clear();
    }
    let theta = 0.3;
    let mut params = ParamStore::new();
    params.insert("theta", 1, 1, vec![theta]).unwrap();
    let model = LinearLateral { params };
    let gamma = 0.8;
    let c = TrainConfig {
        horizon: 2,
        discard: 0,
        weights: CostWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma,
        },
        ..TrainConfig::default()
    };
    let t0 = 4;
    let ys = y0 + 0.01 * t0 as f64;
    let r = sample_rollout(&log, t0, &model, &c, HistoryMode::Keep).unwrap();
    let g = bptt_gradient(&r, &model.params, &c).unwrap().0.flat()[0];
    let y1 = ys * (1.0 + theta);
    let y2 = ys * (1.0 + theta) * (1.0 + theta);
    let e1 = log.frames[t0 + 1].sdv_pose.y;
    let e2 = log.frames[t0 + 2].sdv_pose.y;
    let hand = (y1 - e1).signum() * ys + gamma * (y2 - e2).signum() * 2.0 * ys * (1.0 + theta);
    assert!((g - hand).abs() < 1e-12, "{g} vs {hand}");
}
