mod common;

use common::busy_log;
use diffdrive::losses::CostWeights;
use diffdrive::policy::{HistoryMode, Policy, PolicyConfig};
use diffdrive::se2::Pose;
use diffdrive::trainer::{
    open_loop_gradient, open_loop_sample, recovery_poses, train, Method, Perturbation, TrainCheckpoint, TrainConfig,
    TrainError, TrainIo,
};

fn policy(history: bool, steps: usize) -> Policy<f64> {
    Policy::new(
        PolicyConfig {
            embed_dim: 8,
            output_steps: steps,
            use_sdv_history: history,
            history_dropout_prob: 0.0,
            ..PolicyConfig::default()
        },
        2,
    )
    .unwrap()
}

#[test]
fn bc_gradient_has_no_simulator_path() {
    let log = busy_log(30);
    let p = policy(false, 6);
    let s = open_loop_sample(&log, 5, 6, None).unwrap();
    let (l, g, gs) = open_loop_gradient(&log, 5, &p, &s, HistoryMode::Drop, false).unwrap();
    let (l2, g2, gs2) = open_loop_gradient(&log, 5, &p, &s, HistoryMode::Drop, true).unwrap();
    assert_eq!(l, l2);
    assert!(g.max_abs_diff(&g2) <= 1e-12);
    assert!(gs2.iter().all(|&v| v == 0.0));
    // The state does influence the prediction, so only the detachment removes it.
    assert!(gs.iter().any(|&v| v != 0.0));
}

#[test]
fn bc_ignores_history_perturbation() {
    let log = busy_log(30);
    let p = policy(false, 6);
    let mut s = open_loop_sample(&log, 5, 6, None).unwrap();
    let (l, g, _) = open_loop_gradient(&log, 5, &p, &s, HistoryMode::Drop, false).unwrap();
    for k in 1..4 {
        s.state.poses[k].x -= 0.7;
        s.state.poses[k].y += 0.3 * k as f64;
    }
    let (l2, g2, _) = open_loop_gradient(&log, 5, &p, &s, HistoryMode::Drop, false).unwrap();
    assert_eq!(l, l2);
    assert_eq!(g, g2);
}

#[test]
fn recovery_target_construction() {
    let log = busy_log(30);
    let base = open_loop_sample(&log, 5, 8, None).unwrap();
    let zero = open_loop_sample(&log, 5, 8, Some(Perturbation { lateral: 0.0, yaw: 0.0 })).unwrap();
    for (a, b) in base.target.iter().zip(&zero.target) {
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12 && (a.yaw - b.yaw).abs() < 1e-12);
    }
    let expert: Vec<Pose> = (5..=13).map(|t| log.frames[t].sdv_pose).collect();
    for p in [Perturbation { lateral: 1.0, yaw: 0.2 }, Perturbation { lateral: -0.6, yaw: -0.15 }] {
        let r = recovery_poses(&expert, p);
        let end = r.last().unwrap();
        let e = expert.last().unwrap();
        assert!((end.x - e.x).abs() < 1e-12 && (end.y - e.y).abs() < 1e-12 && (end.yaw - e.yaw).abs() < 1e-12);
        for (k, (rk, ek)) in r.iter().zip(&expert).enumerate() {
            let lat = ek.relative(rk);
            assert!(lat.x.abs() < 1e-12 && lat.y.abs() <= p.lateral.abs() + 1e-12, "step {k}");
        }
        // Composing the target increments from the perturbed start reaches the expert pose.
        let s = open_loop_sample(&log, 5, 8, Some(p)).unwrap();
        let reached = s.target.iter().fold(s.state.sdv_pose(), |acc, a| acc.compose(a));
        assert!((reached.x - e.x).abs() < 1e-9 && (reached.y - e.y).abs() < 1e-9);
    }
}

fn train_cfg(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        horizon: 6,
        discard: 2,
        epochs,
        batch_size: 2,
        lr: 3e-3,
        seed: 11,
        sample_stride: 4,
        weights: CostWeights {
            alpha: 0.01,
            beta: 0.5,
            gamma: 0.8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_drops_at_fraction() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_drop_epoch(), 54);
    assert_eq!(c.lr_at(53), 1e-4);
    assert!((c.lr_at(54) - 1e-5).abs() < 1e-18);
    let c = TrainConfig { epochs: 10, ..c };
    assert_eq!(c.lr_drop_epoch(), 8);
    assert!(TrainConfig { discard: 32, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn bc_memorizes_one_sample() {
    let log = busy_log(22);
    let cfg = TrainConfig {
        sample_stride: 100,
        batch_size: 1,
        lr: 1e-2,
        ..train_cfg(Method::Bc, 300)
    };
    let out = train(std::slice::from_ref(&log), policy(false, 6), &cfg, &TrainIo::default()).unwrap();
    let first = out.curve[0].terms.l1;
    let last = out.curve.last().unwrap().terms.l1;
    assert!(last < 0.02 * first && last < 5e-3, "{first} -> {last}");
    assert!(matches!(
        train(&[log], policy(true, 6), &cfg, &TrainIo::default()),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn closed_loop_loss_decreases_on_one_scenario() {
    let log = busy_log(40);
    let cfg = train_cfg(Method::Ours, 50);
    let out = train(&[log], policy(true, 4), &cfg, &TrainIo::default()).unwrap();
    let head: f64 = out.curve[..5].iter().map(|e| e.terms.objective).sum();
    let tail: f64 = out.curve[45..].iter().map(|e| e.terms.objective).sum();
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let logs = vec![busy_log(30), busy_log(26)];
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Ours, Method::MsPrediction, Method::BcPerturb] {
        let mut cfg = train_cfg(method, 4);
        cfg.workers = 1;
        let io = TrainIo {
            checkpoint_dir: Some(dir.path().join(format!("{method:?}"))),
            log_path: Some(dir.path().join(format!("{method:?}.csv"))),
            ..TrainIo::default()
        };
        let a = train(&logs, policy(true, 4), &cfg, &io).unwrap();
        let b = train(&logs, policy(true, 4), &cfg, &TrainIo::default()).unwrap();
        assert_eq!(a.policy.params, b.policy.params);
        cfg.workers = 0;
        let c = train(&logs, policy(true, 4), &cfg, &TrainIo::default()).unwrap();
        assert_eq!(a.policy.params, c.policy.params);

        let ck_dir = io.checkpoint_dir.clone().unwrap();
        let ck2 = TrainCheckpoint::load(&ck_dir.join("epoch_002.json")).unwrap();
        assert_eq!(ck2.epoch, 2);
        let resumed = train(
            &logs,
            policy(true, 4),
            &cfg,
            &TrainIo {
                resume: Some(ck2),
                ..TrainIo::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.policy.params, a.policy.params);
        assert_eq!(resumed.curve, a.curve);
        let csv = std::fs::read_to_string(io.log_path.unwrap()).unwrap();
        assert!(csv.starts_with("epoch,step,lr,"));
        assert!(csv.lines().count() > 4);
    }
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut log = busy_log(30);
    for f in &mut log.frames[10..] {
        f.sdv_pose.x = f64::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let io = TrainIo {
        dump_dir: Some(dir.path().to_path_buf()),
        ..TrainIo::default()
    };
    match train(&[log], policy(true, 4), &train_cfg(Method::Ours, 2), &io) {
        Err(TrainError::NonFinite { dump, .. }) => {
            let text = std::fs::read_to_string(dump).unwrap();
            assert!(text.contains("\"actions\""));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected abort"),
    }
}
