mod common;

use common::{busy_log, rel_err};
use diffdrive::grad::Tape;
use diffdrive::policy::{HistoryMode, Policy, PolicyConfig};
use diffdrive::scene::{vectorize, ElementKind, Observation};
use diffdrive::sim::PolicyInput;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(history: bool) -> PolicyConfig {
    PolicyConfig {
        embed_dim: 16,
        output_steps: 12,
        use_sdv_history: history,
        history_dropout_prob: 0.0,
        ..PolicyConfig::default()
    }
}

fn run(p: &Policy<f64>, obs: &Observation, mode: HistoryMode) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = p.params.bind(&mut tape);
    let input = PolicyInput::from_observation(&mut tape, obs).unwrap();
    let f = p.forward(&mut tape, &b, &input, mode).unwrap();
    assert_eq!(tape.value(f.trajectory).shape(), (12, 3));
    tape.value(f.trajectory).data().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn agent_range(obs: &Observation) -> std::ops::Range<usize> {
    let start = obs.slots.iter().position(|s| s.kind == ElementKind::Vehicle).unwrap();
    start..start + 30
}

#[test]
fn agent_slot_permutation_is_invariant() {
    let log = busy_log(20);
    let obs = vectorize(&log, 6, &log.frames[6].sdv_pose).unwrap();
    let p = Policy::new(cfg(true), 1).unwrap();
    let base = run(&p, &obs, HistoryMode::Keep);
    let mut perm = obs.clone();
    let r = agent_range(&obs);
    perm.slots[r.clone()].reverse();
    perm.slots.swap(r.start + 3, r.start + 29);
    assert!(max_diff(&base, &run(&p, &perm, HistoryMode::Keep)) < 1e-9);
    // Lanes too.
    let mut lanes = obs.clone();
    let first_lane = lanes.slots.iter().position(|s| s.kind == ElementKind::LaneMid).unwrap();
    lanes.slots[first_lane..first_lane + 30].rotate_left(7);
    assert!(max_diff(&base, &run(&p, &lanes, HistoryMode::Keep)) < 1e-9);
}

#[test]
fn masked_content_is_ignored() {
    let log = busy_log(20);
    let obs = vectorize(&log, 6, &log.frames[6].sdv_pose).unwrap();
    let p = Policy::new(cfg(true), 2).unwrap();
    let base = run(&p, &obs, HistoryMode::Keep);
    let mut junk = obs.clone();
    for s in &mut junk.slots {
        for (m, f) in s.mask.iter().zip(s.features.iter_mut()) {
            if !*m {
                f.iter_mut().for_each(|v| *v = 1e6);
            }
        }
    }
    assert_eq!(base, run(&p, &junk, HistoryMode::Keep));
}

#[test]
fn history_excluded_policy_ignores_history() {
    let log = busy_log(20);
    let mut obs = vectorize(&log, 6, &log.frames[6].sdv_pose).unwrap();
    let p = Policy::new(cfg(false), 3).unwrap();
    let mode = p.eval_history_mode();
    assert_eq!(mode, HistoryMode::Drop);
    let base = run(&p, &obs, mode);
    for k in 1..4 {
        obs.slots[0].features[k][0] += 3.0;
        obs.slots[0].features[k][1] -= 1.0;
    }
    assert_eq!(base, run(&p, &obs, mode));
    // A history-conditioned policy does react.
    let q = Policy::new(cfg(true), 3).unwrap();
    let fresh = vectorize(&log, 6, &log.frames[6].sdv_pose).unwrap();
    assert!(max_diff(&run(&q, &fresh, HistoryMode::Keep), &run(&q, &obs, HistoryMode::Keep)) > 1e-6);
}

#[test]
fn history_dropout_rate_and_eval() {
    let p = Policy::<f64>::new(
        PolicyConfig {
            history_dropout_prob: 0.3,
            ..cfg(true)
        },
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let drops = (0..n).filter(|_| p.sample_history_mode(&mut rng) == HistoryMode::Drop).count();
    let rate = drops as f64 / n as f64;
    assert!((rate - 0.3).abs() < 0.015, "{rate}");
    assert_eq!(p.eval_history_mode(), HistoryMode::Keep);
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let log = busy_log(20);
    let obs = vectorize(&log, 6, &log.frames[6].sdv_pose).unwrap();
    let mut p = Policy::<f64>::new(PolicyConfig { embed_dim: 6, ..cfg(true) }, 5).unwrap();
    let weights: Vec<f64> = (0..36).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let scalar = |p: &Policy<f64>| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let b = p.params.bind(&mut tape);
        let input = PolicyInput::from_observation(&mut tape, &obs).unwrap();
        let f = p.forward(&mut tape, &b, &input, HistoryMode::Keep).unwrap();
        let w = tape.constant(diffdrive::grad::Tensor::from_vec(12, 3, weights.clone()).unwrap());
        let m = tape.mul(f.trajectory, w).unwrap();
        let y = tape.sum(m).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        (tape.scalar_value(y), p.params.collect_grads(&b, &g).flat())
    };
    let (_, g) = scalar(&p);
    let n = g.len();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(7) {
        let mut d = vec![0.0; n];
        d[i] = h;
        p.params.perturb_flat(&d);
        let up = scalar(&p).0;
        d[i] = -2.0 * h;
        p.params.perturb_flat(&d);
        let down = scalar(&p).0;
        d[i] = h;
        p.params.perturb_flat(&d);
        worst = worst.max(rel_err((up - down) / (2.0 * h), g[i], 1e-4));
    }
    assert!(worst < 1e-5, "{worst}");
}
