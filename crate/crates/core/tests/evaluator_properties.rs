mod common;

use common::busy_log;
use diffdrive::evaluator::{
    collision_check, evaluate, evaluate_scenario, lateral_deviation, report_from, EvalConfig, ExpertPlanner,
    FailureCounts, LateralBiasPlanner, MetricsReport, NetworkPlanner, METERS_PER_MILE,
};
use diffdrive::policy::{Policy, PolicyConfig};
use diffdrive::synth::{generate, GenConfig};

fn corpus(n: usize) -> Vec<diffdrive::scene::ScenarioLog> {
    generate(&GenConfig {
        seed: 77,
        n_scenarios: n,
        ..GenConfig::default()
    })
    .unwrap()
}

#[test]
fn expert_oracle_report_is_all_zero() {
    let logs = corpus(8);
    let r = evaluate(&ExpertPlanner, "expert", &logs, &EvalConfig::default()).unwrap();
    assert_eq!(r.counts, FailureCounts::default());
    assert_eq!(r.i1k, 0.0);
    assert!(r.l2 < 1e-9);
    assert!(r.miles_driven > 0.0);
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert!(r.to_table().contains("I1K"));
}

#[test]
fn lateral_bias_triggers_off_road_and_threshold_is_monotone() {
    let logs = corpus(4);
    let bias = LateralBiasPlanner { lateral: 3.0 };
    let at2 = evaluate(&bias, "bias", &logs, &EvalConfig::default()).unwrap();
    let at4 = evaluate(
        &bias,
        "bias",
        &logs,
        &EvalConfig {
            offroad_threshold: 4.0,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    assert!(at2.counts.off_road > 0);
    assert!(at4.counts.off_road <= at2.counts.off_road);
    assert_eq!(at2.i1k, (at2.counts.collisions() + at2.counts.off_road) as f64 * 1000.0 / at2.miles_driven);

    let policy = Policy::<f64>::new(PolicyConfig { embed_dim: 8, ..PolicyConfig::default() }, 3).unwrap();
    let net = NetworkPlanner { policy };
    let cfg = EvalConfig {
        max_frames: Some(60),
        ..EvalConfig::default()
    };
    let mut last = u64::MAX;
    for th in [1.0, 2.0, 4.0, 8.0] {
        let r = evaluate(&net, "net", &logs, &EvalConfig { offroad_threshold: th, ..cfg.clone() }).unwrap();
        assert!(r.counts.off_road <= last);
        last = r.counts.off_road;
    }
}

#[test]
fn resets_restore_the_expert_state() {
    for log in corpus(3) {
        let bias = LateralBiasPlanner { lateral: -2.5 };
        let r = evaluate_scenario(&bias, &log, &EvalConfig::default()).unwrap();
        assert!(!r.resets.is_empty());
        let reference: Vec<[f64; 2]> = log.frames.iter().map(|f| [f.sdv_pose.x, f.sdv_pose.y]).collect();
        for &t in &r.resets {
            let p = log.frames[t].sdv_pose;
            assert_eq!(lateral_deviation(&p, &reference).unwrap(), 0.0);
            assert!(collision_check(&p, log.sdv_extent, &log.frames[t].agents).is_none());
        }
    }
    // A log whose own expert collides keeps recording resets instead of hiding them.
    let log = busy_log(60);
    let r = evaluate_scenario(&ExpertPlanner, &log, &EvalConfig::default()).unwrap();
    assert!(r.counts.collisions() > 0);
    assert!(!r.resets.is_empty() && r.resets.len() as u64 <= r.counts.interventions());
}

#[test]
fn normalization_in_report() {
    let counts = FailureCounts {
        front: 1,
        off_road: 1,
        ..FailureCounts::default()
    };
    let r = report_from("x", 1, 10, counts, 2.0, 0.0, 2.0).unwrap();
    assert_eq!(r.i1k, 1000.0);
    assert_eq!(r.interventions, 2);
    assert!(report_from("x", 1, 10, counts, 0.0, 0.0, 2.0).is_err());
    assert!((METERS_PER_MILE - 1609.344).abs() < 1e-12);
}
