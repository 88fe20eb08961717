use diffdrive::evaluator::{collision_check, comfort_check, ComfortThresholds};
use diffdrive::scene::{polyline_distance, query_fov, AgentKind, LightState, FOV_RADIUS};
use diffdrive::synth::{generate, generate_one, GenConfig, LayoutWeights};

fn cfg(seed: u64, n: usize, layouts: LayoutWeights) -> GenConfig {
    GenConfig {
        seed,
        n_scenarios: n,
        frames_per_scenario: 250,
        layouts,
        ..GenConfig::default()
    }
}

fn only_intersections() -> LayoutWeights {
    LayoutWeights {
        straight: 0.0,
        curve: 0.0,
        intersection: 1.0,
    }
}

#[test]
fn expert_tracks_lane_centerline() {
    for log in generate(&cfg(11, 24, LayoutWeights::default())).unwrap() {
        // The expert drives the first lane chain: distance to the nearest mid polyline.
        let mids: Vec<_> = log.map.lanes.iter().map(|l| l.mid.clone()).collect();
        for f in &log.frames {
            let p = [f.sdv_pose.x, f.sdv_pose.y];
            let d = mids.iter().map(|m| polyline_distance(p, m)).fold(f64::INFINITY, f64::min);
            assert!(d < 0.5, "lateral offset {d}");
        }
    }
}

#[test]
fn expert_is_collision_free_and_comfortable() {
    let th = ComfortThresholds::default();
    let mut moving = 0;
    for log in generate(&cfg(5, 30, LayoutWeights::default())).unwrap() {
        for f in &log.frames {
            assert!(collision_check(&f.sdv_pose, log.sdv_extent, &f.agents).is_none());
        }
        let poses = log.expert_poses();
        let c = comfort_check(&poses, log.dt, &th);
        assert_eq!(
            (c.acc, c.jerk, c.lateral_acc),
            (0, 0, 0),
            "expert comfort failures"
        );
        let first = poses[0];
        let last = poses[poses.len() - 1];
        if (last.x - first.x).hypot(last.y - first.y) > 50.0 {
            moving += 1;
        }
    }
    assert!(moving >= 20, "most experts should make progress, got {moving}");
}

#[test]
fn default_density_fits_agent_budget() {
    for log in generate(&cfg(2, 20, LayoutWeights::default())).unwrap() {
        for (t, f) in log.frames.iter().enumerate() {
            let near = f
                .agents
                .iter()
                .filter(|a| (a.pose.x - f.sdv_pose.x).hypot(a.pose.y - f.sdv_pose.y) <= FOV_RADIUS)
                .count();
            assert!(near <= 30);
            let reg = query_fov(&log, t, &f.sdv_pose, FOV_RADIUS).unwrap();
            assert_eq!(reg.agents.len(), near);
        }
    }
}

#[test]
fn expert_stops_before_line_on_red() {
    let mut stops = 0;
    for i in 0..40 {
        let log = generate_one(&cfg(21, 40, only_intersections()), i).unwrap();
        let Some(lane) = log.map.lanes.iter().find(|l| l.traffic_light) else {
            continue;
        };
        // The first controlled lane is the expert's approach; it ends at the stop line.
        let stop = *lane.mid.last().unwrap();
        let heading = {
            let a = lane.mid[lane.mid.len() - 2];
            (stop[1] - a[1]).atan2(stop[0] - a[0])
        };
        let ahead = |p: &diffdrive::Pose| (p.x - stop[0]) * heading.cos() + (p.y - stop[1]) * heading.sin();
        let mut crossed_on_red_from_rest = false;
        let mut was_stopped = false;
        for w in log.frames.windows(2) {
            let v = (w[1].sdv_pose.x - w[0].sdv_pose.x).hypot(w[1].sdv_pose.y - w[0].sdv_pose.y) / log.dt;
            let front = ahead(&w[0].sdv_pose) + log.sdv_extent.length / 2.0;
            let state = w[0].traffic_light_states.get(&lane.id).copied();
            if v < 0.05 && front < 0.0 && front > -30.0 && state == Some(LightState::Red) {
                was_stopped = true;
            }
            if was_stopped && state == Some(LightState::Red) && ahead(&w[1].sdv_pose) + log.sdv_extent.length / 2.0 > 0.0 {
                crossed_on_red_from_rest = true;
            }
        }
        assert!(!crossed_on_red_from_rest, "scenario {i} crossed on red after stopping");
        stops += was_stopped as usize;
    }
    assert!(stops >= 3, "expected several red-light stops, saw {stops}");
}

#[test]
fn intersections_have_pedestrians_and_cross_traffic() {
    let logs = generate(&cfg(8, 12, only_intersections())).unwrap();
    let peds = logs
        .iter()
        .flat_map(|l| &l.frames)
        .flat_map(|f| &f.agents)
        .filter(|a| a.kind == AgentKind::Pedestrian)
        .count();
    assert!(peds > 0);
    assert!(logs.iter().all(|l| !l.map.crosswalks.is_empty()));
}
