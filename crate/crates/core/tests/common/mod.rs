#![allow(dead_code)]

use std::collections::BTreeMap;

use diffdrive::scene::{AgentKind, AgentState, Crosswalk, Extent, Frame, Lane, LightState, MapData, ScenarioLog};
use diffdrive::Pose;

pub fn lane(id: u32, y: f64, x0: f64, x1: f64) -> Lane {
    let n = 10;
    let pts = |off: f64| (0..=n).map(|i| [x0 + (x1 - x0) * i as f64 / n as f64, y + off]).collect();
    Lane {
        id,
        mid: pts(0.0),
        left: pts(1.8),
        right: pts(-1.8),
        traffic_light: id == 1,
    }
}

fn vehicle(id: u32, pose: Pose) -> AgentState {
    AgentState {
        id,
        pose,
        extent: Extent { length: 4.5, width: 1.9 },
        kind: AgentKind::Vehicle,
    }
}

/// SDV driving along `y = 0` with a slight weave; a leader close ahead and a
/// vehicle in the next lane so the collision term is active.
pub fn busy_log(frames: usize) -> ScenarioLog {
    let frames = (0..frames)
        .map(|t| {
            let x = t as f64 * 0.9;
            let y = 0.2 * (t as f64 * 0.15).sin();
            let yaw = (0.2 * 0.15 / 0.9 * (t as f64 * 0.15).cos()).atan();
            Frame {
                sdv_pose: Pose::new(x, y, yaw),
                agents: vec![
                    vehicle(10, Pose::new(x + 5.2 - 0.05 * t as f64, 0.3, 0.02)),
                    vehicle(11, Pose::new(x + 1.0, 2.4, -0.05)),
                    AgentState {
                        id: 12,
                        pose: Pose::new(12.0, -4.0 + 0.1 * t as f64, 1.5),
                        extent: Extent { length: 0.6, width: 0.6 },
                        kind: AgentKind::Pedestrian,
                    },
                ],
                traffic_light_states: BTreeMap::from([(1, if t < 6 { LightState::Green } else { LightState::Yellow })]),
            }
        })
        .collect();
    ScenarioLog {
        dt: 0.1,
        sdv_extent: Extent { length: 4.5, width: 2.0 },
        map: MapData {
            lanes: vec![lane(1, 0.0, -30.0, 60.0), lane(2, 3.6, -30.0, 60.0)],
            crosswalks: vec![Crosswalk {
                id: 5,
                polygon: vec![[14.0, -5.0], [17.0, -5.0], [17.0, 8.0], [14.0, 8.0], [14.0, -5.0]],
            }],
        },
        frames,
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
