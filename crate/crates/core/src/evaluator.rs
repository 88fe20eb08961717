//! Closed-loop evaluation with intervention resets and the failure metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{boxes_intersect, clip_convex, polygon_centroid, OrientedBox};
use crate::grad::Tape;
use crate::policy::{first_action, trajectory_poses, Policy};
use crate::real::Real;
use crate::scene::{query_fov, AgentState, Extent, Observation, Registry, ScenarioLog, FOV_RADIUS, HISTORY_POINTS};
use crate::se2::{angle_diff, Pose};
use crate::sim::{kinematics_step, unicycle_increment, Kinematics, PolicyInput, SimState};

pub const METERS_PER_MILE: f64 = 1609.344;
pub const REPORT_SCHEMA: &str = "metrics-v1";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot normalize over zero miles driven")]
    ZeroMiles,
    #[error("reference needs at least 2 points")]
    ShortReference,
    #[error("scenario {index}: {message}")]
    Scenario { index: usize, message: String },
    #[error("planner: {0}")]
    Planner(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sector {
    Front,
    Side,
    Rear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Contact {
    pub agent_id: u32,
    pub sector: Sector,
}

/// Perpendicular distance from `p` to the closest segment of `reference`.
pub fn lateral_deviation(p: &Pose, reference: &[[f64; 2]]) -> Result<f64, EvalError> {
    if reference.len() < 2 {
        return Err(EvalError::ShortReference);
    }
    Ok(crate::scene::polyline_distance([p.x, p.y], reference))
}

/// Sector of a bearing (radians, SDV frame).
pub fn sector_of_bearing(bearing: f64) -> Sector {
    let b = bearing.abs();
    if b <= std::f64::consts::FRAC_PI_4 {
        Sector::Front
    } else if b >= 3.0 * std::f64::consts::FRAC_PI_4 {
        Sector::Rear
    } else {
        Sector::Side
    }
}

/// First agent (in list order) whose box intersects the SDV box.
///
/// The sector is the bearing, in the SDV frame, of the centroid of the
/// overlap region.
pub fn collision_check(sdv: &Pose, sdv_extent: Extent, agents: &[AgentState]) -> Option<Contact> {
    let sdv_box = OrientedBox::new(*sdv, sdv_extent);
    for a in agents {
        let b = OrientedBox::new(a.pose, a.extent);
        if !boxes_intersect(&sdv_box, &b) {
            continue;
        }
        let poly = clip_convex(&sdv_box.corners(), &b.corners());
        let c = polygon_centroid(&poly).unwrap_or([a.pose.x, a.pose.y]);
        let local = sdv.inverse_transform_point(c);
        return Some(Contact {
            agent_id: a.id,
            sector: sector_of_bearing(local[1].atan2(local[0])),
        });
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComfortThresholds {
    pub acc: f64,
    pub jerk: f64,
    pub lateral_acc: f64,
}

impl Default for ComfortThresholds {
    fn default() -> Self {
        Self {
            acc: 3.0,
            jerk: 2.0,
            lateral_acc: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComfortCounts {
    pub acc: u64,
    pub jerk: u64,
    pub lateral_acc: u64,
}

impl ComfortCounts {
    pub fn add(&mut self, o: &ComfortCounts) {
        self.acc += o.acc;
        self.jerk += o.jerk;
        self.lateral_acc += o.lateral_acc;
    }
}

/// Finite-difference comfort failures over a continuous pose sequence.
///
/// Acceleration is the planar second difference; jerk is the change of
/// along-track acceleration; lateral acceleration is speed times yaw rate.
pub fn comfort_check(poses: &[Pose], dt: f64, th: &ComfortThresholds) -> ComfortCounts {
    let mut c = ComfortCounts::default();
    let n = poses.len();
    if n < 3 {
        return c;
    }
    let dt2 = dt * dt;
    for k in 1..n - 1 {
        let ax = (poses[k + 1].x - 2.0 * poses[k].x + poses[k - 1].x) / dt2;
        let ay = (poses[k + 1].y - 2.0 * poses[k].y + poses[k - 1].y) / dt2;
        if ax.hypot(ay) > th.acc {
            c.acc += 1;
        }
    }
    let speed: Vec<f64> = poses
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / dt)
        .collect();
    for k in 0..speed.len() - 1 {
        let v = (speed[k] + speed[k + 1]) / 2.0;
        let yaw_rate = angle_diff(poses[k + 2].yaw, poses[k].yaw) / (2.0 * dt);
        if (v * yaw_rate).abs() > th.lateral_acc {
            c.lateral_acc += 1;
        }
    }
    let along: Vec<f64> = speed.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    for w in along.windows(2) {
        if ((w[1] - w[0]) / dt).abs() > th.jerk {
            c.jerk += 1;
        }
    }
    c
}

pub fn normalize_per_1000_miles(count: f64, miles: f64) -> Result<f64, EvalError> {
    if !(miles > 0.0) {
        return Err(EvalError::ZeroMiles);
    }
    Ok(count * 1000.0 / miles)
}

pub fn polyline_length(pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

/// Chooses the closed-loop action for the current state.
pub trait Planner: Sync {
    fn plan(&self, log: &ScenarioLog, registry: &Registry, state: &SimState) -> Result<Pose, EvalError>;
}

/// Replays the logged increments.
pub struct ExpertPlanner;

impl Planner for ExpertPlanner {
    fn plan(&self, log: &ScenarioLog, _registry: &Registry, s: &SimState) -> Result<Pose, EvalError> {
        let f = &log.frames;
        Ok(f[s.t].sdv_pose.relative(&f[s.t + 1].sdv_pose))
    }
}

/// Heads for the expert's next pose shifted sideways by `lateral` meters.
pub struct LateralBiasPlanner {
    pub lateral: f64,
}

impl Planner for LateralBiasPlanner {
    fn plan(&self, log: &ScenarioLog, _registry: &Registry, s: &SimState) -> Result<Pose, EvalError> {
        let target = log.frames[s.t + 1].sdv_pose.compose(&Pose::new(0.0, self.lateral, 0.0));
        Ok(s.sdv_pose().relative(&target))
    }
}

/// First action of a trained policy, dropout-free.
pub struct NetworkPlanner<T: Real> {
    pub policy: Policy<T>,
}

impl<T: Real> Planner for NetworkPlanner<T> {
    fn plan(&self, log: &ScenarioLog, registry: &Registry, s: &SimState) -> Result<Pose, EvalError> {
        let err = |e: &dyn std::fmt::Display| EvalError::Planner(e.to_string());
        let obs = Observation::build(log, registry, s.t, &s.sdv_pose(), &s.history()).map_err(|e| err(&e))?;
        let mut tape = Tape::<T>::new();
        let bound = self.policy.params.bind(&mut tape);
        let input = PolicyInput::from_observation(&mut tape, &obs).map_err(|e| err(&e))?;
        let f = self
            .policy
            .forward(&mut tape, &bound, &input, self.policy.eval_history_mode())
            .map_err(|e| err(&e))?;
        first_action(&trajectory_poses(tape.value(f.trajectory))).ok_or_else(|| EvalError::Planner("empty trajectory".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub offroad_threshold: f64,
    pub comfort: ComfortThresholds,
    pub kinematics: Kinematics,
    /// First evaluated frame; earlier frames only provide history.
    pub start_frame: usize,
    /// Cap on evaluated frames per scenario.
    pub max_frames: Option<usize>,
    /// 1 evaluates scenarios on the calling thread.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            offroad_threshold: 2.0,
            comfort: ComfortThresholds::default(),
            kinematics: Kinematics::Unconstrained,
            start_frame: HISTORY_POINTS - 1,
            max_frames: None,
            workers: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub front: u64,
    pub side: u64,
    pub rear: u64,
    pub off_road: u64,
    pub comfort_acc: u64,
    pub jerk: u64,
    pub lateral_acc: u64,
}

impl FailureCounts {
    pub fn collisions(&self) -> u64 {
        self.front + self.side + self.rear
    }

    pub fn interventions(&self) -> u64 {
        self.collisions() + self.off_road
    }

    fn add(&mut self, o: &FailureCounts) {
        self.front += o.front;
        self.side += o.side;
        self.rear += o.rear;
        self.off_road += o.off_road;
        self.comfort_acc += o.comfort_acc;
        self.jerk += o.jerk;
        self.lateral_acc += o.lateral_acc;
    }

    fn add_comfort(&mut self, c: &ComfortCounts) {
        self.comfort_acc += c.acc;
        self.jerk += c.jerk;
        self.lateral_acc += c.lateral_acc;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCounts {
    pub front: f64,
    pub side: f64,
    pub rear: f64,
    pub collisions: f64,
    pub off_road: f64,
    pub comfort_acc: f64,
    pub jerk: f64,
    pub lateral_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub planner: String,
    pub scenarios: usize,
    pub frames: u64,
    pub offroad_threshold: f64,
    pub counts: FailureCounts,
    pub collisions_total: u64,
    pub interventions: u64,
    pub miles_driven: f64,
    pub per_1000_miles: NormalizedCounts,
    pub i1k: f64,
    /// Mean distance to the time-aligned expert position, averaged over scenarios.
    pub l2: f64,
}

/// Per-scenario outcome before aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioResult {
    pub counts: FailureCounts,
    pub frames: u64,
    pub meters: f64,
    pub l2_mean: f64,
    pub resets: Vec<usize>,
    pub poses: Vec<Pose>,
}

pub fn evaluate_scenario(planner: &dyn Planner, log: &ScenarioLog, cfg: &EvalConfig) -> Result<ScenarioResult, EvalError> {
    let reference: Vec<[f64; 2]> = log.frames.iter().map(|f| [f.sdv_pose.x, f.sdv_pose.y]).collect();
    let n = log.frames.len();
    let start = cfg.start_frame.min(n.saturating_sub(1));
    let end = match cfg.max_frames {
        Some(m) => (start + m).min(n - 1),
        None => n - 1,
    };
    let wrap = |e: &dyn std::fmt::Display| EvalError::Scenario {
        index: 0,
        message: e.to_string(),
    };
    let mut out = ScenarioResult::default();
    let mut state = SimState::expert(log, start);
    let mut segment = vec![state.sdv_pose()];
    let mut l2_sum = 0.0;
    out.poses.push(state.sdv_pose());
    for t in start..end {
        let registry = query_fov(log, t, &state.sdv_pose(), FOV_RADIUS).map_err(|e| wrap(&e))?;
        let a = planner.plan(log, &registry, &state)?;
        let inc = match cfg.kinematics {
            Kinematics::Unconstrained => a,
            Kinematics::Unicycle => Pose::from_array(unicycle_increment(a.to_array())),
        };
        let next = kinematics_step(&state.sdv_pose(), &inc);
        let frame = &log.frames[t + 1];
        let mut poses = [next; HISTORY_POINTS];
        let mut known = [true; HISTORY_POINTS];
        poses[1..].copy_from_slice(&state.poses[..HISTORY_POINTS - 1]);
        known[1..].copy_from_slice(&state.known[..HISTORY_POINTS - 1]);
        state = SimState { t: t + 1, poses, known };
        out.frames += 1;
        l2_sum += (next.x - frame.sdv_pose.x).hypot(next.y - frame.sdv_pose.y);
        out.poses.push(next);
        segment.push(next);

        let mut failed = false;
        if let Some(c) = collision_check(&next, log.sdv_extent, &frame.agents) {
            match c.sector {
                Sector::Front => out.counts.front += 1,
                Sector::Side => out.counts.side += 1,
                Sector::Rear => out.counts.rear += 1,
            }
            failed = true;
        }
        if lateral_deviation(&next, &reference)? > cfg.offroad_threshold {
            out.counts.off_road += 1;
            failed = true;
        }
        if failed {
            out.counts.add_comfort(&comfort_check(&segment, log.dt, &cfg.comfort));
            state = SimState::expert(log, t + 1);
            segment = vec![state.sdv_pose()];
            out.resets.push(t + 1);
        }
    }
    out.counts.add_comfort(&comfort_check(&segment, log.dt, &cfg.comfort));
    out.meters = polyline_length(&reference[start..=end]);
    out.l2_mean = if out.frames > 0 { l2_sum / out.frames as f64 } else { 0.0 };
    Ok(out)
}

pub fn evaluate(planner: &dyn Planner, name: &str, logs: &[ScenarioLog], cfg: &EvalConfig) -> Result<MetricsReport, EvalError> {
    let job = |(i, log): (usize, &ScenarioLog)| {
        evaluate_scenario(planner, log, cfg).map_err(|e| match e {
            EvalError::Scenario { message, .. } => EvalError::Scenario { index: i, message },
            other => EvalError::Scenario {
                index: i,
                message: other.to_string(),
            },
        })
    };
    let results: Vec<Result<ScenarioResult, EvalError>> = if cfg.workers == 1 {
        logs.iter().enumerate().map(job).collect()
    } else {
        logs.par_iter().enumerate().map(job).collect()
    };
    let mut counts = FailureCounts::default();
    let (mut frames, mut meters, mut l2) = (0, 0.0, 0.0);
    for r in results {
        let r = r?;
        counts.add(&r.counts);
        frames += r.frames;
        meters += r.meters;
        l2 += r.l2_mean;
    }
    report_from(name, logs.len(), frames, counts, meters / METERS_PER_MILE, l2 / logs.len().max(1) as f64, cfg.offroad_threshold)
}

pub fn report_from(
    name: &str,
    scenarios: usize,
    frames: u64,
    counts: FailureCounts,
    miles: f64,
    l2: f64,
    offroad_threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let norm = |c: u64| normalize_per_1000_miles(c as f64, miles);
    let per = NormalizedCounts {
        front: norm(counts.front)?,
        side: norm(counts.side)?,
        rear: norm(counts.rear)?,
        collisions: norm(counts.collisions())?,
        off_road: norm(counts.off_road)?,
        comfort_acc: norm(counts.comfort_acc)?,
        jerk: norm(counts.jerk)?,
        lateral_acc: norm(counts.lateral_acc)?,
    };
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        planner: name.to_string(),
        scenarios,
        frames,
        offroad_threshold,
        counts,
        collisions_total: counts.collisions(),
        interventions: counts.interventions(),
        miles_driven: miles,
        per_1000_miles: per,
        i1k: norm(counts.interventions())?,
        l2,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "planner: {}  scenarios: {}  frames: {}  miles: {:.3}", self.planner, self.scenarios, self.frames, self.miles_driven);
        let _ = writeln!(s, "off-road threshold: {} m", self.offroad_threshold);
        let _ = writeln!(s, "{:<16}{:>10}{:>16}", "metric", "count", "per 1000 mi");
        let c = &self.counts;
        let p = &self.per_1000_miles;
        let rows = [
            ("front", c.front, p.front),
            ("side", c.side, p.side),
            ("rear", c.rear, p.rear),
            ("collisions", c.collisions(), p.collisions),
            ("off-road", c.off_road, p.off_road),
            ("I1K", self.interventions, self.i1k),
            ("comfort acc", c.comfort_acc, p.comfort_acc),
            ("jerk", c.jerk, p.jerk),
            ("lateral acc", c.lateral_acc, p.lateral_acc),
        ];
        for (name, n, r) in rows {
            let _ = writeln!(s, "{name:<16}{n:>10}{r:>16.1}");
        }
        let _ = writeln!(s, "{:<16}{:>26.3}", "L2 [m]", self.l2);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentKind;

    #[test]
    fn normalization_arithmetic() {
        assert_eq!(normalize_per_1000_miles(2.0, 2.0).unwrap(), 1000.0);
        assert_eq!(normalize_per_1000_miles(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(normalize_per_1000_miles(26.0, 100.0).unwrap(), 260.0);
        assert_eq!(normalize_per_1000_miles(1.0, 0.0), Err(EvalError::ZeroMiles));
    }

    #[test]
    fn lateral_deviation_cases() {
        let r = [[0.0, 0.0], [10.0, 0.0]];
        assert_eq!(lateral_deviation(&Pose::new(3.0, 0.0, 0.0), &r).unwrap(), 0.0);
        assert!((lateral_deviation(&Pose::new(3.0, 2.5, 0.0), &r).unwrap() - 2.5).abs() < 1e-12);
        // Beyond the endpoint: brute-force nearest point oracle.
        let p = Pose::new(13.0, 4.0, 0.0);
        let brute = (0..=10000)
            .map(|i| {
                let x = i as f64 * 1e-3;
                (p.x - x).hypot(p.y)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((lateral_deviation(&p, &r).unwrap() - brute).abs() < 1e-9);
        assert!(lateral_deviation(&p, &r[..1]).is_err());
    }

    fn car(id: u32, x: f64, y: f64, yaw: f64) -> AgentState {
        AgentState {
            id,
            pose: Pose::new(x, y, yaw),
            extent: Extent { length: 4.0, width: 2.0 },
            kind: AgentKind::Vehicle,
        }
    }

    #[test]
    fn collision_sectors() {
        let ext = Extent { length: 4.0, width: 2.0 };
        let sdv = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(collision_check(&sdv, ext, &[car(1, 20.0, 0.0, 0.0)]), None);
        assert_eq!(collision_check(&sdv, ext, &[car(1, 3.5, 0.0, 0.0)]).unwrap().sector, Sector::Front);
        assert_eq!(collision_check(&sdv, ext, &[car(1, -3.5, 0.0, 0.0)]).unwrap().sector, Sector::Rear);
        assert_eq!(
            collision_check(&sdv, ext, &[car(2, 0.0, 2.5, std::f64::consts::FRAC_PI_2)]).unwrap(),
            Contact { agent_id: 2, sector: Sector::Side }
        );
    }

    #[test]
    fn comfort_cases() {
        let th = ComfortThresholds::default();
        let line: Vec<Pose> = (0..20).map(|k| Pose::new(k as f64, 0.0, 0.0)).collect();
        assert_eq!(comfort_check(&line, 0.1, &th), ComfortCounts::default());
        // 1 m/s for a while, then 1.4 m/s: a single 4 m/s^2 second difference.
        let mut x = 0.0;
        let mut jump = vec![Pose::new(0.0, 0.0, 0.0)];
        for k in 0..10 {
            x += if k < 5 { 0.1 } else { 0.14 };
            jump.push(Pose::new(x, 0.0, 0.0));
        }
        let c = comfort_check(&jump, 0.1, &th);
        assert_eq!(c.acc, 1);
        assert!(c.jerk >= 1);
        // Circle at v = 5 m/s, r = 5 m.
        let (v, r, dt) = (5.0, 5.0, 0.01);
        let circle: Vec<Pose> = (0..200)
            .map(|k| {
                let a = v / r * dt * k as f64;
                Pose::new(r * a.sin(), r - r * a.cos(), a)
            })
            .collect();
        let c = comfort_check(&circle, dt, &th);
        assert_eq!(c.lateral_acc, 198);
        assert_eq!(c.acc, 198);
        assert_eq!(c.jerk, 0);
    }
}
