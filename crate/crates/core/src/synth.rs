//! Procedural driving scenarios: road layouts, scripted traffic, signal
//! cycles and an expert SDV driven by pure pursuit with IDM speed control.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{boxes_intersect, OrientedBox};
use crate::scene::{
    AgentKind, AgentState, Crosswalk, Extent, Frame, Lane, LightState, MapData, ScenarioLog,
};
use crate::se2::Pose;

pub const LANE_WIDTH: f64 = 3.6;
const LANE_ELEMENT_LENGTH: f64 = 100.0;
const PATH_STEP: f64 = 0.5;
const LOOKAHEAD: f64 = 5.0;
const MAX_RETRIES: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutWeights {
    pub straight: f64,
    pub curve: f64,
    pub intersection: f64,
}

impl Default for LayoutWeights {
    fn default() -> Self {
        Self {
            straight: 1.0,
            curve: 1.0,
            intersection: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightPhases {
    pub green: f64,
    pub yellow: f64,
    pub all_red: f64,
}

impl Default for LightPhases {
    fn default() -> Self {
        Self {
            green: 10.0,
            yellow: 3.0,
            all_red: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenarios: usize,
    pub frames_per_scenario: usize,
    pub dt: f64,
    pub layouts: LayoutWeights,
    /// Scales the number of scripted agents; 1.0 is the default traffic.
    pub agent_density: f64,
    pub light_phases: LightPhases,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenarios: 100,
            frames_per_scenario: 250,
            dt: 0.1,
            layouts: LayoutWeights::default(),
            agent_density: 1.0,
            light_phases: LightPhases::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("scenario {index}: no collision-free draw after {attempts} attempts")]
    Exhausted { index: usize, attempts: u64 },
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.n_scenarios == 0 {
            return bad("n_scenarios must be positive");
        }
        if self.frames_per_scenario < 2 {
            return bad("frames_per_scenario must be at least 2");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        let w = self.layouts;
        if [w.straight, w.curve, w.intersection].iter().any(|&v| !(v >= 0.0)) {
            return bad("layout weights must be non-negative");
        }
        if w.straight + w.curve + w.intersection <= 0.0 {
            return bad("layout weights must not all be zero");
        }
        if !(self.agent_density >= 0.0) {
            return bad("agent_density must be non-negative");
        }
        let p = self.light_phases;
        if !(p.green > 0.0 && p.yellow > 0.0 && p.all_red >= 0.0) {
            return bad("light phases must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    Curve,
    Intersection,
}

/// Arc-length parameterized polyline.
#[derive(Clone, Debug)]
pub struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

enum Piece {
    Straight(f64),
    Arc { radius: f64, angle: f64 },
}

impl Path {
    pub fn from_points(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn from_pieces(start: Pose, pieces: &[Piece]) -> Self {
        let mut pts = vec![[start.x, start.y]];
        let (mut x, mut y, mut h) = (start.x, start.y, start.yaw);
        for piece in pieces {
            match *piece {
                Piece::Straight(len) => {
                    let n = (len / PATH_STEP).ceil() as usize;
                    let step = len / n as f64;
                    for _ in 0..n {
                        x += step * h.cos();
                        y += step * h.sin();
                        pts.push([x, y]);
                    }
                }
                Piece::Arc { radius, angle } => {
                    let len = radius * angle.abs();
                    let n = (len / PATH_STEP).ceil() as usize;
                    let dh = angle / n as f64;
                    let chord = 2.0 * radius * (dh.abs() / 2.0).sin();
                    for _ in 0..n {
                        let mid = h + dh / 2.0;
                        x += chord * mid.cos();
                        y += chord * mid.sin();
                        h += dh;
                        pts.push([x, y]);
                    }
                }
            }
        }
        Self::from_points(pts)
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.pts
    }

    fn segment(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i.max(1) - 1).min(self.pts.len() - 2),
        }
    }

    /// Pose at arc length `s` (clamped), heading along the path.
    pub fn pose_at(&self, s: f64) -> Pose {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let u = if len > 0.0 { ((s - self.cum[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
        Pose::new(
            a[0] + u * (b[0] - a[0]),
            a[1] + u * (b[1] - a[1]),
            (b[1] - a[1]).atan2(b[0] - a[0]),
        )
    }

    /// Arc length of the closest point, with its signed lateral offset (left positive).
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.pts.len() - 1 {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a[0] + u * dx, a[1] + u * dy);
            let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
            if d2 < best.0 {
                let side = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                let lat = d2.sqrt() * if side >= 0.0 { 1.0 } else { -1.0 };
                best = (d2, self.cum[i] + u * len2.sqrt(), lat);
            }
        }
        (best.1, best.2)
    }

    /// Parallel curve at lateral offset `d` (left positive).
    pub fn offset(&self, d: f64) -> Path {
        let n = self.pts.len();
        let pts = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (self.pts[i], self.pts[i + 1]) } else { (self.pts[i - 1], self.pts[i]) };
                let h = (b[1] - a[1]).atan2(b[0] - a[0]);
                // Average neighbouring headings at interior vertices.
                let h = if i > 0 && i + 1 < n {
                    let p = self.pts[i - 1];
                    let hp = (self.pts[i][1] - p[1]).atan2(self.pts[i][0] - p[0]);
                    hp + crate::se2::angle_diff(h, hp) / 2.0
                } else {
                    h
                };
                [self.pts[i][0] - d * h.sin(), self.pts[i][1] + d * h.cos()]
            })
            .collect();
        Path::from_points(pts)
    }

    pub fn reversed(&self) -> Path {
        let mut pts = self.pts.clone();
        pts.reverse();
        Path::from_points(pts)
    }

    fn slice(&self, s0: f64, s1: f64) -> Vec<[f64; 2]> {
        let mut out = vec![{
            let p = self.pose_at(s0);
            [p.x, p.y]
        }];
        for (i, &c) in self.cum.iter().enumerate() {
            if c > s0 + 1e-9 && c < s1 - 1e-9 {
                out.push(self.pts[i]);
            }
        }
        let p = self.pose_at(s1);
        out.push([p.x, p.y]);
        out
    }
}

/// Which signal group controls a stop line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Main,
    Cross,
}

#[derive(Clone, Copy, Debug)]
struct SignalCycle {
    phases: LightPhases,
    offset: f64,
}

impl SignalCycle {
    fn period(&self) -> f64 {
        2.0 * (self.phases.green + self.phases.yellow + self.phases.all_red)
    }

    fn state(&self, group: Group, time: f64) -> LightState {
        let p = self.phases;
        let half = p.green + p.yellow + p.all_red;
        let mut u = (time + self.offset).rem_euclid(self.period());
        if group == Group::Cross {
            u = (u + half).rem_euclid(self.period());
        }
        if u < p.green {
            LightState::Green
        } else if u < p.green + p.yellow {
            LightState::Yellow
        } else {
            LightState::Red
        }
    }
}

struct StopLine {
    s: f64,
    group: Group,
}

struct Road {
    path: Path,
    stop: Option<StopLine>,
}

#[derive(Clone, Copy, Debug)]
struct Idm {
    v_des: f64,
    a_max: f64,
    b: f64,
    s0: f64,
    headway: f64,
}

impl Idm {
    fn accel(&self, v: f64, lead: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.v_des).powi(4);
        let inter = match lead {
            Some((gap, v_lead)) => {
                let s_star = self.s0 + (v * self.headway + v * (v - v_lead) / (2.0 * (self.a_max * self.b).sqrt())).max(0.0);
                (s_star / gap.max(0.1)).powi(2)
            }
            None => 0.0,
        };
        self.a_max * (free - inter)
    }
}

const JERK_LIMIT: f64 = 1.2;
const DECEL_LIMIT: f64 = 2.2;
const STOP_DECEL: f64 = 1.8;

struct Vehicle {
    id: u32,
    road: usize,
    s: f64,
    v: f64,
    a: f64,
    extent: Extent,
    idm: Idm,
    committed: bool,
    /// Lateral offset of the expert from its centerline; zero for scripted cars.
    lateral: f64,
    yaw: Option<f64>,
}

struct Pedestrian {
    id: u32,
    start: [f64; 2],
    heading: f64,
    speed: f64,
    t_start: f64,
    distance: f64,
}

struct World {
    roads: Vec<Road>,
    cycle: Option<SignalCycle>,
    map: MapData,
    lane_groups: Vec<(u32, Group)>,
}

fn choose_layout(w: &LayoutWeights, rng: &mut ChaCha8Rng) -> Layout {
    let total = w.straight + w.curve + w.intersection;
    let u = rng.gen_range(0.0..total);
    if u < w.straight {
        Layout::Straight
    } else if u < w.straight + w.curve {
        Layout::Curve
    } else {
        Layout::Intersection
    }
}

fn lane_elements(path: &Path, breaks: &[f64], ids: &mut u32, lights: &[(f64, f64)]) -> Vec<Lane> {
    let len = path.length();
    let mut cuts: Vec<f64> = vec![0.0];
    let mut s = 0.0;
    while s + LANE_ELEMENT_LENGTH < len {
        s += LANE_ELEMENT_LENGTH;
        cuts.push(s);
    }
    cuts.extend(breaks.iter().copied().filter(|&b| b > 1.0 && b < len - 1.0));
    cuts.push(len);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 5.0);
    if *cuts.last().unwrap() < len {
        cuts.push(len);
    }
    let left = path.offset(LANE_WIDTH / 2.0);
    let right = path.offset(-LANE_WIDTH / 2.0);
    cuts.windows(2)
        .map(|w| {
            *ids += 1;
            let controlled = lights.iter().any(|&(lo, hi)| w[0] < hi && w[1] > lo);
            Lane {
                id: *ids,
                mid: path.slice(w[0], w[1]),
                left: left.slice(w[0], w[1]),
                right: right.slice(w[0], w[1]),
                traffic_light: controlled,
            }
        })
        .collect()
}

fn transform_points(t: &Pose, pts: &mut [[f64; 2]]) {
    for p in pts.iter_mut() {
        *p = t.transform_point(*p);
    }
}

fn build_world(layout: Layout, cfg: &GenConfig, rng: &mut ChaCha8Rng, length: f64) -> (World, f64) {
    let global = Pose::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-PI..PI));
    let start = global;
    let main = match layout {
        Layout::Straight | Layout::Intersection => Path::from_pieces(start, &[Piece::Straight(length)]),
        Layout::Curve => {
            let radius = rng.gen_range(70.0..120.0);
            let angle: f64 = rng.gen_range(0.5..1.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let first = rng.gen_range(70.0..140.0);
            let rest = (length - first - radius * angle.abs()).max(50.0);
            Path::from_pieces(
                start,
                &[Piece::Straight(first), Piece::Arc { radius, angle }, Piece::Straight(rest)],
            )
        }
    };
    let oncoming = main.offset(LANE_WIDTH).reversed();
    let mut ids = 0;
    let mut map = MapData::default();
    let mut roads = Vec::new();
    let mut lane_groups = Vec::new();
    let mut cycle = None;
    let mut stop_x = None;
    if layout == Layout::Intersection {
        let xi = rng.gen_range(110.0..170.0);
        let stop = xi - LANE_WIDTH - 5.0;
        stop_x = Some(xi);
        cycle = Some(SignalCycle {
            phases: cfg.light_phases,
            offset: rng.gen_range(0.0..2.0 * (cfg.light_phases.green + cfg.light_phases.yellow + cfg.light_phases.all_red)),
        });
        let main_lanes = lane_elements(&main, &[stop], &mut ids, &[(stop - 1.0, stop)]);
        lane_groups.extend(main_lanes.iter().filter(|l| l.traffic_light).map(|l| (l.id, Group::Main)));
        map.lanes.extend(main_lanes);
        let on_len = oncoming.length();
        let on_stop = on_len - (xi + LANE_WIDTH + 5.0);
        let on_lanes = lane_elements(&oncoming, &[on_stop], &mut ids, &[(on_stop - 1.0, on_stop)]);
        lane_groups.extend(on_lanes.iter().filter(|l| l.traffic_light).map(|l| (l.id, Group::Main)));
        map.lanes.extend(on_lanes);
        roads.push(Road {
            path: main.clone(),
            stop: Some(StopLine { s: stop, group: Group::Main }),
        });
        roads.push(Road {
            path: oncoming.clone(),
            stop: Some(StopLine { s: on_stop, group: Group::Main }),
        });
        // Crossing road: center at x = xi in the local frame, lanes at xi +/- 1.8.
        let half = 120.0;
        let center_y = LANE_WIDTH / 2.0;
        for (dir, lane_x) in [(1.0, xi + LANE_WIDTH / 2.0), (-1.0, xi - LANE_WIDTH / 2.0)] {
            let y0 = center_y - dir * half;
            let local_start = Pose::new(lane_x, y0, dir * FRAC_PI_2);
            let path = Path::from_pieces(global.compose(&local_start), &[Piece::Straight(2.0 * half)]);
            let cross_stop = half - LANE_WIDTH - 5.0;
            let lanes = lane_elements(&path, &[cross_stop], &mut ids, &[(cross_stop - 1.0, cross_stop)]);
            lane_groups.extend(lanes.iter().filter(|l| l.traffic_light).map(|l| (l.id, Group::Cross)));
            map.lanes.extend(lanes);
            roads.push(Road {
                path,
                stop: Some(StopLine { s: cross_stop, group: Group::Cross }),
            });
        }
        for (k, x0) in [(0u32, xi - LANE_WIDTH - 4.0), (1, xi + LANE_WIDTH + 1.0)] {
            let mut poly = vec![
                [x0, -LANE_WIDTH / 2.0 - 0.5],
                [x0 + 3.0, -LANE_WIDTH / 2.0 - 0.5],
                [x0 + 3.0, 1.5 * LANE_WIDTH + 0.5],
                [x0, 1.5 * LANE_WIDTH + 0.5],
                [x0, -LANE_WIDTH / 2.0 - 0.5],
            ];
            transform_points(&global, &mut poly);
            map.crosswalks.push(Crosswalk { id: 1000 + k, polygon: poly });
        }
    } else {
        map.lanes.extend(lane_elements(&main, &[], &mut ids, &[]));
        map.lanes.extend(lane_elements(&oncoming, &[], &mut ids, &[]));
        roads.push(Road { path: main, stop: None });
        roads.push(Road { path: oncoming, stop: None });
    }
    (
        World {
            roads,
            cycle,
            map,
            lane_groups,
        },
        stop_x.unwrap_or(f64::NAN),
    )
}

fn car_extent(rng: &mut ChaCha8Rng) -> Extent {
    Extent {
        length: rng.gen_range(4.2..5.0),
        width: rng.gen_range(1.8..2.0),
    }
}

fn car_idm(rng: &mut ChaCha8Rng, v_des: f64) -> Idm {
    Idm {
        v_des,
        a_max: rng.gen_range(1.0..1.4),
        b: 2.0,
        s0: rng.gen_range(2.5..3.5),
        headway: rng.gen_range(1.2..1.6),
    }
}

fn density_count(rng: &mut ChaCha8Rng, max: usize, density: f64) -> usize {
    let hi = ((max as f64) * density).round() as usize;
    if hi == 0 {
        0
    } else {
        rng.gen_range(0..=hi)
    }
}

/// Generates the `index`-th scenario of `cfg`.
pub fn generate_one(cfg: &GenConfig, index: usize) -> Result<ScenarioLog, GenError> {
    cfg.validate()?;
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((index as u64) | (attempt << 40));
        if let Some(log) = try_generate(cfg, &mut rng) {
            return Ok(log);
        }
    }
    Err(GenError::Exhausted {
        index,
        attempts: MAX_RETRIES,
    })
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<ScenarioLog>, GenError> {
    cfg.validate()?;
    (0..cfg.n_scenarios).into_par_iter().map(|i| generate_one(cfg, i)).collect()
}

/// Expert and scripted-car pose on a road.
fn vehicle_pose(world: &World, v: &Vehicle) -> Pose {
    let base = world.roads[v.road].path.pose_at(v.s);
    let p = base.compose(&Pose::new(0.0, v.lateral, 0.0));
    match v.yaw {
        Some(yaw) => Pose::new(p.x, p.y, yaw),
        None => p,
    }
}

fn try_generate(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Option<ScenarioLog> {
    let dt = cfg.dt;
    let horizon = cfg.frames_per_scenario as f64 * dt;
    let layout = choose_layout(&cfg.layouts, rng);
    let sdv_v_des = rng.gen_range(8.0..11.0);
    let s_start = 60.0;
    let path_len = s_start + horizon * 12.0 + 150.0;
    let (world, xi) = build_world(layout, cfg, rng, path_len);
    let sdv_extent = Extent { length: 4.6, width: 2.0 };

    let mut next_id = 1u32;
    let mut vehicles = Vec::new();
    let v0 = rng.gen_range(0.6..1.0) * sdv_v_des;
    vehicles.push(Vehicle {
        id: 0,
        road: 0,
        s: s_start,
        v: v0,
        a: 0.0,
        extent: sdv_extent,
        idm: Idm {
            v_des: sdv_v_des,
            a_max: 1.2,
            b: 2.0,
            s0: 3.0,
            headway: 1.5,
        },
        committed: false,
        lateral: 0.0,
        yaw: None,
    });
    let d = cfg.agent_density;
    // Leaders in the SDV lane.
    let mut s = s_start;
    for _ in 0..density_count(rng, 2, d) {
        s += rng.gen_range(20.0..45.0);
        let v_des = rng.gen_range(5.0..11.0);
        let idm = car_idm(rng, v_des);
        vehicles.push(Vehicle {
            id: next_id,
            road: 0,
            s,
            v: v0.min(v_des),
            a: 0.0,
            extent: car_extent(rng),
            idm,
            committed: false,
            lateral: 0.0,
            yaw: None,
        });
        next_id += 1;
    }
    // A follower behind the SDV.
    if rng.gen_bool((0.7 * d).clamp(0.0, 1.0)) {
        let v_des = rng.gen_range(sdv_v_des..12.0);
        let idm = car_idm(rng, v_des);
        vehicles.push(Vehicle {
            id: next_id,
            road: 0,
            s: s_start - rng.gen_range(14.0..25.0),
            v: v0,
            a: 0.0,
            extent: car_extent(rng),
            idm,
            committed: false,
            lateral: 0.0,
            yaw: None,
        });
        next_id += 1;
    }
    // Oncoming traffic.
    let on_len = world.roads[1].path.length();
    let mut s = on_len - s_start - rng.gen_range(10.0..60.0);
    for _ in 0..density_count(rng, 4, d) {
        let v_des = rng.gen_range(6.0..11.0);
        let idm = car_idm(rng, v_des);
        vehicles.push(Vehicle {
            id: next_id,
            road: 1,
            s,
            v: v_des * 0.8,
            a: 0.0,
            extent: car_extent(rng),
            idm,
            committed: false,
            lateral: 0.0,
            yaw: None,
        });
        next_id += 1;
        s -= rng.gen_range(25.0..60.0);
        if s < 10.0 {
            break;
        }
    }
    let mut pedestrians = Vec::new();
    if layout == Layout::Intersection {
        for road in 2..4 {
            let mut s = world.roads[road].stop.as_ref().unwrap().s - rng.gen_range(5.0..20.0);
            for _ in 0..density_count(rng, 3, d) {
                let v_des = rng.gen_range(7.0..11.0);
                let idm = car_idm(rng, v_des);
                vehicles.push(Vehicle {
                    id: next_id,
                    road,
                    s,
                    v: rng.gen_range(0.0..v_des),
                    a: 0.0,
                    extent: car_extent(rng),
                    idm,
                    committed: false,
                    lateral: 0.0,
                    yaw: None,
                });
                next_id += 1;
                s -= rng.gen_range(15.0..35.0);
                if s < 5.0 {
                    break;
                }
            }
        }
        let cycle = world.cycle.unwrap();
        // Pedestrians cross the main road while the cross direction has green.
        let global = world.roads[0].path.pose_at(0.0);
        for _ in 0..density_count(rng, 3, d) {
            let k = rng.gen_range(0..2);
            let x = if k == 0 { xi - LANE_WIDTH - 2.5 } else { xi + LANE_WIDTH + 2.5 };
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y0 = LANE_WIDTH / 2.0 - dir * (LANE_WIDTH + 2.0);
            let speed = rng.gen_range(1.1..1.5);
            let distance = 2.0 * (LANE_WIDTH + 2.0);
            // Start shortly after a cross-green onset so the walk ends before it expires.
            let period = cycle.period();
            let cross_green_start = (period / 2.0 - cycle.offset).rem_euclid(period);
            let n_cycles = (horizon / period).ceil() as i64 + 1;
            let c = rng.gen_range(0..n_cycles) as f64;
            let t_start = cross_green_start + c * period - period + rng.gen_range(1.0..2.0);
            if distance / speed + 1.0 > cfg.light_phases.green {
                continue;
            }
            let start = global.transform_point([x + rng.gen_range(-0.5..0.5), y0]);
            pedestrians.push(Pedestrian {
                id: next_id,
                start,
                heading: global.yaw + dir * FRAC_PI_2,
                speed,
                t_start,
                distance,
            });
            next_id += 1;
        }
    }

    let mut frames = Vec::with_capacity(cfg.frames_per_scenario);
    for k in 0..cfg.frames_per_scenario {
        let time = k as f64 * dt;
        let sdv_pose = vehicle_pose(&world, &vehicles[0]);
        let mut agents = Vec::new();
        for v in vehicles.iter().skip(1) {
            let len = world.roads[v.road].path.length();
            if v.s < 0.0 || v.s > len {
                continue;
            }
            agents.push(AgentState {
                id: v.id,
                pose: vehicle_pose(&world, v),
                extent: v.extent,
                kind: AgentKind::Vehicle,
            });
        }
        for p in &pedestrians {
            let walked = (time - p.t_start) * p.speed;
            if walked < 0.0 || walked > p.distance {
                continue;
            }
            agents.push(AgentState {
                id: p.id,
                pose: Pose::new(p.start[0] + walked * p.heading.cos(), p.start[1] + walked * p.heading.sin(), p.heading),
                extent: Extent { length: 0.6, width: 0.6 },
                kind: AgentKind::Pedestrian,
            });
        }
        let mut lights = BTreeMap::new();
        if let Some(cycle) = world.cycle {
            for &(id, group) in &world.lane_groups {
                lights.insert(id, cycle.state(group, time));
            }
        }
        let sdv_box = OrientedBox::new(sdv_pose, sdv_extent);
        if agents.iter().any(|a| boxes_intersect(&sdv_box, &OrientedBox::new(a.pose, a.extent))) {
            return None;
        }
        frames.push(Frame {
            sdv_pose,
            agents,
            traffic_light_states: lights,
        });
        advance(&world, &mut vehicles, &pedestrians, time, dt);
    }
    let log = ScenarioLog {
        dt,
        sdv_extent,
        map: world.map,
        frames,
    };
    debug_assert!(log.validate().is_ok());
    Some(log)
}

fn lead_of(world: &World, vehicles: &[Vehicle], i: usize, time: f64) -> (Option<(f64, f64)>, bool) {
    let me = &vehicles[i];
    let mut best: Option<(f64, f64)> = None;
    for (j, o) in vehicles.iter().enumerate() {
        if j == i || o.road != me.road || o.s <= me.s {
            continue;
        }
        let gap = o.s - me.s - (o.extent.length + me.extent.length) / 2.0;
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, o.v));
        }
    }
    let mut committed = me.committed;
    if let (Some(stop), Some(cycle)) = (&world.roads[me.road].stop, world.cycle) {
        let state = cycle.state(stop.group, time);
        let dist = stop.s - (me.s + me.extent.length / 2.0);
        if state == LightState::Green {
            committed = false;
        } else if dist > -0.5 && !committed {
            let need = if dist > 0.1 { me.v * me.v / (2.0 * dist) } else { f64::INFINITY };
            if need > STOP_DECEL && me.v > 0.5 {
                committed = true;
            } else {
                let gap = dist.max(0.05);
                if best.map_or(true, |(g, _)| gap < g) {
                    best = Some((gap, 0.0));
                }
            }
        }
    }
    (best, committed)
}

fn advance(world: &World, vehicles: &mut [Vehicle], _peds: &[Pedestrian], time: f64, dt: f64) {
    let plans: Vec<(f64, bool)> = (0..vehicles.len())
        .map(|i| {
            let (lead, committed) = lead_of(world, vehicles, i, time);
            let v = &vehicles[i];
            let want = v.idm.accel(v.v, lead).clamp(-DECEL_LIMIT, v.idm.a_max);
            let a = want.clamp(v.a - JERK_LIMIT * dt, v.a + JERK_LIMIT * dt);
            (a, committed)
        })
        .collect();
    for (i, (a, committed)) in plans.into_iter().enumerate() {
        let v = &mut vehicles[i];
        v.committed = committed;
        let mut a = a;
        if v.v + a * dt < 0.0 {
            a = -v.v / dt;
        }
        let v_next = v.v + a * dt;
        let ds = (v.v + v_next) / 2.0 * dt;
        v.a = a;
        v.v = v_next;
        if i == 0 {
            pure_pursuit_step(world, v, ds);
        } else {
            v.s += ds;
        }
    }
}

/// Unicycle step for the expert steering toward a point `LOOKAHEAD` ahead on its path.
fn pure_pursuit_step(world: &World, v: &mut Vehicle, ds: f64) {
    let path = &world.roads[v.road].path;
    let pose = vehicle_pose(world, v);
    let target = path.pose_at(v.s + LOOKAHEAD);
    let local = pose.inverse_transform_point([target.x, target.y]);
    let l2 = local[0] * local[0] + local[1] * local[1];
    let curvature = 2.0 * local[1] / l2.max(1e-6);
    let yaw = pose.yaw + curvature * ds / 2.0;
    let x = pose.x + ds * yaw.cos();
    let y = pose.y + ds * yaw.sin();
    let yaw = pose.yaw + curvature * ds;
    let (s, lat) = path.project_near([x, y], v.s);
    v.s = s;
    v.lateral = lat;
    v.yaw = Some(crate::real::wrap_angle(yaw));
}

impl Path {
    /// Projection restricted to a window around the arc length `hint`.
    pub fn project_near(&self, p: [f64; 2], hint: f64) -> (f64, f64) {
        let lo = self.segment(hint - 10.0);
        let hi = (self.segment(hint + 10.0) + 2).min(self.pts.len());
        let sub = Path {
            pts: self.pts[lo..hi].to_vec(),
            cum: self.cum[lo..hi].to_vec(),
        };
        sub.project(p)
    }
}
