//! Scenario logs, their line-delimited JSON format, and vectorization into
//! the padded element/point/feature observation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se2::Pose;

pub const SCHEMA_VERSION: &str = "v1";
pub const FOV_RADIUS: f64 = 35.0;
pub const FEATURE_DIM: usize = 16;
pub const HISTORY_POINTS: usize = 4;
pub const LANE_POINTS: usize = 20;
pub const MAX_AGENTS: usize = 30;
pub const MAX_LANES: usize = 30;
pub const MAX_CROSSWALKS: usize = 20;
pub const MAX_CROSSWALK_POINTS: usize = 20;

/// Offsets into a point's feature row.
pub mod feat {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const YAW: usize = 2;
    pub const TIME: usize = 3;
    pub const LIGHT: usize = 4;
    pub const KIND: usize = 8;
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {path}: {message}")]
    Parse {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: {path}: {message}")]
    Invalid {
        line: usize,
        path: String,
        message: String,
    },
    #[error("frame index {t} out of range for {frames} frames")]
    FrameOutOfRange { t: usize, frames: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightState {
    pub fn one_hot_index(self) -> usize {
        match self {
            LightState::Red => 0,
            LightState::Yellow => 1,
            LightState::Green => 2,
            LightState::Unknown => 3,
        }
    }
}

/// Element type tag; the discriminant is the kind one-hot index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Sdv = 0,
    Vehicle = 1,
    Pedestrian = 2,
    Cyclist = 3,
    LaneMid = 4,
    LaneLeft = 5,
    LaneRight = 6,
    Crosswalk = 7,
}

pub const NUM_KINDS: usize = 8;

impl From<AgentKind> for ElementKind {
    fn from(k: AgentKind) -> Self {
        match k {
            AgentKind::Vehicle => ElementKind::Vehicle,
            AgentKind::Pedestrian => ElementKind::Pedestrian,
            AgentKind::Cyclist => ElementKind::Cyclist,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub length: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u32,
    pub mid: Vec<[f64; 2]>,
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    /// Whether a signal controls this lane; its state is looked up per frame.
    #[serde(default)]
    pub traffic_light: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crosswalk {
    pub id: u32,
    /// Closed ring: the last vertex repeats the first.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapData {
    pub lanes: Vec<Lane>,
    pub crosswalks: Vec<Crosswalk>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub pose: Pose,
    pub extent: Extent,
    pub kind: AgentKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub sdv_pose: Pose,
    pub agents: Vec<AgentState>,
    /// Lane id to signal state.
    #[serde(default)]
    pub traffic_light_states: BTreeMap<u32, LightState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioLog {
    pub dt: f64,
    pub sdv_extent: Extent,
    pub map: MapData,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    dt: f64,
    sdv_extent: Extent,
    frame_count: usize,
    map: MapData,
}

fn invalid(line: usize, path: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        line,
        path: path.into(),
        message: message.into(),
    }
}

fn check_extent(line: usize, path: &str, e: &Extent) -> Result<(), SceneError> {
    if !(e.length > 0.0 && e.length.is_finite()) {
        return Err(invalid(line, format!("{path}.length"), format!("must be positive, got {}", e.length)));
    }
    if !(e.width > 0.0 && e.width.is_finite()) {
        return Err(invalid(line, format!("{path}.width"), format!("must be positive, got {}", e.width)));
    }
    Ok(())
}

fn check_polyline(line: usize, path: &str, pts: &[[f64; 2]]) -> Result<(), SceneError> {
    if pts.len() < 2 {
        return Err(invalid(line, path, "polyline needs at least 2 points"));
    }
    Ok(())
}

impl ScenarioLog {
    pub fn frame(&self, t: usize) -> Result<&Frame, SceneError> {
        self.frames.get(t).ok_or(SceneError::FrameOutOfRange {
            t,
            frames: self.frames.len(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.frames.len().saturating_sub(1)) as f64
    }

    pub fn expert_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.sdv_pose).collect()
    }

    pub fn lane(&self, id: u32) -> Option<&Lane> {
        self.map.lanes.iter().find(|l| l.id == id)
    }

    /// Checks every invariant, naming the offending line and field.
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(1, "dt", format!("must be positive, got {}", self.dt)));
        }
        check_extent(1, "sdv_extent", &self.sdv_extent)?;
        if self.frames.len() < 2 {
            return Err(invalid(1, "frame_count", "at least 2 frames required"));
        }
        let mut ids = BTreeSet::new();
        for (i, lane) in self.map.lanes.iter().enumerate() {
            if !ids.insert(lane.id) {
                return Err(invalid(1, format!("map.lanes[{i}].id"), format!("duplicate lane id {}", lane.id)));
            }
            check_polyline(1, &format!("map.lanes[{i}].mid"), &lane.mid)?;
            check_polyline(1, &format!("map.lanes[{i}].left"), &lane.left)?;
            check_polyline(1, &format!("map.lanes[{i}].right"), &lane.right)?;
        }
        for (i, cw) in self.map.crosswalks.iter().enumerate() {
            let p = &cw.polygon;
            if p.len() < 4 || p.first() != p.last() {
                return Err(invalid(
                    1,
                    format!("map.crosswalks[{i}].polygon"),
                    "polygon must be closed (last vertex repeats the first) with at least 3 corners",
                ));
            }
        }
        for (t, frame) in self.frames.iter().enumerate() {
            let line = t + 2;
            let mut seen = BTreeSet::new();
            for (j, a) in frame.agents.iter().enumerate() {
                if !seen.insert(a.id) {
                    return Err(invalid(line, format!("agents[{j}].id"), format!("duplicate agent id {}", a.id)));
                }
                check_extent(line, &format!("agents[{j}].extent"), &a.extent)?;
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SceneError> {
        let header = Header {
            schema: SCHEMA_VERSION.to_string(),
            dt: self.dt,
            sdv_extent: self.sdv_extent,
            frame_count: self.frames.len(),
            map: self.map.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for f in &self.frames {
            serde_json::to_writer(&mut w, f).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self, SceneError> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => parse_line(1, &line?)?,
            None => return Err(invalid(1, "schema", "empty file")),
        };
        if header.schema != SCHEMA_VERSION {
            return Err(invalid(1, "schema", format!("unsupported schema {:?}", header.schema)));
        }
        let mut frames = Vec::with_capacity(header.frame_count);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(parse_line::<Frame>(i + 1, &line)?);
        }
        if frames.len() != header.frame_count {
            return Err(invalid(
                1,
                "frame_count",
                format!("header declares {} frames, file has {}", header.frame_count, frames.len()),
            ));
        }
        let log = ScenarioLog {
            dt: header.dt,
            sdv_extent: header.sdv_extent,
            map: header.map,
            frames,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::read_jsonl(File::open(path)?)
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(line: usize, text: &str) -> Result<T, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| SceneError::Parse {
        line,
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn save_scenario(log: &ScenarioLog, path: &Path) -> Result<(), SceneError> {
    log.save(path)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioLog, SceneError> {
    ScenarioLog::load(path)
}

/// Distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

pub fn polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [only] => ((p[0] - only[0]).powi(2) + (p[1] - only[1]).powi(2)).sqrt(),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Resamples a polyline to `n` points equally spaced in arc length, each
/// with the heading of the segment it lies on.
pub fn resample_polyline(line: &[[f64; 2]], n: usize) -> Vec<Pose> {
    let mut cum = vec![0.0];
    for w in line.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let heading = |i: usize| {
        let (a, b) = (line[i], line[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    };
    let mut seg = 0;
    (0..n)
        .map(|k| {
            let s = if n > 1 { total * k as f64 / (n - 1) as f64 } else { 0.0 };
            while seg + 2 < line.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let u = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (line[seg], line[seg + 1]);
            Pose::new(a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), heading(seg))
        })
        .collect()
}

/// Crosswalk corner poses (closing vertex dropped), each facing the next corner.
pub fn crosswalk_points(cw: &Crosswalk) -> Vec<Pose> {
    let ring = &cw.polygon[..cw.polygon.len() - 1];
    let n = ring.len().min(MAX_CROSSWALK_POINTS);
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
            Pose::new(a[0], a[1], (b[1] - a[1]).atan2(b[0] - a[0]))
        })
        .collect()
}

/// Element set selected by a field-of-view query, nearest first per group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub agents: Vec<u32>,
    pub lanes: Vec<u32>,
    pub crosswalks: Vec<u32>,
}

fn select_nearest(mut cands: Vec<(f64, u32)>, radius: f64, budget: usize) -> Vec<u32> {
    cands.retain(|&(d, _)| d <= radius);
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.into_iter().take(budget).map(|(_, id)| id).collect()
}

/// Selects elements within `radius` of `pose` at frame `t`.
pub fn query_fov(log: &ScenarioLog, t: usize, pose: &Pose, radius: f64) -> Result<Registry, SceneError> {
    let frame = log.frame(t)?;
    let c = [pose.x, pose.y];
    let agents = frame
        .agents
        .iter()
        .map(|a| (polyline_distance(c, &[[a.pose.x, a.pose.y]]), a.id))
        .collect();
    let lanes = log
        .map
        .lanes
        .iter()
        .map(|l| {
            let d = polyline_distance(c, &l.mid)
                .min(polyline_distance(c, &l.left))
                .min(polyline_distance(c, &l.right));
            (d, l.id)
        })
        .collect();
    let crosswalks = log
        .map
        .crosswalks
        .iter()
        .map(|cw| (polyline_distance(c, &cw.polygon), cw.id))
        .collect();
    Ok(Registry {
        agents: select_nearest(agents, radius, MAX_AGENTS),
        lanes: select_nearest(lanes, radius, MAX_LANES),
        crosswalks: select_nearest(crosswalks, radius, MAX_CROSSWALKS),
    })
}

/// One element slot of an [`Observation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub kind: ElementKind,
    pub id: Option<u32>,
    pub available: bool,
    pub mask: Vec<bool>,
    pub features: Vec<[f64; FEATURE_DIM]>,
}

impl Slot {
    fn empty(kind: ElementKind, points: usize) -> Self {
        Self {
            kind,
            id: None,
            available: false,
            mask: vec![false; points],
            features: vec![[0.0; FEATURE_DIM]; points],
        }
    }
}

/// Padded and masked vectorized state relative to the SDV.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub slots: Vec<Slot>,
}

/// Slot group sizes: (kind, slots, points per slot).
pub const GROUPS: [(ElementKind, usize, usize); 6] = [
    (ElementKind::Sdv, 1, HISTORY_POINTS),
    (ElementKind::Vehicle, MAX_AGENTS, HISTORY_POINTS),
    (ElementKind::LaneMid, MAX_LANES, LANE_POINTS),
    (ElementKind::LaneLeft, MAX_LANES, LANE_POINTS),
    (ElementKind::LaneRight, MAX_LANES, LANE_POINTS),
    (ElementKind::Crosswalk, MAX_CROSSWALKS, MAX_CROSSWALK_POINTS),
];

/// A world-frame point of an element with its constant features.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldPoint {
    pub pose: Pose,
    pub point_index: usize,
    pub time_offset: f64,
    pub light: Option<LightState>,
}

/// An element expressed in world coordinates, ready to be made relative.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldElement {
    pub kind: ElementKind,
    pub id: u32,
    /// Group-relative slot order.
    pub slot: usize,
    pub points: Vec<WorldPoint>,
}

/// Logged agents of the registry at frame `t`, in slot order.
///
/// Points are the poses at `t, t-1, t-2, t-3`; history before the log start
/// or frames where the agent is absent are omitted.
pub fn agent_elements(log: &ScenarioLog, reg: &Registry, t: usize) -> Result<Vec<WorldElement>, SceneError> {
    let frame = log.frame(t)?;
    let mut out = Vec::new();
    for (slot, &id) in reg.agents.iter().enumerate() {
        let Some(kind) = frame.agents.iter().find(|a| a.id == id).map(|a| a.kind) else {
            // Agent left the log; its slot stays empty.
            continue;
        };
        let mut points = Vec::new();
        for k in 0..HISTORY_POINTS.min(t + 1) {
            if let Some(a) = log.frames[t - k].agents.iter().find(|a| a.id == id) {
                points.push(WorldPoint {
                    pose: a.pose,
                    point_index: k,
                    time_offset: -(k as f64) * log.dt,
                    light: None,
                });
            }
        }
        out.push(WorldElement {
            kind: kind.into(),
            id,
            slot,
            points,
        });
    }
    Ok(out)
}

/// Lanes (all mids, then lefts, then rights) and crosswalks of the registry,
/// without signal states.
pub fn static_elements(log: &ScenarioLog, reg: &Registry) -> Vec<WorldElement> {
    let lanes: Vec<(usize, &Lane)> = reg
        .lanes
        .iter()
        .enumerate()
        .filter_map(|(slot, &id)| log.lane(id).map(|l| (slot, l)))
        .collect();
    let mut out = Vec::new();
    for kind in [ElementKind::LaneMid, ElementKind::LaneLeft, ElementKind::LaneRight] {
        for &(slot, lane) in &lanes {
            let line = match kind {
                ElementKind::LaneMid => &lane.mid,
                ElementKind::LaneLeft => &lane.left,
                _ => &lane.right,
            };
            let points = resample_polyline(line, LANE_POINTS)
                .into_iter()
                .enumerate()
                .map(|(i, pose)| WorldPoint {
                    pose,
                    point_index: i,
                    time_offset: 0.0,
                    light: None,
                })
                .collect();
            out.push(WorldElement {
                kind,
                id: lane.id,
                slot,
                points,
            });
        }
    }
    for (slot, &id) in reg.crosswalks.iter().enumerate() {
        let Some(cw) = log.map.crosswalks.iter().find(|c| c.id == id) else { continue };
        let points = crosswalk_points(cw)
            .into_iter()
            .enumerate()
            .map(|(i, pose)| WorldPoint {
                pose,
                point_index: i,
                time_offset: 0.0,
                light: None,
            })
            .collect();
        out.push(WorldElement {
            kind: ElementKind::Crosswalk,
            id,
            slot,
            points,
        });
    }
    out
}

/// Signal state written onto the mid points of controlled lanes at frame `t`.
pub fn apply_lights(log: &ScenarioLog, t: usize, elements: &mut [WorldElement]) -> Result<(), SceneError> {
    let frame = log.frame(t)?;
    for el in elements.iter_mut().filter(|e| e.kind == ElementKind::LaneMid) {
        let light = log
            .lane(el.id)
            .filter(|l| l.traffic_light)
            .map(|_| frame.traffic_light_states.get(&el.id).copied().unwrap_or(LightState::Unknown));
        for p in &mut el.points {
            p.light = light;
        }
    }
    Ok(())
}

/// World-frame view of the registered elements at frame `t`, excluding the
/// SDV, in observation group order.
pub fn world_elements(log: &ScenarioLog, reg: &Registry, t: usize) -> Result<Vec<WorldElement>, SceneError> {
    let mut out = agent_elements(log, reg, t)?;
    let mut stat = static_elements(log, reg);
    apply_lights(log, t, &mut stat)?;
    out.extend(stat);
    Ok(out)
}

/// Writes the constant (non-geometric) features of a point.
pub fn point_tail(kind: ElementKind, time_offset: f64, light: Option<LightState>) -> [f64; FEATURE_DIM - 3] {
    let mut tail = [0.0; FEATURE_DIM - 3];
    tail[feat::TIME - 3] = time_offset;
    if let Some(l) = light {
        tail[feat::LIGHT - 3 + l.one_hot_index()] = 1.0;
    }
    tail[feat::KIND - 3 + kind as usize] = 1.0;
    tail
}

fn group_offset(kind: ElementKind) -> usize {
    let g = match kind {
        ElementKind::Sdv => 0,
        ElementKind::Vehicle | ElementKind::Pedestrian | ElementKind::Cyclist => 1,
        ElementKind::LaneMid => 2,
        ElementKind::LaneLeft => 3,
        ElementKind::LaneRight => 4,
        ElementKind::Crosswalk => 5,
    };
    GROUPS[..g].iter().map(|&(_, n, _)| n).sum()
}

impl Observation {
    pub fn empty() -> Self {
        let mut slots = Vec::new();
        for &(kind, n, pts) in &GROUPS {
            for _ in 0..n {
                slots.push(Slot::empty(kind, pts));
            }
        }
        Self { slots }
    }

    /// Builds the observation at frame `t` for an SDV at `sdv_pose`.
    ///
    /// `sdv_history[k]` is the SDV world pose `k + 1` frames ago, if known.
    pub fn build(
        log: &ScenarioLog,
        reg: &Registry,
        t: usize,
        sdv_pose: &Pose,
        sdv_history: &[Option<Pose>; HISTORY_POINTS - 1],
    ) -> Result<Self, SceneError> {
        let mut obs = Self::empty();
        let sdv = &mut obs.slots[0];
        sdv.available = true;
        let mut sdv_points = vec![(0, Some(*sdv_pose))];
        sdv_points.extend(sdv_history.iter().enumerate().map(|(k, p)| (k + 1, *p)));
        for (k, p) in sdv_points {
            if let Some(p) = p {
                let rel = sdv_pose.relative(&p);
                sdv.mask[k] = true;
                sdv.features[k] = feature_row(&rel, &point_tail(ElementKind::Sdv, -(k as f64) * log.dt, None));
            }
        }
        for el in world_elements(log, reg, t)? {
            let slot = &mut obs.slots[group_offset(el.kind) + el.slot];
            slot.kind = el.kind;
            slot.id = Some(el.id);
            slot.available = !el.points.is_empty();
            for wp in &el.points {
                let rel = sdv_pose.relative(&wp.pose);
                slot.mask[wp.point_index] = true;
                slot.features[wp.point_index] = feature_row(&rel, &point_tail(el.kind, wp.time_offset, wp.light));
            }
        }
        Ok(obs)
    }

    /// SDV history from the log itself.
    pub fn log_history(log: &ScenarioLog, t: usize) -> [Option<Pose>; HISTORY_POINTS - 1] {
        let mut h = [None; HISTORY_POINTS - 1];
        for (k, slot) in h.iter_mut().enumerate() {
            if k < t {
                *slot = Some(log.frames[t - k - 1].sdv_pose);
            }
        }
        h
    }

    pub fn sdv(&self) -> &Slot {
        &self.slots[0]
    }

    pub fn group(&self, kind: ElementKind) -> &[Slot] {
        let start = group_offset(kind);
        let n = GROUPS
            .iter()
            .find(|g| group_offset(g.0) == start)
            .map(|g| g.1)
            .unwrap_or(0);
        &self.slots[start..start + n]
    }

    pub fn available_points(&self) -> usize {
        self.slots.iter().flat_map(|s| &s.mask).filter(|&&m| m).count()
    }

    pub fn max_abs_diff(&self, other: &Observation) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.slots.iter().zip(&other.slots) {
            if a.mask != b.mask || a.kind != b.kind {
                return f64::INFINITY;
            }
            for (fa, fb) in a.features.iter().zip(&b.features) {
                for c in 0..FEATURE_DIM {
                    let d = if c == feat::YAW {
                        crate::se2::angle_diff(fa[c], fb[c]).abs()
                    } else {
                        (fa[c] - fb[c]).abs()
                    };
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

fn feature_row(rel: &Pose, tail: &[f64; FEATURE_DIM - 3]) -> [f64; FEATURE_DIM] {
    let mut row = [0.0; FEATURE_DIM];
    row[feat::X] = rel.x;
    row[feat::Y] = rel.y;
    row[feat::YAW] = rel.yaw;
    row[3..].copy_from_slice(tail);
    row
}

/// FOV query at `t0` around `sdv_pose`, then the observation with the log's SDV history.
pub fn vectorize(log: &ScenarioLog, t0: usize, sdv_pose: &Pose) -> Result<Observation, SceneError> {
    let reg = query_fov(log, t0, sdv_pose, FOV_RADIUS)?;
    Observation::build(log, &reg, t0, sdv_pose, &Observation::log_history(log, t0))
}
