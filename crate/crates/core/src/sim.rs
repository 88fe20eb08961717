//! Differentiable log-replay simulator.
//!
//! The SDV is advanced by a kinematic model; every other element keeps its
//! world pose (static map) or replays its logged world pose (agents), and the
//! observation re-expresses them relative to the new SDV pose. On the tape
//! the state is a `4 x 3` block of world poses `p_t, p_{t-1}, p_{t-2}, p_{t-3}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{CustomOp, GradError, Tape, Tensor, Var};
use crate::real::Real;
use crate::scene::{
    agent_elements, apply_lights, point_tail, query_fov, static_elements, ElementKind, Observation,
    Registry, ScenarioLog, SceneError, WorldElement, FEATURE_DIM, FOV_RADIUS, HISTORY_POINTS,
};
use crate::se2::{compose_jacobians, relative_jacobians, Pose};

pub const TAIL_DIM: usize = FEATURE_DIM - 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon overflow: frame {requested} requested, log has {frames} frames")]
    Horizon { requested: usize, frames: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kinematics {
    /// The action is a raw pose increment in the SDV frame.
    #[default]
    Unconstrained,
    /// Only the forward distance (`x`) and heading change (`yaw`) are used,
    /// applied along a circular arc.
    Unicycle,
}

/// `p + a`: the action is applied in the current SDV frame.
pub fn kinematics_step(p: &Pose, a: &Pose) -> Pose {
    p.compose(a)
}

pub fn unicycle_increment<T: Real>(a: [T; 3]) -> [T; 3] {
    let half = a[2] / T::lit(2.0);
    [a[0] * half.cos(), a[0] * half.sin(), a[2]]
}

/// Everything that stays fixed for one rollout.
#[derive(Clone, Debug)]
pub struct SimContext<'a> {
    pub log: &'a ScenarioLog,
    pub t0: usize,
    pub horizon: usize,
    pub registry: Registry,
    static_elements: Vec<WorldElement>,
}

/// Value-level simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub t: usize,
    /// `p_t, p_{t-1}, p_{t-2}, p_{t-3}` in world coordinates.
    pub poses: [Pose; HISTORY_POINTS],
    pub known: [bool; HISTORY_POINTS],
}

impl SimState {
    pub fn sdv_pose(&self) -> Pose {
        self.poses[0]
    }

    pub fn history(&self) -> [Option<Pose>; HISTORY_POINTS - 1] {
        let mut h = [None; HISTORY_POINTS - 1];
        for k in 1..HISTORY_POINTS {
            if self.known[k] {
                h[k - 1] = Some(self.poses[k]);
            }
        }
        h
    }

    /// Padded observation, re-derived from world data and the SDV poses.
    pub fn observation(&self, ctx: &SimContext) -> Result<Observation, SimError> {
        Ok(Observation::build(ctx.log, &ctx.registry, self.t, &self.sdv_pose(), &self.history())?)
    }

    /// State at frame `t` taken from the log's expert poses.
    pub fn expert(log: &ScenarioLog, t: usize) -> Self {
        let mut poses = [log.frames[t].sdv_pose; HISTORY_POINTS];
        let mut known = [false; HISTORY_POINTS];
        for k in 0..HISTORY_POINTS.min(t + 1) {
            poses[k] = log.frames[t - k].sdv_pose;
            known[k] = true;
        }
        Self { t, poses, known }
    }
}

/// Runs the one-time field-of-view query at `t0` with the expert pose.
pub fn init_rollout(log: &ScenarioLog, t0: usize, horizon: usize) -> Result<(SimContext<'_>, SimState), SimError> {
    let last = t0 + horizon;
    if last >= log.frames.len() {
        return Err(SimError::Horizon {
            requested: last,
            frames: log.frames.len(),
        });
    }
    let registry = query_fov(log, t0, &log.frames[t0].sdv_pose, FOV_RADIUS)?;
    let static_elements = static_elements(log, &registry);
    let ctx = SimContext {
        log,
        t0,
        horizon,
        registry,
        static_elements,
    };
    Ok((ctx, SimState::expert(log, t0)))
}

impl<'a> SimContext<'a> {
    /// Context with an externally chosen registry (evaluation re-queries per frame).
    pub fn with_registry(log: &'a ScenarioLog, t0: usize, horizon: usize, registry: Registry) -> Self {
        let static_elements = static_elements(log, &registry);
        Self {
            log,
            t0,
            horizon,
            registry,
            static_elements,
        }
    }

    fn check_next(&self, t: usize) -> Result<(), SimError> {
        let next = t + 1;
        if next > self.t0 + self.horizon || next >= self.log.frames.len() {
            return Err(SimError::Horizon {
                requested: next,
                frames: self.log.frames.len(),
            });
        }
        Ok(())
    }

    pub fn step(&self, s: &SimState, a: &Pose, kin: Kinematics) -> Result<SimState, SimError> {
        self.check_next(s.t)?;
        let inc = match kin {
            Kinematics::Unconstrained => *a,
            Kinematics::Unicycle => Pose::from_array(unicycle_increment(a.to_array())),
        };
        let mut poses = [s.poses[0]; HISTORY_POINTS];
        let mut known = [true; HISTORY_POINTS];
        poses[0] = kinematics_step(&s.poses[0], &inc);
        for k in 1..HISTORY_POINTS {
            poses[k] = s.poses[k - 1];
            known[k] = s.known[k - 1];
        }
        Ok(SimState { t: s.t + 1, poses, known })
    }

    /// World elements at frame `t`, in observation group order.
    pub fn elements_at(&self, t: usize) -> Result<Vec<WorldElement>, SimError> {
        let mut out = agent_elements(self.log, &self.registry, t)?;
        let mut stat = self.static_elements.clone();
        apply_lights(self.log, t, &mut stat)?;
        out.extend(stat);
        Ok(out)
    }
}

/// Contiguous run of points belonging to one element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElementSpan {
    pub kind: ElementKind,
    pub start: usize,
    pub len: usize,
}

/// Flattened policy input: available points only.
pub struct PolicyInput<T: Real> {
    /// `N x 3` relative `(x, y, yaw)`; differentiable w.r.t. the SDV state.
    pub points: Var,
    /// `N x TAIL_DIM` constant features (time offset, light, kind).
    pub tail: Tensor<T>,
    /// Point order within its element (history step or polyline index).
    pub point_index: Vec<usize>,
    /// Element spans; the SDV element is always first.
    pub elements: Vec<ElementSpan>,
}

impl<T: Real> PolicyInput<T> {
    pub fn num_points(&self) -> usize {
        self.point_index.len()
    }

    /// Constant input from a padded observation.
    pub fn from_observation(tape: &mut Tape<T>, obs: &Observation) -> Result<Self, GradError> {
        let mut pts = Vec::new();
        let mut tail = Vec::new();
        let mut point_index = Vec::new();
        let mut elements = Vec::new();
        for slot in obs.slots.iter().filter(|s| s.available) {
            let start = point_index.len();
            for (i, (&m, f)) in slot.mask.iter().zip(&slot.features).enumerate() {
                if !m {
                    continue;
                }
                pts.extend(f[..3].iter().map(|&v| T::lit(v)));
                tail.extend(f[3..].iter().map(|&v| T::lit(v)));
                point_index.push(i);
            }
            let len = point_index.len() - start;
            if len > 0 {
                elements.push(ElementSpan {
                    kind: slot.kind,
                    start,
                    len,
                });
            }
        }
        let n = point_index.len();
        let points = tape.constant(Tensor::from_vec(n, 3, pts)?);
        Ok(Self {
            points,
            tail: Tensor::from_vec(n, TAIL_DIM, tail)?,
            point_index,
            elements,
        })
    }
}

/// Tape handle to the SDV state block.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub var: Var,
    pub t: usize,
    pub known: [bool; HISTORY_POINTS],
}

pub fn state_tensor<T: Real>(s: &SimState) -> Tensor<T> {
    let data = s
        .poses
        .iter()
        .flat_map(|p| [p.x, p.y, p.yaw])
        .map(T::lit)
        .collect();
    Tensor::from_vec(HISTORY_POINTS, 3, data).expect("state shape")
}

pub fn state_from_tensor<T: Real>(t: usize, known: [bool; HISTORY_POINTS], v: &Tensor<T>) -> SimState {
    let d = v.data();
    let mut poses = [Pose::identity(); HISTORY_POINTS];
    for (k, p) in poses.iter_mut().enumerate() {
        *p = Pose::new(d[3 * k].to_f64_lossy(), d[3 * k + 1].to_f64_lossy(), d[3 * k + 2].to_f64_lossy());
    }
    SimState { t, poses, known }
}

/// Row-wise `relative(anchor, pose_i)` for an anchor `1 x 3` and poses `N x 3`.
struct RelativeRows;

fn pose_row<T: Real>(d: &[T], r: usize) -> Pose<T> {
    Pose {
        x: d[3 * r],
        y: d[3 * r + 1],
        yaw: d[3 * r + 2],
    }
}

impl<T: Real> CustomOp<T> for RelativeRows {
    fn name(&self) -> &'static str {
        "se2_relative_rows"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GradError> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != (1, 3) || b.cols() != 3 {
            return Err(GradError::ShapeMismatch {
                op: "se2_relative_rows",
                detail: format!("anchor {:?}, poses {:?}", a.shape(), b.shape()),
            });
        }
        let anchor = pose_row(a.data(), 0);
        let mut out = Vec::with_capacity(b.len());
        for r in 0..b.rows() {
            let p = anchor.relative(&pose_row(b.data(), r));
            out.extend([p.x, p.y, p.yaw]);
        }
        Tensor::from_vec(b.rows(), 3, out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let anchor = pose_row(a.data(), 0);
        let mut ga = vec![T::zero(); 3];
        let mut gb = vec![T::zero(); b.len()];
        for r in 0..b.rows() {
            let (ja, jb) = relative_jacobians(&anchor, &pose_row(b.data(), r));
            for i in 0..3 {
                let gi = g[3 * r + i];
                for j in 0..3 {
                    ga[j] += gi * ja[i][j];
                    gb[3 * r + j] += gi * jb[i][j];
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

/// `compose(a, b)` for two `1 x 3` poses.
struct Compose;

impl<T: Real> CustomOp<T> for Compose {
    fn name(&self) -> &'static str {
        "se2_compose"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GradError> {
        if inputs[0].shape() != (1, 3) || inputs[1].shape() != (1, 3) {
            return Err(GradError::ShapeMismatch {
                op: "se2_compose",
                detail: format!("{:?} and {:?}", inputs[0].shape(), inputs[1].shape()),
            });
        }
        let p = pose_row(inputs[0].data(), 0).compose(&pose_row(inputs[1].data(), 0));
        Ok(Tensor::row(&[p.x, p.y, p.yaw]))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (ja, jb) = compose_jacobians(&pose_row(inputs[0].data(), 0), &pose_row(inputs[1].data(), 0));
        let vjp = |j: [[T; 3]; 3]| (0..3).map(|c| (0..3).map(|r| g[r] * j[r][c]).sum()).collect();
        vec![Some(vjp(ja)), Some(vjp(jb))]
    }
}

struct Unicycle;

impl<T: Real> CustomOp<T> for Unicycle {
    fn name(&self) -> &'static str {
        "unicycle_increment"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GradError> {
        let d = inputs[0].data();
        if inputs[0].shape() != (1, 3) {
            return Err(GradError::ShapeMismatch {
                op: "unicycle_increment",
                detail: format!("{:?}", inputs[0].shape()),
            });
        }
        Ok(Tensor::row(&unicycle_increment([d[0], d[1], d[2]])))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = inputs[0].data();
        let two = T::lit(2.0);
        let (s, c) = (d[2] / two).sin_cos();
        let gd = g[0] * c + g[1] * s;
        let gw = -g[0] * d[0] * s / two + g[1] * d[0] * c / two + g[2];
        vec![Some(vec![gd, T::zero(), gw])]
    }
}

pub fn relative_rows<T: Real>(tape: &mut Tape<T>, anchor: Var, poses: Var) -> Result<Var, GradError> {
    tape.custom(&[anchor, poses], Box::new(RelativeRows))
}

pub fn compose<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, GradError> {
    tape.custom(&[a, b], Box::new(Compose))
}

/// `S(s_t, a_t)`: the new state block from the old one and a `1 x 3` action.
pub fn transition<T: Real>(tape: &mut Tape<T>, s: &TapeState, action: Var, kin: Kinematics) -> Result<TapeState, GradError> {
    let inc = match kin {
        Kinematics::Unconstrained => action,
        Kinematics::Unicycle => tape.custom(&[action], Box::new(Unicycle))?,
    };
    let current = tape.slice_rows(s.var, 0, 1)?;
    let next = compose(tape, current, inc)?;
    let kept = tape.slice_rows(s.var, 0, HISTORY_POINTS - 1)?;
    let var = tape.concat_rows(&[next, kept])?;
    let mut known = [true; HISTORY_POINTS];
    known[1..].copy_from_slice(&s.known[..HISTORY_POINTS - 1]);
    Ok(TapeState { var, t: s.t + 1, known })
}

/// Observation of the tape state: every element relative to `p_t`.
pub fn policy_input<T: Real>(tape: &mut Tape<T>, ctx: &SimContext, s: &TapeState) -> Result<PolicyInput<T>, SimError> {
    let elements = ctx.elements_at(s.t)?;
    let hist_rows: Vec<usize> = (0..HISTORY_POINTS).filter(|&k| s.known[k]).collect();
    let mut tail = Vec::new();
    let mut point_index = Vec::new();
    let mut spans = vec![ElementSpan {
        kind: ElementKind::Sdv,
        start: 0,
        len: hist_rows.len(),
    }];
    for &k in &hist_rows {
        tail.extend(point_tail(ElementKind::Sdv, -(k as f64) * ctx.log.dt, None).map(T::lit));
        point_index.push(k);
    }
    let mut world = Vec::new();
    for el in &elements {
        if el.points.is_empty() {
            continue;
        }
        spans.push(ElementSpan {
            kind: el.kind,
            start: point_index.len(),
            len: el.points.len(),
        });
        for wp in &el.points {
            world.extend([wp.pose.x, wp.pose.y, wp.pose.yaw].map(T::lit));
            tail.extend(point_tail(el.kind, wp.time_offset, wp.light).map(T::lit));
            point_index.push(wp.point_index);
        }
    }
    let hist = tape.gather_rows(s.var, &hist_rows)?;
    let all = if world.is_empty() {
        hist
    } else {
        let m = world.len() / 3;
        let w = tape.constant(Tensor::from_vec(m, 3, world)?);
        tape.concat_rows(&[hist, w])?
    };
    let anchor = tape.slice_rows(s.var, 0, 1)?;
    let points = relative_rows(tape, anchor, all)?;
    let n = point_index.len();
    Ok(PolicyInput {
        points,
        tail: Tensor::from_vec(n, TAIL_DIM, tail)?,
        point_index,
        elements: spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{tests::tiny_log, vectorize};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn kinematics_examples() {
        let p = Pose::new(2.0, -1.0, 0.3);
        assert_eq!(kinematics_step(&p, &Pose::identity()), p);
        let q = kinematics_step(&Pose::identity(), &Pose::new(1.0, 0.0, 0.1));
        assert_eq!((q.x, q.y, q.yaw), (1.0, 0.0, 0.1));
        let r = kinematics_step(&Pose::new(0.0, 0.0, FRAC_PI_2), &Pose::new(1.0, 0.0, 0.0));
        assert!(r.x.abs() < 1e-15 && (r.y - 1.0).abs() < 1e-15 && (r.yaw - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn init_matches_vectorize_and_is_repeatable() {
        let log = tiny_log(12);
        let (ctx, s) = init_rollout(&log, 4, 5).unwrap();
        let obs = s.observation(&ctx).unwrap();
        assert_eq!(obs, vectorize(&log, 4, &log.frames[4].sdv_pose).unwrap());
        let (ctx2, s2) = init_rollout(&log, 4, 5).unwrap();
        assert_eq!(ctx2.registry, ctx.registry);
        assert_eq!(s2, s);
        assert!(init_rollout(&log, 4, 8).is_err());
    }

    #[test]
    fn horizon_overflow() {
        let log = tiny_log(6);
        let (ctx, mut s) = init_rollout(&log, 3, 2).unwrap();
        for _ in 0..2 {
            s = ctx.step(&s, &Pose::new(1.0, 0.0, 0.0), Kinematics::Unconstrained).unwrap();
        }
        assert!(matches!(
            ctx.step(&s, &Pose::identity(), Kinematics::Unconstrained),
            Err(SimError::Horizon { .. })
        ));
    }

    #[test]
    fn tape_input_matches_observation_rows() {
        let log = tiny_log(10);
        let (ctx, s) = init_rollout(&log, 5, 3).unwrap();
        let s = ctx.step(&s, &Pose::new(0.8, 0.3, 0.05), Kinematics::Unconstrained).unwrap();
        let obs = s.observation(&ctx).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = PolicyInput::from_observation(&mut tape, &obs).unwrap();
        let var = tape.leaf(state_tensor(&s));
        let ts = TapeState { var, t: s.t, known: s.known };
        let b = policy_input(&mut tape, &ctx, &ts).unwrap();
        assert_eq!(a.elements, b.elements);
        assert_eq!(a.point_index, b.point_index);
        assert_eq!(a.tail, b.tail);
        let (pa, pb) = (tape.value(a.points).data().to_vec(), tape.value(b.points).data().to_vec());
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unicycle_straight_and_turn() {
        let inc = unicycle_increment([2.0f64, 5.0, 0.0]);
        assert_eq!(inc, [2.0, 0.0, 0.0]);
        let inc = unicycle_increment([1.0f64, 0.0, 0.2]);
        assert!((inc[1] - 0.1f64.sin()).abs() < 1e-15);
    }
}
