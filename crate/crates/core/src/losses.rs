//! Per-step cost: L1 imitation, acceleration magnitude and circle-overlap collision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{CustomOp, GradError, Tape, Tensor, Var};
use crate::real::{wrap_angle, Real};
use crate::scene::{AgentKind, AgentState, Extent};
use crate::se2::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid cost weights: {0}")]
    Weights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.8,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LossError::Weights(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(LossError::Weights(format!(
                "alpha {} and beta {} must be non-negative",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

pub fn imitation_l1(expert: &Pose, policy: &Pose) -> f64 {
    (expert.x - policy.x).abs() + (expert.y - policy.y).abs() + wrap_angle(expert.yaw - policy.yaw).abs()
}

pub fn accel_magnitude(prev: &Pose, cur: &Pose, next: &Pose, dt: f64) -> f64 {
    let ax = next.x - 2.0 * cur.x + prev.x;
    let ay = next.y - 2.0 * cur.y + prev.y;
    ax.hypot(ay) / (dt * dt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    /// Longitudinal offset of the center in the body frame.
    pub offset: f64,
    pub radius: f64,
}

pub fn circle_decomposition(extent: Extent) -> [Circle; 3] {
    let l = extent.length;
    let radius = (l / 6.0).hypot(extent.width / 2.0);
    [-l / 3.0, 0.0, l / 3.0].map(|offset| Circle { offset, radius })
}

/// `1 - d / (r1 + r2)` when the circles touch, else 0.
pub fn circle_overlap(d: f64, r1: f64, r2: f64) -> f64 {
    let r = r1 + r2;
    if d <= r {
        1.0 - d / r
    } else {
        0.0
    }
}

fn circle_center<T: Real>(p: &Pose<T>, offset: T) -> [T; 2] {
    [p.x + p.yaw.cos() * offset, p.y + p.yaw.sin() * offset]
}

/// Vehicle-only agents as `(pose, circles)`; pedestrians and cyclists never enter the loss.
pub fn vehicle_circles(agents: &[AgentState]) -> Vec<(Pose, [Circle; 3])> {
    agents
        .iter()
        .filter(|a| a.kind == AgentKind::Vehicle)
        .map(|a| (a.pose, circle_decomposition(a.extent)))
        .collect()
}

/// Per agent: best circle pair `(i, j)` and its overlap.
fn best_pairs<T: Real>(sdv: &Pose<T>, own: &[Circle; 3], others: &[(Pose, [Circle; 3])]) -> Vec<(usize, usize, T)> {
    let own_c: Vec<[T; 2]> = own.iter().map(|c| circle_center(sdv, T::lit(c.offset))).collect();
    others
        .iter()
        .map(|(p, circles)| {
            let mut best = (0, 0, T::zero());
            let mut found = false;
            for (i, ci) in own.iter().enumerate() {
                for (j, cj) in circles.iter().enumerate() {
                    let c = circle_center(p, cj.offset);
                    let d = (own_c[i][0] - T::lit(c[0])).hypot(own_c[i][1] - T::lit(c[1]));
                    let r = T::lit(ci.radius + cj.radius);
                    let o = if d <= r { T::one() - d / r } else { T::zero() };
                    if !found || o > best.2 {
                        best = (i, j, o);
                        found = true;
                    }
                }
            }
            best
        })
        .collect()
}

pub fn collision_cost(sdv: &Pose, sdv_extent: Extent, agents: &[AgentState]) -> f64 {
    let own = circle_decomposition(sdv_extent);
    best_pairs(sdv, &own, &vehicle_circles(agents)).iter().map(|b| b.2).sum()
}

/// `|p_{t+1} - 2 p_t + p_{t-1}| / dt^2` over three `1 x 3` poses.
struct AccelMag {
    inv_dt2: f64,
}

impl<T: Real> CustomOp<T> for AccelMag {
    fn name(&self) -> &'static str {
        "accel_magnitude"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GradError> {
        if inputs.len() != 3 || inputs.iter().any(|t| t.shape() != (1, 3)) {
            return Err(GradError::ShapeMismatch {
                op: "accel_magnitude",
                detail: "expected three 1 x 3 poses".into(),
            });
        }
        let (ax, ay) = second_difference(inputs);
        Ok(Tensor::scalar(ax.hypot(ay) * T::lit(self.inv_dt2)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (ax, ay) = second_difference(inputs);
        let n = ax.hypot(ay);
        let (gx, gy) = if n > T::zero() {
            let s = g[0] * T::lit(self.inv_dt2) / n;
            (ax * s, ay * s)
        } else {
            (T::zero(), T::zero())
        };
        let two = T::lit(2.0);
        vec![
            Some(vec![gx, gy, T::zero()]),
            Some(vec![-two * gx, -two * gy, T::zero()]),
            Some(vec![gx, gy, T::zero()]),
        ]
    }
}

fn second_difference<T: Real>(p: &[&Tensor<T>]) -> (T, T) {
    let (a, b, c) = (p[0].data(), p[1].data(), p[2].data());
    let two = T::lit(2.0);
    (c[0] - two * b[0] + a[0], c[1] - two * b[1] + a[1])
}

/// Sum of per-agent max circle-pair overlaps as a function of the SDV pose.
struct CollisionCost {
    own: [Circle; 3],
    others: Vec<(Pose, [Circle; 3])>,
}

impl<T: Real> CustomOp<T> for CollisionCost {
    fn name(&self) -> &'static str {
        "collision_cost"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GradError> {
        if inputs[0].shape() != (1, 3) {
            return Err(GradError::ShapeMismatch {
                op: "collision_cost",
                detail: format!("{:?}", inputs[0].shape()),
            });
        }
        let d = inputs[0].data();
        let sdv = Pose { x: d[0], y: d[1], yaw: d[2] };
        let total = best_pairs(&sdv, &self.own, &self.others).iter().map(|b| b.2).sum();
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = inputs[0].data();
        let sdv = Pose { x: d[0], y: d[1], yaw: d[2] };
        let mut grad = vec![T::zero(); 3];
        let (s, c) = sdv.yaw.sin_cos();
        for ((i, j, o), (p, circles)) in best_pairs(&sdv, &self.own, &self.others).into_iter().zip(&self.others) {
            if o <= T::zero() {
                continue;
            }
            let off = T::lit(self.own[i].offset);
            let a = circle_center(&sdv, off);
            let b = circle_center(p, circles[j].offset);
            let (dx, dy) = (a[0] - T::lit(b[0]), a[1] - T::lit(b[1]));
            let dist = dx.hypot(dy);
            if dist <= T::zero() {
                continue;
            }
            let k = -g[0] / (T::lit(self.own[i].radius + circles[j].radius) * dist);
            grad[0] += k * dx;
            grad[1] += k * dy;
            grad[2] += k * (dx * (-s * off) + dy * (c * off));
        }
        vec![Some(grad)]
    }
}

pub fn accel_on_tape<T: Real>(tape: &mut Tape<T>, prev: Var, cur: Var, next: Var, dt: f64) -> Result<Var, GradError> {
    tape.custom(&[prev, cur, next], Box::new(AccelMag { inv_dt2: 1.0 / (dt * dt) }))
}

pub fn collision_on_tape<T: Real>(
    tape: &mut Tape<T>,
    sdv: Var,
    sdv_extent: Extent,
    agents: &[AgentState],
) -> Result<Var, GradError> {
    tape.custom(
        &[sdv],
        Box::new(CollisionCost {
            own: circle_decomposition(sdv_extent),
            others: vehicle_circles(agents),
        }),
    )
}

/// Inputs of one step's cost, evaluated on the pose reached after the action.
pub struct StepCostInput<'a> {
    pub expert_next: Pose,
    /// `p_{t-1}`, `p_t`, `p_{t+1}` as `1 x 3` tape rows.
    pub prev: Var,
    pub cur: Var,
    pub next: Var,
    pub sdv_extent: Extent,
    /// Logged agents at the frame of `p_{t+1}`.
    pub agents: &'a [AgentState],
    pub dt: f64,
}

/// Cost terms recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StepCost {
    pub total: Var,
    pub l1: Var,
    pub acc: Option<Var>,
    pub collision: Option<Var>,
}

pub fn step_cost<T: Real>(tape: &mut Tape<T>, input: &StepCostInput, w: &CostWeights) -> Result<StepCost, GradError> {
    let e = input.expert_next;
    let expert = tape.constant(Tensor::row(&[e.x, e.y, e.yaw].map(T::lit)));
    let l1 = tape.l1_pose(input.next, expert)?;
    let mut total = l1;
    let mut acc = None;
    let mut collision = None;
    if w.alpha > 0.0 {
        let a = accel_on_tape(tape, input.prev, input.cur, input.next, input.dt)?;
        let term = tape.scale(a, T::lit(w.alpha))?;
        total = tape.add(total, term)?;
        acc = Some(a);
    }
    if w.beta > 0.0 {
        let c = collision_on_tape(tape, input.next, input.sdv_extent, input.agents)?;
        let term = tape.scale(c, T::lit(w.beta))?;
        total = tape.add(total, term)?;
        collision = Some(c);
    }
    Ok(StepCost { total, l1, acc, collision })
}
