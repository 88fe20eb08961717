//! Vectorized policy: point embedding, PointNet set blocks, SDV-query attention
//! and a trajectory head.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{BoundParams, GradError, ParamStore, Tape, Tensor, Var};
use crate::real::Real;
use crate::scene::{ElementKind, NUM_KINDS};
use crate::se2::Pose;
use crate::sim::{ElementSpan, PolicyInput, TAIL_DIM};

pub const CHECKPOINT_VERSION: u32 = 1;
/// `x, y` times `position_scale`, `cos yaw`, `sin yaw`, then the constant tail.
pub const INPUT_DIM: usize = 4 + TAIL_DIM;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("input has no SDV element")]
    NoSdv,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub n_set_layers: usize,
    pub n_attention_layers: usize,
    pub output_steps: usize,
    pub use_sdv_history: bool,
    pub history_dropout_prob: f64,
    /// Multiplies point `x, y` (meters) before the embedding.
    pub position_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_set_layers: 3,
            n_attention_layers: 1,
            output_steps: 12,
            use_sdv_history: true,
            history_dropout_prob: 0.5,
            position_scale: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.output_steps == 0 {
            return bad("output_steps must be at least 1");
        }
        if self.n_set_layers == 0 {
            return bad("n_set_layers must be at least 1");
        }
        if self.n_attention_layers != 1 {
            return bad("only a single attention layer is supported");
        }
        if !(0.0..=1.0).contains(&self.history_dropout_prob) {
            return bad("history_dropout_prob must lie in [0, 1]");
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return bad("position_scale must be positive");
        }
        Ok(())
    }
}

/// Parameter indices into the store.
#[derive(Clone, Debug)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    set: Vec<(usize, usize)>,
    type_emb: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    head1_w: usize,
    head1_b: usize,
    head2_w: usize,
    head2_b: usize,
}

#[derive(Clone, Debug)]
pub struct Policy<T: Real = f64> {
    pub config: PolicyConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Whether SDV history is visible for this forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoryMode {
    Keep,
    Drop,
}

/// Output `T_out x 3` pose increments plus intermediate handles.
pub struct Forward {
    pub trajectory: Var,
    pub descriptors: Var,
}

pub fn sinusoidal_row<T: Real>(index: usize, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|c| {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
            let a = index as f64 * freq;
            T::lit(if c % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect()
}

impl<T: Real> Policy<T> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut p = ParamStore::new();
        let embed_w = p.insert_glorot("embed.w", INPUT_DIM, d, 1.0, &mut rng)?;
        let embed_b = p.insert_zeros("embed.b", 1, d)?;
        let mut set = Vec::new();
        for l in 0..config.n_set_layers {
            let fan_in = if l == 0 { d } else { 2 * d };
            let w = p.insert_glorot(&format!("set{l}.w"), fan_in, d, 1.0, &mut rng)?;
            let b = p.insert_zeros(&format!("set{l}.b"), 1, d)?;
            set.push((w, b));
        }
        let type_emb = p.insert_glorot("attn.type", NUM_KINDS, d, 1.0, &mut rng)?;
        let wq = p.insert_glorot("attn.q", d, d, 1.0, &mut rng)?;
        let wk = p.insert_glorot("attn.k", d, d, 1.0, &mut rng)?;
        let wv = p.insert_glorot("attn.v", d, d, 1.0, &mut rng)?;
        let head1_w = p.insert_glorot("head.w1", 2 * d, d, 1.0, &mut rng)?;
        let head1_b = p.insert_zeros("head.b1", 1, d)?;
        let out = config.output_steps * 3;
        let head2_w = p.insert_glorot("head.w2", d, out, 0.1, &mut rng)?;
        let head2_b = p.insert_zeros("head.b2", 1, out)?;
        let layout = Layout {
            embed_w,
            embed_b,
            set,
            type_emb,
            wq,
            wk,
            wv,
            head1_w,
            head1_b,
            head2_w,
            head2_b,
        };
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// History mode for a training sample: configured exclusion, then dropout.
    pub fn sample_history_mode(&self, rng: &mut impl Rng) -> HistoryMode {
        if !self.config.use_sdv_history {
            return HistoryMode::Drop;
        }
        if self.config.history_dropout_prob > 0.0 && rng.gen_bool(self.config.history_dropout_prob) {
            return HistoryMode::Drop;
        }
        HistoryMode::Keep
    }

    /// Dropout-free mode used at evaluation.
    pub fn eval_history_mode(&self) -> HistoryMode {
        if self.config.use_sdv_history {
            HistoryMode::Keep
        } else {
            HistoryMode::Drop
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        input: &PolicyInput<T>,
        history: HistoryMode,
    ) -> Result<Forward, PolicyError> {
        let sdv = input.elements.first().ok_or(PolicyError::NoSdv)?;
        if sdv.kind != ElementKind::Sdv || sdv.len == 0 {
            return Err(PolicyError::NoSdv);
        }
        let d = self.config.embed_dim;
        let lay = &self.layout;
        let w = |i: usize| bound.var(i);

        // Select rows: with dropped history only the current SDV point survives.
        let keep: Vec<usize> = (0..input.num_points())
            .filter(|&r| history == HistoryMode::Keep || r >= sdv.len || input.point_index[r] == 0)
            .collect();
        let mut spans: Vec<Range<usize>> = Vec::with_capacity(input.elements.len());
        let mut kinds = Vec::with_capacity(input.elements.len());
        let mut owner = Vec::with_capacity(keep.len());
        let mut cursor = 0;
        for (e, span) in input.elements.iter().enumerate() {
            let n = keep
                .iter()
                .filter(|&&r| r >= span.start && r < span.start + span.len)
                .count();
            spans.push(cursor..cursor + n);
            kinds.push(span.kind as usize);
            owner.extend(std::iter::repeat(e).take(n));
            cursor += n;
        }
        let n = keep.len();
        let (points, tail) = if n == input.num_points() {
            (input.points, input.tail.clone())
        } else {
            let pts = tape.gather_rows(input.points, &keep)?;
            let mut t = Vec::with_capacity(n * TAIL_DIM);
            for &r in &keep {
                t.extend_from_slice(input.tail.row_slice(r));
            }
            (pts, Tensor::from_vec(n, TAIL_DIM, t)?)
        };

        let xy = tape.slice_cols(points, 0, 2)?;
        let xy = tape.scale(xy, T::lit(self.config.position_scale))?;
        let yaw = tape.slice_cols(points, 2, 1)?;
        let (c, s) = (tape.cos(yaw)?, tape.sin(yaw)?);
        let tail = tape.constant(tail);
        let x = tape.concat_cols(&[xy, c, s, tail])?;
        let h = tape.affine(x, w(lay.embed_w), Some(w(lay.embed_b)))?;
        let mut pe = Vec::with_capacity(n * d);
        for &r in &keep {
            pe.extend(sinusoidal_row::<T>(input.point_index[r], d));
        }
        let pe = tape.constant(Tensor::from_vec(n, d, pe)?);
        let mut h = tape.add(h, pe)?;

        let mut pooled = h;
        for (l, &(wl, bl)) in lay.set.iter().enumerate() {
            let z = tape.affine(h, w(wl), Some(w(bl)))?;
            let z = tape.relu(z)?;
            pooled = tape.masked_max(z, &spans, None)?;
            if l + 1 < lay.set.len() {
                let back = tape.gather_rows(pooled, &owner)?;
                h = tape.concat_cols(&[z, back])?;
            }
        }
        let desc = pooled;

        let types = tape.gather_rows(w(lay.type_emb), &kinds)?;
        let keys = tape.add(desc, types)?;
        let sdv_desc = tape.slice_rows(desc, 0, 1)?;
        let q = tape.matmul(sdv_desc, w(lay.wq))?;
        let k = tape.matmul(keys, w(lay.wk))?;
        let v = tape.matmul(desc, w(lay.wv))?;
        let mask = vec![true; kinds.len()];
        let attn = tape.scaled_dot_product(q, k, v, &mask)?;

        let z = tape.concat_cols(&[sdv_desc, attn])?;
        let z = tape.affine(z, w(lay.head1_w), Some(w(lay.head1_b)))?;
        let z = tape.relu(z)?;
        let out = tape.affine(z, w(lay.head2_w), Some(w(lay.head2_b)))?;
        let trajectory = tape.reshape(out, self.config.output_steps, 3)?;
        Ok(Forward {
            trajectory,
            descriptors: desc,
        })
    }

    /// Forward on a fresh tape; returns the predicted increments.
    pub fn predict(&self, input_of: impl FnOnce(&mut Tape<T>) -> Result<PolicyInput<T>, PolicyError>) -> Result<Vec<Pose>, PolicyError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = input_of(&mut tape)?;
        let f = self.forward(&mut tape, &bound, &input, self.eval_history_mode())?;
        Ok(trajectory_poses(tape.value(f.trajectory)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = &self.params;
        let arrays = (0..p.len())
            .map(|i| {
                let (rows, cols) = p.shape(i);
                let (m, v) = p.moments(i);
                NamedArray {
                    name: p.name(i).to_string(),
                    rows,
                    cols,
                    values: p.values(i).iter().map(|x| x.to_f64_lossy()).collect(),
                    adam_m: m.iter().map(|x| x.to_f64_lossy()).collect(),
                    adam_v: v.iter().map(|x| x.to_f64_lossy()).collect(),
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            adam_step: p.steps_taken(),
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut policy = Self::new(ck.config.clone(), 0)?;
        if ck.arrays.len() != policy.params.len() {
            return Err(PolicyError::Checkpoint(format!(
                "{} arrays, config expects {}",
                ck.arrays.len(),
                policy.params.len()
            )));
        }
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for (i, a) in ck.arrays.iter().enumerate() {
            let p = &mut policy.params;
            if p.name(i) != a.name || p.shape(i) != (a.rows, a.cols) || a.values.len() != a.rows * a.cols {
                return Err(PolicyError::Checkpoint(format!(
                    "array {i}: {} {}x{} does not match {} {:?}",
                    a.name,
                    a.rows,
                    a.cols,
                    p.name(i),
                    p.shape(i)
                )));
            }
            for (dst, &src) in p.values_mut(i).iter_mut().zip(&a.values) {
                *dst = T::lit(src);
            }
            let moment = |m: &[f64]| -> Vec<T> {
                if m.len() == a.values.len() {
                    m.iter().map(|&x| T::lit(x)).collect()
                } else {
                    vec![T::zero(); a.values.len()]
                }
            };
            ms.push(moment(&a.adam_m));
            vs.push(moment(&a.adam_v));
        }
        policy.params.set_optimizer_state(ck.adam_step, ms, vs)?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let ck: Checkpoint = serde_path_to_error::deserialize(de).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

pub fn trajectory_poses<T: Real>(t: &Tensor<T>) -> Vec<Pose> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            Pose {
                x: row[0].to_f64_lossy(),
                y: row[1].to_f64_lossy(),
                yaw: row[2].to_f64_lossy(),
            }
        })
        .collect()
}

/// The closed-loop action: step 0 of the predicted sequence.
pub fn first_action(trajectory: &[Pose]) -> Option<Pose> {
    trajectory.first().copied()
}

/// First row of a `T_out x 3` trajectory on the tape.
pub fn first_action_var<T: Real>(tape: &mut Tape<T>, trajectory: Var) -> Result<Var, GradError> {
    tape.slice_rows(trajectory, 0, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    #[serde(default)]
    pub adam_m: Vec<f64>,
    #[serde(default)]
    pub adam_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: PolicyConfig,
    pub adam_step: u64,
    pub arrays: Vec<NamedArray>,
}

/// Element spans are part of the input contract; exposed for tests that permute slots.
pub fn element_ranges(spans: &[ElementSpan]) -> Vec<Range<usize>> {
    spans.iter().map(|s| s.start..s.start + s.len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolicyConfig {
        PolicyConfig {
            embed_dim: 8,
            output_steps: 12,
            history_dropout_prob: 0.0,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        for bad in [
            PolicyConfig { embed_dim: 0, ..small() },
            PolicyConfig { output_steps: 0, ..small() },
            PolicyConfig { history_dropout_prob: 1.5, ..small() },
            PolicyConfig { n_attention_layers: 2, ..small() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn first_action_cases() {
        let t = vec![Pose::new(1.0, 0.0, 0.1), Pose::new(2.0, 0.0, 0.0)];
        assert_eq!(first_action(&t), Some(Pose::new(1.0, 0.0, 0.1)));
        assert_eq!(first_action(&[Pose::identity()]), Some(Pose::identity()));
        assert_eq!(first_action(&[]), None);
    }

    #[test]
    fn sinusoid_is_bounded_and_order_sensitive() {
        let a = sinusoidal_row::<f64>(0, 8);
        let b = sinusoidal_row::<f64>(3, 8);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[1], 1.0);
        assert!(a != b && b.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Policy::<f64>::new(small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        p.save(&path).unwrap();
        let q = Policy::<f64>::load(&path).unwrap();
        assert_eq!(p.params, q.params);
        let mut ck = p.to_checkpoint();
        ck.arrays[0].rows += 1;
        assert!(Policy::<f64>::from_checkpoint(&ck).is_err());
        ck = p.to_checkpoint();
        ck.version = 9;
        assert!(Policy::<f64>::from_checkpoint(&ck).is_err());
    }
}
