//! Run configuration: defaults, then a TOML file, then `DIFFDRIVE__*` environment
//! variables, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use diffdrive::evaluator::EvalConfig;
use diffdrive::policy::PolicyConfig;
use diffdrive::synth::{GenConfig, LayoutWeights, LightPhases};
use diffdrive::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

pub const ENV_PREFIX: &str = "DIFFDRIVE__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Data generation settings; `n_scenarios` counts both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_scenarios: usize,
    pub test_fraction: f64,
    pub frames_per_scenario: usize,
    pub dt: f64,
    pub layouts: LayoutWeights,
    pub agent_density: f64,
    pub light_phases: LightPhases,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            n_scenarios: g.n_scenarios,
            test_fraction: 0.2,
            frames_per_scenario: g.frames_per_scenario,
            dt: g.dt,
            layouts: g.layouts,
            agent_density: g.agent_density,
            light_phases: g.light_phases,
        }
    }
}

impl DataSection {
    pub fn n_test(&self) -> usize {
        (self.n_scenarios as f64 * self.test_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n_scenarios - self.n_test()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenario files live here, under `train/` and `test/`.
    pub data_dir: PathBuf,
    /// Every command writes its artifacts under this directory.
    pub out_dir: PathBuf,
    /// Thread count; 0 uses every available core.
    pub workers: usize,
    pub precision: Precision,
    /// Fraction of the training split used, taken from the front.
    pub data_fraction: f64,
    pub data: DataSection,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            workers: 0,
            precision: Precision::F32,
            data_fraction: 1.0,
            data: DataSection::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            n_scenarios: self.data.n_scenarios,
            frames_per_scenario: self.data.frames_per_scenario,
            dt: self.data.dt,
            layouts: self.data.layouts,
            agent_density: self.data.agent_density,
            light_phases: self.data.light_phases,
        }
    }

    /// Copies the shared settings into the nested sections.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        self.eval.workers = self.workers;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            bail!("data.test_fraction must lie in [0, 1), got {}", self.data.test_fraction);
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            bail!("data_fraction must lie in (0, 1], got {}", self.data_fraction);
        }
        if !(self.eval.offroad_threshold > 0.0) {
            bail!("eval.offroad_threshold must be positive");
        }
        self.gen_config().validate().map_err(|e| anyhow!(e))?;
        self.policy.validate().map_err(|e| anyhow!(e))?;
        self.train.validate().map_err(|e| anyhow!(e))?;
        Ok(())
    }
}

/// A config as a TOML tree, so layers can be merged key by key.
#[derive(Clone, Debug)]
pub struct Layered {
    root: Value,
}

impl Layered {
    pub fn new() -> Self {
        Self {
            root: Value::Table(Default::default()),
        }
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = text.parse::<toml::Table>().map(Value::Table).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut self.root, v);
        Ok(())
    }

    /// `DIFFDRIVE__TRAIN__LR=1e-3` sets `train.lr`.
    pub fn merge_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            let path = k.split("__").map(str::to_lowercase).collect::<Vec<_>>().join(".");
            self.set(&path, &v)?;
        }
        Ok(())
    }

    /// `KEY=VALUE` with a dotted key; the value is parsed as a TOML literal and
    /// falls back to a plain string.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected KEY=VALUE, got {assignment:?}"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        self.set_value(path, parse_literal(raw))
    }

    pub fn set_value(&mut self, path: &str, value: Value) -> Result<()> {
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            bail!("bad config key {path:?}");
        }
        let mut node = &mut self.root;
        for k in &keys[..keys.len() - 1] {
            let table = node.as_table_mut().ok_or_else(|| anyhow!("{path}: {k} is not a table"))?;
            node = table.entry(k.to_string()).or_insert_with(|| Value::Table(Default::default()));
        }
        let table = node.as_table_mut().ok_or_else(|| anyhow!("{path}: parent is not a table"))?;
        table.insert(keys[keys.len() - 1].to_string(), value);
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        let mut node = &self.root;
        for k in path.split('.') {
            match node.get(k) {
                Some(v) => node = v,
                None => return false,
            }
        }
        true
    }

    pub fn build(&self) -> Result<RunConfig> {
        let text = toml::to_string(&self.root)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| anyhow!("invalid config: {}", e.message()))?;
        cfg.sync();
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Layered::new().build().unwrap();
        assert_eq!(cfg, {
            let mut c = RunConfig::default();
            c.sync();
            c
        });
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 3\n[train]\nlr = 0.5\nepochs = 4\n").unwrap();
        let mut l = Layered::new();
        l.merge_file(&file).unwrap();
        l.merge_env([("DIFFDRIVE__TRAIN__LR".to_string(), "0.25".to_string()), ("OTHER".into(), "x".into())])
            .unwrap();
        l.set_assignment("train.method=ms_prediction").unwrap();
        let cfg = l.build().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.method, diffdrive::trainer::Method::MsPrediction);
        assert!(l.contains("train.lr"));
        assert!(!l.contains("policy.use_sdv_history"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut l = Layered::new();
        l.set("train.learning_rate", "1").unwrap();
        assert!(l.build().is_err());
    }
}
