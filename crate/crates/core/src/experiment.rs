//! Experiment specs: which environment, which `T` grid, how many seeds and
//! which config overrides. Specs are TOML:
//!
//! ```toml
//! T = [256, 1024, 4096]
//! seeds = 5
//! out = "runs"
//!
//! [env]            # or: file = "env.toml"
//! states = 4
//! actions = 2
//! branching = 3
//! constraint = "slater"
//! seed = 0
//!
//! [config]         # any PdnacConfig field except `t` and `seed`
//! width = 64
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmdp::{garnet, CmdpModel, ConstraintMode};
use crate::pdnac::{run, PdnacConfig, RunMetrics, RunSummary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GarnetSpec {
    pub states: usize,
    pub actions: usize,
    pub branching: usize,
    /// `slater` or `uniform`.
    pub constraint: String,
    pub margin: f64,
    pub seed: u64,
}

impl Default for GarnetSpec {
    fn default() -> Self {
        Self {
            states: 4,
            actions: 2,
            branching: 3,
            constraint: "slater".into(),
            margin: ConstraintMode::DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

impl GarnetSpec {
    pub fn constraint_mode(&self) -> Result<ConstraintMode> {
        match ConstraintMode::parse(&self.constraint)? {
            ConstraintMode::Slater { .. } => Ok(ConstraintMode::Slater { margin: self.margin }),
            mode => Ok(mode),
        }
    }

    pub fn build(&self) -> Result<CmdpModel> {
        garnet(self.states, self.actions, self.branching, self.constraint_mode()?, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSource {
    Garnet(GarnetSpec),
    File(PathBuf),
}

impl EnvSource {
    pub fn build(&self) -> Result<CmdpModel> {
        match self {
            EnvSource::Garnet(g) => g.build(),
            EnvSource::File(path) => CmdpModel::load(path),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnv {
    file: Option<PathBuf>,
    states: Option<usize>,
    actions: Option<usize>,
    branching: Option<usize>,
    constraint: Option<String>,
    margin: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(rename = "T", alias = "t")]
    t_values: Vec<u64>,
    #[serde(default = "default_seeds")]
    seeds: u64,
    #[serde(default)]
    first_seed: u64,
    #[serde(default = "default_out")]
    out: PathBuf,
    #[serde(default)]
    env: RawEnv,
    #[serde(default)]
    config: toml::Table,
}

fn default_seeds() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Config keys that the sweep itself controls.
const RESERVED_KEYS: [&str; 3] = ["t", "T", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub env: EnvSource,
    pub t_values: Vec<u64>,
    pub seeds: u64,
    pub first_seed: u64,
    pub out_dir: PathBuf,
    /// Raw `[config]` table, applied on top of [`PdnacConfig::default`].
    pub overrides: toml::Table,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            env: EnvSource::Garnet(GarnetSpec::default()),
            t_values: vec![1024],
            seeds: 1,
            first_seed: 0,
            out_dir: default_out(),
            overrides: toml::Table::new(),
        }
    }
}

impl ExperimentSpec {
    /// Parses a spec. A relative env `file` is resolved against `base_dir`
    /// when given.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let env = match raw.env.file.clone() {
            Some(path) => {
                let e = &raw.env;
                if e.states.is_some()
                    || e.actions.is_some()
                    || e.branching.is_some()
                    || e.constraint.is_some()
                    || e.margin.is_some()
                    || e.seed.is_some()
                {
                    return Err(Error::Parse("[env] takes either `file` or garnet keys, not both".into()));
                }
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path,
                };
                EnvSource::File(path)
            }
            None => {
                let d = GarnetSpec::default();
                let e = raw.env;
                EnvSource::Garnet(GarnetSpec {
                    states: e.states.unwrap_or(d.states),
                    actions: e.actions.unwrap_or(d.actions),
                    branching: e.branching.unwrap_or(d.branching),
                    constraint: e.constraint.unwrap_or(d.constraint),
                    margin: e.margin.unwrap_or(d.margin),
                    seed: e.seed.unwrap_or(d.seed),
                })
            }
        };
        let spec = Self {
            env,
            t_values: raw.t_values,
            seeds: raw.seeds,
            first_seed: raw.first_seed,
            out_dir: raw.out,
            overrides: raw.config,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_values.is_empty() {
            return Err(Error::InvalidArgument("T grid is empty".into()));
        }
        if let Some(t) = self.t_values.iter().find(|&&t| t < 4) {
            return Err(Error::InvalidArgument(format!("T values must be >= 4, got {t}")));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidArgument("seeds must be >= 1".into()));
        }
        if let EnvSource::Garnet(g) = &self.env {
            g.constraint_mode()?;
        }
        for key in RESERVED_KEYS {
            if self.overrides.contains_key(key) {
                return Err(Error::InvalidArgument(format!(
                    "`{key}` cannot be set in [config]; use the T grid and seeds instead"
                )));
            }
        }
        // surface bad override keys and types at load time
        self.config_for(self.t_values[0], self.first_seed)?;
        Ok(())
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// falling back to a bare string (`activation=elu`).
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = parse_assignment(assignment)?;
        if RESERVED_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "`{key}` is set with --T / --seed, not --set"
            )));
        }
        let previous = self.overrides.insert(key.clone(), value);
        if let Err(e) = self.config_for(self.t_values[0], self.first_seed) {
            match previous {
                Some(v) => self.overrides.insert(key, v),
                None => self.overrides.remove(&key),
            };
            return Err(e);
        }
        Ok(())
    }

    pub fn seed_values(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.seeds).map(move |i| self.first_seed + i)
    }

    pub fn config_for(&self, t: u64, seed: u64) -> Result<PdnacConfig> {
        let mut table = self.overrides.clone();
        table.insert("t".into(), toml::Value::Integer(to_toml_int(t)?));
        table.insert("seed".into(), toml::Value::Integer(to_toml_int(seed)?));
        table
            .try_into::<PdnacConfig>()
            .map_err(|e| Error::Parse(format!("[config]: {e}")))
    }

    pub fn build_model(&self) -> Result<CmdpModel> {
        self.env.build()
    }

    pub fn run_one(&self, model: &CmdpModel, t: u64, seed: u64) -> Result<RunMetrics> {
        run(&self.config_for(t, seed)?, model)
    }
}

fn to_toml_int(v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit a TOML integer")))
}

fn parse_assignment(assignment: &str) -> Result<(String, toml::Value)> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("expected key=value, got `{assignment}`")))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() {
        return Err(Error::Parse(format!("empty key in `{assignment}`")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// `run_T{t}_seed{seed}`, the stem shared by a run's CSV and JSON files.
pub fn run_file_stem(t: u64, seed: u64) -> String {
    format!("run_T{t}_seed{seed}")
}

pub const AGGREGATE_HEADER: &str = "T,runs,mean_gap,mean_violation,median_gap,median_violation";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub t: u64,
    pub runs: usize,
    pub mean_gap: f64,
    pub mean_violation: f64,
    pub median_gap: f64,
    pub median_violation: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row per distinct `T`, in the order of `t_values`.
pub fn aggregate(t_values: &[u64], summaries: &[RunSummary]) -> Vec<AggregateRow> {
    t_values
        .iter()
        .map(|&t| {
            let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.config.t == t).collect();
            let gaps: Vec<f64> = runs.iter().map(|s| s.mean_gap).collect();
            let viols: Vec<f64> = runs.iter().map(|s| s.mean_violation).collect();
            let n = runs.len() as f64;
            AggregateRow {
                t,
                runs: runs.len(),
                mean_gap: gaps.iter().sum::<f64>() / n,
                mean_violation: viols.iter().sum::<f64>() / n,
                median_gap: median(&gaps),
                median_violation: median(&viols),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t, r.runs, r.mean_gap, r.mean_violation, r.median_gap, r.median_violation
        ));
    }
    out
}
