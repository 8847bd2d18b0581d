//! Experiment configuration documents and the built-in presets.

use std::fs;
use std::path::{Path, PathBuf};

use meshopt::algorithms::{AlgorithmKind, AlgorithmSpec, ScheduleKind};
use meshopt::graph::{generate_geometric, GeometricGraphSpec, Graph, TopologyModel, TopologySequence};
use meshopt::problem::{
    build_factored_ls, build_target_tracking, simulate_target_data, FactoredLeastSquaresSpec, SeparableProblem,
    TargetTrackingSpec,
};
use meshopt::simnet::StopCriteria;
use meshopt::tuner::TuneSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PRESETS: [(&str, &str); 4] = [
    ("case-study", include_str!("../presets/case-study.json")),
    ("sensitivity", include_str!("../presets/sensitivity.json")),
    ("drops", include_str!("../presets/drops.json")),
    ("hardware-standin", include_str!("../presets/hardware-standin.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    #[serde(default = "static_topology")]
    pub topology: TopologyModel,
    pub algorithms: Vec<AlgorithmEntry>,
    pub stop: StopCriteria,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Drop probabilities for the `drops` command.
    #[serde(default)]
    pub drop_probabilities: Vec<f64>,
    /// Algorithms additionally run with one-way (directed) drops.
    #[serde(default)]
    pub directed_drop: Vec<AlgorithmKind>,
    #[serde(default)]
    pub payload_bytes: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn static_topology() -> TopologyModel {
    TopologyModel::Static
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("out/experiment")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Constant-velocity target observed by `robots` drones over `steps`.
    TargetTracking { robots: usize, steps: usize, seed: u64 },
    /// Synthetic factored least squares with `rows[i]` measurements on robot `i`.
    FactoredLs {
        rows: Vec<usize>,
        n: usize,
        noise: f64,
        seed: u64,
    },
    /// A target-tracking document; trial seeds do not change its data.
    TargetTrackingFile { path: PathBuf },
    /// A factored least-squares document; trial seeds do not change its data.
    FactoredLsFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphConfig {
    /// Random geometric graph in the unit square.
    Geometric {
        radius: f64,
        seed: u64,
    },
    Complete,
    Ring,
    Path,
    EdgeList {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub param: Option<f64>,
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub tune: Option<TuneBlock>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneBlock {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Iteration cap per probe; defaults to the stop block's.
    #[serde(default)]
    pub max_iters: Option<u64>,
}

fn default_budget() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Values(Vec<f64>),
    /// `points` values evenly spaced in log scale over `decades` decades
    /// centered on the fixed or tuned parameter.
    Around {
        decades: f64,
        points: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Sweep,
    Drops,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Reads a config file, or a preset when `name` is a preset name.
    /// Returns the config and the directory relative paths resolve against.
    pub fn load(name: &str) -> Result<(Self, PathBuf), CliError> {
        let path = Path::new(name);
        if !path.exists() {
            if let Some((_, text)) = PRESETS.iter().find(|(n, _)| *n == name) {
                return Ok((Self::parse(text)?, PathBuf::from(".")));
            }
            return Err(CliError::Config(format!(
                "`{name}` is neither a config file nor a preset ({})",
                PRESETS.map(|(n, _)| n).join(", ")
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, dir))
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?;
        Self::parse(text)
    }

    pub fn n_robots(&self, base_dir: &Path) -> Result<usize, CliError> {
        Ok(match &self.problem {
            ProblemConfig::TargetTracking { robots, .. } => *robots,
            ProblemConfig::FactoredLs { rows, .. } => rows.len(),
            ProblemConfig::TargetTrackingFile { path } => {
                read_json::<TargetTrackingSpec>(&base_dir.join(path))?.n_robots
            }
            ProblemConfig::FactoredLsFile { path } => {
                read_json::<FactoredLeastSquaresSpec>(&base_dir.join(path))?.n_robots
            }
        })
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        let bad = |field: String, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if self.algorithms.is_empty() {
            return bad("algorithms".into(), "at least one algorithm is required");
        }
        if self.seeds.is_empty() {
            return bad("seeds".into(), "at least one seed is required");
        }
        if let Some(t) = self.stop.mse_threshold {
            if !(t > 0.0) {
                return bad("stop.mse_threshold".into(), "must be positive");
            }
        }
        if self.payload_bytes == Some(0) {
            return bad("payload_bytes".into(), "must be positive");
        }
        match &self.problem {
            ProblemConfig::TargetTracking { robots, steps, .. } => {
                if *robots == 0 || *steps == 0 {
                    return bad("problem".into(), "robots and steps must be positive");
                }
            }
            ProblemConfig::FactoredLs { rows, n, noise, .. } => {
                if rows.is_empty() || *n == 0 || rows.contains(&0) {
                    return bad("problem".into(), "rows and n must be positive");
                }
                if !(*noise >= 0.0) {
                    return bad("problem.noise".into(), "must be nonnegative");
                }
            }
            _ => {}
        }
        if let GraphConfig::Geometric { radius, .. } = self.graph {
            if !(radius > 0.0) {
                return bad("graph.radius".into(), "must be positive");
            }
        }
        if let Some(p) = [self.topology.drop_probability()]
            .into_iter()
            .chain(self.drop_probabilities.iter().copied())
            .find(|p| !(0.0..=1.0).contains(p))
        {
            return bad("drop probability".into(), &format!("{p} is outside [0, 1]"));
        }
        for (i, entry) in self.algorithms.iter().enumerate() {
            let field = |name: &str| format!("algorithms[{i}].{name}");
            if let Some(p) = entry.param {
                if !(p > 0.0) || !p.is_finite() {
                    return bad(field("param"), "must be positive and finite");
                }
            }
            if let Some(t) = entry.tune {
                self.tune_spec(&t)
                    .validate()
                    .map_err(|e| CliError::Config(format!("{}: {e}", field("tune"))))?;
            }
            let has_value = entry.param.is_some() || entry.tune.is_some();
            match &entry.grid {
                Some(GridConfig::Values(v)) if v.is_empty() => {
                    return bad(field("grid"), "parameter grid is empty");
                }
                Some(GridConfig::Values(v)) if v.iter().any(|p| !(*p > 0.0)) => {
                    return bad(field("grid"), "grid values must be positive");
                }
                Some(GridConfig::Around { decades, points }) => {
                    if !has_value {
                        return bad(field("grid"), "a centered grid needs `param` or `tune`");
                    }
                    if !(*decades > 0.0) || *points == 0 {
                        return bad(field("grid"), "decades and points must be positive");
                    }
                }
                _ => {}
            }
            if let Some(s) = entry.schedule {
                AlgorithmSpec::with_schedule(entry.algorithm, 1.0, s)
                    .map_err(|e| CliError::Config(format!("{}: {e}", field("schedule"))))?;
            }
            match command {
                Command::Run | Command::Drops if !has_value => {
                    return bad(format!("algorithms[{i}]"), "needs `param` or `tune`");
                }
                Command::Sweep if entry.grid.is_none() && entry.tune.is_none() => {
                    return bad(format!("algorithms[{i}]"), "sweep needs `grid` or `tune`");
                }
                _ => {}
            }
        }
        if command == Command::Drops {
            if self.drop_probabilities.is_empty() {
                return bad("drop_probabilities".into(), "drops needs at least one probability");
            }
            for kind in &self.directed_drop {
                if !self.algorithms.iter().any(|e| e.algorithm == *kind) {
                    return bad(
                        "directed_drop".into(),
                        &format!("{kind} is not listed under algorithms"),
                    );
                }
            }
        }
        Ok(())
    }

    pub fn tune_spec(&self, t: &TuneBlock) -> TuneSpec {
        TuneSpec {
            lo: t.lo,
            hi: t.hi,
            budget: t.budget,
            mse_threshold: self.stop.mse_threshold.unwrap_or(1e-6),
            max_iters: t.max_iters.unwrap_or(self.stop.max_iters),
            residual_threshold: self.stop.residual_threshold,
        }
    }

    /// Problem instance for trial seed `trial`.
    pub fn build_problem(&self, base_dir: &Path, trial: u64) -> Result<SeparableProblem, CliError> {
        Ok(match &self.problem {
            ProblemConfig::TargetTracking { robots, steps, seed } => {
                let spec = TargetTrackingSpec::constant_velocity(*robots, *steps, seed ^ trial);
                build_target_tracking(&simulate_target_data(&spec)?)?
            }
            ProblemConfig::FactoredLs { rows, n, noise, seed } => {
                build_factored_ls(&FactoredLeastSquaresSpec::random(rows, *n, *noise, seed ^ trial))?
            }
            ProblemConfig::TargetTrackingFile { path } => {
                let mut spec: TargetTrackingSpec = read_json(&base_dir.join(path))?;
                if spec.measurements.is_none() {
                    spec = simulate_target_data(&spec)?;
                }
                build_target_tracking(&spec)?
            }
            ProblemConfig::FactoredLsFile { path } => build_factored_ls(&read_json(&base_dir.join(path))?)?,
        })
    }

    pub fn problem_seed(&self, trial: u64) -> Option<u64> {
        match &self.problem {
            ProblemConfig::TargetTracking { seed, .. } | ProblemConfig::FactoredLs { seed, .. } => Some(seed ^ trial),
            _ => None,
        }
    }

    pub fn build_graph(&self, base_dir: &Path) -> Result<Graph, CliError> {
        let n = self.n_robots(base_dir)?;
        let g = match &self.graph {
            GraphConfig::Geometric { radius, seed } => generate_geometric(&GeometricGraphSpec {
                n_vertices: n,
                radius: *radius,
                seed: *seed,
            })?,
            GraphConfig::Complete => Graph::complete(n)?,
            GraphConfig::Ring => Graph::ring(n)?,
            GraphConfig::Path => Graph::path(n)?,
            GraphConfig::EdgeList { path } => {
                let path = base_dir.join(path);
                let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                text.parse()?
            }
        };
        if g.n_vertices() != n {
            return Err(CliError::Config(format!(
                "graph has {} vertices but the problem has {n} robots",
                g.n_vertices()
            )));
        }
        if !g.is_fully_connected() {
            return Err(CliError::Config(
                "communication graph is not connected; pick another radius or seed".into(),
            ));
        }
        Ok(g)
    }

    pub fn topology(&self, base: &Graph, model: TopologyModel, trial: u64) -> Result<TopologySequence, CliError> {
        Ok(TopologySequence::new(base.clone(), model, trial, 1)?)
    }

    /// Seeds after applying `--seed-count`: a prefix of the configured list,
    /// extended with consecutive values past its maximum.
    pub fn trial_seeds(&self, count: Option<usize>) -> Vec<u64> {
        let Some(count) = count else {
            return self.seeds.clone();
        };
        let mut seeds: Vec<u64> = self.seeds.iter().copied().take(count).collect();
        let mut next = self.seeds.iter().copied().max().map_or(0, |m| m + 1);
        while seeds.len() < count {
            seeds.push(next);
            next += 1;
        }
        seeds
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{} line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}
