//! The `run`, `sweep` and `drops` commands.

use std::path::{Path, PathBuf};

use meshopt::algorithms::{AlgorithmKind, AlgorithmSpec};
use meshopt::graph::{Graph, TopologyModel, TopologySequence};
use meshopt::problem::SeparableProblem;
use meshopt::simnet::{self, RunOptions, RunTrace, StopCriteria, WallTime, WeightPolicy, MSE_DEFINITION};
use meshopt::tuner::{self, ProbeRecord, SweepRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AlgorithmEntry, Command, ExperimentConfig, GridConfig};
use crate::error::CliError;
use crate::output::{artifact, write_atomic};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub seed_count: Option<usize>,
    pub max_iters: Option<u64>,
    pub out: Option<PathBuf>,
    pub allow_unsupported: bool,
    pub payload_bytes: Option<usize>,
    pub workers: Option<usize>,
    /// Keep measured wall time in traces instead of zeroing it.
    pub wall_time: bool,
}

impl Settings {
    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        if let Some(m) = self.max_iters {
            cfg.stop.max_iters = m;
            for e in &mut cfg.algorithms {
                if let Some(t) = &mut e.tune {
                    t.max_iters = Some(t.max_iters.map_or(m, |own| own.min(m)));
                }
            }
        }
        if let Some(p) = self.payload_bytes {
            cfg.payload_bytes = Some(p);
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        cfg
    }

    fn wall(&self) -> WallTime {
        if self.wall_time {
            WallTime::Keep
        } else {
            WallTime::Zero
        }
    }
}

/// Statistics for one algorithm on one topology model over all trial seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: AlgorithmKind,
    /// `None` when tuning found no convergent value.
    pub param: Option<f64>,
    pub tuned: bool,
    pub topology: TopologyModel,
    pub seeds: Vec<u64>,
    /// Iteration at which the stop thresholds were met, per seed.
    pub iterations: Vec<Option<u64>>,
    pub median_iterations: Option<u64>,
    pub converged: usize,
    pub diverged: usize,
    /// `None` for a non-finite error.
    pub final_mse: Vec<Option<f64>>,
    pub total_bytes: Vec<u64>,
    pub total_packets: Vec<u64>,
    pub traces: Vec<PathBuf>,
    pub probe_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub command: String,
    pub name: Option<String>,
    pub mse_definition: String,
    pub stop: StopCriteria,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub algorithm: AlgorithmKind,
    /// Tuned or fixed value a centered grid was built around.
    pub center: Option<f64>,
    pub table: PathBuf,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub command: String,
    pub name: Option<String>,
    pub stop: StopCriteria,
    pub entries: Vec<SweepEntry>,
}

/// One line of the drop-probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropsRow {
    pub algorithm: AlgorithmKind,
    pub model: String,
    pub p: f64,
    pub param: Option<f64>,
    pub median_iters: Option<u64>,
    pub converged: usize,
    pub diverged: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropsSummary {
    pub schema_version: u32,
    pub command: String,
    pub name: Option<String>,
    pub stop: StopCriteria,
    pub table: PathBuf,
    pub rows: Vec<DropsRow>,
    pub runs: Vec<SummaryRow>,
}

/// Files written by a command and whether it produced anything but
/// divergent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: PathBuf,
    pub files: Vec<PathBuf>,
    pub all_diverged: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.all_diverged {
            3
        } else {
            0
        }
    }
}

/// Lower median with missing values ordered above every number.
pub fn median_iterations(iterations: &[Option<u64>]) -> Option<u64> {
    if iterations.is_empty() {
        return None;
    }
    let mut v: Vec<u64> = iterations.iter().map(|i| i.unwrap_or(u64::MAX)).collect();
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2]).filter(|&m| m != u64::MAX)
}

/// Recomputes a summary row from the traces it lists.
pub fn summarize(
    algorithm: AlgorithmKind,
    param: Option<f64>,
    tuned: bool,
    topology: TopologyModel,
    seeds: Vec<u64>,
    traces: &[RunTrace],
    trace_paths: Vec<PathBuf>,
    probe_log: Option<PathBuf>,
) -> SummaryRow {
    let iterations: Vec<Option<u64>> = traces.iter().map(RunTrace::converged_at).collect();
    SummaryRow {
        algorithm,
        param,
        tuned,
        topology,
        seeds,
        median_iterations: median_iterations(&iterations),
        converged: iterations.iter().flatten().count(),
        diverged: traces.iter().filter(|t| t.diverged()).count(),
        final_mse: traces
            .iter()
            .map(|t| Some(t.final_mse()).filter(|m| m.is_finite()))
            .collect(),
        total_bytes: traces.iter().map(RunTrace::total_bytes).collect(),
        total_packets: traces.iter().map(RunTrace::total_packets).collect(),
        iterations,
        traces: trace_paths,
        probe_log,
    }
}

/// Per-seed problem instances and the shared base graph.
struct Instances {
    graph: Graph,
    seeds: Vec<u64>,
    problems: Vec<SeparableProblem>,
}

impl Instances {
    fn build(cfg: &ExperimentConfig, base_dir: &Path, settings: &Settings) -> Result<Self, CliError> {
        let graph = cfg.build_graph(base_dir)?;
        let seeds = cfg.trial_seeds(settings.seed_count);
        if seeds.is_empty() {
            return Err(CliError::Config("--seed-count must be positive".into()));
        }
        let problems = seeds
            .iter()
            .map(|&s| cfg.build_problem(base_dir, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { graph, seeds, problems })
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    settings: &'a Settings,
    inst: Instances,
    files: Vec<PathBuf>,
}

impl<'a> Runner<'a> {
    fn options(&self, trial: usize) -> RunOptions {
        RunOptions {
            payload_bytes: self.cfg.payload_bytes,
            workers: self.settings.workers,
            allow_unsupported: self.settings.allow_unsupported,
            policy: WeightPolicy::Auto,
            evaluation_order: None,
            problem_seed: self.cfg.problem_seed(self.inst.seeds[trial]),
        }
    }

    fn topology(&self, model: TopologyModel, trial: usize) -> Result<TopologySequence, CliError> {
        self.cfg.topology(&self.inst.graph, model, self.inst.seeds[trial])
    }

    fn spec(entry: &AlgorithmEntry, param: f64) -> Result<AlgorithmSpec, CliError> {
        Ok(match entry.schedule {
            Some(s) => AlgorithmSpec::with_schedule(entry.algorithm, param, s)?,
            None => AlgorithmSpec::new(entry.algorithm, param)?,
        })
    }

    fn check(&self, kind: AlgorithmKind, model: TopologyModel) -> Result<(), CliError> {
        let topo = self.topology(model, 0)?;
        simnet::check_compatibility(kind, &topo, WeightPolicy::Auto, self.settings.allow_unsupported)?;
        Ok(())
    }

    /// Tunes on the first trial instance and writes the probe log.
    fn tune(
        &mut self,
        entry: &AlgorithmEntry,
        model: TopologyModel,
        tag: &str,
    ) -> Result<(Option<f64>, Vec<ProbeRecord>, PathBuf), CliError> {
        let block = entry.tune.expect("tune block present");
        let spec = self.cfg.tune_spec(&block);
        let algo = Self::spec(entry, block.lo)?;
        let topo = self.topology(model, 0)?;
        let probes_path = artifact(&self.cfg.output, &format!("-{tag}-probes.csv"));
        let (outcome, probes) = tuner::gss_probes(&spec, &self.inst.problems[0], &algo, &topo, &self.options(0))?;
        let best = outcome.best.score.is_finite().then_some(outcome.best.param);
        let mut buf = Vec::new();
        tuner::write_probe_log(&probes, &mut buf)?;
        write_atomic(&probes_path, &buf)?;
        self.files.push(probes_path.clone());
        Ok((best, probes, probes_path))
    }

    /// Runs every trial seed and writes each trace as CSV plus a JSON header.
    fn trials(
        &mut self,
        entry: &AlgorithmEntry,
        param: f64,
        model: TopologyModel,
        tag: &str,
    ) -> Result<(Vec<RunTrace>, Vec<PathBuf>), CliError> {
        let algo = Self::spec(entry, param)?;
        let this = &*self;
        let traces = (0..this.inst.seeds.len())
            .into_par_iter()
            .map(|t| {
                let topo = this.topology(model, t)?;
                Ok(simnet::run(
                    &this.inst.problems[t],
                    &algo,
                    &topo,
                    this.cfg.stop,
                    &this.options(t),
                )?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut paths = Vec::new();
        for (trace, seed) in traces.iter().zip(&self.inst.seeds) {
            let csv_path = artifact(&self.cfg.output, &format!("-{tag}-seed{seed}.csv"));
            write_atomic(&csv_path, trace.to_csv_string(self.settings.wall())?.as_bytes())?;
            let json_path = csv_path.with_extension("json");
            write_atomic(&json_path, trace.header_json()?.as_bytes())?;
            self.files.push(json_path);
            self.files.push(csv_path.clone());
            paths.push(csv_path);
        }
        Ok((traces, paths))
    }

    fn row(
        &mut self,
        entry: &AlgorithmEntry,
        model: TopologyModel,
        tag: &str,
    ) -> Result<(SummaryRow, Vec<RunTrace>), CliError> {
        let (param, probe_log) = match entry.tune {
            Some(_) => {
                let (best, _, path) = self.tune(entry, model, tag)?;
                (best, Some(path))
            }
            None => (entry.param, None),
        };
        let seeds = self.inst.seeds.clone();
        let Some(p) = param else {
            let row = summarize(entry.algorithm, None, true, model, seeds, &[], vec![], probe_log);
            return Ok((row, vec![]));
        };
        let (traces, paths) = self.trials(entry, p, model, tag)?;
        let row = summarize(
            entry.algorithm,
            Some(p),
            entry.tune.is_some(),
            model,
            seeds,
            &traces,
            paths,
            probe_log,
        );
        Ok((row, traces))
    }

    fn finish<T: Serialize>(mut self, summary: &T, all_diverged: bool) -> Result<Outcome, CliError> {
        let path = artifact(&self.cfg.output, "-summary.json");
        let text = serde_json::to_string_pretty(summary).map_err(meshopt::Error::from)?;
        write_atomic(&path, text.as_bytes())?;
        self.files.push(path.clone());
        Ok(Outcome {
            summary: path,
            files: self.files,
            all_diverged,
        })
    }
}

fn prepare<'a>(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    settings: &'a Settings,
    command: Command,
) -> Result<(ExperimentConfig, Instances), CliError> {
    let cfg = settings.apply(cfg);
    cfg.validate(command)?;
    let inst = Instances::build(&cfg, base_dir, settings)?;
    Ok((cfg, inst))
}

fn tag(kind: AlgorithmKind) -> String {
    kind.name().to_string()
}

pub fn cmd_run(cfg: &ExperimentConfig, base_dir: &Path, settings: &Settings) -> Result<Outcome, CliError> {
    let (cfg, inst) = prepare(cfg, base_dir, settings, Command::Run)?;
    let mut r = Runner {
        cfg: &cfg,
        settings,
        inst,
        files: vec![],
    };
    for e in &cfg.algorithms {
        r.check(e.algorithm, cfg.topology)?;
    }
    let mut rows = Vec::new();
    let mut any_usable = false;
    for e in &cfg.algorithms {
        let (row, traces) = r.row(e, cfg.topology, &tag(e.algorithm))?;
        any_usable |= traces.iter().any(|t| !t.diverged());
        rows.push(row);
    }
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        command: "run".into(),
        name: cfg.name.clone(),
        mse_definition: MSE_DEFINITION.into(),
        stop: cfg.stop,
        rows,
    };
    r.finish(&summary, !any_usable)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, base_dir: &Path, settings: &Settings) -> Result<Outcome, CliError> {
    let (cfg, inst) = prepare(cfg, base_dir, settings, Command::Sweep)?;
    let mut r = Runner {
        cfg: &cfg,
        settings,
        inst,
        files: vec![],
    };
    for e in &cfg.algorithms {
        r.check(e.algorithm, cfg.topology)?;
    }
    let mut entries = Vec::new();
    for e in &cfg.algorithms {
        let name = tag(e.algorithm);
        let (center, probes) = match e.tune {
            Some(_) => {
                let (best, probes, _) = r.tune(e, cfg.topology, &name)?;
                (best, probes)
            }
            None => (e.param, vec![]),
        };
        let grid = match &e.grid {
            Some(GridConfig::Values(v)) => Some(v.clone()),
            Some(GridConfig::Around { decades, points }) => {
                let c = center.ok_or_else(|| {
                    CliError::AllDiverged(format!("{name}: no convergent value to center the grid on"))
                })?;
                let half = 10f64.powf(decades / 2.0);
                Some(tuner::log_grid(c / half, c * half, *points))
            }
            None => None,
        };
        let rows = match grid {
            Some(grid) => {
                let algo = Runner::spec(e, grid[0])?;
                let topo = r.topology(cfg.topology, 0)?;
                tuner::grid_sweep(&grid, &r.inst.problems[0], &algo, &topo, cfg.stop, &r.options(0))?
            }
            None => {
                let mut rows: Vec<SweepRow> = probes
                    .iter()
                    .map(|p| SweepRow {
                        param: p.param,
                        iters: p.iters,
                        diverged: p.diverged,
                    })
                    .collect();
                rows.sort_by(|a, b| a.param.total_cmp(&b.param));
                rows
            }
        };
        let table = artifact(&cfg.output, &format!("-{name}-sweep.csv"));
        let mut buf = Vec::new();
        tuner::write_sweep_table(&rows, &mut buf)?;
        write_atomic(&table, &buf)?;
        r.files.push(table.clone());
        entries.push(SweepEntry {
            algorithm: e.algorithm,
            center,
            table,
            rows,
        });
    }
    let all_diverged = entries.iter().all(|e| e.rows.iter().all(|r| r.diverged));
    let summary = SweepSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        command: "sweep".into(),
        name: cfg.name.clone(),
        stop: cfg.stop,
        entries,
    };
    r.finish(&summary, all_diverged)
}

fn model_name(m: &TopologyModel) -> &'static str {
    match m {
        TopologyModel::Static => "static",
        TopologyModel::UndirectedDrop { .. } => "undirected",
        TopologyModel::DirectedDrop { .. } => "directed",
    }
}

pub fn cmd_drops(cfg: &ExperimentConfig, base_dir: &Path, settings: &Settings) -> Result<Outcome, CliError> {
    let (cfg, inst) = prepare(cfg, base_dir, settings, Command::Drops)?;
    let mut r = Runner {
        cfg: &cfg,
        settings,
        inst,
        files: vec![],
    };
    let mut plan: Vec<(&AlgorithmEntry, TopologyModel)> = Vec::new();
    for &p in &cfg.drop_probabilities {
        let undirected = if p == 0.0 {
            TopologyModel::Static
        } else {
            TopologyModel::UndirectedDrop { p }
        };
        for e in &cfg.algorithms {
            plan.push((e, undirected));
        }
        if p > 0.0 {
            for kind in &cfg.directed_drop {
                let e = cfg.algorithms.iter().find(|e| e.algorithm == *kind).expect("validated");
                plan.push((e, TopologyModel::DirectedDrop { p }));
            }
        }
    }
    for (e, model) in &plan {
        r.check(e.algorithm, *model)?;
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut any_usable = false;
    for (e, model) in plan {
        let p = model.drop_probability();
        let tag = format!("{}-{}-p{p}", e.algorithm.name(), model_name(&model));
        let (row, traces) = r.row(e, model, &tag)?;
        any_usable |= traces.iter().any(|t| !t.diverged());
        rows.push(DropsRow {
            algorithm: e.algorithm,
            model: model_name(&model).into(),
            p,
            param: row.param,
            median_iters: row.median_iterations,
            converged: row.converged,
            diverged: row.diverged,
            trials: row.seeds.len(),
        });
        runs.push(row);
    }
    let table = artifact(&cfg.output, "-drops.csv");
    write_atomic(&table, &drops_table(&rows)?)?;
    r.files.push(table.clone());
    let summary = DropsSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        command: "drops".into(),
        name: cfg.name.clone(),
        stop: cfg.stop,
        table,
        rows,
        runs,
    };
    r.finish(&summary, !any_usable)
}

pub fn drops_table(rows: &[DropsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(meshopt::Error::from)?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

pub fn read_drops_table<R: std::io::Read>(input: R) -> Result<Vec<DropsRow>, CliError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| meshopt::Error::from(e).into()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_is_lower_and_treats_missing_as_infinite() {
        assert_eq!(median_iterations(&[Some(5), Some(1), Some(3)]), Some(3));
        assert_eq!(median_iterations(&[Some(5), Some(1), Some(3), Some(9)]), Some(3));
        assert_eq!(median_iterations(&[None, Some(2), None]), None);
        assert_eq!(median_iterations(&[None, Some(2), Some(4)]), Some(4));
        assert_eq!(median_iterations(&[]), None);
    }

    #[test]
    fn drops_table_round_trips() {
        let rows = vec![
            DropsRow {
                algorithm: AlgorithmKind::Diging,
                model: "directed".into(),
                p: 0.05,
                param: Some(0.1 + 0.2),
                median_iters: None,
                converged: 0,
                diverged: 3,
                trials: 10,
            },
            DropsRow {
                algorithm: AlgorithmKind::NextQ,
                model: "static".into(),
                p: 0.0,
                param: None,
                median_iters: Some(12),
                converged: 10,
                diverged: 0,
                trials: 10,
            },
        ];
        let bytes = drops_table(&rows).unwrap();
        assert_eq!(read_drops_table(&bytes[..]).unwrap(), rows);
    }
}
