//! Barrier-synchronous round engine.
//!
//! Each iteration samples the communication graph, lets every robot compute
//! its broadcast from its round-`k` state, delivers messages along the
//! sampled arcs, and only then applies the updates. A robot that did not
//! receive a message simply does not see that sender this round.

use std::borrow::Borrow;
use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmKind, AlgorithmSpec, LocalSolver, Mixing, Payload, RobotState};
use crate::graph::{Graph, TopologyModel, TopologySequence};
use crate::problem::SeparableProblem;
use crate::weights::{metropolis, uniform_column_stochastic, uniform_row_stochastic};
use crate::{Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Runs are flagged divergent once the MSE exceeds this multiple of its
/// initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub const MSE_EPSILON: f64 = 1e-30;

pub const MSE_DEFINITION: &str = "(1/N) sum_i |x_i - x*|^2 / max(|x*|^2, 1e-30)";

pub const CSV_HEADER: [&str; 7] = [
    "iter",
    "mse",
    "consensus_residual",
    "bytes_sent",
    "packets_sent",
    "wall_ns",
    "diverged",
];

/// How mixing weights are derived from each sampled graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    /// Metropolis on undirected graphs; uniform row weights for DGD and
    /// row/column push-pull weights for DIGing on directed graphs.
    #[default]
    Auto,
    /// Uniform row weights (and column weights for the DIGing tracker)
    /// regardless of directedness.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCriteria {
    pub max_iters: u64,
    /// Stop once the normalized MSE is at or below this value.
    pub mse_threshold: Option<f64>,
    /// Consensus residual that must also be reached before stopping.
    #[serde(default)]
    pub residual_threshold: Option<f64>,
    /// Largest per-robot `‖x_i − x*‖₂` that must also be reached.
    #[serde(default)]
    pub robot_error_threshold: Option<f64>,
}

impl StopCriteria {
    pub fn iterations(max_iters: u64) -> Self {
        Self {
            max_iters,
            mse_threshold: None,
            residual_threshold: None,
            robot_error_threshold: None,
        }
    }

    pub fn threshold(max_iters: u64, mse: f64) -> Self {
        Self {
            mse_threshold: Some(mse),
            ..Self::iterations(max_iters)
        }
    }

    pub fn has_target(&self) -> bool {
        self.mse_threshold.is_some() || self.residual_threshold.is_some() || self.robot_error_threshold.is_some()
    }

    fn satisfied(&self, mse: f64, residual: f64, robot_error: f64) -> bool {
        let within = |limit: Option<f64>, v: f64| limit.is_none_or(|t| v <= t);
        self.has_target()
            && within(self.mse_threshold, mse)
            && within(self.residual_threshold, residual)
            && within(self.robot_error_threshold, robot_error)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Split each message into packets of this many bytes.
    pub payload_bytes: Option<usize>,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub workers: Option<usize>,
    /// Permit C-ADMM on lossy undirected topologies.
    pub allow_unsupported: bool,
    pub policy: WeightPolicy,
    /// Order in which robots are evaluated within a phase when running on a
    /// single worker. Results never depend on it.
    pub evaluation_order: Option<Vec<usize>>,
    /// Seed of the problem data, recorded in the header.
    pub problem_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub mse: f64,
    pub consensus_residual: f64,
    pub bytes_sent: u64,
    pub packets_sent: u64,
    pub wall_ns: u64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema_version: u32,
    pub algorithm: AlgorithmKind,
    pub param: f64,
    pub schedule: crate::algorithms::ScheduleKind,
    pub n_robots: usize,
    pub dim: usize,
    pub topology: TopologyModel,
    pub topology_seed: u64,
    pub problem_seed: Option<u64>,
    pub problem_fingerprint: String,
    pub graph_fingerprint: String,
    pub payload_bytes: Option<usize>,
    pub stop: StopCriteria,
    pub mse_definition: String,
    /// Iterations in which some robot had to rescale weights over the
    /// senders it actually heard.
    pub renormalized_rounds: u64,
    /// Iteration at which every stopping threshold was met.
    pub stopped_at: Option<u64>,
    pub oracle: Vec<f64>,
    #[serde(with = "nonfinite")]
    pub final_states: Vec<Vec<f64>>,
}

/// JSON has no encoding for NaN or infinities; those are written as the
/// strings `"nan"`, `"inf"`, `"-inf"`.
mod nonfinite {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Value {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Vec<Value>> = v
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&x| {
                        if x.is_finite() {
                            Value::Number(x)
                        } else {
                            Value::Text(crate::hexfloat::format(x))
                        }
                    })
                    .collect()
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let raw: Vec<Vec<Value>> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|v| match v {
                        Value::Number(x) => Ok(x),
                        Value::Text(t) => crate::hexfloat::parse(&t).map_err(D::Error::custom),
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: RunHeader,
    pub records: Vec<TraceRecord>,
}

/// Whether serialized traces keep measured wall time or zero it so that
/// repeated runs serialize identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallTime {
    Keep,
    Zero,
}

impl RunTrace {
    pub fn diverged(&self) -> bool {
        self.records.last().is_some_and(|r| r.diverged)
    }

    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("a trace always holds the initial record")
    }

    pub fn final_mse(&self) -> f64 {
        self.final_record().mse
    }

    /// First iteration whose MSE is at or below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| !r.diverged && r.mse <= threshold)
            .map(|r| r.iter)
    }

    /// Iteration at which the run met its own stopping rule.
    pub fn converged_at(&self) -> Option<u64> {
        self.header.stopped_at
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_sent).sum()
    }

    pub fn total_packets(&self) -> u64 {
        self.records.iter().map(|r| r.packets_sent).sum()
    }

    pub fn final_states(&self) -> Vec<DVector<f64>> {
        self.header
            .final_states
            .iter()
            .map(|x| DVector::from_column_slice(x))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W, wall: WallTime) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            let mut r = r.clone();
            if wall == WallTime::Zero {
                r.wall_ns = 0;
            }
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, wall: WallTime) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, wall)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn header_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.header)?)
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected trace header `{}`", header.join(","))));
    }
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn read_header(json: &str) -> Result<RunHeader> {
    let h: RunHeader = serde_json::from_str(json)?;
    if h.schema_version != TRACE_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "trace schema version {} is not supported",
            h.schema_version
        )));
    }
    Ok(h)
}

fn distance_squared(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

pub fn compute_mse<X: Borrow<DVector<f64>>>(states: &[X], oracle: &DVector<f64>) -> f64 {
    let total: f64 = states.iter().map(|x| distance_squared(x.borrow(), oracle)).sum();
    total / states.len() as f64 / oracle.norm_squared().max(MSE_EPSILON)
}

/// `max_i ‖x_i − x*‖₂`.
pub fn max_robot_error<X: Borrow<DVector<f64>>>(states: &[X], oracle: &DVector<f64>) -> f64 {
    states
        .iter()
        .map(|x| distance_squared(x.borrow(), oracle).sqrt())
        .fold(0.0, f64::max)
}

/// `Σ_{(i,j)∈E} ‖x_i − x_j‖²` over undirected edges.
pub fn consensus_residual<X: Borrow<DVector<f64>>>(states: &[X], g: &Graph) -> f64 {
    let edges: Vec<_> = g.underlying_undirected().edges().collect();
    residual_over(states, &edges)
}

fn residual_over<X: Borrow<DVector<f64>>>(states: &[X], edges: &[(usize, usize)]) -> f64 {
    edges
        .iter()
        .map(|&(i, j)| distance_squared(states[i].borrow(), states[j].borrow()))
        .sum()
}

pub fn account_packets(bytes: usize, payload_bytes: usize) -> usize {
    bytes.div_ceil(payload_bytes)
}

/// Rejects pairings the algorithm's convergence theory does not cover.
pub fn check_compatibility(
    kind: AlgorithmKind,
    topology: &TopologySequence,
    policy: WeightPolicy,
    allow_unsupported: bool,
) -> Result<()> {
    let directed = topology.base.is_directed() || topology.model.is_directed_drop();
    match kind {
        AlgorithmKind::NextQ => {
            if directed {
                return Err(Error::Incompatible(
                    "NEXT-Q needs doubly-stochastic weights, which one-way links cannot provide; \
                     only DIGing handles directed or one-way-dropped links"
                        .into(),
                ));
            }
            if policy == WeightPolicy::Uniform {
                return Err(Error::Incompatible(
                    "NEXT-Q needs doubly-stochastic (Metropolis) weights".into(),
                ));
            }
        }
        AlgorithmKind::Cadmm => {
            if directed {
                return Err(Error::Incompatible(
                    "C-ADMM needs bidirectional links; it does not support directed or \
                     one-way-dropped communication"
                        .into(),
                ));
            }
            if topology.model.is_dynamic() && !allow_unsupported {
                return Err(Error::Incompatible(
                    "C-ADMM does not support dynamic communication networks; \
                     pass --allow-unsupported to run it on a lossy topology anyway"
                        .into(),
                ));
            }
        }
        _ => {}
    }
    Ok(())
}

fn build_mixing(kind: AlgorithmKind, policy: WeightPolicy, g: &Graph) -> Result<Option<Mixing>> {
    if kind == AlgorithmKind::Cadmm {
        return Ok(None);
    }
    let m = if !g.is_directed() && policy == WeightPolicy::Auto {
        let w = metropolis(g)?;
        Mixing { y: w.clone(), x: w }
    } else {
        let y = match kind {
            AlgorithmKind::Diging | AlgorithmKind::NextQ => uniform_column_stochastic(g),
            _ => uniform_row_stochastic(g),
        };
        Mixing {
            x: uniform_row_stochastic(g),
            y,
        }
    };
    Ok(Some(m))
}

/// Evaluates `f` for every robot, in parallel or in a prescribed order, and
/// returns results indexed by robot.
fn per_robot<T, F>(n: usize, opts: &RunOptions, pool: Option<&rayon::ThreadPool>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let serial = match pool {
        Some(_) => false,
        None => opts.workers == Some(1) || rayon::current_num_threads() == 1,
    };
    if serial || opts.evaluation_order.is_some() {
        let order: Vec<usize> = opts.evaluation_order.clone().unwrap_or_else(|| (0..n).collect());
        let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
        for i in order {
            slots[i] = Some(f(i)?);
        }
        return slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Contract(format!("robot {i} missing from evaluation order"))))
            .collect();
    }
    let go = || (0..n).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match pool {
        Some(p) => p.install(go),
        None => go(),
    }
}

fn iterates(states: &[RobotState]) -> Vec<&DVector<f64>> {
    states.iter().map(RobotState::x).collect()
}

pub fn run(
    problem: &SeparableProblem,
    algo: &AlgorithmSpec,
    topology: &TopologySequence,
    stop: StopCriteria,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let n = problem.n_robots();
    let base = &topology.base;
    if base.n_vertices() != n {
        return Err(Error::Dimension {
            what: "communication graph vertices".into(),
            expected: n,
            got: base.n_vertices(),
        });
    }
    if !base.is_fully_connected() {
        return Err(Error::Disconnected(
            "base communication graph must be (strongly) connected".into(),
        ));
    }
    if opts.payload_bytes == Some(0) {
        return Err(Error::InvalidParameter("payload size must be positive".into()));
    }
    if let Some(order) = &opts.evaluation_order {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::Contract(
                "evaluation order must be a permutation of the robots".into(),
            ));
        }
    }
    check_compatibility(algo.kind, topology, opts.policy, opts.allow_unsupported)?;

    let pool = match opts.workers {
        Some(w) if w > 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?,
        ),
        _ => None,
    };

    let oracle = problem.oracle_solve()?;
    let dim = problem.dim();
    let residual_edges: Vec<(usize, usize)> = base.underlying_undirected().edges().collect();
    let mut states: Vec<RobotState> = (0..n)
        .map(|i| algo.init_state(problem, i, DVector::zeros(dim)))
        .collect();
    let solvers: Vec<LocalSolver> = (0..n)
        .map(|i| algo.local_solver(problem, i, base.neighbors(i).len()))
        .collect::<Result<_>>()?;

    let initial = iterates(&states);
    let initial_mse = compute_mse(&initial, &oracle);
    let mut records = vec![TraceRecord {
        iter: 0,
        mse: initial_mse,
        consensus_residual: residual_over(&initial, &residual_edges),
        bytes_sent: 0,
        packets_sent: 0,
        wall_ns: 0,
        diverged: false,
    }];
    let mut renormalized_rounds = 0;
    let mut stopped_at = stop
        .satisfied(
            initial_mse,
            records[0].consensus_residual,
            max_robot_error(&initial, &oracle),
        )
        .then_some(0);
    let static_mixing = if topology.model.is_dynamic() {
        None
    } else {
        Some(build_mixing(algo.kind, opts.policy, base)?)
    };

    for k in 0..stop.max_iters {
        if stopped_at.is_some() || records.last().is_some_and(|r| r.diverged) {
            break;
        }
        let started = Instant::now();
        let sampled;
        let g = if topology.model.is_dynamic() {
            sampled = topology.sample_topology(k);
            &sampled
        } else {
            base
        };
        let fresh;
        let mixing = match &static_mixing {
            Some(m) => m.as_ref(),
            None => {
                fresh = build_mixing(algo.kind, opts.policy, g)?;
                fresh.as_ref()
            }
        };
        let mut bytes = 0u64;
        let mut packets = 0u64;
        let mut renormalized = false;
        for phase in 0..algo.kind.exchanges_per_round() {
            let outbound: Vec<(Option<RobotState>, Payload)> = per_robot(n, opts, pool.as_ref(), |i| {
                algo.outbound(problem, &solvers[i], i, &states[i], k)
            })?;
            let mut payloads = Vec::with_capacity(n);
            for (i, (advanced, payload)) in outbound.into_iter().enumerate() {
                if let Some(s) = advanced {
                    states[i] = s;
                }
                let fanout = g.out_neighbors(i).len() as u64;
                let size = payload.byte_size();
                bytes += fanout * size as u64;
                packets += fanout * opts.payload_bytes.map_or(1, |p| account_packets(size, p)) as u64;
                payloads.push(payload);
            }
            let steps = per_robot(n, opts, pool.as_ref(), |i| {
                let inbox: Vec<(usize, &Payload)> = g.in_neighbors(i).iter().map(|&j| (j, &payloads[j])).collect();
                algo.update(
                    problem,
                    &solvers[i],
                    i,
                    &states[i],
                    &payloads[i],
                    &inbox,
                    mixing,
                    phase,
                    k,
                )
            })?;
            states = steps
                .into_iter()
                .map(|s| {
                    renormalized |= s.renormalized;
                    s.state
                })
                .collect();
        }
        if renormalized {
            renormalized_rounds += 1;
        }
        let current = iterates(&states);
        let mse = compute_mse(&current, &oracle);
        let residual = residual_over(&current, &residual_edges);
        let finite = current.iter().all(|x| x.iter().all(|v| v.is_finite()));
        let diverged = !finite || !mse.is_finite() || mse > DIVERGENCE_FACTOR * initial_mse;
        if !diverged && stop.satisfied(mse, residual, max_robot_error(&current, &oracle)) {
            stopped_at = Some(k + 1);
        }
        records.push(TraceRecord {
            iter: k + 1,
            mse,
            consensus_residual: residual,
            bytes_sent: bytes,
            packets_sent: packets,
            wall_ns: started.elapsed().as_nanos() as u64,
            diverged,
        });
    }

    let header = RunHeader {
        schema_version: TRACE_SCHEMA_VERSION,
        algorithm: algo.kind,
        param: algo.param,
        schedule: algo.schedule,
        n_robots: n,
        dim,
        topology: topology.model,
        topology_seed: topology.seed,
        problem_seed: opts.problem_seed,
        problem_fingerprint: format!("{:016x}", problem.fingerprint()),
        graph_fingerprint: format!("{:016x}", base.fingerprint()),
        payload_bytes: opts.payload_bytes,
        stop,
        mse_definition: MSE_DEFINITION.into(),
        renormalized_rounds,
        stopped_at,
        oracle: oracle.iter().copied().collect(),
        final_states: states.iter().map(|s| s.x().iter().copied().collect()).collect(),
    };
    Ok(RunTrace { header, records })
}
