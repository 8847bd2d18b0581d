//! Scalar hyperparameter search over iterations-to-convergence.
//!
//! Golden-section search runs on `log₁₀(param)`; convergence behavior spans
//! orders of magnitude, so contraction in log space spends probes evenly
//! across decades.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::AlgorithmSpec;
use crate::graph::TopologySequence;
use crate::problem::SeparableProblem;
use crate::simnet::{run, RunOptions, RunTrace, StopCriteria};
use crate::{Error, Result};

/// The golden ratio φ.
pub const PHI: f64 = 1.618_033_988_749_895;

pub const MIN_BUDGET: usize = 5;

/// Intervals narrower than this in `log₁₀` are probed once.
const DEGENERATE_LOG_WIDTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub lo: f64,
    pub hi: f64,
    pub budget: usize,
    pub mse_threshold: f64,
    pub max_iters: u64,
    /// Consensus residual a probe must also reach to count as converged.
    #[serde(default)]
    pub residual_threshold: Option<f64>,
}

impl TuneSpec {
    pub fn stop(&self) -> StopCriteria {
        StopCriteria {
            residual_threshold: self.residual_threshold,
            ..StopCriteria::threshold(self.max_iters, self.mse_threshold)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !self.hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "search interval [{}, {}] must satisfy 0 < lo <= hi",
                self.lo, self.hi
            )));
        }
        if self.budget < MIN_BUDGET {
            return Err(Error::InvalidParameter(format!(
                "probe budget {} is below {MIN_BUDGET}",
                self.budget
            )));
        }
        if !(self.mse_threshold > 0.0) {
            return Err(Error::InvalidParameter("MSE threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub param: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GssOutcome {
    pub best: Probe,
    /// In probe order.
    pub probes: Vec<Probe>,
    /// `log₁₀` bracket `[a, b]` after each probe.
    pub brackets: Vec<(f64, f64)>,
}

fn better(a: &Probe, b: &Probe) -> bool {
    a.score < b.score || (a.score == b.score && a.param < b.param)
}

/// Minimizes `objective` over `[lo, hi]` by golden-section contraction in
/// `log₁₀` space, using at most `budget` evaluations. On ties the smaller
/// parameter wins, and the bracket moves toward smaller values.
pub fn golden_section<F>(lo: f64, hi: f64, budget: usize, mut objective: F) -> Result<GssOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::InvalidParameter(format!(
            "search interval [{lo}, {hi}] must satisfy 0 < lo <= hi"
        )));
    }
    if budget == 0 {
        return Err(Error::InvalidParameter("probe budget must be positive".into()));
    }
    let (mut a, mut b) = (lo.log10(), hi.log10());
    let mut probes = Vec::new();
    let mut brackets = Vec::new();
    let mut eval = |x: f64, probes: &mut Vec<Probe>| -> Result<f64> {
        let param = 10f64.powf(x);
        let score = objective(param)?;
        probes.push(Probe { param, score });
        Ok(score)
    };

    if b - a < DEGENERATE_LOG_WIDTH || budget < 2 {
        let mid = 0.5 * (a + b);
        eval(mid, &mut probes)?;
        brackets.push((a, b));
    } else {
        let mut c = b - (b - a) / PHI;
        let mut d = a + (b - a) / PHI;
        let mut fc = eval(c, &mut probes)?;
        brackets.push((a, b));
        let mut fd = eval(d, &mut probes)?;
        brackets.push((a, b));
        while probes.len() < budget {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - (b - a) / PHI;
                fc = eval(c, &mut probes)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + (b - a) / PHI;
                fd = eval(d, &mut probes)?;
            }
            brackets.push((a, b));
        }
    }
    let best = probes
        .iter()
        .copied()
        .reduce(|acc, p| if better(&p, &acc) { p } else { acc })
        .expect("at least one probe");
    Ok(GssOutcome { best, probes, brackets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe: usize,
    pub param: f64,
    pub iters: Option<u64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_param: f64,
    /// `None` when no probe reached the threshold within the cap.
    pub best_iters: Option<u64>,
    pub probes: Vec<ProbeRecord>,
}

/// Search objective for one run: iterations until every threshold in
/// `stop` is met, `+∞` for a divergent run, and for a run that is still
/// short at the cap, a score above the cap that grows with the largest
/// remaining gap in decades.
pub fn run_score(trace: &RunTrace, stop: &StopCriteria) -> f64 {
    if trace.diverged() {
        return f64::INFINITY;
    }
    if let Some(k) = trace.converged_at() {
        return k as f64;
    }
    let last = trace.final_record();
    let gap = [
        (last.mse, stop.mse_threshold),
        (last.consensus_residual, stop.residual_threshold),
    ]
    .into_iter()
    .filter_map(|(v, t)| t.map(|t| (v / t).log10()))
    .fold(0.0, f64::max);
    stop.max_iters as f64 * (1.0 + gap)
}

/// Golden-section search that keeps every probe, including searches in
/// which no probe converged.
pub fn gss_probes(
    spec: &TuneSpec,
    problem: &SeparableProblem,
    algo: &AlgorithmSpec,
    topology: &TopologySequence,
    opts: &RunOptions,
) -> Result<(GssOutcome, Vec<ProbeRecord>)> {
    spec.validate()?;
    let stop = spec.stop();
    let mut log = Vec::new();
    let outcome = golden_section(spec.lo, spec.hi, spec.budget, |param| {
        let trace = run(problem, &algo.with_param(param)?, topology, stop, opts)?;
        log.push(ProbeRecord {
            probe: log.len(),
            param,
            iters: trace.converged_at(),
            diverged: trace.diverged(),
        });
        Ok(run_score(&trace, &stop))
    })?;
    Ok((outcome, log))
}

pub fn gss_tune(
    spec: &TuneSpec,
    problem: &SeparableProblem,
    algo: &AlgorithmSpec,
    topology: &TopologySequence,
    opts: &RunOptions,
) -> Result<TuneResult> {
    let (outcome, log) = gss_probes(spec, problem, algo, topology, opts)?;
    if outcome.best.score.is_infinite() {
        return Err(Error::NoConvergentParameter {
            lo: spec.lo,
            hi: spec.hi,
        });
    }
    let best_iters = log.iter().find(|p| p.param == outcome.best.param).and_then(|p| p.iters);
    Ok(TuneResult {
        best_param: outcome.best.param,
        best_iters,
        probes: log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub iters: Option<u64>,
    pub diverged: bool,
}

/// One run per grid value, evaluated concurrently; rows keep grid order.
pub fn grid_sweep(
    params: &[f64],
    problem: &SeparableProblem,
    algo: &AlgorithmSpec,
    topology: &TopologySequence,
    stop: StopCriteria,
    opts: &RunOptions,
) -> Result<Vec<SweepRow>> {
    if params.is_empty() {
        return Err(Error::InvalidParameter("parameter grid is empty".into()));
    }
    let threshold = stop.mse_threshold;
    params
        .par_iter()
        .map(|&param| {
            let trace = run(problem, &algo.with_param(param)?, topology, stop, opts)?;
            Ok(SweepRow {
                param,
                iters: threshold.and_then(|t| trace.iterations_to(t)),
                diverged: trace.diverged(),
            })
        })
        .collect()
}

/// `count` values spaced evenly in `log₁₀` between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

pub fn write_probe_log<W: Write>(probes: &[ProbeRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["probe", "param", "iters", "diverged"])?;
    for p in probes {
        w.serialize((p.probe, p.param, p.iters, p.diverged))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_probe_log<R: Read>(input: R) -> Result<Vec<ProbeRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn write_sweep_table<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "iters", "diverged"])?;
    for r in rows {
        w.serialize((r.param, r.iters, r.diverged))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_table<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}
