//! Per-robot update rules.
//!
//! Every rule is split into a compute half (what a robot broadcasts from its
//! round-`k` state) and an update half (how it folds the messages it
//! received into its round-`k+1` state). Neither half sees another robot's
//! state except through delivered messages.
//!
//! | algorithm | broadcast            | mixing                              |
//! |-----------|----------------------|-------------------------------------|
//! | DGD-CTA   | `x_i`                | any row-stochastic `W`              |
//! | DGD-ATC   | `x_i − α∇f_i(x_i)`   | any row-stochastic `W`              |
//! | DIGing    | `(x_i, y_i)`         | row-stochastic for `x`, column-stochastic for `y` |
//! | NEXT-Q    | `(z_i, y_i)`         | doubly stochastic `W`               |
//! | C-ADMM    | `x_i` (twice/round)  | none; needs bidirectional links     |

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::problem::{SeparableProblem, ShiftedFactor};
use crate::weights::{StochasticKind, WeightMatrix};
use crate::{Error, Result};

/// Added to a singular local Hessian before the NEXT surrogate solve.
pub const HESSIAN_REGULARIZATION: f64 = 1e-8;

/// Offset inside the diminishing schedules, `α₀/(k + offset)` and
/// `α₀/√(k + offset)`. Fixed by convention; only `α₀` is tuned.
pub const SCHEDULE_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmKind {
    #[serde(rename = "dgd-cta")]
    DgdCta,
    #[serde(rename = "dgd-atc")]
    DgdAtc,
    #[serde(rename = "diging")]
    Diging,
    #[serde(rename = "next-q")]
    NextQ,
    #[serde(rename = "cadmm")]
    Cadmm,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::DgdCta,
        AlgorithmKind::DgdAtc,
        AlgorithmKind::Diging,
        AlgorithmKind::NextQ,
        AlgorithmKind::Cadmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::DgdCta => "dgd-cta",
            AlgorithmKind::DgdAtc => "dgd-atc",
            AlgorithmKind::Diging => "diging",
            AlgorithmKind::NextQ => "next-q",
            AlgorithmKind::Cadmm => "cadmm",
        }
    }

    /// Name of the tuned scalar.
    pub fn parameter_name(self) -> &'static str {
        match self {
            AlgorithmKind::Cadmm => "rho",
            _ => "alpha",
        }
    }

    /// Reals per broadcast message, in multiples of the problem dimension.
    pub fn payload_vectors(self) -> usize {
        match self {
            AlgorithmKind::Diging | AlgorithmKind::NextQ => 2,
            _ => 1,
        }
    }

    /// Message exchanges per iteration.
    pub fn exchanges_per_round(self) -> usize {
        match self {
            AlgorithmKind::Cadmm => 2,
            _ => 1,
        }
    }

    pub fn default_schedule(self) -> ScheduleKind {
        match self {
            AlgorithmKind::DgdCta | AlgorithmKind::DgdAtc => ScheduleKind::Inverse,
            AlgorithmKind::NextQ => ScheduleKind::InverseSqrt,
            AlgorithmKind::Diging | AlgorithmKind::Cadmm => ScheduleKind::Constant,
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Inverse,
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub alpha0: f64,
}

pub fn make_schedule(kind: ScheduleKind, alpha0: f64) -> Result<StepSchedule> {
    if !(alpha0 > 0.0) || !alpha0.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive and finite, got {alpha0}"
        )));
    }
    Ok(StepSchedule { kind, alpha0 })
}

impl StepSchedule {
    pub fn evaluate(&self, k: u64) -> f64 {
        let k = k as f64;
        match self.kind {
            ScheduleKind::Constant => self.alpha0,
            ScheduleKind::Inverse => self.alpha0 / (k + SCHEDULE_OFFSET),
            ScheduleKind::InverseSqrt => self.alpha0 / (k + SCHEDULE_OFFSET).sqrt(),
        }
    }
}

/// An algorithm together with its scalar hyperparameter (`α₀` or `ρ`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    pub param: f64,
    pub schedule: ScheduleKind,
}

impl AlgorithmSpec {
    pub fn new(kind: AlgorithmKind, param: f64) -> Result<Self> {
        Self::with_schedule(kind, param, kind.default_schedule())
    }

    pub fn with_schedule(kind: AlgorithmKind, param: f64, schedule: ScheduleKind) -> Result<Self> {
        if !(param > 0.0) || !param.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{} must be positive and finite, got {param}",
                kind.parameter_name()
            )));
        }
        if matches!(kind, AlgorithmKind::Diging | AlgorithmKind::Cadmm) && schedule != ScheduleKind::Constant {
            return Err(Error::InvalidParameter(format!("{kind} takes a constant parameter")));
        }
        Ok(Self { kind, param, schedule })
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            kind: self.schedule,
            alpha0: self.param,
        }
    }

    pub fn with_param(&self, param: f64) -> Result<Self> {
        Self::with_schedule(self.kind, param, self.schedule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgdState {
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigingState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub last_grad: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub pi: DVector<f64>,
    /// Convex combination broadcast this round; set by the compute half.
    pub z: Option<DVector<f64>>,
    pub last_grad: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CadmmState {
    pub x: DVector<f64>,
    /// Composite dual over all incident consensus constraints.
    pub dual: DVector<f64>,
    /// Senders heard in the primal half of the current round.
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RobotState {
    Dgd(DgdState),
    Diging(DigingState),
    Next(NextState),
    Cadmm(CadmmState),
}

impl RobotState {
    pub fn x(&self) -> &DVector<f64> {
        match self {
            RobotState::Dgd(s) => &s.x,
            RobotState::Diging(s) => &s.x,
            RobotState::Next(s) => &s.x,
            RobotState::Cadmm(s) => &s.x,
        }
    }

    /// Gradient-tracking variable, where the algorithm has one.
    pub fn tracker(&self) -> Option<&DVector<f64>> {
        match self {
            RobotState::Diging(s) => Some(&s.y),
            RobotState::Next(s) => Some(&s.y),
            _ => None,
        }
    }
}

/// Broadcast contents; the variant fixes the message schema per algorithm.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// DGD-CTA and C-ADMM.
    Iterate(DVector<f64>),
    /// DGD-ATC: the locally adapted iterate.
    Adapted(DVector<f64>),
    /// DIGing.
    IterateTracker(DVector<f64>, DVector<f64>),
    /// NEXT-Q.
    CombinationTracker(DVector<f64>, DVector<f64>),
}

impl Payload {
    pub fn reals(&self) -> usize {
        match self {
            Payload::Iterate(v) | Payload::Adapted(v) => v.len(),
            Payload::IterateTracker(a, b) | Payload::CombinationTracker(a, b) => a.len() + b.len(),
        }
    }

    pub fn byte_size(&self) -> usize {
        8 * self.reals()
    }

    fn first(&self) -> &DVector<f64> {
        match self {
            Payload::Iterate(v) | Payload::Adapted(v) => v,
            Payload::IterateTracker(a, _) | Payload::CombinationTracker(a, _) => a,
        }
    }

    fn second(&self) -> Option<&DVector<f64>> {
        match self {
            Payload::IterateTracker(_, b) | Payload::CombinationTracker(_, b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutboundMessage {
    pub sender: usize,
    pub payload: Payload,
}

impl OutboundMessage {
    pub fn byte_size(&self) -> usize {
        self.payload.byte_size()
    }
}

/// Result of an update half. `renormalized` is set when the weights of the
/// senders actually heard did not sum to one and had to be rescaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub renormalized: bool,
}

/// `Σ_j w_ij v_j` over robot `i` and the senders in `inbox`.
///
/// For row- and doubly-stochastic weights, when the senders heard carry
/// less than the full row, the result is rescaled to a convex combination.
/// Column-stochastic weights are never rescaled, since that would break
/// conservation of the mixed quantity; a missing sender is only flagged.
pub fn mix(w: &WeightMatrix, i: usize, own: &DVector<f64>, inbox: &[(usize, &DVector<f64>)]) -> (DVector<f64>, bool) {
    let mut total = w.get(i, i);
    let mut acc = own * w.get(i, i);
    for &(j, v) in inbox {
        let wij = w.get(i, j);
        total += wij;
        acc.axpy(wij, v, 1.0);
    }
    let expected = match w.kind() {
        StochasticKind::Column => w.values().row(i).sum(),
        _ => 1.0,
    };
    if (total - expected).abs() <= crate::weights::SUM_TOLERANCE {
        return (acc, false);
    }
    if w.kind() != StochasticKind::Column {
        if total > 0.0 {
            acc /= total;
        } else {
            acc = own.clone();
        }
    }
    (acc, true)
}

fn firsts<'a>(inbox: &'a [(usize, &'a Payload)]) -> Vec<(usize, &'a DVector<f64>)> {
    inbox.iter().map(|&(j, p)| (j, p.first())).collect()
}

fn seconds<'a>(inbox: &'a [(usize, &'a Payload)]) -> Result<Vec<(usize, &'a DVector<f64>)>> {
    inbox
        .iter()
        .map(|&(j, p)| {
            p.second()
                .map(|v| (j, v))
                .ok_or_else(|| Error::Contract(format!("message from {j} lacks a tracker")))
        })
        .collect()
}

/// Combine-then-adapt: `x_i ← Σ_j w_ij x_j − α ∇f_i(x_i)`.
pub fn dgd_cta_step(
    problem: &SeparableProblem,
    i: usize,
    state: &DgdState,
    inbox: &[(usize, &DVector<f64>)],
    w: &WeightMatrix,
    alpha: f64,
) -> Step<DgdState> {
    let (mixed, renormalized) = mix(w, i, &state.x, inbox);
    let x = mixed - problem.gradient(i, &state.x) * alpha;
    Step {
        state: DgdState { x },
        renormalized,
    }
}

/// Adapt half of ATC: the value robot `i` broadcasts. `alpha` may differ
/// between robots.
pub fn dgd_atc_adapt(problem: &SeparableProblem, i: usize, state: &DgdState, alpha: f64) -> DVector<f64> {
    &state.x - problem.gradient(i, &state.x) * alpha
}

/// Combine half of ATC: `x_i ← Σ_j w_ij (x_j − α_j ∇f_j(x_j))`.
pub fn dgd_atc_step(
    i: usize,
    own_adapted: &DVector<f64>,
    inbox: &[(usize, &DVector<f64>)],
    w: &WeightMatrix,
) -> Step<DgdState> {
    let (x, renormalized) = mix(w, i, own_adapted, inbox);
    Step {
        state: DgdState { x },
        renormalized,
    }
}

pub fn diging_init(problem: &SeparableProblem, i: usize, x0: DVector<f64>) -> DigingState {
    let g = problem.gradient(i, &x0);
    DigingState {
        x: x0,
        y: g.clone(),
        last_grad: g,
    }
}

/// One DIGing iteration:
/// `x⁺ = Σ r_ij x_j − α y_i`, then `y⁺ = Σ c_ij y_j + ∇f_i(x⁺) − ∇f_i(x)`.
/// With a doubly-stochastic `W`, pass it as both `mix_x` and `mix_y`.
pub fn diging_step(
    problem: &SeparableProblem,
    i: usize,
    state: &DigingState,
    inbox: &[(usize, &Payload)],
    mix_x: &WeightMatrix,
    mix_y: &WeightMatrix,
    alpha: f64,
) -> Result<Step<DigingState>> {
    let (mx, r1) = mix(mix_x, i, &state.x, &firsts(inbox));
    let x = mx - &state.y * alpha;
    let (my, r2) = mix(mix_y, i, &state.y, &seconds(inbox)?);
    let grad = problem.gradient(i, &x);
    let y = my + &grad - &state.last_grad;
    Ok(Step {
        state: DigingState { x, y, last_grad: grad },
        renormalized: r1 || r2,
    })
}

/// Factorization of a robot's local Hessian for the NEXT surrogate.
#[derive(Debug, Clone)]
pub struct SurrogateSolver {
    chol: Cholesky<f64, Dyn>,
    pub regularized: bool,
}

impl SurrogateSolver {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = Cholesky::new(hessian.clone()) {
            return Ok(Self {
                chol,
                regularized: false,
            });
        }
        let mut h = hessian.clone();
        for d in 0..h.nrows() {
            h[(d, d)] += HESSIAN_REGULARIZATION;
        }
        Cholesky::new(h)
            .map(|chol| Self {
                chol,
                regularized: true,
            })
            .ok_or_else(|| Error::Singular("local Hessian is indefinite".into()))
    }
}

pub fn next_init(problem: &SeparableProblem, i: usize, x0: DVector<f64>) -> NextState {
    let n = problem.n_robots() as f64;
    let g = problem.gradient(i, &x0);
    NextState {
        pi: &g * n - &g,
        y: g.clone(),
        x: x0,
        z: None,
        last_grad: g,
    }
}

/// Compute half of NEXT-Q: minimize the quadratic surrogate
/// `(∇f_i + π̃_i)ᵀ(x̃ − x_i) + ½(x̃ − x_i)ᵀH_i(x̃ − x_i)`, then step a
/// fraction `alpha` of the way toward its minimizer.
pub fn next_q_prepare(solver: &SurrogateSolver, state: &NextState, alpha: f64) -> NextState {
    let direction = solver.chol.solve(&(&state.last_grad + &state.pi));
    let x_tilde = &state.x - direction;
    let z = &state.x + (x_tilde - &state.x) * alpha;
    NextState {
        z: Some(z),
        ..state.clone()
    }
}

/// Update half of NEXT-Q: `x⁺ = Σ w_ij z_j`, `y⁺ = Σ w_ij y_j + ∇f_i(x⁺) − ∇f_i(x)`,
/// `π̃⁺ = N y⁺ − ∇f_i(x⁺)`.
pub fn next_q_step(
    problem: &SeparableProblem,
    i: usize,
    state: &NextState,
    inbox: &[(usize, &Payload)],
    w: &WeightMatrix,
) -> Result<Step<NextState>> {
    if w.kind() != StochasticKind::Doubly {
        return Err(Error::Contract(
            "NEXT requires a doubly-stochastic weight matrix".into(),
        ));
    }
    let z = state
        .z
        .as_ref()
        .ok_or_else(|| Error::Contract("NEXT update before its compute half".into()))?;
    let (x, r1) = mix(w, i, z, &firsts(inbox));
    let (my, r2) = mix(w, i, &state.y, &seconds(inbox)?);
    let grad = problem.gradient(i, &x);
    let y = my + &grad - &state.last_grad;
    let pi = &y * problem.n_robots() as f64 - &grad;
    Ok(Step {
        state: NextState {
            x,
            y,
            pi,
            z: None,
            last_grad: grad,
        },
        renormalized: r1 || r2,
    })
}

/// Cached factorization of `P_i + 2ρ|N_i| I` for the usual neighbor count.
#[derive(Debug, Clone)]
pub struct ProxSolver {
    cached: Option<ShiftedFactor>,
}

impl ProxSolver {
    pub fn new(problem: &SeparableProblem, i: usize, rho: f64, degree: usize) -> Self {
        Self {
            cached: ShiftedFactor::new(problem.hessian(i), 2.0 * rho * degree as f64),
        }
    }

    fn factor(&self, problem: &SeparableProblem, i: usize, shift: f64) -> Result<Cow<'_, ShiftedFactor>> {
        match &self.cached {
            Some(f) if f.shift == shift => Ok(Cow::Borrowed(f)),
            _ => ShiftedFactor::new(problem.hessian(i), shift)
                .map(Cow::Owned)
                .ok_or_else(|| Error::Singular(format!("C-ADMM primal system of robot {i} is not positive definite"))),
        }
    }
}

/// Primal half of C-ADMM:
/// `x⁺ = argmin f_i(x) + xᵀy_i + ρ Σ_j ‖x − ½(x_i + x_j)‖²`.
/// Returns the new state; its `x` is the value to broadcast.
pub fn cadmm_primal(
    problem: &SeparableProblem,
    solver: &ProxSolver,
    i: usize,
    state: &CadmmState,
    inbox: &[(usize, &DVector<f64>)],
    rho: f64,
) -> Result<CadmmState> {
    let degree = inbox.len();
    let penalty_scale = rho * degree as f64;
    let anchor = if degree == 0 {
        state.x.clone()
    } else {
        let sum = inbox
            .iter()
            .fold(DVector::zeros(state.x.len()), |acc, (_, xj)| acc + *xj);
        (&state.x + sum / degree as f64) * 0.5
    };
    // (P + 2sI)⁻¹ (2s·anchor − r − y), same system as SeparableProblem::local_prox
    let shift = 2.0 * penalty_scale;
    let rhs = &anchor * shift - &problem.costs()[i].r - &state.dual;
    let x = solver.factor(problem, i, shift)?.solve(&rhs);
    Ok(CadmmState {
        x,
        dual: state.dual.clone(),
        neighbors: inbox.iter().map(|&(j, _)| j).collect(),
    })
}

/// Dual half of C-ADMM: `y⁺ = y + ρ Σ_j (x_i⁺ − x_j⁺)`. The senders must be
/// the same robots heard in the primal half.
pub fn cadmm_dual(state: &CadmmState, inbox: &[(usize, &DVector<f64>)], rho: f64) -> Result<CadmmState> {
    let senders: Vec<usize> = inbox.iter().map(|&(j, _)| j).collect();
    if senders != state.neighbors {
        return Err(Error::Incompatible(
            "neighbor set changed between the primal and dual halves of a C-ADMM round".into(),
        ));
    }
    let mut dual = state.dual.clone();
    for &(_, xj) in inbox {
        dual += (&state.x - xj) * rho;
    }
    Ok(CadmmState {
        x: state.x.clone(),
        dual,
        neighbors: state.neighbors.clone(),
    })
}

/// Both C-ADMM halves against the same neighbor set.
pub fn cadmm_round(
    problem: &SeparableProblem,
    solver: &ProxSolver,
    i: usize,
    state: &CadmmState,
    primal_inbox: &[(usize, &DVector<f64>)],
    dual_inbox: &[(usize, &DVector<f64>)],
    rho: f64,
) -> Result<CadmmState> {
    let mid = cadmm_primal(problem, solver, i, state, primal_inbox, rho)?;
    cadmm_dual(&mid, dual_inbox, rho)
}

fn wrap<S>(s: Step<S>, f: fn(S) -> RobotState) -> Step<RobotState> {
    Step {
        state: f(s.state),
        renormalized: s.renormalized,
    }
}

/// Weight matrices in effect for one round.
#[derive(Debug, Clone)]
pub struct Mixing {
    pub x: WeightMatrix,
    /// Mixing for the tracker; equals `x` unless the graph is directed.
    pub y: WeightMatrix,
}

/// Per-robot precomputed solvers.
#[derive(Debug, Clone)]
pub enum LocalSolver {
    None,
    Surrogate(SurrogateSolver),
    Prox(ProxSolver),
}

impl AlgorithmSpec {
    pub fn init_state(&self, problem: &SeparableProblem, i: usize, x0: DVector<f64>) -> RobotState {
        match self.kind {
            AlgorithmKind::DgdCta | AlgorithmKind::DgdAtc => RobotState::Dgd(DgdState { x: x0 }),
            AlgorithmKind::Diging => RobotState::Diging(diging_init(problem, i, x0)),
            AlgorithmKind::NextQ => RobotState::Next(next_init(problem, i, x0)),
            AlgorithmKind::Cadmm => RobotState::Cadmm(CadmmState {
                dual: DVector::zeros(x0.len()),
                x: x0,
                neighbors: Vec::new(),
            }),
        }
    }

    pub fn local_solver(&self, problem: &SeparableProblem, i: usize, degree: usize) -> Result<LocalSolver> {
        Ok(match self.kind {
            AlgorithmKind::NextQ => LocalSolver::Surrogate(SurrogateSolver::new(problem.hessian(i))?),
            AlgorithmKind::Cadmm => LocalSolver::Prox(ProxSolver::new(problem, i, self.param, degree)),
            _ => LocalSolver::None,
        })
    }

    /// Compute half of exchange `phase` in iteration `k`: the possibly
    /// advanced state and the payload robot `i` broadcasts.
    pub fn outbound(
        &self,
        problem: &SeparableProblem,
        solver: &LocalSolver,
        i: usize,
        state: &RobotState,
        k: u64,
    ) -> Result<(Option<RobotState>, Payload)> {
        let alpha = self.schedule().evaluate(k);
        Ok(match (self.kind, state) {
            (AlgorithmKind::DgdCta, RobotState::Dgd(s)) => (None, Payload::Iterate(s.x.clone())),
            (AlgorithmKind::DgdAtc, RobotState::Dgd(s)) => {
                (None, Payload::Adapted(dgd_atc_adapt(problem, i, s, alpha)))
            }
            (AlgorithmKind::Diging, RobotState::Diging(s)) => (None, Payload::IterateTracker(s.x.clone(), s.y.clone())),
            (AlgorithmKind::NextQ, RobotState::Next(s)) => {
                let LocalSolver::Surrogate(sol) = solver else {
                    return Err(Error::Contract("NEXT-Q needs a surrogate solver".into()));
                };
                let prepared = next_q_prepare(sol, s, alpha);
                let payload =
                    Payload::CombinationTracker(prepared.z.clone().expect("set by prepare"), prepared.y.clone());
                (Some(RobotState::Next(prepared)), payload)
            }
            (AlgorithmKind::Cadmm, RobotState::Cadmm(s)) => (None, Payload::Iterate(s.x.clone())),
            _ => return Err(Error::Contract("state does not match algorithm".into())),
        })
    }

    /// Update half of exchange `phase`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        problem: &SeparableProblem,
        solver: &LocalSolver,
        i: usize,
        state: &RobotState,
        own: &Payload,
        inbox: &[(usize, &Payload)],
        mixing: Option<&Mixing>,
        phase: usize,
        k: u64,
    ) -> Result<Step<RobotState>> {
        let alpha = self.schedule().evaluate(k);
        let need_mixing = || mixing.ok_or_else(|| Error::Contract(format!("{} needs weights", self.kind)));
        Ok(match (self.kind, state) {
            (AlgorithmKind::DgdCta, RobotState::Dgd(s)) => {
                let m = need_mixing()?;
                wrap(
                    dgd_cta_step(problem, i, s, &firsts(inbox), &m.x, alpha),
                    RobotState::Dgd,
                )
            }
            (AlgorithmKind::DgdAtc, RobotState::Dgd(_)) => {
                let m = need_mixing()?;
                wrap(dgd_atc_step(i, own.first(), &firsts(inbox), &m.x), RobotState::Dgd)
            }
            (AlgorithmKind::Diging, RobotState::Diging(s)) => {
                let m = need_mixing()?;
                wrap(
                    diging_step(problem, i, s, inbox, &m.x, &m.y, alpha)?,
                    RobotState::Diging,
                )
            }
            (AlgorithmKind::NextQ, RobotState::Next(s)) => {
                let m = need_mixing()?;
                wrap(next_q_step(problem, i, s, inbox, &m.x)?, RobotState::Next)
            }
            (AlgorithmKind::Cadmm, RobotState::Cadmm(s)) => {
                let xs = firsts(inbox);
                let next = if phase == 0 {
                    let LocalSolver::Prox(sol) = solver else {
                        return Err(Error::Contract("C-ADMM needs a prox solver".into()));
                    };
                    cadmm_primal(problem, sol, i, s, &xs, self.param)?
                } else {
                    cadmm_dual(s, &xs, self.param)?
                };
                Step {
                    state: RobotState::Cadmm(next),
                    renormalized: false,
                }
            }
            _ => return Err(Error::Contract("state does not match algorithm".into())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::problem::QuadraticLocalCost;
    use crate::weights::metropolis;

    fn scalar(a: f64) -> QuadraticLocalCost {
        QuadraticLocalCost::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0 * a),
            a * a,
        )
        .unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn single_square() -> SeparableProblem {
        SeparableProblem::new(vec![scalar(0.0)]).unwrap()
    }

    fn self_weights() -> WeightMatrix {
        metropolis(&Graph::complete(1).unwrap()).unwrap()
    }

    #[test]
    fn schedules() {
        let c = make_schedule(ScheduleKind::Constant, 0.1).unwrap();
        assert_eq!(c.evaluate(999), 0.1);
        let inv = make_schedule(ScheduleKind::Inverse, 1.0).unwrap();
        assert_eq!(inv.evaluate(0), 1.0);
        assert!((inv.evaluate(9) - 0.1).abs() < 1e-15);
        let isq = make_schedule(ScheduleKind::InverseSqrt, 1.0).unwrap();
        assert_eq!(isq.evaluate(3), 0.5);
        assert!(make_schedule(ScheduleKind::Constant, 0.0).is_err());
        assert!(make_schedule(ScheduleKind::Inverse, -1.0).is_err());
    }

    #[test]
    fn schedule_summability() {
        // partial sums of α and α² over a long horizon
        let inv = make_schedule(ScheduleKind::Inverse, 1.0).unwrap();
        let isq = make_schedule(ScheduleKind::InverseSqrt, 1.0).unwrap();
        let sums = |s: &StepSchedule, n: u64| {
            (0..n).fold((0.0, 0.0), |(a, b), k| {
                let v = s.evaluate(k);
                (a + v, b + v * v)
            })
        };
        let (a1, b1) = sums(&inv, 1_000);
        let (a2, b2) = sums(&inv, 1_000_000);
        assert!(a2 - a1 > 6.0, "harmonic sum keeps growing");
        assert!(b2 < std::f64::consts::PI.powi(2) / 6.0 + 1e-9 && b2 - b1 < 1e-3);
        let (_, c1) = sums(&isq, 1_000);
        let (_, c2) = sums(&isq, 1_000_000);
        assert!(c2 - c1 > 6.0, "inverse-sqrt is not square summable");
    }

    #[test]
    fn diging_and_cadmm_reject_diminishing_schedules() {
        assert!(AlgorithmSpec::with_schedule(AlgorithmKind::Diging, 0.1, ScheduleKind::Inverse).is_err());
        assert!(AlgorithmSpec::new(AlgorithmKind::Cadmm, 0.0).is_err());
        assert!("bogus".parse::<AlgorithmKind>().is_err());
        assert_eq!("next-q".parse::<AlgorithmKind>().unwrap(), AlgorithmKind::NextQ);
    }

    #[test]
    fn cta_single_node() {
        let p = single_square();
        let s = dgd_cta_step(&p, 0, &DgdState { x: v(1.0) }, &[], &self_weights(), 0.1);
        assert!((s.state.x[0] - 0.8).abs() < 1e-15);
        assert!(!s.renormalized);
    }

    #[test]
    fn atc_single_node() {
        let p = single_square();
        let st = DgdState { x: v(1.0) };
        let adapted = dgd_atc_adapt(&p, 0, &st, 0.1);
        let s = dgd_atc_step(0, &adapted, &[], &self_weights());
        assert!((s.state.x[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cta_at_consensus_with_zero_step_is_still() {
        let p = SeparableProblem::new(vec![scalar(1.0), scalar(5.0)]).unwrap();
        let w = metropolis(&Graph::path(2).unwrap()).unwrap();
        let x = v(3.0);
        let s = dgd_cta_step(&p, 0, &DgdState { x: x.clone() }, &[(1, &x)], &w, 0.0);
        assert_eq!(s.state.x, x);
    }

    #[test]
    fn two_node_cta_and_atc_by_hand() {
        // f_i = (x − a_i)², a = (1, 5), Metropolis on one edge = [[0,1],[1,0]]
        let p = SeparableProblem::new(vec![scalar(1.0), scalar(5.0)]).unwrap();
        let w = metropolis(&Graph::path(2).unwrap()).unwrap();
        let (x0, x1) = (v(1.0), v(5.0));
        let alpha = 0.1;
        // CTA robot 0: 0·1 + 1·5 − 0.1·2(1 − 1) = 5
        let cta = dgd_cta_step(&p, 0, &DgdState { x: x0.clone() }, &[(1, &x1)], &w, alpha);
        assert!((cta.state.x[0] - 5.0).abs() < 1e-15);
        // perturb so gradients are nonzero: x = (2, 4)
        let (x0, x1) = (v(2.0), v(4.0));
        // CTA: 4 − 0.1·2·(2 − 1) = 3.8
        let cta = dgd_cta_step(&p, 0, &DgdState { x: x0.clone() }, &[(1, &x1)], &w, alpha);
        assert!((cta.state.x[0] - 3.8).abs() < 1e-15);
        // ATC: w01·(4 − 0.1·2·(4 − 5)) = 4.2
        let a1 = dgd_atc_adapt(&p, 1, &DgdState { x: x1.clone() }, alpha);
        let a0 = dgd_atc_adapt(&p, 0, &DgdState { x: x0 }, alpha);
        let atc = dgd_atc_step(0, &a0, &[(1, &a1)], &w);
        assert!((atc.state.x[0] - 4.2).abs() < 1e-15);
    }

    #[test]
    fn atc_accepts_uncoordinated_steps() {
        let p = SeparableProblem::new(vec![scalar(0.0), scalar(4.0)]).unwrap();
        let w = metropolis(&Graph::path(2).unwrap()).unwrap();
        let s0 = DgdState { x: v(1.0) };
        let s1 = DgdState { x: v(3.0) };
        let a0 = dgd_atc_adapt(&p, 0, &s0, 0.1); // 1 − 0.2 = 0.8
        let a1 = dgd_atc_adapt(&p, 1, &s1, 0.25); // 3 − 0.25·(−2) = 3.5
        assert!((a0[0] - 0.8).abs() < 1e-15 && (a1[0] - 3.5).abs() < 1e-15);
        let s = dgd_atc_step(1, &a1, &[(0, &a0)], &w);
        assert!((s.state.x[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_sender_renormalizes() {
        let w = metropolis(&Graph::path(3).unwrap()).unwrap();
        // robot 1 has w_11 = 0 and hears only robot 0
        let x0 = v(2.0);
        let (mixed, flagged) = mix(&w, 1, &v(10.0), &[(0, &x0)]);
        assert!(flagged);
        assert_eq!(mixed[0], 2.0);
    }

    #[test]
    fn diging_single_node_by_hand() {
        let p = single_square();
        let s0 = diging_init(&p, 0, v(1.0));
        assert_eq!(s0.y[0], 2.0);
        let w = self_weights();
        let s1 = diging_step(&p, 0, &s0, &[], &w, &w, 0.1).unwrap().state;
        assert!((s1.x[0] - 0.8).abs() < 1e-15);
        assert!((s1.y[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn next_single_node_newton_step() {
        let cost = QuadraticLocalCost::new(
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            DVector::from_vec(vec![-1.0, 4.0]),
            0.0,
        )
        .unwrap();
        let p = SeparableProblem::new(vec![cost]).unwrap();
        let st = next_init(&p, 0, DVector::from_vec(vec![5.0, -7.0]));
        assert!(st.pi.amax() == 0.0);
        let solver = SurrogateSolver::new(p.hessian(0)).unwrap();
        let prepared = next_q_prepare(&solver, &st, 1.0);
        let out = next_q_step(&p, 0, &prepared, &[], &self_weights()).unwrap().state;
        let star = p.oracle_solve().unwrap();
        assert!((out.x - star).amax() < 1e-12);
    }

    #[test]
    fn next_rejects_non_doubly_weights() {
        let p = SeparableProblem::new(vec![scalar(0.0), scalar(1.0)]).unwrap();
        let g = Graph::path(2).unwrap();
        let w = crate::weights::uniform_row_stochastic(&g);
        let st = next_init(&p, 0, v(0.0));
        let solver = SurrogateSolver::new(p.hessian(0)).unwrap();
        let st = next_q_prepare(&solver, &st, 0.5);
        assert!(next_q_step(&p, 0, &st, &[], &w).is_err());
    }

    #[test]
    fn surrogate_regularizes_singular_hessian() {
        let s = SurrogateSolver::new(&DMatrix::zeros(2, 2)).unwrap();
        assert!(s.regularized);
        assert!(SurrogateSolver::new(&DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn cadmm_isolated_node_minimizes_locally() {
        let p = SeparableProblem::new(vec![scalar(2.5)]).unwrap();
        let solver = ProxSolver::new(&p, 0, 1.0, 0);
        let st = CadmmState {
            x: v(-4.0),
            dual: v(0.0),
            neighbors: vec![],
        };
        let out = cadmm_round(&p, &solver, 0, &st, &[], &[], 1.0).unwrap();
        assert!((out.x[0] - 2.5).abs() < 1e-15);
        assert_eq!(out.dual[0], 0.0);
    }

    #[test]
    fn cadmm_dual_is_still_at_consensus() {
        let st = CadmmState {
            x: v(3.0),
            dual: v(0.7),
            neighbors: vec![1, 2],
        };
        let (a, b) = (v(3.0), v(3.0));
        let out = cadmm_dual(&st, &[(1, &a), (2, &b)], 4.0).unwrap();
        assert_eq!(out.dual[0], 0.7);
    }

    #[test]
    fn cadmm_primal_matches_local_prox() {
        let p = SeparableProblem::new(vec![scalar(1.0), scalar(4.0), scalar(9.0)]).unwrap();
        let rho = 0.7;
        let solver = ProxSolver::new(&p, 0, rho, 2);
        let st = CadmmState {
            x: v(0.5),
            dual: v(-0.3),
            neighbors: vec![],
        };
        let (x1, x2) = (v(2.0), v(6.0));
        let got = cadmm_primal(&p, &solver, 0, &st, &[(1, &x1), (2, &x2)], rho).unwrap();
        // anchor = mean of ½(0.5 + x_j) = ½(0.5 + 4) = 2.25
        let want = p.local_prox(0, &v(-0.3), rho * 2.0, &v(2.25)).unwrap();
        assert!((got.x[0] - want[0]).abs() < 1e-14);
        assert_eq!(got.neighbors, vec![1, 2]);
    }

    #[test]
    fn cadmm_detects_neighbor_change_between_halves() {
        let st = CadmmState {
            x: v(0.0),
            dual: v(0.0),
            neighbors: vec![1, 2],
        };
        let a = v(1.0);
        let err = cadmm_dual(&st, &[(1, &a)], 1.0).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
    }

    #[test]
    fn payload_sizes_follow_message_schemas() {
        let n = 7;
        let z = DVector::zeros(n);
        assert_eq!(Payload::Iterate(z.clone()).byte_size(), 8 * n);
        assert_eq!(Payload::IterateTracker(z.clone(), z.clone()).byte_size(), 16 * n);
        assert_eq!(Payload::CombinationTracker(z.clone(), z).byte_size(), 16 * n);
        assert_eq!(AlgorithmKind::Diging.payload_vectors(), 2);
        assert_eq!(AlgorithmKind::Cadmm.exchanges_per_round(), 2);
    }
}
