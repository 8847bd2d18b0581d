//! Separable convex quadratic problems.
//!
//! Every robot `i` holds a local cost `f_i(x) = ½ xᵀPᵢx + rᵢᵀx + cᵢ` over a
//! shared decision vector `x`, and the joint objective is `Σᵢ fᵢ(x)`. The
//! target-tracking and factored least-squares instances are expanded into
//! this canonical form at build time so that one gradient/prox
//! implementation serves all of them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::hexfloat;
use crate::mix::Fingerprint;
use crate::{Error, Result};

/// Symmetry tolerance for local Hessians.
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Row-major dense matrix as it appears in JSON documents.
pub type RowMajor = Vec<Vec<f64>>;

pub fn to_dmatrix(rows: &RowMajor, nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Dimension {
            what: format!("{what} rows"),
            expected: nrows,
            got: rows.len(),
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension {
            what: format!("{what} columns"),
            expected: ncols,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_row_major(m: &DMatrix<f64>) -> RowMajor {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLocalCost {
    pub p: DMatrix<f64>,
    pub r: DVector<f64>,
    pub c: f64,
}

impl QuadraticLocalCost {
    pub fn new(p: DMatrix<f64>, r: DVector<f64>, c: f64) -> Result<Self> {
        let n = r.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::Dimension {
                what: "quadratic term".into(),
                expected: n,
                got: p.nrows().max(p.ncols()),
            });
        }
        let asym = (&p - p.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE * (1.0 + p.amax()) {
            return Err(Error::InvalidParameter(format!(
                "quadratic term is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self { p, r, c })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            p: DMatrix::zeros(dim, dim),
            r: DVector::zeros(dim),
            c: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.r.dot(x) + self.c
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x + &self.r
    }

    /// Adds `‖L x − b‖²_Ω`.
    fn add_weighted_residual(&mut self, l: &DMatrix<f64>, b: &DVector<f64>, omega: &DMatrix<f64>) {
        let lt_omega = l.transpose() * omega;
        self.p += 2.0 * &lt_omega * l;
        self.r -= 2.0 * &lt_omega * b;
        self.c += b.dot(&(omega * b));
    }

    /// Forces exact symmetry after accumulation round-off.
    fn symmetrize(&mut self) {
        let t = self.p.transpose();
        self.p = 0.5 * (&self.p + t);
    }
}

/// Local feasible set of a robot. Every instance built here is
/// unconstrained; [`SeparableProblem::local_prox`] is where a constrained
/// variant would plug in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibleSet {
    #[default]
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableProblem {
    dim: usize,
    costs: Vec<QuadraticLocalCost>,
    feasible: Vec<FeasibleSet>,
}

/// Edge-indexed equality `x_i = x_j` of the consensus reformulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsensusConstraint {
    pub i: usize,
    pub j: usize,
}

impl SeparableProblem {
    pub fn new(costs: Vec<QuadraticLocalCost>) -> Result<Self> {
        let dim = costs
            .first()
            .map(QuadraticLocalCost::dim)
            .ok_or_else(|| Error::InvalidParameter("problem needs at least one robot".into()))?;
        if let Some(bad) = costs.iter().find(|c| c.dim() != dim) {
            return Err(Error::Dimension {
                what: "local cost dimension".into(),
                expected: dim,
                got: bad.dim(),
            });
        }
        let feasible = vec![FeasibleSet::Unconstrained; costs.len()];
        Ok(Self { dim, costs, feasible })
    }

    pub fn n_robots(&self) -> usize {
        self.costs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn costs(&self) -> &[QuadraticLocalCost] {
        &self.costs
    }

    pub fn feasible_set(&self, i: usize) -> FeasibleSet {
        self.feasible[i]
    }

    pub fn local_cost(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.costs[i].value(x)
    }

    pub fn gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        self.costs[i].gradient(x)
    }

    pub fn hessian(&self, i: usize) -> &DMatrix<f64> {
        &self.costs[i].p
    }

    pub fn joint_cost(&self, x: &DVector<f64>) -> f64 {
        self.costs.iter().map(|c| c.value(x)).sum()
    }

    pub fn joint_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.costs
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + c.gradient(x))
    }

    /// `argmin_x f_i(x) + linearᵀx + penalty_scale·‖x − anchor‖²`.
    pub fn local_prox(
        &self,
        i: usize,
        linear: &DVector<f64>,
        penalty_scale: f64,
        anchor: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if penalty_scale < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "penalty scale must be nonnegative, got {penalty_scale}"
            )));
        }
        match self.feasible[i] {
            FeasibleSet::Unconstrained => {}
        }
        let cost = &self.costs[i];
        let mut system = cost.p.clone();
        for d in 0..self.dim {
            system[(d, d)] += 2.0 * penalty_scale;
        }
        let rhs = 2.0 * penalty_scale * anchor - &cost.r - linear;
        let chol = Cholesky::new(system)
            .ok_or_else(|| Error::Singular(format!("local proximal system of robot {i} is not positive definite")))?;
        Ok(chol.solve(&rhs))
    }

    /// Centralized minimizer `−(ΣPᵢ)⁻¹ Σrᵢ`.
    pub fn oracle_solve(&self) -> Result<DVector<f64>> {
        let (p, r) = self.costs.iter().fold(
            (DMatrix::zeros(self.dim, self.dim), DVector::zeros(self.dim)),
            |(p, r), c| (p + &c.p, r + &c.r),
        );
        let chol = Cholesky::new(p).ok_or_else(|| Error::Singular("joint Hessian is not positive definite".into()))?;
        Ok(-chol.solve(&r))
    }

    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new(0x7072_6f62);
        fp.word(self.dim as u64).word(self.costs.len() as u64);
        for c in &self.costs {
            for v in c.p.iter().chain(c.r.iter()) {
                fp.real(*v);
            }
            fp.real(c.c);
        }
        fp.finish()
    }
}

/// Edge-wise consensus constraints on `g`. Fails when the graph is not
/// connected (weakly connected if directed), since only then does the
/// lifted problem have the same optimal cost as the joint one.
pub fn lift_to_consensus(problem: &SeparableProblem, g: &Graph) -> Result<Vec<ConsensusConstraint>> {
    if g.n_vertices() != problem.n_robots() {
        return Err(Error::Dimension {
            what: "graph vertices vs robots".into(),
            expected: problem.n_robots(),
            got: g.n_vertices(),
        });
    }
    if !g.underlying_undirected().is_fully_connected() {
        let requirement = if g.is_directed() {
            "weakly connected"
        } else {
            "connected"
        };
        return Err(Error::Disconnected(format!(
            "consensus lifting preserves the optimum only on a {requirement} graph; found {} components",
            g.components().len()
        )));
    }
    Ok(g.edges().map(|(i, j)| ConsensusConstraint { i, j }).collect())
}

// ---------------------------------------------------------------------------
// Target tracking
// ---------------------------------------------------------------------------

const STATE_DIM: usize = 4;
const MEAS_DIM: usize = 2;

/// Batch MAP estimation of a target trajectory observed by several robots.
/// `A_t`/`Q_t` hold `T − 1` transition models; `C_it`/`R_it` hold one
/// measurement model per robot and timestep; `y_it[i][k]` is the
/// measurement robot `i` took at timestep `T_i[i][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTrackingSpec {
    #[serde(rename = "N")]
    pub n_robots: usize,
    #[serde(rename = "T")]
    pub n_steps: usize,
    #[serde(rename = "A_t")]
    pub dynamics: Vec<RowMajor>,
    #[serde(rename = "Q_t")]
    pub process_noise: Vec<RowMajor>,
    #[serde(rename = "C_it")]
    pub measurement_models: Vec<Vec<RowMajor>>,
    #[serde(rename = "R_it")]
    pub measurement_noise: Vec<Vec<RowMajor>>,
    #[serde(rename = "x_bar_0")]
    pub prior_mean: Vec<f64>,
    #[serde(rename = "P_bar_0")]
    pub prior_covariance: RowMajor,
    #[serde(rename = "T_i")]
    pub visible_steps: Vec<Vec<usize>>,
    #[serde(rename = "y_it", default, with = "hexfloat::serde_nested")]
    pub measurements: Option<Vec<Vec<Vec<f64>>>>,
    pub seed: u64,
}

fn scaled_identity(n: usize, s: f64) -> RowMajor {
    to_row_major(&(DMatrix::identity(n, n) * s))
}

/// Contiguous visibility windows, jointly covering `0..n_steps`.
pub fn visibility_windows(n_robots: usize, n_steps: usize) -> Vec<Vec<usize>> {
    if n_robots == 1 {
        return vec![(0..n_steps).collect()];
    }
    let len = (2 * n_steps).div_ceil(n_robots).max(2).min(n_steps);
    let span = n_steps - len;
    (0..n_robots)
        .map(|i| {
            let start = (i * span + (n_robots - 1) / 2) / (n_robots - 1);
            (start..start + len).collect()
        })
        .collect()
}

impl TargetTrackingSpec {
    /// Constant-velocity target in the plane, robots measuring position.
    pub fn constant_velocity(n_robots: usize, n_steps: usize, seed: u64) -> Self {
        let dt = 1.0;
        let a = vec![
            vec![1.0, 0.0, dt, 0.0],
            vec![0.0, 1.0, 0.0, dt],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let c = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let transitions = n_steps.saturating_sub(1);
        Self {
            n_robots,
            n_steps,
            dynamics: vec![a; transitions],
            process_noise: vec![scaled_identity(STATE_DIM, 0.1); transitions],
            measurement_models: vec![vec![c; n_steps]; n_robots],
            measurement_noise: vec![vec![scaled_identity(MEAS_DIM, 0.25); n_steps]; n_robots],
            prior_mean: vec![0.0, 0.0, 1.0, 0.5],
            prior_covariance: scaled_identity(STATE_DIM, 1.0),
            visible_steps: visibility_windows(n_robots, n_steps),
            measurements: None,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        STATE_DIM * self.n_steps
    }

    fn check_shapes(&self) -> Result<()> {
        let dim_err = |what: &str, expected: usize, got: usize| Error::Dimension {
            what: what.into(),
            expected,
            got,
        };
        if self.n_robots == 0 || self.n_steps == 0 {
            return Err(Error::InvalidParameter("N and T must be positive".into()));
        }
        let transitions = self.n_steps - 1;
        if self.dynamics.len() != transitions {
            return Err(dim_err("A_t count", transitions, self.dynamics.len()));
        }
        if self.process_noise.len() != transitions {
            return Err(dim_err("Q_t count", transitions, self.process_noise.len()));
        }
        for (what, per_robot) in [("C_it", &self.measurement_models), ("R_it", &self.measurement_noise)] {
            if per_robot.len() != self.n_robots {
                return Err(dim_err(&format!("{what} robots"), self.n_robots, per_robot.len()));
            }
            if let Some(bad) = per_robot.iter().find(|v| v.len() != self.n_steps) {
                return Err(dim_err(&format!("{what} timesteps"), self.n_steps, bad.len()));
            }
        }
        if self.prior_mean.len() != STATE_DIM {
            return Err(dim_err("x_bar_0", STATE_DIM, self.prior_mean.len()));
        }
        if self.visible_steps.len() != self.n_robots {
            return Err(dim_err("T_i robots", self.n_robots, self.visible_steps.len()));
        }
        for steps in &self.visible_steps {
            if let Some(&t) = steps.iter().find(|&&t| t >= self.n_steps) {
                return Err(Error::InvalidParameter(format!(
                    "T_i contains timestep {t} outside 0..{}",
                    self.n_steps
                )));
            }
        }
        if let Some(y) = &self.measurements {
            if y.len() != self.n_robots {
                return Err(dim_err("y_it robots", self.n_robots, y.len()));
            }
            for (i, (yi, ti)) in y.iter().zip(&self.visible_steps).enumerate() {
                if yi.len() != ti.len() {
                    return Err(dim_err(&format!("y_it entries of robot {i}"), ti.len(), yi.len()));
                }
                if let Some(bad) = yi.iter().find(|v| v.len() != MEAS_DIM) {
                    return Err(dim_err("measurement length", MEAS_DIM, bad.len()));
                }
            }
        }
        Ok(())
    }

    fn measurements_or_err(&self) -> Result<&Vec<Vec<Vec<f64>>>> {
        self.measurements
            .as_ref()
            .ok_or_else(|| Error::Contract("target-tracking spec has no measurements; simulate them first".into()))
    }

    /// Joint cost evaluated directly from the weighted residual norms.
    pub fn global_cost(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_shapes()?;
        let models = self.models()?;
        let state = |t: usize| x.rows(STATE_DIM * t, STATE_DIM).into_owned();
        let wnorm = |v: &DVector<f64>, omega: &DMatrix<f64>| v.dot(&(omega * v));
        let mut total = wnorm(&(state(0) - &models.prior_mean), &models.prior_info);
        for t in 0..self.n_steps - 1 {
            let res = state(t + 1) - &models.a[t] * state(t);
            total += wnorm(&res, &models.q_info[t]);
        }
        if self.visible_steps.iter().any(|s| !s.is_empty()) {
            let y = self.measurements_or_err()?;
            for (i, steps) in self.visible_steps.iter().enumerate() {
                for (k, &t) in steps.iter().enumerate() {
                    let yv = DVector::from_column_slice(&y[i][k]);
                    let res = yv - &models.c[i][t] * state(t);
                    total += wnorm(&res, &models.r_info[i][t]);
                }
            }
        }
        Ok(total)
    }

    fn models(&self) -> Result<TrackingModels> {
        let a = self
            .dynamics
            .iter()
            .map(|m| to_dmatrix(m, STATE_DIM, STATE_DIM, "A_t"))
            .collect::<Result<Vec<_>>>()?;
        let q_info = self
            .process_noise
            .iter()
            .enumerate()
            .map(|(t, m)| information(&to_dmatrix(m, STATE_DIM, STATE_DIM, "Q_t")?, &format!("Q_{t}")))
            .collect::<Result<Vec<_>>>()?;
        let c = self
            .measurement_models
            .iter()
            .map(|per_t| {
                per_t
                    .iter()
                    .map(|m| to_dmatrix(m, MEAS_DIM, STATE_DIM, "C_it"))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        // Only the noise models at visible timesteps have to be invertible.
        let r_info = self
            .measurement_noise
            .iter()
            .enumerate()
            .map(|(i, per_t)| {
                per_t
                    .iter()
                    .enumerate()
                    .map(|(t, m)| {
                        let cov = to_dmatrix(m, MEAS_DIM, MEAS_DIM, "R_it")?;
                        if self.visible_steps[i].contains(&t) {
                            information(&cov, &format!("R_{i},{t}"))
                        } else {
                            Ok(DMatrix::zeros(MEAS_DIM, MEAS_DIM))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let prior_cov = to_dmatrix(&self.prior_covariance, STATE_DIM, STATE_DIM, "P_bar_0")?;
        Ok(TrackingModels {
            a,
            q_info,
            c,
            r_info,
            prior_mean: DVector::from_column_slice(&self.prior_mean),
            prior_info: information(&prior_cov, "P_bar_0")?,
            prior_cov,
        })
    }
}

struct TrackingModels {
    a: Vec<DMatrix<f64>>,
    q_info: Vec<DMatrix<f64>>,
    c: Vec<Vec<DMatrix<f64>>>,
    r_info: Vec<Vec<DMatrix<f64>>>,
    prior_mean: DVector<f64>,
    prior_info: DMatrix<f64>,
    prior_cov: DMatrix<f64>,
}

/// Inverse of a covariance matrix, rejecting anything not positive definite.
fn information(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(cov.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("covariance {what} is not positive definite")))
}

/// Selects the `t`-th state block out of the stacked trajectory.
fn block_selector(rows: usize, t: usize, n_steps: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(rows, STATE_DIM * n_steps);
    l.view_mut((0, STATE_DIM * t), (rows, STATE_DIM)).copy_from(block);
    l
}

/// Robot `i`'s cost: a `1/N` share of the prior and dynamics terms plus its
/// own measurement terms, so the robots' costs sum to the joint MAP cost.
pub fn build_target_tracking(spec: &TargetTrackingSpec) -> Result<SeparableProblem> {
    spec.check_shapes()?;
    let models = spec.models()?;
    let n_steps = spec.n_steps;
    let dim = spec.dim();
    let share = 1.0 / spec.n_robots as f64;
    let eye = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM);

    let mut common = QuadraticLocalCost::zero(dim);
    common.add_weighted_residual(
        &block_selector(STATE_DIM, 0, n_steps, &eye),
        &models.prior_mean,
        &(&models.prior_info * share),
    );
    for t in 0..n_steps - 1 {
        let mut l = block_selector(STATE_DIM, t + 1, n_steps, &eye);
        l.view_mut((0, STATE_DIM * t), (STATE_DIM, STATE_DIM))
            .copy_from(&(-&models.a[t]));
        common.add_weighted_residual(&l, &DVector::zeros(STATE_DIM), &(&models.q_info[t] * share));
    }

    let any_visible = spec.visible_steps.iter().any(|s| !s.is_empty());
    let y = if any_visible {
        Some(spec.measurements_or_err()?)
    } else {
        None
    };
    let costs = (0..spec.n_robots)
        .map(|i| {
            let mut cost = common.clone();
            for (k, &t) in spec.visible_steps[i].iter().enumerate() {
                let yv = DVector::from_column_slice(&y.expect("checked above")[i][k]);
                let l = block_selector(MEAS_DIM, t, n_steps, &models.c[i][t]);
                cost.add_weighted_residual(&l, &yv, &models.r_info[i][t]);
            }
            cost.symmetrize();
            cost
        })
        .collect();
    SeparableProblem::new(costs)
}

/// Draws from `N(mean, cov)` using the Cholesky factor of `cov`.
fn gaussian(rng: &mut ChaCha8Rng, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Singular("sampling covariance is not positive definite".into()))?
        .l();
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    Ok(mean + l * z)
}

/// Rolls out a target trajectory and the robots' measurements of it.
/// Returns a copy with `y_it` filled and the true stacked trajectory.
pub fn simulate_target_data_with_truth(spec: &TargetTrackingSpec) -> Result<(TargetTrackingSpec, DVector<f64>)> {
    spec.check_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prior_mean = DVector::from_column_slice(&spec.prior_mean);
    let prior_cov = spec.models()?.prior_cov;
    let zero_state = DVector::zeros(STATE_DIM);
    let mut states = Vec::with_capacity(spec.n_steps);
    states.push(gaussian(&mut rng, &prior_mean, &prior_cov)?);
    for t in 0..spec.n_steps - 1 {
        let a = to_dmatrix(&spec.dynamics[t], STATE_DIM, STATE_DIM, "A_t")?;
        let q = to_dmatrix(&spec.process_noise[t], STATE_DIM, STATE_DIM, "Q_t")?;
        let w = gaussian(&mut rng, &zero_state, &q)?;
        let next = a * &states[t] + w;
        states.push(next);
    }
    let zero_meas = DVector::zeros(MEAS_DIM);
    let mut measurements = Vec::with_capacity(spec.n_robots);
    for i in 0..spec.n_robots {
        let mut yi = Vec::with_capacity(spec.visible_steps[i].len());
        for &t in &spec.visible_steps[i] {
            let c = to_dmatrix(&spec.measurement_models[i][t], MEAS_DIM, STATE_DIM, "C_it")?;
            let r = to_dmatrix(&spec.measurement_noise[i][t], MEAS_DIM, MEAS_DIM, "R_it")?;
            let v = gaussian(&mut rng, &zero_meas, &r)?;
            yi.push((c * &states[t] + v).iter().copied().collect());
        }
        measurements.push(yi);
    }
    let truth = DVector::from_iterator(
        spec.dim(),
        states.iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>(),
    );
    let mut out = spec.clone();
    out.measurements = Some(measurements);
    Ok((out, truth))
}

pub fn simulate_target_data(spec: &TargetTrackingSpec) -> Result<TargetTrackingSpec> {
    simulate_target_data_with_truth(spec).map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// Factored least squares
// ---------------------------------------------------------------------------

/// Positive-definite weight `M_i`. Large instances use the diagonal form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Weighting {
    Diag(Vec<f64>),
    Dense(RowMajor),
}

impl Weighting {
    pub fn len(&self) -> usize {
        match self {
            Weighting::Diag(d) => d.len(),
            Weighting::Dense(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Weighting::Diag(d) => {
                if d.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::InvalidParameter("diagonal weight must be positive".into()));
                }
                let mut out = g.clone();
                for (mut row, &w) in out.row_iter_mut().zip(d) {
                    row *= w;
                }
                Ok(out)
            }
            Weighting::Dense(m) => {
                let m = to_dmatrix(m, g.nrows(), g.nrows(), "M_i")?;
                if Cholesky::new(m.clone()).is_none() {
                    return Err(Error::InvalidParameter("M_i is not positive definite".into()));
                }
                Ok(m * g)
            }
        }
    }
}

/// `min_p Σᵢ (Gᵢp − zᵢ)ᵀ Mᵢ (Gᵢp − zᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactoredLeastSquaresSpec {
    #[serde(rename = "N")]
    pub n_robots: usize,
    pub n: usize,
    #[serde(rename = "G_i")]
    pub factors: Vec<RowMajor>,
    #[serde(rename = "M_i")]
    pub weights: Vec<Weighting>,
    #[serde(rename = "z_i")]
    pub targets: Vec<Vec<f64>>,
    pub seed: u64,
}

impl FactoredLeastSquaresSpec {
    /// Synthetic instance: Gaussian factors with entries of variance
    /// `1/m_i`, diagonal weights uniform in [0.5, 1.5], and targets from a
    /// Gaussian ground truth plus noise of standard deviation `noise`.
    pub fn random(rows: &[usize], n: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let weight_dist = Uniform::new(0.5, 1.5).expect("valid range");
        let mut factors = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for &m in rows {
            let scale = 1.0 / (m as f64).sqrt();
            let g: RowMajor = (0..m)
                .map(|_| {
                    (0..n)
                        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect()
                })
                .collect();
            let z = g
                .iter()
                .map(|row| {
                    let clean: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    clean + noise * e
                })
                .collect();
            let w = (0..m).map(|_| weight_dist.sample(&mut rng)).collect();
            factors.push(g);
            weights.push(Weighting::Diag(w));
            targets.push(z);
        }
        Self {
            n_robots: rows.len(),
            n,
            factors,
            weights,
            targets,
            seed,
        }
    }

    pub fn rows(&self) -> Vec<usize> {
        self.factors.iter().map(Vec::len).collect()
    }
}

/// `Pᵢ = 2GᵢᵀMᵢGᵢ`, `rᵢ = −2GᵢᵀMᵢzᵢ`, `cᵢ = zᵢᵀMᵢzᵢ`.
pub fn build_factored_ls(spec: &FactoredLeastSquaresSpec) -> Result<SeparableProblem> {
    let n = spec.n;
    for (what, len) in [
        ("G_i count", spec.factors.len()),
        ("M_i count", spec.weights.len()),
        ("z_i count", spec.targets.len()),
    ] {
        if len != spec.n_robots {
            return Err(Error::Dimension {
                what: what.into(),
                expected: spec.n_robots,
                got: len,
            });
        }
    }
    let costs = (0..spec.n_robots)
        .map(|i| {
            let m = spec.factors[i].len();
            let g = to_dmatrix(&spec.factors[i], m, n, &format!("G_{i}"))?;
            if spec.weights[i].len() != m {
                return Err(Error::Dimension {
                    what: format!("M_{i} size"),
                    expected: m,
                    got: spec.weights[i].len(),
                });
            }
            if spec.targets[i].len() != m {
                return Err(Error::Dimension {
                    what: format!("z_{i} length"),
                    expected: m,
                    got: spec.targets[i].len(),
                });
            }
            let z = DVector::from_column_slice(&spec.targets[i]);
            let mg = spec.weights[i].apply(&g)?;
            let mz = spec.weights[i].apply(&DMatrix::from_column_slice(m, 1, z.as_slice()))?;
            let mut cost = QuadraticLocalCost {
                p: 2.0 * g.transpose() * &mg,
                r: -2.0 * mg.transpose() * &z,
                c: z.dot(&mz.column(0)),
            };
            cost.symmetrize();
            Ok(cost)
        })
        .collect::<Result<Vec<_>>>()?;
    SeparableProblem::new(costs)
}

/// Cached factorization for repeated solves against `Pᵢ + 2sI`.
#[derive(Debug, Clone)]
pub struct ShiftedFactor {
    pub shift: f64,
    chol: Cholesky<f64, Dyn>,
}

impl ShiftedFactor {
    pub fn new(p: &DMatrix<f64>, shift: f64) -> Option<Self> {
        let mut system = p.clone();
        for d in 0..p.nrows() {
            system[(d, d)] += shift;
        }
        Cholesky::new(system).map(|chol| Self { shift, chol })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Directedness;

    fn scalar(a: f64) -> QuadraticLocalCost {
        // (x − a)² = x² − 2ax + a²
        QuadraticLocalCost::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0 * a),
            a * a,
        )
        .unwrap()
    }

    #[test]
    fn scalar_consensus_oracle_is_mean() {
        let p = SeparableProblem::new(vec![scalar(0.0), scalar(3.0), scalar(6.0)]).unwrap();
        assert!((p.oracle_solve().unwrap()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_of_squared_norm() {
        let p = SeparableProblem::new(vec![QuadraticLocalCost::new(
            DMatrix::identity(3, 3) * 2.0,
            DVector::zeros(3),
            0.0,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(
            p.gradient(0, &DVector::from_element(3, 1.0)),
            DVector::from_element(3, 2.0)
        );
        assert_eq!(p.hessian(0), &(DMatrix::identity(3, 3) * 2.0));
    }

    #[test]
    fn prox_examples() {
        let p = SeparableProblem::new(vec![scalar(1.5)]).unwrap();
        let zero = DVector::zeros(1);
        assert!((p.local_prox(0, &zero, 0.0, &zero).unwrap()[0] - 1.5).abs() < 1e-15);
        // (x−1.5)² + (x−4)² → 2.75
        let got = p.local_prox(0, &zero, 1.0, &DVector::from_element(1, 4.0)).unwrap();
        assert!((got[0] - 2.75).abs() < 1e-15);
        assert!(p.local_prox(0, &zero, -1.0, &zero).is_err());
    }

    #[test]
    fn prox_of_singular_cost_without_penalty_fails() {
        let p = SeparableProblem::new(vec![QuadraticLocalCost::zero(2)]).unwrap();
        let z = DVector::zeros(2);
        assert!(matches!(p.local_prox(0, &z, 0.0, &z), Err(Error::Singular(_))));
        assert!(matches!(p.oracle_solve(), Err(Error::Singular(_))));
    }

    #[test]
    fn rejects_asymmetric_or_mismatched_costs() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticLocalCost::new(asym, DVector::zeros(2), 0.0).is_err());
        assert!(SeparableProblem::new(vec![scalar(1.0), QuadraticLocalCost::zero(2)]).is_err());
    }

    #[test]
    fn lifting_examples() {
        let p = SeparableProblem::new(vec![scalar(0.0), scalar(1.0), scalar(2.0)]).unwrap();
        let path = lift_to_consensus(&p, &Graph::path(3).unwrap()).unwrap();
        assert_eq!(
            path,
            vec![ConsensusConstraint { i: 0, j: 1 }, ConsensusConstraint { i: 1, j: 2 }]
        );
        assert_eq!(lift_to_consensus(&p, &Graph::complete(3).unwrap()).unwrap().len(), 3);
        let split = Graph::new(3, Directedness::Undirected, [(0, 1)]).unwrap();
        let err = lift_to_consensus(&p, &split).unwrap_err();
        assert!(matches!(err, Error::Disconnected(_)));
        assert!(err.to_string().contains("connected"));
        let weak = Graph::new(3, Directedness::Directed, [(0, 1), (2, 1)]).unwrap();
        assert_eq!(lift_to_consensus(&p, &weak).unwrap().len(), 2);
    }

    #[test]
    fn visibility_windows_cover_every_step() {
        for (n, t) in [(1, 5), (3, 16), (10, 16), (20, 16), (4, 2)] {
            let w = visibility_windows(n, t);
            assert_eq!(w.len(), n);
            for step in 0..t {
                assert!(w.iter().any(|s| s.contains(&step)), "N={n} T={t} step {step}");
            }
            for s in &w {
                assert!(s.windows(2).all(|p| p[1] == p[0] + 1), "contiguous");
            }
        }
    }

    #[test]
    fn prior_only_single_step_recovers_prior_mean() {
        let mut spec = TargetTrackingSpec::constant_velocity(1, 1, 0);
        spec.visible_steps = vec![vec![]];
        spec.prior_mean = vec![1.0, -2.0, 0.5, 3.0];
        let p = build_target_tracking(&spec).unwrap();
        let x = p.oracle_solve().unwrap();
        for (a, b) in x.iter().zip(&spec.prior_mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn case_study_dimension() {
        let spec = simulate_target_data(&TargetTrackingSpec::constant_velocity(10, 16, 1)).unwrap();
        let p = build_target_tracking(&spec).unwrap();
        assert_eq!(p.dim(), 64);
        assert_eq!(p.n_robots(), 10);
    }

    #[test]
    fn singular_covariances_are_rejected() {
        let mut spec = TargetTrackingSpec::constant_velocity(2, 3, 0);
        spec.visible_steps = vec![vec![], vec![]];
        spec.process_noise[1] = vec![vec![0.0; 4]; 4];
        assert!(matches!(build_target_tracking(&spec), Err(Error::Singular(_))));

        let mut spec = TargetTrackingSpec::constant_velocity(2, 3, 0);
        spec.visible_steps = vec![vec![], vec![]];
        spec.prior_covariance[0][0] = -1.0;
        assert!(matches!(build_target_tracking(&spec), Err(Error::Singular(_))));

        let mut spec = simulate_target_data(&TargetTrackingSpec::constant_velocity(2, 3, 0)).unwrap();
        let t = spec.visible_steps[0][0];
        spec.measurement_noise[0][t] = vec![vec![0.0; 2]; 2];
        assert!(matches!(build_target_tracking(&spec), Err(Error::Singular(_))));
    }

    #[test]
    fn missing_measurements_are_an_error() {
        let spec = TargetTrackingSpec::constant_velocity(2, 4, 0);
        assert!(matches!(build_target_tracking(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn factored_single_identity_recovers_target() {
        let spec = FactoredLeastSquaresSpec {
            n_robots: 1,
            n: 3,
            factors: vec![to_row_major(&DMatrix::identity(3, 3))],
            weights: vec![Weighting::Dense(to_row_major(&DMatrix::identity(3, 3)))],
            targets: vec![vec![1.0, -2.0, 4.0]],
            seed: 0,
        };
        let x = build_factored_ls(&spec).unwrap().oracle_solve().unwrap();
        assert!((x - DVector::from_vec(vec![1.0, -2.0, 4.0])).amax() < 1e-14);
    }

    #[test]
    fn factored_dimension_mismatch() {
        let mut spec = FactoredLeastSquaresSpec::random(&[5, 6], 3, 0.1, 1);
        spec.targets[1].pop();
        assert!(matches!(build_factored_ls(&spec), Err(Error::Dimension { .. })));
        let mut spec = FactoredLeastSquaresSpec::random(&[5, 6], 3, 0.1, 1);
        spec.n = 4;
        assert!(matches!(build_factored_ls(&spec), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hardware_scale_factored_instance_builds() {
        let spec = FactoredLeastSquaresSpec::random(&[3268, 5422, 3528], 32, 0.1, 3);
        assert_eq!(spec.rows(), vec![3268, 5422, 3528]);
        let p = build_factored_ls(&spec).unwrap();
        assert_eq!((p.n_robots(), p.dim()), (3, 32));
        assert!(p.oracle_solve().is_ok());
    }

    #[test]
    fn tracking_json_uses_symbol_field_names_and_hex_measurements() {
        let spec = simulate_target_data(&TargetTrackingSpec::constant_velocity(2, 3, 5)).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        for key in [
            "\"N\"", "\"T\"", "\"A_t\"", "\"Q_t\"", "\"C_it\"", "\"R_it\"", "\"T_i\"", "\"y_it\"",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
        assert!(text.contains("\"0x"));
        let back: TargetTrackingSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let with_extra = text.replacen('{', "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<TargetTrackingSpec>(&with_extra).is_err());
    }
}
