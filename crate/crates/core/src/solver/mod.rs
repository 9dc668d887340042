//! Sparse Levenberg–Marquardt with robust losses and manifold parameter blocks.

pub mod sparse;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Pose, Tangent};
use sparse::{BlockLayout, CholeskyFactor, SymbolicCholesky};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("residual evaluation failed at the initial state")]
    InvalidInitialState,
    #[error("damping overflow, solver diverged")]
    SolverDiverged,
    #[error("normal equations could not be factored")]
    SingularSystem,
    #[error("information matrix is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Seven parameters `[qw, qx, qy, qz, tx, ty, tz]`, six tangent dimensions,
    /// updated by left multiplication with `exp(delta)`.
    Se3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    Trivial,
    Huber(f64),
    Cauchy(f64),
}

impl RobustLoss {
    /// `(rho(s), rho'(s))` for a squared norm `s`.
    pub fn evaluate(&self, s: f64) -> (f64, f64) {
        match *self {
            RobustLoss::Trivial => (s, 1.0),
            RobustLoss::Huber(d) => {
                let d2 = d * d;
                if s <= d2 {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * d * r - d2, d / r)
                }
            }
            RobustLoss::Cauchy(c) => {
                let c2 = c * c;
                (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
            }
        }
    }

    pub fn rho(&self, s: f64) -> f64 {
        self.evaluate(s).0
    }
}

/// Residuals and per-block Jacobians (rows = residual dim, cols = tangent dim).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub residuals: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait CostFunction: Send + Sync {
    fn num_residuals(&self) -> usize;

    /// Evaluates at the given parameter values. Jacobians are taken with
    /// respect to the tangent of each block. Returns `None` when the residual
    /// is undefined at this point (for example a point behind a camera).
    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation>;
}

#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub values: Vec<f64>,
    pub manifold: Manifold,
    pub fixed: bool,
}

impl ParameterBlock {
    pub fn tangent_dim(&self) -> usize {
        match self.manifold {
            Manifold::Euclidean => self.values.len(),
            Manifold::Se3 => 6,
        }
    }
}

fn retract(manifold: Manifold, values: &[f64], delta: &[f64]) -> Vec<f64> {
    match manifold {
        Manifold::Euclidean => values.iter().zip(delta).map(|(a, b)| a + b).collect(),
        Manifold::Se3 => {
            let d = Tangent::from_column_slice(delta);
            Pose::exp(&d).compose(&Pose::from_params(values)).to_params().to_vec()
        }
    }
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub blocks: Vec<usize>,
    pub loss: RobustLoss,
    /// Square-root information `W` with `W^T W = Omega`; residuals are `W r`.
    pub sqrt_information: Option<DMatrix<f64>>,
}

impl ResidualBlock {
    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let mut e = self.cost.evaluate(params, jacobians)?;
        if let Some(w) = &self.sqrt_information {
            e.residuals = w * &e.residuals;
            for j in e.jacobians.iter_mut() {
                *j = w * &*j;
            }
        }
        if e.residuals.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the step norm is below `param_tol * (|x| + param_tol)`.
    pub param_tol: f64,
    /// Stop when an accepted step decreases the cost by less than this fraction.
    pub function_tol: f64,
    pub initial_lambda: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-12,
            param_tol: 1e-12,
            function_tol: 1e-12,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    NoFreeParameters,
    GradientTolerance,
    ParameterTolerance,
    FunctionTolerance,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    /// Cost after each accepted step, preceded by the initial cost.
    pub cost_history: Vec<f64>,
}

const MAX_LAMBDA: f64 = 1e32;
const MIN_DIAGONAL: f64 = 1e-6;
const MAX_DIAGONAL: f64 = 1e32;

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter_block(&mut self, values: Vec<f64>, manifold: Manifold) -> usize {
        if manifold == Manifold::Se3 {
            assert_eq!(values.len(), 7, "se3 blocks hold 7 parameters");
        }
        self.blocks.push(ParameterBlock {
            values,
            manifold,
            fixed: false,
        });
        self.blocks.len() - 1
    }

    pub fn add_pose_block(&mut self, pose: &Pose) -> usize {
        self.add_parameter_block(pose.to_params().to_vec(), Manifold::Se3)
    }

    pub fn set_fixed(&mut self, block: usize, fixed: bool) {
        self.blocks[block].fixed = fixed;
    }

    pub fn is_fixed(&self, block: usize) -> bool {
        self.blocks[block].fixed
    }

    pub fn block(&self, block: usize) -> &ParameterBlock {
        &self.blocks[block]
    }

    pub fn values(&self, block: usize) -> &[f64] {
        &self.blocks[block].values
    }

    pub fn pose(&self, block: usize) -> Pose {
        Pose::from_params(&self.blocks[block].values)
    }

    pub fn num_parameter_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn add_residual_block(
        &mut self,
        cost: Box<dyn CostFunction>,
        blocks: Vec<usize>,
        loss: RobustLoss,
    ) -> Result<usize, SolverError> {
        self.push_residual(cost, blocks, loss, None)
    }

    /// Adds a residual weighted by the information matrix `omega`.
    pub fn add_residual_block_with_information(
        &mut self,
        cost: Box<dyn CostFunction>,
        blocks: Vec<usize>,
        loss: RobustLoss,
        omega: &DMatrix<f64>,
    ) -> Result<usize, SolverError> {
        let m = cost.num_residuals();
        if omega.nrows() != m || omega.ncols() != m {
            return Err(SolverError::InvalidProblem(format!(
                "information is {}x{}, residual has {m} rows",
                omega.nrows(),
                omega.ncols()
            )));
        }
        let chol = omega.clone().cholesky().ok_or(SolverError::NotPositiveDefinite)?;
        let w = chol.l().transpose();
        self.push_residual(cost, blocks, loss, Some(w))
    }

    fn push_residual(
        &mut self,
        cost: Box<dyn CostFunction>,
        blocks: Vec<usize>,
        loss: RobustLoss,
        w: Option<DMatrix<f64>>,
    ) -> Result<usize, SolverError> {
        if let Some(&b) = blocks.iter().find(|&&b| b >= self.blocks.len()) {
            return Err(SolverError::InvalidProblem(format!("unknown parameter block {b}")));
        }
        self.residuals.push(ResidualBlock {
            cost,
            blocks,
            loss,
            sqrt_information: w,
        });
        Ok(self.residuals.len() - 1)
    }

    fn params_of<'a>(&self, values: &'a [Vec<f64>], r: &ResidualBlock) -> Vec<&'a [f64]> {
        r.blocks.iter().map(|&b| values[b].as_slice()).collect()
    }

    fn evaluate_all(&self, values: &[Vec<f64>], jacobians: bool) -> Option<Vec<Evaluation>> {
        self.residuals
            .par_iter()
            .map(|r| r.evaluate(&self.params_of(values, r), jacobians))
            .collect()
    }

    fn current_values(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    fn total_cost(&self, evals: &[Evaluation]) -> f64 {
        evals
            .iter()
            .zip(&self.residuals)
            .map(|(e, r)| r.loss.rho(e.residuals.norm_squared()))
            .sum()
    }

    /// Cost split into residuals touching a free block and the constant rest.
    fn split_cost(&self, evals: &[Evaluation], active: &[bool]) -> (f64, f64) {
        let mut a = 0.0;
        let mut c = 0.0;
        for ((e, r), &on) in evals.iter().zip(&self.residuals).zip(active) {
            let v = r.loss.rho(e.residuals.norm_squared());
            if on {
                a += v;
            } else {
                c += v;
            }
        }
        (a, c)
    }

    /// Total robustified cost and the stacked whitened residual vector.
    ///
    /// Residual blocks that cannot be evaluated contribute an infinite cost.
    pub fn evaluate(&self) -> (f64, DVector<f64>) {
        let values = self.current_values();
        let mut cost = 0.0;
        let mut stacked = Vec::new();
        for r in &self.residuals {
            match r.evaluate(&self.params_of(&values, r), false) {
                Some(e) => {
                    cost += r.loss.rho(e.residuals.norm_squared());
                    stacked.extend(e.residuals.iter());
                }
                None => {
                    cost = f64::INFINITY;
                    stacked.extend(std::iter::repeat_n(f64::NAN, r.cost.num_residuals()));
                }
            }
        }
        (cost, DVector::from_vec(stacked))
    }

    /// Per-residual-block squared whitened norms (before the robust loss).
    pub fn residual_norms_squared(&self) -> Vec<f64> {
        let values = self.current_values();
        self.residuals
            .par_iter()
            .map(|r| {
                r.evaluate(&self.params_of(&values, r), false)
                    .map_or(f64::INFINITY, |e| e.residuals.norm_squared())
            })
            .collect()
    }

    /// Raw (unwhitened) residual of one block at the current values.
    pub fn residual(&self, residual_block: usize) -> Option<DVector<f64>> {
        let values = self.current_values();
        let r = &self.residuals[residual_block];
        r.cost.evaluate(&self.params_of(&values, r), false).map(|e| e.residuals)
    }

    /// Maximum element-wise relative deviation between analytic and central
    /// finite-difference Jacobians with respect to `block`, over every
    /// residual block that references it.
    pub fn check_jacobian(&self, block: usize, step: f64) -> f64 {
        let values = self.current_values();
        let manifold = self.blocks[block].manifold;
        let dim = self.blocks[block].tangent_dim();
        let mut worst = 0.0f64;
        for r in &self.residuals {
            let Some(slot) = r.blocks.iter().position(|&b| b == block) else {
                continue;
            };
            let Some(analytic) = r.evaluate(&self.params_of(&values, r), true) else {
                continue;
            };
            let ja = &analytic.jacobians[slot];
            for k in 0..dim {
                let mut delta = vec![0.0; dim];
                delta[k] = step;
                let mut plus = values.clone();
                plus[block] = retract(manifold, &values[block], &delta);
                delta[k] = -step;
                let mut minus = values.clone();
                minus[block] = retract(manifold, &values[block], &delta);
                let (Some(ep), Some(em)) = (
                    r.evaluate(&self.params_of(&plus, r), false),
                    r.evaluate(&self.params_of(&minus, r), false),
                ) else {
                    return f64::INFINITY;
                };
                for i in 0..ep.residuals.len() {
                    let numeric = (ep.residuals[i] - em.residuals[i]) / (2.0 * step);
                    let a = ja[(i, k)];
                    let dev = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                    worst = worst.max(dev);
                }
            }
        }
        worst
    }

    pub fn solve(&mut self, options: &SolverOptions) -> Result<SolverReport, SolverError> {
        let t_start = std::time::Instant::now();
        let free: Vec<usize> = (0..self.blocks.len()).filter(|&b| !self.blocks[b].fixed).collect();
        let mut values = self.current_values();
        let evals = self
            .evaluate_all(&values, true)
            .ok_or(SolverError::InvalidInitialState)?;
        let total = self.total_cost(&evals);
        let mut report = SolverReport {
            initial_cost: total,
            final_cost: total,
            iterations: 0,
            accepted_steps: 0,
            termination: Termination::NoFreeParameters,
            cost_history: vec![total],
        };
        if free.is_empty() {
            return Ok(report);
        }

        let mut free_id = vec![usize::MAX; self.blocks.len()];
        for (i, &b) in free.iter().enumerate() {
            free_id[b] = i;
        }
        let dims: Vec<usize> = free.iter().map(|&b| self.blocks[b].tangent_dim()).collect();
        let active: Vec<bool> = self
            .residuals
            .iter()
            .map(|r| r.blocks.iter().any(|&b| free_id[b] != usize::MAX))
            .collect();
        // acceptance compares only the part of the cost that can change, so a
        // large constant term does not swallow small decreases
        let (mut cost, constant_cost) = self.split_cost(&evals, &active);
        let mut pairs = Vec::new();
        for r in &self.residuals {
            let fb: Vec<usize> = r.blocks.iter().map(|&b| free_id[b]).filter(|&f| f != usize::MAX).collect();
            for (i, &a) in fb.iter().enumerate() {
                for &b in &fb[i..] {
                    pairs.push((a.min(b), a.max(b)));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut layout = BlockLayout::new(dims, &pairs);
        let symbolic = SymbolicCholesky::analyze(&layout.pattern);
        let n = layout.n;
        let t_setup = std::time::Instant::now();
        let (mut t_asm, mut t_fac, mut t_eval) = (0.0, 0.0, 0.0);

        let mut evals = evals;
        let mut lambda = options.initial_lambda;
        report.termination = Termination::MaxIterations;
        let mut gradient = vec![0.0; n];
        'outer: while report.iterations < options.max_iters {
            // normal equations, accumulated in residual order
            let t0 = std::time::Instant::now();
            layout.clear();
            gradient.iter_mut().for_each(|g| *g = 0.0);
            for (e, r) in evals.iter().zip(&self.residuals) {
                let s = e.residuals.norm_squared();
                let w = r.loss.evaluate(s).1.sqrt();
                for (i, &bi) in r.blocks.iter().enumerate() {
                    let fi = free_id[bi];
                    if fi == usize::MAX {
                        continue;
                    }
                    let ji = &e.jacobians[i] * w;
                    let gi = ji.transpose() * (&e.residuals * w);
                    let off = layout.offsets[fi];
                    for k in 0..gi.len() {
                        gradient[off + k] += gi[k];
                    }
                    for (j, &bj) in r.blocks.iter().enumerate() {
                        let fj = free_id[bj];
                        if fj == usize::MAX {
                            continue;
                        }
                        // diagonal blocks keep only their upper part, so a block
                        // referenced twice sums to the symmetric total
                        if fi == fj || layout.position[fi] < layout.position[fj] {
                            let jj = &e.jacobians[j] * w;
                            layout.add_block(fi, fj, &(ji.transpose() * jj));
                        }
                    }
                }
            }
            t_asm += t0.elapsed().as_secs_f64();
            let gmax = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if gmax <= options.grad_tol {
                report.termination = Termination::GradientTolerance;
                break;
            }
            let diag: Vec<f64> = (0..n)
                .map(|j| layout.pattern.values[layout.pattern.diag_index(j)])
                .collect();

            loop {
                if report.iterations >= options.max_iters {
                    break 'outer;
                }
                report.iterations += 1;
                let mut damped = layout.pattern.clone();
                for (j, d) in diag.iter().enumerate() {
                    let idx = damped.diag_index(j);
                    damped.values[idx] += lambda * d.clamp(MIN_DIAGONAL, MAX_DIAGONAL);
                }
                let t1 = std::time::Instant::now();
                let factor = CholeskyFactor::factor(&damped, &symbolic);
                t_fac += t1.elapsed().as_secs_f64();
                let Some(factor) = factor else {
                    lambda *= 10.0;
                    if lambda > MAX_LAMBDA {
                        return Err(SolverError::SingularSystem);
                    }
                    continue;
                };
                let mut step: Vec<f64> = gradient.iter().map(|g| -g).collect();
                factor.solve_in_place(&mut step);

                let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                let x_norm = free
                    .iter()
                    .flat_map(|&b| values[b].iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if step_norm <= options.param_tol * (x_norm + options.param_tol) {
                    report.termination = Termination::ParameterTolerance;
                    break 'outer;
                }

                let mut candidate = values.clone();
                for (fi, &b) in free.iter().enumerate() {
                    let off = layout.offsets[fi];
                    let d = &step[off..off + layout.dims[fi]];
                    candidate[b] = retract(self.blocks[b].manifold, &values[b], d);
                }
                let t2 = std::time::Instant::now();
                let new_evals = self.evaluate_all(&candidate, true);
                t_eval += t2.elapsed().as_secs_f64();
                let new_cost = new_evals
                    .as_ref()
                    .map_or(f64::INFINITY, |e| self.split_cost(e, &active).0);
                if !(new_cost < cost) {
                    lambda *= 10.0;
                    if lambda > MAX_LAMBDA {
                        return Err(SolverError::SolverDiverged);
                    }
                    continue;
                }
                let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                values = candidate;
                evals = new_evals.unwrap();
                cost = new_cost;
                lambda = (lambda * 0.5).max(1e-16);
                report.accepted_steps += 1;
                report.cost_history.push(cost + constant_cost);
                if decrease < options.function_tol {
                    report.termination = Termination::FunctionTolerance;
                    break 'outer;
                }
                break;
            }
        }

        for &b in &free {
            self.blocks[b].values = std::mem::take(&mut values[b]);
        }
        report.final_cost = cost + constant_cost;
        log::debug!(
            "solve: n {n} nnzL {} setup {:.2}s asm {t_asm:.2}s fac {t_fac:.2}s eval {t_eval:.2}s total {:.2}s iters {}",
            symbolic.factor_nnz(),
            t_setup.duration_since(t_start).as_secs_f64(),
            t_start.elapsed().as_secs_f64(),
            report.iterations
        );
        Ok(report)
    }
}
