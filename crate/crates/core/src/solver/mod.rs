//! Manifold-aware Levenberg–Marquardt over sparse normal equations.
//!
//! Residual blocks decide at every evaluation which parameter blocks they
//! touch ([`Plan`]), so blocks whose support depends on a parameter (spline
//! segments selected by a time offset) are handled naturally. Normal
//! equations are stored in envelope form with free blocks ordered by their
//! `order_key`; spline control points carry their knot time and the dense
//! sensor-parameter border comes last.

pub mod autodiff;
pub mod envelope;
pub mod loss;
pub mod manifold;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use autodiff::{finite_difference, AutoDiff, Residual};
pub use envelope::EnvelopeMatrix;
pub use loss::Loss;
pub use manifold::Manifold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub usize);

#[derive(Clone, Debug)]
pub struct ParameterBlock {
    pub name: String,
    pub manifold: Manifold,
    pub values: Vec<f64>,
    pub constant: bool,
    /// Per-component box bounds for Euclidean blocks.
    pub bounds: Option<(f64, f64)>,
    /// Elimination order key; smaller keys are eliminated first.
    pub order_key: f64,
    /// Set when a retraction had to be clamped to the bounds.
    pub at_bound: bool,
}

/// Parameter blocks touched by one residual evaluation, plus opaque
/// residual-specific data (typically a spline segment index).
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub blocks: Vec<BlockId>,
    pub aux: [i64; 2],
}

impl Plan {
    pub fn new(blocks: Vec<BlockId>) -> Self {
        Self { blocks, aux: [0; 2] }
    }
}

pub trait CostFunction: Send + Sync {
    fn kind(&self) -> &'static str;
    /// `None` drops the residual for the current state (e.g. outside spline
    /// support).
    fn plan(&self, blocks: &[ParameterBlock]) -> Option<Plan>;
    fn num_residuals(&self, plan: &Plan) -> usize;
    /// Rows per robust-loss group; 0 means the whole block is one group.
    fn loss_stride(&self) -> usize {
        0
    }
    fn evaluate(&self, plan: &Plan, params: &[&[f64]], out: &mut [f64]) -> bool;
    /// Residuals plus the row-major Jacobian with respect to the tangent
    /// coordinates of the blocks flagged in `free`, in plan order.
    fn linearize(
        &self,
        plan: &Plan,
        params: &[&[f64]],
        manifolds: &[Manifold],
        free: &[bool],
        out: &mut [f64],
        jac: &mut [f64],
    ) -> bool {
        finite_difference(self, plan, params, manifolds, free, out, jac)
    }
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub loss: Loss,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub initial_lambda: f64,
    /// Residual blocks linearized per parallel batch.
    pub chunk_size: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            function_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            initial_lambda: 1e-4,
            chunk_size: 2048,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    FunctionTolerance,
    GradientTolerance,
    ParameterTolerance,
    MaxIterations,
    NoFreeParameters,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_max_norm: f64,
    pub lambda: f64,
    pub step_norm: f64,
    /// Actual over predicted cost decrease.
    pub gain_ratio: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
    /// Residual blocks dropped in the final evaluation, by kind.
    pub dropped: BTreeMap<String, usize>,
    /// Blocks whose values were clamped to their bounds.
    pub bounded_blocks: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem has no residual blocks")]
    NoResiduals,
    #[error("non-finite residual in {kind} block #{index}")]
    NonFinite { kind: String, index: usize },
    #[error("rank-deficient normal equations; unconstrained blocks: {}", blocks.join(", "))]
    RankDeficient { blocks: Vec<String> },
}

/// Free-block layout of the tangent vector.
#[derive(Clone, Debug)]
pub struct Layout {
    /// Scalar offset of each block, `None` for constant blocks.
    pub offsets: Vec<Option<usize>>,
    /// Free blocks in elimination order.
    pub order: Vec<BlockId>,
    pub dim: usize,
}

/// Normal equations `H δ = -g` at one state.
pub struct Linearization {
    pub cost: f64,
    pub gradient: Vec<f64>,
    pub hessian: EnvelopeMatrix,
    pub dropped: BTreeMap<String, usize>,
}

/// Block occupancy of the information matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsePattern {
    pub names: Vec<String>,
    /// Symmetric block-occupancy matrix in elimination order.
    pub occupied: Vec<Vec<bool>>,
}

#[derive(Default)]
pub struct Problem {
    pub blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

struct Evaluated {
    free_cols: Vec<usize>,
    rows: usize,
    res: Vec<f64>,
    jac: Vec<f64>,
    rho: f64,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, manifold: Manifold, values: Vec<f64>, order_key: f64) -> BlockId {
        assert_eq!(values.len(), manifold.ambient_dim(), "value length must match manifold");
        self.blocks.push(ParameterBlock {
            name: name.into(),
            manifold,
            values,
            constant: false,
            bounds: None,
            order_key,
            at_bound: false,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_residual(&mut self, cost: Box<dyn CostFunction>, loss: Loss) {
        self.residuals.push(ResidualBlock { cost, loss });
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.blocks[id.0].constant = constant;
    }

    pub fn set_bounds(&mut self, id: BlockId, lo: f64, hi: f64) {
        self.blocks[id.0].bounds = Some((lo, hi));
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].values
    }

    pub fn set_values(&mut self, id: BlockId, v: &[f64]) {
        self.blocks[id.0].values.copy_from_slice(v);
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn layout(&self) -> Layout {
        let mut order: Vec<BlockId> = (0..self.blocks.len()).filter(|&i| !self.blocks[i].constant).map(BlockId).collect();
        order.sort_by(|a, b| {
            self.blocks[a.0].order_key.total_cmp(&self.blocks[b.0].order_key).then(a.0.cmp(&b.0))
        });
        let mut offsets = vec![None; self.blocks.len()];
        let mut dim = 0;
        for id in &order {
            offsets[id.0] = Some(dim);
            dim += self.blocks[id.0].manifold.tangent_dim();
        }
        Layout { offsets, order, dim }
    }

    fn params_of<'a>(blocks: &'a [ParameterBlock], plan: &Plan) -> Vec<&'a [f64]> {
        plan.blocks.iter().map(|b| blocks[b.0].values.as_slice()).collect()
    }

    /// Robustified cost `½ Σ ρ(|r|²)` and dropped-block counts.
    pub fn cost_of(&self, blocks: &[ParameterBlock]) -> Result<(f64, BTreeMap<String, usize>), SolverError> {
        let parts: Vec<Result<Option<f64>, SolverError>> = self
            .residuals
            .par_iter()
            .enumerate()
            .map(|(index, rb)| {
                let Some(plan) = rb.cost.plan(blocks) else { return Ok(None) };
                let mut r = vec![0.0; rb.cost.num_residuals(&plan)];
                let params = Self::params_of(blocks, &plan);
                if !rb.cost.evaluate(&plan, &params, &mut r) || r.iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFinite { kind: rb.cost.kind().into(), index });
                }
                Ok(Some(group_rho(&rb.loss, rb.cost.loss_stride(), &mut r, None)))
            })
            .collect();
        let mut cost = 0.0;
        let mut dropped = BTreeMap::new();
        for (p, rb) in parts.into_iter().zip(&self.residuals) {
            match p? {
                Some(rho) => cost += 0.5 * rho,
                None => *dropped.entry(rb.cost.kind().to_string()).or_insert(0) += 1,
            }
        }
        Ok((cost, dropped))
    }

    pub fn cost(&self) -> Result<f64, SolverError> {
        Ok(self.cost_of(&self.blocks)?.0)
    }

    /// Whitened residuals (before robust reweighting) grouped by kind.
    pub fn residuals_by_kind(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rb in &self.residuals {
            if let Some(plan) = rb.cost.plan(&self.blocks) {
                let mut r = vec![0.0; rb.cost.num_residuals(&plan)];
                let params = Self::params_of(&self.blocks, &plan);
                if rb.cost.evaluate(&plan, &params, &mut r) {
                    out.entry(rb.cost.kind().to_string()).or_default().extend(r);
                }
            }
        }
        out
    }

    /// Evaluates one residual block at the current state.
    pub fn evaluate_block(&self, index: usize) -> Option<Vec<f64>> {
        let rb = &self.residuals[index];
        let plan = rb.cost.plan(&self.blocks)?;
        let mut r = vec![0.0; rb.cost.num_residuals(&plan)];
        let params = Self::params_of(&self.blocks, &plan);
        rb.cost.evaluate(&plan, &params, &mut r).then_some(r)
    }

    /// Primary and finite-difference Jacobians of one residual block with
    /// respect to all its non-constant blocks.
    pub fn jacobian_pair(&self, index: usize) -> Option<(Vec<f64>, Vec<f64>, usize)> {
        let rb = &self.residuals[index];
        let plan = rb.cost.plan(&self.blocks)?;
        let params = Self::params_of(&self.blocks, &plan);
        let manifolds: Vec<Manifold> = plan.blocks.iter().map(|b| self.blocks[b.0].manifold).collect();
        let free: Vec<bool> = plan.blocks.iter().map(|b| !self.blocks[b.0].constant).collect();
        let m = rb.cost.num_residuals(&plan);
        let n: usize = manifolds.iter().zip(&free).filter(|(_, f)| **f).map(|(m, _)| m.tangent_dim()).sum();
        let mut r = vec![0.0; m];
        let mut ja = vec![0.0; m * n];
        let mut jf = vec![0.0; m * n];
        if !rb.cost.linearize(&plan, &params, &manifolds, &free, &mut r, &mut ja) {
            return None;
        }
        if !finite_difference(rb.cost.as_ref(), &plan, &params, &manifolds, &free, &mut r, &mut jf) {
            return None;
        }
        Some((ja, jf, n))
    }

    fn plans(&self, blocks: &[ParameterBlock]) -> Vec<Option<Plan>> {
        self.residuals.iter().map(|rb| rb.cost.plan(blocks)).collect()
    }

    fn envelope_first(&self, layout: &Layout, plans: &[Option<Plan>]) -> Vec<usize> {
        let mut first: Vec<usize> = (0..layout.dim).collect();
        for plan in plans.iter().flatten() {
            let offs: Vec<(usize, usize)> = plan
                .blocks
                .iter()
                .filter_map(|b| layout.offsets[b.0].map(|o| (o, self.blocks[b.0].manifold.tangent_dim())))
                .collect();
            let Some(m) = offs.iter().map(|(o, _)| *o).min() else { continue };
            for (o, td) in offs {
                for i in o..o + td {
                    first[i] = first[i].min(m);
                }
            }
        }
        first
    }

    /// Builds `g = Jᵀr` and `H = JᵀJ` at the current state.
    pub fn linearize(&self, layout: &Layout, chunk_size: usize) -> Result<Linearization, SolverError> {
        let plans = self.plans(&self.blocks);
        let mut hessian = EnvelopeMatrix::new(self.envelope_first(layout, &plans));
        let mut gradient = vec![0.0; layout.dim];
        let mut cost = 0.0;
        let mut dropped = BTreeMap::new();
        let indices: Vec<usize> = (0..self.residuals.len()).collect();
        for chunk in indices.chunks(chunk_size.max(1)) {
            let evaluated: Vec<Result<Option<Evaluated>, SolverError>> =
                chunk.par_iter().map(|&i| self.linearize_one(i, plans[i].as_ref(), layout)).collect();
            for (e, &i) in evaluated.into_iter().zip(chunk) {
                let Some(e) = e? else {
                    *dropped.entry(self.residuals[i].cost.kind().to_string()).or_insert(0) += 1;
                    continue;
                };
                cost += 0.5 * e.rho;
                accumulate(&e, &mut gradient, &mut hessian);
            }
        }
        Ok(Linearization { cost, gradient, hessian, dropped })
    }

    fn linearize_one(&self, index: usize, plan: Option<&Plan>, layout: &Layout) -> Result<Option<Evaluated>, SolverError> {
        let Some(plan) = plan else { return Ok(None) };
        let rb = &self.residuals[index];
        let params = Self::params_of(&self.blocks, plan);
        let manifolds: Vec<Manifold> = plan.blocks.iter().map(|b| self.blocks[b.0].manifold).collect();
        let free: Vec<bool> = plan.blocks.iter().map(|b| layout.offsets[b.0].is_some()).collect();
        let mut free_cols = Vec::new();
        for b in &plan.blocks {
            if let Some(o) = layout.offsets[b.0] {
                free_cols.extend(o..o + self.blocks[b.0].manifold.tangent_dim());
            }
        }
        let rows = rb.cost.num_residuals(plan);
        let n = free_cols.len();
        let mut res = vec![0.0; rows];
        let mut jac = vec![0.0; rows * n];
        let ok = rb.cost.linearize(plan, &params, &manifolds, &free, &mut res, &mut jac);
        if !ok || res.iter().chain(&jac).any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { kind: rb.cost.kind().into(), index });
        }
        let rho = group_rho(&rb.loss, rb.cost.loss_stride(), &mut res, Some((&mut jac, n)));
        Ok(Some(Evaluated { free_cols, rows, res, jac, rho }))
    }

    /// Block occupancy of `JᵀJ` over free blocks at the current state.
    pub fn sparsity(&self) -> SparsePattern {
        let layout = self.layout();
        let pos: BTreeMap<usize, usize> = layout.order.iter().enumerate().map(|(k, b)| (b.0, k)).collect();
        let n = layout.order.len();
        let mut occupied = vec![vec![false; n]; n];
        for plan in self.plans(&self.blocks).iter().flatten() {
            let idx: Vec<usize> = plan.blocks.iter().filter_map(|b| pos.get(&b.0).copied()).collect();
            for &a in &idx {
                for &b in &idx {
                    occupied[a][b] = true;
                }
            }
        }
        let names = layout.order.iter().map(|b| self.blocks[b.0].name.clone()).collect();
        SparsePattern { names, occupied }
    }

    /// Frobenius norms of the blocks of `JᵀJ` (elimination order).
    pub fn block_magnitudes(&self) -> Result<(Vec<String>, Vec<Vec<f64>>), SolverError> {
        let layout = self.layout();
        let lin = self.linearize(&layout, 4096)?;
        let ranges: Vec<(usize, usize)> = layout
            .order
            .iter()
            .map(|b| {
                let o = layout.offsets[b.0].unwrap();
                (o, o + self.blocks[b.0].manifold.tangent_dim())
            })
            .collect();
        let mags = ranges
            .iter()
            .map(|&(a0, a1)| {
                ranges
                    .iter()
                    .map(|&(b0, b1)| {
                        let mut s = 0.0;
                        for i in a0..a1 {
                            for j in b0..b1 {
                                s += lin.hessian.get(i, j).powi(2);
                            }
                        }
                        s.sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok((layout.order.iter().map(|b| self.blocks[b.0].name.clone()).collect(), mags))
    }

    /// Blocks whose tangent directions are (numerically) unconstrained by the
    /// undamped normal equations at the current state.
    pub fn rank_deficient_blocks(&self, tol: f64) -> Result<Vec<String>, SolverError> {
        let layout = self.layout();
        let lin = self.linearize(&layout, 4096)?;
        let rows = deficient_rows(lin.hessian, tol);
        Ok(self.names_for_rows(&layout, &rows))
    }

    fn names_for_rows(&self, layout: &Layout, rows: &[usize]) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for &r in rows {
            for b in &layout.order {
                let o = layout.offsets[b.0].unwrap();
                if r >= o && r < o + self.blocks[b.0].manifold.tangent_dim() {
                    let name = &self.blocks[b.0].name;
                    if !names.contains(name) {
                        names.push(name.clone());
                    }
                }
            }
        }
        names
    }

    /// Scalar coordinates sitting on a bound with the descent direction
    /// pointing outward.
    fn active_bounds(&self, layout: &Layout, gradient: &[f64]) -> Vec<usize> {
        let mut active = Vec::new();
        for b in &layout.order {
            let blk = &self.blocks[b.0];
            let (Some((lo, hi)), Manifold::Euclidean(n)) = (blk.bounds, blk.manifold) else { continue };
            let o = layout.offsets[b.0].unwrap();
            for c in 0..n {
                let v = blk.values[c];
                let g = gradient[o + c];
                if (v >= hi && g < 0.0) || (v <= lo && g > 0.0) {
                    active.push(o + c);
                }
            }
        }
        active
    }

    fn retract(&self, layout: &Layout, delta: &[f64]) -> Vec<ParameterBlock> {
        let mut blocks = self.blocks.clone();
        for b in &layout.order {
            let blk = &mut blocks[b.0];
            let o = layout.offsets[b.0].unwrap();
            let td = blk.manifold.tangent_dim();
            let mut out = vec![0.0; blk.values.len()];
            blk.manifold.plus(&blk.values, &delta[o..o + td], &mut out);
            if let Some((lo, hi)) = blk.bounds {
                for v in &mut out {
                    if *v < lo || *v > hi {
                        *v = v.clamp(lo, hi);
                        blk.at_bound = true;
                    }
                }
            }
            blk.values = out;
        }
        blocks
    }

    pub fn solve(&mut self, opts: &SolverOptions) -> Result<SolveSummary, SolverError> {
        if self.residuals.is_empty() {
            return Err(SolverError::NoResiduals);
        }
        for b in &mut self.blocks {
            b.at_bound = false;
        }
        let layout = self.layout();
        let (initial_cost, dropped) = self.cost_of(&self.blocks)?;
        let mut summary = SolveSummary {
            initial_cost,
            final_cost: initial_cost,
            iterations: 0,
            termination: Termination::NoFreeParameters,
            converged: true,
            log: Vec::new(),
            dropped,
            bounded_blocks: Vec::new(),
        };
        if layout.dim == 0 {
            return Ok(summary);
        }
        let mut lambda = opts.initial_lambda;
        let mut lin = self.linearize(&layout, opts.chunk_size)?;
        let mut iteration = 0;
        let termination = loop {
            let pinned = self.active_bounds(&layout, &lin.gradient);
            let gmax = lin
                .gradient
                .iter()
                .enumerate()
                .filter(|(i, _)| !pinned.contains(i))
                .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            if gmax < opts.gradient_tolerance {
                break Termination::GradientTolerance;
            }
            if iteration >= opts.max_iterations {
                break Termination::MaxIterations;
            }
            iteration += 1;
            let active = self.active_bounds(&layout, &lin.gradient);
            let mut diag: Vec<f64> = lin.hessian.diagonal().iter().map(|d| lambda * d.clamp(1e-6, 1e32)).collect();
            let mut neg_g: Vec<f64> = lin.gradient.iter().map(|v| -v).collect();
            for &i in &active {
                // Freeze coordinates pressed against their bound.
                diag[i] += 1e30;
                neg_g[i] = 0.0;
            }
            let mut damped = lin.hessian.clone();
            damped.add_diagonal(&diag);
            if let Err(e) = damped.cholesky_in_place(1e-15) {
                summary.log.push(IterationRecord {
                    iteration,
                    cost: lin.cost,
                    gradient_max_norm: gmax,
                    lambda,
                    step_norm: 0.0,
                    gain_ratio: 0.0,
                    accepted: false,
                });
                lambda *= 10.0;
                if lambda > 1e16 {
                    let blocks = self.names_for_rows(&layout, &[e.row]);
                    return Err(SolverError::RankDeficient { blocks });
                }
                continue;
            }
            let delta = damped.cholesky_solve(&neg_g);
            let step_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x_norm = layout
                .order
                .iter()
                .flat_map(|b| self.blocks[b.0].values.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if step_norm <= opts.parameter_tolerance * (x_norm + opts.parameter_tolerance) {
                break Termination::ParameterTolerance;
            }
            let hd = lin.hessian.mul_vec(&delta);
            let predicted: f64 = -delta.iter().zip(&lin.gradient).map(|(d, g)| d * g).sum::<f64>()
                - 0.5 * delta.iter().zip(&hd).map(|(d, h)| d * h).sum::<f64>();
            let trial = self.retract(&layout, &delta);
            let new_cost = self.cost_of(&trial).map(|(c, _)| c).unwrap_or(f64::INFINITY);
            let actual = lin.cost - new_cost;
            let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };
            let mut accepted = ratio > 1e-3 && new_cost.is_finite();
            let mut trial_lin = None;
            let noise = 8.0 * f64::EPSILON * lin.cost;
            if !accepted && new_cost <= lin.cost + noise && predicted <= noise {
                // Cost changes are below round-off; judge the step by the gradient instead.
                let saved = std::mem::replace(&mut self.blocks, trial.clone());
                let candidate = self.linearize(&layout, opts.chunk_size);
                self.blocks = saved;
                let candidate = candidate?;
                let cmax = candidate.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if cmax < gmax {
                    accepted = true;
                    trial_lin = Some(candidate);
                }
            }
            summary.log.push(IterationRecord {
                iteration,
                cost: if accepted { new_cost } else { lin.cost },
                gradient_max_norm: gmax,
                lambda,
                step_norm,
                gain_ratio: ratio,
                accepted,
            });
            let mut trial = trial;
            let mut actual = actual;
            if accepted && trial_lin.is_none() && ratio > EXTEND_RATIO {
                // The model overestimates the curvature along the step, as
                // reweighted robust losses do. A parabola through the model
                // slope and the actual cost puts the minimum at 1/(2 - ratio);
                // probe there, then keep doubling while the cost drops.
                let mut scale = if ratio < 2.0 { (1.0 / (2.0 - ratio)).min(MAX_EXTENSION) } else { MAX_EXTENSION };
                let mut best = new_cost;
                let mut best_scale = 1.0;
                while scale > best_scale && scale <= MAX_EXTENSION {
                    let longer: Vec<f64> = delta.iter().map(|d| d * scale).collect();
                    let cand = self.retract(&layout, &longer);
                    match self.cost_of(&cand) {
                        Ok((c, _)) if c < best => {
                            best = c;
                            best_scale = scale;
                            trial = cand;
                            scale *= 2.0;
                        }
                        _ => break,
                    }
                }
                actual = lin.cost - best;
                if let Some(last) = summary.log.last_mut() {
                    last.cost = best;
                    last.step_norm = step_norm * best_scale;
                }
            }
            if accepted {
                let old_cost = lin.cost;
                self.blocks = trial;
                lambda = (lambda * 0.5).max(1e-12);
                lin = match trial_lin {
                    Some(l) => l,
                    None => self.linearize(&layout, opts.chunk_size)?,
                };
                if actual <= opts.function_tolerance * old_cost && predicted > 8.0 * f64::EPSILON * old_cost {
                    break Termination::FunctionTolerance;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break Termination::ParameterTolerance;
                }
            }
        };
        summary.iterations = iteration;
        summary.final_cost = lin.cost;
        summary.termination = termination;
        summary.converged = termination != Termination::MaxIterations;
        summary.dropped = lin.dropped.clone();
        summary.bounded_blocks = self.blocks.iter().filter(|b| b.at_bound).map(|b| b.name.clone()).collect();
        Ok(summary)
    }
}

/// Gain ratio above which an accepted step is extended.
const EXTEND_RATIO: f64 = 1.2;
/// Largest step multiple tried by the extension.
const MAX_EXTENSION: f64 = 64.0;

fn group_rho(loss: &Loss, stride: usize, r: &mut [f64], jac: Option<(&mut [f64], usize)>) -> f64 {
    let m = r.len();
    let stride = if stride == 0 { m.max(1) } else { stride };
    let mut rho = 0.0;
    match jac {
        Some((j, n)) => {
            for (rg, jg) in r.chunks_mut(stride).zip(j.chunks_mut(stride * n.max(1))) {
                rho += loss.correct(rg, Some((jg, n)));
            }
        }
        None => {
            for rg in r.chunks_mut(stride) {
                rho += loss.correct(rg, None);
            }
        }
    }
    rho
}

fn accumulate(e: &Evaluated, gradient: &mut [f64], hessian: &mut EnvelopeMatrix) {
    let n = e.free_cols.len();
    if n == 0 {
        return;
    }
    for (a, &ca) in e.free_cols.iter().enumerate() {
        let mut g = 0.0;
        for r in 0..e.rows {
            g += e.jac[r * n + a] * e.res[r];
        }
        gradient[ca] += g;
        for (b, &cb) in e.free_cols.iter().enumerate().take(a + 1) {
            let mut h = 0.0;
            for r in 0..e.rows {
                h += e.jac[r * n + a] * e.jac[r * n + b];
            }
            if h != 0.0 {
                if cb <= ca {
                    hessian.add(ca, cb, h);
                } else {
                    hessian.add(cb, ca, h);
                }
            }
        }
    }
}

/// Cholesky with pivot dropping; returns rows whose pivot fell below
/// `tol` relative to the original diagonal.
fn deficient_rows(mut h: EnvelopeMatrix, tol: f64) -> Vec<usize> {
    let mut rows = Vec::new();
    loop {
        let mut trial = h.clone();
        match trial.cholesky_in_place(tol) {
            Ok(()) => return rows,
            Err(e) => {
                rows.push(e.row);
                // Pin the offending direction and retry.
                let scale = h.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                h.add(e.row, e.row, scale);
            }
        }
    }
}
