//! Levenberg–Marquardt over residual blocks with a robust Huber loss.
//!
//! Parameter blocks live either in a Euclidean space, on SO(3) (updated by
//! right-multiplicative exponential retraction), or on a scalar half-line with
//! a lower bound (updates are clamped). Each residual block is whitened by its
//! covariance and down-weighted through iteratively reweighted least squares
//! when its whitened norm exceeds the Huber threshold.
//!
//! Blocks flagged with [`Problem::set_eliminated`] are removed by a Schur
//! complement before solving for the remaining blocks, which is the usual
//! landmark elimination of bundle adjustment. A residual may touch at most
//! one eliminated block; otherwise the solver falls back to a dense system.

use std::fmt;

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("problem has no free parameter blocks")]
    NoFreeParameters,
    #[error("residual block {residual}: {reason}")]
    InvalidResidual { residual: usize, reason: String },
    #[error("numerical failure in residual block {residual} (parameter blocks {blocks:?}): {reason}")]
    NumericalFailure { residual: usize, blocks: Vec<usize>, reason: String },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

/// Failure to evaluate a residual at a given state.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("point at or behind the camera (depth {0:e})")]
    DegenerateDepth(f64),
    #[error("non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manifold {
    Euclidean,
    So3,
    /// Scalar block clamped to `>= bound` after every update.
    LowerBounded(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Vector(DVector<f64>),
    Rotation(Rotation3<f64>),
}

impl BlockValue {
    pub fn vector(&self) -> &DVector<f64> {
        match self {
            BlockValue::Vector(v) => v,
            BlockValue::Rotation(_) => panic!("expected a vector block"),
        }
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        match self {
            BlockValue::Rotation(r) => r,
            BlockValue::Vector(_) => panic!("expected a rotation block"),
        }
    }

    pub fn scalar(&self) -> f64 {
        self.vector()[0]
    }

    fn is_finite(&self) -> bool {
        match self {
            BlockValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            BlockValue::Rotation(r) => r.matrix().iter().all(|x| x.is_finite()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub value: BlockValue,
    pub manifold: Manifold,
    pub constant: bool,
    pub eliminated: bool,
}

impl ParameterBlock {
    pub fn tangent_dim(&self) -> usize {
        match &self.value {
            BlockValue::Vector(v) => v.len(),
            BlockValue::Rotation(_) => 3,
        }
    }

    /// `value ⊞ delta`.
    pub fn retract(&self, delta: &[f64]) -> BlockValue {
        match (&self.value, self.manifold) {
            (BlockValue::Rotation(r), _) => {
                let mut out = r * Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
                out.renormalize();
                BlockValue::Rotation(out)
            }
            (BlockValue::Vector(v), Manifold::LowerBounded(lo)) => {
                BlockValue::Vector(DVector::from_iterator(v.len(), v.iter().zip(delta).map(|(a, d)| (a + d).max(lo))))
            }
            (BlockValue::Vector(v), _) => {
                BlockValue::Vector(DVector::from_iterator(v.len(), v.iter().zip(delta).map(|(a, d)| a + d)))
            }
        }
    }
}

/// A residual function of one or more parameter blocks.
///
/// Jacobians are taken with respect to each block's tangent space: for SO(3)
/// blocks the perturbation is `R * exp([delta]x)`.
pub trait CostFunction: Send + Sync {
    fn residual_dim(&self) -> usize;

    /// Tangent dimension expected for each parameter block, in order.
    fn block_dims(&self) -> Vec<usize>;

    /// Evaluates the residual and, when requested, writes one
    /// `residual_dim x block_dim` Jacobian per parameter block.
    fn evaluate(
        &self,
        params: &[&BlockValue],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> Result<DVector<f64>, EvalError>;
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub blocks: Vec<BlockId>,
    /// Whitening matrix `W` with `W^T W = Sigma^-1`.
    pub whitening: DMatrix<f64>,
    pub robust: bool,
    /// Set when the whitening is a multiple of the identity.
    scale: Option<f64>,
}

impl ResidualBlock {
    fn whiten(&self, e: DVector<f64>) -> DVector<f64> {
        match self.scale {
            Some(c) => e * c,
            None => &self.whitening * e,
        }
    }

    /// Whitens `j` in place and multiplies it by `factor`.
    fn whiten_jacobian(&self, j: &mut DMatrix<f64>, factor: f64) {
        match self.scale {
            Some(c) => *j *= c * factor,
            None => *j = (&self.whitening * &*j) * factor,
        }
    }
}

impl fmt::Debug for ResidualBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualBlock")
            .field("blocks", &self.blocks)
            .field("robust", &self.robust)
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vector_block(&mut self, value: DVector<f64>) -> BlockId {
        self.push_block(BlockValue::Vector(value), Manifold::Euclidean)
    }

    pub fn add_rotation_block(&mut self, value: Rotation3<f64>) -> BlockId {
        self.push_block(BlockValue::Rotation(value), Manifold::So3)
    }

    /// Scalar block clamped from below.
    pub fn add_bounded_scalar(&mut self, value: f64, lower: f64) -> BlockId {
        self.push_block(BlockValue::Vector(DVector::from_element(1, value.max(lower))), Manifold::LowerBounded(lower))
    }

    fn push_block(&mut self, value: BlockValue, manifold: Manifold) -> BlockId {
        self.blocks.push(ParameterBlock {
            value,
            manifold,
            constant: false,
            eliminated: false,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn set_constant(&mut self, id: BlockId) {
        self.blocks[id.0].constant = true;
    }

    /// Marks a block for Schur elimination.
    pub fn set_eliminated(&mut self, id: BlockId) {
        self.blocks[id.0].eliminated = true;
    }

    pub fn block(&self, id: BlockId) -> &ParameterBlock {
        &self.blocks[id.0]
    }

    pub fn value(&self, id: BlockId) -> &BlockValue {
        &self.blocks[id.0].value
    }

    pub fn set_value(&mut self, id: BlockId, value: BlockValue) {
        self.blocks[id.0].value = value;
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_block(&self, k: usize) -> &ResidualBlock {
        &self.residuals[k]
    }

    /// Adds a residual with measurement covariance `covariance` (identity
    /// when `None`).
    pub fn add_residual_block(
        &mut self,
        cost: Box<dyn CostFunction>,
        blocks: Vec<BlockId>,
        covariance: Option<DMatrix<f64>>,
        robust: bool,
    ) -> Result<usize, OptimizerError> {
        let k = self.residuals.len();
        let invalid = |reason: String| OptimizerError::InvalidResidual { residual: k, reason };
        let dims = cost.block_dims();
        if dims.len() != blocks.len() {
            return Err(invalid(format!("expects {} blocks, got {}", dims.len(), blocks.len())));
        }
        for (d, b) in dims.iter().zip(&blocks) {
            let blk = self.blocks.get(b.0).ok_or_else(|| invalid(format!("unknown block {}", b.0)))?;
            if blk.tangent_dim() != *d {
                return Err(invalid(format!("block {} has dim {}, expected {d}", b.0, blk.tangent_dim())));
            }
        }
        let rd = cost.residual_dim();
        let whitening = match covariance {
            None => DMatrix::identity(rd, rd),
            Some(cov) => {
                if cov.shape() != (rd, rd) {
                    return Err(invalid("covariance shape mismatch".into()));
                }
                if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max() {
                    return Err(invalid("covariance not symmetric".into()));
                }
                let info = cov
                    .try_inverse()
                    .ok_or_else(|| invalid("covariance is singular".into()))?;
                let chol = info
                    .cholesky()
                    .ok_or_else(|| invalid("covariance is not positive definite".into()))?;
                chol.l().transpose()
            }
        };
        let c = whitening[(0, 0)];
        let scalar = whitening.iter().enumerate().all(|(i, &x)| x == if i % (rd + 1) == 0 { c } else { 0.0 });
        self.residuals.push(ResidualBlock {
            cost,
            blocks,
            whitening,
            robust,
            scale: scalar.then_some(c),
        });
        Ok(k)
    }

    fn params_of(&self, r: &ResidualBlock) -> Vec<&BlockValue> {
        r.blocks.iter().map(|b| &self.blocks[b.0].value).collect()
    }

    /// Raw (unwhitened) residual of block `k` at the current state.
    pub fn evaluate_residual(&self, k: usize) -> Result<DVector<f64>, EvalError> {
        let r = &self.residuals[k];
        r.cost.evaluate(&self.params_of(r), None)
    }

    /// Total robust cost at the current state.
    pub fn total_cost(&self, huber: Option<f64>) -> Result<f64, EvalError> {
        total_cost_with(&self.residuals, &self.params_lookup(), huber)
    }

    fn params_lookup(&self) -> Vec<&BlockValue> {
        self.blocks.iter().map(|b| &b.value).collect()
    }
}

fn total_cost_with(residuals: &[ResidualBlock], values: &[&BlockValue], huber: Option<f64>) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for r in residuals {
        let params: Vec<&BlockValue> = r.blocks.iter().map(|b| values[b.0]).collect();
        let e = r.cost.evaluate(&params, None)?;
        let w = r.whiten(e);
        let s = w.norm_squared();
        if !s.is_finite() {
            return Err(EvalError::NonFinite);
        }
        total += if r.robust { huber_cost(s, huber) } else { s };
    }
    Ok(total)
}

/// Huber cost of a squared whitened norm `s`: `s` inside the threshold,
/// `2 k sqrt(s) - k^2` outside. `None` disables the robust loss.
pub fn huber_cost(s: f64, kappa: Option<f64>) -> f64 {
    match kappa {
        Some(k) => {
            let e = s.sqrt();
            if e <= k {
                s
            } else {
                2.0 * k * e - k * k
            }
        }
        None => s,
    }
}

/// IRLS weight, the derivative of [`huber_cost`] with respect to `s`.
fn huber_weight(s: f64, kappa: Option<f64>) -> f64 {
    match kappa {
        Some(k) => {
            let e = s.sqrt();
            if e <= k {
                1.0
            } else {
                k / e
            }
        }
        None => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_damping: f64,
    pub absolute_cost_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
    /// Relative step-size tolerance.
    pub step_tolerance: f64,
    /// Huber threshold on the whitened residual norm; `None` disables it.
    pub huber_threshold: Option<f64>,
    /// Geodesic acceleration: the bound on `2|a| / |v|` under which the
    /// second-order correction is used. `None` gives plain LM steps.
    pub geodesic_acceleration: Option<f64>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.5,
            max_damping: 1e16,
            absolute_cost_tolerance: 1e-20,
            relative_cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            huber_threshold: Some(1.345),
            geodesic_acceleration: Some(0.75),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.initial_damping > 0.0 && self.max_damping > self.initial_damping) {
            return bad("damping bounds must satisfy 0 < initial < max");
        }
        if !(self.damping_up > 1.0 && self.damping_down > 0.0 && self.damping_down < 1.0) {
            return bad("damping factors must satisfy up > 1 > down > 0");
        }
        let tols = [
            self.absolute_cost_tolerance,
            self.relative_cost_tolerance,
            self.gradient_tolerance,
            self.step_tolerance,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return bad("tolerances must be positive");
        }
        if let Some(k) = self.huber_threshold {
            if !(k > 0.0) {
                return bad("huber threshold must be positive");
            }
        }
        if let Some(a) = self.geodesic_acceleration {
            if !(a > 0.0) {
                return bad("geodesic acceleration bound must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ConvergedCost,
    ConvergedGradient,
    ConvergedStep,
    MaxIterations,
    Diverged,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::ConvergedCost | Termination::ConvergedGradient | Termination::ConvergedStep
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::ConvergedCost => "converged-cost",
            Termination::ConvergedGradient => "converged-gradient",
            Termination::ConvergedStep => "converged-step",
            Termination::MaxIterations => "max-iterations",
            Termination::Diverged => "diverged",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub rejected_steps: usize,
    pub termination: Termination,
    /// Cost at the initial point followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    /// Infinity norm of the gradient at the final linearization.
    pub final_gradient_norm: f64,
}

impl SolveReport {
    pub fn trace_is_monotone(&self) -> bool {
        self.cost_trace.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Layout of the free variables: reduced (camera) blocks first, eliminated
/// blocks solved per block.
struct Layout {
    /// For each block: Some((is_eliminated, index into reduced offsets or eliminated list)).
    slot: Vec<Option<Slot>>,
    reduced_offsets: Vec<usize>,
    reduced_blocks: Vec<usize>,
    reduced_dim: usize,
    eliminated_blocks: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Slot {
    Reduced(usize),
    Eliminated(usize),
}

impl Layout {
    fn new(problem: &Problem) -> Self {
        let schur_ok = problem.residuals.iter().all(|r| {
            r.blocks
                .iter()
                .filter(|b| {
                    let blk = &problem.blocks[b.0];
                    blk.eliminated && !blk.constant
                })
                .count()
                <= 1
        });
        let mut slot = vec![None; problem.blocks.len()];
        let mut reduced_offsets = Vec::new();
        let mut reduced_blocks = Vec::new();
        let mut eliminated_blocks = Vec::new();
        let mut dim = 0;
        for (k, b) in problem.blocks.iter().enumerate() {
            if b.constant {
                continue;
            }
            if b.eliminated && schur_ok {
                slot[k] = Some(Slot::Eliminated(eliminated_blocks.len()));
                eliminated_blocks.push(k);
            } else {
                slot[k] = Some(Slot::Reduced(reduced_blocks.len()));
                reduced_blocks.push(k);
                reduced_offsets.push(dim);
                dim += b.tangent_dim();
            }
        }
        Self {
            slot,
            reduced_offsets,
            reduced_blocks,
            reduced_dim: dim,
            eliminated_blocks,
        }
    }

    fn num_free(&self) -> usize {
        self.reduced_blocks.len() + self.eliminated_blocks.len()
    }
}

/// Gauss-Newton system in block form.
struct NormalEquations {
    h_rr: DMatrix<f64>,
    g_r: DVector<f64>,
    /// Per eliminated block: V, g, and coupling W_{a,l} = J_a^T J_l per reduced block.
    v: Vec<DMatrix<f64>>,
    g_l: Vec<DVector<f64>>,
    w: Vec<Vec<(usize, DMatrix<f64>)>>,
    /// The same couplings stacked per eliminated block, with the reduced-system
    /// row index of every stacked row.
    stacked: Vec<(Vec<usize>, DMatrix<f64>)>,
    /// Whitened, weighted residuals and Jacobians per residual block, kept
    /// for the acceleration correction.
    res: Vec<DVector<f64>>,
    jac: Vec<Vec<DMatrix<f64>>>,
    weights: Vec<f64>,
}

impl NormalEquations {
    fn gradient_inf_norm(&self) -> f64 {
        let a = self.g_r.amax();
        let b = self.g_l.iter().map(|g| g.amax()).fold(0.0, f64::max);
        a.max(b)
    }
}

fn build_normal_equations(
    problem: &Problem,
    layout: &Layout,
    huber: Option<f64>,
) -> Result<(NormalEquations, f64), OptimizerError> {
    let p = layout.reduced_dim;
    let mut ne = NormalEquations {
        h_rr: DMatrix::zeros(p, p),
        g_r: DVector::zeros(p),
        v: layout
            .eliminated_blocks
            .iter()
            .map(|&b| {
                let d = problem.blocks[b].tangent_dim();
                DMatrix::zeros(d, d)
            })
            .collect(),
        g_l: layout
            .eliminated_blocks
            .iter()
            .map(|&b| DVector::zeros(problem.blocks[b].tangent_dim()))
            .collect(),
        w: vec![Vec::new(); layout.eliminated_blocks.len()],
        stacked: Vec::new(),
        res: Vec::with_capacity(problem.residuals.len()),
        jac: Vec::with_capacity(problem.residuals.len()),
        weights: Vec::with_capacity(problem.residuals.len()),
    };
    let mut cost = 0.0;
    for (k, r) in problem.residuals.iter().enumerate() {
        let params = problem.params_of(r);
        let rd = r.cost.residual_dim();
        let mut jac: Vec<DMatrix<f64>> = r
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(rd, problem.blocks[b.0].tangent_dim()))
            .collect();
        let fail = |reason: String| OptimizerError::NumericalFailure {
            residual: k,
            blocks: r.blocks.iter().map(|b| b.0).collect(),
            reason,
        };
        let e = r
            .cost
            .evaluate(&params, Some(&mut jac))
            .map_err(|err| fail(err.to_string()))?;
        if e.iter().any(|x| !x.is_finite()) || jac.iter().any(|j| j.iter().any(|x| !x.is_finite())) {
            return Err(fail("non-finite residual or jacobian".into()));
        }
        let we = r.whiten(e);
        let s = we.norm_squared();
        let weight = if r.robust { huber_weight(s, huber) } else { 1.0 };
        cost += if r.robust { huber_cost(s, huber) } else { s };
        let sw = weight.sqrt();
        let re = we * sw;
        let mut wj = jac;
        for j in &mut wj {
            r.whiten_jacobian(j, sw);
        }

        let mut elim: Option<(usize, usize)> = None;
        for (bi, b) in r.blocks.iter().enumerate() {
            if let Some(Slot::Eliminated(l)) = layout.slot[b.0] {
                elim = Some((bi, l));
            }
        }
        for (ai, a) in r.blocks.iter().enumerate() {
            let Some(Slot::Reduced(ra)) = layout.slot[a.0] else {
                continue;
            };
            let oa = layout.reduced_offsets[ra];
            let da = wj[ai].ncols();
            ne.g_r.rows_mut(oa, da).gemv_tr(1.0, &wj[ai], &re, 1.0);
            for (bi, b) in r.blocks.iter().enumerate() {
                let Some(Slot::Reduced(rb)) = layout.slot[b.0] else {
                    continue;
                };
                let ob = layout.reduced_offsets[rb];
                let db = wj[bi].ncols();
                ne.h_rr.view_mut((oa, ob), (da, db)).gemm_tr(1.0, &wj[ai], &wj[bi], 1.0);
            }
            if let Some((li, l)) = elim {
                match ne.w[l].iter_mut().find(|(c, _)| *c == ra) {
                    Some((_, m)) => m.gemm_tr(1.0, &wj[ai], &wj[li], 1.0),
                    None => ne.w[l].push((ra, wj[ai].tr_mul(&wj[li]))),
                }
            }
        }
        if let Some((li, l)) = elim {
            ne.v[l].gemm_tr(1.0, &wj[li], &wj[li], 1.0);
            ne.g_l[l].gemv_tr(1.0, &wj[li], &re, 1.0);
        }
        ne.res.push(re);
        ne.jac.push(wj);
        ne.weights.push(sw);
    }
    ne.stacked = ne
        .w
        .iter()
        .zip(&ne.v)
        .map(|(ws, v)| {
            let rows: usize = ws.iter().map(|(_, m)| m.nrows()).sum();
            let mut order: Vec<&(usize, DMatrix<f64>)> = ws.iter().collect();
            order.sort_by_key(|(ra, _)| layout.reduced_offsets[*ra]);
            let mut idx = Vec::with_capacity(rows);
            let mut m = DMatrix::zeros(rows, v.ncols());
            for (ra, wa) in order {
                let o = layout.reduced_offsets[*ra];
                m.rows_mut(idx.len(), wa.nrows()).copy_from(wa);
                idx.extend(o..o + wa.nrows());
            }
            (idx, m)
        })
        .collect();
    Ok((ne, cost))
}

fn damping_diag(x: f64) -> f64 {
    x.clamp(1e-6, 1e32)
}

/// Factorization of the damped system `H + lambda D`, reduced onto the
/// non-eliminated blocks.
struct DampedSystem {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    v_inv: Vec<DMatrix<f64>>,
    /// Damping diagonal, reduced part then eliminated blocks.
    d_r: DVector<f64>,
    d_l: Vec<DVector<f64>>,
}

/// `None` when the damped system is not positive definite.
fn factor_damped(ne: &NormalEquations, layout: &Layout, lambda: f64) -> Option<DampedSystem> {
    let p = layout.reduced_dim;
    let d_r = DVector::from_fn(p, |i, _| damping_diag(ne.h_rr[(i, i)]));
    let mut s = ne.h_rr.clone();
    for i in 0..p {
        s[(i, i)] += lambda * d_r[i];
    }
    let mut v_inv = Vec::with_capacity(ne.v.len());
    let mut d_l = Vec::with_capacity(ne.v.len());
    for (l, v) in ne.v.iter().enumerate() {
        let d = DVector::from_fn(v.nrows(), |i, _| damping_diag(v[(i, i)]));
        let mut vd = v.clone();
        for i in 0..vd.nrows() {
            vd[(i, i)] += lambda * d[i];
        }
        let vi = vd.cholesky()?.inverse();
        let (idx, w) = &ne.stacked[l];
        let m = w * &vi * w.transpose();
        let runs = contiguous_runs(idx);
        for &(a0, ia, na) in &runs {
            for &(b0, ib, nb) in &runs {
                let mut dst = s.view_mut((ia, ib), (na, nb));
                dst -= m.view((a0, b0), (na, nb));
            }
        }
        v_inv.push(vi);
        d_l.push(d);
    }
    let chol = if p > 0 {
        // Symmetrize against round-off before factorizing.
        let s = (&s + s.transpose()) * 0.5;
        Some(s.cholesky()?)
    } else {
        None
    };
    Some(DampedSystem { chol, v_inv, d_r, d_l })
}

/// Maximal runs of consecutive indices as (position, first index, length).
fn contiguous_runs(idx: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        match runs.last_mut() {
            Some((_, start, len)) if *start + *len == i => *len += 1,
            _ => runs.push((k, i, 1)),
        }
    }
    runs
}

/// Step per free block, in layout order.
type Step = Vec<(usize, DVector<f64>)>;

impl DampedSystem {
    /// Solves `(H + lambda D) delta = -g` for the gradient `(g_r, g_l)`.
    fn solve(&self, ne: &NormalEquations, layout: &Layout, problem: &Problem, g_r: &DVector<f64>, g_l: &[DVector<f64>]) -> Option<Step> {
        let mut rhs = -g_r.clone();
        let vig: Vec<DVector<f64>> = self.v_inv.iter().zip(g_l).map(|(vi, g)| vi * g).collect();
        for (l, (idx, w)) in ne.stacked.iter().enumerate() {
            let add = w * &vig[l];
            for (a, &ia) in idx.iter().enumerate() {
                rhs[ia] += add[a];
            }
        }
        let delta_r = match &self.chol {
            Some(c) => c.solve(&rhs),
            None => DVector::zeros(0),
        };
        let mut out = Vec::with_capacity(layout.num_free());
        for (ri, &b) in layout.reduced_blocks.iter().enumerate() {
            let d = problem.blocks[b].tangent_dim();
            out.push((b, delta_r.rows(layout.reduced_offsets[ri], d).into_owned()));
        }
        for (l, &b) in layout.eliminated_blocks.iter().enumerate() {
            let (idx, w) = &ne.stacked[l];
            let local = DVector::from_fn(idx.len(), |a, _| delta_r[idx[a]]);
            let r = -&g_l[l] - w.tr_mul(&local);
            out.push((b, &self.v_inv[l] * r));
        }
        if out.iter().any(|(_, d)| d.iter().any(|x| !x.is_finite())) {
            return None;
        }
        Some(out)
    }

    /// Norm of a step in the damping metric.
    fn scaled_norm(&self, layout: &Layout, step: &Step) -> f64 {
        let nr = layout.reduced_blocks.len();
        let mut acc = 0.0;
        for (k, (_, d)) in step.iter().enumerate() {
            let scale = if k < nr {
                self.d_r.rows(layout.reduced_offsets[k], d.len()).into_owned()
            } else {
                self.d_l[k - nr].clone()
            };
            acc += d.iter().zip(scale.iter()).map(|(x, s)| s * x * x).sum::<f64>();
        }
        acc.sqrt()
    }
}

fn retract_step(problem: &Problem, step: &Step, scale: f64) -> Vec<(usize, BlockValue)> {
    step.iter()
        .map(|(b, d)| (*b, problem.blocks[*b].retract((d * scale).as_slice())))
        .collect()
}

fn values_with<'a>(problem: &'a Problem, candidate: &'a [(usize, BlockValue)]) -> Vec<&'a BlockValue> {
    let mut values: Vec<&BlockValue> = problem.blocks.iter().map(|b| &b.value).collect();
    for (b, v) in candidate {
        values[*b] = v;
    }
    values
}

/// Second-order correction `a` along the velocity `v`, from a finite
/// difference of the residuals along `v`. `None` when the probe point cannot
/// be evaluated.
fn acceleration(
    problem: &Problem,
    layout: &Layout,
    ne: &NormalEquations,
    sys: &DampedSystem,
    v: &Step,
) -> Option<Step> {
    const H: f64 = 0.1;
    let mut by_block: Vec<Option<&DVector<f64>>> = vec![None; problem.blocks.len()];
    for (b, d) in v {
        by_block[*b] = Some(d);
    }
    let probe = retract_step(problem, v, H);
    let values = values_with(problem, &probe);
    let mut g_r = DVector::zeros(layout.reduced_dim);
    let mut g_l: Vec<DVector<f64>> = sys.d_l.iter().map(|d| DVector::zeros(d.len())).collect();
    for (k, r) in problem.residuals.iter().enumerate() {
        let params: Vec<&BlockValue> = r.blocks.iter().map(|b| values[b.0]).collect();
        let e = r.cost.evaluate(&params, None).ok()?;
        let mut rvv = r.whiten(e) * ne.weights[k] - &ne.res[k];
        for (bi, b) in r.blocks.iter().enumerate() {
            if let Some(d) = by_block[b.0] {
                rvv.gemv(-H, &ne.jac[k][bi], d, 1.0);
            }
        }
        rvv *= 2.0 / (H * H);
        if rvv.iter().any(|x| !x.is_finite()) {
            return None;
        }
        for (bi, b) in r.blocks.iter().enumerate() {
            match layout.slot[b.0] {
                Some(Slot::Reduced(ra)) => {
                    let j = &ne.jac[k][bi];
                    g_r.rows_mut(layout.reduced_offsets[ra], j.ncols()).gemv_tr(1.0, j, &rvv, 1.0);
                }
                Some(Slot::Eliminated(l)) => g_l[l].gemv_tr(1.0, &ne.jac[k][bi], &rvv, 1.0),
                None => {}
            }
        }
    }
    sys.solve(ne, layout, problem, &g_r, &g_l)
}

pub fn solve(problem: &mut Problem, cfg: &LmConfig) -> Result<SolveReport, OptimizerError> {
    solve_with_observer(problem, cfg, |_| {})
}

/// Runs LM, calling `observer` on the initial state and after every
/// accepted step.
pub fn solve_with_observer(
    problem: &mut Problem,
    cfg: &LmConfig,
    mut observer: impl FnMut(&Problem),
) -> Result<SolveReport, OptimizerError> {
    cfg.validate()?;
    let layout = Layout::new(problem);
    if layout.num_free() == 0 {
        return Err(OptimizerError::NoFreeParameters);
    }
    let huber = cfg.huber_threshold;
    observer(problem);

    let (mut ne, mut cost) = build_normal_equations(problem, &layout, huber)?;
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    let mut rejected = 0;
    let termination;

    loop {
        if cost <= cfg.absolute_cost_tolerance {
            termination = Termination::ConvergedCost;
            break;
        }
        if ne.gradient_inf_norm() <= cfg.gradient_tolerance {
            termination = Termination::ConvergedGradient;
            break;
        }
        if iterations >= cfg.max_iterations {
            termination = Termination::MaxIterations;
            break;
        }
        let mut accepted = None;
        let mut last_failure_was_eval = false;
        let mut tiny_step = false;
        while lambda <= cfg.max_damping {
            let Some(sys) = factor_damped(&ne, &layout, lambda) else {
                lambda *= cfg.damping_up;
                continue;
            };
            let Some(velocity) = sys.solve(&ne, &layout, problem, &ne.g_r, &ne.g_l) else {
                lambda *= cfg.damping_up;
                continue;
            };
            let step_norm = velocity.iter().map(|(_, d)| d.norm_squared()).sum::<f64>().sqrt();
            let state_norm = layout
                .reduced_blocks
                .iter()
                .chain(&layout.eliminated_blocks)
                .map(|&b| match &problem.blocks[b].value {
                    BlockValue::Vector(v) => v.norm_squared(),
                    BlockValue::Rotation(_) => 0.0,
                })
                .sum::<f64>()
                .sqrt();
            if step_norm <= cfg.step_tolerance * (state_norm + cfg.step_tolerance) {
                tiny_step = true;
                break;
            }
            let mut delta = velocity;
            if let Some(bound) = cfg.geodesic_acceleration {
                if let Some(acc) = acceleration(problem, &layout, &ne, &sys, &delta) {
                    let ratio = 2.0 * sys.scaled_norm(&layout, &acc) / sys.scaled_norm(&layout, &delta);
                    if ratio <= bound {
                        for ((_, d), (_, a)) in delta.iter_mut().zip(&acc) {
                            *d += a * 0.5;
                        }
                    }
                }
            }
            let candidate = retract_step(problem, &delta, 1.0);
            let new_cost = if candidate.iter().all(|(_, v)| v.is_finite()) {
                total_cost_with(&problem.residuals, &values_with(problem, &candidate), huber)
            } else {
                Err(EvalError::NonFinite)
            };
            match new_cost {
                Ok(c) if c.is_finite() && c < cost => {
                    accepted = Some((candidate, c));
                    break;
                }
                Ok(_) => last_failure_was_eval = false,
                Err(_) => last_failure_was_eval = true,
            }
            rejected += 1;
            lambda *= cfg.damping_up;
        }
        if tiny_step {
            termination = Termination::ConvergedStep;
            break;
        }
        let Some((candidate, new_cost)) = accepted else {
            // No decrease is available even with maximal damping: either the
            // cost sits at its numerical floor or every nearby state is
            // infeasible.
            termination = if last_failure_was_eval {
                Termination::Diverged
            } else {
                Termination::ConvergedCost
            };
            break;
        };
        for (b, v) in candidate {
            problem.blocks[b].value = v;
        }
        iterations += 1;
        lambda = (lambda * cfg.damping_down).max(1e-300);
        trace.push(new_cost);
        observer(problem);
        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        let (next_ne, relinearized_cost) = build_normal_equations(problem, &layout, huber)?;
        ne = next_ne;
        cost = relinearized_cost;
        if new_cost <= cfg.absolute_cost_tolerance || rel <= cfg.relative_cost_tolerance {
            termination = Termination::ConvergedCost;
            break;
        }
    }

    Ok(SolveReport {
        initial_cost,
        final_cost: cost,
        iterations,
        rejected_steps: rejected,
        termination,
        cost_trace: trace,
        final_gradient_norm: ne.gradient_inf_norm(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianCheck {
    pub residual: usize,
    pub block: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub checks: Vec<JacobianCheck>,
}

impl JacobianReport {
    pub fn max_relative_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }
}

/// Compares analytic Jacobians against central differences taken through
/// each block's retraction.
pub fn check_jacobians(problem: &Problem, eps: f64) -> Result<JacobianReport, EvalError> {
    let mut checks = Vec::new();
    for (k, r) in problem.residuals.iter().enumerate() {
        let params = problem.params_of(r);
        let rd = r.cost.residual_dim();
        let mut jac: Vec<DMatrix<f64>> = r
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(rd, problem.blocks[b.0].tangent_dim()))
            .collect();
        r.cost.evaluate(&params, Some(&mut jac))?;
        for (bi, b) in r.blocks.iter().enumerate() {
            let blk = &problem.blocks[b.0];
            let d = blk.tangent_dim();
            let mut fd = DMatrix::zeros(rd, d);
            for c in 0..d {
                let mut delta = vec![0.0; d];
                delta[c] = eps;
                let plus = blk.retract(&delta);
                delta[c] = -eps;
                let minus = blk.retract(&delta);
                let mut pp = params.clone();
                pp[bi] = &plus;
                let ep = r.cost.evaluate(&pp, None)?;
                pp[bi] = &minus;
                let em = r.cost.evaluate(&pp, None)?;
                fd.set_column(c, &((ep - em) / (2.0 * eps)));
            }
            let denom = fd.norm().max(jac[bi].norm()).max(1e-8);
            checks.push(JacobianCheck {
                residual: k,
                block: b.0,
                max_relative_error: (&jac[bi] - &fd).norm() / denom,
            });
        }
    }
    Ok(JacobianReport { checks })
}

/// Whitened, robust-weighted Jacobian over the free blocks, stacked in
/// residual order with columns in block order.
pub fn dense_jacobian(problem: &Problem, huber: Option<f64>) -> Result<DMatrix<f64>, EvalError> {
    let mut offsets = vec![None; problem.blocks.len()];
    let mut cols = 0;
    for (k, b) in problem.blocks.iter().enumerate() {
        if !b.constant {
            offsets[k] = Some(cols);
            cols += b.tangent_dim();
        }
    }
    let rows: usize = problem.residuals.iter().map(|r| r.cost.residual_dim()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut row = 0;
    for r in &problem.residuals {
        let rd = r.cost.residual_dim();
        let mut jac: Vec<DMatrix<f64>> = r
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(rd, problem.blocks[b.0].tangent_dim()))
            .collect();
        let e = r.cost.evaluate(&problem.params_of(r), Some(&mut jac))?;
        let s = (&r.whitening * e).norm_squared();
        let sw = if r.robust { huber_weight(s, huber).sqrt() } else { 1.0 };
        for (bi, b) in r.blocks.iter().enumerate() {
            if let Some(o) = offsets[b.0] {
                let w = (&r.whitening * &jac[bi]) * sw;
                out.view_mut((row, o), (rd, w.ncols())).copy_from(&w);
            }
        }
        row += rd;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Affine residual `A x - b` on one vector block.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear {
        fn residual_dim(&self) -> usize {
            self.a.nrows()
        }
        fn block_dims(&self) -> Vec<usize> {
            vec![self.a.ncols()]
        }
        fn evaluate(&self, p: &[&BlockValue], jac: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
            if let Some(j) = jac {
                j[0].copy_from(&self.a);
            }
            Ok(&self.a * p[0].vector() - &self.b)
        }
    }

    struct Rosenbrock;

    impl CostFunction for Rosenbrock {
        fn residual_dim(&self) -> usize {
            2
        }
        fn block_dims(&self) -> Vec<usize> {
            vec![2]
        }
        fn evaluate(&self, p: &[&BlockValue], jac: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
            let v = p[0].vector();
            let (x, y) = (v[0], v[1]);
            if let Some(j) = jac {
                j[0].copy_from(&DMatrix::from_row_slice(2, 2, &[-20.0 * x, 10.0, -1.0, 0.0]));
            }
            Ok(DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x]))
        }
    }

    /// Rotation residual `R a - b` for a fixed pair of directions.
    struct Align {
        a: Vector3<f64>,
        b: Vector3<f64>,
    }

    impl CostFunction for Align {
        fn residual_dim(&self) -> usize {
            3
        }
        fn block_dims(&self) -> Vec<usize> {
            vec![3]
        }
        fn evaluate(&self, p: &[&BlockValue], jac: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
            let r = p[0].rotation();
            if let Some(j) = jac {
                let m = -(r.matrix() * crate::geometry::skew(&self.a));
                j[0].copy_from(&m);
            }
            let e = r * self.a - self.b;
            Ok(DVector::from_column_slice(e.as_slice()))
        }
    }

    fn unrobust() -> LmConfig {
        LmConfig {
            huber_threshold: None,
            ..LmConfig::default()
        }
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_cost(0.0, Some(1.0)), 0.0);
        assert_eq!(huber_cost(0.25, Some(1.0)), 0.25);
        assert_eq!(huber_cost(4.0, Some(1.0)), 3.0);
        // Continuous and C1 at the threshold.
        let k = 1.345;
        let s = k * k;
        assert!((huber_cost(s * (1.0 + 1e-12), Some(k)) - huber_cost(s, Some(k))).abs() < 1e-10);
        let h = 1e-6;
        let left = (huber_cost(s, Some(k)) - huber_cost(s - h, Some(k))) / h;
        let right = (huber_cost(s + h, Some(k)) - huber_cost(s, Some(k))) / h;
        assert!((left - right).abs() < 1e-5);
    }

    #[test]
    fn one_dimensional_linear() {
        let mut p = Problem::new();
        let x = p.add_vector_block(DVector::from_element(1, 0.0));
        p.add_residual_block(
            Box::new(Linear {
                a: DMatrix::from_element(1, 1, 1.0),
                b: DVector::from_element(1, 3.0),
            }),
            vec![x],
            None,
            false,
        )
        .unwrap();
        let rep = solve(&mut p, &unrobust()).unwrap();
        assert!((p.value(x).scalar() - 3.0).abs() < 1e-10);
        assert!(rep.iterations <= 3);
        assert!(rep.termination.converged());
    }

    #[test]
    fn linear_problem_one_step() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.0, 0.5, -1.0, 3.0, 2.0, 0.0, 1.0, -1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
        let normal = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        let mut p = Problem::new();
        let x = p.add_vector_block(DVector::zeros(3));
        p.add_residual_block(Box::new(Linear { a, b }), vec![x], None, false).unwrap();
        let cfg = LmConfig {
            initial_damping: 1e-14,
            ..unrobust()
        };
        let rep = solve(&mut p, &cfg).unwrap();
        assert!((p.value(x).vector() - normal).amax() < 1e-10);
        assert_eq!(rep.cost_trace.len() >= 2, true);
        // The first accepted step already lands on the normal-equation solution.
        assert!((rep.cost_trace[1] - rep.final_cost).abs() < 1e-10);
    }

    #[test]
    fn rosenbrock() {
        let mut iterations = Vec::new();
        for accel in [None, Some(0.75)] {
            let mut p = Problem::new();
            let x = p.add_vector_block(DVector::from_vec(vec![-1.2, 1.0]));
            p.add_residual_block(Box::new(Rosenbrock), vec![x], None, false).unwrap();
            let cfg = LmConfig {
                geodesic_acceleration: accel,
                ..unrobust()
            };
            let rep = solve(&mut p, &cfg).unwrap();
            let v = p.value(x).vector();
            assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6, "{v}");
            assert!(rep.trace_is_monotone());
            assert!(rep.termination.converged());
            iterations.push(rep.iterations);
        }
        eprintln!("rosenbrock iterations plain/accelerated: {iterations:?}");
        assert!(iterations[1] <= iterations[0], "{iterations:?}");
    }

    #[test]
    fn all_constant_is_an_error() {
        let mut p = Problem::new();
        let x = p.add_vector_block(DVector::zeros(1));
        p.set_constant(x);
        p.add_residual_block(
            Box::new(Linear {
                a: DMatrix::from_element(1, 1, 1.0),
                b: DVector::from_element(1, 3.0),
            }),
            vec![x],
            None,
            false,
        )
        .unwrap();
        assert_eq!(solve(&mut p, &LmConfig::default()), Err(OptimizerError::NoFreeParameters));
    }

    #[test]
    fn mismatched_block_dims_rejected() {
        let mut p = Problem::new();
        let x = p.add_vector_block(DVector::zeros(3));
        let err = p.add_residual_block(Box::new(Rosenbrock), vec![x], None, false);
        assert!(matches!(err, Err(OptimizerError::InvalidResidual { .. })));
        let y = p.add_vector_block(DVector::zeros(2));
        let bad_cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(p.add_residual_block(Box::new(Rosenbrock), vec![y], Some(bad_cov), false).is_err());
    }

    #[test]
    fn whitening_scales_cost() {
        let make = |c: f64| {
            let mut p = Problem::new();
            let x = p.add_vector_block(DVector::from_vec(vec![0.2, -0.1]));
            p.add_residual_block(
                Box::new(Linear {
                    a: DMatrix::identity(2, 2),
                    b: DVector::zeros(2),
                }),
                vec![x],
                Some(DMatrix::identity(2, 2) * (c * c)),
                true,
            )
            .unwrap();
            p.total_cost(Some(1.345)).unwrap()
        };
        let base = make(1.0);
        for c in [0.5, 2.0, 3.0] {
            assert!((make(c) - base / (c * c)).abs() < 1e-15);
        }
    }

    #[test]
    fn so3_block_stays_on_manifold() {
        let mut p = Problem::new();
        let r = p.add_rotation_block(Rotation3::identity());
        let target = Rotation3::new(Vector3::new(0.3, -0.5, 0.8));
        for a in [Vector3::x(), Vector3::y(), Vector3::z()] {
            p.add_residual_block(Box::new(Align { a, b: target * a }), vec![r], None, false)
                .unwrap();
        }
        let cfg = unrobust();
        let mut worst: f64 = 0.0;
        let rep = solve_with_observer(&mut p, &cfg, |pr| {
            let m = pr.value(r).rotation().matrix();
            worst = worst.max((m.transpose() * m - nalgebra::Matrix3::identity()).norm());
        })
        .unwrap();
        assert!(worst <= 1e-9);
        assert!(rep.trace_is_monotone());
        assert!((p.value(r).rotation().matrix() - target.matrix()).norm() < 1e-8);
        let jr = check_jacobians(&p, 1e-6).unwrap();
        assert!(jr.max_relative_error() < 1e-6);
    }

    #[test]
    fn gradient_is_small_at_gradient_convergence() {
        let mut p = Problem::new();
        let x = p.add_vector_block(DVector::from_vec(vec![0.5, 0.5]));
        p.add_residual_block(Box::new(Rosenbrock), vec![x], None, false).unwrap();
        let cfg = LmConfig {
            relative_cost_tolerance: 1e-300,
            absolute_cost_tolerance: 1e-300,
            gradient_tolerance: 1e-9,
            step_tolerance: 1e-300,
            ..unrobust()
        };
        let rep = solve(&mut p, &cfg).unwrap();
        if rep.termination == Termination::ConvergedGradient {
            assert!(rep.final_gradient_norm <= cfg.gradient_tolerance);
        }
        assert!(rep.termination.converged());
    }

    #[test]
    fn robust_loss_limits_outlier_influence() {
        // Location estimate of 1-D samples with one gross outlier.
        let samples = [1.0, 1.1, 0.9, 1.05, 0.95, 50.0];
        let run = |huber: Option<f64>| {
            let mut p = Problem::new();
            let x = p.add_vector_block(DVector::zeros(1));
            for s in samples {
                p.add_residual_block(
                    Box::new(Linear {
                        a: DMatrix::from_element(1, 1, 1.0),
                        b: DVector::from_element(1, s),
                    }),
                    vec![x],
                    None,
                    true,
                )
                .unwrap();
            }
            let cfg = LmConfig { huber_threshold: huber, ..LmConfig::default() };
            let rep = solve(&mut p, &cfg).unwrap();
            assert!(rep.trace_is_monotone());
            p.value(x).scalar()
        };
        let plain = run(None);
        let robust = run(Some(0.5));
        assert!((plain - 55.0 / 6.0).abs() < 1e-6);
        assert!((robust - 1.0).abs() < 0.2, "{robust}");
    }

    #[test]
    fn schur_matches_dense() {
        // Two "camera" scalars and three "landmark" scalars coupled pairwise.
        let build = |eliminate: bool| {
            let mut p = Problem::new();
            let cams: Vec<_> = (0..2).map(|k| p.add_vector_block(DVector::from_element(1, 0.1 * k as f64))).collect();
            let lms: Vec<_> = (0..3).map(|_| p.add_vector_block(DVector::from_element(1, 0.0))).collect();
            if eliminate {
                for l in &lms {
                    p.set_eliminated(*l);
                }
            }
            for (ci, c) in cams.iter().enumerate() {
                for (li, l) in lms.iter().enumerate() {
                    let a = DMatrix::from_row_slice(1, 1, &[1.0 + ci as f64]);
                    struct Pair(DMatrix<f64>, f64);
                    impl CostFunction for Pair {
                        fn residual_dim(&self) -> usize {
                            1
                        }
                        fn block_dims(&self) -> Vec<usize> {
                            vec![1, 1]
                        }
                        fn evaluate(&self, p: &[&BlockValue], jac: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
                            let c = p[0].scalar();
                            let l = p[1].scalar();
                            if let Some(j) = jac {
                                j[0][(0, 0)] = self.0[(0, 0)] + l;
                                j[1][(0, 0)] = c + 2.0;
                            }
                            Ok(DVector::from_element(1, self.0[(0, 0)] * c + c * l + 2.0 * l - self.1))
                        }
                    }
                    p.add_residual_block(Box::new(Pair(a, 1.0 + li as f64 + 0.3 * ci as f64)), vec![*c, *l], None, false)
                        .unwrap();
                }
                let prior = Linear {
                    a: DMatrix::from_element(1, 1, 1.0),
                    b: DVector::from_element(1, 0.2),
                };
                p.add_residual_block(Box::new(prior), vec![*c], None, false).unwrap();
            }
            let rep = solve(&mut p, &unrobust()).unwrap();
            let vals: Vec<f64> = (0..5).map(|k| p.value(BlockId(k)).scalar()).collect();
            (vals, rep)
        };
        let (dense, rd) = build(false);
        let (schur, rs) = build(true);
        for (a, b) in dense.iter().zip(&schur) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!((rd.final_cost - rs.final_cost).abs() < 1e-12);
        assert!(check_jacobians(&Problem::new(), 1e-6).unwrap().checks.is_empty());
    }

    #[test]
    fn lower_bounded_block_respects_bound() {
        let mut p = Problem::new();
        let x = p.add_bounded_scalar(1.0, 1e-10);
        p.add_residual_block(
            Box::new(Linear {
                a: DMatrix::from_element(1, 1, 1.0),
                b: DVector::from_element(1, -5.0),
            }),
            vec![x],
            None,
            false,
        )
        .unwrap();
        let mut min_seen = f64::INFINITY;
        solve_with_observer(&mut p, &unrobust(), |pr| min_seen = min_seen.min(pr.value(x).scalar())).unwrap();
        assert!(min_seen >= 1e-10);
        assert!((p.value(x).scalar() - 1e-10).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig { damping_up: 0.5, ..LmConfig::default() }.validate().is_err());
        assert!(LmConfig { max_iterations: 0, ..LmConfig::default() }.validate().is_err());
        assert!(LmConfig { huber_threshold: Some(-1.0), ..LmConfig::default() }.validate().is_err());
        assert!(LmConfig::default().validate().is_ok());
    }
}
