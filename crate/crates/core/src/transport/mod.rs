//! Discrete 2-Wasserstein machinery.
//!
//! Plans live on the Birkhoff polytope with unit row and column sums; the
//! probabilistic coupling is `entries / n` and the reported distance is
//! `sqrt(objective / n)`. Plans are improved in place by solving small
//! marginal-preserving sub-problems on `M×M` blocks and splicing the result
//! back, so every update keeps all global row and column sums intact.
//!
//! Pair costs are computed lazily: a sub-problem only evaluates its own block.

mod oracle;
mod sublp;

use rand::Rng;
use thiserror::Error;

use crate::points::PointSet;

pub use oracle::{exact_plan_oracle, ORACLE_MAX_N};
pub use sublp::{sub_lp_solve, IpmOptions, SubLpSolution};

/// Tolerance on a spliced block's row and column sums.
const SPLICE_TOL: f64 = 1e-8;
/// Entries this far below zero are roundoff and get clamped.
const CLAMP_TOL: f64 = 1e-12;
/// Splices between exact recomputations of the running sum of squares.
const NORM_REFRESH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot pick {m} indices out of {n}")]
    TooMany { m: usize, n: usize },
    #[error("row budgets sum to {rows} but column budgets sum to {cols}")]
    InconsistentBudgets { rows: f64, cols: f64 },
    #[error("budgets must be finite and non-negative")]
    NegativeBudget,
    #[error("costs must be finite")]
    NonFiniteCost,
    #[error("start block violates the budgets by {0:e}")]
    InfeasibleStart(f64),
    #[error("block violates the plan marginals by {0:e}")]
    BudgetViolation(f64),
    #[error("index {index} out of range for plan of size {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("repeated index {0} in selection")]
    RepeatedIndex(usize),
    #[error("not a doubly stochastic matrix: {0}")]
    NotDoublyStochastic(String),
    #[error("exact oracle is limited to n <= {max}, got {n}")]
    OracleTooLarge { n: usize, max: usize },
    #[error("oracle failed: {0}")]
    Oracle(String),
}

/// A dense `n×n` doubly stochastic matrix with unit marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    n: usize,
    entries: Vec<f64>,
    sum_sq: f64,
    splices: usize,
}

impl PartialEq for TransportPlan {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.entries == other.entries
    }
}

impl TransportPlan {
    /// All entries `1/n`.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "plan size must be positive");
        let v = 1.0 / n as f64;
        Self::from_raw(n, vec![v; n * n])
    }

    /// The permutation matrix with a one at `(i, perm[i])`.
    pub fn from_permutation(perm: &[usize]) -> Result<Self, TransportError> {
        let n = perm.len();
        let mut entries = vec![0.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            if j >= n {
                return Err(TransportError::IndexOutOfRange { index: j, n });
            }
            entries[i * n + j] = 1.0;
        }
        Self::from_entries(n, entries)
    }

    /// Validates marginals (`1 ± 1e-9`) and non-negativity.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self, TransportError> {
        if n == 0 || entries.len() != n * n {
            return Err(TransportError::Shape(format!(
                "{} entries for a {n}×{n} plan",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TransportError::NotDoublyStochastic(
                "entries must be finite and non-negative".into(),
            ));
        }
        let plan = Self::from_raw(n, entries);
        let worst = plan.marginal_error();
        if worst > 1e-9 {
            return Err(TransportError::NotDoublyStochastic(format!(
                "marginal error {worst:e}"
            )));
        }
        Ok(plan)
    }

    fn from_raw(n: usize, entries: Vec<f64>) -> Self {
        let sum_sq = entries.iter().map(|v| v * v).sum();
        Self {
            n,
            entries,
            sum_sq,
            splices: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks_exact(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        for r in self.entries.chunks_exact(self.n) {
            for (acc, v) in c.iter_mut().zip(r) {
                *acc += v;
            }
        }
        c
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_error(&self) -> f64 {
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// The `rows×cols` block, row-major.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            let r = self.row(i);
            out.extend(cols.iter().map(|&j| r[j]));
        }
        out
    }
}

pub fn init_uniform_plan(n: usize) -> TransportPlan {
    TransportPlan::uniform(n)
}

/// Squared Euclidean distance.
pub fn pair_cost(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "pair_cost needs equal dimensions");
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_shapes(plan: &TransportPlan, f: &PointSet, y: &PointSet) -> Result<(), TransportError> {
    if f.len() != plan.n || y.len() != plan.n || f.dim() != y.dim() {
        return Err(TransportError::Shape(format!(
            "plan {n}×{n} with outputs {}×{} and targets {}×{}",
            f.len(),
            f.dim(),
            y.len(),
            y.dim(),
            n = plan.n
        )));
    }
    Ok(())
}

/// `Σ_ij |F_i − Y_j|² γ_ij`.
pub fn plan_objective(plan: &TransportPlan, f: &PointSet, y: &PointSet) -> Result<f64, TransportError> {
    check_shapes(plan, f, y)?;
    let mut total = 0.0;
    for (i, fi) in f.rows().enumerate() {
        let row = plan.row(i);
        let mut acc = 0.0;
        for (j, &g) in row.iter().enumerate() {
            if g != 0.0 {
                acc += g * pair_cost(fi, y.row(j));
            }
        }
        total += acc;
    }
    Ok(total)
}

/// `sqrt(objective / n)`, the empirical 2-Wasserstein estimate of a plan.
pub fn w2_estimate(plan: &TransportPlan, f: &PointSet, y: &PointSet) -> Result<f64, TransportError> {
    Ok((plan_objective(plan, f, y)? / plan.n as f64).max(0.0).sqrt())
}

/// The objective and its gradient with respect to each output row,
/// `2·(r_i F_i − Σ_j γ_ij Y_j)`.
pub fn transport_loss_grad(
    plan: &TransportPlan,
    f: &PointSet,
    y: &PointSet,
) -> Result<(f64, PointSet), TransportError> {
    check_shapes(plan, f, y)?;
    let d = f.dim();
    let mut grad = PointSet::zeros(plan.n, d);
    let mut total = 0.0;
    let mut bary = vec![0.0; d];
    for (i, fi) in f.rows().enumerate() {
        bary.iter_mut().for_each(|b| *b = 0.0);
        let mut mass = 0.0;
        for (j, &g) in plan.row(i).iter().enumerate() {
            if g != 0.0 {
                let yj = y.row(j);
                total += g * pair_cost(fi, yj);
                mass += g;
                for (b, v) in bary.iter_mut().zip(yj) {
                    *b += g * v;
                }
            }
        }
        for ((out, &fv), &b) in grad.row_mut(i).iter_mut().zip(fi).zip(&bary) {
            *out = 2.0 * (mass * fv - b);
        }
    }
    Ok((total, grad))
}

/// `‖γ‖_F / √n`, which lies in `[1/√n, 1]` and equals 1 exactly on
/// permutation matrices.
pub fn normalized_frobenius(plan: &TransportPlan) -> f64 {
    (plan.sum_sq.max(0.0) / plan.n as f64).sqrt()
}

/// Random Pivot Search started from a random row.
pub fn random_pivot_search<R: Rng + ?Sized>(
    plan: &TransportPlan,
    m: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>), TransportError> {
    if m > plan.n {
        return Err(TransportError::TooMany { m, n: plan.n });
    }
    let first = rng.random_range(0..plan.n);
    pivot_search_from(plan, m, first)
}

fn argmax_unused(values: impl Iterator<Item = f64>, used: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (idx, v) in values.enumerate() {
        // Strict comparison keeps the smallest index among ties.
        if !used[idx] && (best == usize::MAX || v > best_v) {
            best = idx;
            best_v = v;
        }
    }
    best
}

/// Random Pivot Search from a given first row: alternately follow the
/// largest entry of the current row and column among unused indices, ties
/// going to the smallest index.
pub fn pivot_search_from(
    plan: &TransportPlan,
    m: usize,
    first_row: usize,
) -> Result<(Vec<usize>, Vec<usize>), TransportError> {
    let n = plan.n;
    if m > n {
        return Err(TransportError::TooMany { m, n });
    }
    if first_row >= n {
        return Err(TransportError::IndexOutOfRange { index: first_row, n });
    }
    let mut rows = Vec::with_capacity(m);
    let mut cols = Vec::with_capacity(m);
    if m == 0 {
        return Ok((rows, cols));
    }
    let mut used_r = vec![false; n];
    let mut used_c = vec![false; n];
    let mut i = first_row;
    loop {
        rows.push(i);
        used_r[i] = true;
        let j = argmax_unused(plan.row(i).iter().copied(), &used_c);
        cols.push(j);
        used_c[j] = true;
        if rows.len() == m {
            break;
        }
        i = argmax_unused((0..n).map(|r| plan.get(r, j)), &used_r);
    }
    Ok((rows, cols))
}

/// `m` distinct indices drawn uniformly from `0..n`.
pub fn sample_indices<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>, TransportError> {
    if m > n {
        return Err(TransportError::TooMany { m, n });
    }
    Ok(rand::seq::index::sample(rng, n, m).into_vec())
}

/// A marginal-preserving linear sub-problem on an `M×M` block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubProblem {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Row-major `M×M` costs.
    pub costs: Vec<f64>,
    pub row_budgets: Vec<f64>,
    pub col_budgets: Vec<f64>,
}

impl SubProblem {
    /// Builds the sub-problem for the selected block: costs `|F_i − Y_j|²`
    /// and budgets equal to the block's current row and column sums.
    /// Returns it together with the current block.
    pub fn extract(
        plan: &TransportPlan,
        rows: &[usize],
        cols: &[usize],
        f: &PointSet,
        y: &PointSet,
    ) -> Result<(Self, Vec<f64>), TransportError> {
        check_shapes(plan, f, y)?;
        check_selection(plan.n, rows)?;
        check_selection(plan.n, cols)?;
        let block = plan.block(rows, cols);
        let q = cols.len();
        let mut costs = Vec::with_capacity(rows.len() * q);
        for &i in rows {
            costs.extend(cols.iter().map(|&j| pair_cost(f.row(i), y.row(j))));
        }
        let row_budgets = block.chunks_exact(q.max(1)).map(|r| r.iter().sum()).collect();
        let mut col_budgets = vec![0.0; q];
        for r in block.chunks_exact(q.max(1)) {
            for (c, v) in col_budgets.iter_mut().zip(r) {
                *c += v;
            }
        }
        Ok((
            Self {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
                costs,
                row_budgets,
                col_budgets,
            },
            block,
        ))
    }

    pub fn objective(&self, block: &[f64]) -> f64 {
        self.costs.iter().zip(block).map(|(c, g)| c * g).sum()
    }
}

fn check_selection(n: usize, idx: &[usize]) -> Result<(), TransportError> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(TransportError::IndexOutOfRange { index: i, n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(TransportError::RepeatedIndex(i));
        }
    }
    Ok(())
}

/// Replaces the `rows×cols` block. The block's row and column sums must
/// match the current ones within `1e-8`; tiny negative entries are clamped.
pub fn splice(
    plan: &mut TransportPlan,
    rows: &[usize],
    cols: &[usize],
    block: &[f64],
) -> Result<(), TransportError> {
    check_selection(plan.n, rows)?;
    check_selection(plan.n, cols)?;
    let q = cols.len();
    if block.len() != rows.len() * q {
        return Err(TransportError::Shape(format!(
            "block of {} entries for a {}×{q} selection",
            block.len(),
            rows.len()
        )));
    }
    if q == 0 || rows.is_empty() {
        return Ok(());
    }
    if let Some(bad) = block.iter().find(|v| !v.is_finite() || **v < -CLAMP_TOL) {
        return Err(TransportError::BudgetViolation(-bad));
    }
    let current = plan.block(rows, cols);
    let mut worst = 0.0_f64;
    for (new, old) in block.chunks_exact(q).zip(current.chunks_exact(q)) {
        worst = worst.max((new.iter().sum::<f64>() - old.iter().sum::<f64>()).abs());
    }
    for l in 0..q {
        let new: f64 = block.iter().skip(l).step_by(q).sum();
        let old: f64 = current.iter().skip(l).step_by(q).sum();
        worst = worst.max((new - old).abs());
    }
    if worst > SPLICE_TOL {
        return Err(TransportError::BudgetViolation(worst));
    }
    let n = plan.n;
    let mut delta = 0.0;
    for (k, &i) in rows.iter().enumerate() {
        for (l, &j) in cols.iter().enumerate() {
            let v = block[k * q + l].max(0.0);
            let slot = &mut plan.entries[i * n + j];
            delta += v * v - *slot * *slot;
            *slot = v;
        }
    }
    plan.splices += 1;
    if plan.splices % NORM_REFRESH == 0 {
        plan.sum_sq = plan.entries.iter().map(|v| v * v).sum();
    } else {
        plan.sum_sq += delta;
    }
    Ok(())
}

/// How each LP round selects its rows and columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpRoundConfig {
    /// Sub-problem size `M` (capped at the plan size).
    pub m: usize,
    /// Probability of Random Pivot Search; otherwise indices are sampled
    /// uniformly without replacement.
    pub pivot_fraction: f64,
    pub ipm: IpmOptions,
}

impl Default for LpRoundConfig {
    fn default() -> Self {
        Self {
            m: 10,
            pivot_fraction: 0.5,
            ipm: IpmOptions::default(),
        }
    }
}

/// Outcome of one LP round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpRound {
    /// Sub-problem objective before minus after (never negative).
    pub improvement: f64,
    pub degraded: bool,
}

/// One select–solve–splice round on `plan` for fixed outputs and targets.
pub fn lp_round<R: Rng + ?Sized>(
    plan: &mut TransportPlan,
    f: &PointSet,
    y: &PointSet,
    cfg: &LpRoundConfig,
    rng: &mut R,
) -> Result<LpRound, TransportError> {
    let m = cfg.m.min(plan.n);
    let (rows, cols) = if rng.random::<f64>() < cfg.pivot_fraction {
        random_pivot_search(plan, m, rng)?
    } else {
        let rows = sample_indices(plan.n, m, rng)?;
        (rows, sample_indices(plan.n, m, rng)?)
    };
    let (sp, start) = SubProblem::extract(plan, &rows, &cols, f, y)?;
    let sol = sub_lp_solve(&sp, &start, &cfg.ipm)?;
    splice(plan, &rows, &cols, &sol.block)?;
    Ok(LpRound {
        improvement: sp.objective(&start) - sol.objective,
        degraded: sol.degraded,
    })
}
