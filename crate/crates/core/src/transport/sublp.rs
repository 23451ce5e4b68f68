//! Primal-dual interior-point solver for the transportation sub-problem
//!
//! ```text
//! min Σ C_kl x_kl   s.t.  Σ_l x_kl = r_k,  Σ_k x_kl = c_l,  x ≥ 0
//! ```
//!
//! Mehrotra predictor-corrector with the last column constraint dropped as
//! redundant. The normal equations are solved through their block
//! structure: the row block is diagonal, so only a `(q-1)×(q-1)` Schur
//! complement needs a Cholesky factorization.

use super::{SubProblem, TransportError, CLAMP_TOL};

/// Tolerance on start-block feasibility, relative to the total budget.
const START_TOL: f64 = 1e-8;
/// Budgets below this fraction of the total are treated as zero.
const ZERO_BUDGET: f64 = 1e-13;
/// Fraction of the distance to the boundary taken by each step.
const STEP_DAMPING: f64 = 0.995;
/// Marginal-repair sweeps applied to the final iterate.
const REPAIR_SWEEPS: usize = 4;
/// Largest primal or dual residual (normalized units) an iterate may carry.
const FEAS_TOL: f64 = 1e-8;
/// Projections back onto the primal constraints allowed per solve.
const MAX_PROJECTIONS: usize = 5;
/// Primal residual that triggers a projection.
const DRIFT_TOL: f64 = 1e-8;
/// Relative gap accepted when roundoff stops the iteration early.
const ACCEPT_GAP: f64 = 1e-8;
/// Marginal error tolerated after repair, relative to the block mass.
const REPAIR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmOptions {
    pub max_iter: usize,
    /// Complementarity tolerance on the normalized problem (budgets summing
    /// to one, costs scaled into `[0, 1]`), relative to `1 + |objective|`.
    pub tol: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubLpSolution {
    /// Row-major block with the sub-problem's row and column sums.
    pub block: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Set when the solver stopped short of the tolerance, either at the
    /// iteration cap or on numerical breakdown.
    pub degraded: bool,
}

fn validate(sp: &SubProblem, start: &[f64]) -> Result<f64, TransportError> {
    let (p, q) = (sp.row_budgets.len(), sp.col_budgets.len());
    if sp.rows.len() != p || sp.cols.len() != q || sp.costs.len() != p * q || start.len() != p * q {
        return Err(TransportError::Shape(format!(
            "sub-problem {p}×{q} with {} costs and a start block of {}",
            sp.costs.len(),
            start.len()
        )));
    }
    if sp.costs.iter().any(|c| !c.is_finite()) {
        return Err(TransportError::NonFiniteCost);
    }
    if sp.row_budgets.iter().chain(&sp.col_budgets).any(|b| !b.is_finite() || *b < 0.0) {
        return Err(TransportError::NegativeBudget);
    }
    let rows: f64 = sp.row_budgets.iter().sum();
    let cols: f64 = sp.col_budgets.iter().sum();
    let scale = rows.max(cols).max(1.0);
    if (rows - cols).abs() > 1e-10 * scale {
        return Err(TransportError::InconsistentBudgets { rows, cols });
    }
    if let Some(bad) = start.iter().find(|v| !v.is_finite() || **v < -CLAMP_TOL) {
        return Err(TransportError::InfeasibleStart(-bad));
    }
    let mut worst = 0.0_f64;
    for (row, b) in start.chunks_exact(q.max(1)).zip(&sp.row_budgets) {
        worst = worst.max((row.iter().sum::<f64>() - b).abs());
    }
    for (l, b) in sp.col_budgets.iter().enumerate() {
        worst = worst.max((start.iter().skip(l).step_by(q).sum::<f64>() - b).abs());
    }
    if worst > START_TOL * scale {
        return Err(TransportError::InfeasibleStart(worst));
    }
    Ok(rows)
}

/// Solves the sub-problem from a feasible start block. The result never has
/// a larger objective than `start`.
pub fn sub_lp_solve(
    sp: &SubProblem,
    start: &[f64],
    opts: &IpmOptions,
) -> Result<SubLpSolution, TransportError> {
    let total = validate(sp, start)?;
    let (p, q) = (sp.row_budgets.len(), sp.col_budgets.len());
    let start: Vec<f64> = start.iter().map(|v| v.max(0.0)).collect();
    let start_obj = sp.objective(&start);
    let keep_start = |iterations, degraded| SubLpSolution {
        block: start.clone(),
        objective: start_obj,
        iterations,
        degraded,
    };
    if p == 0 || q == 0 || total <= 0.0 {
        return Ok(keep_start(0, false));
    }

    // Fix rows and columns whose remaining budget is negligible; their
    // entries stay at the start values.
    let thr = ZERO_BUDGET * total;
    let mut row_on = vec![true; p];
    let mut col_on = vec![true; q];
    loop {
        let mut changed = false;
        for k in 0..p {
            if row_on[k] {
                let rem: f64 = (0..q).filter(|&l| col_on[l]).map(|l| start[k * q + l]).sum();
                if rem <= thr {
                    row_on[k] = false;
                    changed = true;
                }
            }
        }
        for l in 0..q {
            if col_on[l] {
                let rem: f64 = (0..p).filter(|&k| row_on[k]).map(|k| start[k * q + l]).sum();
                if rem <= thr {
                    col_on[l] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let rk: Vec<usize> = (0..p).filter(|&k| row_on[k]).collect();
    let cl: Vec<usize> = (0..q).filter(|&l| col_on[l]).collect();
    if rk.is_empty() || cl.is_empty() {
        return Ok(keep_start(0, false));
    }
    let (pa, qa) = (rk.len(), cl.len());
    let sub_start: Vec<f64> = rk
        .iter()
        .flat_map(|&k| cl.iter().map(move |&l| (k, l)))
        .map(|(k, l)| start[k * q + l])
        .collect();
    let r: Vec<f64> = sub_start.chunks_exact(qa).map(|row| row.iter().sum()).collect();
    let c: Vec<f64> = (0..qa).map(|l| sub_start.iter().skip(l).step_by(qa).sum()).collect();
    let costs: Vec<f64> = rk
        .iter()
        .flat_map(|&k| cl.iter().map(move |&l| (k, l)))
        .map(|(k, l)| sp.costs[k * q + l])
        .collect();

    let (x, iterations, degraded) = if pa == 1 {
        (c.clone(), 0, false)
    } else if qa == 1 {
        (r.clone(), 0, false)
    } else {
        let cmin = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let cmax = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if cmax - cmin <= 0.0 {
            return Ok(keep_start(0, false));
        }
        let mass: f64 = r.iter().sum();
        let chat: Vec<f64> = costs.iter().map(|v| (v - cmin) / (cmax - cmin)).collect();
        let rhat: Vec<f64> = r.iter().map(|v| v / mass).collect();
        let colhat: Vec<f64> = c.iter().map(|v| v / mass).collect();
        let x0: Vec<f64> = sub_start
            .iter()
            .enumerate()
            .map(|(idx, v)| 0.9 * v / mass + 0.1 * rhat[idx / qa] * colhat[idx % qa])
            .collect();
        let mut state = Mehrotra::new(pa, qa, &chat, &rhat, &colhat, x0);
        let (iters, converged) = state.run(opts);
        let mut x: Vec<f64> = state.x.iter().map(|v| v * mass).collect();
        repair_marginals(&mut x, &r, &c);
        if marginal_error(&x, &r, &c) > REPAIR_TOL * mass.max(1.0) {
            return Ok(keep_start(iters, true));
        }
        (x, iters, !converged)
    };

    let mut block = start.clone();
    for (a, &k) in rk.iter().enumerate() {
        for (b, &l) in cl.iter().enumerate() {
            block[k * q + l] = x[a * qa + b];
        }
    }
    let objective = sp.objective(&block);
    if !(objective <= start_obj) || block.iter().any(|v| !v.is_finite()) {
        return Ok(keep_start(iterations, degraded));
    }
    Ok(SubLpSolution {
        block,
        objective,
        iterations,
        degraded,
    })
}

fn marginal_error(x: &[f64], r: &[f64], c: &[f64]) -> f64 {
    let q = c.len();
    let rows = x.chunks_exact(q).zip(r).map(|(row, t)| (row.iter().sum::<f64>() - t).abs());
    let cols = c.iter().enumerate().map(|(l, t)| (x.iter().skip(l).step_by(q).sum::<f64>() - t).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Restores the marginals `r`, `c` of a nearly feasible `x`: a few
/// alternating rescaling sweeps, then a weighted projection.
fn repair_marginals(x: &mut [f64], r: &[f64], c: &[f64]) {
    let q = c.len();
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
    for _ in 0..REPAIR_SWEEPS {
        for (row, &target) in x.chunks_exact_mut(q).zip(r) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v *= target / s);
            }
        }
        for (l, &target) in c.iter().enumerate() {
            let s: f64 = x.iter().skip(l).step_by(q).sum();
            if s > 0.0 {
                x.iter_mut().skip(l).step_by(q).for_each(|v| *v *= target / s);
            }
        }
    }
    for _ in 0..2 {
        project_marginals(x, r, c);
    }
}

/// Weighted projection onto the marginals: `x_kl ← x_kl·(1 + α_k + β_l)`
/// with `α`, `β` solving the marginal equations, so tiny entries barely
/// move. Returns false if the system could not be factored.
fn project_marginals(x: &mut [f64], r: &[f64], c: &[f64]) -> bool {
    let (p, q) = (r.len(), c.len());
    if p < 2 || q < 2 {
        return true;
    }
    let mut sys = NormalSystem::new(p, q);
    {
        sys.d.copy_from_slice(x);
        if !sys.factor() {
            return false;
        }
        let er: Vec<f64> = x.chunks_exact(q).zip(r).map(|(row, t)| t - row.iter().sum::<f64>()).collect();
        let ec: Vec<f64> = (0..q - 1).map(|l| c[l] - x.iter().skip(l).step_by(q).sum::<f64>()).collect();
        let (du, dv) = sys.solve(&er, &ec);
        for (k, row) in x.chunks_exact_mut(q).enumerate() {
            for (l, v) in row.iter_mut().enumerate() {
                *v = (*v * (1.0 + du[k] + dv[l])).max(0.0);
            }
        }
    }
    true
}

struct Mehrotra<'a> {
    p: usize,
    q: usize,
    cost: &'a [f64],
    r: &'a [f64],
    c: &'a [f64],
    x: Vec<f64>,
    s: Vec<f64>,
    u: Vec<f64>,
    /// Column duals; the last entry is pinned at zero.
    v: Vec<f64>,
    /// Last iterate that satisfied the residual tolerance.
    saved: Vec<f64>,
    saved_gap: f64,
    sys: NormalSystem,
}

struct Direction {
    dx: Vec<f64>,
    ds: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
}

impl<'a> Mehrotra<'a> {
    fn new(p: usize, q: usize, cost: &'a [f64], r: &'a [f64], c: &'a [f64], x0: Vec<f64>) -> Self {
        let s = cost.iter().map(|v| v + 1.0).collect();
        Self {
            p,
            q,
            cost,
            r,
            c,
            saved: x0.clone(),
            saved_gap: f64::INFINITY,
            x: x0,
            s,
            u: vec![-1.0; p],
            v: vec![0.0; q],
            sys: NormalSystem::new(p, q),
        }
    }

    fn snapshot(&mut self, gap: f64) {
        self.saved.copy_from_slice(&self.x);
        self.saved_gap = gap;
    }

    /// Falls back to the last iterate within the residual tolerance and
    /// reports whether its gap is acceptable.
    fn restore(&mut self) -> bool {
        self.x.copy_from_slice(&self.saved);
        self.saved_gap <= ACCEPT_GAP
    }

    fn residuals(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (p, q) = (self.p, self.q);
        let mut rp_row = self.r.to_vec();
        let mut rp_col = self.c[..q - 1].to_vec();
        let mut rd = vec![0.0; p * q];
        for k in 0..p {
            for l in 0..q {
                let idx = k * q + l;
                rp_row[k] -= self.x[idx];
                if l < q - 1 {
                    rp_col[l] -= self.x[idx];
                }
                rd[idx] = self.cost[idx] - self.u[k] - self.v[l] - self.s[idx];
            }
        }
        (rp_row, rp_col, rd)
    }

    fn run(&mut self, opts: &IpmOptions) -> (usize, bool) {
        let n = (self.p * self.q) as f64;
        let mut projections = 0;
        for iter in 0..opts.max_iter {
            let (mut rp_row, mut rp_col, mut rd) = self.residuals();
            let drift = rp_row.iter().chain(&rp_col).fold(0.0_f64, |m, v| m.max(v.abs()));
            if drift > DRIFT_TOL && projections < MAX_PROJECTIONS {
                // Pull the iterate back onto the primal constraints.
                projections += 1;
                if project_marginals(&mut self.x, self.r, self.c) && self.x.iter().all(|&v| v > 0.0) {
                    (rp_row, rp_col, rd) = self.residuals();
                } else {
                    return (iter, self.restore());
                }
            }
            let xs: f64 = self.x.iter().zip(&self.s).map(|(a, b)| a * b).sum();
            let primal: f64 = self.x.iter().zip(self.cost).map(|(a, b)| a * b).sum();
            let inf_p = rp_row.iter().chain(&rp_col).fold(0.0_f64, |m, v| m.max(v.abs()));
            let inf_d = rd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let dual_scale = self.u.iter().chain(&self.v).fold(1.0_f64, |m, v| m.max(v.abs()));
            if inf_p > FEAS_TOL || inf_d > FEAS_TOL * dual_scale {
                // Roundoff has pushed the iterate off the feasible set;
                // fall back to the last feasible one.
                return (iter, self.restore());
            }
            let gap = xs / (1.0 + primal.abs());
            self.snapshot(gap);
            if gap <= opts.tol {
                return (iter, true);
            }
            if !self.factor() {
                return (iter, self.restore());
            }
            let mu = xs / n;
            let r_aff: Vec<f64> = self.x.iter().zip(&self.s).map(|(a, b)| -a * b).collect();
            let aff = self.solve(&rp_row, &rp_col, &rd, &r_aff);
            let ap = step_to_boundary(&self.x, &aff.dx);
            let ad = step_to_boundary(&self.s, &aff.ds);
            let mu_aff: f64 = self
                .x
                .iter()
                .zip(&aff.dx)
                .zip(self.s.iter().zip(&aff.ds))
                .map(|((x, dx), (s, ds))| (x + ap * dx) * (s + ad * ds))
                .sum::<f64>()
                / n;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let r_cor: Vec<f64> = (0..self.x.len())
                .map(|i| -self.x[i] * self.s[i] - aff.dx[i] * aff.ds[i] + sigma * mu)
                .collect();
            let dir = self.solve(&rp_row, &rp_col, &rd, &r_cor);
            let ap = (STEP_DAMPING * step_to_boundary(&self.x, &dir.dx)).min(1.0);
            let ad = (STEP_DAMPING * step_to_boundary(&self.s, &dir.ds)).min(1.0);
            let all_finite = dir.dx.iter().chain(&dir.ds).chain(&dir.du).chain(&dir.dv).all(|v| v.is_finite());
            if !all_finite {
                return (iter, self.restore());
            }
            for (x, dx) in self.x.iter_mut().zip(&dir.dx) {
                *x += ap * dx;
            }
            for (s, ds) in self.s.iter_mut().zip(&dir.ds) {
                *s += ad * ds;
            }
            for (u, du) in self.u.iter_mut().zip(&dir.du) {
                *u += ad * du;
            }
            for (v, dv) in self.v.iter_mut().zip(&dir.dv) {
                *v += ad * dv;
            }
        }
        let (rp_row, rp_col, rd) = self.residuals();
        let inf = rp_row.iter().chain(&rp_col).chain(&rd).fold(0.0_f64, |m, v| m.max(v.abs()));
        if inf > FEAS_TOL {
            self.restore();
        }
        (opts.max_iter, false)
    }

    fn factor(&mut self) -> bool {
        for (d, (x, s)) in self.sys.d.iter_mut().zip(self.x.iter().zip(&self.s)) {
            *d = x / s;
        }
        self.sys.factor()
    }

    /// Solves the Newton system for complementarity right-hand side `rxs`.
    fn solve(&self, rp_row: &[f64], rp_col: &[f64], rd: &[f64], rxs: &[f64]) -> Direction {
        let (p, q) = (self.p, self.q);
        let m = q - 1;
        // w = S^{-1} rxs − D rd; the reduced right-hand side is rp − A w.
        let w: Vec<f64> = (0..p * q).map(|i| rxs[i] / self.s[i] - self.sys.d[i] * rd[i]).collect();
        let mut hu = rp_row.to_vec();
        let mut hv = rp_col.to_vec();
        for k in 0..p {
            for l in 0..q {
                hu[k] -= w[k * q + l];
                if l < m {
                    hv[l] -= w[k * q + l];
                }
            }
        }
        let (du, dv) = self.sys.solve(&hu, &hv);
        let mut dx = vec![0.0; p * q];
        let mut ds = vec![0.0; p * q];
        for k in 0..p {
            for l in 0..q {
                let i = k * q + l;
                let aty = du[k] + dv[l];
                ds[i] = rd[i] - aty;
                dx[i] = w[i] + self.sys.d[i] * aty;
            }
        }
        Direction { dx, ds, du, dv }
    }
}

/// The matrix `A·diag(d)·Aᵀ` of the transportation constraints with the
/// last column constraint dropped, factored through its block structure.
struct NormalSystem {
    p: usize,
    q: usize,
    d: Vec<f64>,
    rsum: Vec<f64>,
    /// Cholesky factor of the Schur complement on the column block.
    chol: Vec<f64>,
}

impl NormalSystem {
    fn new(p: usize, q: usize) -> Self {
        Self {
            p,
            q,
            d: vec![0.0; p * q],
            rsum: vec![0.0; p],
            chol: vec![0.0; (q - 1) * (q - 1)],
        }
    }

    fn factor(&mut self) -> bool {
        let (p, q) = (self.p, self.q);
        let m = q - 1;
        for k in 0..p {
            self.rsum[k] = self.d[k * q..(k + 1) * q].iter().sum();
            if !(self.rsum[k] > 0.0) {
                return false;
            }
        }
        let a = &mut self.chol;
        a.iter_mut().for_each(|v| *v = 0.0);
        let mut others = vec![0.0; q];
        for k in 0..p {
            let row = &self.d[k * q..(k + 1) * q];
            // others[l] = Σ_{l' != l} d_kl', formed from prefix and suffix
            // sums so the diagonal term below involves no cancellation.
            let mut prefix = 0.0;
            for l in 0..q {
                others[l] = prefix;
                prefix += row[l];
            }
            let mut suffix = 0.0;
            for l in (0..q).rev() {
                others[l] += suffix;
                suffix += row[l];
            }
            let inv = 1.0 / self.rsum[k];
            for i in 0..m {
                a[i * m + i] += row[i] * others[i] * inv;
                let di = row[i] * inv;
                for j in 0..i {
                    a[i * m + j] -= di * row[j];
                }
            }
        }
        cholesky_in_place(a, m)
    }

    /// Solves for the row and column multipliers; the returned column
    /// vector has the pinned last entry appended.
    fn solve(&self, hu: &[f64], hv: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (p, q) = (self.p, self.q);
        let m = q - 1;
        let mut rhs = hv.to_vec();
        for k in 0..p {
            let f = hu[k] / self.rsum[k];
            for l in 0..m {
                rhs[l] -= self.d[k * q + l] * f;
            }
        }
        cholesky_solve(&self.chol, m, &mut rhs);
        let mut dv = rhs;
        dv.push(0.0);
        let du = (0..p)
            .map(|k| {
                let coupled: f64 = (0..m).map(|l| self.d[k * q + l] * dv[l]).sum();
                (hu[k] - coupled) / self.rsum[k]
            })
            .collect();
        (du, dv)
    }
}

fn step_to_boundary(z: &[f64], dz: &[f64]) -> f64 {
    z.iter()
        .zip(dz)
        .filter(|(_, d)| **d < 0.0)
        .map(|(z, d)| -z / d)
        .fold(1.0_f64, f64::min)
}

/// Lower-triangular Cholesky of a symmetric matrix whose lower triangle is
/// filled. Tiny or negative pivots are regularized.
fn cholesky_in_place(a: &mut [f64], m: usize) -> bool {
    let scale = (0..m).map(|i| a[i * m + i].abs()).fold(0.0_f64, f64::max);
    if !scale.is_finite() {
        return false;
    }
    let floor = scale.max(f64::MIN_POSITIVE) * 1e-14;
    for j in 0..m {
        let mut diag = a[j * m + j];
        for k in 0..j {
            diag -= a[j * m + k] * a[j * m + k];
        }
        let diag = diag.max(floor).sqrt();
        a[j * m + j] = diag;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / diag;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], m: usize, b: &mut [f64]) {
    for i in 0..m {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * m + k] * b[k];
        }
        b[i] = v / l[i * m + i];
    }
    for i in (0..m).rev() {
        let mut v = b[i];
        for k in i + 1..m {
            v -= l[k * m + i] * b[k];
        }
        b[i] = v / l[i * m + i];
    }
}
