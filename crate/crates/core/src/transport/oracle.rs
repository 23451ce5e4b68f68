//! Exact solver for small transportation problems, used to check the
//! interior-point solver.
//!
//! Unit budgets reduce to the assignment problem and are solved by
//! enumerating all permutations; anything else goes through a dense
//! two-phase tableau simplex with Bland's rule.

use super::TransportError;

pub const ORACLE_MAX_N: usize = 8;

const PIVOT_EPS: f64 = 1e-12;

/// Exact optimum `(objective, plan)` of the `n×n` transportation problem.
pub fn exact_plan_oracle(
    costs: &[f64],
    n: usize,
    row_budgets: &[f64],
    col_budgets: &[f64],
) -> Result<(f64, Vec<f64>), TransportError> {
    if n > ORACLE_MAX_N {
        return Err(TransportError::OracleTooLarge { n, max: ORACLE_MAX_N });
    }
    if costs.len() != n * n || row_budgets.len() != n || col_budgets.len() != n {
        return Err(TransportError::Shape("oracle inputs disagree with n".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(TransportError::NonFiniteCost);
    }
    if row_budgets.iter().chain(col_budgets).any(|b| !b.is_finite() || *b < 0.0) {
        return Err(TransportError::NegativeBudget);
    }
    let rows: f64 = row_budgets.iter().sum();
    let cols: f64 = col_budgets.iter().sum();
    if (rows - cols).abs() > 1e-10 * rows.max(cols).max(1.0) {
        return Err(TransportError::InconsistentBudgets { rows, cols });
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    if row_budgets.iter().chain(col_budgets).all(|&b| b == 1.0) {
        let perm = best_permutation(costs, n);
        let mut plan = vec![0.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            plan[i * n + j] = 1.0;
        }
        let obj = perm.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum();
        return Ok((obj, plan));
    }
    let plan = simplex_transport(costs, n, row_budgets, col_budgets)?;
    let obj = costs.iter().zip(&plan).map(|(c, x)| c * x).sum();
    Ok((obj, plan))
}

/// Minimum-cost permutation by exhaustive enumeration (Heap's algorithm).
pub(crate) fn best_permutation(costs: &[f64], n: usize) -> Vec<usize> {
    let cost_of = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum() };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = cost_of(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = cost_of(&perm);
            if v < best_cost {
                best_cost = v;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows × (cols + 1)`, last column is the right-hand side.
    t: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.cols + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let piv = self.t[pr * w + pc];
        for j in 0..w {
            self.t[pr * w + j] /= piv;
        }
        for i in 0..self.rows {
            if i != pr {
                let f = self.t[i * w + pc];
                if f != 0.0 {
                    for j in 0..w {
                        self.t[i * w + j] -= f * self.t[pr * w + j];
                    }
                }
            }
        }
        self.basis[pr] = pc;
    }

    /// Bland's-rule simplex over the columns `< allowed` for `cost`.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<(), TransportError> {
        let limit = 50_000;
        for _ in 0..limit {
            let entering = (0..allowed).find(|&j| {
                let reduced = cost[j] - (0..self.rows).map(|i| cost[self.basis[i]] * self.at(i, j)).sum::<f64>();
                reduced < -1e-11
            });
            let Some(pc) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, pc);
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i) / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((pr, _)) = leave else {
                return Err(TransportError::Oracle("unbounded direction".into()));
            };
            self.pivot(pr, pc);
        }
        Err(TransportError::Oracle("simplex iteration limit".into()))
    }
}

fn simplex_transport(
    costs: &[f64],
    n: usize,
    row_budgets: &[f64],
    col_budgets: &[f64],
) -> Result<Vec<f64>, TransportError> {
    let nx = n * n;
    let m = 2 * n;
    let cols = nx + m;
    let mut tab = Tableau {
        rows: m,
        cols,
        t: vec![0.0; m * (cols + 1)],
        basis: (nx..nx + m).collect(),
    };
    let w = cols + 1;
    for i in 0..n {
        for j in 0..n {
            tab.t[i * w + i * n + j] = 1.0;
            tab.t[(n + j) * w + i * n + j] = 1.0;
        }
    }
    for r in 0..m {
        tab.t[r * w + nx + r] = 1.0;
        tab.t[r * w + cols] = if r < n { row_budgets[r] } else { col_budgets[r - n] };
    }

    let mut phase1 = vec![0.0; cols];
    phase1[nx..].iter_mut().for_each(|v| *v = 1.0);
    tab.optimize(&phase1, cols)?;
    let infeasibility: f64 = (0..m).filter(|&i| tab.basis[i] >= nx).map(|i| tab.rhs(i)).sum();
    let total: f64 = row_budgets.iter().sum();
    if infeasibility > 1e-9 * total.max(1.0) {
        return Err(TransportError::Oracle("budgets admit no feasible plan".into()));
    }
    // Drive remaining artificials out of the basis where possible; rows
    // where that fails are redundant and have no structural entries.
    for i in 0..m {
        if tab.basis[i] >= nx {
            if let Some(j) = (0..nx).find(|&j| tab.at(i, j).abs() > 1e-9) {
                tab.pivot(i, j);
            }
        }
    }

    let mut phase2 = vec![0.0; cols];
    phase2[..nx].copy_from_slice(costs);
    tab.optimize(&phase2, nx)?;
    let mut plan = vec![0.0; nx];
    for i in 0..m {
        if tab.basis[i] < nx {
            plan[tab.basis[i]] = tab.rhs(i).max(0.0);
        }
    }
    Ok(plan)
}
