//! Dense bounded-variable primal simplex for the small per-node programs.
//!
//! Solves `min c·x  s.t.  A x = b,  lb <= x <= ub` with every bound finite.
//! Two phases with one artificial per row; Bland's rule for both the entering
//! and the leaving choice, so the result is a deterministic function of the
//! input.

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Basic,
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpStatus {
    Optimal,
    /// Phase one ended with positive artificial mass; the value is the
    /// remaining violation of each row in the caller's (unscaled) units.
    Infeasible(Vec<f64>),
}

/// Reusable storage for one program. Build with [`Lp::reset`], add columns
/// and rows, then call [`Lp::solve`].
#[derive(Clone, Debug, Default)]
pub struct Lp {
    n: usize,
    m: usize,
    cost: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    /// row-major `m x n` constraint matrix
    a: Vec<f64>,
    b: Vec<f64>,
    // solver state
    width: usize,
    tab: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    x: Vec<f64>,
    row_scale: Vec<f64>,
    reduced: Vec<f64>,
    objective: Vec<f64>,
    pub iterations: usize,
}

impl Lp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self, n: usize, m: usize) {
        self.n = n;
        self.m = m;
        self.cost.clear();
        self.cost.resize(n, 0.0);
        self.lb.clear();
        self.lb.resize(n, 0.0);
        self.ub.clear();
        self.ub.resize(n, 0.0);
        self.a.clear();
        self.a.resize(n * m, 0.0);
        self.b.clear();
        self.b.resize(m, 0.0);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set_var(&mut self, j: usize, cost: f64, lb: f64, ub: f64) {
        self.cost[j] = cost;
        self.lb[j] = lb;
        self.ub[j] = ub.max(lb);
    }

    pub fn set_coef(&mut self, row: usize, j: usize, v: f64) {
        self.a[row * self.n + j] = v;
    }

    pub fn set_rhs(&mut self, row: usize, v: f64) {
        self.b[row] = v;
    }

    pub fn value(&self, j: usize) -> f64 {
        self.x[j]
    }

    pub fn solution(&self) -> &[f64] {
        &self.x[..self.n]
    }

    pub fn objective_value(&self) -> f64 {
        (0..self.n).map(|j| self.cost[j] * self.x[j]).sum()
    }

    pub fn solve(&mut self) -> LpStatus {
        let (n, m) = (self.n, self.m);
        let width = n + m;
        self.width = width;
        self.iterations = 0;
        self.tab.clear();
        self.tab.resize(m * width, 0.0);
        self.basis.clear();
        self.status.clear();
        self.status.resize(width, Status::Lower);
        self.x.clear();
        self.x.resize(width, 0.0);
        self.row_scale.clear();

        for j in 0..n {
            self.x[j] = self.lb[j];
        }
        for i in 0..m {
            let row = &self.a[i * n..(i + 1) * n];
            let scale = row.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
            let mut resid = self.b[i];
            for j in 0..n {
                resid -= row[j] * self.x[j];
            }
            let sign = if resid >= 0.0 { 1.0 } else { -1.0 };
            let k = sign / scale;
            let t = &mut self.tab[i * width..(i + 1) * width];
            for j in 0..n {
                t[j] = row[j] * k;
            }
            t[n + i] = 1.0;
            self.basis.push(n + i);
            self.status[n + i] = Status::Basic;
            self.x[n + i] = resid.abs() / scale;
            self.row_scale.push(scale);
        }

        // phase one
        self.objective.clear();
        self.objective.resize(width, 0.0);
        for i in 0..m {
            self.objective[n + i] = 1.0;
        }
        let art_ub = f64::INFINITY;
        self.run(width, art_ub);
        let violation: Vec<f64> = (0..m).map(|i| self.x[n + i] * self.row_scale[i]).collect();
        if (0..m).any(|i| self.x[n + i] > FEAS_TOL) {
            return LpStatus::Infeasible(violation);
        }

        // drive zero-level artificials out of the basis where possible
        for r in 0..m {
            let bv = self.basis[r];
            if bv < n {
                continue;
            }
            let row = &self.tab[r * width..r * width + n];
            if let Some(j) = (0..n).find(|&j| self.status[j] != Status::Basic && row[j].abs() > 1e-9) {
                self.pivot(r, j);
                self.status[bv] = Status::Lower;
                self.x[bv] = 0.0;
            }
        }
        for i in 0..m {
            if self.status[n + i] != Status::Basic {
                self.x[n + i] = 0.0;
            }
        }

        // phase two, artificials pinned at zero
        let cmax = self.cost.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let cs = if cmax > 0.0 { 1.0 / cmax } else { 1.0 };
        for j in 0..n {
            self.objective[j] = self.cost[j] * cs;
        }
        for i in 0..m {
            self.objective[n + i] = 0.0;
        }
        self.run(n, 0.0);
        LpStatus::Optimal
    }

    fn bounds(&self, j: usize, art_ub: f64) -> (f64, f64) {
        if j < self.n {
            (self.lb[j], self.ub[j])
        } else {
            (0.0, art_ub)
        }
    }

    /// Simplex iterations over candidate columns `0..enter_limit`.
    fn run(&mut self, enter_limit: usize, art_ub: f64) {
        let (m, width) = (self.m, self.width);
        let max_iter = 50 * (width + m) + 100;
        loop {
            self.iterations += 1;
            if self.iterations > max_iter {
                break;
            }
            // reduced costs
            self.reduced.clear();
            self.reduced.extend_from_slice(&self.objective[..width]);
            for i in 0..m {
                let cb = self.objective[self.basis[i]];
                if cb != 0.0 {
                    let row = &self.tab[i * width..(i + 1) * width];
                    for (d, t) in self.reduced.iter_mut().zip(row) {
                        *d -= cb * t;
                    }
                }
            }
            let mut enter = None;
            for j in 0..enter_limit {
                let (lo, hi) = self.bounds(j, art_ub);
                if hi - lo <= 0.0 {
                    continue;
                }
                match self.status[j] {
                    Status::Lower if self.reduced[j] < -OPT_TOL => {
                        enter = Some((j, 1.0));
                        break;
                    }
                    Status::Upper if self.reduced[j] > OPT_TOL => {
                        enter = Some((j, -1.0));
                        break;
                    }
                    _ => {}
                }
            }
            let Some((q, dir)) = enter else { break };

            let (qlo, qhi) = self.bounds(q, art_ub);
            let mut step = qhi - qlo;
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..m {
                let t = self.tab[i * width + q];
                if t.abs() <= PIVOT_TOL {
                    continue;
                }
                let bv = self.basis[i];
                let (lo, hi) = self.bounds(bv, art_ub);
                let delta = -dir * t;
                let (limit, to_upper) = if delta < 0.0 {
                    (((self.x[bv] - lo) / -delta).max(0.0), false)
                } else {
                    if hi.is_infinite() {
                        continue;
                    }
                    (((hi - self.x[bv]) / delta).max(0.0), true)
                };
                let better = match leave {
                    None => limit < step,
                    Some((r, _)) => {
                        limit < step - 1e-15 || (limit <= step + 1e-15 && bv < self.basis[r])
                    }
                };
                if better {
                    step = limit;
                    leave = Some((i, to_upper));
                }
            }
            if step.is_infinite() {
                // unbounded cannot happen with finite bounds; stop defensively
                break;
            }
            for i in 0..m {
                let t = self.tab[i * width + q];
                if t != 0.0 {
                    let bv = self.basis[i];
                    self.x[bv] -= dir * t * step;
                }
            }
            self.x[q] += dir * step;
            match leave {
                None => {
                    self.status[q] = if dir > 0.0 { Status::Upper } else { Status::Lower };
                    self.x[q] = if dir > 0.0 { qhi } else { qlo };
                }
                Some((r, to_upper)) => {
                    let bv = self.basis[r];
                    let (lo, hi) = self.bounds(bv, art_ub);
                    self.status[bv] = if to_upper { Status::Upper } else { Status::Lower };
                    self.x[bv] = if to_upper { hi } else { lo };
                    self.pivot(r, q);
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let (m, width) = (self.m, self.width);
        let p = self.tab[r * width + q];
        let inv = 1.0 / p;
        for v in &mut self.tab[r * width..(r + 1) * width] {
            *v *= inv;
        }
        for i in 0..m {
            if i == r {
                continue;
            }
            let f = self.tab[i * width + q];
            if f == 0.0 {
                continue;
            }
            let (head, tail) = if i < r {
                let (h, t) = self.tab.split_at_mut(r * width);
                (&mut h[i * width..(i + 1) * width], &t[..width])
            } else {
                let (h, t) = self.tab.split_at_mut(i * width);
                (&mut t[..width], &h[r * width..(r + 1) * width])
            };
            for (a, b) in head.iter_mut().zip(tail) {
                *a -= f * b;
            }
            head[q] = 0.0;
        }
        self.basis[r] = q;
        self.status[q] = Status::Basic;
    }
}
