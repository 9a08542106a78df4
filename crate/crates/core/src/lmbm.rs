//! Limited-memory bundle method for convex nonsmooth minimization.
//!
//! The dual is maximized by minimizing `f = -θ̃`. Variables are optionally
//! scaled (`x = scale·y`) so that the initial metric is sensible when the
//! multipliers are tiny compared to their subgradients.

use std::collections::VecDeque;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LmbmOptions {
    /// Maximum number of oracle calls, including the initial point.
    pub max_evals: usize,
    /// Stop when `w_k <= epsilon`.
    pub epsilon: f64,
    pub memory: usize,
    pub eps_l: f64,
    pub eps_r: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Locality measure `max(|α|, γ·‖s‖^w)`.
    pub gamma: f64,
    pub locality_exponent: f64,
    /// Length of the first trial step (scaled units) while the metric is the
    /// identity.
    pub initial_step: f64,
    /// Upper bound on every trial step length, scaled units.
    pub max_step: f64,
    /// Failed trials after which the line search settles for a null step.
    pub max_backtracks: usize,
    /// Per-variable scale, `x = scale·y`. Empty means 1.
    pub scale: Vec<f64>,
    /// Box `|x_i| <= bound` in original units; trial points are clamped.
    pub bound: f64,
}

impl Default for LmbmOptions {
    fn default() -> Self {
        LmbmOptions {
            max_evals: 100,
            epsilon: 1e-6,
            memory: 7,
            eps_l: 1e-4,
            eps_r: 0.25,
            t_min: 1e-12,
            t_max: 1000.0,
            gamma: 0.0,
            locality_exponent: 2.0,
            initial_step: 1.0,
            max_step: f64::INFINITY,
            max_backtracks: 3,
            scale: Vec::new(),
            bound: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Initial,
    Serious,
    Null,
    /// Trial point rejected during the line search.
    Trial,
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Initial => "initial",
            StepKind::Serious => "serious",
            StepKind::Null => "null",
            StepKind::Trial => "trial",
        }
    }
}

/// One oracle call.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub eval: usize,
    pub iteration: usize,
    /// objective at the evaluated point (`+∞` if the oracle failed)
    pub value: f64,
    pub best: f64,
    pub kind: StepKind,
    pub w: f64,
    pub step: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    EvalLimit,
    /// Line search failed to produce either kind of step.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmbmResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub history: Vec<HistoryRow>,
    /// Whether some trial point was clamped to the box.
    pub bound_hit: bool,
}

/// Limited-memory inverse metric from correction pairs `(s, u)`.
#[derive(Clone, Debug, Default)]
pub struct Metric {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Metric {
    pub fn new(capacity: usize) -> Self {
        Metric {
            pairs: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    /// Adds a pair when the curvature `sᵀu` is safely positive.
    pub fn update(&mut self, s: Vec<f64>, u: Vec<f64>) -> bool {
        let su = dot(&s, &u);
        let ss = dot(&s, &s).sqrt();
        let uu = dot(&u, &u).sqrt();
        if !(su > 1e-12 * ss * uu) || !su.is_finite() {
            return false;
        }
        if self.capacity == 0 {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, u, 1.0 / su));
        true
    }

    /// `D·g` by the two-loop recursion.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (k, (s, u, rho)) in self.pairs.iter().enumerate().rev() {
            alpha[k] = rho * dot(s, &q);
            for (qi, ui) in q.iter_mut().zip(u) {
                *qi -= alpha[k] * ui;
            }
        }
        if let Some((s, u, _)) = self.pairs.back() {
            let h0 = dot(s, u) / dot(u, u);
            for qi in &mut q {
                *qi *= h0;
            }
        }
        for (k, (s, u, rho)) in self.pairs.iter().enumerate() {
            let b = rho * dot(u, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha[k] - b) * si;
            }
        }
        q
    }
}

/// `d = -D·ξ̃`, falling back to `-ξ̃` (and a memory reset) if the product is
/// not finite.
pub fn search_direction(metric: &mut Metric, agg: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = metric.apply(agg).into_iter().map(|v| -v).collect();
    if d.iter().all(|v| v.is_finite()) {
        d
    } else {
        metric.reset();
        agg.iter().map(|v| -v).collect()
    }
}

/// Minimizes `φ(λ) = λᵀGλ + 2bᵀλ` over the unit simplex by enumerating
/// faces in a fixed order: vertices 2, 1, 3, then edges, then the interior.
/// Ties keep the earlier candidate.
pub fn simplex_qp3(g: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
    let phi = |l: &[f64; 3]| -> f64 {
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += l[i] * g[i][j] * l[j];
            }
            v += 2.0 * b[i] * l[i];
        }
        v
    };
    let mut cands: Vec<[f64; 3]> = vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    for (i, j) in [(0usize, 1usize), (1, 2), (0, 2)] {
        // λ_i = s, λ_j = 1 - s
        let a = g[i][i] - 2.0 * g[i][j] + g[j][j];
        let c = g[i][j] - g[j][j] + b[i] - b[j];
        if a > 0.0 {
            let s = -c / a;
            if s > 0.0 && s < 1.0 {
                let mut l = [0.0; 3];
                l[i] = s;
                l[j] = 1.0 - s;
                cands.push(l);
            }
        }
    }
    if let Some(l) = interior_stationary(g, b) {
        cands.push(l);
    }
    let mut best = cands[0];
    let mut best_v = phi(&best);
    for c in &cands[1..] {
        let v = phi(c);
        if v < best_v - 1e-15 * best_v.abs().max(1e-300) {
            best = *c;
            best_v = v;
        }
    }
    best
}

fn interior_stationary(g: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    // [2G 1; 1ᵀ 0] [λ; μ] = [-2b; 1]
    let mut m = [[0.0; 5]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = 2.0 * g[i][j];
        }
        m[i][3] = 1.0;
        m[i][4] = -2.0 * b[i];
        m[3][i] = 1.0;
    }
    m[3][4] = 1.0;
    let scale = m.iter().flat_map(|r| r[..4].iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..5 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let l = [m[0][4] / m[0][0], m[1][4] / m[1][1], m[2][4] / m[2][2]];
    (l.iter().all(|&v| v > 0.0 && v < 1.0)).then_some(l)
}

/// Aggregate subgradient after a null step: `ξ_m` belongs to the current
/// iterate, `ξ_new` to the trial point with locality `beta_new`.
pub fn aggregate(
    metric: &Metric,
    xi_m: &[f64],
    xi_new: &[f64],
    beta_new: f64,
    xi_agg: &[f64],
    beta_agg: f64,
) -> (Vec<f64>, f64, [f64; 3]) {
    let v = [xi_m, xi_new, xi_agg];
    let dv: Vec<Vec<f64>> = v.iter().map(|x| metric.apply(x)).collect();
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = 0.5 * (dot(v[i], &dv[j]) + dot(v[j], &dv[i]));
        }
    }
    let l = simplex_qp3(&g, &[0.0, beta_new, beta_agg]);
    let xi: Vec<f64> = (0..xi_m.len())
        .map(|k| l[0] * xi_m[k] + l[1] * xi_new[k] + l[2] * xi_agg[k])
        .collect();
    (xi, l[1] * beta_new + l[2] * beta_agg, l)
}

/// Outcome of one line search.
#[derive(Clone, Debug, PartialEq)]
pub enum LineSearch {
    /// `t_L = t_R = t`
    Serious { t: f64, y: Vec<f64>, f: f64, g: Vec<f64> },
    /// `t_L = 0 < t_R = t`
    Null { t: f64, g: Vec<f64>, beta: f64 },
    /// Ran out of oracle calls or step length.
    Failed,
}

type Oracle<'o> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'o;

struct Runner<'o, 'p> {
    oracle: &'p mut Oracle<'o>,
    opts: &'p LmbmOptions,
    scale: Vec<f64>,
    evals: usize,
    history: Vec<HistoryRow>,
    best: f64,
    best_x: Vec<f64>,
    bound_hit: bool,
    failures: usize,
}

impl Runner<'_, '_> {
    /// Evaluates in scaled coordinates; failures become `+∞`.
    fn eval(&mut self, y: &[f64], iteration: usize, kind: StepKind, w: f64, step: f64) -> (f64, Option<Vec<f64>>) {
        let x: Vec<f64> = y.iter().zip(&self.scale).map(|(a, s)| a * s).collect();
        self.evals += 1;
        let (f, g) = match (self.oracle)(&x) {
            Ok((f, g)) if f.is_finite() && g.len() == x.len() && g.iter().all(|v| v.is_finite()) => {
                (f, Some(g.iter().zip(&self.scale).map(|(a, s)| a * s).collect()))
            }
            _ => {
                self.failures += 1;
                (f64::INFINITY, None)
            }
        };
        if f < self.best {
            self.best = f;
            self.best_x = x.clone();
        }
        self.history.push(HistoryRow {
            eval: self.evals,
            iteration,
            value: f,
            best: self.best,
            kind,
            w,
            step,
            x,
        });
        (f, g)
    }

    fn clamp(&mut self, y: &mut [f64]) {
        let b = self.opts.bound;
        for (v, s) in y.iter_mut().zip(&self.scale) {
            let lim = b / s.abs();
            if v.abs() > lim {
                *v = v.clamp(-lim, lim);
                self.bound_hit = true;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn line_search(&mut self, x: &[f64], fx: f64, d: &[f64], w: f64, t0: f64, iteration: usize) -> LineSearch {
        let o = self.opts;
        let mut t = t0.clamp(o.t_min, o.t_max);
        let dnorm = dot(d, d).sqrt();
        let mut last: Option<(f64, Vec<f64>, f64)> = None;
        let mut tries = 0;
        loop {
            if self.evals >= o.max_evals {
                break;
            }
            let mut y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
            self.clamp(&mut y);
            let (fy, gy) = self.eval(&y, iteration, StepKind::Trial, w, t);
            if let Some(gy) = gy {
                if fy <= fx - o.eps_l * t * w {
                    self.history.last_mut().unwrap().kind = StepKind::Serious;
                    return LineSearch::Serious { t, y, f: fy, g: gy };
                }
                // linearization error of the trial cut at x
                let s: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
                let alpha = (fx - fy + dot(&gy, &s)).abs();
                let beta = alpha.max(o.gamma * (t * dnorm).powf(o.locality_exponent));
                if -beta + dot(d, &gy) >= -o.eps_r * w {
                    self.history.last_mut().unwrap().kind = StepKind::Null;
                    return LineSearch::Null { t, g: gy, beta };
                }
                last = Some((t, gy, beta));
            }
            tries += 1;
            if tries >= o.max_backtracks && last.is_some() {
                break;
            }
            let next = 0.5 * t;
            if next < o.t_min {
                break;
            }
            t = next;
        }
        match last {
            Some((t, g, beta)) => {
                self.history.last_mut().unwrap().kind = StepKind::Null;
                LineSearch::Null { t, g, beta }
            }
            None => LineSearch::Failed,
        }
    }
}

/// Minimizes a convex function given by `oracle(x) -> (f(x), ∂f(x))`.
pub fn minimize(
    x0: &[f64],
    opts: &LmbmOptions,
    oracle: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<LmbmResult> {
    let n = x0.len();
    let scale = if opts.scale.is_empty() {
        vec![1.0; n]
    } else if opts.scale.len() == n && opts.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
        opts.scale.clone()
    } else {
        return Err(Error::Mismatch("scale must be positive with one entry per variable".into()));
    };
    let mut run = Runner {
        oracle,
        opts,
        scale,
        evals: 0,
        history: Vec::new(),
        best: f64::INFINITY,
        best_x: x0.to_vec(),
        bound_hit: false,
        failures: 0,
    };
    let mut x: Vec<f64> = x0.iter().zip(&run.scale).map(|(a, s)| a / s).collect();
    run.clamp(&mut x);
    let (mut fx, g0) = run.eval(&x, 0, StepKind::Initial, f64::NAN, 0.0);
    let Some(mut gx) = g0 else {
        return Err(Error::Oracle("oracle failed at the initial point".into()));
    };
    let mut metric = Metric::new(opts.memory);
    let mut agg = gx.clone();
    let mut agg_beta = 0.0;
    let mut iteration = 0;
    let mut t_prev: f64 = 0.5;
    let termination = loop {
        iteration += 1;
        let d = search_direction(&mut metric, &agg);
        let w = -dot(&agg, &d) + 2.0 * agg_beta;
        if w <= opts.epsilon || n == 0 {
            break Termination::Converged;
        }
        if run.evals >= opts.max_evals {
            break Termination::EvalLimit;
        }
        let dnorm = dot(&d, &d).sqrt();
        let mut t0 = if metric.is_empty() { opts.initial_step / dnorm } else { (2.0 * t_prev).min(1.0) };
        t0 = t0.min(opts.max_step / dnorm);
        match run.line_search(&x, fx, &d, w, t0, iteration) {
            LineSearch::Serious { t, y, f, g } => {
                t_prev = t;
                let s: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                let u: Vec<f64> = g.iter().zip(&gx).map(|(a, b)| a - b).collect();
                metric.update(s, u);
                x = y;
                fx = f;
                gx = g;
                agg = gx.clone();
                agg_beta = 0.0;
            }
            LineSearch::Null { g, beta, .. } => {
                let (a, b, _) = aggregate(&metric, &gx, &g, beta, &agg, agg_beta);
                agg = a;
                agg_beta = b;
            }
            LineSearch::Failed => {
                break if run.evals >= opts.max_evals {
                    Termination::EvalLimit
                } else {
                    Termination::Stalled
                };
            }
        }
    };
    if run.failures == run.evals {
        return Err(Error::Oracle("every oracle call failed".into()));
    }
    Ok(LmbmResult {
        x: run.best_x,
        value: run.best,
        evals: run.evals,
        iterations: iteration,
        termination,
        history: run.history,
        bound_hit: run.bound_hit,
    })
}

/// History CSV; `sign` flips the value columns (use -1 when reporting θ̃
/// of a maximized dual).
pub fn write_history_csv(history: &[HistoryRow], sign: f64, value_name: &str, path: &Path) -> Result<()> {
    let dim = history.first().map_or(0, |h| h.x.len());
    let mut out = String::from("# one row per oracle call; values in USD, multipliers in USD/m3\n");
    out.push_str(&format!("eval,iteration,kind,{value_name},best,w,step"));
    for k in 0..dim {
        out.push_str(&format!(",x{k}"));
    }
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            h.eval,
            h.iteration,
            h.kind.name(),
            sign * h.value,
            sign * h.best,
            h.w,
            h.step
        ));
        for v in &h.x {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
