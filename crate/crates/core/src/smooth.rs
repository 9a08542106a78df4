//! Per-step convex program of the smoothed path: diagonal quadratic plus
//! linear objective, box bounds, one power-balance equality and an outflow
//! window per dam.

use crate::error::{Error, Result};

/// Variables with exactly zero curvature get this much, so every response
/// is a continuous function of the multipliers. Among equal-cost options the
/// one nearest its reference value is chosen.
pub const MIN_CURVATURE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpVar {
    pub lo: f64,
    pub hi: f64,
    /// linear cost
    pub c: f64,
    /// curvature of `q·(x - r)²`
    pub q: f64,
    pub r: f64,
    /// contribution to the balance row per unit
    pub p: f64,
}

/// `lo <= a_t·x[t] + a_s·x[s] <= hi`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpBlock {
    pub t: usize,
    pub s: usize,
    pub a_t: f64,
    pub a_s: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepQp {
    pub vars: Vec<QpVar>,
    pub blocks: Vec<QpBlock>,
    pub demand: f64,
}

impl StepQp {
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.vars
            .iter()
            .zip(x)
            .map(|(v, &xi)| v.q * (xi - v.r).powi(2) + v.c * xi)
            .sum()
    }

    fn respond(v: &QpVar, shift: f64) -> f64 {
        let q = v.q.max(MIN_CURVATURE);
        (v.r - (v.c - shift) / (2.0 * q)).clamp(v.lo, v.hi)
    }

    fn block_response(&self, b: &QpBlock, mu: f64, out: &mut [f64]) {
        let vt = &self.vars[b.t];
        let vs = &self.vars[b.s];
        let at = |nu: f64| {
            let t = Self::respond(vt, mu * vt.p + nu * b.a_t);
            let s = Self::respond(vs, mu * vs.p + nu * b.a_s);
            (t, s, b.a_t * t + b.a_s * s)
        };
        let (t0, s0, h0) = at(0.0);
        let target = if h0 < b.lo {
            b.lo
        } else if h0 > b.hi {
            b.hi
        } else {
            out[b.t] = t0;
            out[b.s] = s0;
            return;
        };
        let dir = if h0 < target { 1.0 } else { -1.0 };
        let mut near = 0.0;
        let mut far = 1.0;
        for _ in 0..200 {
            let h = at(dir * far).2;
            if (h - target) * dir >= 0.0 {
                break;
            }
            near = far;
            far *= 4.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (near + far);
            if mid <= near || mid >= far {
                break;
            }
            if (at(dir * mid).2 - target) * dir >= 0.0 {
                far = mid;
            } else {
                near = mid;
            }
        }
        let (tn, sn, hn) = at(dir * near);
        let (tf, sf, hf) = at(dir * far);
        let w = if (hf - hn).abs() > 0.0 { ((target - hn) / (hf - hn)).clamp(0.0, 1.0) } else { 1.0 };
        out[b.t] = tn + w * (tf - tn);
        out[b.s] = sn + w * (sf - sn);
    }

    fn response(&self, mu: f64, in_block: &[bool], out: &mut [f64]) -> f64 {
        for (k, v) in self.vars.iter().enumerate() {
            if !in_block[k] {
                out[k] = Self::respond(v, mu * v.p);
            }
        }
        for b in &self.blocks {
            self.block_response(b, mu, out);
        }
        self.vars.iter().zip(out.iter()).map(|(v, x)| v.p * x).sum()
    }

    /// Minimizer by bisection on the balance multiplier.
    pub fn solve(&self, t_hours: f64) -> Result<Vec<f64>> {
        let n = self.vars.len();
        let mut in_block = vec![false; n];
        for b in &self.blocks {
            in_block[b.t] = true;
            in_block[b.s] = true;
        }
        let mut x_lo = vec![0.0; n];
        let mut x_hi = vec![0.0; n];
        let d = self.demand;
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut p_lo = self.response(lo, &in_block, &mut x_lo);
        let mut p_hi = self.response(hi, &in_block, &mut x_hi);
        let mut guard = 0;
        while p_lo > d && guard < 80 {
            hi = lo;
            p_hi = p_lo;
            x_hi.copy_from_slice(&x_lo);
            lo *= 2.0;
            p_lo = self.response(lo, &in_block, &mut x_lo);
            guard += 1;
        }
        guard = 0;
        while p_hi < d && guard < 80 {
            lo = hi;
            p_lo = p_hi;
            x_lo.copy_from_slice(&x_hi);
            hi *= 2.0;
            p_hi = self.response(hi, &in_block, &mut x_hi);
            guard += 1;
        }
        let scale = d.abs().max(1.0);
        if p_hi < d - 1e-9 * scale || p_lo > d + 1e-9 * scale {
            return Err(Error::Infeasible {
                t_hours,
                shortfall_kw: if p_hi < d { d - p_hi } else { d - p_lo },
                context: "smoothed step cannot meet demand".into(),
            });
        }
        let mut x_mid = vec![0.0; n];
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let p = self.response(mid, &in_block, &mut x_mid);
            if p < d {
                lo = mid;
                p_lo = p;
                x_lo.copy_from_slice(&x_mid);
            } else {
                hi = mid;
                p_hi = p;
                x_hi.copy_from_slice(&x_mid);
            }
            if p_hi - p_lo <= 1e-12 * scale {
                break;
            }
        }
        let w = if p_hi > p_lo { ((d - p_lo) / (p_hi - p_lo)).clamp(0.0, 1.0) } else { 1.0 };
        Ok(x_lo.iter().zip(&x_hi).map(|(a, b)| a + w * (b - a)).collect())
    }
}
