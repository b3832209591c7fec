//! Dense bounded-variable primal simplex.
//!
//! Rows become equalities `A x + s = b` with sign-restricted slacks. Phase 1
//! adds one artificial per row whose slack cannot absorb the starting
//! residual and minimizes their sum; phase 2 then optimizes the real
//! objective with artificials fixed at zero. The basis inverse is kept
//! explicitly and refactored from scratch at a fixed cadence.

use super::{LinearProgram, LpResult, LpStatus, Relation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_iterations: usize,
    /// Primal feasibility tolerance.
    pub feasibility_tol: f64,
    /// Objective accuracy promised on reference fixtures.
    pub optimality_tol: f64,
    /// Reduced-cost threshold for pricing.
    pub reduced_cost_tol: f64,
    /// Smallest pivot magnitude accepted in the ratio test.
    pub pivot_tol: f64,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub bland_after: usize,
    pub refactor_every: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            feasibility_tol: 1e-7,
            optimality_tol: 1e-6,
            reduced_cost_tol: 1e-9,
            pivot_tol: 1e-9,
            bland_after: 50,
            refactor_every: 50,
        }
    }
}

pub fn solve_lp(lp: &LinearProgram) -> LpResult {
    solve_lp_with(lp, &SimplexOptions::default())
}

pub fn solve_lp_with(lp: &LinearProgram, opts: &SimplexOptions) -> LpResult {
    if lp.variables.iter().any(|v| !(v.lo <= v.hi)) {
        return LpResult {
            status: LpStatus::Infeasible,
            objective: None,
            primal: Vec::new(),
            infeasibility: f64::INFINITY,
            iterations: 0,
        };
    }
    let mut tab = Tableau::new(lp, opts);
    tab.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum At {
    Basic,
    Lower,
    Upper,
    /// Free nonbasic variable parked at zero.
    Zero,
}

struct Tableau<'a> {
    lp: &'a LinearProgram,
    opts: SimplexOptions,
    m: usize,
    n: usize,
    /// Sparse columns: structurals, then slacks, then artificials.
    cols: Vec<Vec<(usize, f64)>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    b: Vec<f64>,
    x: Vec<f64>,
    at: Vec<At>,
    basis: Vec<usize>,
    /// Row-major `m x m` basis inverse.
    binv: Vec<f64>,
    iterations: usize,
    pivots_since_refactor: usize,
    degenerate_streak: usize,
}

enum Step {
    Optimal,
    Unbounded,
    Moved,
}

impl<'a> Tableau<'a> {
    fn new(lp: &'a LinearProgram, opts: &SimplexOptions) -> Self {
        let m = lp.constraints.len();
        let n = lp.variables.len();
        let total = n + 2 * m;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
        for (r, c) in lp.constraints.iter().enumerate() {
            // Merge duplicate entries so each column holds one coefficient per row.
            let mut row: Vec<(usize, f64)> = c.coeffs.clone();
            row.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (j, a) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += a,
                    _ => merged.push((j, a)),
                }
            }
            for (j, a) in merged {
                if a != 0.0 {
                    cols[j].push((r, a));
                }
            }
            cols[n + r].push((r, 1.0));
        }
        let mut lo = Vec::with_capacity(total);
        let mut hi = Vec::with_capacity(total);
        for v in &lp.variables {
            lo.push(v.lo);
            hi.push(v.hi);
        }
        for c in &lp.constraints {
            let (l, h) = match c.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo.push(l);
            hi.push(h);
        }
        lo.extend(std::iter::repeat_n(0.0, m));
        hi.extend(std::iter::repeat_n(0.0, m));
        let b = lp.constraints.iter().map(|c| c.rhs).collect();
        Self {
            lp,
            opts: *opts,
            m,
            n,
            cols,
            lo,
            hi,
            b,
            x: vec![0.0; total],
            at: vec![At::Lower; total],
            basis: Vec::with_capacity(m),
            binv: vec![0.0; m * m],
            iterations: 0,
            pivots_since_refactor: 0,
            degenerate_streak: 0,
        }
    }

    fn total(&self) -> usize {
        self.n + 2 * self.m
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= self.n + self.m
    }

    fn park_nonbasic(&mut self, j: usize) {
        let (l, h) = (self.lo[j], self.hi[j]);
        let (at, v) = if l.is_finite() {
            (At::Lower, l)
        } else if h.is_finite() {
            (At::Upper, h)
        } else {
            (At::Zero, 0.0)
        };
        self.at[j] = at;
        self.x[j] = v;
    }

    /// Starting basis: slacks where they absorb the residual, artificials elsewhere.
    /// Returns true when at least one artificial is basic.
    fn initialize(&mut self) -> bool {
        let (n, m) = (self.n, self.m);
        for j in 0..n + m {
            self.park_nonbasic(j);
        }
        let mut resid = self.b.clone();
        for j in 0..n {
            let v = self.x[j];
            if v != 0.0 {
                for &(r, a) in &self.cols[j] {
                    resid[r] -= a * v;
                }
            }
        }
        let mut needs_phase1 = false;
        for (r, &res) in resid.iter().enumerate() {
            let slack = n + r;
            let art = n + m + r;
            if res >= self.lo[slack] && res <= self.hi[slack] {
                self.basis.push(slack);
                self.at[slack] = At::Basic;
                self.x[slack] = res;
                self.binv[r * m + r] = 1.0;
                self.at[art] = At::Lower;
                self.x[art] = 0.0;
            } else {
                // Slack stays parked at its bound 0.
                let sign = if res >= 0.0 { 1.0 } else { -1.0 };
                self.cols[art].push((r, sign));
                self.hi[art] = f64::INFINITY;
                self.basis.push(art);
                self.at[art] = At::Basic;
                self.x[art] = res.abs();
                self.binv[r * m + r] = sign;
                needs_phase1 = true;
            }
        }
        needs_phase1
    }

    fn run(&mut self) -> LpResult {
        let needs_phase1 = self.initialize();
        if needs_phase1 {
            let cost: Vec<f64> = (0..self.total())
                .map(|j| if self.is_artificial(j) { 1.0 } else { 0.0 })
                .collect();
            match self.optimize(&cost) {
                Some(Step::Unbounded) => unreachable!("phase 1 is bounded below"),
                Some(_) => {}
                None => return self.finish(LpStatus::IterationLimit, false),
            }
            let infeas: f64 = (self.n + self.m..self.total()).map(|j| self.x[j]).sum();
            let scale = 1.0 + self.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if infeas > self.opts.feasibility_tol * scale {
                let mut res = self.finish(LpStatus::Infeasible, false);
                res.infeasibility = infeas;
                return res;
            }
            for j in self.n + self.m..self.total() {
                self.hi[j] = 0.0;
                if self.at[j] != At::Basic {
                    self.at[j] = At::Lower;
                    self.x[j] = 0.0;
                }
            }
            self.drive_out_artificials();
        }

        let sign = self.lp.objective.sense.sign();
        let mut cost = vec![0.0; self.total()];
        for &(j, c) in &self.lp.objective.coeffs {
            cost[j] += sign * c;
        }
        self.degenerate_streak = 0;
        match self.optimize(&cost) {
            Some(Step::Unbounded) => self.finish(LpStatus::Unbounded, true),
            Some(_) => self.finish(LpStatus::Optimal, true),
            None => self.finish(LpStatus::IterationLimit, true),
        }
    }

    fn finish(&mut self, status: LpStatus, feasible: bool) -> LpResult {
        self.refactor();
        self.recompute_basics();
        let primal: Vec<f64> = if feasible {
            (0..self.n)
                .map(|j| self.x[j].clamp(self.lo[j], self.hi[j]))
                .collect()
        } else {
            Vec::new()
        };
        let objective = feasible.then(|| self.lp.objective.value(&primal));
        LpResult {
            status,
            objective,
            primal,
            infeasibility: 0.0,
            iterations: self.iterations,
        }
    }

    /// Runs simplex iterations; `None` when the iteration budget runs out.
    fn optimize(&mut self, cost: &[f64]) -> Option<Step> {
        loop {
            if self.iterations >= self.opts.max_iterations {
                return None;
            }
            match self.iterate(cost) {
                Step::Moved => self.iterations += 1,
                done => return Some(done),
            }
        }
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (r, &bv) in self.basis.iter().enumerate() {
            let c = cost[bv];
            if c != 0.0 {
                let row = &self.binv[r * m..(r + 1) * m];
                for (yi, bi) in y.iter_mut().zip(row) {
                    *yi += c * bi;
                }
            }
        }
        y
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        for &(r, a) in &self.cols[j] {
            for (i, al) in alpha.iter_mut().enumerate() {
                *al += self.binv[i * m + r] * a;
            }
        }
        alpha
    }

    fn iterate(&mut self, cost: &[f64]) -> Step {
        let bland = self.degenerate_streak >= self.opts.bland_after;
        let y = self.duals(cost);
        let tol = self.opts.reduced_cost_tol;

        // Pricing.
        let mut entering: Option<(usize, f64, f64)> = None; // (j, direction, |d|)
        for j in 0..self.total() {
            if self.at[j] == At::Basic || self.lo[j] == self.hi[j] {
                continue;
            }
            let d = cost[j] - self.cols[j].iter().map(|&(r, a)| y[r] * a).sum::<f64>();
            let dir = match self.at[j] {
                At::Lower if d < -tol => 1.0,
                At::Upper if d > tol => -1.0,
                At::Zero if d < -tol => 1.0,
                At::Zero if d > tol => -1.0,
                _ => continue,
            };
            if bland {
                entering = Some((j, dir, d.abs()));
                break;
            }
            if entering.is_none_or(|(_, _, best)| d.abs() > best) {
                entering = Some((j, dir, d.abs()));
            }
        }
        let Some((q, dir, _)) = entering else {
            return Step::Optimal;
        };

        // Ratio test.
        let alpha = self.ftran(q);
        let mut theta = f64::INFINITY;
        let mut leave: Option<(usize, bool)> = None; // (row, leaves at upper)
        let mut leave_alpha = 0.0;
        for (r, &a) in alpha.iter().enumerate() {
            if a.abs() <= self.opts.pivot_tol {
                continue;
            }
            let bv = self.basis[r];
            let rate = -dir * a;
            let (limit, to_upper) = if rate < 0.0 {
                if !self.lo[bv].is_finite() {
                    continue;
                }
                (((self.x[bv] - self.lo[bv]) / -rate).max(0.0), false)
            } else {
                if !self.hi[bv].is_finite() {
                    continue;
                }
                (((self.hi[bv] - self.x[bv]) / rate).max(0.0), true)
            };
            let better = match leave {
                None => true,
                Some((lr, _)) => {
                    if limit < theta - 1e-12 {
                        true
                    } else if limit <= theta + 1e-12 {
                        if bland {
                            bv < self.basis[lr]
                        } else {
                            a.abs() > leave_alpha
                        }
                    } else {
                        false
                    }
                }
            };
            if better {
                theta = if leave.is_none() { limit } else { theta.min(limit) };
                leave = Some((r, to_upper));
                leave_alpha = a.abs();
            }
        }

        let flip = self.hi[q] - self.lo[q];
        if flip.is_finite() && flip <= theta {
            // Bound flip: the entering variable crosses its own range.
            self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
            self.at[q] = if dir > 0.0 { At::Upper } else { At::Lower };
            self.recompute_basics();
            self.note_progress(flip);
            return Step::Moved;
        }
        let Some((r, to_upper)) = leave else {
            return Step::Unbounded;
        };

        let old = self.basis[r];
        self.x[q] += dir * theta;
        self.at[q] = At::Basic;
        self.x[old] = if to_upper { self.hi[old] } else { self.lo[old] };
        self.at[old] = if to_upper { At::Upper } else { At::Lower };
        self.basis[r] = q;
        self.pivot_inverse(r, &alpha);
        self.pivots_since_refactor += 1;
        if self.pivots_since_refactor >= self.opts.refactor_every {
            self.refactor();
        }
        self.recompute_basics();
        self.note_progress(theta);
        Step::Moved
    }

    fn note_progress(&mut self, step: f64) {
        if step <= 1e-12 {
            self.degenerate_streak += 1;
        } else {
            self.degenerate_streak = 0;
        }
    }

    fn pivot_inverse(&mut self, r: usize, alpha: &[f64]) {
        let m = self.m;
        let p = alpha[r];
        for v in &mut self.binv[r * m..(r + 1) * m] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
        for (i, &a) in alpha.iter().enumerate() {
            if i != r && a != 0.0 {
                let row = &mut self.binv[i * m..(i + 1) * m];
                for (v, pr) in row.iter_mut().zip(&pivot_row) {
                    *v -= a * pr;
                }
            }
        }
    }

    /// Rebuilds the basis inverse by Gauss-Jordan elimination with partial pivoting.
    fn refactor(&mut self) {
        let m = self.m;
        if m == 0 {
            return;
        }
        self.pivots_since_refactor = 0;
        let mut a = vec![0.0; m * m];
        for (c, &bv) in self.basis.iter().enumerate() {
            for &(r, v) in &self.cols[bv] {
                a[r * m + c] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&i, &k| a[i * m + col].abs().total_cmp(&a[k * m + col].abs()))
                .expect("non-empty");
            if a[piv * m + col].abs() < 1e-14 {
                // Numerically singular; keep the product-form inverse.
                return;
            }
            if piv != col {
                for k in 0..m {
                    a.swap(piv * m + k, col * m + k);
                    inv.swap(piv * m + k, col * m + k);
                }
            }
            let p = a[col * m + col];
            for k in 0..m {
                a[col * m + k] /= p;
                inv[col * m + k] /= p;
            }
            for i in 0..m {
                if i != col {
                    let f = a[i * m + col];
                    if f != 0.0 {
                        for k in 0..m {
                            a[i * m + k] -= f * a[col * m + k];
                            inv[i * m + k] -= f * inv[col * m + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
    }

    /// `x_B = B^-1 (b - N x_N)`.
    fn recompute_basics(&mut self) {
        let m = self.m;
        let mut rhs = self.b.clone();
        for j in 0..self.total() {
            if self.at[j] != At::Basic && self.x[j] != 0.0 {
                for &(r, a) in &self.cols[j] {
                    rhs[r] -= a * self.x[j];
                }
            }
        }
        for (i, &bv) in self.basis.iter().enumerate() {
            let row = &self.binv[i * m..(i + 1) * m];
            self.x[bv] = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        }
    }

    /// Pivots zero-valued basic artificials out where a replacement column exists.
    fn drive_out_artificials(&mut self) {
        for r in 0..self.m {
            let bv = self.basis[r];
            if !self.is_artificial(bv) {
                continue;
            }
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for j in 0..self.n + self.m {
                if self.at[j] == At::Basic {
                    continue;
                }
                let alpha = self.ftran(j);
                let a = alpha[r].abs();
                if a > 1e-7 && best.as_ref().is_none_or(|(_, b, _)| a > *b) {
                    best = Some((j, a, alpha));
                }
            }
            if let Some((j, _, alpha)) = best {
                self.at[j] = At::Basic;
                self.at[bv] = At::Lower;
                self.x[bv] = 0.0;
                self.basis[r] = j;
                self.pivot_inverse(r, &alpha);
            }
        }
        self.refactor();
        self.recompute_basics();
    }
}
