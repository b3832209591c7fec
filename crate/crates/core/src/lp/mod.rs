//! Linear programs and the bounded-variable simplex solver behind every relaxation.

mod simplex;

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub use simplex::{solve_lp, solve_lp_with, SimplexOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// +1 for minimization, -1 for maximization.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let act = self.activity(x);
        match self.relation {
            Relation::Le => (act - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - act).max(0.0),
            Relation::Eq => (act - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub sense: Sense,
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Objective {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(j, c)| c * x[j]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub objective: Objective,
}

impl Default for LinearProgram {
    fn default() -> Self {
        Self::new(Sense::Minimize)
    }
}

impl LinearProgram {
    pub fn new(sense: Sense) -> Self {
        Self {
            variables: Vec::new(),
            constraints: Vec::new(),
            objective: Objective {
                sense,
                coeffs: Vec::new(),
                constant: 0.0,
            },
        }
    }

    pub fn add_variable(&mut self, name: impl Into<String>, lo: f64, hi: f64) -> usize {
        self.variables.push(Variable {
            name: name.into(),
            lo,
            hi,
        });
        self.variables.len() - 1
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn set_objective(&mut self, sense: Sense, coeffs: Vec<(usize, f64)>, constant: f64) {
        self.objective = Objective {
            sense,
            coeffs,
            constant,
        };
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    /// Checks the structural invariants: ordered finite-or-infinite bounds,
    /// finite coefficients, declared variables only.
    pub fn validate(&self) -> Result<()> {
        let n = self.variables.len();
        for (j, v) in self.variables.iter().enumerate() {
            if v.lo.is_nan() || v.hi.is_nan() || v.lo > v.hi {
                return Err(Error::ValueOutOfBounds {
                    var: j,
                    value: v.lo,
                    lo: v.lo,
                    hi: v.hi,
                });
            }
        }
        let rows = self
            .constraints
            .iter()
            .map(|c| (&c.coeffs, c.rhs))
            .chain(std::iter::once((&self.objective.coeffs, self.objective.constant)));
        for (coeffs, rhs) in rows {
            if !rhs.is_finite() || coeffs.iter().any(|&(j, a)| j >= n || !a.is_finite()) {
                return Err(Error::Schema("LP row has an undeclared variable or non-finite entry".into()));
            }
        }
        Ok(())
    }

    /// Derived LP with `var` fixed to `value`; `self` is untouched.
    pub fn fix_variable(&self, var: usize, value: f64) -> Result<LinearProgram> {
        let mut out = self.clone();
        out.fix_in_place(var, value)?;
        Ok(out)
    }

    pub(crate) fn fix_in_place(&mut self, var: usize, value: f64) -> Result<()> {
        let v = self.variables.get(var).ok_or(Error::ValueOutOfBounds {
            var,
            value,
            lo: f64::NAN,
            hi: f64::NAN,
        })?;
        if !(value >= v.lo && value <= v.hi) {
            return Err(Error::ValueOutOfBounds {
                var,
                value,
                lo: v.lo,
                hi: v.hi,
            });
        }
        self.variables[var].lo = value;
        self.variables[var].hi = value;
        Ok(())
    }

    /// Derived LP with extra rows appended.
    pub fn add_rows(&self, rows: impl IntoIterator<Item = Constraint>) -> LinearProgram {
        let mut out = self.clone();
        out.constraints.extend(rows);
        out
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self
            .variables
            .iter()
            .zip(x)
            .map(|(v, &xi)| (v.lo - xi).max(xi - v.hi).max(0.0));
        let rows = self.constraints.iter().map(|c| c.violation(x));
        bounds.chain(rows).fold(0.0, f64::max)
    }

    /// Human-readable dump for debugging. Not an exchange format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let term_list = |coeffs: &[(usize, f64)]| -> String {
            if coeffs.is_empty() {
                return "0".into();
            }
            coeffs
                .iter()
                .map(|&(j, a)| format!("{a:+} {}", self.variables[j].name))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let sense = match self.objective.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        let _ = writeln!(out, "{sense}");
        let _ = writeln!(
            out,
            "  obj: {} {:+}",
            term_list(&self.objective.coeffs),
            self.objective.constant
        );
        let _ = writeln!(out, "subject to");
        for (r, c) in self.constraints.iter().enumerate() {
            let rel = match c.relation {
                Relation::Le => "<=",
                Relation::Eq => "=",
                Relation::Ge => ">=",
            };
            let _ = writeln!(out, "  c{r}: {} {rel} {}", term_list(&c.coeffs), c.rhs);
        }
        let _ = writeln!(out, "bounds");
        for v in &self.variables {
            let _ = writeln!(out, "  {} <= {} <= {}", v.lo, v.name, v.hi);
        }
        let _ = writeln!(out, "end");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    pub status: LpStatus,
    /// Objective at `primal`, in the LP's own sense. `None` without a feasible point.
    pub objective: Option<f64>,
    /// Structural variable values; empty when no feasible point is known.
    pub primal: Vec<f64>,
    /// Phase-1 residual (sum of artificial values) when the LP is infeasible.
    pub infeasibility: f64,
    pub iterations: usize,
}
