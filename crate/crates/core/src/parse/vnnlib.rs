//! A linear subset of VNN-LIB.
//!
//! ```text
//! file     = { command } ;
//! command  = "(" "declare-const" var "Real" ")"
//!          | "(" "assert" formula ")" ;
//! formula  = atom
//!          | "(" "and" formula { formula } ")"
//!          | "(" "or" formula { formula } ")" ;
//! atom     = "(" rel expr expr ")" ;
//! rel      = "<=" | ">=" | "<" | ">" ;
//! expr     = number | var
//!          | "(" "+" expr { expr } ")"
//!          | "(" "-" expr { expr } ")"
//!          | "(" "*" expr { expr } ")" ;          (at most one non-constant factor)
//! var      = "X_" digits | "Y_" digits ;
//! comment  = ";" { any character except newline } ;
//! ```
//!
//! Strict and non-strict comparisons are read the same way. Assertions
//! over inputs only must be single-variable bounds and fold into the input
//! box; assertions over outputs form the violation condition, a disjunction
//! of conjunctions of linear atoms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::interval::Interval;

/// Limit on the number of clauses produced by distributing top-level assertions over disjunctions.
const MAX_CLAUSES: usize = 100_000;

/// `coeffs . y <= rhs`. The slack `coeffs . y - rhs` is negative exactly when the atom holds strictly.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl Atom {
    pub fn slack(&self, y: &[f64]) -> f64 {
        self.coeffs.iter().zip(y).map(|(a, v)| a * v).sum::<f64>() - self.rhs
    }

    pub fn holds(&self, y: &[f64]) -> bool {
        self.slack(y) <= 0.0
    }
}

/// Conjunction of atoms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clause {
    pub atoms: Vec<Atom>,
}

impl Clause {
    pub fn holds(&self, y: &[f64]) -> bool {
        self.atoms.iter().all(|a| a.holds(y))
    }

    /// Largest atom slack; `<= 0` exactly when the clause holds.
    pub fn max_slack(&self, y: &[f64]) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.slack(y))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertySpec {
    pub input_box: Vec<Interval>,
    pub output_dim: usize,
    /// The property is violated where any clause holds.
    pub clauses: Vec<Clause>,
}

impl PropertySpec {
    /// `f` for a single-atom clause: the property holds on the clause iff `f >= 0` everywhere.
    pub fn objective(&self, clause: usize) -> Option<&Atom> {
        match self.clauses.get(clause)?.atoms.as_slice() {
            [atom] => Some(atom),
            _ => None,
        }
    }

    pub fn is_violated_by(&self, y: &[f64]) -> bool {
        self.clauses.iter().any(|c| c.holds(y))
    }

    pub fn min_max_slack(&self, y: &[f64]) -> f64 {
        self.clauses
            .iter()
            .map(|c| c.max_slack(y))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Sym(&'a str),
}

#[derive(Debug, Clone)]
enum Sexp<'a> {
    Sym(&'a str, usize),
    List(Vec<Sexp<'a>>, usize),
}

impl Sexp<'_> {
    fn offset(&self) -> usize {
        match self {
            Sexp::Sym(_, o) | Sexp::List(_, o) => *o,
        }
    }
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        offset,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Vec<(Tok<'_>, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b';' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' => {
                out.push((Tok::Open, i));
                i += 1;
            }
            b')' => {
                out.push((Tok::Close, i));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && !matches!(bytes[i], b'(' | b')' | b';')
                {
                    i += 1;
                }
                out.push((Tok::Sym(&text[start..i]), start));
            }
        }
    }
    out
}

fn read_sexps(text: &str) -> Result<Vec<Sexp<'_>>> {
    let mut stack: Vec<(Vec<Sexp<'_>>, usize)> = vec![(Vec::new(), 0)];
    for (tok, off) in tokenize(text) {
        match tok {
            Tok::Open => stack.push((Vec::new(), off)),
            Tok::Close => {
                if stack.len() == 1 {
                    return Err(syntax(off, "unbalanced ')'"));
                }
                let (items, start) = stack.pop().expect("non-empty");
                stack.last_mut().expect("root").0.push(Sexp::List(items, start));
            }
            Tok::Sym(s) => stack.last_mut().expect("root").0.push(Sexp::Sym(s, off)),
        }
    }
    if stack.len() > 1 {
        let (_, start) = stack.pop().expect("open list");
        return Err(syntax(start, "unclosed '('"));
    }
    Ok(stack.pop().expect("root").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Var {
    X(usize),
    Y(usize),
}

fn parse_var(name: &str) -> Option<Var> {
    let (kind, idx) = name.split_at_checked(2)?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let idx = idx.parse().ok()?;
    match kind {
        "X_" => Some(Var::X(idx)),
        "Y_" => Some(Var::Y(idx)),
        _ => None,
    }
}

/// Affine expression `sum coef * var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
struct Affine {
    terms: BTreeMap<Var, f64>,
    constant: f64,
}

impl Affine {
    fn constant(c: f64) -> Self {
        Self {
            terms: BTreeMap::new(),
            constant: c,
        }
    }

    fn var(v: Var) -> Self {
        Self {
            terms: BTreeMap::from([(v, 1.0)]),
            constant: 0.0,
        }
    }

    fn add(mut self, other: &Affine, scale: f64) -> Self {
        for (&v, &c) in &other.terms {
            *self.terms.entry(v).or_insert(0.0) += scale * c;
        }
        self.constant += scale * other.constant;
        self
    }

    fn scale(mut self, s: f64) -> Self {
        for c in self.terms.values_mut() {
            *c *= s;
        }
        self.constant *= s;
        self
    }

    fn is_constant(&self) -> bool {
        self.terms.values().all(|&c| c == 0.0)
    }

    fn prune(mut self) -> Self {
        self.terms.retain(|_, c| *c != 0.0);
        self
    }
}

/// `expr <= 0` in normalized form.
#[derive(Debug, Clone, PartialEq)]
struct RawAtom {
    lhs: Affine,
    offset: usize,
}

/// Disjunction of conjunctions.
type Dnf = Vec<Vec<RawAtom>>;

struct Parser<'a> {
    text: &'a str,
    declared: BTreeMap<Var, usize>,
}

impl<'a> Parser<'a> {
    fn snippet(&self, e: &Sexp<'_>) -> String {
        let start = e.offset();
        let end = match e {
            Sexp::Sym(s, o) => o + s.len(),
            Sexp::List(..) => matching_close(self.text, start),
        };
        self.text[start..end].to_string()
    }

    fn expr(&self, e: &Sexp<'a>) -> Result<Affine> {
        match e {
            Sexp::Sym(s, off) => {
                if let Some(v) = parse_var(s) {
                    if !self.declared.contains_key(&v) {
                        return Err(Error::Schema(format!("variable {s} used before declaration")));
                    }
                    return Ok(Affine::var(v));
                }
                match s.parse::<f64>() {
                    Ok(c) if c.is_finite() => Ok(Affine::constant(c)),
                    _ => Err(syntax(*off, format!("expected a number or variable, found {s:?}"))),
                }
            }
            Sexp::List(items, off) => {
                let (op, args) = match items.split_first() {
                    Some((Sexp::Sym(op, _), args)) if !args.is_empty() => (*op, args),
                    _ => return Err(syntax(*off, "expected (op expr ...)")),
                };
                let args = args.iter().map(|a| self.expr(a)).collect::<Result<Vec<_>>>()?;
                match op {
                    "+" => Ok(args.iter().fold(Affine::default(), |acc, a| acc.add(a, 1.0))),
                    "-" if args.len() == 1 => Ok(args[0].clone().scale(-1.0)),
                    "-" => Ok(args[1..].iter().fold(args[0].clone(), |acc, a| acc.add(a, -1.0))),
                    "*" => {
                        let mut factor = 1.0;
                        let mut var_part: Option<Affine> = None;
                        for a in args {
                            if a.is_constant() {
                                factor *= a.constant;
                            } else if var_part.is_some() {
                                return Err(Error::NonlinearTerm(self.snippet(e)));
                            } else {
                                var_part = Some(a);
                            }
                        }
                        Ok(match var_part {
                            Some(v) => v.scale(factor),
                            None => Affine::constant(factor),
                        })
                    }
                    other => Err(syntax(*off, format!("unsupported operator {other:?}"))),
                }
            }
        }
    }

    fn formula(&self, e: &Sexp<'a>) -> Result<Dnf> {
        let Sexp::List(items, off) = e else {
            return Err(syntax(e.offset(), "expected a formula"));
        };
        let (head, args) = match items.split_first() {
            Some((Sexp::Sym(h, _), args)) if !args.is_empty() => (*h, args),
            _ => return Err(syntax(*off, "expected (op ...)")),
        };
        match head {
            "and" => {
                let mut acc: Dnf = vec![Vec::new()];
                for a in args {
                    acc = conjoin(acc, self.formula(a)?, *off)?;
                }
                Ok(acc)
            }
            "or" => {
                let mut acc = Dnf::new();
                for a in args {
                    acc.extend(self.formula(a)?);
                }
                Ok(acc)
            }
            "<=" | ">=" | "<" | ">" => {
                let [l, r] = args else {
                    return Err(syntax(*off, format!("{head} takes two arguments")));
                };
                let (l, r) = (self.expr(l)?, self.expr(r)?);
                let lhs = match head {
                    "<=" | "<" => l.add(&r, -1.0),
                    _ => r.add(&l, -1.0),
                }
                .prune();
                let has_x = lhs.terms.keys().any(|v| matches!(v, Var::X(_)));
                let has_y = lhs.terms.keys().any(|v| matches!(v, Var::Y(_)));
                if has_x && has_y {
                    return Err(Error::MixedVariableAtom(self.snippet(e)));
                }
                Ok(vec![vec![RawAtom { lhs, offset: *off }]])
            }
            other => Err(syntax(*off, format!("unsupported connective {other:?}"))),
        }
    }
}

fn matching_close(text: &str, open: usize) -> usize {
    let mut depth = 0usize;
    for (i, b) in text.bytes().enumerate().skip(open) {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
    }
    text.len()
}

fn conjoin(a: Dnf, b: Dnf, offset: usize) -> Result<Dnf> {
    if a.len().saturating_mul(b.len()) > MAX_CLAUSES {
        return Err(syntax(offset, format!("more than {MAX_CLAUSES} clauses after distribution")));
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for ca in &a {
        for cb in &b {
            out.push(ca.iter().chain(cb).cloned().collect());
        }
    }
    Ok(out)
}

fn is_input_atom(a: &RawAtom) -> bool {
    a.lhs.terms.keys().all(|v| matches!(v, Var::X(_))) && !a.lhs.terms.is_empty()
}

fn is_output_atom(a: &RawAtom) -> bool {
    a.lhs.terms.keys().any(|v| matches!(v, Var::Y(_)))
}

/// Parses a property. Returns a box with `lo > hi` for contradictory input bounds.
pub fn parse_vnnlib(text: &str) -> Result<PropertySpec> {
    let mut parser = Parser {
        text,
        declared: BTreeMap::new(),
    };
    let mut asserts = Vec::new();
    for cmd in read_sexps(text)? {
        let Sexp::List(items, off) = &cmd else {
            return Err(syntax(cmd.offset(), "expected a command"));
        };
        match items.as_slice() {
            [Sexp::Sym("declare-const", _), Sexp::Sym(name, noff), Sexp::Sym(ty, toff)] => {
                let v = parse_var(name).ok_or_else(|| syntax(*noff, format!("variable name {name:?} is not X_i or Y_j")))?;
                if *ty != "Real" {
                    return Err(syntax(*toff, format!("unsupported sort {ty:?}")));
                }
                if parser.declared.insert(v, *off).is_some() {
                    return Err(syntax(*noff, format!("{name} declared twice")));
                }
            }
            [Sexp::Sym("assert", _), f] => asserts.push(f.clone()),
            _ => return Err(syntax(*off, "expected (declare-const ...) or (assert ...)")),
        }
    }

    let count = |is_x: bool| -> Result<usize> {
        let idx: Vec<usize> = parser
            .declared
            .keys()
            .filter_map(|v| match (v, is_x) {
                (Var::X(i), true) | (Var::Y(i), false) => Some(*i),
                _ => None,
            })
            .collect();
        if idx.iter().enumerate().any(|(k, &i)| k != i) {
            let prefix = if is_x { "X" } else { "Y" };
            return Err(Error::Schema(format!("{prefix} variables must be declared as {prefix}_0..{prefix}_n without gaps")));
        }
        Ok(idx.len())
    };
    let n_in = count(true)?;
    let n_out = count(false)?;
    if n_in == 0 {
        return Err(Error::Schema("no input variables declared".into()));
    }
    if n_out == 0 {
        return Err(Error::Schema("no output variables declared".into()));
    }

    let mut lo = vec![f64::NEG_INFINITY; n_in];
    let mut hi = vec![f64::INFINITY; n_in];
    let mut empty_box = false;
    let mut violation: Option<Dnf> = None;
    for f in &asserts {
        let dnf = parser.formula(f)?;
        // A top-level conjunction of input bounds folds into the box.
        if let [conj] = dnf.as_slice() {
            if conj.iter().all(|a| !is_output_atom(a)) {
                for a in conj {
                    if a.lhs.is_constant() {
                        empty_box |= a.lhs.constant > 0.0;
                        continue;
                    }
                    fold_bound(&parser, a, &mut lo, &mut hi)?;
                }
                continue;
            }
        }
        if dnf.iter().flatten().any(is_input_atom) {
            return Err(Error::Schema(format!(
                "input constraints must be top-level bounds (assertion at byte {})",
                f.offset()
            )));
        }
        violation = Some(match violation {
            None => dnf,
            Some(acc) => conjoin(acc, dnf, f.offset())?,
        });
    }
    let Some(violation) = violation else {
        return Err(Error::Schema("property has no assertion over output variables".into()));
    };

    for i in 0..n_in {
        if !lo[i].is_finite() || !hi[i].is_finite() {
            return Err(Error::UnboundedInputBox(i));
        }
    }
    if empty_box {
        // Keep the box bounded but empty so bound propagation reports it.
        hi[0] = lo[0] - 1.0;
    }
    let input_box = lo.into_iter().zip(hi).map(|(l, h)| Interval::new(l, h)).collect();

    let mut clauses = Vec::new();
    for conj in violation {
        let mut atoms = Vec::new();
        let mut dead = false;
        for a in conj {
            if a.lhs.is_constant() {
                dead |= a.lhs.constant > 0.0;
                continue;
            }
            let mut coeffs = vec![0.0; n_out];
            for (v, c) in &a.lhs.terms {
                if let Var::Y(j) = v {
                    coeffs[*j] = *c;
                }
            }
            atoms.push(Atom {
                coeffs,
                rhs: -a.lhs.constant,
            });
        }
        if !dead {
            clauses.push(Clause { atoms });
        }
    }
    Ok(PropertySpec {
        input_box,
        output_dim: n_out,
        clauses,
    })
}

fn fold_bound(parser: &Parser<'_>, a: &RawAtom, lo: &mut [f64], hi: &mut [f64]) -> Result<()> {
    let [(Var::X(i), c)] = a.lhs.terms.iter().map(|(v, c)| (*v, *c)).collect::<Vec<_>>()[..] else {
        let end = matching_close(parser.text, a.offset);
        return Err(Error::Schema(format!(
            "input constraint {} is not a single-variable bound",
            &parser.text[a.offset..end]
        )));
    };
    // c * x + k <= 0
    let bound = -a.lhs.constant / c;
    if c > 0.0 {
        hi[i] = hi[i].min(bound);
    } else {
        lo[i] = lo[i].max(bound);
    }
    Ok(())
}
