//! Big-M MILP encoding of ReLU windows and the branch-and-bound search over it.
//!
//! Each unstable ReLU with pre-activation bounds `l < 0 < u` contributes one
//! link group
//!
//! ```text
//! x >= 0,  x >= y,  x <= y - l (1 - z),  x <= u z,  z in {0, 1}
//! ```
//!
//! with its own `(l, u)` as the big-M constants. Stabilized ReLUs are
//! substituted away: active ones reuse the `y` variable, inactive ones
//! contribute the constant 0.

mod bnb;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Matrix, NetworkGraph, WindowSubGraph};
use crate::interval::{classify, BoundStore, Interval, NeuronState};
use crate::lp::{Constraint, LinearProgram, Relation, Sense};

pub use bnb::{branch_and_bound, BnbControls, BnbResult, BnbStatus};

/// Absolute tolerance used when checking heuristic points against the MILP rows.
const HEURISTIC_FEAS_TOL: f64 = 1e-7;

/// A linear function of pre-activation variables plus a constant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    /// `(gemm ordinal, neuron, coefficient)`.
    pub terms: Vec<(usize, usize, f64)>,
    pub constant: f64,
}

impl LinearForm {
    pub fn neuron(ordinal: usize, neuron: usize) -> Self {
        Self {
            terms: vec![(ordinal, neuron, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluBlock {
    pub ordinal: usize,
    pub neuron: usize,
    pub y_var: usize,
    pub x_var: usize,
    pub z_var: usize,
    pub lo: f64,
    pub hi: f64,
}

/// How a post-activation value enters the rows that consume it.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PostTerm {
    Var(usize),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
struct WindowLayer {
    ordinal: usize,
    weights: Matrix,
    bias: Vec<f64>,
    sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpProblem {
    pub lp: LinearProgram,
    pub blocks: Vec<ReluBlock>,
    pub window: WindowSubGraph,
    /// Entry ordinal -> variables of `x^(j)`, in `window.entries` order.
    entry_vars: Vec<(usize, Vec<usize>)>,
    /// Gemm ordinal -> `y` variables.
    pre_vars: BTreeMap<usize, Vec<usize>>,
    post_terms: BTreeMap<usize, Vec<PostTerm>>,
    layers: Vec<WindowLayer>,
}

impl MilpProblem {
    pub fn binaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().map(|b| b.z_var)
    }

    pub fn num_binaries(&self) -> usize {
        self.blocks.len()
    }

    /// Variable of `y^(ordinal)_neuron`, when the window contains that Gemm.
    pub fn pre_var(&self, ordinal: usize, neuron: usize) -> Option<usize> {
        self.pre_vars.get(&ordinal).and_then(|v| v.get(neuron).copied())
    }

    /// Variables of the entry vectors, concatenated in entry order.
    pub fn entry_var_list(&self) -> Vec<usize> {
        self.entry_vars.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    /// Replaces the objective. Terms must refer to Gemm layers inside the window.
    pub fn set_objective(&mut self, form: &LinearForm, sense: Sense) -> Result<()> {
        let coeffs = self.form_coeffs(form)?;
        self.lp.set_objective(sense, coeffs, form.constant);
        Ok(())
    }

    /// Adds `form (relation) 0` as a hard row.
    pub fn add_row(&mut self, form: &LinearForm, relation: Relation) -> Result<()> {
        let coeffs = self.form_coeffs(form)?;
        self.lp.constraints.push(Constraint {
            coeffs,
            relation,
            rhs: -form.constant,
        });
        Ok(())
    }

    fn form_coeffs(&self, form: &LinearForm) -> Result<Vec<(usize, f64)>> {
        form.terms
            .iter()
            .map(|&(ord, k, c)| {
                self.pre_var(ord, k).map(|v| (v, c)).ok_or_else(|| {
                    Error::Schema(format!("objective term y^({ord})_{k} lies outside the window"))
                })
            })
            .collect()
    }
}

fn finite(iv: Interval, what: impl FnOnce() -> String) -> Result<Interval> {
    if iv.lo.is_finite() && iv.hi.is_finite() {
        Ok(iv)
    } else {
        Err(Error::UnboundedVariable(what()))
    }
}

/// Builds the MILP of a window: Gemm equality rows, stored boxes on every
/// variable, one big-M block per unstable ReLU inside the window.
pub fn encode_window(
    net: &NetworkGraph,
    win: &WindowSubGraph,
    bounds: &BoundStore,
    objective: &LinearForm,
    sense: Sense,
) -> Result<MilpProblem> {
    let mut lp = LinearProgram::new(sense);
    let mut entry_vars = Vec::new();
    let mut post_terms: BTreeMap<usize, Vec<PostTerm>> = BTreeMap::new();
    for &j in &win.entries {
        let vars: Vec<usize> = bounds
            .post(j)
            .iter()
            .enumerate()
            .map(|(k, &iv)| {
                let iv = finite(iv, || format!("x^({j})_{k}"))?;
                Ok(lp.add_variable(format!("x{j}_{k}"), iv.lo, iv.hi))
            })
            .collect::<Result<_>>()?;
        post_terms.insert(j, vars.iter().map(|&v| PostTerm::Var(v)).collect());
        entry_vars.push((j, vars));
    }

    let mut pre_vars = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut layers = Vec::new();
    for &i in &win.gemms {
        let (w, b) = net.gemm(i);
        let inputs: Vec<PostTerm> = net
            .sources(i)
            .iter()
            .flat_map(|src| post_terms[src].iter().copied())
            .collect();
        let mut ys = Vec::with_capacity(b.len());
        for (k, &iv) in bounds.pre(i).iter().enumerate() {
            let iv = finite(iv, || format!("y^({i})_{k}"))?;
            let y = lp.add_variable(format!("y{i}_{k}"), iv.lo, iv.hi);
            let mut row = vec![(y, 1.0)];
            for (c, term) in inputs.iter().enumerate() {
                let a = w.get(k, c);
                if let PostTerm::Var(v) = term {
                    if a != 0.0 {
                        row.push((*v, -a));
                    }
                }
            }
            lp.add_constraint(row, Relation::Eq, b[k]);
            ys.push(y);
        }
        if win.relus.contains(&i) {
            let mut terms = Vec::with_capacity(ys.len());
            for (k, &y) in ys.iter().enumerate() {
                let iv = bounds.pre(i)[k];
                let term = match classify(iv) {
                    NeuronState::Active => PostTerm::Var(y),
                    NeuronState::Inactive => PostTerm::Zero,
                    NeuronState::Unstabilized => {
                        let x = lp.add_variable(format!("x{i}_{k}"), 0.0, iv.hi);
                        let z = lp.add_variable(format!("z{i}_{k}"), 0.0, 1.0);
                        lp.add_constraint(vec![(x, 1.0), (y, -1.0)], Relation::Ge, 0.0);
                        lp.add_constraint(vec![(x, 1.0), (y, -1.0), (z, -iv.lo)], Relation::Le, -iv.lo);
                        lp.add_constraint(vec![(x, 1.0), (z, -iv.hi)], Relation::Le, 0.0);
                        blocks.push(ReluBlock {
                            ordinal: i,
                            neuron: k,
                            y_var: y,
                            x_var: x,
                            z_var: z,
                            lo: iv.lo,
                            hi: iv.hi,
                        });
                        PostTerm::Var(x)
                    }
                };
                terms.push(term);
            }
            post_terms.insert(i, terms);
        }
        pre_vars.insert(i, ys);
        layers.push(WindowLayer {
            ordinal: i,
            weights: w.clone(),
            bias: b.to_vec(),
            sources: net.sources(i).to_vec(),
        });
    }

    let mut mip = MilpProblem {
        lp,
        blocks,
        window: win.clone(),
        entry_vars,
        pre_vars,
        post_terms,
        layers,
    };
    mip.set_objective(objective, sense)?;
    Ok(mip)
}

/// The MILP with every binary relaxed to `[0, 1]`.
pub fn lp_relax(mip: &MilpProblem) -> LinearProgram {
    // Binaries already carry [0, 1] bounds; integrality lives only in `blocks`.
    mip.lp.clone()
}

/// Forward-evaluates the window from the entry components of `point`.
///
/// Entry values are clamped into their boxes and propagated exactly through
/// the window's layers. Returns the MILP objective and the full assignment
/// when that point satisfies every row and stored bound; interior windows can
/// map box points outside later stored bounds, in which case `None` is returned.
pub(crate) fn rounding_point(mip: &MilpProblem, point: &[f64]) -> Option<(f64, Vec<f64>)> {
    let lp = &mip.lp;
    let mut assign = vec![0.0; lp.num_variables()];
    let mut post: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (j, vars) in &mip.entry_vars {
        let vals: Vec<f64> = vars
            .iter()
            .map(|&v| {
                let var = &lp.variables[v];
                point.get(v).copied().unwrap_or(var.lo).clamp(var.lo, var.hi)
            })
            .collect();
        for (&v, &val) in vars.iter().zip(&vals) {
            assign[v] = val;
        }
        post.insert(*j, vals);
    }
    for layer in &mip.layers {
        let input: Vec<f64> = layer
            .sources
            .iter()
            .flat_map(|s| post[s].iter().copied())
            .collect();
        let y: Vec<f64> = layer
            .weights
            .mul_vec(&input)
            .iter()
            .zip(&layer.bias)
            .map(|(a, b)| a + b)
            .collect();
        for (k, &v) in mip.pre_vars[&layer.ordinal].iter().enumerate() {
            assign[v] = y[k];
        }
        if mip.post_terms.contains_key(&layer.ordinal) && mip.window.relus.contains(&layer.ordinal) {
            post.insert(layer.ordinal, y.iter().map(|v| v.max(0.0)).collect());
        }
    }
    for b in &mip.blocks {
        let y = assign[b.y_var];
        assign[b.x_var] = y.max(0.0);
        assign[b.z_var] = if y > 0.0 { 1.0 } else { 0.0 };
    }
    let scale = 1.0 + assign.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if lp.max_violation(&assign) > HEURISTIC_FEAS_TOL * scale {
        return None;
    }
    Some((lp.objective.value(&assign), assign))
}

/// Objective value of the forward-evaluated point, if it is MILP-feasible.
pub fn rounding_incumbent(mip: &MilpProblem, fractional_point: &[f64]) -> Option<f64> {
    rounding_point(mip, fractional_point).map(|(v, _)| v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::tests::appendix_net;
    use crate::graph::{build_graph, extract_window, LayerSpec};
    use crate::interval::ibp_forward;
    use crate::lp::{solve_lp, LpStatus};

    pub fn appendix_box() -> Vec<Interval> {
        vec![Interval::new(-1.0, 1.0), Interval::new(0.0, 1.0)]
    }

    pub fn appendix_mip(sense: Sense) -> MilpProblem {
        let net = appendix_net();
        let store = ibp_forward(&net, &appendix_box()).unwrap();
        let win = extract_window(&net, 0, 2).unwrap();
        encode_window(&net, &win, &store, &LinearForm::neuron(2, 0), sense).unwrap()
    }

    /// Oracle: fix every binary pattern, solve the LP, keep the best feasible value.
    pub fn brute_force(mip: &MilpProblem, sense: Sense) -> Option<f64> {
        let zs: Vec<usize> = mip.binaries().collect();
        let mut best: Option<f64> = None;
        for mask in 0u32..(1 << zs.len()) {
            let mut lp = lp_relax(mip);
            lp.objective.sense = sense;
            for (bit, &z) in zs.iter().enumerate() {
                lp.fix_in_place(z, f64::from((mask >> bit) & 1)).unwrap();
            }
            let res = solve_lp(&lp);
            if res.status == LpStatus::Optimal {
                let v = res.objective.unwrap();
                best = Some(match (best, sense) {
                    (None, _) => v,
                    (Some(b), Sense::Minimize) => b.min(v),
                    (Some(b), Sense::Maximize) => b.max(v),
                });
            }
        }
        best
    }

    #[test]
    fn appendix_window_blocks() {
        let mip = appendix_mip(Sense::Maximize);
        let lu: Vec<(f64, f64)> = mip.blocks.iter().map(|b| (b.lo, b.hi)).collect();
        assert_eq!(lu, vec![(-1.0, 2.0), (-2.0, 1.0)]);
        assert_eq!(mip.num_binaries(), 2);
        assert_eq!(mip.entry_var_list().len(), 2);
    }

    #[test]
    fn stabilized_neurons_are_substituted() {
        let net = build_graph(
            vec![
                LayerSpec::gemm(1, Matrix::identity(2), vec![0.0, 0.0], vec![0]),
                LayerSpec::relu(2, 1),
                LayerSpec::gemm(3, Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![0.0], vec![2]),
            ],
            2,
        )
        .unwrap();
        // First neuron Active on [1, 2], second Inactive on [-2, -1].
        let store = ibp_forward(&net, &[Interval::new(1.0, 2.0), Interval::new(-2.0, -1.0)]).unwrap();
        let win = extract_window(&net, 0, 2).unwrap();
        let mut mip = encode_window(&net, &win, &store, &LinearForm::neuron(2, 0), Sense::Maximize).unwrap();
        assert!(mip.blocks.is_empty());
        assert!(mip.lp.variables.iter().all(|v| !v.name.starts_with('z')));
        let res = solve_lp(&lp_relax(&mip));
        assert_eq!(res.objective, Some(2.0));
        mip.set_objective(&LinearForm::neuron(2, 0), Sense::Minimize).unwrap();
        assert_eq!(solve_lp(&lp_relax(&mip)).objective, Some(1.0));
    }

    #[test]
    fn unbounded_store_is_rejected() {
        let net = appendix_net();
        let store = BoundStore::new(&net, appendix_box()).unwrap();
        let win = extract_window(&net, 0, 2).unwrap();
        let err = encode_window(&net, &win, &store, &LinearForm::neuron(2, 0), Sense::Maximize).unwrap_err();
        assert!(matches!(err, Error::UnboundedVariable(_)));
    }

    #[test]
    fn lp_relaxation_of_appendix_window() {
        let res = solve_lp(&lp_relax(&appendix_mip(Sense::Maximize)));
        assert_eq!(res.status, LpStatus::Optimal);
        assert!((res.objective.unwrap() - 8.0 / 3.0).abs() < 1e-9);
        let res = solve_lp(&lp_relax(&appendix_mip(Sense::Minimize)));
        assert!(res.objective.unwrap().abs() < 1e-9);
    }

    #[test]
    fn fixing_binaries_forces_relu_branches() {
        let mip = appendix_mip(Sense::Maximize);
        let b = mip.blocks[0];
        for (zval, expect_eq_y) in [(1.0, true), (0.0, false)] {
            let fixed = lp_relax(&mip).fix_variable(b.z_var, zval).unwrap();
            for sense in [Sense::Minimize, Sense::Maximize] {
                let mut lp = fixed.clone();
                let coeffs = if expect_eq_y {
                    vec![(b.x_var, 1.0), (b.y_var, -1.0)]
                } else {
                    vec![(b.x_var, 1.0)]
                };
                lp.set_objective(sense, coeffs, 0.0);
                let res = solve_lp(&lp);
                assert!(res.objective.unwrap().abs() < 1e-9, "z={zval} {sense:?}");
            }
        }
        assert!(lp_relax(&mip).fix_variable(b.z_var, 0.5).is_ok());
    }

    #[test]
    fn rounding_heuristic_examples() {
        let mip = appendix_mip(Sense::Maximize);
        let mut point = vec![0.0; mip.lp.num_variables()];
        let entries = mip.entry_var_list();
        point[entries[0]] = 1.0;
        point[entries[1]] = 1.0;
        assert_eq!(rounding_incumbent(&mip, &point), Some(2.0));
        point[entries[0]] = 0.0;
        point[entries[1]] = 0.0;
        assert_eq!(rounding_incumbent(&mip, &point), Some(0.0));
        // Clamped into the box.
        point[entries[0]] = 7.0;
        assert_eq!(rounding_incumbent(&mip, &point), Some(2.0));
    }

    #[test]
    fn big_m_block_is_exact_on_a_grid() {
        for &(l, u) in &[(-1.0, 2.0), (-2.0, 1.0), (-0.5, 0.25), (-3.0, 3.0)] {
            for step in 0..=40 {
                let y = l + (u - l) * step as f64 / 40.0;
                // Feasible x range for each z, intersected with x >= 0, x >= y.
                let mut xs: Vec<(f64, f64)> = Vec::new();
                for z in [0.0, 1.0] {
                    let lo = 0.0f64.max(y);
                    let hi = (y - l * (1.0 - z)).min(u * z);
                    if lo <= hi + 1e-12 {
                        xs.push((lo, hi));
                    }
                }
                let relu = y.max(0.0);
                assert!(!xs.is_empty());
                for (lo, hi) in xs {
                    assert!((lo - relu).abs() < 1e-12 && (hi - relu).abs() < 1e-12, "l={l} u={u} y={y}");
                }
            }
        }
    }
}
