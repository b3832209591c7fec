//! Best-first branch-and-bound over the big-M binaries.
//!
//! Internally every search minimizes `sign * objective`. A node's bound is the
//! larger of its LP value and its parent's bound, so bounds never improve
//! going down the tree and the heap minimum is the global dual bound.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use tracing::trace;

use super::{rounding_point, MilpProblem};
use crate::lp::{solve_lp_with, LinearProgram, LpStatus, Sense, SimplexOptions};

/// A binary counts as integral within this distance of 0 or 1.
const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BnbControls {
    /// Prune every node whose bound is no better than this value.
    pub cutoff: Option<f64>,
    /// Stop once the dual bound proves the objective's sign (max: `<= 0`, min: `>= 0`).
    pub early_stop: bool,
    pub time_limit: Option<Duration>,
    pub node_limit: Option<usize>,
    /// Absolute optimality gap.
    pub gap_tol: f64,
    pub lp: SimplexOptions,
}

impl Default for BnbControls {
    fn default() -> Self {
        Self {
            cutoff: None,
            early_stop: false,
            time_limit: None,
            node_limit: None,
            gap_tol: 1e-6,
            lp: SimplexOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum BnbStatus {
    Optimal,
    Infeasible,
    CutoffPruned,
    EarlyStopped,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbResult {
    pub status: BnbStatus,
    pub incumbent_value: Option<f64>,
    /// Values of the window's entry variables at the incumbent.
    pub incumbent_point: Option<Vec<f64>>,
    /// Valid bound on the optimum: `<=` it for minimization, `>=` for maximization.
    pub dual_bound: f64,
    pub nodes_explored: usize,
    pub wall_time: Duration,
}

struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    /// LP objective of this node (internal sign), before the parent-bound clamp.
    value: f64,
    fixings: Vec<(usize, f64)>,
    primal: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap order: smallest bound first, then oldest node.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

enum Solved {
    Infeasible,
    /// LP ran out of iterations; no bound beyond the parent's is known.
    Unresolved,
    Bound(f64, Vec<f64>),
}

struct Search<'a> {
    mip: &'a MilpProblem,
    controls: &'a BnbControls,
    base: LinearProgram,
    sign: f64,
    cutoff: f64,
    incumbent: Option<(f64, Vec<f64>)>,
    /// Smallest bound among nodes fathomed by the cutoff alone.
    pruned_min: f64,
    /// Smallest bound among nodes whose LP could not be resolved.
    unresolved_min: f64,
    next_id: usize,
    entries: Vec<usize>,
}

impl Search<'_> {
    fn threshold(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::INFINITY, |(v, _)| *v).min(self.cutoff)
    }

    fn solve(&self, fixings: &[(usize, f64)]) -> Solved {
        let mut lp = self.base.clone();
        for &(z, v) in fixings {
            lp.variables[z].lo = v;
            lp.variables[z].hi = v;
        }
        let res = solve_lp_with(&lp, &self.controls.lp);
        match res.status {
            LpStatus::Optimal => Solved::Bound(self.sign * res.objective.expect("optimal"), res.primal),
            LpStatus::Infeasible => Solved::Infeasible,
            // Every window variable is boxed, so Unbounded only signals numerical trouble.
            LpStatus::Unbounded | LpStatus::IterationLimit => Solved::Unresolved,
        }
    }

    fn offer(&mut self, value: f64, primal: &[f64]) {
        if value < self.threshold() {
            let point = self.entries.iter().map(|&v| primal[v]).collect();
            self.incumbent = Some((value, point));
        }
    }

    fn try_heuristic(&mut self, primal: &[f64]) {
        if let Some((v, assign)) = rounding_point(self.mip, primal) {
            self.offer(self.sign * v, &assign);
        }
    }

    fn fractional_block(&self, primal: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (idx, b) in self.mip.blocks.iter().enumerate() {
            let z = primal[b.z_var];
            let frac = z.min(1.0 - z);
            if frac <= INTEGRALITY_TOL {
                continue;
            }
            let width = b.hi - b.lo;
            let better = match best {
                None => true,
                Some((_, bf, bw)) => frac > bf + 1e-12 || ((frac - bf).abs() <= 1e-12 && width > bw),
            };
            if better {
                best = Some((idx, frac, width));
            }
        }
        best.map(|(i, _, _)| i)
    }

    /// Handles a freshly solved node: fathom, record an incumbent, or queue it.
    fn admit(&mut self, heap: &mut BinaryHeap<Node>, node: Node) {
        if node.bound >= self.cutoff {
            self.pruned_min = self.pruned_min.min(node.bound);
            trace!(node = node.id, depth = node.depth, bound = node.bound, action = "cutoff");
            return;
        }
        if let Some((v, _)) = &self.incumbent {
            if node.bound >= v - self.controls.gap_tol {
                trace!(node = node.id, depth = node.depth, bound = node.bound, action = "fathom");
                return;
            }
        }
        if self.fractional_block(&node.primal).is_none() {
            self.offer(node.value, &node.primal.clone());
            trace!(node = node.id, depth = node.depth, bound = node.bound, action = "integral");
            return;
        }
        self.try_heuristic(&node.primal.clone());
        trace!(node = node.id, depth = node.depth, bound = node.bound, action = "queue");
        heap.push(node);
    }
}

/// Best-first branch and bound. All terminations are reported through the status.
pub fn branch_and_bound(mip: &MilpProblem, sense: Sense, controls: &BnbControls) -> BnbResult {
    let start = Instant::now();
    let sign = sense.sign();
    let mut base = mip.lp.clone();
    base.objective.sense = sense;
    let mut search = Search {
        mip,
        controls,
        base,
        sign,
        cutoff: controls.cutoff.map_or(f64::INFINITY, |c| sign * c),
        incumbent: None,
        pruned_min: f64::INFINITY,
        unresolved_min: f64::INFINITY,
        next_id: 1,
        entries: mip.entry_var_list(),
    };
    let mut heap = BinaryHeap::new();
    let mut nodes = 0usize;

    let finish = |search: &Search, status: BnbStatus, dual_int: f64, nodes: usize| {
        let (value, point) = match &search.incumbent {
            Some((v, p)) => (Some(sign * v), Some(p.clone())),
            None => (None, None),
        };
        BnbResult {
            status,
            incumbent_value: value,
            incumbent_point: point,
            dual_bound: sign * dual_int,
            nodes_explored: nodes,
            wall_time: start.elapsed(),
        }
    };

    match search.solve(&[]) {
        Solved::Infeasible => return finish(&search, BnbStatus::Infeasible, f64::INFINITY, 1),
        Solved::Unresolved => return finish(&search, BnbStatus::TimeLimit, f64::NEG_INFINITY, 1),
        Solved::Bound(bound, primal) => {
            let root = Node {
                id: 0,
                depth: 0,
                bound,
                value: bound,
                fixings: Vec::new(),
                primal,
            };
            search.admit(&mut heap, root);
        }
    }
    nodes += 1;

    loop {
        let open_min = heap.peek().map_or(f64::INFINITY, |n| n.bound);
        let frontier = open_min.min(search.pruned_min).min(search.unresolved_min);
        let inc = search.incumbent.as_ref().map(|(v, _)| *v);
        let dual = frontier.min(inc.unwrap_or(f64::INFINITY));

        if controls.early_stop && dual >= 0.0 {
            return finish(&search, BnbStatus::EarlyStopped, dual, nodes);
        }
        if heap.is_empty() {
            let status = if search.unresolved_min.is_finite() {
                BnbStatus::TimeLimit
            } else if inc.is_some() {
                BnbStatus::Optimal
            } else if search.pruned_min.is_finite() {
                BnbStatus::CutoffPruned
            } else {
                BnbStatus::Infeasible
            };
            return finish(&search, status, dual, nodes);
        }
        if let Some(v) = inc {
            if v - frontier <= controls.gap_tol {
                return finish(&search, BnbStatus::Optimal, dual, nodes);
            }
        }
        let out_of_time = controls.time_limit.is_some_and(|t| start.elapsed() >= t);
        let out_of_nodes = controls.node_limit.is_some_and(|n| nodes >= n);
        if out_of_time || out_of_nodes {
            return finish(&search, BnbStatus::TimeLimit, dual, nodes);
        }

        let node = heap.pop().expect("non-empty");
        if node.bound >= search.threshold() - controls.gap_tol && search.incumbent.is_some() {
            continue;
        }
        let Some(block) = search.fractional_block(&node.primal) else {
            continue;
        };
        let z = mip.blocks[block].z_var;
        for value in [0.0, 1.0] {
            let mut fixings = node.fixings.clone();
            fixings.push((z, value));
            let id = search.next_id;
            search.next_id += 1;
            nodes += 1;
            match search.solve(&fixings) {
                Solved::Infeasible => {
                    trace!(node = id, depth = node.depth + 1, action = "infeasible");
                }
                Solved::Unresolved => {
                    search.unresolved_min = search.unresolved_min.min(node.bound);
                    trace!(node = id, depth = node.depth + 1, action = "unresolved");
                }
                Solved::Bound(bound, primal) => {
                    let child = Node {
                        id,
                        depth: node.depth + 1,
                        bound: bound.max(node.bound),
                        value: bound,
                        fixings,
                        primal,
                    };
                    search.admit(&mut heap, child);
                }
            }
        }
    }
}
