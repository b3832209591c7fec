//! Final verification MILP, verdicts, and bound-quality metrics.

use std::time::{Duration, Instant};

use serde::Serialize;
use tracing::{debug, info};

use crate::error::{Error, Result};
use crate::graph::{extract_window, NetworkGraph};
use crate::interval::{classify, forward_eval, ibp_forward, BoundStore, Interval, NeuronState};
use crate::lp::{solve_lp_with, LpStatus, Relation, Sense, SimplexOptions};
use crate::milp::{branch_and_bound, encode_window, lp_relax, BnbControls, BnbStatus, LinearForm, MilpProblem};
use crate::obbt::{lp_bounds, obbt_rh, ObbtConfig, ObbtSummary};
use crate::parse::{Atom, PropertySpec};

/// Margin a counterexample must achieve: `f <= -EPS_CERT`.
pub const EPS_CERT: f64 = 1e-6;
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ibp,
    Lp,
    ObbtRh,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ibp => "ibp",
            Method::Lp => "lp",
            Method::ObbtRh => "obbt-rh",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tightened {
    pub store: BoundStore,
    pub summary: Option<ObbtSummary>,
    pub elapsed: Duration,
}

/// Runs the chosen bound-tightening method from the input box.
pub fn compute_bounds(
    net: &NetworkGraph,
    input_box: &[Interval],
    method: Method,
    config: &ObbtConfig,
) -> Result<Tightened> {
    let start = Instant::now();
    let (store, summary) = match method {
        Method::Ibp => (ibp_forward(net, input_box)?, None),
        Method::Lp => {
            let out = lp_bounds(net, input_box, config)?;
            (out.store, Some(out.summary))
        }
        Method::ObbtRh => {
            let out = obbt_rh(net, input_box, config)?;
            (out.store, Some(out.summary))
        }
    };
    Ok(Tightened {
        store,
        summary,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Holds,
    Violated,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClauseStatus {
    /// The search proved no input satisfies the clause with margin.
    Refuted,
    /// A certified counterexample was found.
    Violated,
    /// Budget ran out first.
    Unknown,
    /// Not searched because an earlier clause was violated.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseCertificate {
    pub clause: usize,
    pub atoms: usize,
    pub status: ClauseStatus,
    pub search: Option<BnbStatus>,
    /// Proven lower bound on `f` (single-atom clauses).
    pub dual_bound: Option<f64>,
    pub nodes: usize,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub counterexample: Option<Vec<f64>>,
    /// Network output at the counterexample.
    pub counterexample_output: Option<Vec<f64>>,
    pub clauses: Vec<ClauseCertificate>,
    /// Set when the bounds proved the input region empty.
    pub vacuous: bool,
    pub total_time_s: f64,
}

impl Verdict {
    pub fn vacuous() -> Self {
        Self {
            outcome: Outcome::Holds,
            counterexample: None,
            counterexample_output: None,
            clauses: Vec::new(),
            vacuous: true,
            total_time_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyControls {
    /// Prune every node that cannot reach `f <= -EPS_CERT`.
    pub cutoff_zero: bool,
    /// Budget for all clauses together.
    pub time_limit: Option<Duration>,
    pub node_limit: Option<usize>,
    pub lp: SimplexOptions,
}

impl Default for VerifyControls {
    fn default() -> Self {
        Self {
            cutoff_zero: true,
            time_limit: None,
            node_limit: None,
            lp: SimplexOptions::default(),
        }
    }
}

fn check_dims(net: &NetworkGraph, prop: &PropertySpec) -> Result<()> {
    if prop.input_box.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            detail: format!(
                "property declares {} inputs, network has {}",
                prop.input_box.len(),
                net.input_dim()
            ),
        });
    }
    let out = net.width(net.depth());
    if prop.output_dim != out {
        return Err(Error::DimensionMismatch {
            layer: net.output_layer(),
            detail: format!("property declares {} outputs, network has {out}", prop.output_dim),
        });
    }
    Ok(())
}

fn atom_form(depth: usize, atom: &Atom, shift: f64) -> LinearForm {
    LinearForm {
        terms: atom
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, &c)| (depth, j, c))
            .collect(),
        constant: -atom.rhs + shift,
    }
}

fn full_mip(net: &NetworkGraph, bounds: &BoundStore) -> Result<MilpProblem> {
    let win = extract_window(net, 0, net.depth())?;
    encode_window(net, &win, bounds, &LinearForm::default(), Sense::Minimize)
}

/// Re-checks a candidate input exactly. Returns the output when every atom has margin.
fn certify(net: &NetworkGraph, prop: &PropertySpec, clause: usize, point: &[f64]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let x: Vec<f64> = point
        .iter()
        .zip(&prop.input_box)
        .map(|(v, iv)| v.clamp(iv.lo, iv.hi))
        .collect();
    let y = forward_eval(net, &x)?.output().to_vec();
    let ok = prop.clauses[clause].atoms.iter().all(|a| a.slack(&y) <= -EPS_CERT);
    Ok(ok.then_some((x, y)))
}

/// Searches every violation clause against the stored bounds.
///
/// Single-atom clauses minimize `f`; longer conjunctions are solved as
/// feasibility problems with every atom required to hold with margin.
/// Clauses are searched in file order and the first certified
/// counterexample ends the run.
pub fn verify(net: &NetworkGraph, prop: &PropertySpec, bounds: &BoundStore, controls: &VerifyControls) -> Result<Verdict> {
    check_dims(net, prop)?;
    let start = Instant::now();
    let deadline = controls.time_limit.map(|t| start + t);
    let base = full_mip(net, bounds)?;
    let depth = net.depth();

    let mut verdict = Verdict {
        outcome: Outcome::Holds,
        counterexample: None,
        counterexample_output: None,
        clauses: Vec::new(),
        vacuous: false,
        total_time_s: 0.0,
    };
    for (ci, clause) in prop.clauses.iter().enumerate() {
        let cert_base = ClauseCertificate {
            clause: ci,
            atoms: clause.atoms.len(),
            status: ClauseStatus::Skipped,
            search: None,
            dual_bound: None,
            nodes: 0,
            time_s: 0.0,
        };
        if verdict.outcome == Outcome::Violated {
            verdict.clauses.push(cert_base);
            continue;
        }
        let mut mip = base.clone();
        let single = prop.objective(ci);
        let bnb = match single {
            Some(atom) => {
                mip.set_objective(&atom_form(depth, atom, 0.0), Sense::Minimize)?;
                BnbControls {
                    cutoff: controls.cutoff_zero.then_some(-EPS_CERT),
                    early_stop: true,
                    ..BnbControls::default()
                }
            }
            None => {
                // Ask for twice the certification margin so LP round-off cannot eat it.
                for atom in &clause.atoms {
                    mip.add_row(&atom_form(depth, atom, 2.0 * EPS_CERT), Relation::Le)?;
                }
                mip.set_objective(&LinearForm::default(), Sense::Minimize)?;
                BnbControls::default()
            }
        };
        let bnb = BnbControls {
            time_limit: deadline.map(|d| d.saturating_duration_since(Instant::now())),
            node_limit: controls.node_limit,
            lp: controls.lp,
            ..bnb
        };
        let res = branch_and_bound(&mip, Sense::Minimize, &bnb);

        let mut cert = ClauseCertificate {
            search: Some(res.status),
            dual_bound: single.map(|_| res.dual_bound),
            nodes: res.nodes_explored,
            time_s: res.wall_time.as_secs_f64(),
            ..cert_base
        };
        let found = match &res.incumbent_point {
            Some(p) => certify(net, prop, ci, p)?,
            None => None,
        };
        cert.status = if let Some((x, y)) = found {
            verdict.counterexample = Some(x);
            verdict.counterexample_output = Some(y);
            ClauseStatus::Violated
        } else {
            match res.status {
                BnbStatus::Infeasible | BnbStatus::CutoffPruned | BnbStatus::EarlyStopped => ClauseStatus::Refuted,
                // Feasibility form: an incumbent that fails the exact re-check is inconclusive.
                BnbStatus::Optimal if single.is_none() => ClauseStatus::Unknown,
                BnbStatus::Optimal if res.dual_bound >= -EPS_CERT => ClauseStatus::Refuted,
                BnbStatus::Optimal | BnbStatus::TimeLimit => ClauseStatus::Unknown,
            }
        };
        debug!(clause = ci, status = ?cert.status, search = ?res.status, "clause searched");
        match cert.status {
            ClauseStatus::Violated => verdict.outcome = Outcome::Violated,
            ClauseStatus::Unknown => verdict.outcome = Outcome::Unknown,
            _ => {}
        }
        verdict.clauses.push(cert);
    }
    verdict.total_time_s = start.elapsed().as_secs_f64();
    info!(outcome = ?verdict.outcome, time_s = verdict.total_time_s, "verification finished");
    Ok(verdict)
}

/// LP relaxation value of the final MILP per clause; `None` for multi-atom clauses
/// or when the relaxation has no optimum.
pub fn lp_bound_of_final_mip(net: &NetworkGraph, prop: &PropertySpec, bounds: &BoundStore) -> Result<Vec<Option<f64>>> {
    check_dims(net, prop)?;
    let base = full_mip(net, bounds)?;
    (0..prop.clauses.len())
        .map(|ci| {
            let Some(atom) = prop.objective(ci) else {
                return Ok(None);
            };
            let mut mip = base.clone();
            mip.set_objective(&atom_form(net.depth(), atom, 0.0), Sense::Minimize)?;
            let res = solve_lp_with(&lp_relax(&mip), &SimplexOptions::default());
            Ok((res.status == LpStatus::Optimal).then(|| res.objective.expect("optimal")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StateCounts {
    pub inactive: usize,
    pub active: usize,
    pub stabilized: usize,
    pub unstabilized: usize,
}

impl StateCounts {
    pub fn of(intervals: &[Interval]) -> Self {
        let mut c = Self::default();
        for &iv in intervals {
            match classify(iv) {
                NeuronState::Inactive => c.inactive += 1,
                NeuronState::Active => c.active += 1,
                NeuronState::Unstabilized => c.unstabilized += 1,
            }
        }
        c.stabilized = c.inactive + c.active;
        c
    }

    fn add(&mut self, o: &StateCounts) {
        self.inactive += o.inactive;
        self.active += o.active;
        self.stabilized += o.stabilized;
        self.unstabilized += o.unstabilized;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub ordinal: usize,
    pub width: usize,
    /// False for the output layer, whose counts are informational only.
    pub has_relu: bool,
    pub counts: StateCounts,
    pub range: f64,
    pub intervals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub method: String,
    pub layers: Vec<LayerMetrics>,
    /// Totals over layers that feed a ReLU.
    pub counts: StateCounts,
    /// Mean `u - l` over every ReLU-feeding pre-activation.
    pub range_all: Option<f64>,
    /// Mean `u - l` over unstabilized ReLU-feeding pre-activations only.
    pub range_unstabilized: Option<f64>,
    pub lp_bounds: Vec<Option<f64>>,
    pub tightening_time_s: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compute_metrics(net: &NetworkGraph, bounds: &BoundStore, method: &str, tightening_time: Duration) -> MetricsReport {
    let mut layers = Vec::new();
    let mut counts = StateCounts::default();
    let mut all = Vec::new();
    let mut unstable = Vec::new();
    for (i, pre) in bounds.iter_pre() {
        let has_relu = net.has_relu(i);
        let c = StateCounts::of(pre);
        let widths: Vec<f64> = pre.iter().map(Interval::width).collect();
        if has_relu {
            counts.add(&c);
            all.extend(&widths);
            unstable.extend(
                pre.iter()
                    .filter(|iv| classify(**iv) == NeuronState::Unstabilized)
                    .map(Interval::width),
            );
        }
        layers.push(LayerMetrics {
            ordinal: i,
            width: pre.len(),
            has_relu,
            counts: c,
            range: mean(&widths).unwrap_or(0.0),
            intervals: pre.iter().map(|iv| [iv.lo, iv.hi]).collect(),
        });
    }
    MetricsReport {
        method: method.to_string(),
        layers,
        counts,
        range_all: mean(&all),
        range_unstabilized: mean(&unstable),
        lp_bounds: Vec::new(),
        tightening_time_s: tightening_time.as_secs_f64(),
    }
}

/// Machine-readable run output.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub format_version: u32,
    pub verdict: Option<Outcome>,
    pub vacuous: bool,
    pub counterexample: Option<Vec<f64>>,
    pub counterexample_output: Option<Vec<f64>>,
    pub clauses: Vec<ClauseCertificate>,
    pub metrics: Option<MetricsReport>,
    pub tightening: Option<ObbtSummary>,
    pub config: serde_json::Value,
    pub total_time_s: f64,
}

impl Report {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            verdict: None,
            vacuous: false,
            counterexample: None,
            counterexample_output: None,
            clauses: Vec::new(),
            metrics: None,
            tightening: None,
            config,
            total_time_s: 0.0,
        }
    }

    pub fn set_verdict(&mut self, v: &Verdict) {
        self.verdict = Some(v.outcome);
        self.vacuous = v.vacuous;
        self.counterexample = v.counterexample.clone();
        self.counterexample_output = v.counterexample_output.clone();
        self.clauses = v.clauses.clone();
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
