//! Rolling-horizon optimization-based bound tightening.
//!
//! The store starts from interval propagation. Windows are visited in order
//! of their target Gemm layer; within a window every still-unstable neuron
//! gets an independent max and min subproblem, all built from one frozen
//! snapshot of the store. Results are merged by intersection once the whole
//! layer has been solved, then interval propagation refreshes the layers
//! downstream before the next window.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use tracing::{debug, info};

use crate::error::{Error, Result};
use crate::graph::{bfs_window, NetworkGraph, WindowSubGraph};
use crate::interval::{classify, ibp_forward, ibp_refresh, BoundStore, Interval, NeuronState};
use crate::lp::{solve_lp_with, LpStatus, Sense, SimplexOptions};
use crate::milp::{branch_and_bound, encode_window, lp_relax, BnbControls, BnbStatus, LinearForm, MilpProblem};

/// Ordered `(s, t)` windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HorizonSequence {
    pub pairs: Vec<(usize, usize)>,
    pub horizon: usize,
}

/// How each per-neuron subproblem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SubproblemMode {
    /// Exact MILP by branch and bound.
    Milp,
    /// LP relaxation of the MILP (binaries relaxed to `[0, 1]`).
    LpRelaxation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObbtConfig {
    pub horizon: usize,
    pub per_instance_time_limit: Duration,
    pub early_stop: bool,
    pub workers: usize,
    /// Also tighten the output Gemm layer with a final window.
    pub tighten_output: bool,
    pub mode: SubproblemMode,
    /// Wall-clock budget for the whole run; subproblems get what remains.
    pub total_time_limit: Option<Duration>,
    pub lp: SimplexOptions,
}

impl Default for ObbtConfig {
    fn default() -> Self {
        Self {
            horizon: 2,
            per_instance_time_limit: Duration::from_secs(30),
            early_stop: true,
            workers: 1,
            tighten_output: false,
            mode: SubproblemMode::Milp,
            total_time_limit: None,
            lp: SimplexOptions::default(),
        }
    }
}

impl ObbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Schema("horizon length must be at least 1".into()));
        }
        if self.per_instance_time_limit.is_zero() {
            return Err(Error::Schema("per-instance time limit must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Schema("worker count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-window targets: every Gemm after the first that feeds a ReLU.
///
/// `s` is the entry of the BFS window of length `horizon`, which for a
/// sequential network is `max(0, t - horizon)`.
pub fn horizon_sequence(net: &NetworkGraph, horizon: usize) -> Result<HorizonSequence> {
    let mut pairs = Vec::new();
    for t in 2..=net.depth() {
        if net.has_relu(t) {
            pairs.push((bfs_window(net, t, horizon)?.s, t));
        }
    }
    Ok(HorizonSequence { pairs, horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SubproblemStatus {
    Bnb(BnbStatus),
    Lp(#[serde(skip)] LpStatus),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronBound {
    /// Upper bound for `Maximize`, lower bound for `Minimize`. Always valid.
    pub new_bound: f64,
    pub status: SubproblemStatus,
}

#[derive(Debug, Clone, Copy)]
struct Budget {
    per_instance: Duration,
    deadline: Option<Instant>,
}

impl Budget {
    fn limit(&self) -> Duration {
        match self.deadline {
            Some(d) => self.per_instance.min(d.saturating_duration_since(Instant::now())),
            None => self.per_instance,
        }
    }
}

fn solve_subproblem(
    base: &MilpProblem,
    t: usize,
    k: usize,
    sense: Sense,
    early_stop: bool,
    mode: SubproblemMode,
    budget: Budget,
    lp_opts: &SimplexOptions,
) -> Result<NeuronBound> {
    let mut mip = base.clone();
    mip.set_objective(&LinearForm::neuron(t, k), sense)?;
    let infeasible = || Error::InfeasibleBounds {
        layer: t,
        neuron: k,
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
    };
    let unknown = match sense {
        Sense::Maximize => f64::INFINITY,
        Sense::Minimize => f64::NEG_INFINITY,
    };
    match mode {
        SubproblemMode::Milp => {
            let controls = BnbControls {
                early_stop,
                time_limit: Some(budget.limit()),
                lp: *lp_opts,
                ..BnbControls::default()
            };
            let res = branch_and_bound(&mip, sense, &controls);
            if res.status == BnbStatus::Infeasible {
                return Err(infeasible());
            }
            Ok(NeuronBound {
                new_bound: res.dual_bound,
                status: SubproblemStatus::Bnb(res.status),
            })
        }
        SubproblemMode::LpRelaxation => {
            let res = solve_lp_with(&lp_relax(&mip), lp_opts);
            let new_bound = match res.status {
                LpStatus::Optimal => res.objective.expect("optimal"),
                LpStatus::Infeasible => return Err(infeasible()),
                LpStatus::Unbounded | LpStatus::IterationLimit => unknown,
            };
            Ok(NeuronBound {
                new_bound,
                status: SubproblemStatus::Lp(res.status),
            })
        }
    }
}

/// One max or min subproblem for neuron `k` of the window's target layer.
pub fn obbt_neuron(
    net: &NetworkGraph,
    win: &WindowSubGraph,
    snapshot: &BoundStore,
    k: usize,
    sense: Sense,
    controls: &BnbControls,
) -> Result<NeuronBound> {
    let base = encode_window(net, win, snapshot, &LinearForm::neuron(win.t, k), sense)?;
    let res = branch_and_bound(&base, sense, controls);
    if res.status == BnbStatus::Infeasible {
        return Err(Error::InfeasibleBounds {
            layer: win.t,
            neuron: k,
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        });
    }
    Ok(NeuronBound {
        new_bound: res.dual_bound,
        status: SubproblemStatus::Bnb(res.status),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WindowReport {
    pub s: usize,
    pub t: usize,
    pub subproblems: usize,
    pub skipped_neurons: usize,
    pub stabilized: usize,
}

/// Run summary for the report channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObbtSummary {
    pub windows: Vec<WindowReport>,
    pub subproblems: usize,
    pub early_stops: usize,
    pub timeouts: usize,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct ObbtOutcome {
    pub store: BoundStore,
    pub summary: ObbtSummary,
}

/// Tightens every window of the horizon sequence in order.
pub fn obbt_rh(net: &NetworkGraph, input_box: &[Interval], config: &ObbtConfig) -> Result<ObbtOutcome> {
    config.validate()?;
    let start = Instant::now();
    let budget = Budget {
        per_instance: config.per_instance_time_limit,
        deadline: config.total_time_limit.map(|d| start + d),
    };
    let mut store = ibp_forward(net, input_box)?;
    let mut seq = horizon_sequence(net, config.horizon)?;
    if config.tighten_output {
        let out = net.depth();
        seq.pairs.push((bfs_window(net, out, config.horizon)?.s, out));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Schema(format!("cannot start worker pool: {e}")))?;

    let mut summary = ObbtSummary::default();
    for &(s, t) in &seq.pairs {
        if budget.deadline.is_some_and(|d| Instant::now() >= d) {
            info!(s, t, "total time limit reached; remaining windows keep their current bounds");
            break;
        }
        let win = bfs_window(net, t, config.horizon)?;
        let snapshot = store.clone();
        let relu_target = net.has_relu(t);
        let mut report = WindowReport {
            s,
            t,
            ..WindowReport::default()
        };

        let mut jobs = Vec::new();
        for (k, iv) in snapshot.pre(t).iter().enumerate() {
            if relu_target && classify(*iv).is_stabilized() {
                report.skipped_neurons += 1;
                continue;
            }
            jobs.push((k, Sense::Maximize));
            jobs.push((k, Sense::Minimize));
        }
        if jobs.is_empty() {
            summary.windows.push(report);
            continue;
        }

        let base = encode_window(net, &win, &snapshot, &LinearForm::default(), Sense::Minimize)?;
        let early_stop = config.early_stop && relu_target;
        let results: Vec<Result<NeuronBound>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(k, sense)| {
                    solve_subproblem(&base, t, k, sense, early_stop, config.mode, budget, &config.lp)
                })
                .collect()
        });

        for (&(k, sense), res) in jobs.iter().zip(results) {
            let nb = res?;
            match nb.status {
                SubproblemStatus::Bnb(BnbStatus::EarlyStopped) => summary.early_stops += 1,
                SubproblemStatus::Bnb(BnbStatus::TimeLimit) => summary.timeouts += 1,
                _ => {}
            }
            let bound = match sense {
                Sense::Maximize => Interval::new(f64::NEG_INFINITY, nb.new_bound),
                Sense::Minimize => Interval::new(nb.new_bound, f64::INFINITY),
            };
            store.tighten_pre(t, k, bound)?;
        }
        report.subproblems = jobs.len();
        summary.subproblems += jobs.len();
        if relu_target {
            report.stabilized = jobs
                .iter()
                .step_by(2)
                .filter(|&&(k, _)| classify(store.pre(t)[k]) != NeuronState::Unstabilized)
                .count();
        }
        debug!(s, t, subproblems = report.subproblems, stabilized = report.stabilized, "window done");
        summary.windows.push(report);
        ibp_refresh(net, &mut store, t + 1, 0.0)?;
    }
    summary.elapsed_s = start.elapsed().as_secs_f64();
    Ok(ObbtOutcome { store, summary })
}

/// LP-based bounds: every layer tightened by the LP relaxation over the full preceding network.
pub fn lp_bounds(net: &NetworkGraph, input_box: &[Interval], config: &ObbtConfig) -> Result<ObbtOutcome> {
    let cfg = ObbtConfig {
        horizon: net.depth().max(1),
        mode: SubproblemMode::LpRelaxation,
        early_stop: false,
        ..config.clone()
    };
    obbt_rh(net, input_box, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::extract_window;
    use crate::graph::tests::{appendix_net, chain, skip_net};

    fn appendix_box() -> Vec<Interval> {
        vec![Interval::new(-1.0, 1.0), Interval::new(0.0, 1.0)]
    }

    #[test]
    fn sequences_for_four_gemm_chain() {
        let net = chain(5);
        // Gemm 5 is the output; targets are Gemms 2..4.
        assert_eq!(horizon_sequence(&net, 2).unwrap().pairs, vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(horizon_sequence(&net, 3).unwrap().pairs, vec![(0, 2), (0, 3), (1, 4)]);
        assert_eq!(horizon_sequence(&net, 4).unwrap().pairs, vec![(0, 2), (0, 3), (0, 4)]);
        assert_eq!(horizon_sequence(&net, 9).unwrap().pairs, vec![(0, 2), (0, 3), (0, 4)]);
    }

    #[test]
    fn single_relu_layer_has_empty_sequence() {
        assert!(horizon_sequence(&appendix_net(), 2).unwrap().pairs.is_empty());
    }

    #[test]
    fn dag_sequence_uses_bfs_entries() {
        let net = skip_net();
        assert_eq!(horizon_sequence(&net, 1).unwrap().pairs, vec![(1, 2), (1, 3)]);
        assert_eq!(horizon_sequence(&net, 2).unwrap().pairs, vec![(0, 2), (0, 3)]);
    }

    #[test]
    fn appendix_output_tightening() {
        let net = appendix_net();
        let cfg = ObbtConfig {
            horizon: 2,
            tighten_output: true,
            ..ObbtConfig::default()
        };
        let out = obbt_rh(&net, &appendix_box(), &cfg).unwrap();
        let w = out.store.pre(2)[0];
        assert!((w.lo - 0.0).abs() < 1e-9 && (w.hi - 2.0).abs() < 1e-9, "{w:?}");
        assert_eq!(out.store.pre(1), ibp_forward(&net, &appendix_box()).unwrap().pre(1));

        // A one-layer window only sees the box of the ReLU outputs.
        let cfg = ObbtConfig {
            horizon: 1,
            ..cfg
        };
        let out = obbt_rh(&net, &appendix_box(), &cfg).unwrap();
        assert_eq!(out.store.pre(2)[0], Interval::new(0.0, 3.0));
    }

    #[test]
    fn appendix_neuron_subproblems() {
        let net = appendix_net();
        let store = ibp_forward(&net, &appendix_box()).unwrap();
        let win = extract_window(&net, 0, 2).unwrap();
        let c = BnbControls::default();
        let hi = obbt_neuron(&net, &win, &store, 0, Sense::Maximize, &c).unwrap();
        let lo = obbt_neuron(&net, &win, &store, 0, Sense::Minimize, &c).unwrap();
        assert!((hi.new_bound - 2.0).abs() < 1e-6);
        assert!(lo.new_bound.abs() < 1e-6);
    }

    #[test]
    fn nothing_to_tighten_matches_ibp() {
        let net = appendix_net();
        let out = obbt_rh(&net, &appendix_box(), &ObbtConfig::default()).unwrap();
        assert_eq!(out.store, ibp_forward(&net, &appendix_box()).unwrap());
        assert_eq!(out.summary.subproblems, 0);
    }

    #[test]
    fn config_validation() {
        let bad = ObbtConfig {
            horizon: 0,
            ..ObbtConfig::default()
        };
        assert!(obbt_rh(&appendix_net(), &appendix_box(), &bad).is_err());
    }
}
