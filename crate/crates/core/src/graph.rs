//! Network representation: a typed DAG of Gemm and ReLU layers.
//!
//! Gemm layers are addressed by their ordinal `i ∈ 1..=L` in topological
//! order; ordinal 0 stands for the network input. The ReLU consuming Gemm `i`
//! is addressed implicitly as "ReLU `i`", so `x^(i)` is its output and
//! `x^(0)` the network input.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::cmp::Reverse;

use crate::error::{Error, Result};

pub type LayerId = u32;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Builds a matrix from nested rows. Returns `None` on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self::new(rows.len(), cols, rows.concat()))
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input { dim: usize },
    Gemm { weights: Matrix, bias: Vec<f64> },
    Relu,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Gemm { .. } => "Gemm",
            LayerKind::Relu => "ReLU",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    pub inputs: Vec<LayerId>,
}

impl LayerSpec {
    pub fn input(dim: usize) -> Self {
        Self {
            id: 0,
            kind: LayerKind::Input { dim },
            inputs: Vec::new(),
        }
    }

    pub fn gemm(id: LayerId, weights: Matrix, bias: Vec<f64>, inputs: Vec<LayerId>) -> Self {
        Self {
            id,
            kind: LayerKind::Gemm { weights, bias },
            inputs,
        }
    }

    pub fn relu(id: LayerId, input: LayerId) -> Self {
        Self {
            id,
            kind: LayerKind::Relu,
            inputs: vec![input],
        }
    }
}

/// A validated network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_layer: LayerId,
    /// `gemm_ids[i - 1]` is the layer id of Gemm ordinal `i`.
    gemm_ids: Vec<LayerId>,
    /// Per Gemm ordinal: ordinals of the post-activation sources it reads, in input order.
    sources: Vec<Vec<usize>>,
    /// Per Gemm ordinal: id of the ReLU it feeds, if any.
    relu_ids: Vec<Option<LayerId>>,
}

impl NetworkGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_layer(&self) -> LayerId {
        self.output_layer
    }

    /// Number of Gemm layers `L`.
    pub fn depth(&self) -> usize {
        self.gemm_ids.len()
    }

    pub fn gemm_id(&self, ordinal: usize) -> LayerId {
        self.gemm_ids[ordinal - 1]
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Weights and bias of Gemm `ordinal`.
    pub fn gemm(&self, ordinal: usize) -> (&Matrix, &[f64]) {
        let id = self.gemm_id(ordinal);
        match &self.layer(id).expect("gemm id").kind {
            LayerKind::Gemm { weights, bias } => (weights, bias),
            _ => unreachable!("gemm_ids only holds Gemm layers"),
        }
    }

    /// Ordinals of the post-activation vectors `x^(j)` feeding Gemm `ordinal`.
    pub fn sources(&self, ordinal: usize) -> &[usize] {
        &self.sources[ordinal - 1]
    }

    pub fn relu_id(&self, ordinal: usize) -> Option<LayerId> {
        self.relu_ids[ordinal - 1]
    }

    pub fn has_relu(&self, ordinal: usize) -> bool {
        self.relu_id(ordinal).is_some()
    }

    /// Width `n_i`; `width(0)` is the input dimension.
    pub fn width(&self, ordinal: usize) -> usize {
        if ordinal == 0 {
            self.input_dim
        } else {
            self.gemm(ordinal).1.len()
        }
    }

    /// True when every Gemm reads only the post-activation of its predecessor.
    pub fn is_sequential(&self) -> bool {
        (1..=self.depth()).all(|i| self.sources(i) == [i - 1])
    }
}

/// Validates the specs and returns a network in stable topological order.
///
/// The Input layer (id 0) is added when absent from `specs`.
pub fn build_graph(specs: Vec<LayerSpec>, input_dim: usize) -> Result<NetworkGraph> {
    if input_dim == 0 {
        return Err(Error::DimensionMismatch {
            layer: 0,
            detail: "input dimension must be positive".into(),
        });
    }
    let mut specs = specs;
    match specs.iter().find(|s| s.id == 0) {
        Some(spec) => match spec.kind {
            LayerKind::Input { dim } if dim == input_dim && spec.inputs.is_empty() => {}
            LayerKind::Input { dim } if dim != input_dim => {
                return Err(Error::DimensionMismatch {
                    layer: 0,
                    detail: format!("input layer declares {dim} but input_dim is {input_dim}"),
                })
            }
            _ => {
                return Err(Error::InvalidLayer {
                    layer: 0,
                    detail: "id 0 is reserved for the Input layer, which has no predecessors"
                        .into(),
                })
            }
        },
        None => specs.insert(0, LayerSpec::input(input_dim)),
    }
    if specs.len() < 2 {
        return Err(Error::Schema("network has no layers".into()));
    }

    let mut position: BTreeMap<LayerId, usize> = BTreeMap::new();
    for (pos, spec) in specs.iter().enumerate() {
        if position.insert(spec.id, pos).is_some() {
            return Err(Error::DuplicateLayerId(spec.id));
        }
        if spec.id != 0 && matches!(spec.kind, LayerKind::Input { .. }) {
            return Err(Error::InvalidLayer {
                layer: spec.id,
                detail: "only id 0 may be an Input layer".into(),
            });
        }
    }
    for spec in &specs {
        if let Some(&missing) = spec.inputs.iter().find(|i| !position.contains_key(i)) {
            return Err(Error::DanglingReference {
                layer: spec.id,
                missing,
            });
        }
    }

    let order = topological_order(&specs, &position)?;
    let layers: Vec<LayerSpec> = order.into_iter().map(|p| specs[p].clone()).collect();

    let kind_of = |id: LayerId| &layers.iter().find(|l| l.id == id).expect("checked").kind;
    let mut consumers: BTreeMap<LayerId, Vec<LayerId>> = BTreeMap::new();
    for l in &layers {
        for &i in &l.inputs {
            consumers.entry(i).or_default().push(l.id);
        }
    }

    let mut gemm_ids = Vec::new();
    let mut ordinal_of_gemm: BTreeMap<LayerId, usize> = BTreeMap::new();
    let mut ordinal_of_relu: BTreeMap<LayerId, usize> = BTreeMap::new();
    let mut dims: BTreeMap<LayerId, usize> = BTreeMap::new();
    dims.insert(0, input_dim);
    let mut sources = Vec::new();
    let mut relu_ids = Vec::new();

    for l in &layers {
        match &l.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Gemm { weights, bias } => {
                if l.inputs.is_empty() {
                    return Err(Error::InvalidLayer {
                        layer: l.id,
                        detail: "Gemm layer has no inputs".into(),
                    });
                }
                let mut srcs = Vec::with_capacity(l.inputs.len());
                let mut fan_in = 0;
                for &i in &l.inputs {
                    match kind_of(i) {
                        LayerKind::Input { .. } => srcs.push(0),
                        LayerKind::Relu => srcs.push(ordinal_of_relu[&i]),
                        LayerKind::Gemm { .. } => {
                            return Err(Error::InvalidLayer {
                                layer: l.id,
                                detail: format!(
                                    "Gemm input {i} is a Gemm layer; Gemm layers read the input or ReLU outputs"
                                ),
                            })
                        }
                    }
                    fan_in += dims[&i];
                }
                if weights.cols() != fan_in {
                    return Err(Error::DimensionMismatch {
                        layer: l.id,
                        detail: format!(
                            "weights have {} columns but inputs provide {fan_in}",
                            weights.cols()
                        ),
                    });
                }
                if weights.rows() != bias.len() {
                    return Err(Error::DimensionMismatch {
                        layer: l.id,
                        detail: format!(
                            "weights have {} rows but bias has {} entries",
                            weights.rows(),
                            bias.len()
                        ),
                    });
                }
                if weights.rows() == 0 {
                    return Err(Error::DimensionMismatch {
                        layer: l.id,
                        detail: "Gemm layer has zero outputs".into(),
                    });
                }
                if weights.data.iter().chain(bias).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidLayer {
                        layer: l.id,
                        detail: "non-finite parameter".into(),
                    });
                }
                gemm_ids.push(l.id);
                ordinal_of_gemm.insert(l.id, gemm_ids.len());
                dims.insert(l.id, bias.len());
                sources.push(srcs);
                relu_ids.push(None);
            }
            LayerKind::Relu => {
                let [pred] = l.inputs[..] else {
                    return Err(Error::InvalidLayer {
                        layer: l.id,
                        detail: "ReLU layer needs exactly one predecessor".into(),
                    });
                };
                let Some(&ord) = ordinal_of_gemm.get(&pred) else {
                    return Err(Error::InvalidLayer {
                        layer: l.id,
                        detail: format!("ReLU predecessor {pred} is not a Gemm layer"),
                    });
                };
                if relu_ids[ord - 1].is_some() {
                    return Err(Error::InvalidLayer {
                        layer: pred,
                        detail: "Gemm layer feeds more than one ReLU".into(),
                    });
                }
                relu_ids[ord - 1] = Some(l.id);
                ordinal_of_relu.insert(l.id, ord);
                dims.insert(l.id, dims[&pred]);
                if !consumers.contains_key(&l.id) {
                    return Err(Error::InvalidLayer {
                        layer: l.id,
                        detail: "ReLU output is never consumed".into(),
                    });
                }
            }
        }
    }

    let Some(&output_layer) = gemm_ids.last() else {
        return Err(Error::Schema("network has no Gemm layer".into()));
    };
    for (idx, &gid) in gemm_ids.iter().enumerate() {
        let cons = consumers.get(&gid).map_or(&[][..], Vec::as_slice);
        let is_output = gid == output_layer;
        if is_output && !cons.is_empty() {
            return Err(Error::InvalidLayer {
                layer: gid,
                detail: "the last Gemm layer is the network output and cannot feed other layers"
                    .into(),
            });
        }
        if !is_output && relu_ids[idx].is_none() {
            return Err(Error::InvalidLayer {
                layer: gid,
                detail: "non-output Gemm layer must feed a ReLU".into(),
            });
        }
    }
    if input_dim > 0 && !consumers.contains_key(&0) {
        return Err(Error::InvalidLayer {
            layer: 0,
            detail: "network input is never consumed".into(),
        });
    }

    Ok(NetworkGraph {
        layers,
        input_dim,
        output_layer,
        gemm_ids,
        sources,
        relu_ids,
    })
}

/// Kahn's algorithm, always releasing the ready layer that appears first in the list.
fn topological_order(specs: &[LayerSpec], position: &BTreeMap<LayerId, usize>) -> Result<Vec<usize>> {
    let n = specs.len();
    let mut indegree = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, spec) in specs.iter().enumerate() {
        for i in &spec.inputs {
            let q = position[i];
            out[q].push(p);
            indegree[p] += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&p| indegree[p] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(p)) = ready.pop() {
        order.push(p);
        for &q in &out[p] {
            indegree[q] -= 1;
            if indegree[q] == 0 {
                ready.push(Reverse(q));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .filter(|&p| indegree[p] > 0)
            .map(|p| specs[p].id)
            .collect();
        return Err(Error::CycleDetected(stuck));
    }
    Ok(order)
}

/// The sub-graph feeding `y^(t)` that an OBBT subproblem is built on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSubGraph {
    pub s: usize,
    pub t: usize,
    /// Gemm ordinals inside the window, ascending.
    pub gemms: Vec<usize>,
    /// ReLU ordinals whose output is produced inside the window, ascending.
    pub relus: Vec<usize>,
    /// Post-activation ordinals treated as free boxed inputs, ascending (0 = network input).
    pub entries: Vec<usize>,
    /// Layer ids of the included Gemm and ReLU layers, in topological order.
    pub layers: Vec<LayerId>,
}

impl WindowSubGraph {
    pub fn contains_gemm(&self, ordinal: usize) -> bool {
        self.gemms.binary_search(&ordinal).is_ok()
    }
}

/// Window of Gemm layers `s+1..=t` (restricted to ancestors of Gemm `t`).
pub fn extract_window(net: &NetworkGraph, s: usize, t: usize) -> Result<WindowSubGraph> {
    if s >= t || t > net.depth() {
        return Err(Error::InvalidWindow {
            s,
            t,
            depth: net.depth(),
        });
    }
    let mut win = collect_window(net, t, |ord, _| ord > s);
    win.s = s;
    Ok(win)
}

/// Backward BFS from Gemm `t` keeping Gemm layers within `horizon` hops.
///
/// Every Gemm is placed at its shortest-path depth from `t` (Gemm `t` has
/// depth 1); sources of layers beyond the horizon become boxed entries.
pub fn bfs_window(net: &NetworkGraph, t: usize, horizon: usize) -> Result<WindowSubGraph> {
    if t == 0 || t > net.depth() || horizon == 0 {
        return Err(Error::InvalidWindow {
            s: t.saturating_sub(horizon),
            t,
            depth: net.depth(),
        });
    }
    let mut win = collect_window(net, t, |_, depth| depth <= horizon);
    win.s = win.entries.iter().copied().min().unwrap_or(0);
    Ok(win)
}

fn collect_window(
    net: &NetworkGraph,
    t: usize,
    include: impl Fn(usize, usize) -> bool,
) -> WindowSubGraph {
    let mut decided: BTreeMap<usize, bool> = BTreeMap::new();
    decided.insert(t, true);
    let mut queue = VecDeque::from([(t, 1usize)]);
    let mut gemms = vec![t];
    let mut entries = Vec::new();
    while let Some((ord, depth)) = queue.pop_front() {
        for &src in net.sources(ord) {
            if src == 0 {
                entries.push(0);
                continue;
            }
            let inside = *decided.entry(src).or_insert_with(|| {
                let inside = include(src, depth + 1);
                if inside {
                    queue.push_back((src, depth + 1));
                    gemms.push(src);
                }
                inside
            });
            if !inside {
                entries.push(src);
            }
        }
    }
    gemms.sort_unstable();
    entries.sort_unstable();
    entries.dedup();
    let relus: Vec<usize> = gemms.iter().copied().filter(|&g| g != t).collect();
    let mut layers = Vec::new();
    for l in net.layers() {
        let keep = gemms.iter().any(|&g| net.gemm_id(g) == l.id)
            || relus.iter().any(|&r| net.relu_id(r) == Some(l.id));
        if keep {
            layers.push(l.id);
        }
    }
    WindowSubGraph {
        s: 0,
        t,
        gemms,
        relus,
        entries,
        layers,
    }
}
