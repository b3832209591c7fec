//! Interval bound propagation and the bound store shared by every tightening method.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Matrix, NetworkGraph};

/// Crossing gap below which an intersection is treated as round-off, not infeasibility.
const CROSSING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn is_subset_of(&self, other: &Interval, tol: f64) -> bool {
        self.lo >= other.lo - tol && self.hi <= other.hi + tol
    }

    pub fn relu(&self) -> Interval {
        Interval::new(self.lo.max(0.0), self.hi.max(0.0))
    }

    pub fn state(&self) -> NeuronState {
        classify(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeuronState {
    Inactive,
    Active,
    Unstabilized,
}

impl NeuronState {
    pub fn is_stabilized(self) -> bool {
        !matches!(self, NeuronState::Unstabilized)
    }
}

/// Ties resolve to the stabilized class; `[0, 0]` is Inactive.
pub fn classify(iv: Interval) -> NeuronState {
    if iv.hi <= 0.0 {
        NeuronState::Inactive
    } else if iv.lo >= 0.0 {
        NeuronState::Active
    } else {
        NeuronState::Unstabilized
    }
}

/// Pre- and post-activation boxes for every Gemm ordinal.
///
/// Updates only intersect, so a store never loosens. Post-activation boxes are
/// always derived from the pre-activation box of the same ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundStore {
    input: Vec<Interval>,
    pre: Vec<Vec<Interval>>,
    post: Vec<Option<Vec<Interval>>>,
}

impl BoundStore {
    /// A store with the given input box and unbounded pre-activations.
    pub fn new(net: &NetworkGraph, input: Vec<Interval>) -> Result<Self> {
        if input.len() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                detail: format!(
                    "input box has {} entries, network expects {}",
                    input.len(),
                    net.input_dim()
                ),
            });
        }
        if let Some((k, iv)) = input.iter().enumerate().find(|(_, iv)| !(iv.lo <= iv.hi)) {
            return Err(Error::InfeasibleBounds {
                layer: 0,
                neuron: k,
                lo: iv.lo,
                hi: iv.hi,
            });
        }
        let unbounded = Interval::new(f64::NEG_INFINITY, f64::INFINITY);
        let pre: Vec<Vec<Interval>> = (1..=net.depth())
            .map(|i| vec![unbounded; net.width(i)])
            .collect();
        let post = (1..=net.depth())
            .map(|i| net.has_relu(i).then(|| vec![unbounded.relu(); net.width(i)]))
            .collect();
        Ok(Self { input, pre, post })
    }

    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn input(&self) -> &[Interval] {
        &self.input
    }

    /// Pre-activation box of Gemm `ordinal` (1-based).
    pub fn pre(&self, ordinal: usize) -> &[Interval] {
        &self.pre[ordinal - 1]
    }

    /// Post-activation box `x^(ordinal)`; ordinal 0 is the input box.
    pub fn post(&self, ordinal: usize) -> &[Interval] {
        if ordinal == 0 {
            &self.input
        } else {
            self.post[ordinal - 1]
                .as_deref()
                .expect("post-activation requested for a Gemm without ReLU")
        }
    }

    pub fn has_post(&self, ordinal: usize) -> bool {
        ordinal == 0 || self.post[ordinal - 1].is_some()
    }

    /// Intersects one pre-activation interval. Returns whether the box shrank.
    pub fn tighten_pre(&mut self, ordinal: usize, neuron: usize, bound: Interval) -> Result<bool> {
        let cur = self.pre[ordinal - 1][neuron];
        let mut lo = cur.lo.max(bound.lo);
        let mut hi = cur.hi.min(bound.hi);
        if lo > hi {
            if lo - hi <= CROSSING_TOL * (1.0 + lo.abs().max(hi.abs())) {
                std::mem::swap(&mut lo, &mut hi);
            } else {
                return Err(Error::InfeasibleBounds {
                    layer: ordinal,
                    neuron,
                    lo,
                    hi,
                });
            }
        }
        let next = Interval::new(lo, hi);
        let changed = next != cur;
        self.pre[ordinal - 1][neuron] = next;
        if let Some(post) = self.post[ordinal - 1].as_mut() {
            post[neuron] = next.relu();
        }
        Ok(changed)
    }

    pub fn tighten_layer(&mut self, ordinal: usize, bounds: &[Interval]) -> Result<bool> {
        let mut changed = false;
        for (k, b) in bounds.iter().enumerate() {
            changed |= self.tighten_pre(ordinal, k, *b)?;
        }
        Ok(changed)
    }

    /// Every pre-activation interval, layer by layer.
    pub fn iter_pre(&self) -> impl Iterator<Item = (usize, &[Interval])> {
        self.pre.iter().enumerate().map(|(i, v)| (i + 1, v.as_slice()))
    }

    /// True when every interval of `self` lies inside the matching interval of `other`.
    pub fn is_subset_of(&self, other: &BoundStore, tol: f64) -> bool {
        self.pre.len() == other.pre.len()
            && self
                .pre
                .iter()
                .flatten()
                .zip(other.pre.iter().flatten())
                .all(|(a, b)| a.is_subset_of(b, tol))
    }

    pub fn to_file(&self) -> Result<BoundFile> {
        let encode = |layer: &[Interval]| -> Result<Vec<[f64; 2]>> {
            layer
                .iter()
                .map(|iv| {
                    if iv.lo.is_finite() && iv.hi.is_finite() {
                        Ok([iv.lo, iv.hi])
                    } else {
                        Err(Error::Schema("cannot export an infinite bound".into()))
                    }
                })
                .collect()
        };
        let mut pre = BTreeMap::new();
        let mut post = BTreeMap::new();
        for i in 1..=self.depth() {
            pre.insert(i.to_string(), encode(self.pre(i))?);
            if self.has_post(i) {
                post.insert(i.to_string(), encode(self.post(i))?);
            }
        }
        Ok(BoundFile { pre, post })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = self.to_file()?;
        Ok(serde_json::to_string_pretty(&file).expect("bound file serializes"))
    }

    /// Builds a store from an imported bound file intersected with `input`.
    ///
    /// Post-activation entries are re-derived from the pre-activation boxes; a
    /// file whose post section disagrees with them is rejected.
    pub fn from_file(net: &NetworkGraph, input: Vec<Interval>, file: &BoundFile) -> Result<Self> {
        let mut store = Self::new(net, input)?;
        for (key, layer) in &file.pre {
            let ordinal = parse_ordinal(key, net)?;
            if layer.len() != net.width(ordinal) {
                return Err(Error::Schema(format!(
                    "bound file layer {key} has {} entries, expected {}",
                    layer.len(),
                    net.width(ordinal)
                )));
            }
            for (k, [lo, hi]) in layer.iter().copied().enumerate() {
                store.tighten_pre(ordinal, k, Interval::new(lo, hi))?;
            }
        }
        for i in 1..=net.depth() {
            if !file.pre.contains_key(&i.to_string()) {
                return Err(Error::Schema(format!("bound file is missing pre layer {i}")));
            }
        }
        for (key, layer) in &file.post {
            let ordinal = parse_ordinal(key, net)?;
            if !store.has_post(ordinal) || layer.len() != net.width(ordinal) {
                return Err(Error::Schema(format!("bound file post layer {key} does not match the network")));
            }
            for (derived, [lo, hi]) in store.post(ordinal).iter().zip(layer) {
                if (derived.lo - lo).abs() > 1e-9 || (derived.hi - hi).abs() > 1e-9 {
                    return Err(Error::Schema(format!(
                        "bound file post layer {key} is not the ReLU image of its pre layer"
                    )));
                }
            }
        }
        Ok(store)
    }

    pub fn from_json(net: &NetworkGraph, input: Vec<Interval>, text: &str) -> Result<Self> {
        let file: BoundFile = serde_json::from_str(text).map_err(|e| Error::Syntax {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::from_file(net, input, &file)
    }
}

fn parse_ordinal(key: &str, net: &NetworkGraph) -> Result<usize> {
    key.parse::<usize>()
        .ok()
        .filter(|&i| (1..=net.depth()).contains(&i))
        .ok_or_else(|| Error::Schema(format!("bound file layer key {key:?} is not a Gemm ordinal")))
}

pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// On-disk bound format: `{"pre": {"1": [[l, u], ...]}, "post": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundFile {
    pub pre: BTreeMap<String, Vec<[f64; 2]>>,
    #[serde(default)]
    pub post: BTreeMap<String, Vec<[f64; 2]>>,
}

/// Interval image of `W x + b` over the box `[lo, hi]`.
pub fn gemm_interval(w: &Matrix, b: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<Interval>> {
    if w.cols() != lo.len() || lo.len() != hi.len() || w.rows() != b.len() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            detail: format!(
                "W is {}x{}, bias {}, box {}/{}",
                w.rows(),
                w.cols(),
                b.len(),
                lo.len(),
                hi.len()
            ),
        });
    }
    Ok((0..w.rows())
        .map(|r| {
            let (mut l, mut u) = (b[r], b[r]);
            for (c, &a) in w.row(r).iter().enumerate() {
                if a >= 0.0 {
                    l += a * lo[c];
                    u += a * hi[c];
                } else {
                    l += a * hi[c];
                    u += a * lo[c];
                }
            }
            Interval::new(l, u)
        })
        .collect())
}

/// Concatenated post-activation boxes feeding Gemm `ordinal`.
fn gathered_box(net: &NetworkGraph, store: &BoundStore, ordinal: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for &src in net.sources(ordinal) {
        for iv in store.post(src) {
            lo.push(iv.lo);
            hi.push(iv.hi);
        }
    }
    (lo, hi)
}

pub fn ibp_forward(net: &NetworkGraph, input_box: &[Interval]) -> Result<BoundStore> {
    ibp_forward_inflated(net, input_box, 0.0)
}

/// IBP with every computed pre-activation interval widened by `inflation` on both sides.
pub fn ibp_forward_inflated(
    net: &NetworkGraph,
    input_box: &[Interval],
    inflation: f64,
) -> Result<BoundStore> {
    let mut store = BoundStore::new(net, input_box.to_vec())?;
    ibp_refresh(net, &mut store, 1, inflation)?;
    Ok(store)
}

/// Re-runs IBP from Gemm `from` onward, intersecting with the stored boxes.
pub fn ibp_refresh(net: &NetworkGraph, store: &mut BoundStore, from: usize, inflation: f64) -> Result<()> {
    for i in from.max(1)..=net.depth() {
        let (w, b) = net.gemm(i);
        let (lo, hi) = gathered_box(net, store, i);
        let mut out = gemm_interval(w, b, &lo, &hi)?;
        if inflation > 0.0 {
            for iv in &mut out {
                iv.lo -= inflation;
                iv.hi += inflation;
            }
        }
        store.tighten_layer(i, &out)?;
    }
    Ok(())
}

/// Exact layer values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `pre[i - 1]` is `y^(i)`.
    pub pre: Vec<Vec<f64>>,
    /// `post[i]` is `x^(i)`; `post[0]` is the input. Empty for the output layer.
    pub post: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one Gemm")
    }
}

pub fn forward_eval(net: &NetworkGraph, x0: &[f64]) -> Result<ForwardPass> {
    if x0.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            detail: format!("input has {} entries, network expects {}", x0.len(), net.input_dim()),
        });
    }
    let mut pass = ForwardPass {
        pre: Vec::with_capacity(net.depth()),
        post: vec![x0.to_vec()],
    };
    for i in 1..=net.depth() {
        let input: Vec<f64> = net
            .sources(i)
            .iter()
            .flat_map(|&j| pass.post[j].iter().copied())
            .collect();
        let (w, b) = net.gemm(i);
        let y: Vec<f64> = w.mul_vec(&input).iter().zip(b).map(|(a, c)| a + c).collect();
        let x = if net.has_relu(i) {
            y.iter().map(|v| v.max(0.0)).collect()
        } else {
            Vec::new()
        };
        pass.pre.push(y);
        pass.post.push(x);
    }
    Ok(pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::appendix_net;
    use crate::graph::{build_graph, LayerSpec};
    use proptest::prelude::*;

    fn appendix_box() -> Vec<Interval> {
        vec![Interval::new(-1.0, 1.0), Interval::new(0.0, 1.0)]
    }

    #[test]
    fn gemm_interval_appendix_layers() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let out = gemm_interval(&w, &[0.0, 0.0], &[-1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![Interval::new(-1.0, 2.0), Interval::new(-2.0, 1.0)]);

        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = gemm_interval(&w, &[0.0], &[0.0, 0.0], &[2.0, 1.0]).unwrap();
        assert_eq!(out, vec![Interval::new(0.0, 3.0)]);
    }

    #[test]
    fn gemm_interval_identity() {
        let out = gemm_interval(&Matrix::identity(3), &[0.0; 3], &[-1.0, 0.5, 2.0], &[1.0, 0.75, 3.0])
            .unwrap();
        assert_eq!(
            out,
            vec![Interval::new(-1.0, 1.0), Interval::new(0.5, 0.75), Interval::new(2.0, 3.0)]
        );
    }

    #[test]
    fn gemm_interval_dimension_mismatch() {
        let w = Matrix::zeros(2, 3);
        assert!(matches!(
            gemm_interval(&w, &[0.0, 0.0], &[0.0; 2], &[0.0; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ibp_appendix() {
        let store = ibp_forward(&appendix_net(), &appendix_box()).unwrap();
        assert_eq!(store.pre(1), &[Interval::new(-1.0, 2.0), Interval::new(-2.0, 1.0)]);
        assert_eq!(store.post(1), &[Interval::new(0.0, 2.0), Interval::new(0.0, 1.0)]);
        assert_eq!(store.pre(2), &[Interval::new(0.0, 3.0)]);
    }

    #[test]
    fn ibp_negated_output_is_inactive() {
        let mut specs = appendix_net().layers().to_vec();
        specs[3] = LayerSpec::gemm(3, Matrix::from_rows(&[vec![-1.0, -1.0]]).unwrap(), vec![0.0], vec![2]);
        let net = build_graph(specs, 2).unwrap();
        let store = ibp_forward(&net, &appendix_box()).unwrap();
        assert_eq!(store.pre(2), &[Interval::new(-3.0, 0.0)]);
        assert_eq!(classify(store.pre(2)[0]), NeuronState::Inactive);
        // Grid evaluation stays inside; the true range is [-2, 0], IBP is loose below.
        let mut seen = (f64::INFINITY, f64::NEG_INFINITY);
        for a in 0..=20 {
            for b in 0..=20 {
                let x = [-1.0 + a as f64 / 10.0, b as f64 / 20.0];
                let w = forward_eval(&net, &x).unwrap().output()[0];
                seen = (seen.0.min(w), seen.1.max(w));
            }
        }
        assert_eq!(seen, (-2.0, 0.0));
        assert!(store.pre(2)[0].contains(seen.0, 0.0) && store.pre(2)[0].contains(seen.1, 0.0));
    }

    #[test]
    fn point_box_degenerates_to_forward_pass() {
        let net = appendix_net();
        let x = [0.25, 0.5];
        let store = ibp_forward(&net, &[Interval::point(0.25), Interval::point(0.5)]).unwrap();
        let pass = forward_eval(&net, &x).unwrap();
        for i in 1..=2 {
            for (iv, v) in store.pre(i).iter().zip(&pass.pre[i - 1]) {
                assert_eq!((iv.lo, iv.hi), (*v, *v));
            }
        }
    }

    #[test]
    fn classify_boundaries() {
        assert_eq!(classify(Interval::new(-1.0, 2.0)), NeuronState::Unstabilized);
        assert_eq!(classify(Interval::new(0.0, 3.0)), NeuronState::Active);
        assert_eq!(classify(Interval::new(-3.0, 0.0)), NeuronState::Inactive);
        assert_eq!(classify(Interval::new(0.0, 0.0)), NeuronState::Inactive);
    }

    #[test]
    fn forward_eval_examples() {
        let net = appendix_net();
        let p = forward_eval(&net, &[1.0, 1.0]).unwrap();
        assert_eq!(p.pre[0], vec![2.0, 0.0]);
        assert_eq!(p.post[1], vec![2.0, 0.0]);
        assert_eq!(p.output(), &[2.0]);
        assert_eq!(forward_eval(&net, &[0.0, 0.0]).unwrap().output(), &[0.0]);
        let p = forward_eval(&net, &[-1.0, 0.0]).unwrap();
        assert_eq!(p.pre[0], vec![-1.0, -1.0]);
        assert_eq!(p.post[1], vec![0.0, 0.0]);
        assert_eq!(p.output(), &[0.0]);
        assert!(forward_eval(&net, &[1.0]).is_err());
    }

    #[test]
    fn store_is_monotone_and_flags_infeasibility() {
        let net = appendix_net();
        let mut store = ibp_forward(&net, &appendix_box()).unwrap();
        assert!(!store.tighten_pre(2, 0, Interval::new(-5.0, 5.0)).unwrap());
        assert!(store.tighten_pre(2, 0, Interval::new(-5.0, 2.0)).unwrap());
        assert_eq!(store.pre(2)[0], Interval::new(0.0, 2.0));
        assert!(store.tighten_pre(1, 1, Interval::new(0.5, 9.0)).unwrap());
        assert_eq!(store.post(1)[1], Interval::new(0.5, 1.0));
        assert!(matches!(
            store.tighten_pre(1, 0, Interval::new(3.0, 4.0)),
            Err(Error::InfeasibleBounds { layer: 1, neuron: 0, .. })
        ));
    }

    #[test]
    fn empty_input_box_is_infeasible() {
        let net = appendix_net();
        let err = ibp_forward(&net, &[Interval::new(1.0, -1.0), Interval::new(0.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBounds { layer: 0, neuron: 0, .. }));
    }

    #[test]
    fn bound_file_round_trip() {
        let net = appendix_net();
        let store = ibp_forward(&net, &appendix_box()).unwrap();
        let json = store.to_json().unwrap();
        assert!(json.contains("\"pre\""));
        let back = BoundStore::from_json(&net, appendix_box(), &json).unwrap();
        assert_eq!(back, store);

        let bad = json.replace("\"post\"", "\"posterior\"");
        assert!(BoundStore::from_json(&net, appendix_box(), &bad).is_err());
    }

    #[test]
    fn inflation_widens() {
        let net = appendix_net();
        let store = ibp_forward_inflated(&net, &appendix_box(), 0.5).unwrap();
        assert_eq!(store.pre(1)[0], Interval::new(-1.5, 2.5));
    }

    proptest! {
        #[test]
        fn ibp_is_sound_for_random_points(a in -1.0f64..=1.0, b in 0.0f64..=1.0) {
            let net = appendix_net();
            let store = ibp_forward(&net, &appendix_box()).unwrap();
            let pass = forward_eval(&net, &[a, b]).unwrap();
            for i in 1..=2 {
                for (iv, v) in store.pre(i).iter().zip(&pass.pre[i - 1]) {
                    prop_assert!(iv.contains(*v, 1e-12));
                }
            }
        }

        #[test]
        fn tightening_never_destabilizes(lo in -5.0f64..5.0, w in 0.0f64..5.0, dl in 0.0f64..1.0, du in 0.0f64..1.0) {
            let outer = Interval::new(lo, lo + w);
            let inner = Interval::new(outer.lo + dl * w / 2.0, outer.hi - du * w / 2.0);
            if outer.state().is_stabilized() {
                prop_assert!(inner.state().is_stabilized());
            }
        }

        #[test]
        fn gemm_interval_is_attained_at_vertices(
            rows in 1usize..4,
            weights in proptest::collection::vec(-2.0f64..2.0, 12),
            lo in proptest::collection::vec(-1.0f64..0.0, 3),
            span in proptest::collection::vec(0.0f64..2.0, 3),
        ) {
            let w = Matrix::new(rows, 3, weights[..rows * 3].to_vec());
            let hi: Vec<f64> = lo.iter().zip(&span).map(|(a, s)| a + s).collect();
            let b = vec![0.1; rows];
            let out = gemm_interval(&w, &b, &lo, &hi).unwrap();
            for r in 0..rows {
                let mut best = (f64::INFINITY, f64::NEG_INFINITY);
                for mask in 0..8u32 {
                    let x: Vec<f64> = (0..3).map(|c| if mask >> c & 1 == 1 { hi[c] } else { lo[c] }).collect();
                    let v: f64 = w.row(r).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[r];
                    best = (best.0.min(v), best.1.max(v));
                }
                prop_assert!((best.0 - out[r].lo).abs() < 1e-12);
                prop_assert!((best.1 - out[r].hi).abs() < 1e-12);
            }
        }
    }
}
