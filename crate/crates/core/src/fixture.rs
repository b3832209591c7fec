//! Seeded random networks and properties for tests and the `fixture` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_graph, LayerId, LayerSpec, Matrix, NetworkGraph};
use crate::interval::{classify, forward_eval, ibp_forward, Interval, NeuronState};
use crate::parse::{Atom, Clause, PropertySpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    /// Number of Gemm layers, including the output layer.
    pub gemms: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden widths are drawn from `1..=max_width`.
    pub max_width: usize,
    /// Regenerate until interval propagation leaves at most this many unstable ReLUs.
    pub max_unstable: Option<usize>,
    /// Let the output Gemm also read the first ReLU layer.
    pub skip_connection: bool,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            gemms: 3,
            input_dim: 2,
            output_dim: 1,
            max_width: 6,
            max_unstable: Some(8),
            skip_connection: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub seed: u64,
    pub net: NetworkGraph,
    pub property: PropertySpec,
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| round3(rng.gen_range(-1.0..1.0))).collect();
    Matrix::new(rows, cols, data)
}

fn random_network(rng: &mut ChaCha8Rng, p: &FixtureParams) -> NetworkGraph {
    let mut specs = Vec::new();
    let mut prev_id: LayerId = 0;
    let mut prev_width = p.input_dim;
    let mut first_relu: Option<(LayerId, usize)> = None;
    let mut next_id: LayerId = 1;
    for i in 1..=p.gemms {
        let last = i == p.gemms;
        let width = if last { p.output_dim } else { rng.gen_range(1..=p.max_width) };
        let mut inputs = vec![prev_id];
        let mut cols = prev_width;
        if last && p.skip_connection && p.gemms >= 3 {
            if let Some((id, w)) = first_relu {
                inputs.push(id);
                cols += w;
            }
        }
        let w = random_matrix(rng, width, cols);
        let b = (0..width).map(|_| round3(rng.gen_range(-0.5..0.5))).collect();
        let gemm_id = next_id;
        specs.push(LayerSpec::gemm(gemm_id, w, b, inputs));
        next_id += 1;
        if !last {
            specs.push(LayerSpec::relu(next_id, gemm_id));
            if first_relu.is_none() {
                first_relu = Some((next_id, width));
            }
            prev_id = next_id;
            prev_width = width;
            next_id += 1;
        }
    }
    build_graph(specs, p.input_dim).expect("generated network is valid")
}

fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Interval> {
    (0..dim)
        .map(|_| {
            let lo = round3(rng.gen_range(-1.0..0.5));
            let w = round3(rng.gen_range(0.2..1.5));
            Interval::new(lo, lo + w)
        })
        .collect()
}

/// Single-atom property `c . y <= rhs` whose threshold sits near sampled outputs,
/// so roughly half of the generated instances are violated.
fn random_property(rng: &mut ChaCha8Rng, net: &NetworkGraph, input_box: Vec<Interval>) -> PropertySpec {
    let m = net.width(net.depth());
    let coeffs: Vec<f64> = (0..m).map(|_| round3(rng.gen_range(-1.0..1.0))).collect();
    let mut min_val = f64::INFINITY;
    let mut max_val = f64::NEG_INFINITY;
    for _ in 0..32 {
        let x: Vec<f64> = input_box.iter().map(|iv| rng.gen_range(iv.lo..=iv.hi)).collect();
        let y = forward_eval(net, &x).expect("dimensions match").output().to_vec();
        let v: f64 = coeffs.iter().zip(&y).map(|(a, b)| a * b).sum();
        min_val = min_val.min(v);
        max_val = max_val.max(v);
    }
    let spread = (max_val - min_val).max(0.1);
    let rhs = round3(min_val + rng.gen_range(-0.5..0.3) * spread);
    PropertySpec {
        input_box,
        output_dim: m,
        clauses: vec![Clause {
            atoms: vec![Atom { coeffs, rhs }],
        }],
    }
}

/// Number of ReLU-feeding neurons that interval propagation leaves unstable.
pub fn unstable_under_ibp(net: &NetworkGraph, input_box: &[Interval]) -> usize {
    let store = ibp_forward(net, input_box).expect("valid box");
    (1..=net.depth())
        .filter(|&i| net.has_relu(i))
        .flat_map(|i| store.pre(i).iter().copied())
        .filter(|&iv| classify(iv) == NeuronState::Unstabilized)
        .count()
}

/// Deterministic fixture for `seed`; resamples from the same stream until the
/// unstable-ReLU cap is met.
pub fn generate(seed: u64, params: &FixtureParams) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let net = random_network(&mut rng, params);
        let input_box = random_box(&mut rng, params.input_dim);
        if params
            .max_unstable
            .is_some_and(|cap| unstable_under_ibp(&net, &input_box) > cap)
        {
            continue;
        }
        let property = random_property(&mut rng, &net, input_box);
        return Fixture { seed, net, property };
    }
}

fn num(v: f64) -> String {
    if v < 0.0 {
        format!("(- {:?})", -v)
    } else {
        format!("{v:?}")
    }
}

/// VNN-LIB text for a property, readable back by the property parser.
pub fn render_vnnlib(prop: &PropertySpec) -> String {
    let mut s = String::new();
    for i in 0..prop.input_box.len() {
        s += &format!("(declare-const X_{i} Real)\n");
    }
    for j in 0..prop.output_dim {
        s += &format!("(declare-const Y_{j} Real)\n");
    }
    s += "\n; input region\n";
    for (i, iv) in prop.input_box.iter().enumerate() {
        s += &format!("(assert (>= X_{i} {}))\n(assert (<= X_{i} {}))\n", num(iv.lo), num(iv.hi));
    }
    s += "\n; violation condition\n(assert (or";
    for clause in &prop.clauses {
        s += "\n  (and";
        for atom in &clause.atoms {
            let terms: Vec<String> = atom
                .coeffs
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(j, c)| format!("(* {} Y_{j})", num(*c)))
                .collect();
            let lhs = match terms.len() {
                0 => "0.0".to_string(),
                1 => terms[0].clone(),
                _ => format!("(+ {})", terms.join(" ")),
            };
            s += &format!(" (<= {lhs} {})", num(atom.rhs));
        }
        s += ")";
    }
    s += "))\n";
    s
}
