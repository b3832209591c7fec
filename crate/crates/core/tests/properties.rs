//! Randomized invariants over seeded fixture networks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obbtrh::fixture::{generate, FixtureParams};
use obbtrh::graph::{bfs_window, build_graph, extract_window, LayerSpec, Matrix};
use obbtrh::interval::{forward_eval, ibp_forward};
use obbtrh::lp::{solve_lp, LinearProgram, LpStatus, Relation, Sense};
use obbtrh::milp::{encode_window, lp_relax, BnbControls, LinearForm};
use obbtrh::obbt::{obbt_neuron, obbt_rh, ObbtConfig};
use obbtrh::parse::{emit_network_json, parse_network_json};
use obbtrh::verify::{verify, Outcome, VerifyControls, EPS_CERT};

fn params(skip: bool, gemms: usize) -> FixtureParams {
    FixtureParams {
        gemms,
        skip_connection: skip,
        ..FixtureParams::default()
    }
}

fn config(workers: usize, horizon: usize) -> ObbtConfig {
    ObbtConfig {
        horizon,
        workers,
        tighten_output: true,
        ..ObbtConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequential_windows_enter_at_t_minus_h(depth in 2usize..7, t_off in 0usize..6, h in 1usize..8) {
        let mut specs = Vec::new();
        for i in 0..depth as u32 {
            let input = if i == 0 { 0 } else { 2 * i };
            specs.push(LayerSpec::gemm(2 * i + 1, Matrix::identity(2), vec![0.0; 2], vec![input]));
            if i + 1 < depth as u32 {
                specs.push(LayerSpec::relu(2 * i + 2, 2 * i + 1));
            }
        }
        let net = build_graph(specs.clone(), 2).unwrap();
        let t = 1 + t_off % depth;
        let win = bfs_window(&net, t, h).unwrap();
        prop_assert_eq!(win.entries.clone(), vec![t.saturating_sub(h)]);
        prop_assert_eq!(win, extract_window(&net, t.saturating_sub(h), t).unwrap());
        prop_assert_eq!(build_graph(specs, 2).unwrap(), net);
    }

    #[test]
    fn network_json_round_trips(seed in 0u64..10_000, skip in any::<bool>(), gemms in 1usize..5) {
        let f = generate(seed, &params(skip, gemms));
        let text = emit_network_json(&f.net);
        let back = parse_network_json(&text).unwrap();
        prop_assert_eq!(&back, &f.net);
        prop_assert_eq!(emit_network_json(&back), text);
    }

    #[test]
    fn obbt_store_is_sound_and_inside_ibp(seed in 0u64..10_000, skip in any::<bool>(), h in 1usize..4) {
        let f = generate(seed, &params(skip, 3));
        let bx = &f.property.input_box;
        let ibp = ibp_forward(&f.net, bx).unwrap();
        let out = obbt_rh(&f.net, bx, &config(1, h)).unwrap().store;
        prop_assert!(out.is_subset_of(&ibp, 1e-9));
        prop_assert_eq!(out.pre(1), ibp.pre(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let x: Vec<f64> = bx.iter().map(|iv| rng.gen_range(iv.lo..=iv.hi)).collect();
            let pass = forward_eval(&f.net, &x).unwrap();
            for (i, ivs) in out.iter_pre() {
                for (iv, v) in ivs.iter().zip(&pass.pre[i - 1]) {
                    prop_assert!(iv.contains(*v, 1e-9), "layer {} value {} outside {:?}", i, v, iv);
                }
            }
        }
    }

    #[test]
    fn longer_horizon_is_no_looser(seed in 0u64..10_000) {
        let f = generate(seed, &params(false, 3));
        let bx = &f.property.input_box;
        let run = |h| {
            let cfg = ObbtConfig { early_stop: false, ..config(1, h) };
            obbt_rh(&f.net, bx, &cfg).unwrap().store
        };
        prop_assert!(run(2).is_subset_of(&run(1), 1e-7));
    }

    #[test]
    fn worker_count_and_reruns_do_not_change_bounds(seed in 0u64..10_000) {
        let f = generate(seed, &FixtureParams { gemms: 4, max_unstable: None, ..FixtureParams::default() });
        let bx = &f.property.input_box;
        let one = obbt_rh(&f.net, bx, &config(1, 2)).unwrap().store.to_json().unwrap();
        prop_assert_eq!(&obbt_rh(&f.net, bx, &config(1, 2)).unwrap().store.to_json().unwrap(), &one);
        prop_assert_eq!(&obbt_rh(&f.net, bx, &config(3, 2)).unwrap().store.to_json().unwrap(), &one);
    }

    #[test]
    fn first_layer_subproblems_reproduce_ibp(seed in 0u64..10_000) {
        let f = generate(seed, &params(false, 2));
        let ibp = ibp_forward(&f.net, &f.property.input_box).unwrap();
        let win = extract_window(&f.net, 0, 1).unwrap();
        for (k, iv) in ibp.pre(1).iter().enumerate() {
            let c = BnbControls::default();
            let hi = obbt_neuron(&f.net, &win, &ibp, k, Sense::Maximize, &c).unwrap().new_bound;
            let lo = obbt_neuron(&f.net, &win, &ibp, k, Sense::Minimize, &c).unwrap().new_bound;
            prop_assert!((hi - iv.hi).abs() <= 1e-8 && (lo - iv.lo).abs() <= 1e-8);
        }
    }

    #[test]
    fn fixing_a_binary_never_improves_the_relaxation(seed in 0u64..10_000, pick in 0usize..64) {
        let f = generate(seed, &params(false, 3));
        let ibp = ibp_forward(&f.net, &f.property.input_box).unwrap();
        let win = extract_window(&f.net, 0, f.net.depth()).unwrap();
        let obj = LinearForm::neuron(f.net.depth(), 0);
        let mip = encode_window(&f.net, &win, &ibp, &obj, Sense::Minimize).unwrap();
        prop_assume!(mip.num_binaries() > 0);
        let z = mip.blocks[pick % mip.num_binaries()].z_var;
        let root = solve_lp(&lp_relax(&mip));
        prop_assert_eq!(root.status, LpStatus::Optimal);
        for v in [0.0, 1.0] {
            let child = solve_lp(&lp_relax(&mip).fix_variable(z, v).unwrap());
            if child.status == LpStatus::Optimal {
                prop_assert!(child.objective.unwrap() >= root.objective.unwrap() - 1e-6);
            }
        }
    }

    #[test]
    fn verdicts_agree_across_bounds_and_cutoff(seed in 0u64..10_000, skip in any::<bool>()) {
        let f = generate(seed, &params(skip, 3));
        let bx = &f.property.input_box;
        let ibp = ibp_forward(&f.net, bx).unwrap();
        let obbt = obbt_rh(&f.net, bx, &config(1, 2)).unwrap().store;
        let mut outcomes = Vec::new();
        for (store, cutoff_zero) in [(&ibp, true), (&ibp, false), (&obbt, true), (&obbt, false)] {
            let v = verify(&f.net, &f.property, store, &VerifyControls { cutoff_zero, ..VerifyControls::default() }).unwrap();
            if v.outcome == Outcome::Violated {
                let x = v.counterexample.unwrap();
                prop_assert!(bx.iter().zip(&x).all(|(iv, v)| iv.contains(*v, 0.0)));
                let y = forward_eval(&f.net, &x).unwrap().output().to_vec();
                prop_assert!(f.property.objective(0).unwrap().slack(&y) <= -EPS_CERT);
            }
            outcomes.push(v.outcome);
        }
        prop_assert!(outcomes.iter().all(|o| *o == outcomes[0]), "{:?}", outcomes);
    }

    #[test]
    fn lp_optimum_is_below_every_feasible_point(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=8);
        let mut lp = LinearProgram::new(Sense::Minimize);
        let mut anchor = Vec::new();
        for j in 0..n {
            let lo = rng.gen_range(-3.0..1.0);
            let hi = lo + rng.gen_range(0.0..4.0);
            anchor.push(rng.gen_range(lo..=hi));
            lp.add_variable(format!("v{j}"), lo, hi);
        }
        for _ in 0..m {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let v: f64 = a.iter().zip(&anchor).map(|(p, q)| p * q).sum();
            let (rel, rhs) = match rng.gen_range(0..3) {
                0 => (Relation::Le, v + rng.gen_range(0.0..1.0)),
                1 => (Relation::Ge, v - rng.gen_range(0.0..1.0)),
                _ => (Relation::Eq, v),
            };
            lp.add_constraint(a.into_iter().enumerate().collect(), rel, rhs);
        }
        let cost: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        lp.set_objective(Sense::Minimize, cost.iter().copied().enumerate().collect(), 0.0);
        let res = solve_lp(&lp);
        prop_assert_eq!(res.status, LpStatus::Optimal);
        let at_anchor: f64 = cost.iter().zip(&anchor).map(|(c, x)| c * x).sum();
        prop_assert!(res.objective.unwrap() <= at_anchor + 1e-6);
        prop_assert!(lp.max_violation(&res.primal) <= 1e-6);
        prop_assert_eq!(solve_lp(&lp), res);
    }
}
