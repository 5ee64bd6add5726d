use pathflow::model::GraphSpec;
use pathflow::synthesis::{sweep_gamma_rho, synthesize, terminal_riccati};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = GraphSpec> {
    (1usize..=6)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1i64..=4, n - 1),
                prop::collection::vec(0.1f64..10.0, n),
                prop::collection::vec(0.1f64..10.0, n),
                0usize..=6,
            )
        })
        .prop_map(|(tau, q, r, h)| GraphSpec::new(tau, q, r, h).unwrap())
}

/// Golden-section search for the minimum value of a strictly convex scalar
/// function on `[lo, hi]`. Only the optimal value is trusted to high
/// precision; the location is good to roughly the square root of epsilon.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

proptest! {
    #[test]
    fn harmonic_identities(spec in spec_strategy()) {
        let (gamma, rho) = sweep_gamma_rho(spec.q(), spec.r());
        let mut inv_q = 0.0;
        let mut inv_r = 0.0;
        for k in 0..spec.n() {
            inv_q += 1.0 / spec.q()[k];
            inv_r += 1.0 / spec.r()[k];
            prop_assert!((1.0 / gamma[k] - inv_q).abs() <= 1e-12 * inv_q);
            prop_assert!((1.0 / rho[k] - inv_r).abs() <= 1e-12 * inv_r);
        }
    }

    #[test]
    fn terminal_solves_fixed_point(gamma in 1e-3f64..100.0, rho in 1e-3f64..100.0) {
        let x = terminal_riccati(gamma, rho);
        prop_assert!(x > 0.0);
        let residual = x - rho * (x + gamma) / (x + gamma + rho);
        prop_assert!(residual.abs() < 1e-10 * (1.0 + x), "residual {residual}");
    }

    #[test]
    fn ratios_and_tables_are_proper_fractions(spec in spec_strategy()) {
        let params = synthesize(&spec);
        for (i, np) in params.nodes.iter().enumerate() {
            for &g in np.g.iter().chain(np.g_next.iter()) {
                prop_assert!(g > 0.0 && g < 1.0, "node {i}: g = {g}");
            }
            for row in &np.p {
                for &p in row {
                    prop_assert!(p > 0.0 && p < 1.0, "node {i}: P = {p}");
                }
            }
            for &x in &np.x {
                prop_assert!(x > 0.0 && x < np.rho);
            }
        }
    }

    #[test]
    fn scalar_dynamic_program_reproduces_cost_to_go(spec in spec_strategy()) {
        // Each cost-to-go entry is the optimal value of
        //   min_x (X_next + gamma)(1 + x)^2 + rho x^2,
        // walked from the terminal value down through every node.
        let params = synthesize(&spec);
        let mut next = params.terminal();
        for np in params.nodes.iter().rev() {
            for j in (0..np.span).rev() {
                let c = next + np.gamma;
                let (_, value) = golden_min(|x| c * (1.0 + x).powi(2) + np.rho * x * x, -2.0, 1.0);
                prop_assert!(
                    (value - np.x[j]).abs() <= 1e-9 * np.x[j],
                    "dp {value} vs table {}", np.x[j]
                );
                next = np.x[j];
            }
        }
    }

    #[test]
    fn quadratic_step_minimizer(
        c1 in 0.01f64..10.0,
        c2 in 0.01f64..10.0,
        c3 in 0.01f64..10.0,
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let f = |x: f64| c1 * (a + b + x).powi(2) + c2 * (a + x).powi(2) + c3 * x * x;
        let closed = -(c1 + c2) / (c1 + c2 + c3) * (a + c1 / (c1 + c2) * b);
        let (found, value) = golden_min(f, -20.0, 20.0);
        let best = f(closed);
        prop_assert!((best - value).abs() <= 1e-9 * (1.0 + best.abs()));
        prop_assert!((found - closed).abs() <= 1e-6 * (1.0 + closed.abs()));
        // every nearby point is worse
        prop_assert!(f(closed + 1e-4) > best && f(closed - 1e-4) > best);
    }
}

#[test]
fn cost_to_go_iteration_converges_monotonically() {
    let (gamma, rho) = (0.7, 2.5);
    let fixed = terminal_riccati(gamma, rho);
    for start in [0.0, 10.0 * rho] {
        let mut x: f64 = start;
        let mut gap = (x - fixed).abs();
        for _ in 0..200 {
            let next = rho * (x + gamma) / (x + gamma + rho);
            let next_gap = (next - fixed).abs();
            assert!(next_gap <= gap, "not monotone from {start}");
            assert_eq!((next - fixed).signum(), (x - fixed).signum());
            x = next;
            gap = next_gap;
        }
        assert!(gap < 1e-12);
    }
}

#[test]
fn unit_delays_give_scalar_p() {
    let spec = GraphSpec::uniform(vec![1, 1, 1], 2.0, 0.5, 3).unwrap();
    let params = synthesize(&spec);
    for np in &params.nodes[..3] {
        assert_eq!(np.p.len(), 1);
        assert_eq!(np.p[0], vec![np.x[0] / np.rho]);
        assert!(np.g.is_empty());
        assert_eq!(np.b, np.g_next.unwrap());
    }
}

#[test]
fn single_edge_coupling() {
    let spec = GraphSpec::new(vec![3], vec![1.0, 2.0], vec![0.5, 4.0], 2).unwrap();
    let params = synthesize(&spec);
    let n0 = &params.nodes[0];
    let p_last = n0.p[2][2];
    assert_eq!(n0.h.unwrap(), p_last * n0.g_next.unwrap());
    assert!(params.nodes[1].h.is_none());
}

#[test]
fn golden_ratio_single_node() {
    let spec = GraphSpec::uniform(vec![], 1.0, 1.0, 0).unwrap();
    let params = synthesize(&spec);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    assert!((params.terminal() - phi).abs() < 1e-15);
    assert!((params.nodes[0].x[0] - phi).abs() < 1e-15);
}

#[test]
fn json_spec_synthesis_is_deterministic() {
    let raw = r#"{"n":3,"tau":[2,3],"q":[1.0,0.5,2.0],"r":[3.0,1.0,0.2],"horizon":4}"#;
    let a: GraphSpec = serde_json::from_str(raw).unwrap();
    let b: GraphSpec = serde_json::from_str(raw).unwrap();
    let ra: Vec<u64> = synthesize(&a)
        .rows()
        .iter()
        .map(|r| r.value.to_bits())
        .collect();
    let rb: Vec<u64> = synthesize(&b)
        .rows()
        .iter()
        .map(|r| r.value.to_bits())
        .collect();
    assert_eq!(ra, rb);
}
