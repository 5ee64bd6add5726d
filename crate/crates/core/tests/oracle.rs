use nalgebra::DVector;
use pathflow::instances::{random_instance, random_spec, random_state, rng_for, InstanceRanges};
use pathflow::ledger::DisturbancePlan;
use pathflow::model::{plant_step, ControlDecision, GraphSpec, PlantState};
use pathflow::oracle::{
    build_augmented_system, check_cost_decomposition, level_spread_residual,
    production_spread_residual, shifted_aggregates, DenseOracle, Trajectory,
};
use pathflow::sim::{run_closed_loop, Duration, Knowledge};
use pathflow::synthesis::synthesize;
use pathflow::Error;
use rand::Rng;

fn small() -> InstanceRanges {
    InstanceRanges {
        nodes: (1, 4),
        ..InstanceRanges::default()
    }
}

/// Cost of an arbitrary input sequence, with the stationary terminal cost.
fn cost_of(
    oracle: &DenseOracle,
    init: &PlantState,
    plan: &DisturbancePlan,
    inputs: &[ControlDecision],
) -> f64 {
    let spec = oracle.spec();
    let mut traj = Trajectory::new(spec, init).unwrap();
    for (s, w) in inputs.iter().enumerate() {
        traj.push(w, &plan.at(spec.n(), init.t + s as i64)).unwrap();
    }
    traj.cost() + oracle.cost_to_go(traj.last_state())
}

#[test]
fn augmented_dimensions() {
    let single = GraphSpec::uniform(vec![], 1.0, 1.0, 0).unwrap();
    let sys = build_augmented_system(&single);
    assert_eq!((sys.dim(), sys.inputs()), (1, 1));
    let chain = GraphSpec::uniform(vec![3, 2, 5, 4], 1.0, 1.0, 15).unwrap();
    let sys = build_augmented_system(&chain);
    assert_eq!((sys.dim(), sys.inputs()), (19, 9));
}

#[test]
fn matrix_step_matches_plant_step() {
    let mut rng = rng_for(31);
    for _ in 0..30 {
        let spec = random_spec(&mut rng, &InstanceRanges::default());
        let sys = build_augmented_system(&spec);
        let state = random_state(&mut rng, &spec, 1.0);
        let w: Vec<f64> = (0..sys.inputs())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let d: Vec<f64> = (0..spec.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action = ControlDecision::from_slice(&spec, &w);
        let direct = plant_step(&spec, &state, &action, &d)
            .unwrap()
            .to_augmented();
        let matrix = sys.step(
            &DVector::from_vec(state.to_augmented()),
            &DVector::from_vec(w),
            &DVector::from_vec(d),
        );
        for (a, b) in direct.iter().zip(matrix.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_problem_has_zero_solution() {
    let spec = GraphSpec::uniform(vec![2, 3], 1.0, 1.0, 2).unwrap();
    let oracle = DenseOracle::new(&spec).unwrap();
    let sol = oracle
        .solve(
            &PlantState::zero(&spec),
            &DisturbancePlan::new(),
            oracle.default_length(),
        )
        .unwrap();
    assert_eq!(sol.cost, 0.0);
    assert!(sol
        .inputs
        .iter()
        .all(|w| w.to_vec().iter().all(|&x| x == 0.0)));
}

#[test]
fn undisturbed_first_input_is_stationary_feedback() {
    let mut rng = rng_for(32);
    for _ in 0..15 {
        let spec = random_spec(&mut rng, &small());
        let oracle = DenseOracle::new(&spec).unwrap();
        let init = random_state(&mut rng, &spec, 1.0);
        let sol = oracle
            .solve(&init, &DisturbancePlan::new(), oracle.default_length())
            .unwrap();
        let dense = oracle.stationary_action(&init).to_vec();
        for (a, b) in sol.first().to_vec().iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
        let reference = oracle.cost_to_go(&init);
        assert!((sol.cost - reference).abs() <= 1e-8 * reference.max(1.0));
    }
}

#[test]
fn optimum_survives_random_perturbations() {
    let mut rng = rng_for(33);
    let inst = random_instance(&mut rng, &small());
    let oracle = DenseOracle::new(&inst.spec).unwrap();
    let sol = oracle
        .solve(&inst.init, &inst.plan, oracle.default_length())
        .unwrap();
    let base = cost_of(&oracle, &inst.init, &inst.plan, &sol.inputs);
    assert!((base - sol.cost).abs() <= 1e-9 * sol.cost.max(1.0));
    for _ in 0..100 {
        let size = 10f64.powf(rng.gen_range(-4.0..0.0));
        let perturbed: Vec<ControlDecision> = sol
            .inputs
            .iter()
            .map(|w| {
                let v: Vec<f64> = w
                    .to_vec()
                    .iter()
                    .map(|x| x + size * rng.gen_range(-1.0..1.0))
                    .collect();
                ControlDecision::from_slice(&inst.spec, &v)
            })
            .collect();
        let cost = cost_of(&oracle, &inst.init, &inst.plan, &perturbed);
        assert!(
            cost >= base - 1e-10 * base.max(1.0),
            "perturbation lowered cost: {cost} < {base}"
        );
    }
}

#[test]
fn production_feedback_is_dense() {
    let spec = GraphSpec::new(
        vec![2, 1, 3],
        vec![1.0, 2.0, 0.5, 1.0],
        vec![1.0, 0.3, 2.0, 1.0],
        2,
    )
    .unwrap();
    let oracle = DenseOracle::new(&spec).unwrap();
    let k = &oracle.stationary().k;
    let n = spec.n();
    // rows n-1.. are the productions; every one reacts to every level
    for row in n - 1..2 * n - 1 {
        for col in 0..n {
            assert!(
                k[(row, col)].abs() > 1e-12,
                "K[{row},{col}] = {}",
                k[(row, col)]
            );
        }
    }
}

#[test]
fn first_action_is_insensitive_to_horizon_length() {
    let mut rng = rng_for(34);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, &small());
        let oracle = DenseOracle::new(&inst.spec).unwrap();
        let len = oracle.default_length();
        let a = oracle.solve(&inst.init, &inst.plan, len).unwrap();
        let b = oracle.solve(&inst.init, &inst.plan, 2 * len).unwrap();
        for (x, y) in a.first().to_vec().iter().zip(&b.first().to_vec()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn too_short_horizon_is_rejected() {
    let spec = GraphSpec::uniform(vec![2, 3], 1.0, 1.0, 4).unwrap();
    let oracle = DenseOracle::new(&spec).unwrap();
    let err = oracle
        .solve(&PlantState::zero(&spec), &DisturbancePlan::new(), 9)
        .unwrap_err();
    assert_eq!(err, Error::InvalidHorizon { t: 9, required: 9 });
    assert!(oracle
        .solve(&PlantState::zero(&spec), &DisturbancePlan::new(), 10)
        .is_ok());
}

/// Two runs with identical productions and disturbances but unrelated flows.
fn twin_runs(rng: &mut impl Rng, spec: &GraphSpec, steps: usize) -> (Trajectory, Trajectory) {
    let init = random_state(rng, spec, 1.0);
    let mut a = Trajectory::new(spec, &init).unwrap();
    let mut b = Trajectory::new(spec, &init).unwrap();
    let n = spec.n();
    for _ in 0..steps {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut flows = || -> Vec<f64> { (0..n - 1).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        let (ua, ub) = (flows(), flows());
        a.push(
            &ControlDecision {
                u: ua,
                v: v.clone(),
            },
            &d,
        )
        .unwrap();
        b.push(&ControlDecision { u: ub, v }, &d).unwrap();
    }
    (a, b)
}

#[test]
fn shifted_levels_ignore_future_flows() {
    let mut rng = rng_for(35);
    for _ in 0..20 {
        let spec = random_spec(&mut rng, &InstanceRanges::default());
        let steps = spec.sigma_top() + 5;
        let (a, b) = twin_runs(&mut rng, &spec, steps);
        let (sa, sb) = (shifted_aggregates(&a), shifted_aggregates(&b));
        for k in 0..spec.n() {
            for t in sa.flow_invariant_times(k) {
                let diff = (sa.s(k, t).unwrap() - sb.s(k, t).unwrap()).abs();
                assert!(diff <= 1e-9, "k={k} t={t}: {diff}");
            }
        }
    }
}

#[test]
fn shifted_step_identity_holds_for_any_inputs() {
    let mut rng = rng_for(36);
    for _ in 0..10 {
        let spec = random_spec(&mut rng, &InstanceRanges::default());
        let (a, _) = twin_runs(&mut rng, &spec, spec.sigma_top() + 10);
        let agg = shifted_aggregates(&a);
        for k in 0..spec.n() {
            for t in spec.sigma()[k] as i64..a.len() as i64 {
                assert!(agg.step_residual(k, t).unwrap().abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn optimal_loop_spreads_and_decomposes_cost() {
    let mut rng = rng_for(37);
    for case in 0..15 {
        let inst = random_instance(&mut rng, &small());
        let params = synthesize(&inst.spec);
        let steps = inst.spec.sigma_top() + inst.spec.horizon() + 60;
        let run = run_closed_loop(
            &inst.spec,
            &params,
            &inst.init,
            &inst.plan,
            Knowledge::Upfront,
            Duration::Steps(steps),
        )
        .unwrap();
        let report = check_cost_decomposition(&run.trajectory, &params).unwrap();
        assert!(report.max_residual() <= 1e-8, "case {case}: {report:?}");
        assert!(level_spread_residual(&run.trajectory, &params).unwrap() <= 1e-8);
        assert!(production_spread_residual(&run.trajectory, &params).unwrap() <= 1e-8);
    }
}
