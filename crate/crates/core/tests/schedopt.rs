mod fixture;

use latsched::cli::{PCA_MODEL, SBM_MODEL};
use latsched::manifold::ManifoldModel;
use latsched::plant::{PlantParams, PRODUCTION};
use latsched::schedopt::{
    baseline_constant_cost, baseline_setpoints, optimize_schedule, simulate_sbm_schedule, two_tier_prices,
    ScheduleProblem, SolverOptions,
};
use latsched::sysid::SbmBundle;

fn models() -> (SbmBundle, ManifoldModel) {
    let dir = fixture::small_pipeline();
    (fixture::read_artifact(&dir.join(SBM_MODEL)), fixture::read_artifact(&dir.join(PCA_MODEL)))
}

fn two_tier() -> ScheduleProblem {
    ScheduleProblem::from_plant(&PlantParams::default(), two_tier_prices(48))
}

#[test]
fn nominal_hold_tracks_setpoint_after_two_hours() {
    let (bundle, manifold) = models();
    let problem = two_tier();
    let traj = simulate_sbm_schedule(&bundle, &manifold, &problem, &vec![20.0; 48]).unwrap();
    let prod = traj.channel(PRODUCTION).unwrap();
    for (t, x2) in traj.t.iter().zip(&prod).filter(|(t, _)| **t >= 2.0) {
        assert!((x2 - 20.0).abs() <= 0.5, "x2 = {x2} at t = {t}");
    }
}

#[test]
fn horizon_has_481_samples_from_t0() {
    let (bundle, manifold) = models();
    let problem = two_tier();
    let traj = simulate_sbm_schedule(&bundle, &manifold, &problem, &baseline_setpoints(&problem)).unwrap();
    assert_eq!(traj.t.len(), 481);
    assert_eq!(traj.x.len(), 481);
    assert_eq!(traj.storage.len(), 481);
    assert_eq!(traj.t[0], 0.0);
    assert!((traj.t[480] - 48.0).abs() < 1e-9);
}

#[test]
fn storage_is_flat_when_production_matches_demand() {
    let (bundle, manifold) = models();
    let mut problem = two_tier();
    let traj0 = simulate_sbm_schedule(&bundle, &manifold, &problem, &baseline_setpoints(&problem)).unwrap();
    problem.demand = traj0.channel(PRODUCTION).unwrap()[0];
    let traj = simulate_sbm_schedule(&bundle, &manifold, &problem, &baseline_setpoints(&problem)).unwrap();
    for v in &traj.storage {
        assert!((v - problem.initial_storage).abs() < 1e-6, "M = {v}");
    }
}

#[test]
fn rollout_and_solve_are_bit_identical() {
    let (bundle, manifold) = models();
    let problem = two_tier();
    let sp: Vec<f64> = (0..48).map(|h| 16.0 + (h % 9) as f64).collect();
    let a = simulate_sbm_schedule(&bundle, &manifold, &problem, &sp).unwrap();
    let b = simulate_sbm_schedule(&bundle, &manifold, &problem, &sp).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());

    let opts = SolverOptions::default();
    let s1 = optimize_schedule(&bundle, &manifold, &problem, None, &opts).unwrap();
    let s2 = optimize_schedule(&bundle, &manifold, &problem, None, &opts).unwrap();
    assert_eq!(serde_json::to_vec(&s1).unwrap(), serde_json::to_vec(&s2).unwrap());
}

#[test]
fn optimized_cost_never_exceeds_feasible_baseline() {
    let (bundle, manifold) = models();
    let problem = two_tier();
    let sol = optimize_schedule(&bundle, &manifold, &problem, None, &SolverOptions::default()).unwrap();
    let base = baseline_constant_cost(&bundle, &manifold, &problem).unwrap();
    assert!(sol.log.baseline_feasible);
    assert!(sol.feasible);
    assert!(sol.cost <= base + 1e-6, "{} > {base}", sol.cost);
    assert!(sol.setpoints.iter().all(|s| (16.0..=24.0).contains(s)));
    assert_eq!(sol.state_count, bundle.state_count());
}

#[test]
fn unreachable_demand_is_flagged_infeasible() {
    let (bundle, manifold) = models();
    let mut problem = two_tier();
    problem.demand = 25.0;
    let sol = optimize_schedule(&bundle, &manifold, &problem, None, &SolverOptions::default()).unwrap();
    assert!(!sol.feasible);
    assert!(sol.margins.as_array().iter().any(|m| *m < 0.0));
}

#[test]
fn wrong_length_initial_schedule_is_rejected() {
    let (bundle, manifold) = models();
    let problem = two_tier();
    let short = vec![20.0; 47];
    assert!(optimize_schedule(&bundle, &manifold, &problem, Some(&short), &SolverOptions::default()).is_err());
}
