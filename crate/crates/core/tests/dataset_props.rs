mod common;

use stepstone::dataset::{self, BaseState, DatasetGenParams, DatasetSample, Jitter};
use stepstone::feasibility::{BuiltinOracle, FeasibilityOracle, GaitSpec, OracleParams};
use stepstone::geometry;
use stepstone::kinematics::{ActionSpec, KinematicParams, Stance};
use stepstone::search::{self, PlannerConfig, SearchParams};
use stepstone::terrain::{self, GoalSpec, TerrainGenParams};
use stepstone::NUM_FEET;

fn small_params(seed: u64) -> DatasetGenParams {
    DatasetGenParams {
        n_env: 2,
        n_goals: 2,
        n_paths: 2,
        n_rand: 2,
        search: SearchParams { max_iterations: 4000, ..Default::default() },
        seed,
        workers: 2,
        ..Default::default()
    }
}

#[test]
fn files_are_consistent_and_reproducible() {
    let params = small_params(21);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = dataset::generate_dataset(&params, a.path()).unwrap();
    let mb = dataset::generate_dataset(&DatasetGenParams { workers: 1, ..params.clone() }, b.path()).unwrap();
    assert_eq!(ma.counts, mb.counts);
    let bytes = |d: &std::path::Path| std::fs::read(d.join(dataset::SAMPLES_FILE)).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));

    let samples = dataset::read_samples(&a.path().join(dataset::SAMPLES_FILE)).unwrap();
    assert!(!samples.is_empty());
    assert_eq!(samples.len(), ma.counts.samples);
    let manifest: dataset::Manifest = serde_json::from_str(&std::fs::read_to_string(a.path().join(dataset::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest, ma);
    assert_eq!(manifest.seeds.envs.len(), params.n_env);

    let n_alive = 81 - params.terrain.n_removed;
    for s in &samples {
        assert_eq!(s.input_vector().len(), 3 * (n_alive + 2 * (NUM_FEET + 1)));
        assert_eq!(s.output_vector().len(), 3 * dataset::HORIZON * NUM_FEET);
        assert!(s.y_projection_dist.iter().all(|&d| d == 0.0));
        // Targets are stone tops, so they appear verbatim among the contacts.
        for y in &s.y {
            assert!(s.x_contact.contains(y), "target {y:?} is not a stone center");
        }
    }
}

fn rigid(s: &Stance, yaw: f64, off: [f64; 3]) -> Stance {
    Stance { foot_stone_ids: s.foot_stone_ids, foot_points: s.foot_points.map(|p| geometry::add(geometry::rotate_z(p, yaw), off)) }
}

fn assert_close(a: &DatasetSample, b: &DatasetSample) {
    let (x, y) = (a.input_vector(), b.input_vector());
    assert_eq!(x.len(), y.len());
    for (p, q) in x.iter().zip(&y) {
        assert!((p - q).abs() < 1e-9, "{p} vs {q}");
    }
    for (p, q) in a.output_vector().iter().zip(&b.output_vector()) {
        assert!((p - q).abs() < 1e-9, "{p} vs {q}");
    }
}

#[test]
fn encoding_ignores_rigid_motions() {
    let kin = KinematicParams::default();
    let oracle = BuiltinOracle::new(OracleParams::default());
    let mut checked = 0;
    for seed in 0..6u64 {
        let map = terrain::generate_terrain(&TerrainGenParams::default(), seed).unwrap();
        let start = terrain::start_stance(&map).unwrap();
        let Ok(goal) = terrain::sample_goal(&map, &start, &Default::default(), &kin, seed) else {
            continue;
        };
        let r = search::plan(&map, &start, &goal, &PlannerConfig::default(), &oracle).unwrap();
        let Some(plan) = r.first() else { continue };
        let base = BaseState { linear_velocity: [0.3, -0.1, 0.2], angular_velocity: [0.0, 0.1, -0.4] };
        for (yaw, off) in [(0.7, [3.0, -2.0, 0.5]), (-2.9, [-10.25, 4.5, -1.0]), (std::f64::consts::PI, [0.0, 0.0, 0.0])] {
            let moved = map.transformed(yaw, off);
            let mgoal = GoalSpec::from_stones(&moved, goal.stone_ids).unwrap();
            for (i, s) in plan.stances[..plan.len()].iter().enumerate() {
                let next: Vec<ActionSpec> =
                    (i..i + dataset::HORIZON).map(|k| plan.actions.get(k).copied().unwrap_or_else(|| ActionSpec::identity(plan.final_stance()))).collect();
                let a = dataset::encode_sample(&map, s, &base, &goal, &next, &kin).unwrap();
                let ms = rigid(s, yaw, off);
                let mbase = BaseState {
                    linear_velocity: geometry::rotate_z(base.linear_velocity, yaw),
                    angular_velocity: geometry::rotate_z(base.angular_velocity, yaw),
                };
                let b = dataset::encode_sample(&moved, &ms, &mbase, &mgoal, &next, &kin).unwrap();
                assert_close(&a, &b);
                checked += 1;
            }
        }
    }
    assert!(checked > 10);
}

#[test]
fn perturbation_acceptance_matches_a_fresh_oracle() {
    let kin = KinematicParams::default();
    let params = OracleParams::default();
    let gait = GaitSpec::jump();
    let jitter = Jitter { contact_radius: 0.04, ..Default::default() };
    let (mut yes, mut no) = (0, 0);
    for seed in 0..8u64 {
        let map = terrain::generate_terrain(&TerrainGenParams::default(), seed).unwrap();
        let start = terrain::start_stance(&map).unwrap();
        let Ok(goal) = terrain::sample_goal(&map, &start, &Default::default(), &kin, seed) else {
            continue;
        };
        let shared = BuiltinOracle::new(params.clone());
        let r = search::plan(&map, &start, &goal, &PlannerConfig::default(), &shared).unwrap();
        let Some(plan) = r.first() else { continue };
        for k in 0..10 {
            let p = dataset::perturb_episode(&map, plan, &gait, &jitter, &params, &kin, &shared, seed * 100 + k).unwrap();
            for (s, orig) in p.episode.stances.iter().zip(&plan.stances) {
                assert_eq!(s.foot_stone_ids, orig.foot_stone_ids);
                for f in 0..NUM_FEET {
                    let c = map.stone(s.foot_stone_ids[f]).unwrap().top();
                    assert!(geometry::dist_xy(s.foot_points[f], c) <= jitter.contact_radius + 1e-12);
                }
            }
            let fresh = BuiltinOracle::new(params.clone()).evaluate(&map, &p.episode.stances, &gait).unwrap();
            assert_eq!(p.accepted, fresh.feasible());
            assert_eq!(p.failed_step, fresh.failed_step);
            if p.accepted {
                yes += 1
            } else {
                no += 1
            }
        }
    }
    assert!(yes > 0 && no > 0, "accepted {yes}, rejected {no}");
}

#[test]
fn projection_matches_linear_scan() {
    let map = terrain::generate_terrain(&TerrainGenParams::default(), 8).unwrap();
    let pts: Vec<[f64; 3]> = (0..200)
        .map(|i| {
            let t = i as f64 * 0.37;
            [t.sin() * 0.9, (1.3 * t).cos() * 0.7, 0.1 + 0.05 * (2.1 * t).sin()]
        })
        .collect();
    let p = dataset::project_to_patch_centers(&pts, &map).unwrap();
    for (i, q) in pts.iter().enumerate() {
        let (id, d) = common::nearest_by_scan(&map, *q);
        assert_eq!(p.stone_ids[i], id);
        assert!((p.distances[i] - d).abs() < 1e-12);
        assert_eq!(p.points[i], map.stone(id).unwrap().top());
    }
}
