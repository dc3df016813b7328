use std::time::Duration;

use proptest::prelude::*;
use stepstone::feasibility::{self, BuiltinOracle, ExternalOracle, FeasibilityOracle, GaitSpec, OracleParams, PlanDocument};
use stepstone::kinematics::{self, KinematicParams, Stance};
use stepstone::terrain::{self, TerrainGenParams, TerrainMap};
use stepstone::{Error, Vec3};

fn rect(c: Vec3) -> [Vec3; 4] {
    kinematics::nominal_offsets(0.2, 0.15).map(|o| [c[0] + o[0], c[1] + o[1], c[2]])
}

fn stance(ids: [u32; 4], c: Vec3) -> Stance {
    Stance { foot_stone_ids: ids, foot_points: rect(c) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn shorter_transitions_stay_feasible(
        dx in -0.3f64..0.3, dy in -0.3f64..0.3, dz in -0.15f64..0.15,
        shrink in 0.0f64..1.0,
        trot in any::<bool>(),
    ) {
        let gait = if trot { GaitSpec::trot() } else { GaitSpec::jump() };
        let params = OracleParams::default();
        let pre = stance([0, 1, 2, 3], [0.0, 0.0, 0.1]);
        // Trot moves only one diagonal pair; the other stays put.
        let make = |k: f64| {
            let mut post = stance([4, 5, 6, 7], [k * dx, k * dy, 0.1 + k * dz]);
            if trot {
                for f in [1, 2] {
                    post.foot_stone_ids[f] = pre.foot_stone_ids[f];
                    post.foot_points[f] = pre.foot_points[f];
                }
            }
            post
        };
        let big = feasibility::check_step(&pre, &make(1.0), &gait, &params);
        let small = feasibility::check_step(&pre, &make(shrink), &gait, &params);
        if big.feasible {
            prop_assert!(small.feasible, "{:?}", small.first_failure());
        }
    }

    #[test]
    fn verdicts_are_pure(dx in -0.3f64..0.3, dz in -0.1f64..0.1) {
        let gait = GaitSpec::jump();
        let pre = stance([0, 1, 2, 3], [0.0, 0.0, 0.1]);
        let post = stance([4, 5, 6, 7], [dx, 0.0, 0.1 + dz]);
        let a = feasibility::check_step(&pre, &post, &gait, &OracleParams::default());
        let b = feasibility::check_step(&pre, &post, &gait, &OracleParams::default());
        prop_assert_eq!(a, b);
    }
}

fn walk(map: &TerrainMap, n: usize) -> Vec<Stance> {
    let kin = KinematicParams::default();
    let gait = GaitSpec::jump();
    let mut out = vec![terrain::start_stance(map).unwrap()];
    for i in 0..n {
        let s = out.last().unwrap().clone();
        let acts = kinematics::enumerate_actions(&s, map, &kin, &gait);
        out.push(s.apply(map, &acts[(i * 37) % acts.len()]).unwrap());
    }
    out
}

#[test]
fn plan_verdict_is_the_conjunction_of_steps_and_cache_is_transparent() {
    let gait = GaitSpec::jump();
    let params = OracleParams::default();
    let cached = BuiltinOracle::new(params.clone());
    for seed in 0..40 {
        let map = terrain::generate_terrain(&TerrainGenParams::default(), seed).unwrap();
        let stances = walk(&map, 4);
        let each: Vec<bool> = stances.windows(2).map(|w| feasibility::check_step(&w[0], &w[1], &gait, &params).feasible).collect();
        let first = cached.evaluate(&map, &stances, &gait).unwrap();
        let again = cached.evaluate(&map, &stances, &gait).unwrap();
        let fresh = BuiltinOracle::new(params.clone()).evaluate(&map, &stances, &gait).unwrap();
        assert_eq!(first, again);
        assert_eq!(first, fresh);
        assert_eq!(first.feasible(), each.iter().all(|&f| f));
        assert_eq!(first.failed_step, each.iter().position(|&f| !f));
    }
}

#[test]
fn cache_separates_parameter_sets() {
    let gait = GaitSpec::jump();
    let map = terrain::generate_terrain(&TerrainGenParams { n_removed: 0, ..Default::default() }, 3).unwrap();
    let s = terrain::start_stance(&map).unwrap();
    let far = Stance::on_stones(&map, s.foot_stone_ids.map(|id| id + 1)).unwrap();
    let strict = BuiltinOracle::new(OracleParams { v_takeoff_max: 0.5, ..Default::default() });
    let loose = BuiltinOracle::new(OracleParams::permissive());
    let pair = [s, far];
    assert!(!strict.evaluate(&map, &pair, &gait).unwrap().feasible());
    assert!(loose.evaluate(&map, &pair, &gait).unwrap().feasible());
}

fn problem() -> (TerrainMap, Vec<Stance>) {
    let map = terrain::generate_terrain(&TerrainGenParams { grid_nx: 5, grid_ny: 5, n_removed: 0, ..Default::default() }, 1).unwrap();
    let stances = walk(&map, 2);
    (map, stances)
}

#[test]
fn external_oracle_verdicts() {
    let (map, stances) = problem();
    let gait = GaitSpec::jump();
    let yes = ExternalOracle::new(r#"cat >/dev/null; echo '{"feasible":true}'"#, Duration::from_secs(5));
    assert!(yes.evaluate(&map, &stances, &gait).unwrap().feasible());
    let no = ExternalOracle::new(r#"cat >/dev/null; echo '{"feasible":false,"failed_step":1,"diagnostics":{"why":"slip"}}'"#, Duration::from_secs(5));
    let v = no.evaluate(&map, &stances, &gait).unwrap();
    assert!(!v.feasible());
    assert_eq!(v.failed_step, Some(1));
}

#[test]
fn external_oracle_sees_the_plan_document() {
    let (map, stances) = problem();
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("doc.json");
    let cmd = format!(r#"cat > '{}'; echo '{{"feasible":true}}'"#, dump.display());
    ExternalOracle::new(cmd, Duration::from_secs(5)).evaluate(&map, &stances, &GaitSpec::jump()).unwrap();
    let doc: PlanDocument = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(doc.version, feasibility::PLAN_FORMAT_VERSION);
    assert_eq!(doc.terrain_map().unwrap(), map);
    assert_eq!(doc.actions.len(), 2);
    assert_eq!(doc.actions[1], stances[2].foot_stone_ids);
    assert_eq!(Stance::from(&doc.start_stance), stances[0]);
}

#[test]
fn external_oracle_failures() {
    let (map, stances) = problem();
    let gait = GaitSpec::jump();
    let slow = ExternalOracle::new("sleep 5", Duration::from_millis(200));
    let t = std::time::Instant::now();
    assert!(matches!(slow.evaluate(&map, &stances, &gait), Err(Error::OracleUnavailable(_))));
    assert!(t.elapsed() < Duration::from_secs(3));
    let garbage = ExternalOracle::new("cat >/dev/null; echo not-json", Duration::from_secs(5));
    assert!(matches!(garbage.evaluate(&map, &stances, &gait), Err(Error::OracleUnavailable(_))));
    let crash = ExternalOracle::new("cat >/dev/null; exit 3", Duration::from_secs(5));
    assert!(matches!(crash.evaluate(&map, &stances, &gait), Err(Error::OracleUnavailable(_))));

    let fallback = BuiltinOracle::new(OracleParams::default());
    let expected = fallback.evaluate(&map, &stances, &gait).unwrap();
    let rescued = ExternalOracle::new("cat >/dev/null; echo not-json", Duration::from_secs(5)).with_fallback(BuiltinOracle::new(OracleParams::default()));
    assert_eq!(rescued.evaluate(&map, &stances, &gait).unwrap(), expected);
}
