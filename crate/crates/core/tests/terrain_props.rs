mod common;

use proptest::prelude::*;
use stepstone::geometry;
use stepstone::kinematics::{self, KinematicParams};
use stepstone::terrain::{self, GoalSampleParams, TerrainGenParams, TerrainMap};

#[test]
fn ten_thousand_generations_stay_in_bounds() {
    let p = TerrainGenParams { n_removed: 9, ..Default::default() };
    let bx = p.alpha_x * (p.spacing_x / 2.0 - p.stone_radius);
    let by = p.alpha_y * (p.spacing_y / 2.0 - p.stone_radius);
    let (hlo, hhi) = ((1.0 - p.alpha_h) * p.nominal_height, (1.0 + p.alpha_h) * p.nominal_height);
    for seed in 0..10_000u64 {
        let map = terrain::generate_terrain(&p, seed).unwrap();
        assert_eq!(map.removed_count(), 9, "seed {seed}");
        for j in 0..p.grid_ny {
            for i in 0..p.grid_nx {
                let s = map.stone(p.slot_id(i, j)).unwrap();
                let [x, y] = p.slot(i, j);
                assert!((s.center[0] - x).abs() <= bx, "seed {seed} stone {}", s.id);
                assert!((s.center[1] - y).abs() <= by, "seed {seed} stone {}", s.id);
                assert!(hlo <= s.height && s.height <= hhi, "seed {seed} stone {}", s.id);
            }
        }
        for id in p.start_ids() {
            assert!(map.is_alive(id));
        }
    }
}

#[test]
fn generation_is_bit_identical() {
    let p = TerrainGenParams::default();
    for seed in [0, 1, 77, u64::MAX] {
        let a = terrain::generate_terrain(&p, seed).unwrap();
        let b = terrain::generate_terrain(&p, seed).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(TerrainMap::from_json(&a.to_json().unwrap()).unwrap(), a);
    }
}

#[test]
fn sampled_goals_respect_distance_and_stance_rules() {
    let p = TerrainGenParams::default();
    let g = GoalSampleParams::default();
    let kin = KinematicParams::default();
    let mut ok = 0;
    for seed in 0..200 {
        let map = terrain::generate_terrain(&p, seed).unwrap();
        let start = terrain::start_stance(&map).unwrap();
        let Ok(goal) = terrain::sample_goal(&map, &start, &g, &kin, seed) else {
            continue;
        };
        ok += 1;
        let base = kinematics::base_pose_from_stance(&start, &kin).unwrap().position;
        let d = geometry::dist_xy(goal.centroid(), base);
        assert!(g.d_min_g <= d && d <= g.d_max_g, "seed {seed}: {d}");
        let as_stance = kinematics::Stance::on_stones(&map, goal.stone_ids).unwrap();
        assert!(kinematics::check_stance(&as_stance, &kin).is_ok());
    }
    assert!(ok >= 190, "{ok}/200 seeds produced a goal");
}

proptest! {
    #[test]
    fn nearest_stone_matches_linear_scan(seed in 0u64..500, x in -1.2f64..1.2, y in -1.0f64..1.0, z in -0.1f64..0.3) {
        let map = terrain::generate_terrain(&TerrainGenParams::default(), seed).unwrap();
        let (id, d) = map.nearest_alive_stone([x, y, z]).unwrap();
        let (sid, sd) = common::nearest_by_scan(&map, [x, y, z]);
        prop_assert_eq!(id, sid);
        prop_assert!((d - sd).abs() < 1e-12);
    }

    #[test]
    fn removal_count_is_exact(seed in any::<u64>(), n in 0usize..=77) {
        let p = TerrainGenParams { n_removed: n, ..Default::default() };
        let map = terrain::generate_terrain(&p, seed).unwrap();
        prop_assert_eq!(map.removed_count(), n);
    }
}
