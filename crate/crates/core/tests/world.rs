use egoloc_core::world::*;
use proptest::prelude::*;

fn only(counts: &[(&str, usize)]) -> WorldConfig {
    let mut cfg = WorldConfig::default();
    cfg.anchor_counts = counts.iter().map(|(n, c)| (n.to_string(), *c)).collect();
    cfg
}

fn cloud_bytes(c: &ScenePointCloud) -> Vec<u8> {
    let mut buf = Vec::new();
    c.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = WorldConfig::default();
    let (s1, c1) = generate_scene(&cfg, 42).unwrap();
    let (s2, c2) = generate_scene(&cfg, 42).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(cloud_bytes(&c1), cloud_bytes(&c2));
    let (_, c3) = generate_scene(&cfg, 43).unwrap();
    assert_ne!(cloud_bytes(&c1), cloud_bytes(&c3));
}

#[test]
fn open_floor_scene_is_flat() {
    let cfg = only(&[("open_floor", 4)]);
    let (_, cloud) = generate_scene(&cfg, 7).unwrap();
    assert!(!cloud.is_empty());
    assert!(cloud.points.iter().all(|p| p[2] <= 0.05 + 1e-7));
}

#[test]
fn points_stay_inside_scene_volume() {
    let cfg = WorldConfig::default();
    let (scene, cloud) = generate_scene(&cfg, 3).unwrap();
    let l = scene.extent_m as f32;
    for p in &cloud.points {
        assert!((0.0..=l).contains(&p[0]) && (0.0..=l).contains(&p[1]));
        assert!((0.0..=2.5).contains(&p[2]));
    }
    for a in &scene.anchors {
        assert!(a.center.iter().all(|v| (0.0..=scene.extent_m).contains(v)));
    }
    for (i, a) in scene.anchors.iter().enumerate() {
        for b in &scene.anchors[i + 1..] {
            let d = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
            assert!(d >= 0.6);
        }
    }
}

fn anchor_patches(seeds: std::ops::Range<u64>) -> Vec<(String, SegmentPatch)> {
    let cfg = WorldConfig::default();
    let mut out = Vec::new();
    for seed in seeds {
        let (scene, cloud) = generate_scene(&cfg, seed).unwrap();
        for (i, a) in scene.anchors.iter().enumerate() {
            let p = patch_at(&cloud, scene.bounds(), a.center, 1.0, cfg.patch_points, 0, seed * 100 + i as u64);
            out.push((scene.anchor_type(a).name.clone(), p));
        }
    }
    out
}

#[test]
fn mean_patch_height_follows_configured_ranges() {
    let patches = anchor_patches(0..10);
    let types = default_anchor_types();
    let mean_of = |name: &str| {
        let zs: Vec<f64> = patches.iter().filter(|(n, _)| n == name).map(|(_, p)| p.mean_z()).collect();
        zs.iter().sum::<f64>() / zs.len() as f64
    };
    let mut by_range = types.clone();
    by_range.sort_by(|a, b| (a.height_m[0] + a.height_m[1]).total_cmp(&(b.height_m[0] + b.height_m[1])));
    let means: Vec<f64> = by_range.iter().map(|t| mean_of(&t.name)).collect();
    for w in means.windows(2) {
        assert!(w[0] < w[1], "mean heights not ordered: {means:?}");
    }
}

#[test]
fn empty_floor_patch_is_flat_and_full() {
    let cfg = only(&[("sink", 1), ("stove", 1), ("cabinet", 1)]);
    let (scene, cloud) = generate_scene(&cfg, 11).unwrap();
    // find a grid cell far from every anchor
    let grid = cfg.grid();
    let far = (0..grid.num_segments())
        .map(|s| grid.center(s))
        .find(|c| scene.anchors.iter().all(|a| (a.center[0] - c[0]).abs() > 1.6 || (a.center[1] - c[1]).abs() > 1.6))
        .expect("some far cell");
    let sparse = ScenePointCloud { points: Vec::new() };
    let p = patch_at(&sparse, scene.bounds(), far, 1.0, 256, 0, 1);
    assert_eq!(p.points.len(), 256);
    assert!(p.points.iter().all(|q| q[2].abs() <= 0.05));
    let p = patch_at(&cloud, scene.bounds(), far, 1.0, 256, 0, 1);
    assert_eq!(p.points.len(), 256);
    assert!(p.mean_z() < 0.05);
}

#[test]
fn sink_patch_stands_above_floor_patch() {
    let cfg = only(&[("sink", 1), ("open_floor", 2)]);
    let (scene, cloud) = generate_scene(&cfg, 5).unwrap();
    let patch_of = |name: &str| {
        let a = scene.anchors.iter().find(|a| scene.anchor_type(a).name == name).unwrap();
        patch_at(&cloud, scene.bounds(), a.center, 1.0, 256, 0, 9)
    };
    let sink = patch_of("sink");
    let floor = patch_of("open_floor");
    assert!(sink.mean_z() - floor.mean_z() >= 0.15, "{} vs {}", sink.mean_z(), floor.mean_z());
}

#[test]
fn patch_is_deterministic_and_sized() {
    let cfg = WorldConfig::default();
    let (scene, cloud) = generate_scene(&cfg, 2).unwrap();
    let grid = partition(&scene, 20);
    let a = segment_patch(&scene, &cloud, &grid, 123, 1.0, 256);
    let b = segment_patch(&scene, &cloud, &grid, 123, 1.0, 256);
    assert_eq!(a, b);
    assert_eq!(a.points.len(), 256);
    for p in &a.points {
        assert!(p[0].abs() <= 0.5 + 1e-6 && p[1].abs() <= 0.5 + 1e-6);
    }
}

#[test]
fn patch_extraction_is_translation_consistent() {
    let cfg = WorldConfig::default();
    let (scene, cloud) = generate_scene(&cfg, 8).unwrap();
    let shift = [1.25, -0.75];
    let moved = cloud.shifted(shift);
    for (i, a) in scene.anchors.iter().enumerate() {
        let c = a.center;
        let p = patch_at(&cloud, scene.bounds(), c, 1.0, 256, 0, i as u64);
        let q = patch_at(&moved, scene.bounds().shifted(shift), [c[0] + shift[0], c[1] + shift[1]], 1.0, 256, 0, i as u64);
        assert_eq!(p.points.len(), q.points.len());
        // clouds are stored in single precision, so re-centered coordinates
        // agree to f32 rounding
        for (u, v) in p.points.iter().zip(&q.points) {
            for k in 0..3 {
                assert!((u[k] - v[k]).abs() < 1e-5, "{u:?} vs {v:?}");
            }
        }
    }
}

#[test]
fn nearest_segment_matches_exhaustive_search() {
    use rand::{Rng, SeedableRng};
    let grid = SegmentGrid::new(4.0, 20);
    let centers = grid.centers();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let z = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
        let brute = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1[0] - z[0]).powi(2) + (a.1[1] - z[1]).powi(2);
                let db = (b.1[0] - z[0]).powi(2) + (b.1[1] - z[1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap()
            .0;
        let s = nearest_segment(z, &grid);
        assert_eq!(s, brute);
        let c = grid.center(s);
        let d = ((c[0] - z[0]).powi(2) + (c[1] - z[1]).powi(2)).sqrt();
        assert!(d <= grid.cell_side_m * std::f64::consts::SQRT_2 / 2.0 + 1e-12);
    }
}

#[test]
fn cell_centers_and_clamping() {
    let grid = SegmentGrid::new(4.0, 20);
    for s in [0, 17, 200, 399] {
        assert_eq!(nearest_segment(grid.center(s), &grid), s);
    }
    assert_eq!(nearest_segment([0.0, 0.0], &grid), 0);
    assert_eq!(nearest_segment([4.0 - 1e-9, 4.0 - 1e-9], &grid), 399);
    assert_eq!(nearest_segment([4.1, 2.1], &grid), 10 * 20 + 19);
    assert_eq!(nearest_segment([-0.1, -0.1], &grid), 0);
}

#[test]
fn partition_tiles_floor_exactly() {
    for (l, g) in [(4.0, 20), (2.5, 7), (6.5, 13), (3.0, 2)] {
        let grid = SegmentGrid::new(l, g);
        // cell areas from the integer boundaries, summed per cell
        let area: f64 = (0..grid.num_segments())
            .map(|s| {
                let (row, col) = (s / g, s % g);
                let w = (col + 1) as f64 * l / g as f64 - col as f64 * l / g as f64;
                let h = (row + 1) as f64 * l / g as f64 - row as f64 * l / g as f64;
                w * h
            })
            .sum();
        assert!((area - l * l).abs() < 1e-9);
        // every probe lands in exactly one cell
        let n = 97;
        let mut counts = vec![0usize; grid.num_segments()];
        for i in 0..n {
            for j in 0..n {
                let z = [(i as f64 + 0.5) * l / n as f64, (j as f64 + 0.5) * l / n as f64];
                counts[grid.segment_of(z)] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), n * n);
    }
}

#[test]
fn anchor_types_separable_by_height_statistics() {
    let train = anchor_patches(0..12);
    let test = anchor_patches(100..112);
    let feat = |p: &SegmentPatch| [p.mean_z(), p.var_z()];
    let correct = test
        .iter()
        .filter(|(name, p)| {
            let f = feat(p);
            let nearest = train
                .iter()
                .min_by(|a, b| {
                    let fa = feat(&a.1);
                    let fb = feat(&b.1);
                    let da = (fa[0] - f[0]).powi(2) + (fa[1] - f[1]).powi(2);
                    let db = (fb[0] - f[0]).powi(2) + (fb[1] - f[1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            &nearest.0 == name
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.8, "1-NN anchor-type accuracy {acc}");
}

#[test]
fn scene_json_round_trip() {
    let (scene, cloud) = generate_scene(&WorldConfig::default(), 4).unwrap();
    let text = serde_json::to_string(&scene).unwrap();
    let back: Scene = serde_json::from_str(&text).unwrap();
    assert_eq!(scene, back);
    let bytes = cloud_bytes(&cloud);
    assert_eq!(bytes.len(), 8 + cloud.len() * 12);
    assert_eq!(ScenePointCloud::read_from(&bytes[..]).unwrap(), cloud);
}

proptest! {
    #[test]
    fn segment_index_in_range(x in -1.0f64..7.0, y in -1.0f64..7.0, g in 2usize..30, l in 2.5f64..6.5) {
        let grid = SegmentGrid::new(l, g);
        let s = grid.segment_of([x, y]);
        prop_assert!(s < grid.num_segments());
        if (0.0..l).contains(&x) && (0.0..l).contains(&y) {
            let c = grid.center(s);
            prop_assert!((c[0] - x).abs() <= grid.cell_side_m / 2.0 + 1e-9);
            prop_assert!((c[1] - y).abs() <= grid.cell_side_m / 2.0 + 1e-9);
        }
    }
}
