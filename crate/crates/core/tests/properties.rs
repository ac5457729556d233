use apnet_core::aerial::{complete_image, pixel_of, project_to_aerial, RasterGeometry};
use apnet_core::io::{parse_xyzrgbl, write_xyzrgbl};
use apnet_core::sampling::{grid_cell, grid_downsample};
use apnet_core::spatial::dist2;
use apnet_core::{crop, BoundingRegion, LabeledPointCloud, SpatialIndex};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud_strategy(max_points: usize, extent: f64) -> impl Strategy<Value = LabeledPointCloud> {
    prop::collection::vec(
        ((-extent..extent), (-extent..extent), (-extent..extent), (0.0..=1.0f64), 0usize..5),
        0..max_points,
    )
    .prop_map(|pts| {
        LabeledPointCloud::new(
            pts.iter().map(|p| [p.0, p.1, p.2]).collect(),
            pts.iter().map(|p| [p.3, 1.0 - p.3, p.3 * 0.5]).collect(),
            Some(pts.iter().map(|p| p.4).collect()),
            5,
        )
        .unwrap()
    })
}

fn brute_radius(points: &[[f64; 3]], q: &[f64; 3], r: f64, cap: usize) -> Vec<usize> {
    let mut hits: Vec<(f64, usize)> =
        points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)).filter(|(d, _)| *d <= r * r).collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.into_iter().take(cap).map(|(_, i)| i).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pixel_center_reprojects(u in 0usize..2048, v in 0usize..2048, s in 0.005..2.0f64,
                               x0 in -500.0..500.0f64, y0 in -500.0..500.0f64) {
        let g = RasterGeometry::new(s, [x0, y0], 2048, 2048).unwrap();
        let [cx, cy] = g.pixel_center(u, v);
        prop_assert_eq!(pixel_of(cx, cy, s, [x0, y0]), (u as i64, v as i64));
        let (fu, fv) = g.sample_coord(cx, cy);
        prop_assert!((fu - u as f64).abs() < 1e-6 && (fv - v as f64).abs() < 1e-6);
    }

    #[test]
    fn quantization_brackets_the_point(x in -50.0..50.0f64, y in -50.0..50.0f64, s in 0.01..1.0f64) {
        let (u, v) = pixel_of(x, y, s, [0.0, 0.0]);
        prop_assert!(u as f64 <= x / s && x / s < u as f64 + 1.0);
        prop_assert!(v as f64 <= y / s && y / s < v as f64 + 1.0);
    }

    #[test]
    fn completion_is_monotone_and_keeps_valid_pixels(cloud in cloud_strategy(60, 0.4), passes in 0usize..4) {
        let g = RasterGeometry::new(0.04, [-0.4, -0.4], 20, 20).unwrap();
        let raw = project_to_aerial(&cloud, g);
        let mut prev = raw.clone();
        for p in 1..=passes {
            let next = complete_image(&raw, p);
            for k in 0..raw.valid.len() {
                prop_assert!(!prev.valid[k] || next.valid[k]);
                if raw.valid[k] {
                    prop_assert_eq!(&next.data[3 * k..3 * k + 3], &raw.data[3 * k..3 * k + 3]);
                    prop_assert_eq!(next.labels.as_ref().unwrap()[k], raw.labels.as_ref().unwrap()[k]);
                    prop_assert_eq!(next.heights[k].to_bits(), raw.heights[k].to_bits());
                }
            }
            prev = next;
        }
    }

    #[test]
    fn completion_reaches_fixpoint(cloud in cloud_strategy(40, 0.2)) {
        let g = RasterGeometry::new(0.04, [-0.2, -0.2], 10, 10).unwrap();
        let raw = project_to_aerial(&cloud, g);
        // Every pass before the fixpoint adds at least one pixel.
        let settled = complete_image(&raw, 100);
        prop_assert_eq!(complete_image(&settled, 1), settled);
    }

    #[test]
    fn distinct_pixels_give_one_valid_pixel_per_point(n in 0usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<usize> = (0..400).collect();
        for i in 0..n {
            let j = rng.gen_range(i..400);
            cells.swap(i, j);
        }
        let pts: Vec<[f64; 3]> = cells[..n]
            .iter()
            .map(|&c| [(c % 20) as f64 * 0.04 + rng.gen_range(0.001..0.039), (c / 20) as f64 * 0.04 + 0.02, rng.gen()])
            .collect();
        let cloud = LabeledPointCloud::new(pts, vec![[0.5; 3]; n], None, 1).unwrap();
        let r = project_to_aerial(&cloud, RasterGeometry::new(0.04, [0.0, 0.0], 20, 20).unwrap());
        prop_assert_eq!(r.valid_count(), n);
    }

    #[test]
    fn downsample_containment_and_partition(cloud in cloud_strategy(80, 3.0), d in 0.05..1.0f64) {
        let down = grid_downsample(&cloud, d).unwrap();
        prop_assert!(down.len() <= cloud.len());
        prop_assert_eq!(down.member_counts.iter().sum::<usize>(), cloud.len());
        prop_assert_eq!(down.cell_of_original.len(), cloud.len());
        for (i, p) in cloud.positions().iter().enumerate() {
            let j = down.cell_of_original[i];
            prop_assert_eq!(grid_cell(p, d), down.cells[j]);
            prop_assert_eq!(grid_cell(&down.positions[j], d), down.cells[j]);
        }
    }

    #[test]
    fn downsample_is_idempotent(cloud in cloud_strategy(80, 3.0), d in 0.05..1.0f64) {
        let once = grid_downsample(&cloud, d).unwrap();
        let twice = grid_downsample(&once.as_cloud(), d).unwrap();
        prop_assert_eq!(&twice.cells, &once.cells);
        for (a, b) in twice.positions.iter().zip(&once.positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn radius_query_matches_linear_scan(
        pts in prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), 0..120),
        q in prop::array::uniform3(-2.5..2.5f64),
        r in 0.0..1.5f64,
        bucket in 0.1..1.0f64,
        cap in 1usize..40,
    ) {
        let idx = SpatialIndex::build(&pts, bucket).unwrap();
        prop_assert_eq!(idx.radius_neighbors(&q, r, cap), brute_radius(&pts, &q, r, cap));
    }

    #[test]
    fn nearest_matches_linear_scan(
        pts in prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), 1..120),
        q in prop::array::uniform3(-20.0..20.0f64),
        k in 1usize..8,
    ) {
        let idx = SpatialIndex::build(&pts, 0.5).unwrap();
        let brute = brute_radius(&pts, &q, f64::INFINITY, k);
        prop_assert_eq!(idx.k_nearest(&q, k), brute.clone());
        prop_assert_eq!(idx.nearest_neighbor(&q).unwrap(), brute[0]);
    }

    #[test]
    fn crop_is_idempotent(cloud in cloud_strategy(50, 2.0), a in -2.0..2.0f64, b in -2.0..2.0f64, w in 0.0..3.0f64) {
        let region = BoundingRegion::new([a, b], [a + w, b + w]).unwrap();
        let once = crop(&cloud, &region);
        prop_assert_eq!(crop(&once, &region), once.clone());
        let expected: Vec<[f64; 3]> = cloud
            .positions()
            .iter()
            .filter(|p| a <= p[0] && p[0] < a + w && b <= p[1] && p[1] < b + w)
            .copied()
            .collect();
        prop_assert_eq!(once.positions(), &expected[..]);
    }

    #[test]
    fn text_round_trip(cloud in cloud_strategy(30, 1e4)) {
        let mut buf = Vec::new();
        write_xyzrgbl(&cloud, &mut buf).unwrap();
        prop_assert_eq!(parse_xyzrgbl(&buf[..]).unwrap(), cloud);
    }
}

#[test]
fn crop_selects_planted_points_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inside = [1, 4, 6, 9];
    let pts: Vec<[f64; 3]> = (0..10)
        .map(|i| {
            let (x, y) = if inside.contains(&i) {
                (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
            } else {
                (rng.gen_range(1.0..5.0), rng.gen_range(-5.0..5.0))
            };
            [x, y, rng.gen()]
        })
        .collect();
    let cloud = LabeledPointCloud::new(pts.clone(), vec![[0.0; 3]; 10], Some((0..10).collect()), 10).unwrap();
    let out = crop(&cloud, &BoundingRegion::new([0.0, 0.0], [1.0, 1.0]).unwrap());
    assert_eq!(out.labels(), Some(&inside[..]));
    let oracle: Vec<[f64; 3]> =
        pts.iter().filter(|p| (0.0..1.0).contains(&p[0]) && (0.0..1.0).contains(&p[1])).copied().collect();
    assert_eq!(out.positions(), &oracle[..]);
}

#[test]
fn nearest_neighbor_of_100_random_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts: Vec<[f64; 3]> = (0..100).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen()]).collect();
    let idx = SpatialIndex::build(&pts, 0.5).unwrap();
    for _ in 0..200 {
        let q = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-1.0..2.0)];
        assert_eq!(idx.nearest_neighbor(&q).unwrap(), brute_radius(&pts, &q, f64::INFINITY, 1)[0]);
    }
}
