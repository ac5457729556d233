mod common;

use apnet_autograd::{Graph, ParamStore, Tensor};
use apnet_core::Point3;
use apnet_model::branch::FUSION_GROUP;
use apnet_model::{ABranch, BranchConfig, PBranch, PointInput, SegHead};
use common::{check_model, project, random_tensor, rng};
use rand::Rng;

fn tiny_config() -> BranchConfig {
    BranchConfig {
        channels: 3,
        a_widths: vec![2, 3],
        p_widths: vec![3],
        p_neighbors: 3,
        p_candidates: 5,
        p_index_cell: 0.5,
        twice_forward_sum: true,
        head_layers: 2,
    }
}

fn randomize(store: &mut ParamStore, r: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.tensor_mut(id).data_mut() {
            *x = r.gen_range(-0.8..0.8);
        }
    }
}

fn random_points(r: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n).map(|_| [r.gen_range(0.0..extent), r.gen_range(0.0..extent), r.gen_range(0.0..extent / 4.0)]).collect()
}

#[test]
fn a_branch_shape_and_determinism() {
    let cfg = BranchConfig::default();
    let mut store = ParamStore::new();
    let a = ABranch::new(&mut store, &cfg, 3, &mut rng(1));
    let image = random_tensor(&mut rng(2), vec![16, 24, 3], 1.0);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let y = a.forward(&mut g, &store, x).unwrap();
        g.value(y).clone()
    };
    let y = run();
    assert_eq!(y.shape(), &[16, 24, 32]);
    assert_eq!(y.data(), run().data());

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![10, 16, 3]));
    assert!(a.forward(&mut g, &store, x).is_err());
}

#[test]
fn a_branch_is_translation_consistent_away_from_borders() {
    // Shifting the image by a multiple of the pooling stride shifts the
    // interior of the output by the same amount.
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let a = ABranch::new(&mut store, &cfg, 3, &mut rng(4));
    randomize(&mut store, &mut rng(5));
    let (side, crop_side) = (40, 32);
    let big = random_tensor(&mut rng(6), vec![side, side, 3], 1.0);
    let crop = |dy: usize, dx: usize| {
        let mut data = Vec::new();
        for v in dy..dy + crop_side {
            for u in dx..dx + crop_side {
                data.extend_from_slice(&big.data()[(v * side + u) * 3..(v * side + u + 1) * 3]);
            }
        }
        Tensor::new(vec![crop_side, crop_side, 3], data).unwrap()
    };
    let run = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = a.forward(&mut g, &store, x).unwrap();
        g.value(y).clone()
    };
    let (y0, y1) = (run(crop(0, 0)), run(crop(2, 4)));
    for v in 10..20 {
        for u in 10..20 {
            for c in 0..3 {
                let a0 = y0.data()[((v + 2) * crop_side + u + 4) * 3 + c];
                let a1 = y1.data()[(v * crop_side + u) * 3 + c];
                assert!((a0 - a1).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn p_branch_shape_and_seeded_determinism() {
    let cfg = BranchConfig::default();
    let mut store = ParamStore::new();
    let p = PBranch::new(&mut store, &cfg, 6, &mut rng(1));
    let mut r = rng(2);
    let pos = random_points(&mut r, 80, 4.0);
    let feats = random_tensor(&mut r, vec![80, 6], 1.0);
    let run = |seeds| {
        let mut g = Graph::new();
        let y = p.forward(&mut g, &store, PointInput { positions: &pos, features: &feats }, seeds).unwrap();
        g.value(y).clone()
    };
    let y = run([3, 4]);
    assert_eq!(y.shape(), &[80, 32]);
    assert_eq!(y.data(), run([3, 4]).data());
    assert_ne!(y.data(), run([5, 6]).data());
}

#[test]
fn p_branch_single_point() {
    let mut store = ParamStore::new();
    let p = PBranch::new(&mut store, &BranchConfig::default(), 6, &mut rng(1));
    let pos = vec![[1.0, 2.0, 3.0]];
    let feats = random_tensor(&mut rng(2), vec![1, 6], 1.0);
    let mut g = Graph::new();
    let y = p.forward(&mut g, &store, PointInput { positions: &pos, features: &feats }, [0, 1]).unwrap();
    assert_eq!(g.shape(y), &[1, 32]);
    assert!(g.value(y).is_finite());
}

#[test]
fn p_branch_is_permutation_equivariant_without_sampling() {
    // With as many candidates as neighbours the draw is deterministic, so
    // permuting the input permutes the output rows.
    let cfg = BranchConfig { p_candidates: 8, p_neighbors: 8, ..BranchConfig::default() };
    let mut store = ParamStore::new();
    let p = PBranch::new(&mut store, &cfg, 6, &mut rng(1));
    let mut r = rng(7);
    let pos = random_points(&mut r, 40, 3.0);
    let feats = random_tensor(&mut r, vec![40, 6], 1.0);
    let perm: Vec<usize> = (0..40).map(|i| (i * 17 + 5) % 40).collect();
    let pos2: Vec<Point3> = perm.iter().map(|&i| pos[i]).collect();
    let feats2 = Tensor::new(vec![40, 6], perm.iter().flat_map(|&i| feats.row(i).to_vec()).collect()).unwrap();
    let mut g = Graph::new();
    let y = p.forward(&mut g, &store, PointInput { positions: &pos, features: &feats }, [0, 1]).unwrap();
    let y2 = p.forward(&mut g, &store, PointInput { positions: &pos2, features: &feats2 }, [9, 9]).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for (a, b) in g.value(y).row(old).iter().zip(g.value(y2).row(new)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn twice_forward_with_equal_seeds_doubles_single_pass() {
    let mut r = rng(3);
    let pos = random_points(&mut r, 50, 3.0);
    let feats = random_tensor(&mut r, vec![50, 6], 1.0);
    let twice = BranchConfig::default();
    let once = BranchConfig { twice_forward_sum: false, ..BranchConfig::default() };
    let mut s1 = ParamStore::new();
    let p1 = PBranch::new(&mut s1, &twice, 6, &mut rng(1));
    let mut s2 = ParamStore::new();
    let p2 = PBranch::new(&mut s2, &once, 6, &mut rng(1));
    let mut g = Graph::new();
    let input = PointInput { positions: &pos, features: &feats };
    let y1 = p1.forward(&mut g, &s1, input, [11, 11]).unwrap();
    let y2 = p2.forward(&mut g, &s2, input, [11, 99]).unwrap();
    for (a, b) in g.value(y1).data().iter().zip(g.value(y2).data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn neighbourhoods_are_drawn_from_candidates() {
    let cfg = BranchConfig { p_neighbors: 4, p_candidates: 6, ..BranchConfig::default() };
    let mut store = ParamStore::new();
    let p = PBranch::new(&mut store, &cfg, 6, &mut rng(1));
    let pos = random_points(&mut rng(8), 30, 2.0);
    let nbr = p.sample_neighborhoods(&pos, &mut rng(9)).unwrap();
    assert_eq!(nbr.len(), 30 * 4);
    for (i, chunk) in nbr.chunks(4).enumerate() {
        let mut d: Vec<(f64, usize)> = pos
            .iter()
            .enumerate()
            .map(|(j, q)| ((0..3).map(|a| (q[a] - pos[i][a]).powi(2)).sum::<f64>(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest: Vec<usize> = d[..6].iter().map(|x| x.1).collect();
        let mut distinct = chunk.to_vec();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        assert!(chunk.iter().all(|j| nearest.contains(j)));
    }
}

#[test]
fn head_keeps_leading_dimensions_and_zero_weights_give_zero_logits() {
    let mut store = ParamStore::new();
    let head = SegHead::new(&mut store, "h", FUSION_GROUP, 4, 5, 2, &mut rng(1));
    assert_eq!(head.layers().len(), 2);
    let mut g = Graph::new();
    let img = g.constant(random_tensor(&mut rng(2), vec![3, 2, 4], 1.0));
    let rows = g.constant(random_tensor(&mut rng(3), vec![7, 4], 1.0));
    let y_img = head.forward(&mut g, &store, img).unwrap();
    let y_rows = head.forward(&mut g, &store, rows).unwrap();
    assert_eq!(g.shape(y_img), &[3, 2, 5]);
    assert_eq!(g.shape(y_rows), &[7, 5]);
    for id in store.ids().collect::<Vec<_>>() {
        store.tensor_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let rows = g.constant(random_tensor(&mut rng(3), vec![7, 4], 1.0));
    let y = head.forward(&mut g, &store, rows).unwrap();
    assert!(g.value(y).data().iter().all(|&x| x == 0.0));
}

#[test]
fn config_validation() {
    assert!(BranchConfig::default().validate().is_ok());
    assert!(BranchConfig { p_candidates: 4, p_neighbors: 8, ..BranchConfig::default() }.validate().is_err());
    assert!(BranchConfig { a_widths: vec![], ..BranchConfig::default() }.validate().is_err());
    assert!(BranchConfig { head_layers: 0, ..BranchConfig::default() }.validate().is_err());
}

#[test]
fn a_branch_gradients() {
    let cfg = tiny_config();
    let mut r = rng(21);
    for trial in 0..10 {
        let mut store = ParamStore::new();
        let a = ABranch::new(&mut store, &cfg, 3, &mut r);
        randomize(&mut store, &mut r);
        let image = random_tensor(&mut r, vec![4, 6, 3], 1.0);
        let report = check_model(&store, vec![image], |g, store, x| {
            let y = a.forward(g, store, x[0]).unwrap();
            project(g, y, trial)
        });
        assert!(report.passed(), "trial {trial}: {report:?}");
    }
}

#[test]
fn p_branch_and_head_gradients() {
    let cfg = tiny_config();
    let mut r = rng(22);
    for trial in 0..10 {
        let mut store = ParamStore::new();
        let p = PBranch::new(&mut store, &cfg, 4, &mut r);
        let head = SegHead::new(&mut store, "h", FUSION_GROUP, 3, 4, 2, &mut r);
        randomize(&mut store, &mut r);
        let pos = random_points(&mut r, 9, 2.0);
        let feats = random_tensor(&mut r, vec![9, 4], 1.0);
        let report = check_model(&store, vec![], |g, store, _| {
            let y = p.forward(g, store, PointInput { positions: &pos, features: &feats }, [trial, trial + 1]).unwrap();
            let y = head.forward(g, store, y).unwrap();
            project(g, y, trial)
        });
        assert!(report.passed(), "trial {trial}: {report:?}");
    }
}
