mod common;

use apnet_autograd::{Graph, ParamStore, Tensor};
use apnet_core::{Point3, RasterGeometry};
use apnet_model::fusion::{kpconv_apply, neighbor_lists};
use apnet_model::{
    build_fusion_inputs, extract_pixel_features, fuse_baseline, kpconv_fuse, make_kernel_layout, Baseline, FusionInputs,
    KernelLayout, KpConv, Linear,
};
use common::{check_model, project, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn one_hot_raster(h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::new(vec![h, w, n], data).unwrap()
}

/// Interpolation weights per pixel at sample coordinate `(u, v)`.
fn sample_weights(h: usize, w: usize, u: f64, v: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let r = g.constant(one_hot_raster(h, w));
    let (y, _) = g.bilinear_sample(r, &[(u, v)]).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn bilinear_weights_hand_cases() {
    let w = sample_weights(4, 4, 1.0, 2.0);
    assert_eq!(w[2 * 4 + 1], 1.0);
    assert_eq!(w.iter().sum::<f64>(), 1.0);

    let w = sample_weights(4, 4, 1.5, 2.0);
    assert_eq!((w[2 * 4 + 1], w[2 * 4 + 2]), (0.5, 0.5));

    let w = sample_weights(4, 4, 1.25, 2.5);
    let taps = [w[2 * 4 + 1], w[2 * 4 + 2], w[3 * 4 + 1], w[3 * 4 + 2]];
    assert_eq!(taps, [0.375, 0.125, 0.375, 0.125]);
}

#[test]
fn pixel_centres_sample_exact_values() {
    let geo = RasterGeometry::new(0.25, [10.0, -3.0], 6, 5).unwrap();
    let raster = random_tensor(&mut rng(1), vec![5, 6, 2], 1.0);
    let mut pts = Vec::new();
    for v in 0..5 {
        for u in 0..6 {
            let c = geo.pixel_center(u, v);
            pts.push([c[0], c[1], 0.0]);
        }
    }
    let mut g = Graph::new();
    let r = g.constant(raster.clone());
    let (y, clamped) = extract_pixel_features(&mut g, r, &geo, &pts).unwrap();
    assert_eq!(clamped, 0);
    for (a, b) in g.value(y).data().iter().zip(raster.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fusion_inputs_shapes() {
    let geo = RasterGeometry::new(0.5, [0.0, 0.0], 4, 4).unwrap();
    let mut g = Graph::new();
    let fa = g.constant(random_tensor(&mut rng(2), vec![4, 4, 3], 1.0));
    let fp = g.constant(random_tensor(&mut rng(3), vec![2, 3], 1.0));
    let supports = [[0.5, 0.5, 0.0], [1.5, 1.5, 0.0]];
    let queries = [[0.5, 0.5, 0.1], [1.9, 0.1, 0.0]];
    let inputs = build_fusion_inputs(&mut g, &queries, &supports, fa, fp, &geo, 0.5, 32).unwrap();
    assert_eq!(g.shape(inputs.features), &[2, 6]);
    assert_eq!(inputs.neighbors, vec![vec![0], vec![]]);
    let fp_bad = g.constant(Tensor::zeros(vec![2, 4]));
    assert!(build_fusion_inputs(&mut g, &queries, &supports, fa, fp_bad, &geo, 0.5, 32).is_err());
}

#[test]
fn layout_regression() {
    let l = make_kernel_layout(15, 0.5, 0.24, 0).unwrap();
    assert_eq!(l.len(), 15);
    assert_eq!(l.offsets[0], [0.0; 3]);
    assert!((l.min_separation() - 0.42675145701436146).abs() < 1e-9);
    for seed in 0..20 {
        let l = make_kernel_layout(15, 0.5, 0.24, seed).unwrap();
        assert!(l.offsets.iter().all(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt() <= 0.5));
        assert!(l.min_separation() > 0.3 * 0.5, "seed {seed}");
        assert_eq!(l, make_kernel_layout(15, 0.5, 0.24, seed).unwrap());
    }
}

#[test]
fn correlation_profile() {
    let l = KernelLayout { offsets: vec![[0.0; 3], [0.2, 0.0, 0.0]], sigma: 0.24, radius: 0.5 };
    assert_eq!(l.correlation(0, &[0.0; 3]), 1.0);
    assert!((l.correlation(0, &[0.12, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    assert_eq!(l.correlation(0, &[0.3, 0.0, 0.0]), 0.0);
    assert_eq!(l.correlation(1, &[0.2, 0.0, 0.0]), 1.0);
}

fn dyadic(r: &mut impl Rng) -> f64 {
    r.gen_range(0..64) as f64 / 64.0
}

fn conv_output(layout: &KernelLayout, queries: &[Point3], supports: &[Point3], feats: &Tensor, weight: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let features = g.constant(feats.clone());
    let inputs = FusionInputs {
        queries: queries.to_vec(),
        supports: supports.to_vec(),
        features,
        neighbors: neighbor_lists(queries, supports, layout.radius, 32).unwrap(),
        clamped: 0,
    };
    let w = g.constant(weight.clone());
    let y = kpconv_apply(&mut g, &inputs, layout, w, weight.shape()[1] / layout.len()).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bilinear_weights_partition_unity(u in -3.0..10.0f64, v in -3.0..10.0f64) {
        let w = sample_weights(5, 6, u, v);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn kpconv_is_linear_in_features(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut r = rng(seed);
        let layout = make_kernel_layout(5, 0.5, 0.24, seed % 4).unwrap();
        let pts: Vec<Point3> = (0..12).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..0.3)]).collect();
        let q: Vec<Point3> = pts[..5].to_vec();
        let f1 = random_tensor(&mut r, vec![12, 4], 1.0);
        let f2 = random_tensor(&mut r, vec![12, 4], 1.0);
        let w = random_tensor(&mut r, vec![4, 5 * 3], 1.0);
        let mix = Tensor::new(vec![12, 4], f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let y1 = conv_output(&layout, &q, &pts, &f1, &w);
        let y2 = conv_output(&layout, &q, &pts, &f2, &w);
        let ym = conv_output(&layout, &q, &pts, &mix, &w);
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (a * y1[i] + b * y2[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn kpconv_is_translation_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layout = make_kernel_layout(5, 0.5, 0.24, 0).unwrap();
        let pts: Vec<Point3> = (0..12).map(|_| [dyadic(&mut r), dyadic(&mut r), dyadic(&mut r) / 4.0]).collect();
        let moved: Vec<Point3> = pts.iter().map(|p| [p[0] + 10.0, p[1] + 10.0, p[2]]).collect();
        let f = random_tensor(&mut r, vec![12, 4], 1.0);
        let w = random_tensor(&mut r, vec![4, 5 * 3], 1.0);
        let y = conv_output(&layout, &pts[..6], &pts, &f, &w);
        let y_moved = conv_output(&layout, &moved[..6], &moved, &f, &w);
        prop_assert_eq!(y, y_moved);
    }
}

fn support_setup(r: &mut impl Rng, n: usize) -> (RasterGeometry, Vec<Point3>) {
    let geo = RasterGeometry::new(0.5, [0.0, 0.0], 4, 4).unwrap();
    let pts = (0..n).map(|_| [r.gen_range(0.05..1.95), r.gen_range(0.05..1.95), r.gen_range(0.0..0.3)]).collect();
    (geo, pts)
}

#[test]
fn naive_gaf_equals_gaf_on_the_support_set() {
    let mut r = rng(5);
    let (geo, pts) = support_setup(&mut r, 15);
    let layout = make_kernel_layout(7, 0.5, 0.24, 1).unwrap();
    let mut store = ParamStore::new();
    let conv = KpConv::new(&mut store, "k", layout, 6, 3, &mut r);
    let fa_t = random_tensor(&mut r, vec![4, 4, 3], 1.0);
    let fp_t = random_tensor(&mut r, vec![15, 3], 1.0);
    let mut g = Graph::new();
    let fa = g.constant(fa_t);
    let fp = g.constant(fp_t);
    let inputs = build_fusion_inputs(&mut g, &pts, &pts, fa, fp, &geo, 0.5, 32).unwrap();
    let gaf = kpconv_fuse(&mut g, &store, &inputs, &conv).unwrap();
    let (pixel, _) = extract_pixel_features(&mut g, fa, &geo, &pts).unwrap();
    let naive = fuse_baseline(&mut g, &store, &Baseline::NaiveGaf(conv), pixel, fp, &pts, 0.5, 32).unwrap();
    assert_eq!(g.value(gaf).data(), g.value(naive).data());
}

#[test]
fn simple_baselines() {
    let mut r = rng(6);
    let pts: Vec<Point3> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
    let mut g = Graph::new();
    let fa = g.constant(random_tensor(&mut r, vec![5, 4], 1.0));
    let zero = g.constant(Tensor::zeros(vec![5, 4]));
    let store = ParamStore::new();
    let sum = fuse_baseline(&mut g, &store, &Baseline::Addition, fa, zero, &pts, 0.5, 32).unwrap();
    assert_eq!(g.value(sum).data(), g.value(fa).data());

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "c", "fusion", 8, 4, &mut r);
    let cat = fuse_baseline(&mut g, &store, &Baseline::Concatenation(lin), fa, zero, &pts, 0.5, 32).unwrap();
    assert_eq!(g.shape(cat), &[5, 4]);
    let wrong = g.constant(Tensor::zeros(vec![5, 3]));
    assert!(fuse_baseline(&mut g, &store, &Baseline::Addition, fa, wrong, &pts, 0.5, 32).is_err());
}

#[test]
fn gaf_path_gradients() {
    // Gradients flow through bilinear sampling, concatenation and the kernel
    // convolution to both feature sources and the weights.
    let mut r = rng(31);
    for trial in 0..10 {
        let (geo, supports) = support_setup(&mut r, 8);
        let (_, queries) = support_setup(&mut r, 10);
        let layout = make_kernel_layout(5, 0.5, 0.24, trial).unwrap();
        let mut store = ParamStore::new();
        let conv = KpConv::new(&mut store, "k", layout, 4, 3, &mut r);
        let fa = random_tensor(&mut r, vec![4, 4, 2], 1.0);
        let fp = random_tensor(&mut r, vec![8, 2], 1.0);
        let report = check_model(&store, vec![fa, fp], |g, store, x| {
            let inputs = build_fusion_inputs(g, &queries, &supports, x[0], x[1], &geo, 0.5, 32).unwrap();
            let y = kpconv_fuse(g, store, &inputs, &conv).unwrap();
            project(g, y, trial)
        });
        assert!(report.passed(), "trial {trial}: {report:?}");
    }
}
