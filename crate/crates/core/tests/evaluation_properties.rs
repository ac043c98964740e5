use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlp_core::data::{generate_samples, GridBox, SyntheticWorldConfig};
use vlp_core::embeddings::{LocalEmbeddings, SimilarityMatrix};
use vlp_core::evaluation::{
    cnr, cnr_from_values, dice, grounding_report, linear_probe_train, similarity_map, GroundingCase, ProbeConfig,
};
use vlp_core::model::{Model, ModelConfig};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn grid_map(g: usize) -> impl Strategy<Value = Array2<f64>> {
    values(g * g).prop_map(move |v| Array2::from_shape_vec((g, g), v).unwrap())
}

fn grid_box(g: usize) -> impl Strategy<Value = GridBox> {
    (0..g, 0..g).prop_flat_map(move |(r, c)| {
        (Just(r), Just(c), r + 1..=g, c + 1..=g).prop_map(|(row0, col0, row1, col1)| GridBox {
            row0,
            col0,
            row1,
            col1,
            label: "x".into(),
        })
    })
}

fn split(map: &Array2<f64>, boxes: &[GridBox]) -> (Vec<f64>, Vec<f64>) {
    let (mut i, mut o) = (Vec::new(), Vec::new());
    for ((r, c), v) in map.indexed_iter() {
        if boxes.iter().any(|b| b.contains_center(r, c)) {
            i.push(*v);
        } else {
            o.push(*v);
        }
    }
    (i, o)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cnr_sign_follows_mean_difference(inside in prop::collection::vec(-1.0f64..1.0, 1..20), outside in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let r = cnr_from_values(&inside, &outside).unwrap();
        prop_assert_eq!(r.absolute, r.non_absolute.abs());
        prop_assert_eq!(r.n_in + r.n_out, inside.len() + outside.len());
        prop_assert!(r.var_in >= 0.0 && r.var_out >= 0.0);
        if r.mu_in > r.mu_out {
            prop_assert!(r.non_absolute > 0.0);
        } else if r.mu_in < r.mu_out {
            prop_assert!(r.non_absolute < 0.0);
        } else {
            prop_assert_eq!(r.non_absolute, 0.0);
        }
    }

    #[test]
    fn cnr_ignores_order_within_each_side(
        inside in prop::collection::vec(-1.0f64..1.0, 1..20),
        outside in prop::collection::vec(-1.0f64..1.0, 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (inside.clone(), outside.clone());
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let x = cnr_from_values(&inside, &outside).unwrap();
        let y = cnr_from_values(&a, &b).unwrap();
        prop_assert!((x.non_absolute - y.non_absolute).abs() <= 1e-9 * x.absolute.max(1.0));
    }

    #[test]
    fn cnr_ignores_shift_and_positive_scale(
        (map, b) in (2usize..8).prop_flat_map(|g| (grid_map(g), grid_box(g))),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let base = cnr(&SimilarityMatrix::unmasked(map.clone()), std::slice::from_ref(&b));
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        // the ε guard breaks exact scale invariance for near-constant maps
        prop_assume!((base.var_in + base.var_out).sqrt() > 1e-3);
        let moved = cnr(&SimilarityMatrix::unmasked(map.mapv(|v| v * scale + shift)), &[b]).unwrap();
        prop_assert!((base.non_absolute - moved.non_absolute).abs() < 1e-5 * base.absolute.max(1.0));
    }

    #[test]
    fn similarity_map_follows_cell_order(
        (y, q) in (1usize..5, 1usize..6).prop_flat_map(|(g, d)| {
            (values(g * g * d).prop_map(move |v| Array2::from_shape_vec((g * g, d), v).unwrap()), values(d))
        }),
        seed in any::<u64>(),
    ) {
        let n = y.nrows();
        let g = (n as f64).sqrt() as usize;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let base = similarity_map(&q, &LocalEmbeddings::image(y.clone(), (g, g)).unwrap()).unwrap();
        let perm = similarity_map(&q, &LocalEmbeddings::image(y.select(Axis(0), &p), (g, g)).unwrap()).unwrap();
        for (k, &src) in p.iter().enumerate() {
            prop_assert_eq!(perm.values[[k / g, k % g]], base.values[[src / g, src % g]]);
        }
        prop_assert!(base.values.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn dice_is_symmetric_and_one_only_on_equal_masks(
        (a, b) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            let m = prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
            (m.clone(), m)
        }),
    ) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn absolute_matches_magnitude_on_fuzzed_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 1000 {
        let g = rng.random_range(2..9);
        let map = Array2::from_shape_fn((g, g), |_| rng.random_range(-1.0..1.0));
        let (r0, c0) = (rng.random_range(0..g), rng.random_range(0..g));
        let b = GridBox { row0: r0, col0: c0, row1: rng.random_range(r0 + 1..=g), col1: rng.random_range(c0 + 1..=g), label: "x".into() };
        if let Ok(r) = cnr(&SimilarityMatrix::unmasked(map), &[b]) {
            assert_eq!(r.absolute, r.non_absolute.abs());
            checked += 1;
        }
    }
}

/// Cosine similarity written out from scratch.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / ((na.sqrt() + 1e-8) * (nb.sqrt() + 1e-8))
}

/// Population variance as E[x²] − E[x]², a different route from the
/// library's centred sum.
fn spreadsheet_cnr(inside: &[f64], outside: &[f64]) -> f64 {
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let s: f64 = xs.iter().sum();
        let s2: f64 = xs.iter().map(|x| x * x).sum();
        (s / n, (s2 / n - (s / n) * (s / n)).max(0.0))
    };
    let (mi, vi) = stats(inside);
    let (mo, vo) = stats(outside);
    (mi - mo) / ((vi + vo).sqrt() + 1e-8)
}

#[test]
fn fifty_case_report_matches_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let labels = ["opacity", "nodule", "effusion"];
    let (g, d) = (5, 4);
    let mut cases = Vec::new();
    let mut expected: Vec<(String, usize, f64)> = Vec::new();
    for k in 0..50 {
        let y = Array2::from_shape_fn((g * g, d), |_| rng.random_range(-1.0..1.0));
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = labels[k % 3].to_string();
        let count = if k % 4 == 0 { 2 } else { 1 };
        let boxes: Vec<GridBox> = (0..count)
            .map(|j| GridBox { row0: j * 3, col0: k % 3, row1: j * 3 + 2, col1: k % 3 + 2, label: label.clone() })
            .collect();
        let cells: Vec<f64> = (0..g * g).map(|i| cosine(y.row(i).as_slice().unwrap(), &query)).collect();
        let map = Array2::from_shape_vec((g, g), cells).unwrap();
        let (inside, outside) = split(&map, &boxes);
        expected.push((label.clone(), count, spreadsheet_cnr(&inside, &outside)));
        cases.push(GroundingCase {
            id: format!("c{k:02}"),
            image_locals: LocalEmbeddings::image(y, (g, g)).unwrap(),
            query,
            query_text: format!("There is {label}."),
            gt_box_count: count,
            boxes,
            label,
        });
    }
    let report = grounding_report(&cases).unwrap();
    let mean = |f: &dyn Fn(&(String, usize, f64)) -> bool, abs: bool| {
        let xs: Vec<f64> = expected.iter().filter(|e| f(e)).map(|e| if abs { e.2.abs() } else { e.2 }).collect();
        (xs.iter().sum::<f64>() / xs.len() as f64, xs.len())
    };
    let check = |group: &str, f: &dyn Fn(&(String, usize, f64)) -> bool| {
        for (metric, abs) in [("cnr", false), ("abs_cnr", true)] {
            let (want, n) = mean(f, abs);
            let row = report.rows.iter().find(|r| r.group == group && r.metric == metric).unwrap();
            assert!((row.value - want).abs() < 1e-9, "{group}/{metric}: {} vs {want}", row.value);
            assert_eq!(row.n, n);
        }
    };
    check("Avg", &|_| true);
    check("Single", &|e| e.1 == 1);
    check("Multiple", &|e| e.1 > 1);
    for l in labels {
        check(&format!("finding:{l}"), &|e| e.0 == l);
    }
    let groups: Vec<&str> = report.rows.iter().step_by(2).map(|r| r.group.as_str()).collect();
    assert_eq!(groups, ["Avg", "Single", "Multiple", "finding:effusion", "finding:nodule", "finding:opacity"]);
    assert!(report.to_csv().starts_with("group,metric,value,n\n"));
}

#[test]
fn probing_leaves_the_encoder_bit_identical() {
    let world = SyntheticWorldConfig::default();
    let samples = generate_samples(&world, 0, 12).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let model = Model::init(ModelConfig::default(), 4).unwrap();
    let before = serde_json::to_vec(&model).unwrap();
    let frozen = model.clone();
    let probe = linear_probe_train(&model, &refs, &ProbeConfig { epochs: 3, ..Default::default() }).unwrap();
    assert_eq!(serde_json::to_vec(&model).unwrap(), before);
    assert_eq!(model, frozen);
    assert_eq!(probe.layer.weight.dim(), (ModelConfig::default().joint_dim, 1));
}
