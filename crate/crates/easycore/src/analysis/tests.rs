use super::*;
use crate::model::{build_model, ModelConfig};
use crate::rng::Stream;

/// Model with logits (x0, 0): predicts class 0 on the right half-plane.
fn threshold_model() -> Model {
    let mut model = build_model(ModelConfig::new(2, 2, 0, 2), 0).unwrap();
    let tensors: Vec<Vec<f64>> = vec![
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0],
    ];
    for (p, vals) in model.params_mut().iter_mut().zip(tensors) {
        p.tensor.values_mut().copy_from_slice(&vals);
    }
    model
}

fn square_grid(r: usize) -> GridSpec {
    GridSpec {
        x_min: -1.0,
        x_max: 1.0,
        nx: r,
        y_min: -1.0,
        y_max: 1.0,
        ny: r,
    }
}

#[test]
fn half_plane_split_has_one_column_seam() {
    let model = threshold_model();
    let r = 16;
    let raster = boundary_raster(&model, &square_grid(r)).unwrap();
    for iy in 0..r {
        for ix in 0..r {
            let (cx, _) = raster.grid.cell_center(ix, iy);
            let want = if cx > 0.0 { 0 } else { 1 };
            assert_eq!(raster.class_at(ix, iy), want);
        }
    }
    assert_eq!(boundary_complexity(&raster), r);
}

#[test]
fn constant_model_has_zero_boundary() {
    let mut model = threshold_model();
    for p in model.params_mut() {
        p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let raster = boundary_raster(&model, &square_grid(10)).unwrap();
    assert!(raster.classes.iter().all(|&c| c == 0));
    assert_eq!(boundary_complexity(&raster), 0);
}

#[test]
fn checkerboard_is_the_maximal_edge_count() {
    let r = 9;
    let classes: Vec<usize> = (0..r * r).map(|i| (i / r + i % r) % 2).collect();
    let raster = BoundaryRaster {
        grid: square_grid(r),
        classes,
    };
    assert_eq!(boundary_complexity(&raster), 2 * r * (r - 1));
}

#[test]
fn complexity_is_invariant_under_relabeling() {
    let mut s = Stream::new(5);
    let r = 12;
    let classes: Vec<usize> = (0..r * r).map(|_| s.below(3) as usize).collect();
    let relabeled: Vec<usize> = classes.iter().map(|&c| (c + 1) % 3).collect();
    let a = BoundaryRaster {
        grid: square_grid(r),
        classes,
    };
    let b = BoundaryRaster {
        grid: square_grid(r),
        classes: relabeled,
    };
    assert_eq!(boundary_complexity(&a), boundary_complexity(&b));
}

#[test]
fn rasters_are_deterministic() {
    let model = build_model(ModelConfig::new(2, 16, 3, 2), 31).unwrap();
    let grid = square_grid(64);
    let a = boundary_raster(&model, &grid).unwrap();
    let b = boundary_raster(&model, &grid).unwrap();
    assert_eq!(a.classes, b.classes);
}

#[test]
fn non_2d_models_are_rejected() {
    let model = build_model(ModelConfig::new(3, 4, 0, 2), 1).unwrap();
    assert!(boundary_raster(&model, &square_grid(4)).is_err());
}

fn random_features(s: &mut Stream, n: usize, d: usize) -> Tensor {
    let vals: Vec<f64> = (0..n * d)
        .map(|_| {
            let (a, _) = s.normal_pair();
            a
        })
        .collect();
    Tensor::matrix(n, d, vals).unwrap()
}

#[test]
fn rank_one_features_need_one_component() {
    let mut s = Stream::new(3);
    let direction: Vec<f64> = (0..6).map(|_| s.range_f64(-1.0, 1.0)).collect();
    let mut vals = Vec::new();
    for _ in 0..50 {
        let t = s.range_f64(-2.0, 2.0);
        vals.extend(direction.iter().map(|&v| t * v));
    }
    let features = Tensor::matrix(50, 6, vals).unwrap();
    for target in [0.5, 0.95, 1.0] {
        assert_eq!(pca_kappa(&features, target).unwrap(), 1);
    }
}

#[test]
fn isotropic_gaussian_needs_every_component() {
    let mut s = Stream::new(7);
    let features = random_features(&mut s, 10_000, 10);
    assert_eq!(pca_kappa(&features, 0.95).unwrap(), 10);
}

#[test]
fn kappa_is_monotone_in_the_target() {
    let mut s = Stream::new(9);
    // Anisotropic features: decaying scales.
    let mut vals = Vec::new();
    for _ in 0..500 {
        for c in 0..8 {
            let (a, _) = s.normal_pair();
            vals.push(a * (0.5f64).powi(c));
        }
    }
    let features = Tensor::matrix(500, 8, vals).unwrap();
    let mut prev = 0;
    for target in [0.5, 0.8, 0.95, 0.999] {
        let k = pca_kappa(&features, target).unwrap();
        assert!(k >= prev, "target {target}: {k} < {prev}");
        prev = k;
    }
}

#[test]
fn kappa_is_invariant_under_rotation_and_offset() {
    let mut s = Stream::new(11);
    let d = 6;
    let features = random_features(&mut s, 200, d);
    // Random orthogonal matrix from QR.
    let raw = DMatrix::from_fn(d, d, |_, _| s.range_f64(-1.0, 1.0));
    let q = raw.qr().q();
    let m = DMatrix::from_row_slice(200, d, features.values());
    let rotated = &m * &q;
    let rotated_t = Tensor::matrix(200, d, rotated.as_slice().to_vec()).unwrap();
    // nalgebra stores column-major; rebuild row-major explicitly.
    let mut rot_vals = vec![0.0; 200 * d];
    for r in 0..200 {
        for c in 0..d {
            rot_vals[r * d + c] = rotated[(r, c)];
        }
    }
    let rotated_t = Tensor::matrix(200, d, rot_vals).unwrap_or(rotated_t);
    let mut offset_vals = features.values().to_vec();
    for chunk in offset_vals.chunks_mut(d) {
        for (c, v) in chunk.iter_mut().enumerate() {
            *v += 10.0 + c as f64;
        }
    }
    let offset_t = Tensor::matrix(200, d, offset_vals).unwrap();
    for target in [0.6, 0.9, 0.95] {
        let base = pca_kappa(&features, target).unwrap();
        assert_eq!(pca_kappa(&rotated_t, target).unwrap(), base);
        assert_eq!(pca_kappa(&offset_t, target).unwrap(), base);
    }
}

#[test]
fn zero_variance_features_are_rejected() {
    let features = Tensor::matrix(5, 3, vec![2.0; 15]).unwrap();
    assert!(matches!(
        pca_kappa(&features, 0.95),
        Err(Error::ZeroVariance { .. })
    ));
}

#[test]
fn collinear_points_project_onto_one_axis() {
    let mut s = Stream::new(13);
    let mut vals = Vec::new();
    for _ in 0..40 {
        let t = s.range_f64(-3.0, 3.0);
        vals.extend_from_slice(&[2.0 * t, -t, 0.5 * t]);
    }
    let features = Tensor::matrix(40, 3, vals).unwrap();
    let labels = vec![0usize; 40];
    let projection = pca_project2d(&features, &labels, 1).unwrap();
    for &(_, p2) in &projection.coords {
        assert!(p2.abs() < 1e-9, "second coordinate {p2}");
    }
}

#[test]
fn separated_clusters_have_distant_centroids() {
    let mut s = Stream::new(15);
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let class = i % 2;
        let center = if class == 0 { 8.0 } else { -8.0 };
        for _ in 0..4 {
            let (a, _) = s.normal_pair();
            vals.push(center + a);
        }
        labels.push(class);
    }
    let features = Tensor::matrix(100, 4, vals).unwrap();
    let projection = pca_project2d(&features, &labels, 2).unwrap();
    let (c0, c1) = (projection.centroids[0], projection.centroids[1]);
    let centroid_dist = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
    // Within-cluster spread along the projection.
    let mut spread: f64 = 0.0;
    for (&(p1, p2), &label) in projection.coords.iter().zip(&labels) {
        let c = if label == 0 { c0 } else { c1 };
        spread = spread.max(((p1 - c.0).powi(2) + (p2 - c.1).powi(2)).sqrt());
    }
    assert!(
        centroid_dist > spread,
        "centroids {centroid_dist} vs spread {spread}"
    );
}

#[test]
fn projection_never_increases_distances() {
    let mut s = Stream::new(17);
    let features = random_features(&mut s, 60, 5);
    let labels = vec![0usize; 60];
    let projection = pca_project2d(&features, &labels, 1).unwrap();
    for i in (0..60).step_by(7) {
        for j in (i + 1..60).step_by(5) {
            let orig: f64 = (0..5)
                .map(|c| (features.values()[i * 5 + c] - features.values()[j * 5 + c]).powi(2))
                .sum::<f64>()
                .sqrt();
            let (pi, pj) = (projection.coords[i], projection.coords[j]);
            let proj = ((pi.0 - pj.0).powi(2) + (pi.1 - pj.1).powi(2)).sqrt();
            assert!(proj <= orig + 1e-9, "{proj} > {orig}");
        }
    }
}

#[test]
fn curve_examples() {
    let order: Vec<usize> = (0..10).collect();
    assert_eq!(
        hardness_accuracy_curve(&[true; 10], &order, 2).unwrap(),
        vec![1.0, 1.0]
    );
    let flags: Vec<bool> = (0..10).map(|i| i < 5).collect();
    assert_eq!(
        hardness_accuracy_curve(&flags, &order, 2).unwrap(),
        vec![1.0, 0.0]
    );
}

#[test]
fn curve_matches_group_by_oracle_and_weighted_mean() {
    let mut s = Stream::new(19);
    let n = 103;
    let flags: Vec<bool> = (0..n).map(|_| s.next_f64() < 0.6).collect();
    let mut order: Vec<usize> = (0..n).collect();
    crate::rng::shuffle(&mut s, &mut order);
    let bins = 10;
    let curve = hardness_accuracy_curve(&flags, &order, bins).unwrap();

    // Direct group-by oracle.
    let base = n / bins;
    let mut start = 0;
    let mut weighted = 0.0;
    for (b, &acc) in curve.iter().enumerate() {
        let end = if b + 1 == bins { n } else { start + base };
        let want = order[start..end].iter().filter(|&&id| flags[id]).count() as f64
            / (end - start) as f64;
        assert_eq!(acc, want);
        weighted += acc * (end - start) as f64;
        start = end;
    }
    let overall = flags.iter().filter(|&&f| f).count() as f64 / n as f64;
    assert!((weighted / n as f64 - overall).abs() <= 1e-12);
}

#[test]
fn curve_rejects_bad_bins_and_orders() {
    let order: Vec<usize> = (0..5).collect();
    assert!(hardness_accuracy_curve(&[true; 5], &order, 1).is_err());
    assert!(hardness_accuracy_curve(&[true; 5], &order, 6).is_err());
    assert!(hardness_accuracy_curve(&[true; 5], &[0, 1, 2, 3, 3], 2).is_err());
}

#[test]
fn spearman_median_split_closed_form() {
    // Outcomes = indicator(score below median) on 100 distinct scores give
    // rho = -50/sqrt(3333); the sign is negative because low scores map to
    // robust outcomes.
    let mut s = Stream::new(21);
    let mut scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
    crate::rng::shuffle(&mut s, &mut scores);
    let outcomes: Vec<bool> = scores.iter().map(|&v| v < 50.0).collect();
    let rho = rank_correlation(&scores, &outcomes).unwrap();
    let want = -50.0 / 3333.0_f64.sqrt();
    assert!((rho - want).abs() <= 1e-12, "{rho} vs {want}");
}

#[test]
fn spearman_independent_outcomes_stay_near_zero() {
    // |rho| <= 3/sqrt(n) holds at the 99% level; allow a 2% violation rate
    // over 500 seeds.
    let n = 100;
    let bound = 3.0 / (n as f64).sqrt();
    let mut violations = 0;
    for seed in 0..500u64 {
        let mut s = Stream::derived(seed, "spearman-null", 0);
        let scores: Vec<f64> = (0..n).map(|_| s.next_f64()).collect();
        let outcomes: Vec<bool> = (0..n).map(|_| s.next_f64() < 0.5).collect();
        match rank_correlation(&scores, &outcomes) {
            Ok(rho) => {
                if rho.abs() > bound {
                    violations += 1;
                }
            }
            Err(Error::ZeroVariance { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(violations <= 10, "{violations} of 500 exceeded {bound}");
}

#[test]
fn spearman_of_identical_orders_is_one() {
    let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|v| v * 3.0 + 1.0).collect();
    assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn spearman_zero_variance_is_an_error() {
    let xs = vec![1.0, 2.0, 3.0];
    assert!(matches!(
        spearman(&xs, &[5.0, 5.0, 5.0]),
        Err(Error::ZeroVariance { .. })
    ));
}

#[test]
fn full_row_rank_batch_has_unit_s_p() {
    let mut s = Stream::new(23);
    let model = build_model(ModelConfig::new(2, 8, 1, 2), 3).unwrap();
    let batch = random_features(&mut s, 8, 2);
    let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
    let report = lemma1_check(&model, &batch, &labels).unwrap();
    assert!((report.s_p - 1.0).abs() < 1e-9, "s_p = {}", report.s_p);
    assert!(report.k_g > 0.0);
    assert!(report.holds, "{report:?}");
}

#[test]
fn bound_holds_on_random_models() {
    for seed in 0..20u64 {
        let mut s = Stream::derived(seed, "lemma1", 0);
        let model = build_model(ModelConfig::new(3, 12, 2, 3), seed).unwrap();
        let batch = random_features(&mut s, 6, 3);
        let labels: Vec<usize> = (0..6).map(|_| s.below(3) as usize).collect();
        let report = lemma1_check(&model, &batch, &labels).unwrap();
        assert!(report.holds, "seed {seed}: {report:?}");
    }
}

#[test]
fn saturated_batch_has_zero_gradients_and_holds() {
    // A huge correct-class bias saturates the softmax, so probabilities hit
    // the one-hot vector exactly and both gradients vanish.
    let mut model = build_model(ModelConfig::new(2, 4, 0, 2), 1).unwrap();
    let head_bias = model.params_mut().last_mut().unwrap();
    head_bias.tensor.values_mut().copy_from_slice(&[2000.0, -2000.0]);
    let mut s = Stream::new(25);
    let batch = random_features(&mut s, 5, 2);
    let labels = vec![0; 5];
    let report = lemma1_check(&model, &batch, &labels).unwrap();
    assert_eq!(report.input_grad_norm, 0.0);
    assert_eq!(report.weight_grad_norm, 0.0);
    assert!(report.holds);
}

#[test]
fn rank_deficient_batches_are_rejected() {
    let model = build_model(ModelConfig::new(2, 4, 0, 2), 1).unwrap();
    // All rows identical: rank 1 < 2.
    let batch = Tensor::matrix(4, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
    assert!(matches!(
        lemma1_check(&model, &batch, &[0, 0, 0, 0]),
        Err(Error::RankDeficient { .. })
    ));
}

#[test]
fn histogram_of_constant_scores_is_a_unit_spike() {
    let h = aign_histogram(&[3.5; 20], 7).unwrap();
    assert_eq!(h.edges, vec![3.5, 4.5]);
    assert_eq!(h.densities, vec![1.0]);
}

#[test]
fn histogram_integrates_to_one() {
    let mut s = Stream::new(27);
    let scores: Vec<f64> = (0..5000).map(|_| s.range_f64(0.0, 4.0)).collect();
    for bins in [1, 5, 16] {
        let h = aign_histogram(&scores, bins).unwrap();
        let integral: f64 = h
            .densities
            .iter()
            .enumerate()
            .map(|(i, d)| d * (h.edges[i + 1] - h.edges[i]))
            .sum();
        assert!((integral - 1.0).abs() <= 1e-9, "bins {bins}: {integral}");
    }
}

#[test]
fn uniform_scores_give_a_flat_histogram() {
    let mut s = Stream::new(29);
    let n = 20_000;
    let scores: Vec<f64> = (0..n).map(|_| s.next_f64()).collect();
    let bins = 10;
    let h = aign_histogram(&scores, bins).unwrap();
    // Count per bin is binomial(n, 1/bins).
    let p = 1.0 / bins as f64;
    let sigma_counts = (n as f64 * p * (1.0 - p)).sqrt();
    for (i, &d) in h.densities.iter().enumerate() {
        let width = h.edges[i + 1] - h.edges[i];
        let count = d * n as f64 * width;
        assert!(
            (count - n as f64 * p).abs() <= 5.0 * sigma_counts,
            "bin {i}: count {count}"
        );
    }
}
