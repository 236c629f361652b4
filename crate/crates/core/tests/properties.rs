use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wass_core::bounds::assemble_transfer_bound;
use wass_core::data::{
    decode_binary, encode_binary, parse_csv, save_feature_matrix, FeatureMatrix, LabelIndex, LabeledDataset,
    MatrixFormat,
};
use wass_core::distance::{pairwise_distances, DistanceMatrix};
use wass_core::ot::{solve_exact_ot, OtProblem, GAP_TOL};
use wass_core::pipeline::{baseline_weights, evaluate, weighted_loss_and_gradient, Baseline, SoftmaxHead};
use wass_core::select::{
    brute_force_class_weights_labeled, select_class_weights, solve_class_weights_labeled, SolverChoice,
};
use wass_core::simplex::{solve, LpOptions, StandardLp};
use wass_core::sinkhorn::{sinkhorn_class_weights, Epsilon, SinkhornConfig};
use wass_core::synth::{make_scenario, ScenarioKind, ScenarioSpec};
use wass_core::verify::{random_head, random_matrix};

fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureMatrix {
    FeatureMatrix::new(n, dim, (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// Source of `k` classes with random sizes in `1..=max_size`, and `m` target points.
fn instance(seed: u64, k: usize, max_size: usize, m: usize) -> (DistanceMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..k).flat_map(|c| vec![c; rng.random_range(1..=max_size)]).collect();
    let source = cloud(&mut rng, labels.len(), 2);
    let target = cloud(&mut rng, m, 2);
    (pairwise_distances(&source, &target).unwrap(), labels)
}

fn marginal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn w1(a: &FeatureMatrix, wa: &[f64], b: &FeatureMatrix, wb: &[f64]) -> f64 {
    let cost = pairwise_distances(a, b).unwrap();
    let sol = solve_exact_ot(&OtProblem::new(&cost, wa.to_vec(), wb.to_vec()).unwrap()).unwrap();
    assert!(sol.duality_gap <= GAP_TOL * (1.0 + sol.objective().abs()));
    sol.objective()
}

/// The class-weight LP with the simplex constraint on `w` written out:
/// variables are the plan entries and one `t_c` per class, rows are the
/// column marginals, the per-row class ties and `sum_c n_c t_c = 1`.
fn explicit_simplex_lp(d: &DistanceMatrix, labels: &[usize], k: usize) -> f64 {
    let (n, m) = (d.rows(), d.cols());
    let mut rhs = vec![1.0 / m as f64; m];
    rhs.extend(std::iter::repeat_n(0.0, n));
    rhs.push(1.0);
    let mut lp = StandardLp::new(rhs);
    for i in 0..n {
        for j in 0..m {
            lp.add_column(d.get(i, j), vec![(j, 1.0), (m + i, 1.0)]);
        }
    }
    for c in 0..k {
        let mut col: Vec<(usize, f64)> = (0..n).filter(|&i| labels[i] == c).map(|i| (m + i, -1.0)).collect();
        col.push((m + n, col.len() as f64));
        lp.add_column(0.0, col);
    }
    solve(&lp, None, &LpOptions::default()).unwrap().objective
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn binary_round_trip_is_bit_exact(rows in 1usize..12, cols in 1usize..9, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1e6f32..1e6f32) as f64).collect();
        let m = FeatureMatrix::new(rows, cols, values).unwrap();
        let back = decode_binary(Path::new("mem"), &encode_binary(&m)).unwrap();
        prop_assert_eq!(back.rows(), rows);
        prop_assert!(m.values().iter().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn csv_round_trip_is_exact(rows in 1usize..8, cols in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-8..8))).collect();
        let m = FeatureMatrix::new(rows, cols, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_feature_matrix(&m, &path, MatrixFormat::Csv).unwrap();
        let back = parse_csv(&path, &std::fs::read_to_string(&path).unwrap()).unwrap();
        prop_assert_eq!(back.values(), m.values());
    }

    #[test]
    fn densifying_dense_labels_is_identity(raw in prop::collection::vec(0u64..50, 1..40)) {
        let once = LabelIndex::densify(&raw);
        let dense: Vec<u64> = once.labels.iter().map(|&l| l as u64).collect();
        let twice = LabelIndex::densify(&dense);
        prop_assert_eq!(&twice.labels, &once.labels);
        prop_assert_eq!(twice.class_ids, (0..once.class_ids.len() as u64).collect::<Vec<_>>());
    }

    #[test]
    fn ot_is_a_metric(seed: u64, na in 1usize..7, nb in 1usize..7, nc in 1usize..7, dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (cloud(&mut rng, na, dim), cloud(&mut rng, nb, dim), cloud(&mut rng, nc, dim));
        let (wa, wb, wc) = (marginal(&mut rng, na), marginal(&mut rng, nb), marginal(&mut rng, nc));
        prop_assert!(w1(&a, &wa, &a, &wa).abs() <= 1e-9);
        let ab = w1(&a, &wa, &b, &wb);
        prop_assert!((ab - w1(&b, &wb, &a, &wa)).abs() <= 1e-8);
        prop_assert!(w1(&a, &wa, &c, &wc) <= ab + w1(&b, &wb, &c, &wc) + 1e-7);
    }

    #[test]
    fn lp_is_below_the_grid_oracle(seed: u64, k in 1usize..=3, m in 1usize..=12) {
        let (d, labels) = instance(seed, k, 10 / k, m);
        let lp = solve_class_weights_labeled(&d, &labels, k).unwrap();
        let (_, grid) = brute_force_class_weights_labeled(&d, &labels, k, 0.05).unwrap();
        prop_assert!(lp.objective <= grid + 1e-7);
        prop_assert!(lp.duality_gap.unwrap() <= GAP_TOL * (1.0 + lp.objective.abs()));
    }

    #[test]
    fn finer_grid_closes_in_on_the_lp(seed: u64, m in 1usize..=8) {
        let (d, labels) = instance(seed, 2, 6, m);
        let lp = solve_class_weights_labeled(&d, &labels, 2).unwrap().objective;
        let (_, coarse) = brute_force_class_weights_labeled(&d, &labels, 2, 0.05).unwrap();
        let (_, fine) = brute_force_class_weights_labeled(&d, &labels, 2, 0.01).unwrap();
        prop_assert!(lp <= fine + 1e-7);
        // the 0.01 grid contains every 0.05 grid point
        prop_assert!(fine <= coarse + 1e-12);
    }

    #[test]
    fn singleton_classes_reduce_to_nearest_source(seed: u64, n in 1usize..10, m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = pairwise_distances(&cloud(&mut rng, n, 2), &cloud(&mut rng, m, 2)).unwrap();
        let labels: Vec<usize> = (0..n).collect();
        let lp = solve_class_weights_labeled(&d, &labels, n).unwrap();
        let nearest: f64 = (0..m).map(|j| (0..n).map(|i| d.get(i, j)).fold(f64::INFINITY, f64::min)).sum::<f64>() / m as f64;
        prop_assert!((lp.objective - nearest).abs() <= 1e-7);
    }

    #[test]
    fn recovered_weights_lie_on_the_simplex(seed: u64, k in 1usize..=5, m in 1usize..=15) {
        let (d, labels) = instance(seed, k, 6, m);
        let w = solve_class_weights_labeled(&d, &labels, k).unwrap().weights;
        prop_assert!(w.as_slice().iter().all(|&v| v >= -1e-8));
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn explicit_simplex_constraint_changes_nothing(seed: u64, k in 1usize..=3, m in 1usize..=8) {
        let (d, labels) = instance(seed, k, 5, m);
        let implied = solve_class_weights_labeled(&d, &labels, k).unwrap().objective;
        let explicit = explicit_simplex_lp(&d, &labels, k);
        prop_assert!((implied - explicit).abs() <= 1e-9 * (1.0 + implied));
    }

    #[test]
    fn copied_class_is_recovered(seed: u64, k in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..k).flat_map(|c| vec![c; rng.random_range(2..=6)]).collect();
        let source = cloud(&mut rng, labels.len(), 2);
        let pick = rng.random_range(0..k);
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == pick).collect();
        let d = pairwise_distances(&source, &source.select_rows(&rows).unwrap()).unwrap();
        let sol = solve_class_weights_labeled(&d, &labels, k).unwrap();
        prop_assert!(sol.weights.as_slice()[pick] >= 1.0 - 1e-6);
        prop_assert!(sol.objective <= 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_plan_is_feasible_and_deterministic(seed: u64, k in 1usize..=3, m in 1usize..=20) {
        let (d, labels) = instance(seed, k, 8, m);
        let cfg = SinkhornConfig { epsilon: Epsilon::MeanCostFraction(0.01), ..SinkhornConfig::default() };
        let sol = sinkhorn_class_weights(&d, &labels, k, &cfg).unwrap();
        let again = sinkhorn_class_weights(&d, &labels, k, &cfg).unwrap();
        prop_assert!(sol.plan.plan.iter().zip(&again.plan.plan).all(|(a, b)| a.to_bits() == b.to_bits()));

        let (n, m) = (sol.plan.rows, sol.plan.cols);
        for j in 0..m {
            let col: f64 = (0..n).map(|i| sol.plan.plan[i * m + j]).sum();
            prop_assert!((col - 1.0 / m as f64).abs() <= 1e-9);
        }
        let row_sums: Vec<f64> = (0..n).map(|i| sol.plan.plan[i * m..(i + 1) * m].iter().sum()).collect();
        for c in 0..k {
            let block: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| row_sums[i]).collect();
            let spread = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - block.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(spread <= 1e-6);
        }
        let lp = solve_class_weights_labeled(&d, &labels, k).unwrap().objective;
        prop_assert!(sol.objective >= lp - 1e-9);
    }

    #[test]
    fn full_batch_descent_never_raises_the_loss(seed: u64, k in 2usize..=4, dim in 1usize..=4, n in 2usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = random_head(&mut rng, k, dim, 1.0);
        let x = FeatureMatrix::new(n, dim, random_matrix(&mut rng, n, dim)).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probs = marginal(&mut rng, n);
        let (mut prev, _) = weighted_loss_and_gradient(&head, &x, &y, &probs, 1e-4);
        for _ in 0..50 {
            let (_, grad) = weighted_loss_and_gradient(&head, &x, &y, &probs, 1e-4);
            let stepped: Vec<f64> = head.matrix().iter().zip(&grad).map(|(w, g)| w - 1e-3 * g).collect();
            head = SoftmaxHead::new(head.classes().to_vec(), dim, stepped).unwrap();
            let (loss, _) = weighted_loss_and_gradient(&head, &x, &y, &probs, 1e-4);
            prop_assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn zero_one_error_matches_per_class_accuracy(seed: u64, k in 2usize..=5, n in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = random_head(&mut rng, k, 3, 2.0);
        let x = FeatureMatrix::new(n, 3, random_matrix(&mut rng, n, 3)).unwrap();
        let mut raw: Vec<u64> = (0..n).map(|_| rng.random_range(0..k as u64)).collect();
        raw[0] = 0;
        let data = LabeledDataset::from_raw_labels(x, &raw).unwrap();
        let r = evaluate(&head, &data).unwrap();
        let counts = data.class_counts();
        let weighted: f64 = r.per_class_accuracy.iter().zip(counts).map(|(a, &c)| a * c as f64).sum::<f64>() / n as f64;
        prop_assert!((1.0 - weighted - r.zero_one_error).abs() <= 1e-9);
    }

    #[test]
    fn unchanged_head_adds_nothing_to_the_bound(eps in 0.0f64..1.0, w in 0.0f64..10.0, rho in 0.0f64..5.0, alpha in 0.0f64..1.0, beta in 0.0f64..50.0) {
        let bound = assemble_transfer_bound(eps, w, rho, alpha, beta, 0.0);
        prop_assert_eq!(bound.to_bits(), (eps + rho.max(1.0) * w).to_bits());
    }
}

/// On open-set fixtures WaSS puts at least uniform's mass on the classes the
/// target shares with the source.
#[test]
fn wass_upweights_overlapping_classes() {
    for seed in 0..8u64 {
        let spec = ScenarioSpec {
            kind: ScenarioKind::Oda,
            k_source: 8,
            k_target: 4,
            overlap: 2,
            near: 1,
            seed,
            ..ScenarioSpec::default()
        };
        let s = make_scenario(&spec).unwrap();
        let d = pairwise_distances(s.source.features(), s.target_train.features()).unwrap();
        let k = s.source.num_classes();
        let sol = select_class_weights(&d, s.source.labels(), k, SolverChoice::Exact, &SinkhornConfig::default()).unwrap();
        let uniform = baseline_weights(Baseline::All, &s.source, s.target_train.features(), seed, 3).unwrap();
        let on_overlap = |w: &[f64]| -> f64 {
            s.source
                .class_ids()
                .iter()
                .zip(w)
                .filter(|(id, _)| s.overlap_ids.contains(id))
                .map(|(_, v)| v)
                .sum()
        };
        let wass = on_overlap(sol.weights.as_slice());
        let flat = on_overlap(uniform.as_slice());
        assert!(wass >= flat, "seed {seed}: wass {wass} < uniform {flat}");
    }
}
