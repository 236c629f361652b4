//! Acceptance criteria 1-11. Each test prints one `criterion N: PASS|FAIL` line
//! (visible with `--nocapture`). Criteria 4 and 6 do not hold as stated: their
//! literal assertions are `#[ignore]`d and run with `--ignored`, and a companion
//! test prints the FAIL line and pins the measured violation.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use wass_core::bounds::{
    bound_report, largest_singular_value, softmax_lipschitz_constant, verify_softmax_lipschitz,
};
use wass_core::data::{FeatureMatrix, LabeledDataset};
use wass_core::distance::pairwise_distances;
use wass_core::experiment::{run_experiment, CellStatus, ExperimentConfig};
use wass_core::ot::GAP_TOL;
use wass_core::pipeline::{run_pipeline, weighted_loss_and_gradient, Method, SoftmaxHead};
use wass_core::select::{brute_force_class_weights_labeled, select_class_weights, solve_class_weights_labeled, SolverChoice};
use wass_core::sinkhorn::{Epsilon, SinkhornConfig};
use wass_core::synth::make_scenario;
use wass_core::verify::{
    decomposition_suite, error_difference_suite, induced_error_suite, random_head, random_matrix, VerifyOptions,
};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn within(limit_s: u64, start: Instant) -> bool {
    start.elapsed() < Duration::from_secs(limit_s)
}

/// `k` classes of 2-D points, class sizes in `sizes`, plus `m` target points.
fn random_instance(rng: &mut ChaCha8Rng, sizes: &[usize], m: usize) -> (LabeledDataset, FeatureMatrix) {
    let n: usize = sizes.iter().sum();
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (c, &size) in sizes.iter().enumerate() {
        let (cx, cy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        for _ in 0..size {
            values.push(cx + rng.random_range(-1.0..1.0));
            values.push(cy + rng.random_range(-1.0..1.0));
            labels.push(c as u64);
        }
    }
    let source = LabeledDataset::from_raw_labels(FeatureMatrix::new(n, 2, values).unwrap(), &labels).unwrap();
    let target = FeatureMatrix::new(m, 2, (0..2 * m).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    (source, target)
}

fn random_sizes(rng: &mut ChaCha8Rng, k: usize, max_total: usize) -> Vec<usize> {
    let per = max_total / k;
    (0..k).map(|_| rng.random_range(1..=per)).collect()
}

#[test]
fn criterion_01_lp_matches_grid_oracle() {
    let start = Instant::now();
    let rows: Vec<(f64, f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let k = rng.random_range(1..=3);
            let sizes = random_sizes(&mut rng, k, 30);
            let m = rng.random_range(1..=30);
            let (source, target) = random_instance(&mut rng, &sizes, m);
            let d = pairwise_distances(source.features(), &target).unwrap();
            let lp = solve_class_weights_labeled(&d, source.labels(), k).unwrap();
            let (_, grid) = brute_force_class_weights_labeled(&d, source.labels(), k, 0.02).unwrap();
            (lp.objective, grid, lp.duality_gap.unwrap())
        })
        .collect();
    let elapsed = start.elapsed();
    let worst_excess = rows.iter().map(|(lp, grid, _)| lp - grid).fold(f64::NEG_INFINITY, f64::max);
    let gaps_ok = rows.iter().all(|(lp, _, gap)| *gap <= GAP_TOL * (1.0 + lp));
    let pass = worst_excess <= 1e-7 && gaps_ok && elapsed < Duration::from_secs(60);
    report(1, pass, format!("max lp - grid = {worst_excess:.3e}, gaps ok = {gaps_ok}, {elapsed:.2?}"));
    assert!(worst_excess <= 1e-7);
    assert!(gaps_ok);
    assert!(elapsed < Duration::from_secs(60));
}

#[test]
fn criterion_02_exact_recovery_of_a_copied_class() {
    let start = Instant::now();
    let mut worst_weight = f64::INFINITY;
    let mut worst_objective = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let k = rng.random_range(2..=4);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(3..=10)).collect();
        let (source, _) = random_instance(&mut rng, &sizes, 1);
        let pick = rng.random_range(0..k);
        let mut rows: Vec<usize> = (0..source.len()).filter(|&r| source.labels()[r] == pick).collect();
        // same multiset, different order
        rows.reverse();
        let target = source.features().select_rows(&rows).unwrap();
        let d = pairwise_distances(source.features(), &target).unwrap();
        let sol = solve_class_weights_labeled(&d, source.labels(), k).unwrap();
        worst_weight = worst_weight.min(sol.weights.as_slice()[pick]);
        worst_objective = worst_objective.max(sol.objective);
    }
    let elapsed = start.elapsed();
    let pass = worst_weight >= 1.0 - 1e-6 && worst_objective <= 1e-7 && within(5, start);
    report(2, pass, format!("min w_i = {worst_weight:.9}, max objective = {worst_objective:.3e}, {elapsed:.2?}"));
    assert!(worst_weight >= 1.0 - 1e-6);
    assert!(worst_objective <= 1e-7);
    assert!(elapsed < Duration::from_secs(5));
}

#[test]
fn criterion_03_sinkhorn_agrees_with_lp() {
    let start = Instant::now();
    let cfg = SinkhornConfig { epsilon: Epsilon::MeanCostFraction(0.001), ..SinkhornConfig::default() };
    let rows: Vec<(f64, f64, bool)> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let k = rng.random_range(1..=4);
            let sizes = random_sizes(&mut rng, k, 60);
            let m = rng.random_range(1..=60);
            let (source, target) = random_instance(&mut rng, &sizes, m);
            let d = pairwise_distances(source.features(), &target).unwrap();
            let lp = solve_class_weights_labeled(&d, source.labels(), k).unwrap();
            let sk = select_class_weights(&d, source.labels(), k, SolverChoice::Sinkhorn, &cfg).unwrap();
            let plan = &sk.plan;
            let (n, m) = (plan.rows, plan.cols);
            let mut feasible = plan.plan.iter().all(|&v| v >= -1e-12);
            for j in 0..m {
                let col: f64 = (0..n).map(|i| plan.plan[i * m + j]).sum();
                feasible &= (col - 1.0 / m as f64).abs() <= 1e-6;
            }
            let row_sums: Vec<f64> = (0..n).map(|i| plan.plan[i * m..(i + 1) * m].iter().sum()).collect();
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| source.labels()[i] == c).collect();
                let first = row_sums[members[0]];
                feasible &= members.iter().all(|&i| (row_sums[i] - first).abs() <= 1e-6);
            }
            (lp.objective, sk.objective, feasible)
        })
        .collect();
    let elapsed = start.elapsed();
    let worst = rows
        .iter()
        .map(|(lp, sk, _)| (sk - lp).abs() - 0.05 * (1.0 + lp))
        .fold(f64::NEG_INFINITY, f64::max);
    let feasible = rows.iter().all(|r| r.2);
    let pass = worst <= 0.0 && feasible && elapsed < Duration::from_secs(120);
    report(3, pass, format!("max |sk - lp| - 0.05(1+lp) = {worst:.3e}, feasible = {feasible}, {elapsed:.2?}"));
    assert!(worst <= 0.0);
    assert!(feasible);
    assert!(elapsed < Duration::from_secs(120));
}

const SOFTMAX_KS: [usize; 4] = [2, 3, 5, 10];

fn softmax_ratios() -> Vec<(usize, f64, f64)> {
    SOFTMAX_KS
        .par_iter()
        .map(|&k| {
            let worst = verify_softmax_lipschitz(k, 100_000, 4000 + k as u64).unwrap();
            (k, worst, softmax_lipschitz_constant(k).unwrap())
        })
        .collect()
}

#[test]
#[ignore = "does not hold: sqrt(K-1)/K is below the true l2-to-l1 Lipschitz constant of softmax (1/sqrt 2)"]
fn criterion_04_softmax_lipschitz_as_stated() {
    assert_eq!(softmax_lipschitz_constant(2).unwrap(), 0.5);
    assert_eq!(softmax_lipschitz_constant(10).unwrap(), 0.3);
    for (k, worst, alpha) in softmax_ratios() {
        assert!(worst <= alpha + 1e-9, "K = {k}: max ratio {worst} > alpha {alpha}");
    }
}

#[test]
fn criterion_04_softmax_lipschitz_reported() {
    let constants_exact =
        softmax_lipschitz_constant(2).unwrap() == 0.5 && softmax_lipschitz_constant(10).unwrap() == 0.3;
    let ratios = softmax_ratios();
    let holds = ratios.iter().all(|(_, worst, alpha)| *worst <= alpha + 1e-9);
    let detail: Vec<String> = ratios
        .iter()
        .map(|(k, worst, alpha)| format!("K={k}: max {worst:.4} vs {alpha:.4}"))
        .collect();
    report(4, holds && constants_exact, format!("constants exact = {constants_exact}; {}", detail.join(", ")));
    assert!(constants_exact);
    // The inequality fails, and by the amount the 1/sqrt(2) supremum predicts.
    let (_, k2, _) = ratios[0];
    assert!(!holds);
    assert!(k2 > 0.5 && k2 <= std::f64::consts::FRAC_1_SQRT_2 + 1e-9);
    for (_, worst, _) in &ratios {
        assert!(*worst <= std::f64::consts::FRAC_1_SQRT_2 + 1e-9);
    }
}

#[test]
fn criterion_05_induced_error_matches_simulation() {
    let suite = induced_error_suite(&VerifyOptions { seed: 5, trials: 20, draws: 1_000_000 }).unwrap();
    report(
        5,
        suite.passed,
        format!("{} cases, {} outside 3 sigma, worst slack {:.3e}", suite.cases, suite.failures, suite.worst_slack),
    );
    assert_eq!(suite.cases, 20);
    assert!(suite.passed);
}

fn decomposition() -> wass_core::verify::SuiteResult {
    decomposition_suite(&VerifyOptions { seed: 6, trials: 200, draws: 0 }).unwrap()
}

#[test]
#[ignore = "does not hold: the decomposition drops the label cost of moving mass between feature atoms"]
fn criterion_06_decomposition_as_stated() {
    let suite = decomposition();
    assert_eq!(suite.cases, 200);
    assert!(suite.worst_slack >= 0.0, "worst slack {}", suite.worst_slack);
}

#[test]
fn criterion_06_decomposition_reported() {
    let suite = decomposition();
    report(
        6,
        suite.passed,
        format!("{} of {} pairs violate, worst slack {:.4}", suite.failures, suite.cases, suite.worst_slack),
    );
    assert_eq!(suite.cases, 200);
    assert!(!suite.passed);
}

#[test]
fn criterion_07_error_difference_bound() {
    let suite = error_difference_suite(&VerifyOptions { seed: 7, trials: 200, draws: 0 }).unwrap();
    report(7, suite.passed, format!("{} cases, worst slack {:.3e}", suite.cases, suite.worst_slack));
    assert_eq!(suite.cases, 200);
    assert!(suite.passed);
}

#[test]
fn criterion_08_transfer_bound_end_to_end() {
    let base = ExperimentConfig::default_dda();
    let rows: Vec<(f64, f64, f64, f64, bool)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let mut spec = base.scenario_for(0, seed);
            spec.per_class_target_train = 100;
            let s = make_scenario(&spec).unwrap();
            let cfg = base.pipeline_config(Method::Wass, seed);
            let out = run_pipeline(&s.source, &s.target_train, &s.target_test, &cfg).unwrap();
            let pre = &out.pretrained.head;
            let fine = &out.finetuned.head;
            let b = bound_report(pre, fine, &s.source, Some(&out.sample_probs), &s.target_test).unwrap();
            let skipped = bound_report(pre, pre, &s.source, Some(&out.sample_probs), &s.target_test).unwrap();
            let collapses = skipped.sigma_max_diff == 0.0 && skipped.bound_value == skipped.base_bound;
            let measured = out.target_eval.induced_error.max(out.target_eval.zero_one_error);
            (measured, b.eps_target, b.bound_value, skipped.bound_value, collapses)
        })
        .collect();
    let holds = rows.iter().all(|(measured, eps_t, bound, _, _)| measured <= bound && eps_t <= bound);
    let collapses = rows.iter().all(|r| r.4);
    let max_eps = rows.iter().map(|r| r.0.max(r.1)).fold(0.0, f64::max);
    let min_bound = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    report(
        8,
        holds && collapses,
        format!("max eps_T = {max_eps:.4}, min bound = {min_bound:.4}, collapses when not fine-tuned = {collapses}"),
    );
    assert!(holds);
    assert!(collapses);
}

#[test]
fn criterion_09_default_experiment_ordering() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default_dda();
    let result = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert!(result.cells.iter().all(|c| c.status == CellStatus::Ok), "every cell completes");

    let mut ordered = true;
    let mut lines = Vec::new();
    for sc in &cfg.scenarios {
        let acc = |m: Method| result.summary(&sc.name, m).unwrap().accuracy_mean;
        let wass = acc(Method::Wass);
        // every scenario plants fewer near classes than source classes, so the
        // closest subset is never uniform and WaSS >= ALL is required everywhere
        assert!(sc.spec.near < sc.spec.k_source);
        ordered &= wass >= acc(Method::Rnd) && wass >= acc(Method::Mn) && wass >= acc(Method::All);
        lines.push(format!(
            "{}: wass {:.4} rnd {:.4} mn {:.4} all {:.4}",
            sc.name,
            wass,
            acc(Method::Rnd),
            acc(Method::Mn),
            acc(Method::All)
        ));
    }

    // WaSS minimizes the transport cost over all class weightings, so within each
    // (scenario, seed) no baseline can reach a smaller W1 to the target.
    let mut dominates = true;
    for c in result.cells.iter().filter(|c| c.method == Method::Wass) {
        let w = c.w1_objective.unwrap();
        for other in result.cells.iter().filter(|o| o.scenario == c.scenario && o.seed == c.seed) {
            dominates &= w <= other.w1_objective.unwrap() + 1e-7 * (1.0 + w);
        }
    }
    let pass = ordered && dominates && elapsed < Duration::from_secs(600);
    report(9, pass, format!("{}; W1 dominance = {dominates}; {elapsed:.2?}", lines.join("; ")));
    assert!(ordered);
    assert!(dominates);
    assert!(elapsed < Duration::from_secs(600));
}

#[test]
fn criterion_10_gradient_matches_finite_differences() {
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + case);
        let k = rng.random_range(2..=6);
        let dim = rng.random_range(1..=6);
        let n = rng.random_range(1..=16);
        let head = random_head(&mut rng, k, dim, 1.0);
        let x = FeatureMatrix::new(n, dim, random_matrix(&mut rng, n, dim)).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let l2 = [0.0, 1e-3, 0.1][case as usize % 3];

        let (_, analytic) = weighted_loss_and_gradient(&head, &x, &y, &probs, l2);
        let h = 1e-5;
        let numeric: Vec<f64> = (0..k * dim)
            .map(|p| {
                let shifted = |delta: f64| {
                    let mut m = head.matrix().to_vec();
                    m[p] += delta;
                    let moved = SoftmaxHead::new(head.classes().to_vec(), dim, m).unwrap();
                    weighted_loss_and_gradient(&moved, &x, &y, &probs, l2).0
                };
                (shifted(h) - shifted(-h)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    report(10, worst <= 1e-5, format!("max relative error {worst:.3e}"));
    assert!(worst <= 1e-5);
}

#[test]
fn criterion_11_power_iteration_matches_svd() {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11_000 + case);
        let rows = rng.random_range(1..=50);
        let cols = rng.random_range(1..=50);
        let m = random_matrix(&mut rng, rows, cols);
        let ours = largest_singular_value(rows, cols, &m).unwrap().value;
        let oracle = nalgebra::DMatrix::from_row_slice(rows, cols, &m)
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max);
        worst = worst.max((ours - oracle).abs() / oracle);
    }
    let diag = largest_singular_value(2, 2, &[3.0, 0.0, 0.0, 4.0]).unwrap().value;
    report(11, worst <= 1e-9 && diag == 4.0, format!("max relative error {worst:.3e}, diag(3,4) -> {diag}"));
    assert!(worst <= 1e-9);
    assert_eq!(diag, 4.0);
}
