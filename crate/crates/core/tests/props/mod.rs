//! Property suites for the core library, 100 deterministic cases each.
//! Shared by the `invariants` test target and the acceptance runner.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use ksgm::estimator::{decompose, fit_grams, EigenProblem, EstimatorConfig, PriorSpec, Priors};
use ksgm::preprocess::{center, nonparanormal_gram};
use ksgm::sparsify::{
    threshold_colnorm_top_k, threshold_global, threshold_top_k_rows, Edge, SparseGraph,
    ThresholdMethod,
};
use ksgm::synth::{
    assortativity, brute_force_fit, gen_ar1_precision, gen_er_precision, pr_curve,
    sample_ks_normal, BruteForceConfig,
};
use ksgm::tensor::{
    effective_gram, gram, kron_product, kron_sum_dense, ks_diag_marginal, matricize,
    stridewise_blockwise_trace, unmatricize, Dataset, DenseTensor, GramSet, Modality, Structure,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const CASES: u32 = 100;

pub type Property = fn() -> Result<(), String>;

/// Every core property, by name.
pub fn suite() -> Vec<(&'static str, Property)> {
    vec![
        ("rearrangement_lemma", rearrangement_lemma),
        ("kronecker_sum_vec_lemma", kronecker_sum_vec_lemma),
        (
            "diag_marginal_matches_dense_inverse",
            diag_marginal_matches_dense_inverse,
        ),
        ("matricize_round_trip", matricize_round_trip),
        ("effective_gram_symmetric_psd", effective_gram_symmetric_psd),
        (
            "nonparanormal_monotone_invariance",
            nonparanormal_monotone_invariance,
        ),
        ("center_idempotent", center_idempotent),
        ("nonparanormal_symmetric_psd", nonparanormal_symmetric_psd),
        ("objective_midpoint_convex", objective_midpoint_convex),
        ("precision_commutes_with_gram", precision_commutes_with_gram),
        (
            "gradient_matches_finite_differences",
            gradient_matches_finite_differences,
        ),
        (
            "matches_brute_force_off_diagonals",
            matches_brute_force_off_diagonals,
        ),
        ("wishart_dof_monotone", wishart_dof_monotone),
        ("objective_trace_monotone", objective_trace_monotone),
        ("partition_matches_l1_support", partition_matches_l1_support),
        (
            "thresholds_permutation_equivariant",
            thresholds_permutation_equivariant,
        ),
        ("global_keeps_ceil_fraction", global_keeps_ceil_fraction),
        ("sampler_recovers_precision", sampler_recovers_precision),
        ("generators_are_spd", generators_are_spd),
        ("pr_area_monotone_invariant", pr_area_monotone_invariant),
        ("assortativity_invariances", assortativity_invariances),
    ]
}

/// Runs `test` on `CASES` values drawn from a fixed-seed generator.
pub fn check<S>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_symmetric(rng: &mut ChaCha20Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, d, d);
    (&a + a.transpose()) * 0.5
}

fn random_spd(rng: &mut ChaCha20Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, d, d);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn random_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> DenseTensor {
    let len = shape.iter().product();
    DenseTensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn identity(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `I_before ⊗ m ⊗ I_after`.
fn embed(m: &DMatrix<f64>, before: usize, after: usize) -> DMatrix<f64> {
    kron_product(&kron_product(&identity(before), m), &identity(after))
}

fn shape_strategy(max_rank: usize, max_size: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=max_size, 1..=max_rank)
}

pub fn rearrangement_lemma() -> Result<(), String> {
    check(
        (
            shape_strategy(4, 4),
            any::<u64>(),
            any::<prop::sample::Index>(),
        ),
        |(shape, seed, ax)| {
            let mut r = rng(seed);
            let ax = ax.index(shape.len());
            let t = random_tensor(&mut r, &shape);
            let psi = random_symmetric(&mut r, shape[ax]);
            let rest: usize = shape.iter().product::<usize>() / shape[ax];
            let m = matricize(&t, ax).unwrap();
            let vm = DVector::from_row_slice(m.transpose().as_slice());
            let lhs = (vm.transpose() * kron_product(&psi, &identity(rest)) * &vm)[0];
            let v = DVector::from_row_slice(t.values());
            let before: usize = shape[..ax].iter().product();
            let after: usize = shape[ax + 1..].iter().product();
            let rhs = (v.transpose() * embed(&psi, before, after) * &v)[0];
            prop_assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12),
                "{lhs} vs {rhs}"
            );
            Ok(())
        },
    )
}

pub fn kronecker_sum_vec_lemma() -> Result<(), String> {
    check(
        (prop::collection::vec(1..=4usize, 3), any::<u64>()),
        |(shape, seed)| {
            let mut r = rng(seed);
            let t = random_tensor(&mut r, &shape);
            let psis: Vec<DMatrix<f64>> =
                shape.iter().map(|&d| random_symmetric(&mut r, d)).collect();
            let v = DVector::from_row_slice(t.values());
            let lhs = (v.transpose() * kron_sum_dense(&psis, 4096).unwrap() * &v)[0];
            let names: Vec<String> = (0..3).map(|i| format!("a{i}")).collect();
            let modality = Modality::new("m", names.clone(), vec![t]).unwrap();
            let rhs: f64 = names
                .iter()
                .zip(&psis)
                .map(|(n, p)| (gram(&modality, n).unwrap() * p).trace())
                .sum();
            prop_assert!(
                rel_err(lhs, rhs) < 1e-10 || (lhs - rhs).abs() < 1e-12,
                "{lhs} vs {rhs}"
            );
            Ok(())
        },
    )
}

pub fn diag_marginal_matches_dense_inverse() -> Result<(), String> {
    let shapes = shape_strategy(4, 6).prop_filter("at most 256 entries", |s| {
        s.iter().product::<usize>() <= 256
    });
    check(
        (shapes, any::<u64>(), any::<prop::sample::Index>()),
        |(shape, seed, target)| {
            let mut r = rng(seed);
            let target = target.index(shape.len());
            let eigs: Vec<Vec<f64>> = shape
                .iter()
                .map(|&d| (0..d).map(|_| r.random_range(0.1..3.0)).collect())
                .collect();
            let slices: Vec<&[f64]> = eigs.iter().map(Vec::as_slice).collect();
            let fast = ks_diag_marginal(&slices, target).unwrap();
            let diags: Vec<DMatrix<f64>> = eigs
                .iter()
                .map(|e| DMatrix::from_diagonal(&DVector::from_vec(e.clone())))
                .collect();
            let inv = kron_sum_dense(&diags, 256).unwrap().try_inverse().unwrap();
            let before: usize = shape[..target].iter().product();
            let after: usize = shape[target + 1..].iter().product();
            let dense = stridewise_blockwise_trace(&inv, before, after).unwrap();
            for (i, f) in fast.iter().enumerate() {
                prop_assert!(
                    rel_err(*f, dense[(i, i)]) < 1e-9,
                    "entry {i}: {f} vs {}",
                    dense[(i, i)]
                );
            }
            Ok(())
        },
    )
}

pub fn matricize_round_trip() -> Result<(), String> {
    check((shape_strategy(5, 4), any::<u64>()), |(shape, seed)| {
        let t = random_tensor(&mut rng(seed), &shape);
        for ax in 0..shape.len() {
            let m = matricize(&t, ax).unwrap();
            prop_assert_eq!(m.nrows(), shape[ax]);
            prop_assert_eq!(&unmatricize(&m, &shape, ax).unwrap(), &t);
        }
        Ok(())
    })
}

/// Random dataset: 1–4 axes of size 1–4, 1–3 modalities, 1–3 samples each.
fn random_dataset(seed: u64, max_axes: usize, max_size: usize) -> Dataset {
    let k = rng(seed ^ 0xa5e5).random_range(1..=max_axes);
    random_dataset_with_axes(seed, k, max_size)
}

/// Random sizes, modality layout and samples over exactly `k` axes.
pub fn random_dataset_with_axes(seed: u64, k: usize, max_size: usize) -> Dataset {
    let mut r = rng(seed);
    let sizes: Vec<usize> = (0..k).map(|_| r.random_range(1..=max_size)).collect();
    let mut modalities: Vec<Vec<usize>> = (0..r.random_range(1..=3))
        .map(|_| {
            let mut axes: Vec<usize> = (0..k).filter(|_| r.random_bool(0.6)).collect();
            if axes.is_empty() {
                axes.push(r.random_range(0..k));
            }
            axes.shuffle(&mut r);
            axes
        })
        .collect();
    let unused: Vec<usize> = (0..k)
        .filter(|a| !modalities.iter().any(|m| m.contains(a)))
        .collect();
    if !unused.is_empty() {
        modalities.push(unused);
    }
    let mut ds = Dataset::new();
    for (a, &d) in sizes.iter().enumerate() {
        ds.add_axis(format!("a{a}"), d).unwrap();
    }
    for (g, axes) in modalities.iter().enumerate() {
        let shape: Vec<usize> = axes.iter().map(|&a| sizes[a]).collect();
        let samples = (0..r.random_range(1..=3))
            .map(|_| random_tensor(&mut r, &shape))
            .collect();
        let names = axes.iter().map(|a| format!("a{a}")).collect();
        ds.add_modality(Modality::new(format!("m{g}"), names, samples).unwrap())
            .unwrap();
    }
    ds
}

fn check_symmetric_psd(m: &DMatrix<f64>) -> Result<(), TestCaseError> {
    let scale = m.amax().max(1e-300);
    prop_assert!((m - m.transpose()).amax() <= 1e-12 * scale, "asymmetric");
    let min = m.clone().symmetric_eigenvalues().min();
    prop_assert!(min >= -1e-10 * scale, "min eigenvalue {min}");
    Ok(())
}

pub fn effective_gram_symmetric_psd() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let ds = random_dataset(seed, 4, 5);
        for m in effective_gram(&ds).unwrap().matrices() {
            check_symmetric_psd(m)?;
        }
        Ok(())
    })
}

fn two_axis_modality(seed: u64, rows: usize, cols: usize, samples: usize) -> Modality {
    let mut r = rng(seed);
    let samples = (0..samples)
        .map(|_| random_tensor(&mut r, &[rows, cols]))
        .collect();
    Modality::new("m", vec!["r".into(), "c".into()], samples).unwrap()
}

pub fn nonparanormal_monotone_invariance() -> Result<(), String> {
    check(
        (2..7usize, 2..9usize, 1..3usize, any::<u64>(), 0..3usize),
        |(rows, cols, n, seed, which)| {
            let m = two_axis_modality(seed, rows, cols, n);
            let f = |x: f64| match which {
                0 => x.exp(),
                1 => x * x * x + 2.0 * x,
                _ => 3.0 * x - 7.0,
            };
            let g = m.map_samples(|t| t.map(f)).unwrap();
            for axis in ["r", "c"] {
                prop_assert_eq!(
                    nonparanormal_gram(&m, axis).unwrap(),
                    nonparanormal_gram(&g, axis).unwrap()
                );
            }
            Ok(())
        },
    )
}

pub fn center_idempotent() -> Result<(), String> {
    check((shape_strategy(4, 5), any::<u64>()), |(shape, seed)| {
        let t = random_tensor(&mut rng(seed), &shape);
        let once = center(&t);
        let twice = center(&once);
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
        Ok(())
    })
}

pub fn nonparanormal_symmetric_psd() -> Result<(), String> {
    check(
        (2..8usize, 2..8usize, 1..3usize, any::<u64>()),
        |(rows, cols, n, seed)| {
            let m = two_axis_modality(seed, rows, cols, n);
            for axis in ["r", "c"] {
                check_symmetric_psd(&nonparanormal_gram(&m, axis).unwrap())?;
            }
            Ok(())
        },
    )
}

/// Eigenvalue problem whose linear term comes from random data, so the
/// objective is bounded below.
fn data_problem(
    seed: u64,
    max_axes: usize,
    max_size: usize,
    log_weight: bool,
) -> (Dataset, EigenProblem) {
    problem_for(random_dataset(seed, max_axes, max_size), seed, log_weight)
}

/// The eigenvalue problem of `ds`, with random prior weights when `log_weight`.
pub fn problem_for(ds: Dataset, seed: u64, log_weight: bool) -> (Dataset, EigenProblem) {
    let grams = effective_gram(&ds).unwrap();
    let p = grams
        .matrices()
        .iter()
        .map(|m| decompose(&(m * 0.5)).unwrap().1)
        .collect();
    let mut r = rng(seed ^ 0x5eed);
    let k = grams.len();
    let weights = (0..k)
        .map(|_| {
            if log_weight {
                r.random_range(0.0..2.0)
            } else {
                0.0
            }
        })
        .collect();
    (
        ds.clone(),
        EigenProblem::new(ds.structure().unwrap(), p, weights).unwrap(),
    )
}

pub fn random_point(r: &mut ChaCha20Rng, problem: &EigenProblem) -> Vec<Vec<f64>> {
    let mut lams = problem.initial_point();
    for (ax, v) in lams.iter_mut().enumerate() {
        for (i, x) in v.iter_mut().enumerate() {
            if !problem.pinned()[ax][i] {
                *x = r.random_range(0.3..3.0);
            }
        }
    }
    lams
}

pub fn objective_midpoint_convex() -> Result<(), String> {
    check((any::<u64>(), any::<bool>()), |(seed, barrier)| {
        let (_, problem) = data_problem(seed, 4, 4, barrier);
        let mut r = rng(seed.wrapping_add(1));
        let a = random_point(&mut r, &problem);
        let b = random_point(&mut r, &problem);
        let t: f64 = r.random_range(0.0..1.0);
        let mid: Vec<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(u, v)| t * u + (1.0 - t) * v)
                    .collect()
            })
            .collect();
        let (fa, fb, fm) = (
            problem.objective(&a).unwrap(),
            problem.objective(&b).unwrap(),
            problem.objective(&mid).unwrap(),
        );
        let bound = t * fa + (1.0 - t) * fb;
        prop_assert!(fm <= bound + 1e-10 * (1.0 + bound.abs()), "{fm} > {bound}");
        Ok(())
    })
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max)
}

pub fn precision_commutes_with_gram() -> Result<(), String> {
    check(
        (2..7usize, 2..7usize, 1..3usize, any::<u64>()),
        |(rows, cols, n, seed)| {
            let mut ds = Dataset::new();
            ds.add_axis("r", rows).unwrap();
            ds.add_axis("c", cols).unwrap();
            ds.add_modality(two_axis_modality(seed, rows, cols, n))
                .unwrap();
            let grams = effective_gram(&ds).unwrap();
            let fit = fit_grams(
                &grams,
                &ds.structure().unwrap(),
                &Priors::new(),
                &EstimatorConfig::default(),
            )
            .unwrap();
            prop_assert!(fit.converged);
            for (s, spec) in grams.matrices().iter().zip(&fit.spectra) {
                let psi = spec.precision();
                let comm = &psi * s - s * &psi;
                prop_assert!(
                    inf_norm(&comm) < 1e-6 * inf_norm(s),
                    "commutator {}",
                    inf_norm(&comm)
                );
            }
            Ok(())
        },
    )
}

pub fn gradient_matches_finite_differences() -> Result<(), String> {
    check((any::<u64>(), any::<bool>()), |(seed, barrier)| {
        let (_, problem) = data_problem(seed, 4, 5, barrier);
        let lams = random_point(&mut rng(seed.wrapping_add(2)), &problem);
        let g = problem.gradient(&lams).unwrap();
        let scale = g.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
        for ax in 0..lams.len() {
            for i in 0..lams[ax].len() {
                if problem.pinned()[ax][i] {
                    continue;
                }
                let h = 1e-6 * lams[ax][i];
                let mut up = lams.clone();
                let mut down = lams.clone();
                up[ax][i] += h;
                down[ax][i] -= h;
                let fd = (problem.objective(&up).unwrap() - problem.objective(&down).unwrap())
                    / (2.0 * h);
                prop_assert!(
                    (fd - g[ax][i]).abs() <= 1e-5 * scale,
                    "axis {ax} entry {i}: {fd} vs {}",
                    g[ax][i]
                );
            }
        }
        Ok(())
    })
}

/// Tiny dataset of one modality sampled from random sparse truths, with
/// enough samples for full-rank Gram matrices.
pub fn tiny_instance(seed: u64, shape: &[usize]) -> Dataset {
    let truths: Vec<DMatrix<f64>> = shape
        .iter()
        .enumerate()
        .map(|(a, &d)| gen_er_precision(d, 0.7, seed.wrapping_add(a as u64)).unwrap())
        .collect();
    let samples = sample_ks_normal(&truths, 2 * shape.iter().max().unwrap(), seed).unwrap();
    let names: Vec<String> = (0..shape.len()).map(|a| format!("a{a}")).collect();
    let mut ds = Dataset::new();
    for (n, &d) in names.iter().zip(shape) {
        ds.add_axis(n, d).unwrap();
    }
    ds.add_modality(Modality::new("m", names, samples).unwrap())
        .unwrap();
    ds
}

/// Largest off-diagonal gap between the estimator and the dense oracle.
pub fn brute_force_gap(ds: &Dataset) -> f64 {
    let config = EstimatorConfig {
        tolerance: 1e-12,
        max_iterations: 10_000,
        ..EstimatorConfig::default()
    };
    let grams = effective_gram(ds).unwrap();
    let fit = fit_grams(&grams, &ds.structure().unwrap(), &Priors::new(), &config).unwrap();
    let oracle = brute_force_fit(ds, &Priors::new(), &BruteForceConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for (spec, b) in fit.spectra.iter().zip(&oracle) {
        let psi = spec.precision();
        for i in 0..psi.nrows() {
            for j in 0..psi.nrows() {
                if i != j {
                    worst = worst.max((psi[(i, j)] - b[(i, j)]).abs());
                }
            }
        }
    }
    worst
}

pub fn matches_brute_force_off_diagonals() -> Result<(), String> {
    check(
        (prop::collection::vec(2..=3usize, 1..=2), any::<u64>()),
        |(shape, seed)| {
            let gap = brute_force_gap(&tiny_instance(seed, &shape));
            prop_assert!(gap < 1e-4, "gap {gap}");
            Ok(())
        },
    )
}

pub fn wishart_dof_monotone() -> Result<(), String> {
    check(
        (1..6usize, any::<u64>(), 0.0..20.0f64, 0.1..20.0f64),
        |(d, seed, extra, step)| {
            let mut r = rng(seed);
            let theta = random_spd(&mut r, d);
            let eps = 1e-3;
            let grams = GramSet::new(vec!["x".into()], vec![identity(d) * eps]).unwrap();
            let structure = Structure::new(vec!["x".into()], vec![d], vec![vec![0]]).unwrap();
            let config = EstimatorConfig {
                tolerance: 1e-12,
                ..EstimatorConfig::default()
            };
            let fitted = |dof: f64| -> Result<(Vec<f64>, Vec<f64>), TestCaseError> {
                let mut priors = Priors::new();
                priors.insert(
                    "x".into(),
                    PriorSpec::Wishart {
                        scale: theta.clone(),
                        dof,
                    },
                );
                let fit = fit_grams(&grams, &structure, &priors, &config)
                    .map_err(|e| fail(e.to_string()))?;
                let spec = &fit.spectra[0];
                // Closed form along the fixed eigenvectors: λ = (1/2 + w)/p.
                let w = 0.5 * (dof - d as f64 - 1.0);
                let closed = spec
                    .gram_eigenvalues
                    .iter()
                    .map(|p| (0.5 + w) / p)
                    .collect();
                Ok((spec.precision_eigenvalues.clone(), closed))
            };
            let low = d as f64 + 1.0 + extra;
            let (a, ca) = fitted(low)?;
            let (b, cb) = fitted(low + step)?;
            for i in 0..d {
                prop_assert!(
                    rel_err(a[i], ca[i]) < 1e-8,
                    "closed form {} vs {}",
                    a[i],
                    ca[i]
                );
                prop_assert!(
                    rel_err(b[i], cb[i]) < 1e-8,
                    "closed form {} vs {}",
                    b[i],
                    cb[i]
                );
                prop_assert!(b[i] > a[i], "eigenvalue {i} fell from {} to {}", a[i], b[i]);
            }
            Ok(())
        },
    )
}

pub fn objective_trace_monotone() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let ds = random_dataset(seed, 3, 5);
        let grams = effective_gram(&ds).unwrap();
        let fit = fit_grams(
            &grams,
            &ds.structure().unwrap(),
            &Priors::new(),
            &EstimatorConfig::default(),
        )
        .map_err(|e| fail(e.to_string()))?;
        for w in fit.objective_trace.windows(2) {
            prop_assert!(
                w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()),
                "objective rose from {} to {}",
                w[0],
                w[1]
            );
        }
        Ok(())
    })
}

/// Components of the graph with an edge wherever `keep(i, j)`, by BFS.
fn bfs_components(d: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut label = vec![usize::MAX; d];
    let mut next = 0;
    for start in 0..d {
        if label[start] != usize::MAX {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(v) = queue.pop_front() {
            for u in 0..d {
                if u != v && label[u] == usize::MAX && keep(v, u) {
                    label[u] = next;
                    queue.push_back(u);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn partition_matches_l1_support() -> Result<(), String> {
    check(
        (
            prop::collection::vec(1..=4usize, 1..=3),
            2..6usize,
            any::<u64>(),
        ),
        |(blocks, cols, seed)| {
            let mut r = rng(seed);
            let rho = 0.5;
            let d: usize = blocks.iter().sum();
            let mut s1 = DMatrix::zeros(d, d);
            let mut offset = 0;
            for &b in &blocks {
                let a = DMatrix::from_fn(b, b, |_, _| r.random_range(-0.3..0.3));
                let block =
                    DMatrix::from_element(b, b, 1.0) + &a * a.transpose() + identity(b) * 0.2;
                s1.view_mut((offset, offset), (b, b)).copy_from(&block);
                offset += b;
            }
            let mut s2 = random_spd(&mut r, cols);
            s2 *= s1.trace() / s2.trace();
            let grams = GramSet::new(vec!["r".into(), "c".into()], vec![s1.clone(), s2]).unwrap();
            let structure = Structure::new(
                vec!["r".into(), "c".into()],
                vec![d, cols],
                vec![vec![0, 1]],
            )
            .unwrap();
            // The objective carries ½·tr(SΨ), so strength ρ/2 pairs with threshold ρ.
            let config = EstimatorConfig {
                l1_strength: rho / 2.0,
                ..EstimatorConfig::default()
            };
            let fit = fit_grams(&grams, &structure, &Priors::new(), &config)
                .map_err(|e| fail(e.to_string()))?;
            let psi = fit.spectra[0].precision();
            let from_s = bfs_components(d, |i, j| s1[(i, j)].abs() >= rho);
            let from_psi = bfs_components(d, |i, j| psi[(i, j)].abs() >= 1e-9);
            prop_assert_eq!(from_s, from_psi);
            Ok(())
        },
    )
}

fn edge_set(g: &SparseGraph) -> Vec<(usize, usize, u64)> {
    let mut v: Vec<(usize, usize, u64)> = g
        .edges
        .iter()
        .map(|e| (e.i, e.j, e.weight.to_bits()))
        .collect();
    v.sort();
    v
}

pub fn thresholds_permutation_equivariant() -> Result<(), String> {
    check(
        (2..9usize, any::<u64>(), 0.05..1.0f64, 1..4usize),
        |(d, seed, keep, k)| {
            let mut r = rng(seed);
            let mut m = random_symmetric(&mut r, d);
            for i in 0..d {
                for j in 0..i {
                    if r.random_bool(0.2) {
                        m[(i, j)] = 0.0;
                        m[(j, i)] = 0.0;
                    }
                }
            }
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut r);
            // Vertex v of `m` is vertex perm[v] of `pm`.
            let pm = DMatrix::from_fn(d, d, |i, j| {
                let inv = |x: usize| perm.iter().position(|&p| p == x).unwrap();
                m[(inv(i), inv(j))]
            });
            let relabel = |g: &SparseGraph| -> SparseGraph {
                let edges = g
                    .edges
                    .iter()
                    .map(|e| Edge {
                        i: perm[e.i].min(perm[e.j]),
                        j: perm[e.i].max(perm[e.j]),
                        weight: e.weight,
                    })
                    .collect();
                SparseGraph::new("", d, g.method, g.parameter, edges).unwrap()
            };
            let pairs = [
                (threshold_global(&m, keep), threshold_global(&pm, keep)),
                (threshold_top_k_rows(&m, k), threshold_top_k_rows(&pm, k)),
                (
                    threshold_colnorm_top_k(&m, k),
                    threshold_colnorm_top_k(&pm, k),
                ),
            ];
            for (a, b) in pairs {
                let (a, b) = (a.unwrap(), b.unwrap());
                let adj = a.adjacency();
                prop_assert_eq!(&adj, &adj.transpose());
                prop_assert!(a.edges.iter().all(|e| e.i < e.j));
                prop_assert_eq!(edge_set(&relabel(&a)), edge_set(&b));
            }
            Ok(())
        },
    )
}

pub fn global_keeps_ceil_fraction() -> Result<(), String> {
    check(
        (2..12usize, any::<u64>(), 0.001..=1.0f64, 0.0..0.8f64),
        |(d, seed, keep, zeros)| {
            let mut r = rng(seed);
            let mut m = random_symmetric(&mut r, d);
            for i in 0..d {
                for j in 0..i {
                    if r.random_bool(zeros) {
                        m[(i, j)] = 0.0;
                        m[(j, i)] = 0.0;
                    }
                }
            }
            let nonzero = (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
                .filter(|&(i, j)| m[(i, j)] != 0.0)
                .count();
            let g = threshold_global(&m, keep).unwrap();
            prop_assert_eq!(g.edges.len(), (keep * nonzero as f64).ceil() as usize);
            Ok(())
        },
    )
}

/// SPD truth with partial correlations well away from zero.
fn strong_truth(r: &mut ChaCha20Rng, d: usize) -> DMatrix<f64> {
    let mut m = identity(d);
    for i in 0..d {
        for j in 0..i {
            let w = r.random_range(0.3..0.45) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
    }
    m
}

pub fn sampler_recovers_precision() -> Result<(), String> {
    check(
        (prop::collection::vec(1..=3usize, 1..=2), any::<u64>()),
        |(shape, seed)| {
            let mut r = rng(seed);
            let truths: Vec<DMatrix<f64>> =
                shape.iter().map(|&d| strong_truth(&mut r, d)).collect();
            let n = 400_000;
            let samples = sample_ks_normal(&truths, n, seed).unwrap();
            let len = samples[0].len();
            let mut cov = DMatrix::<f64>::zeros(len, len);
            for s in &samples {
                cov.ger(
                    1.0,
                    &DVector::from_row_slice(s.values()),
                    &DVector::from_row_slice(s.values()),
                    1.0,
                );
            }
            cov /= n as f64;
            let empirical = cov.try_inverse().unwrap();
            let truth = kron_sum_dense(&truths, 64).unwrap();
            for i in 0..len {
                for j in 0..len {
                    if truth[(i, j)].abs() >= 0.1 {
                        prop_assert!(
                            rel_err(empirical[(i, j)], truth[(i, j)]) < 0.05,
                            "entry ({i}, {j}): {} vs {}",
                            empirical[(i, j)],
                            truth[(i, j)]
                        );
                    }
                }
            }
            Ok(())
        },
    )
}

pub fn generators_are_spd() -> Result<(), String> {
    check(
        (1..40usize, 0.0..=1.0f64, any::<u64>(), -0.99..0.99f64),
        |(d, p, seed, phi)| {
            for m in [
                gen_er_precision(d, p, seed).unwrap(),
                gen_ar1_precision(d, phi).unwrap(),
            ] {
                prop_assert_eq!(&m, &m.transpose());
                let min = m.symmetric_eigenvalues().min();
                prop_assert!(min > 0.0, "min eigenvalue {min}");
            }
            Ok(())
        },
    )
}

pub fn pr_area_monotone_invariant() -> Result<(), String> {
    check((3..12usize, any::<u64>(), 0..3usize), |(d, seed, which)| {
        let mut r = rng(seed);
        let scores = DMatrix::from_fn(d, d, |_, _| r.random_range(0.0..1.0));
        let scores = (&scores + scores.transpose()) * 0.5;
        let mut truth = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                if r.random_bool(0.3) {
                    truth[(i, j)] = 1.0;
                    truth[(j, i)] = 1.0;
                }
            }
        }
        truth[(0, 1)] = 1.0;
        truth[(1, 0)] = 1.0;
        let f = |x: f64| match which {
            0 => x.exp(),
            1 => 10.0 * x + 3.0,
            _ => x.sqrt(),
        };
        let a = pr_curve(&scores, &truth).unwrap().area;
        let b = pr_curve(&scores.map(f), &truth).unwrap().area;
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        Ok(())
    })
}

pub fn assortativity_invariances() -> Result<(), String> {
    check(
        (2..12usize, any::<u64>(), 1..4usize),
        |(d, seed, classes)| {
            let mut r = rng(seed);
            let labels: Vec<usize> = (0..d).map(|_| r.random_range(0..=classes)).collect();
            let mut edges: Vec<(usize, usize)> = (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
                .filter(|_| r.random_bool(0.4))
                .collect();
            if edges.is_empty() {
                edges.push((0, 1));
            }
            let graph = |pairs: &[(usize, usize)]| {
                let edges = pairs
                    .iter()
                    .map(|&(i, j)| Edge {
                        i: i.min(j),
                        j: i.max(j),
                        weight: 1.0,
                    })
                    .collect();
                SparseGraph::new("", d, ThresholdMethod::Global, 1.0, edges).unwrap()
            };
            let base = assortativity(&graph(&edges), &labels).ok();
            let names: BTreeMap<usize, String> = (0..=classes)
                .map(|c| (c, format!("class-{}", 7 * (classes - c))))
                .collect();
            let renamed: Vec<&String> = labels.iter().map(|l| &names[l]).collect();
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut r);
            let moved: Vec<(usize, usize)> =
                edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
            let mut moved_labels = vec![0; d];
            for v in 0..d {
                moved_labels[perm[v]] = labels[v];
            }
            for other in [
                assortativity(&graph(&edges), &renamed).ok(),
                assortativity(&graph(&moved), &moved_labels).ok(),
            ] {
                match (base, other) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                    (None, None) => {}
                    _ => return Err(fail(format!("definedness differs: {base:?} vs {other:?}"))),
                }
            }
            Ok(())
        },
    )
}
