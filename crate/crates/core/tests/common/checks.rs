//! Criterion checks parameterized by size. Each returns a one-line summary
//! on success and a description of the first violation on failure.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsealloc::data::{read_activations, write_activations, ActivationStore};
use sparsealloc::eval::progressive_curve;
use sparsealloc::losses::nfm_losses;
use sparsealloc::model::{forward, preprocess};
use sparsealloc::zipf::{compute_feature_budgets, fit_zipf};
use sparsealloc::{AllocationPolicy, Criterion, SaeParams};

use super::*;

pub type Check = Result<String, String>;

pub fn mask_oracle(matrices: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    for case in 0..matrices {
        let b = rng.random_range(1..=8);
        let f = rng.random_range(1..=8);
        let z = distinct_matrix(b, f, &mut rng);
        let k = rng.random_range(1..=f);
        let budgets: Vec<usize> = (0..f).map(|_| rng.random_range(1..=b)).collect();
        let m_total = rng.random_range(1..=b * f);
        for criterion in [Criterion::ByValue, Criterion::ByMagnitude] {
            let policies = [
                (AllocationPolicy::token_choice(k), k * b),
                (
                    AllocationPolicy::feature_choice(budgets.clone()),
                    budgets.iter().sum(),
                ),
                (AllocationPolicy::mutual_choice(m_total), m_total),
            ];
            for (policy, cardinality) in policies {
                let policy = policy.with_criterion(criterion);
                let got = build(&z, &policy);
                let want = oracle_mask(&z, &policy);
                if got != want {
                    return Err(format!(
                        "case {case}: {:?} {criterion:?} differs on {z:?}",
                        policy.kind
                    ));
                }
                let ones = got.iter().filter(|&&s| s).count();
                if ones != cardinality {
                    return Err(format!(
                        "case {case}: {:?} selected {ones}, want {cardinality}",
                        policy.kind
                    ));
                }
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{matrices} matrices, {compared} masks equal to sort oracles"
    ))
}

/// `(policy label, policy)` for an `N=8, F=16, B=4` problem.
fn grad_policies() -> Vec<(&'static str, AllocationPolicy)> {
    let budgets = compute_feature_budgets(2.0, 16, 4, 6.8, 1.0, 4).unwrap().m;
    vec![
        ("tc", AllocationPolicy::token_choice(3)),
        ("fc", AllocationPolicy::feature_choice(budgets)),
        ("mc", AllocationPolicy::mutual_choice(10)),
    ]
}

pub fn gradients(seeds: u64, h: f64, tol: f64) -> Check {
    let weights = all_terms();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut redraws = 0;
    for (label, policy) in grad_policies() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + label.len() as u64);
            let mut attempts = 0;
            let result = loop {
                attempts += 1;
                if attempts > 50 {
                    return Err(format!(
                        "{label} seed {seed}: no tie-free point in 50 draws"
                    ));
                }
                let params = random_params(8, 16, &mut rng);
                let x = random_rows(4, 8, &mut rng);
                let trace = forward(&params, x.view(), &policy).unwrap();
                let aux = aux_sets_for(&trace.mask, 4);
                if aux.dead.is_empty() || aux.dying.is_empty() {
                    continue;
                }
                match gradient_check(&params, &x, &policy, &weights, &aux, h) {
                    Some(r) => break r,
                    None => redraws += 1,
                }
            };
            if result.max_rel_err.is_nan() || result.max_rel_err > tol {
                return Err(format!(
                    "{label} seed {seed}: max relative error {:.3e} > {tol:e}",
                    result.max_rel_err
                ));
            }
            worst = worst.max(result.max_rel_err);
            checked += result.params_checked;
        }
    }
    Ok(format!(
        "3 policies x {seeds} seeds, {checked} partials, max rel err {worst:.2e} \
         ({redraws} non-tie-free draws skipped; fc zeroes aux and nfm by rule)"
    ))
}

pub fn algorithm_one(random_cases: usize, seed: u64) -> Check {
    let m = compute_feature_budgets(2.0, 4, 10, 0.0, 1.0, usize::MAX)
        .map_err(|e| e.to_string())?
        .m;
    if m != [9, 4, 3, 2] {
        return Err(format!("uncapped budgets {m:?}, want [9, 4, 3, 2]"));
    }
    let m = compute_feature_budgets(2.0, 4, 10, 0.0, 1.0, 5)
        .map_err(|e| e.to_string())?
        .m;
    if m != [5, 4, 3, 2] {
        return Err(format!("m_max=5 budgets {m:?}, want [5, 4, 3, 2]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..random_cases {
        let f = rng.random_range(1..=2048);
        let b = rng.random_range(1..=4096);
        let k = rng.random_range(0.5..64.0);
        let alpha = rng.random_range(0.2..2.0);
        let beta = rng.random_range(0.0..20.0);
        let m_max = if rng.random_bool(0.3) {
            usize::MAX
        } else {
            rng.random_range(1..=b)
        };
        let m = compute_feature_budgets(k, f, b, beta, alpha, m_max)
            .map_err(|e| e.to_string())?
            .m;
        let bound = b as f64 * k + f as f64;
        if m.windows(2).any(|w| w[0] < w[1]) {
            return Err(format!("case {case}: budgets not monotone"));
        }
        if m.iter().any(|&v| v < 1 || v > m_max) {
            return Err(format!("case {case}: budget outside [1, {m_max}]"));
        }
        let total: usize = m.iter().sum();
        if total as f64 > bound {
            return Err(format!("case {case}: sum {total} > B*k + F = {bound}"));
        }
    }
    Ok(format!(
        "hand examples exact; {random_cases} random configs monotone, clamped, bounded"
    ))
}

pub fn zipf_round_trip(noise_seeds: u64) -> Check {
    let exact: Vec<f64> = (1..=100).map(|r| 1000.0 / (r as f64 + 6.8)).collect();
    let fit = fit_zipf(&exact, None).map_err(|e| e.to_string())?;
    let (da, db) = (
        (fit.params.alpha - 1.0).abs(),
        (fit.params.beta - 6.8).abs(),
    );
    if !(da <= 1e-6 && db <= 1e-3) {
        return Err(format!(
            "exact curve: |d alpha| {da:.2e}, |d beta| {db:.2e}"
        ));
    }
    let mut alphas = Vec::new();
    for seed in 0..noise_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy: Vec<f64> = exact
            .iter()
            .map(|d| d * rng.random_range(0.9..1.1))
            .collect();
        alphas.push(
            fit_zipf(&noisy, None)
                .map_err(|e| e.to_string())?
                .params
                .alpha,
        );
    }
    let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
    let worst = alphas.iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max);
    if (mean - 1.0).abs() > 0.05 {
        return Err(format!("noisy fits: mean alpha {mean:.4} outside 5%"));
    }
    Ok(format!(
        "exact |d alpha| {da:.1e} |d beta| {db:.1e}; 10% noise over {noise_seeds} seeds: \
         mean alpha {mean:.4}, worst seed off by {:.1}%",
        100.0 * worst
    ))
}

pub fn progressive(trials: u64) -> Check {
    let mut worst_anchor = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Generic model: anchors only.
        let params = random_params(8, 24, &mut rng);
        let x = random_rows(16, 8, &mut rng);
        let k = 5;
        let policy = AllocationPolicy::token_choice(k);
        let curve =
            progressive_curve(&params, x.view(), &policy, &[0, k]).map_err(|e| e.to_string())?;
        let centered = &x - &params.b_pre;
        let bias_only = centered.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64;
        if curve[0].1 != bias_only {
            return Err(format!(
                "seed {seed}: k'=0 gives {} not bias-only {bias_only}",
                curve[0].1
            ));
        }
        let t = forward(&params, x.view(), &policy).unwrap();
        let fwd = sparsealloc::losses::mse_loss(&t);
        worst_anchor = worst_anchor.max((curve[1].1 - fwd).abs());
        if (curve[1].1 - fwd).abs() > 1e-10 {
            return Err(format!(
                "seed {seed}: k'=k gives {} vs forward {fwd}",
                curve[1].1
            ));
        }

        // Orthonormal decoder, matched encoder: each kept code removes its own energy.
        let (n, f) = (16, 12);
        let w = orthonormal_rows(f, n, &mut rng);
        let b_pre: Array1<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
        let params = SaeParams::from_parts(w.clone(), Array1::zeros(f), w, b_pre).unwrap();
        let x = random_rows(32, n, &mut rng);
        let ks: Vec<usize> = (0..=f).collect();
        let policy = AllocationPolicy::token_choice(f).with_rectify(rng.random_bool(0.5));
        let curve =
            progressive_curve(&params, x.view(), &policy, &ks).map_err(|e| e.to_string())?;
        if let Some(w) = curve.windows(2).find(|w| w[1].1 > w[0].1) {
            return Err(format!(
                "seed {seed}: curve rises from k'={} to k'={}",
                w[0].0, w[1].0
            ));
        }
    }
    Ok(format!(
        "{trials} models: k'=0 equals bias-only MSE exactly, k'=k within {worst_anchor:.1e}; \
         orthonormal curves non-increasing"
    ))
}

pub fn preprocessing_norms(batches: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let x = random_rows(64, 32, &mut rng).mapv(|v| v * scale + 5.0);
        let p = preprocess(x.view()).map_err(|e| e.to_string())?;
        for row in p.outer_iter() {
            worst = worst.max((row.dot(&row).sqrt() - 1.0).abs());
            worst = worst.max(row.sum().abs() / row.len() as f64);
        }
    }
    if worst > 1e-6 {
        return Err(format!(
            "preprocessed row off unit norm / zero mean by {worst:.2e}"
        ));
    }
    Ok(format!("{batches} batches, max deviation {worst:.1e}"))
}

pub fn saeact_round_trip(files: u64, dir: &std::path::Path) -> Check {
    let specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE,
        1e-45,
        f32::MAX,
        f32::MIN,
        1.0,
        -1.0,
    ];
    for seed in 0..files {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=96);
        let rows = rng.random_range(0..=200);
        let data: Vec<f32> = (0..d * rows)
            .map(|i| {
                if i % 17 == 0 {
                    specials[i / 17 % specials.len()]
                } else {
                    loop {
                        let v = f32::from_bits(rng.random());
                        if v.is_finite() {
                            break v;
                        }
                    }
                }
            })
            .collect();
        let store = ActivationStore::new(d, data).map_err(|e| e.to_string())?;
        let path = dir.join(format!("rt_{seed}.saeact"));
        write_activations(&store, &path).map_err(|e| e.to_string())?;
        let back = read_activations(&path).map_err(|e| e.to_string())?;
        let bits =
            |s: &ActivationStore| s.payload().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.d_model() != d || back.n_rows() != rows || bits(&back) != bits(&store) {
            return Err(format!("file {seed}: round trip not bit-exact"));
        }
    }
    Ok(format!(
        "{files} files incl. signed zeros, subnormals and extremes, bit-exact"
    ))
}

pub fn nfm(trials: u64) -> Check {
    let mut worst_zero = 0.0f64;
    let mut worst_scale = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=24);
        let f = rng.random_range(2..=n);
        let w = orthonormal_rows(f, n, &mut rng);
        let (a, b) = nfm_losses(w.view()).map_err(|e| e.to_string())?;
        worst_zero = worst_zero.max(a.abs()).max(b.abs());

        let dup = ndarray::concatenate![ndarray::Axis(0), w, w];
        let (_, inf) = nfm_losses(dup.view()).map_err(|e| e.to_string())?;
        if (inf - 1.0).abs() > 1e-12 {
            return Err(format!("seed {seed}: duplicated rows give nfm_inf {inf}"));
        }

        let general = random_rows(f, n, &mut rng);
        let mut scaled = general.clone();
        for mut row in scaled.outer_iter_mut() {
            row *= 10f64.powf(rng.random_range(-3.0..3.0));
        }
        let (g1, g2) = nfm_losses(general.view()).map_err(|e| e.to_string())?;
        let (s1, s2) = nfm_losses(scaled.view()).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((g1 - s1).abs()).max((g2 - s2).abs());
    }
    let pair = ndarray::array![[0.3, -0.4], [0.3, -0.4]];
    let (_, inf) = nfm_losses(pair.view()).map_err(|e| e.to_string())?;
    if (inf - 1.0).abs() > 1e-12 {
        return Err(format!("a duplicated pair gives nfm_inf {inf}"));
    }
    if worst_zero > 1e-12 || worst_scale > 1e-12 {
        return Err(format!(
            "orthonormal nfm up to {worst_zero:.2e}, rescaling changes nfm by {worst_scale:.2e}"
        ));
    }
    Ok(format!(
        "{trials} decoders: orthonormal -> (0, 0) within {worst_zero:.1e}; duplicates -> nfm_inf 1; \
         row rescaling moves nfm by at most {worst_scale:.1e}"
    ))
}
