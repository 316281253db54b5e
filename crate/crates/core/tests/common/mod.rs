//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sparsealloc::losses::{aux_recon_loss_against, aux_selection, l1_loss, mse_loss, nfm_losses};
use sparsealloc::model::{backward, forward, forward_with_mask};
use sparsealloc::sparsifiers::build_mask;
use sparsealloc::{
    AllocationPolicy, AuxSets, Criterion, LossWeights, PolicyKind, SaeParams, SparsityMask,
};

/// `rows × cols` matrix of distinct values: a shuffled grid with jitter,
/// mixed signs so magnitude and value orderings differ.
pub fn distinct_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let n = rows * cols;
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            (i as f64 + 1.0 + rng.random_range(0.05..0.45))
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        })
        .collect();
    v.shuffle(rng);
    Array2::from_shape_vec((rows, cols), v).unwrap()
}

fn score(c: Criterion, v: f64) -> f64 {
    match c {
        Criterion::ByValue => v,
        Criterion::ByMagnitude => v.abs(),
    }
}

/// Positions of the `take` largest scores among `cells`, by full sort.
fn sorted_top(cells: Vec<((usize, usize), f64)>, take: usize, c: Criterion) -> Vec<(usize, usize)> {
    let mut cells = cells;
    cells.sort_by(|a, b| score(c, b.1).partial_cmp(&score(c, a.1)).unwrap());
    cells.into_iter().take(take).map(|(p, _)| p).collect()
}

/// Brute-force mask for Token, Feature and Mutual Choice.
pub fn oracle_mask(z: &Array2<f64>, policy: &AllocationPolicy) -> Array2<bool> {
    let (b, f) = z.dim();
    let mut out = Array2::from_elem((b, f), false);
    let c = policy.criterion;
    let chosen: Vec<(usize, usize)> = match &policy.kind {
        PolicyKind::TokenChoice { k } => (0..b)
            .flat_map(|t| sorted_top((0..f).map(|j| ((t, j), z[[t, j]])).collect(), *k, c))
            .collect(),
        PolicyKind::FeatureChoice { budgets } => (0..f)
            .flat_map(|j| sorted_top((0..b).map(|t| ((t, j), z[[t, j]])).collect(), budgets[j], c))
            .collect(),
        PolicyKind::MutualChoice { total_budget } => sorted_top(
            z.indexed_iter().map(|(p, &v)| (p, v)).collect(),
            *total_budget,
            c,
        ),
        other => panic!("no oracle for {other:?}"),
    };
    for p in chosen {
        out[p] = true;
    }
    out
}

pub fn random_params<R: Rng>(n: usize, f: usize, rng: &mut R) -> SaeParams {
    let mut g = |r: usize, c: usize, s: f64| {
        Array2::from_shape_fn((r, c), |_| s * rng.sample::<f64, _>(StandardNormal))
    };
    let w_enc = g(f, n, 0.5);
    let w_dec = g(f, n, 0.5);
    let b_enc = g(1, f, 0.1).row(0).to_owned();
    let b_pre = g(1, n, 0.1).row(0).to_owned();
    SaeParams::from_parts(w_enc, b_enc, w_dec, b_pre).unwrap()
}

pub fn random_rows<R: Rng>(b: usize, n: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((b, n), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Loss at `params` with the mask and the auxiliary regression target frozen.
fn frozen_loss(
    params: &SaeParams,
    x: &Array2<f64>,
    mask: &SparsityMask,
    policy: &AllocationPolicy,
    weights: &LossWeights,
    aux: &AuxSets,
    aux_target: &Array2<f64>,
) -> f64 {
    let (w, _) = weights.effective_for(&policy.kind);
    let t = forward_with_mask(params, x.view(), mask, policy).unwrap();
    let mut loss = mse_loss(&t);
    if w.lambda_sparsity > 0.0 {
        loss += w.lambda_sparsity * l1_loss(t.z.view());
    }
    for (set, lambda) in [(&aux.dead, w.lambda_aux_k), (&aux.dying, w.lambda_aux_zipf)] {
        if lambda > 0.0 {
            loss += lambda
                * aux_recon_loss_against(
                    aux_target.view(),
                    t.z_pre.view(),
                    params,
                    set,
                    w.k_aux,
                    w.aux_decode_bias,
                );
        }
    }
    if w.lambda_nfm > 0.0 || w.lambda_nfm_inf > 0.0 {
        let (nfm, inf) = nfm_losses(params.w_dec.view()).unwrap();
        loss += w.lambda_nfm * nfm + w.lambda_nfm_inf * inf;
    }
    loss
}

fn param_slots(p: &mut SaeParams) -> [&mut [f64]; 4] {
    [
        p.w_enc.as_slice_mut().unwrap(),
        p.b_enc.as_slice_mut().unwrap(),
        p.w_dec.as_slice_mut().unwrap(),
        p.b_pre.as_slice_mut().unwrap(),
    ]
}

/// Whether the selection structure at `p` matches the reference point.
fn same_selection(
    p: &SaeParams,
    x: &Array2<f64>,
    policy: &AllocationPolicy,
    mask: &SparsityMask,
    aux: &AuxSets,
    k_aux: usize,
    reference: &[Vec<Vec<usize>>],
) -> bool {
    let t = forward(p, x.view(), policy).unwrap();
    if t.mask != *mask {
        return false;
    }
    // Rectification boundary: no selected affinity may sit at zero.
    if t.mask
        .entries()
        .iter()
        .any(|&(b, f)| t.z_pre[[b, f]].abs() < 1e-6)
    {
        return false;
    }
    aux_sets_selection(&t.z_pre, aux, k_aux) == reference
}

fn aux_sets_selection(z_pre: &Array2<f64>, aux: &AuxSets, k_aux: usize) -> Vec<Vec<Vec<usize>>> {
    [&aux.dead, &aux.dying]
        .iter()
        .map(|set| {
            aux_selection(z_pre.view(), set, k_aux)
                .into_iter()
                .map(|row| row.into_iter().map(|(f, _)| f).collect())
                .collect()
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub params_checked: usize,
}

/// Central-difference check of [`backward`] at a point where no selection
/// (main mask, rectification, aux top-k) changes within `±h`.
/// Returns `None` when the point is not tie-free.
pub fn gradient_check(
    params: &SaeParams,
    x: &Array2<f64>,
    policy: &AllocationPolicy,
    weights: &LossWeights,
    aux: &AuxSets,
    h: f64,
) -> Option<GradCheck> {
    let trace = forward(params, x.view(), policy).unwrap();
    let mask = trace.mask.clone();
    let aux_target = trace.e.clone();
    let reference = aux_sets_selection(&trace.z_pre, aux, weights.k_aux);
    let grads = backward(params, &trace, weights, aux).unwrap();
    let analytic: [Vec<f64>; 4] = [
        grads.w_enc.iter().copied().collect(),
        grads.b_enc.to_vec(),
        grads.w_dec.iter().copied().collect(),
        grads.b_pre.to_vec(),
    ];

    let mut worst = 0.0f64;
    let mut count = 0;
    let mut p = params.clone();
    for (slot, exact) in analytic.iter().enumerate() {
        for (i, &g) in exact.iter().enumerate() {
            let orig = param_slots(&mut p)[slot][i];
            let eval_at = |delta: f64, p: &mut SaeParams| {
                param_slots(p)[slot][i] = orig + delta;
                let ok = same_selection(p, x, policy, &mask, aux, weights.k_aux, &reference);
                let l = frozen_loss(p, x, &mask, policy, weights, aux, &aux_target);
                (ok, l)
            };
            let (ok_plus, lp) = eval_at(h, &mut p);
            let (ok_minus, lm) = eval_at(-h, &mut p);
            param_slots(&mut p)[slot][i] = orig;
            if !(ok_plus && ok_minus) {
                return None;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let denom = g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((g - numeric).abs() / denom);
            count += 1;
        }
    }
    Some(GradCheck {
        max_rel_err: worst,
        params_checked: count,
    })
}

/// Orthonormal rows via Gram–Schmidt on Gaussian draws (`rows <= cols`).
pub fn orthonormal_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    assert!(rows <= cols);
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut i = 0;
    while i < rows {
        let mut v: Array1<f64> = (0..cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..2 {
            for j in 0..i {
                let d = out.row(j).dot(&v);
                v.scaled_add(-d, &out.row(j));
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            out.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    out
}

/// Aux feature sets: the `each` least-selected features form `dead`, the
/// next `each` form `dying`.
pub fn aux_sets_for(mask: &SparsityMask, each: usize) -> AuxSets {
    let cols = mask.col_sums();
    let mut order: Vec<usize> = (0..cols.len()).collect();
    order.sort_by_key(|&j| (cols[j], j));
    AuxSets {
        dead: order.iter().take(each).copied().collect::<BTreeSet<_>>(),
        dying: order
            .iter()
            .skip(each)
            .take(each)
            .copied()
            .collect::<BTreeSet<_>>(),
    }
}

/// Every loss term switched on.
pub fn all_terms() -> LossWeights {
    LossWeights {
        lambda_sparsity: 0.05,
        lambda_aux_k: 0.25,
        lambda_aux_zipf: 0.125,
        lambda_nfm: 0.1,
        lambda_nfm_inf: 0.1,
        k_aux: 2,
        aux_decode_bias: false,
    }
}

pub fn build(z: &Array2<f64>, policy: &AllocationPolicy) -> Array2<bool> {
    let m = build_mask(
        &sparsealloc::AffinityMatrix::new(z.clone()).unwrap(),
        policy,
    )
    .unwrap();
    m.selected().to_owned()
}
