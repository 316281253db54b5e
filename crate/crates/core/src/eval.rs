//! Post-training metrics. FVU stands in for downstream loss recovered.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ActivationStore;
use crate::error::{Result, SaeError};
use crate::linalg::{dot, row_norms};
use crate::model::{self, decode, forward, ForwardTrace, SaeParams};
use crate::sparsifiers::AllocationPolicy;
use crate::zipf::{self, ZipfFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tokens: usize,
    pub mean_l0: f64,
    pub mse: f64,
    pub fvu: f64,
    /// Features that never fired on the evaluation set.
    pub dead_count: usize,
    pub dying_count: usize,
    pub recovery_score: Option<f64>,
    /// `fpt_histogram[c]` tokens had exactly `c` active features.
    pub fpt_histogram: Vec<usize>,
    pub progressive_curve: Vec<(usize, f64)>,
    pub densities: Vec<f64>,
    pub zipf_fit: Option<ZipfFit>,
}

/// Mean L0, MSE and fraction of variance unexplained over a set of traces.
///
/// The variance baseline is the mean input vector of the whole set.
pub fn l0_and_fvu(traces: &[ForwardTrace]) -> Result<(f64, f64, f64)> {
    let tokens: usize = traces.iter().map(ForwardTrace::batch).sum();
    if tokens == 0 {
        return Err(SaeError::InsufficientData { needed: 1, got: 0 });
    }
    let n = traces[0].x_in.ncols();
    let mut mean = Array1::<f64>::zeros(n);
    for t in traces {
        mean += &t.x_in.sum_axis(Axis(0));
    }
    mean /= tokens as f64;

    let (mut l0, mut resid, mut var) = (0usize, 0.0, 0.0);
    for t in traces {
        l0 += t.z.iter().filter(|&&v| v != 0.0).count();
        resid += t.e.iter().map(|v| v * v).sum::<f64>();
        for row in t.x_in.outer_iter() {
            var += row
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
    }
    if var <= 0.0 {
        return Err(SaeError::invalid("evaluation set has zero variance"));
    }
    let tokens = tokens as f64;
    Ok((l0 as f64 / tokens, resid / tokens, resid / var))
}

/// Mean over true dictionary rows of the best rectified cosine similarity
/// with any learned decoder row.
pub fn recovery_score(w_dec: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    if w_dec.ncols() != truth.ncols() {
        return Err(SaeError::ShapeMismatch {
            context: "recovery_score",
            expected: (truth.nrows(), truth.ncols()),
            actual: w_dec.dim(),
        });
    }
    if truth.nrows() == 0 {
        return Err(SaeError::InsufficientData { needed: 1, got: 0 });
    }
    let learned_norms = row_norms(w_dec);
    let total: f64 = truth
        .outer_iter()
        .map(|t| {
            let tn = dot(t, t).sqrt();
            w_dec
                .outer_iter()
                .zip(&learned_norms)
                .map(|(l, &ln)| {
                    if tn == 0.0 || ln == 0.0 {
                        0.0
                    } else {
                        (dot(t, l) / (tn * ln)).max(0.0)
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / truth.nrows() as f64)
}

/// Each token's `keep` largest-magnitude code entries; ties go to the lower index.
pub fn truncate_codes(z: ArrayView2<'_, f64>, keep: usize) -> Array2<f64> {
    let mut out = Array2::zeros(z.dim());
    for (src, mut dst) in z.outer_iter().zip(out.outer_iter_mut()) {
        let mut active: Vec<usize> = (0..src.len()).filter(|&j| src[j] != 0.0).collect();
        active.sort_by(|&a, &b| src[b].abs().total_cmp(&src[a].abs()).then(a.cmp(&b)));
        for &j in active.iter().take(keep) {
            dst[j] = src[j];
        }
    }
    out
}

/// Reconstruction MSE when every token keeps only its `k′` strongest codes.
pub fn progressive_curve(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    policy: &AllocationPolicy,
    k_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(SaeError::invalid("k values must be sorted ascending"));
    }
    let trace = forward(params, x, policy)?;
    Ok(progressive_from_trace(params, &trace, k_values))
}

pub fn progressive_from_trace(
    params: &SaeParams,
    trace: &ForwardTrace,
    k_values: &[usize],
) -> Vec<(usize, f64)> {
    k_values
        .iter()
        .map(|&k| {
            let z = truncate_codes(trace.z.view(), k);
            let x_hat = decode(params, z.view());
            let err = (&trace.x_in - &x_hat).iter().map(|v| v * v).sum::<f64>();
            (k, err / trace.batch().max(1) as f64)
        })
        .collect()
}

/// Default progressive grid: 0, then powers of two, then the largest code size.
pub fn default_k_grid(max_code: usize) -> Vec<usize> {
    let mut ks = vec![0];
    let mut k = 1;
    while k < max_code {
        ks.push(k);
        k *= 2;
    }
    if max_code > 0 {
        ks.push(max_code);
    }
    ks
}

pub struct EvalOptions<'a> {
    pub batch_size: usize,
    pub max_tokens: usize,
    pub truth: Option<ArrayView2<'a, f64>>,
    pub fix_alpha: Option<f64>,
}

/// Evaluates `params` on the leading rows of `store`, in full batches only
/// so batch-level budgets mean the same thing as during training.
pub fn evaluate(
    params: &SaeParams,
    store: &ActivationStore,
    policy: &AllocationPolicy,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let traces = batched_traces(params, store, policy, opts.batch_size, opts.max_tokens)?;
    evaluate_traces(params, &traces, opts)
}

fn batched_traces(
    params: &SaeParams,
    store: &ActivationStore,
    policy: &AllocationPolicy,
    batch_size: usize,
    max_tokens: usize,
) -> Result<Vec<ForwardTrace>> {
    let batch = batch_size.max(1);
    let usable = max_tokens.min(store.n_rows()) / batch * batch;
    if usable == 0 {
        return Err(SaeError::InsufficientData {
            needed: batch,
            got: max_tokens.min(store.n_rows()),
        });
    }
    (0..usable)
        .step_by(batch)
        .map(|start| {
            let rows: Vec<usize> = (start..start + batch).collect();
            let x = model::preprocess(store.gather(&rows).view())?;
            forward(params, x.view(), policy)
        })
        .collect()
}

/// Active features for each of the leading full-batch rows of `store`.
pub fn per_token_l0(
    params: &SaeParams,
    store: &ActivationStore,
    policy: &AllocationPolicy,
    batch_size: usize,
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let traces = batched_traces(params, store, policy, batch_size, max_tokens)?;
    Ok(traces.iter().flat_map(ForwardTrace::l0_per_token).collect())
}

pub fn evaluate_traces(
    params: &SaeParams,
    traces: &[ForwardTrace],
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let (mean_l0, mse, fvu) = l0_and_fvu(traces)?;
    let tokens: usize = traces.iter().map(ForwardTrace::batch).sum();

    let f = params.features();
    let mut counts = vec![0u64; f];
    let mut fpt: Vec<usize> = Vec::new();
    let mut max_code = 0;
    for t in traces {
        for row in t.z.outer_iter() {
            let mut c = 0;
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    counts[j] += 1;
                    c += 1;
                }
            }
            if fpt.len() <= c {
                fpt.resize(c + 1, 0);
            }
            fpt[c] += 1;
            max_code = max_code.max(c);
        }
    }
    let densities: Vec<f64> = counts.iter().map(|&c| c as f64 / tokens as f64).collect();
    let dead: BTreeSet<usize> = (0..f).filter(|&j| counts[j] == 0).collect();
    let zipf_fit = zipf::fit_zipf(&densities, opts.fix_alpha).ok();
    let dying_count = zipf_fit.as_ref().map_or(0, |fit| {
        zipf::classify_dying(&densities, fit)
            .into_iter()
            .filter(|j| !dead.contains(j))
            .count()
    });
    let recovery_score = opts
        .truth
        .map(|t| recovery_score(params.w_dec.view(), t))
        .transpose()?;
    let grid = default_k_grid(max_code);
    let mut progressive_curve: Vec<(usize, f64)> = grid.iter().map(|&k| (k, 0.0)).collect();
    for t in traces {
        for (acc, (_, mse)) in progressive_curve
            .iter_mut()
            .zip(progressive_from_trace(params, t, &grid))
        {
            acc.1 += mse * t.batch() as f64 / tokens as f64;
        }
    }

    Ok(EvalReport {
        tokens,
        mean_l0,
        mse,
        fvu,
        dead_count: dead.len(),
        dying_count,
        recovery_score,
        fpt_histogram: fpt,
        progressive_curve,
        densities,
        zipf_fit,
    })
}
