//! Reconstruction, sparsity, auxiliary and dictionary-alignment losses.
//!
//! Every term is mean-reduced over the batch so magnitudes do not depend on
//! the batch size.

use std::collections::BTreeSet;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::linalg::{self, dot};
use crate::model::{ForwardTrace, SaeParams};
use crate::sparsifiers::PolicyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sparsity: f64,
    pub lambda_aux_k: f64,
    pub lambda_aux_zipf: f64,
    pub lambda_nfm: f64,
    pub lambda_nfm_inf: f64,
    pub k_aux: usize,
    /// Add the pre-bias back when decoding the auxiliary reconstruction.
    pub aux_decode_bias: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sparsity: 0.0,
            lambda_aux_k: 1.0 / 32.0,
            lambda_aux_zipf: 1.0 / 32.0,
            lambda_nfm: 1e-3,
            lambda_nfm_inf: 1e-3,
            k_aux: 32,
            aux_decode_bias: false,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_sparsity: 0.0,
            lambda_aux_k: 0.0,
            lambda_aux_zipf: 0.0,
            lambda_nfm: 0.0,
            lambda_nfm_inf: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sparsity,
            self.lambda_aux_k,
            self.lambda_aux_zipf,
            self.lambda_nfm,
            self.lambda_nfm_inf,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SaeError::invalid("loss weights must be finite and >= 0"));
        }
        if (self.lambda_aux_k > 0.0 || self.lambda_aux_zipf > 0.0) && self.k_aux == 0 {
            return Err(SaeError::invalid(
                "k_aux must be >= 1 when an aux weight is set",
            ));
        }
        Ok(())
    }

    fn any_aux(&self) -> bool {
        self.lambda_aux_k > 0.0
            || self.lambda_aux_zipf > 0.0
            || self.lambda_nfm > 0.0
            || self.lambda_nfm_inf > 0.0
    }

    /// Weights actually applied under `policy`. Feature Choice trains without
    /// auxiliary terms; the flag reports whether anything was switched off.
    pub fn effective_for(&self, policy: &PolicyKind) -> (LossWeights, bool) {
        if matches!(policy, PolicyKind::FeatureChoice { .. }) && self.any_aux() {
            let mut w = self.clone();
            w.lambda_aux_k = 0.0;
            w.lambda_aux_zipf = 0.0;
            w.lambda_nfm = 0.0;
            w.lambda_nfm_inf = 0.0;
            (w, true)
        } else {
            (self.clone(), false)
        }
    }
}

/// Feature sets the auxiliary reconstructions draw from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSets {
    pub dead: BTreeSet<usize>,
    pub dying: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerms {
    pub l1: f64,
    pub aux_k: f64,
    pub aux_zipf: f64,
    pub nfm: f64,
    pub nfm_inf: f64,
}

impl WeightedTerms {
    pub fn sum(&self) -> f64 {
        self.l1 + self.aux_k + self.aux_zipf + self.nfm + self.nfm_inf
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub l1: f64,
    pub aux_k: f64,
    pub aux_zipf: f64,
    pub nfm: f64,
    pub nfm_inf: f64,
    pub weighted: WeightedTerms,
    pub total: f64,
    /// Auxiliary weights were forced to zero for this policy.
    pub aux_overridden: bool,
}

/// Mean over tokens of the squared residual norm.
pub fn mse_loss(trace: &ForwardTrace) -> f64 {
    mean_row_sq(trace.e.view())
}

fn mean_row_sq(m: ArrayView2<'_, f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    linalg::sum_sq(m) / m.nrows() as f64
}

/// Mean over tokens of the code's L1 norm.
pub fn l1_loss(z: ArrayView2<'_, f64>) -> f64 {
    if z.nrows() == 0 {
        return 0.0;
    }
    z.iter().map(|v| v.abs()).sum::<f64>() / z.nrows() as f64
}

/// Per token, the `k_aux` highest-affinity members of `feature_set` with
/// their rectified affinities. Entries whose affinity is not positive
/// contribute nothing and are dropped.
pub fn aux_selection(
    z_pre: ArrayView2<'_, f64>,
    feature_set: &BTreeSet<usize>,
    k_aux: usize,
) -> Vec<Vec<(usize, f64)>> {
    let take = k_aux.min(feature_set.len());
    z_pre
        .outer_iter()
        .map(|row| {
            if take == 0 {
                return Vec::new();
            }
            let mut cands: Vec<(usize, f64)> = feature_set.iter().map(|&f| (f, row[f])).collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            if take < cands.len() {
                cands.select_nth_unstable_by(take - 1, cmp);
                cands.truncate(take);
            }
            cands.sort_unstable_by(cmp);
            cands.retain(|&(_, v)| v > 0.0);
            cands
        })
        .collect()
}

/// Decodes an auxiliary selection through the decoder rows.
pub fn aux_decode(
    selection: &[Vec<(usize, f64)>],
    params: &SaeParams,
    with_bias: bool,
) -> Array2<f64> {
    let n = params.d_model();
    let mut out = Array2::zeros((selection.len(), n));
    for (b, picks) in selection.iter().enumerate() {
        let mut row = out.row_mut(b);
        if with_bias {
            row.assign(&params.b_pre);
        }
        for &(f, v) in picks {
            row.scaled_add(v, &params.w_dec.row(f));
        }
    }
    out
}

/// `|target − Dec(z_set)|²` averaged over tokens, with `target` supplied explicitly.
pub fn aux_recon_loss_against(
    target: ArrayView2<'_, f64>,
    z_pre: ArrayView2<'_, f64>,
    params: &SaeParams,
    feature_set: &BTreeSet<usize>,
    k_aux: usize,
    with_bias: bool,
) -> f64 {
    if feature_set.is_empty() || k_aux == 0 {
        return 0.0;
    }
    let selection = aux_selection(z_pre, feature_set, k_aux);
    let e_hat = aux_decode(&selection, params, with_bias);
    mean_row_sq((&target - &e_hat).view())
}

/// Reconstruction of the residual through the top `k_aux` features of `feature_set`.
pub fn aux_recon_loss(
    trace: &ForwardTrace,
    params: &SaeParams,
    feature_set: &BTreeSet<usize>,
    k_aux: usize,
) -> f64 {
    aux_recon_loss_against(
        trace.e.view(),
        trace.z_pre.view(),
        params,
        feature_set,
        k_aux,
        false,
    )
}

fn normalized_rows(w: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = linalg::row_norms(w);
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(SaeError::DegenerateParameter { row });
    }
    let mut hat = w.to_owned();
    for (mut r, &n) in hat.outer_iter_mut().zip(norms.iter()) {
        r /= n;
    }
    Ok((hat, norms))
}

/// Off-diagonal alignment of the normalized decoder Gram matrix:
/// `(‖G − diag G‖_F, mean_i max_{j≠i} |G_ij|)`.
pub fn nfm_losses(w_dec: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let (hat, _) = normalized_rows(w_dec)?;
    let gram = linalg::matmul_nt(hat.view(), hat.view());
    Ok(nfm_from_gram(&gram))
}

fn nfm_from_gram(gram: &Array2<f64>) -> (f64, f64) {
    let f = gram.nrows();
    let mut fro = 0.0;
    let mut inf = 0.0;
    for i in 0..f {
        let mut row_max = 0.0f64;
        for j in 0..f {
            if i != j {
                let g = gram[[i, j]];
                fro += g * g;
                row_max = row_max.max(g.abs());
            }
        }
        inf += row_max;
    }
    (fro.sqrt(), inf / f as f64)
}

/// Gradient of `λ_nfm·nfm + λ_inf·nfm_inf` with respect to the raw decoder rows.
pub fn nfm_grad(
    w_dec: ArrayView2<'_, f64>,
    lambda_nfm: f64,
    lambda_inf: f64,
) -> Result<Array2<f64>> {
    Ok(nfm_with_grad(w_dec, lambda_nfm, lambda_inf)?.1)
}

/// `(nfm, nfm_inf)` together with [`nfm_grad`], sharing one Gram matrix.
pub fn nfm_with_grad(
    w_dec: ArrayView2<'_, f64>,
    lambda_nfm: f64,
    lambda_inf: f64,
) -> Result<((f64, f64), Array2<f64>)> {
    let (hat, norms) = normalized_rows(w_dec)?;
    let f = hat.nrows();
    let gram = linalg::matmul_nt(hat.view(), hat.view());
    let (fro, inf_loss) = nfm_from_gram(&gram);

    // dL/dG for the off-diagonal entries, symmetrized.
    let mut d_gram = Array2::<f64>::zeros((f, f));
    if lambda_nfm > 0.0 && fro > 0.0 {
        for i in 0..f {
            for j in 0..f {
                if i != j {
                    d_gram[[i, j]] += lambda_nfm * gram[[i, j]] / fro;
                }
            }
        }
    }
    if lambda_inf > 0.0 && f > 1 {
        for i in 0..f {
            let mut best = (usize::MAX, -1.0f64);
            for j in 0..f {
                if i != j && gram[[i, j]].abs() > best.1 {
                    best = (j, gram[[i, j]].abs());
                }
            }
            let j = best.0;
            let g = lambda_inf * gram[[i, j]].signum() / f as f64;
            // G_ij and G_ji are the same quantity; split so the symmetric product below counts it once.
            d_gram[[i, j]] += 0.5 * g;
            d_gram[[j, i]] += 0.5 * g;
        }
    }
    // G = Ŵ Ŵᵀ  ⇒  dŴ = (dG + dGᵀ) Ŵ = 2 dG Ŵ for symmetric dG.
    let mut d_hat = Array2::zeros(hat.dim());
    general_mat_mul(1.0, &d_gram, &hat, 0.0, &mut d_hat);
    d_hat *= 2.0;
    // ŵ = w / ‖w‖  ⇒  dw = (dŵ − ŵ⟨ŵ, dŵ⟩) / ‖w‖
    for ((mut d, h), &n) in d_hat
        .outer_iter_mut()
        .zip(hat.outer_iter())
        .zip(norms.iter())
    {
        let along = dot(d.view(), h);
        d.scaled_add(-along, &h);
        d /= n;
    }
    Ok(((fro, inf_loss), d_hat))
}

/// All loss terms and their weighted sum.
pub fn total_loss(
    trace: &ForwardTrace,
    params: &SaeParams,
    weights: &LossWeights,
    aux_sets: &AuxSets,
) -> Result<LossReport> {
    let (w, aux_overridden) = weights.effective_for(&trace.policy.kind);
    let mse = mse_loss(trace);
    let l1 = if w.lambda_sparsity > 0.0 {
        l1_loss(trace.z.view())
    } else {
        0.0
    };
    let aux_term = |set: &BTreeSet<usize>, lambda: f64| {
        if lambda > 0.0 {
            aux_recon_loss_against(
                trace.e.view(),
                trace.z_pre.view(),
                params,
                set,
                w.k_aux,
                w.aux_decode_bias,
            )
        } else {
            0.0
        }
    };
    let aux_k = aux_term(&aux_sets.dead, w.lambda_aux_k);
    let aux_zipf = aux_term(&aux_sets.dying, w.lambda_aux_zipf);
    let (nfm, nfm_inf) = if w.lambda_nfm > 0.0 || w.lambda_nfm_inf > 0.0 {
        nfm_losses(params.w_dec.view())?
    } else {
        (0.0, 0.0)
    };
    Ok(assemble(
        [mse, l1, aux_k, aux_zipf, nfm, nfm_inf],
        &w,
        aux_overridden,
    ))
}

/// Builds a report from raw terms `[mse, l1, aux_k, aux_zipf, nfm, nfm_inf]`
/// and the effective weights.
pub(crate) fn assemble(raw: [f64; 6], w: &LossWeights, aux_overridden: bool) -> LossReport {
    let [mse, l1, aux_k, aux_zipf, nfm, nfm_inf] = raw;
    let weighted = WeightedTerms {
        l1: w.lambda_sparsity * l1,
        aux_k: w.lambda_aux_k * aux_k,
        aux_zipf: w.lambda_aux_zipf * aux_zipf,
        nfm: w.lambda_nfm * nfm,
        nfm_inf: w.lambda_nfm_inf * nfm_inf,
    };
    let total = mse + weighted.sum();
    LossReport {
        mse,
        l1,
        aux_k,
        aux_zipf,
        nfm,
        nfm_inf,
        weighted,
        total,
        aux_overridden,
    }
}
