//! The sparse autoencoder: preprocessing, forward pass, analytic gradients,
//! decoder-norm maintenance and threshold-based streaming inference.
//!
//! ```text
//! z_pre = (x − b_pre) · W_encᵀ + b_enc
//! z     = S ⊙ z_pre               (S from the allocation policy)
//! x̂     = z · W_dec + b_pre
//! ```
//!
//! Gradients treat the mask `S` as a constant and flow only through the
//! selected entries.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::linalg::{self, dot};
use crate::losses::{self, AuxSets, LossReport, LossWeights};
use crate::sparsifiers::{
    apply_mask, build_mask, AffinityMatrix, AllocationPolicy, Criterion, PolicyKind, SparsityMask,
};

/// Encoder/decoder weights. `W_enc` and `W_dec` are both `(F, N)`; row `i`
/// of `W_dec` is the dictionary direction of feature `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
}

impl SaeParams {
    pub fn from_parts(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_pre: Array1<f64>,
    ) -> Result<Self> {
        let (f, n) = w_dec.dim();
        if w_enc.dim() != (f, n) {
            return Err(SaeError::ShapeMismatch {
                context: "W_enc",
                expected: (f, n),
                actual: w_enc.dim(),
            });
        }
        if b_enc.len() != f || b_pre.len() != n {
            return Err(SaeError::ShapeMismatch {
                context: "biases",
                expected: (f, n),
                actual: (b_enc.len(), b_pre.len()),
            });
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
        })
    }

    /// Spherical decoder rows normalized to unit length; encoder starts as
    /// `0.1 · W_dec`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(d_model: usize, features: usize, rng: &mut R) -> Self {
        let mut w_dec = Array2::from_shape_simple_fn((features, d_model), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        for mut row in w_dec.outer_iter_mut() {
            let n = dot(row.view(), row.view()).sqrt();
            row /= n;
        }
        let w_enc = &w_dec * 0.1;
        Self {
            w_enc,
            b_enc: Array1::zeros(features),
            w_dec,
            b_pre: Array1::zeros(d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn features(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w_enc.len() + self.b_enc.len() + self.w_dec.len() + self.b_pre.len()
    }

    /// Largest deviation of any decoder row norm from 1.
    pub fn decoder_norm_deviation(&self) -> f64 {
        linalg::row_norms(self.w_dec.view())
            .iter()
            .map(|n| (n - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Same block layout as [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &SaeParams) -> Self {
        Self {
            w_enc: Array2::zeros(params.w_enc.dim()),
            b_enc: Array1::zeros(params.b_enc.len()),
            w_dec: Array2::zeros(params.w_dec.dim()),
            b_pre: Array1::zeros(params.b_pre.len()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_pre.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_enc *= factor;
        self.b_enc *= factor;
        self.w_dec *= factor;
        self.b_pre *= factor;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w_enc += &other.w_enc;
        self.b_enc += &other.b_enc;
        self.w_dec += &other.w_dec;
        self.b_pre += &other.b_pre;
    }

    pub fn all_finite(&self) -> bool {
        self.w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_pre.iter())
            .all(|v| v.is_finite())
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub x_in: Array2<f64>,
    pub z_pre: AffinityMatrix,
    pub mask: SparsityMask,
    pub z: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub e: Array2<f64>,
    pub policy: AllocationPolicy,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.x_in.nrows()
    }

    /// Non-zero code entries per token.
    pub fn l0_per_token(&self) -> Vec<usize> {
        self.z
            .outer_iter()
            .map(|r| r.iter().filter(|&&v| v != 0.0).count())
            .collect()
    }
}

/// Centers each row across its entries and scales it to unit L2 norm.
pub fn preprocess(x_raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (_, n) = x_raw.dim();
    if n < 2 {
        return Err(SaeError::invalid("activation dimension must be at least 2"));
    }
    let mut out = x_raw.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite {
                location: format!("input row {i}"),
            });
        }
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mean = row.sum() / n as f64;
        row -= mean;
        let norm = dot(row.view(), row.view()).sqrt();
        if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) || norm == 0.0 {
            return Err(SaeError::DegenerateInput { row: i });
        }
        row /= norm;
    }
    Ok(out)
}

fn check_input(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != params.d_model() {
        return Err(SaeError::ShapeMismatch {
            context: "forward input",
            expected: (x.nrows(), params.d_model()),
            actual: x.dim(),
        });
    }
    Ok(())
}

/// `(x − b_pre) · W_encᵀ + b_enc`
pub fn encode(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<AffinityMatrix> {
    check_input(params, x)?;
    let centered = &x - &params.b_pre;
    let mut z_pre = linalg::matmul_nt(centered.view(), params.w_enc.view());
    z_pre += &params.b_enc;
    AffinityMatrix::new(z_pre).map_err(|e| match e {
        SaeError::NonFinite { location } => SaeError::NonFinite {
            location: format!("encoder output: {location}"),
        },
        other => other,
    })
}

/// `z · W_dec + b_pre`, exploiting the sparsity of `z`.
pub fn decode(params: &SaeParams, z: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut x_hat = Array2::zeros((z.nrows(), params.d_model()));
    x_hat
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(z.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut out, code)| {
            out.assign(&params.b_pre);
            for (f, &v) in code.iter().enumerate() {
                if v != 0.0 {
                    out.scaled_add(v, &params.w_dec.row(f));
                }
            }
        });
    x_hat
}

fn finish_trace(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    z_pre: AffinityMatrix,
    mask: SparsityMask,
    policy: &AllocationPolicy,
) -> Result<ForwardTrace> {
    let z = apply_mask(z_pre.view(), &mask, policy.rectify)?;
    let x_hat = decode(params, z.view());
    if let Some(pos) = x_hat.iter().position(|v| !v.is_finite()) {
        return Err(SaeError::NonFinite {
            location: format!(
                "reconstruction entry ({}, {})",
                pos / x_hat.ncols(),
                pos % x_hat.ncols()
            ),
        });
    }
    let e = &x - &x_hat;
    Ok(ForwardTrace {
        x_in: x.to_owned(),
        z_pre,
        mask,
        z,
        x_hat,
        e,
        policy: policy.clone(),
    })
}

pub fn forward(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    policy: &AllocationPolicy,
) -> Result<ForwardTrace> {
    let z_pre = encode(params, x)?;
    let mask = build_mask(&z_pre, policy)?;
    finish_trace(params, x, z_pre, mask, policy)
}

/// Forward pass with a caller-supplied mask instead of one built from the affinities.
pub fn forward_with_mask(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    mask: &SparsityMask,
    policy: &AllocationPolicy,
) -> Result<ForwardTrace> {
    let z_pre = encode(params, x)?;
    finish_trace(params, x, z_pre, mask.clone(), policy)
}

/// Analytic gradient of [`losses::total_loss`] with the mask held fixed.
///
/// The auxiliary terms regress the residual `e` as a fixed target, so no
/// gradient flows from them back through the main reconstruction.
pub fn backward(
    params: &SaeParams,
    trace: &ForwardTrace,
    weights: &LossWeights,
    aux_sets: &AuxSets,
) -> Result<Gradients> {
    Ok(loss_and_backward(params, trace, weights, aux_sets)?.1)
}

/// [`losses::total_loss`] and [`backward`] in one pass, sharing the auxiliary
/// selections and the decoder Gram matrix.
pub fn loss_and_backward(
    params: &SaeParams,
    trace: &ForwardTrace,
    weights: &LossWeights,
    aux_sets: &AuxSets,
) -> Result<(LossReport, Gradients)> {
    let (w, overridden) = weights.effective_for(&trace.policy.kind);
    let batch = trace.batch();
    let (features, n) = params.w_dec.dim();
    let mut grads = Gradients::zeros_like(params);
    let mse = losses::mse_loss(trace);
    let l1 = if w.lambda_sparsity > 0.0 {
        losses::l1_loss(trace.z.view())
    } else {
        0.0
    };
    if batch == 0 {
        return Ok((
            losses::assemble([mse, l1, 0.0, 0.0, 0.0, 0.0], &w, overridden),
            grads,
        ));
    }
    let inv_b = 1.0 / batch as f64;
    let rectify = trace.policy.rectify;

    // d mse / d x̂
    let g_xhat = &trace.e * (-2.0 * inv_b);
    grads.b_pre += &g_xhat.sum_axis(Axis(0));

    let mut dz_pre = Array2::<f64>::zeros((batch, features));
    {
        let w_dec = params.w_dec.as_slice().expect("contiguous W_dec");
        let gw_dec = grads.w_dec.as_slice_mut().expect("contiguous grad");
        for (b, g_row) in g_xhat.outer_iter().enumerate() {
            let g_row = g_row.to_slice().expect("contiguous residual");
            for f in trace.mask.row_indices(b) {
                let v = trace.z[[b, f]];
                let passes = !rectify || trace.z_pre[[b, f]] > 0.0;
                let dec = &w_dec[f * n..(f + 1) * n];
                if v != 0.0 {
                    for (gd, &g) in gw_dec[f * n..(f + 1) * n].iter_mut().zip(g_row) {
                        *gd += v * g;
                    }
                }
                if passes {
                    let mut dz: f64 = g_row.iter().zip(dec).map(|(a, b)| a * b).sum();
                    if w.lambda_sparsity > 0.0 && v != 0.0 {
                        dz += w.lambda_sparsity * inv_b * v.signum();
                    }
                    dz_pre[[b, f]] += dz;
                }
            }
        }
    }

    let mut aux = [0.0; 2];
    for (slot, (set, lambda)) in [
        (&aux_sets.dead, w.lambda_aux_k),
        (&aux_sets.dying, w.lambda_aux_zipf),
    ]
    .into_iter()
    .enumerate()
    {
        if lambda > 0.0 && !set.is_empty() && w.k_aux > 0 {
            aux[slot] = aux_backward(params, trace, set, lambda, &w, &mut grads, &mut dz_pre);
        }
    }

    let (mut nfm, mut nfm_inf) = (0.0, 0.0);
    if w.lambda_nfm > 0.0 || w.lambda_nfm_inf > 0.0 {
        let ((a, b), g) =
            losses::nfm_with_grad(params.w_dec.view(), w.lambda_nfm, w.lambda_nfm_inf)?;
        (nfm, nfm_inf) = (a, b);
        grads.w_dec += &g;
    }

    // Encoder: z_pre = (x − b_pre) W_encᵀ + b_enc
    let centered = &trace.x_in - &params.b_pre;
    {
        let gw_enc = grads.w_enc.as_slice_mut().expect("contiguous grad");
        let gb_enc = grads.b_enc.as_slice_mut().expect("contiguous grad");
        for (dz_row, x_row) in dz_pre.outer_iter().zip(centered.outer_iter()) {
            let x_row = x_row.to_slice().expect("contiguous input");
            for (f, &g) in dz_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb_enc[f] += g;
                for (gw, &x) in gw_enc[f * n..(f + 1) * n].iter_mut().zip(x_row) {
                    *gw += g * x;
                }
            }
        }
    }
    // d/d b_pre through the encoder input: −Σ_f (Σ_b dz_pre[b, f]) W_enc[f, :]
    for (&g, enc_row) in grads.b_enc.iter().zip(params.w_enc.outer_iter()) {
        if g != 0.0 {
            grads.b_pre.scaled_add(-g, &enc_row);
        }
    }

    if !grads.all_finite() {
        return Err(SaeError::NonFinite {
            location: "gradients".into(),
        });
    }
    let report = losses::assemble([mse, l1, aux[0], aux[1], nfm, nfm_inf], &w, overridden);
    Ok((report, grads))
}

/// Adds the gradient of `λ·mean|e − ê|²` and returns the unweighted loss.
fn aux_backward(
    params: &SaeParams,
    trace: &ForwardTrace,
    set: &BTreeSet<usize>,
    lambda: f64,
    w: &LossWeights,
    grads: &mut Gradients,
    dz_pre: &mut Array2<f64>,
) -> f64 {
    let inv_b = 1.0 / trace.batch() as f64;
    let selection = losses::aux_selection(trace.z_pre.view(), set, w.k_aux);
    let e_hat = losses::aux_decode(&selection, params, w.aux_decode_bias);
    let resid = &trace.e - &e_hat;
    let loss = linalg::sum_sq(resid.view()) / trace.batch() as f64;
    let g_ehat = resid * (-2.0 * lambda * inv_b);
    if w.aux_decode_bias {
        grads.b_pre += &g_ehat.sum_axis(Axis(0));
    }
    for (b, picks) in selection.iter().enumerate() {
        let g_row = g_ehat.row(b);
        for &(f, v) in picks {
            grads.w_dec.row_mut(f).scaled_add(v, &g_row);
            dz_pre[[b, f]] += dot(g_row, params.w_dec.row(f));
        }
    }
    loss
}

/// Rescales every decoder row to unit L2 norm.
pub fn renormalize_decoder(params: &mut SaeParams) -> Result<()> {
    let norms = linalg::row_norms(params.w_dec.view());
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(SaeError::DegenerateParameter { row });
    }
    for (mut r, &n) in params.w_dec.outer_iter_mut().zip(norms.iter()) {
        r /= n;
    }
    Ok(())
}

/// Removes from each decoder-row gradient its component along that row.
pub fn project_decoder_grads(grads: &mut Gradients, params: &SaeParams) -> Result<()> {
    for (i, (mut g, d)) in grads
        .w_dec
        .outer_iter_mut()
        .zip(params.w_dec.outer_iter())
        .enumerate()
    {
        let nn = dot(d, d);
        if nn == 0.0 {
            return Err(SaeError::DegenerateParameter { row: i });
        }
        let along = dot(g.view(), d) / nn;
        g.scaled_add(-along, &d);
    }
    Ok(())
}

/// Per-feature minimum firing score observed in batch mode; `+∞` for
/// features that never fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    #[serde(with = "inf_vec")]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub criterion: Criterion,
}

impl ThresholdTable {
    pub fn policy(&self) -> AllocationPolicy {
        AllocationPolicy::threshold_gate(self.theta.clone()).with_criterion(self.criterion)
    }
}

pub fn calibrate_thresholds(
    params: &SaeParams,
    policy: &AllocationPolicy,
    calibration_batches: &[Array2<f64>],
) -> Result<ThresholdTable> {
    if calibration_batches.is_empty() {
        return Err(SaeError::EmptyCalibration);
    }
    if matches!(
        policy.kind,
        PolicyKind::ReluBaseline | PolicyKind::ThresholdGate { .. }
    ) {
        return Err(SaeError::invalid(
            "threshold calibration needs a batch-mode allocation policy",
        ));
    }
    let mut theta = vec![f64::INFINITY; params.features()];
    for batch in calibration_batches {
        let trace = forward(params, batch.view(), policy)?;
        for (b, f) in trace.mask.entries() {
            if trace.z[[b, f]] != 0.0 {
                let score = policy.criterion.score(trace.z_pre[[b, f]]);
                theta[f] = theta[f].min(score);
            }
        }
    }
    for t in &mut theta {
        if t.is_finite() {
            *t = t.max(0.0);
        }
    }
    Ok(ThresholdTable {
        theta,
        criterion: policy.criterion,
    })
}

/// Single-token (or any-size) inference with per-feature thresholds in place
/// of batch-level allocation.
pub fn forward_streaming(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    thresholds: &ThresholdTable,
) -> Result<ForwardTrace> {
    forward(params, x, &thresholds.policy())
}

/// Indices of the features with a non-zero code for each token.
pub fn firing_sets(trace: &ForwardTrace) -> Vec<BTreeSet<usize>> {
    trace
        .z
        .outer_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(f, _)| f)
                .collect()
        })
        .collect()
}

mod inf_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|x| x.unwrap_or(f64::INFINITY))
            .collect())
    }
}
