//! Sparsifying activations as token–feature match allocation.
//!
//! Every policy builds a binary mask `S` over a `B × F` affinity matrix and
//! the sparse code is `S ⊙ Z′`. The policies differ only in which axis the
//! budget constrains:
//!
//! * Token Choice: exactly `k` features per token (row).
//! * Feature Choice: exactly `m_i` tokens for feature `i` (column).
//! * Mutual Choice: exactly `M` matches anywhere in the matrix.
//!
//! Ties are always resolved toward the lowest (flat) index so masks are
//! reproducible bit for bit.

use std::cmp::Ordering;
use std::ops::Deref;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

/// Pre-activation affinities `Z′`, shape `(tokens, features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(Array2<f64>);

impl AffinityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (b, f) = values.dim();
        if b == 0 || f == 0 {
            return Err(SaeError::invalid("affinity matrix must be non-empty"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite {
                location: format!("affinity matrix entry ({}, {})", pos / f, pos % f),
            });
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl Deref for AffinityMatrix {
    type Target = Array2<f64>;

    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Binary token–feature selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    selected: Array2<bool>,
    nnz: usize,
}

impl SparsityMask {
    pub fn from_selected(selected: Array2<bool>) -> Self {
        let nnz = selected.iter().filter(|&&s| s).count();
        Self { selected, nnz }
    }

    pub fn empty(tokens: usize, features: usize) -> Self {
        Self {
            selected: Array2::from_elem((tokens, features), false),
            nnz: 0,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.selected.dim()
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn get(&self, token: usize, feature: usize) -> bool {
        self.selected[[token, feature]]
    }

    pub fn selected(&self) -> ArrayView2<'_, bool> {
        self.selected.view()
    }

    /// Selected features of one token, in ascending feature order.
    pub fn row_indices(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        self.selected
            .row(token)
            .into_iter()
            .enumerate()
            .filter_map(|(j, &s)| s.then_some(j))
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.selected
            .axis_iter(Axis(0))
            .map(|r| r.iter().filter(|&&s| s).count())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        let (_, f) = self.dim();
        let mut sums = vec![0usize; f];
        for row in self.selected.axis_iter(Axis(0)) {
            for (j, &s) in row.iter().enumerate() {
                if s {
                    sums[j] += 1;
                }
            }
        }
        sums
    }

    /// All selected `(token, feature)` pairs in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        let (_, f) = self.dim();
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(flat, &s)| s.then_some((flat / f, flat % f)))
            .collect()
    }
}

/// How an affinity is scored when ranking candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    ByValue,
    ByMagnitude,
}

impl Criterion {
    #[inline]
    pub fn score(self, v: f64) -> f64 {
        match self {
            Criterion::ByValue => v,
            Criterion::ByMagnitude => v.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestFlatIndexFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyKind {
    TokenChoice {
        k: usize,
    },
    /// `budgets[i]` is the token budget of feature `i` (feature order, not rank order).
    FeatureChoice {
        budgets: Vec<usize>,
    },
    MutualChoice {
        total_budget: usize,
    },
    ReluBaseline,
    ThresholdGate {
        #[serde(with = "infinite_as_null")]
        thresholds: Vec<f64>,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::TokenChoice { .. } => "token_choice",
            PolicyKind::FeatureChoice { .. } => "feature_choice",
            PolicyKind::MutualChoice { .. } => "mutual_choice",
            PolicyKind::ReluBaseline => "relu",
            PolicyKind::ThresholdGate { .. } => "threshold_gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Clamp negative surviving activations to zero.
    #[serde(default = "default_rectify")]
    pub rectify: bool,
}

fn default_rectify() -> bool {
    true
}

impl AllocationPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            criterion: Criterion::ByValue,
            tie_break: TieBreak::LowestFlatIndexFirst,
            rectify: true,
        }
    }

    pub fn token_choice(k: usize) -> Self {
        Self::new(PolicyKind::TokenChoice { k })
    }

    pub fn feature_choice(budgets: Vec<usize>) -> Self {
        Self::new(PolicyKind::FeatureChoice { budgets })
    }

    pub fn mutual_choice(total_budget: usize) -> Self {
        Self::new(PolicyKind::MutualChoice { total_budget })
    }

    pub fn relu() -> Self {
        Self::new(PolicyKind::ReluBaseline)
    }

    pub fn threshold_gate(thresholds: Vec<f64>) -> Self {
        Self::new(PolicyKind::ThresholdGate { thresholds })
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn with_rectify(mut self, rectify: bool) -> Self {
        self.rectify = rectify;
        self
    }

    /// Checks the budgets against a `tokens × features` affinity matrix.
    pub fn validate(&self, tokens: usize, features: usize) -> Result<()> {
        match &self.kind {
            PolicyKind::TokenChoice { k } => {
                if *k > features {
                    return Err(SaeError::BudgetExceedsDomain {
                        budget: *k,
                        domain: features,
                    });
                }
            }
            PolicyKind::FeatureChoice { budgets } => {
                if budgets.len() != features {
                    return Err(SaeError::ShapeMismatch {
                        context: "feature choice budgets",
                        expected: (features, 1),
                        actual: (budgets.len(), 1),
                    });
                }
                if let Some((feature, &budget)) =
                    budgets.iter().enumerate().find(|(_, &m)| m > tokens)
                {
                    return Err(SaeError::InfeasibleBudget {
                        feature,
                        budget,
                        batch: tokens,
                    });
                }
            }
            PolicyKind::MutualChoice { total_budget } => {
                if *total_budget > tokens * features {
                    return Err(SaeError::BudgetExceedsDomain {
                        budget: *total_budget,
                        domain: tokens * features,
                    });
                }
            }
            PolicyKind::ReluBaseline => {}
            PolicyKind::ThresholdGate { thresholds } => {
                if thresholds.len() != features {
                    return Err(SaeError::ShapeMismatch {
                        context: "threshold gate",
                        expected: (features, 1),
                        actual: (thresholds.len(), 1),
                    });
                }
                if thresholds.iter().any(|t| t.is_nan()) {
                    return Err(SaeError::invalid("threshold is NaN"));
                }
            }
        }
        Ok(())
    }

    /// Expected number of matches per token for a batch of `tokens` rows.
    pub fn expected_k(&self, tokens: usize) -> Option<f64> {
        match &self.kind {
            PolicyKind::TokenChoice { k } => Some(*k as f64),
            PolicyKind::FeatureChoice { budgets } => {
                Some(budgets.iter().sum::<usize>() as f64 / tokens as f64)
            }
            PolicyKind::MutualChoice { total_budget } => Some(*total_budget as f64 / tokens as f64),
            _ => None,
        }
    }
}

/// `a` ranks ahead of `b`: higher score first, then lower index.
#[inline]
fn rank_order(sa: f64, ia: usize, sb: f64, ib: usize) -> Ordering {
    sb.total_cmp(&sa).then(ia.cmp(&ib))
}

/// Top `k` positions of `scores`, best first.
fn select_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx = select_top_set(scores, k);
    idx.sort_unstable_by(|a, b| rank_order(scores[*a], *a, scores[*b], *b));
    idx
}

/// Top `k` positions of `scores` in index order: everything strictly above
/// the k-th best score, then ties at that score by lowest index.
fn select_top_set(scores: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    let mut vals = scores.to_vec();
    let (_, &mut cut, _) = vals.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let above = scores
        .iter()
        .filter(|s| s.total_cmp(&cut) == Ordering::Greater)
        .count();
    let mut ties = k - above;
    let mut out = Vec::with_capacity(k);
    for (i, s) in scores.iter().enumerate() {
        match s.total_cmp(&cut) {
            Ordering::Greater => out.push(i),
            Ordering::Equal if ties > 0 => {
                ties -= 1;
                out.push(i);
            }
            _ => {}
        }
    }
    out
}

/// Indices of the `k` best entries of `values` under `criterion`, best first.
pub fn top_k_indices(
    values: &[f64],
    k: usize,
    criterion: Criterion,
    _tie_break: TieBreak,
) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(SaeError::BudgetExceedsDomain {
            budget: k,
            domain: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::NonFinite {
            location: "top_k_indices input".into(),
        });
    }
    let scores: Vec<f64> = values.iter().map(|&v| criterion.score(v)).collect();
    Ok(select_top(&scores, k))
}

pub fn build_mask(z_pre: &AffinityMatrix, policy: &AllocationPolicy) -> Result<SparsityMask> {
    let (b, f) = z_pre.dim();
    policy.validate(b, f)?;
    let crit = policy.criterion;
    let mut selected = Array2::from_elem((b, f), false);

    match &policy.kind {
        PolicyKind::TokenChoice { k } => {
            let picks: Vec<Vec<usize>> = (0..b)
                .into_par_iter()
                .map(|t| {
                    let scores: Vec<f64> = z_pre.row(t).iter().map(|&v| crit.score(v)).collect();
                    select_top_set(&scores, *k)
                })
                .collect();
            for (t, cols) in picks.into_iter().enumerate() {
                for j in cols {
                    selected[[t, j]] = true;
                }
            }
        }
        PolicyKind::FeatureChoice { budgets } => {
            let picks: Vec<Vec<usize>> = (0..f)
                .into_par_iter()
                .map(|j| {
                    let scores: Vec<f64> = z_pre.column(j).iter().map(|&v| crit.score(v)).collect();
                    select_top_set(&scores, budgets[j])
                })
                .collect();
            for (j, rows) in picks.into_iter().enumerate() {
                for t in rows {
                    selected[[t, j]] = true;
                }
            }
        }
        PolicyKind::MutualChoice { total_budget } => {
            let scores: Vec<f64> = z_pre.iter().map(|&v| crit.score(v)).collect();
            for flat in select_top_set(&scores, *total_budget) {
                selected[[flat / f, flat % f]] = true;
            }
        }
        PolicyKind::ReluBaseline => {
            selected.zip_mut_with(&**z_pre, |s, &v| *s = v > 0.0);
        }
        PolicyKind::ThresholdGate { thresholds } => {
            // `>=` so a threshold calibrated as a minimum still admits that minimum.
            for (mut row_sel, row) in selected
                .axis_iter_mut(Axis(0))
                .zip(z_pre.axis_iter(Axis(0)))
            {
                for j in 0..f {
                    row_sel[j] = crit.score(row[j]) >= thresholds[j];
                }
            }
        }
    }
    Ok(SparsityMask::from_selected(selected))
}

/// `mask ⊙ z_pre`, optionally clamping negative survivors to zero.
pub fn apply_mask(
    z_pre: ArrayView2<'_, f64>,
    mask: &SparsityMask,
    rectify: bool,
) -> Result<Array2<f64>> {
    if z_pre.dim() != mask.dim() {
        return Err(SaeError::ShapeMismatch {
            context: "apply_mask",
            expected: z_pre.dim(),
            actual: mask.dim(),
        });
    }
    let mut out = Array2::zeros(z_pre.dim());
    ndarray::Zip::from(&mut out)
        .and(&z_pre)
        .and(&mask.selected)
        .for_each(|o, &v, &s| {
            if s {
                *o = if rectify { v.max(0.0) } else { v };
            }
        });
    Ok(out)
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| {
                if x.is_infinite() && *x > 0.0 {
                    None
                } else {
                    Some(*x)
                }
            })
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
