//! Per-feature firing statistics over training.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::sparsifiers::SparsityMask;
use crate::zipf::{self, ZipfFit};

/// Firing counts over a tumbling window plus lifetime bookkeeping.
///
/// Token indices are 1-based: after `n` tokens have been seen the most
/// recent one has index `n`, and `last_fired_at == 0` means "never fired".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDensityStats {
    pub fire_counts: Vec<u64>,
    pub window_tokens: u64,
    pub window_len: u64,
    pub tokens_seen_total: u64,
    pub last_fired_at: Vec<u64>,
    /// Counts of the last window that ran to completion, if any.
    pub completed_window: Option<(Vec<u64>, u64)>,
}

impl FeatureDensityStats {
    pub fn new(features: usize, window_len: u64) -> Self {
        Self {
            fire_counts: vec![0; features],
            window_tokens: 0,
            window_len: window_len.max(1),
            tokens_seen_total: 0,
            last_fired_at: vec![0; features],
            completed_window: None,
        }
    }

    pub fn features(&self) -> usize {
        self.fire_counts.len()
    }

    /// Accumulates one batch of firing events.
    pub fn update_density(&mut self, mask: &SparsityMask) -> Result<()> {
        let (b, f) = mask.dim();
        if f != self.features() {
            return Err(SaeError::ShapeMismatch {
                context: "update_density",
                expected: (b, self.features()),
                actual: (b, f),
            });
        }
        if self.window_tokens >= self.window_len {
            let counts = std::mem::replace(&mut self.fire_counts, vec![0; f]);
            self.completed_window = Some((counts, self.window_tokens));
            self.window_tokens = 0;
        }
        let start = self.tokens_seen_total;
        for (t, row) in mask.selected().outer_iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if s {
                    self.fire_counts[j] += 1;
                    self.last_fired_at[j] = start + t as u64 + 1;
                }
            }
        }
        self.window_tokens += b as u64;
        self.tokens_seen_total += b as u64;
        Ok(())
    }

    /// Per-token firing frequency from the most recent complete window, or the
    /// current partial window when none has completed yet.
    pub fn densities(&self) -> Result<Vec<f64>> {
        let (counts, tokens) = match &self.completed_window {
            Some((c, t)) if self.window_tokens < self.window_len => (c, *t),
            _ => (&self.fire_counts, self.window_tokens),
        };
        if tokens == 0 {
            return Err(SaeError::EmptyWindow);
        }
        Ok(counts.iter().map(|&c| c as f64 / tokens as f64).collect())
    }

    /// Features that have not fired within the last `dead_threshold_tokens` tokens.
    pub fn detect_dead(&self, dead_threshold_tokens: u64) -> BTreeSet<usize> {
        let threshold = dead_threshold_tokens.max(1);
        self.last_fired_at
            .iter()
            .enumerate()
            .filter(|(_, &last)| self.tokens_seen_total - last >= threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// 1-based density rank of each feature in the current window.
    pub fn density_ranks(&self) -> Result<Vec<usize>> {
        if self.window_tokens == 0 {
            return Err(SaeError::EmptyWindow);
        }
        let counts: Vec<f64> = self.fire_counts.iter().map(|&c| c as f64).collect();
        Ok(ranks_from_order(&zipf::rank_order(&counts)))
    }
}

/// Inverts a rank order (features listed best first) into per-feature ranks.
pub fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &feature) in order.iter().enumerate() {
        ranks[feature] = pos + 1;
    }
    ranks
}

/// Number of features selected for each token.
pub fn features_per_token(mask: &SparsityMask) -> Vec<usize> {
    mask.row_sums()
}

/// Histogram of features-per-token counts: `hist[c]` tokens had `c` features.
pub fn features_per_token_histogram(mask: &SparsityMask) -> Vec<usize> {
    let sums = features_per_token(mask);
    let mut hist = vec![0; sums.iter().copied().max().unwrap_or(0) + 1];
    for s in sums {
        hist[s] += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHealth {
    pub dead: BTreeSet<usize>,
    pub dying: BTreeSet<usize>,
    pub ranks: Vec<usize>,
}

impl FeatureHealth {
    /// Combines the dead set with the dying rule; dead features are never also dying.
    pub fn assess(
        stats: &FeatureDensityStats,
        dead_threshold_tokens: u64,
        reference: Option<&ZipfFit>,
    ) -> Result<Self> {
        let densities = stats.densities()?;
        let dead = stats.detect_dead(dead_threshold_tokens);
        let dying = match reference {
            Some(fit) => zipf::classify_dying(&densities, fit)
                .into_iter()
                .filter(|i| !dead.contains(i))
                .collect(),
            None => BTreeSet::new(),
        };
        let ranks = ranks_from_order(&zipf::rank_order(&densities));
        Ok(Self { dead, dying, ranks })
    }
}
