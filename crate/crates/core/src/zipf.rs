//! Zipf-shaped feature budgets, power-law fits of feature densities, and the
//! dying-feature rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfParams {
    pub alpha: f64,
    pub beta: f64,
    /// Multiplicative constant `C` in `C / (rank + beta)^alpha`.
    pub scale: f64,
}

impl ZipfParams {
    pub fn new(alpha: f64, beta: f64, scale: f64) -> Result<Self> {
        let p = Self { alpha, beta, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(SaeError::invalid(format!(
                "zipf alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > -1.0) || !self.beta.is_finite() {
            return Err(SaeError::invalid(format!(
                "zipf beta must be > -1, got {}",
                self.beta
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(SaeError::invalid(format!(
                "zipf scale must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Predicted density at a 1-based rank.
pub fn zipf_predict(params: &ZipfParams, rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(SaeError::invalid("zipf rank must be >= 1"));
    }
    Ok(params.scale / (rank as f64 + params.beta).powf(params.alpha))
}

/// Σ_{i=1..F} (i + β)^-α
pub fn zipf_sum(features: usize, alpha: f64, beta: f64) -> f64 {
    (1..=features).map(|i| (i as f64 + beta).powf(-alpha)).sum()
}

/// Per-feature token budgets, indexed by density rank (index 0 is rank 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBudgets {
    pub m: Vec<usize>,
    /// How many ranks were raised from 0 to the floor of 1.
    pub clamped_to_one: usize,
}

impl FeatureBudgets {
    pub fn total(&self) -> usize {
        self.m.iter().sum()
    }

    /// Equal budgets `floor(total / F)` (at least 1) for every feature.
    pub fn uniform(total: usize, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(SaeError::invalid("feature count must be positive"));
        }
        let each = total / features;
        Ok(Self {
            m: vec![each.max(1); features],
            clamped_to_one: if each == 0 { features } else { 0 },
        })
    }

    /// Maps rank-ordered budgets onto features. `ranks[f]` is the 1-based rank of feature `f`.
    pub fn per_feature(&self, ranks: &[usize]) -> Result<Vec<usize>> {
        if ranks.len() != self.m.len() {
            return Err(SaeError::ShapeMismatch {
                context: "budget rank assignment",
                expected: (self.m.len(), 1),
                actual: (ranks.len(), 1),
            });
        }
        ranks
            .iter()
            .map(|&r| {
                self.m
                    .get(r.wrapping_sub(1))
                    .copied()
                    .ok_or_else(|| SaeError::invalid(format!("rank {r} out of range")))
            })
            .collect()
    }
}

fn check_budget_inputs(k: f64, features: usize, batch: usize, beta: f64, alpha: f64) -> Result<()> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(SaeError::invalid(format!(
            "expected k must be positive, got {k}"
        )));
    }
    if features == 0 || batch == 0 {
        return Err(SaeError::invalid(
            "feature count and batch size must be positive",
        ));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SaeError::invalid(format!(
            "zipf alpha must be > 0, got {alpha}"
        )));
    }
    if !(beta > -1.0) || !beta.is_finite() {
        return Err(SaeError::invalid(format!(
            "zipf beta must be > -1, got {beta}"
        )));
    }
    Ok(())
}

/// `floor(N_approx / (i + β)^α)` for every rank, before any clamping.
pub fn zipf_budget_floors(
    k: f64,
    features: usize,
    batch: usize,
    beta: f64,
    alpha: f64,
) -> Result<Vec<u64>> {
    check_budget_inputs(k, features, batch, beta, alpha)?;
    let interactions = batch as f64 * k;
    let n_approx = interactions / zipf_sum(features, alpha, beta);
    Ok((1..=features)
        .map(|i| (n_approx / (i as f64 + beta).powf(alpha)).floor() as u64)
        .collect())
}

/// Zipf-distributed token budgets for Feature Choice.
///
/// Budgets are capped at `m_max` and floored at 1 so that no feature is
/// structurally excluded from every batch.
pub fn compute_feature_budgets(
    k: f64,
    features: usize,
    batch: usize,
    beta: f64,
    alpha: f64,
    m_max: usize,
) -> Result<FeatureBudgets> {
    if m_max == 0 {
        return Err(SaeError::invalid("m_max must be positive"));
    }
    let floors = zipf_budget_floors(k, features, batch, beta, alpha)?;
    let mut clamped_to_one = 0;
    let m = floors
        .into_iter()
        .map(|raw| {
            let capped = raw.min(m_max as u64) as usize;
            if capped == 0 {
                clamped_to_one += 1;
                1
            } else {
                capped
            }
        })
        .collect();
    Ok(FeatureBudgets { m, clamped_to_one })
}

/// Zipf parameters whose prediction is the per-token density implied by the
/// budgets of [`compute_feature_budgets`] (before flooring).
pub fn budget_prior(k: f64, features: usize, alpha: f64, beta: f64) -> Result<ZipfParams> {
    check_budget_inputs(k, features, 1, beta, alpha)?;
    ZipfParams::new(alpha, beta, k / zipf_sum(features, alpha, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfFit {
    pub params: ZipfParams,
    /// Coefficient of determination of log(density) against the fitted curve.
    pub r_squared: f64,
    /// Fitted density for ranks `1..=predicted.len()`.
    pub predicted: Vec<f64>,
}

const BETA_RANGE: (f64, f64) = (0.0, 50.0);
const GRID_POINTS: usize = 100;
const GRID_PASSES: usize = 3;

struct LogLinear {
    intercept: f64,
    alpha: f64,
    sse: f64,
}

fn regress(log_density: &[f64], ranks: &[f64], beta: f64, fix_alpha: Option<f64>) -> LogLinear {
    let n = log_density.len() as f64;
    let xs: Vec<f64> = ranks.iter().map(|r| (r + beta).ln()).collect();
    let (intercept, alpha) = match fix_alpha {
        Some(a) => {
            let c = xs
                .iter()
                .zip(log_density)
                .map(|(x, y)| y + a * x)
                .sum::<f64>()
                / n;
            (c, a)
        }
        None => {
            let mx = xs.iter().sum::<f64>() / n;
            let my = log_density.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (x, y) in xs.iter().zip(log_density) {
                sxy += (x - mx) * (y - my);
                sxx += (x - mx) * (x - mx);
            }
            let slope = sxy / sxx;
            (my - slope * mx, -slope)
        }
    };
    let sse = xs
        .iter()
        .zip(log_density)
        .map(|(x, y)| {
            let r = y - (intercept - alpha * x);
            r * r
        })
        .sum();
    LogLinear {
        intercept,
        alpha,
        sse,
    }
}

/// Fits `density ≈ C / (rank + β)^α` in log–log space.
///
/// Zero densities are dropped; the rest are ranked in descending order. β is
/// located by successive grid refinement over `[0, 50]` followed by a
/// golden-section polish; `(C, α)` come from closed-form least squares at
/// each candidate β (only `C` when `fix_alpha` is given).
pub fn fit_zipf(densities: &[f64], fix_alpha: Option<f64>) -> Result<ZipfFit> {
    if let Some(a) = fix_alpha {
        if !(a > 0.0) || !a.is_finite() {
            return Err(SaeError::invalid(format!(
                "fixed alpha must be > 0, got {a}"
            )));
        }
    }
    if densities.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(SaeError::invalid(
            "densities must be finite and non-negative",
        ));
    }
    let mut positive: Vec<f64> = densities.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.len() < 3 {
        return Err(SaeError::InsufficientData {
            needed: 3,
            got: positive.len(),
        });
    }
    positive.sort_by(|a, b| b.total_cmp(a));
    let log_density: Vec<f64> = positive.iter().map(|d| d.ln()).collect();
    let ranks: Vec<f64> = (1..=positive.len()).map(|r| r as f64).collect();
    let sse_at = |beta: f64| regress(&log_density, &ranks, beta, fix_alpha).sse;

    let (mut lo, mut hi) = BETA_RANGE;
    let mut best = lo;
    for _ in 0..GRID_PASSES {
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let mut best_sse = f64::INFINITY;
        for j in 0..GRID_POINTS {
            let beta = lo + step * j as f64;
            let sse = sse_at(beta);
            if sse < best_sse {
                best_sse = sse;
                best = beta;
            }
        }
        lo = (best - step).max(BETA_RANGE.0);
        hi = (best + step).min(BETA_RANGE.1);
    }
    best = golden_section(sse_at, lo, hi, best);

    let fit = regress(&log_density, &ranks, best, fix_alpha);
    let my = log_density.iter().sum::<f64>() / log_density.len() as f64;
    let sst: f64 = log_density.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if sst > 0.0 {
        1.0 - fit.sse / sst
    } else if fit.sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let params = ZipfParams {
        alpha: fit.alpha,
        beta: best,
        scale: fit.intercept.exp(),
    };
    let predicted = ranks
        .iter()
        .map(|r| params.scale / (r + params.beta).powf(params.alpha))
        .collect();
    Ok(ZipfFit {
        params,
        r_squared,
        predicted,
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, fallback: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    if f(mid) <= f(fallback) {
        mid
    } else {
        fallback
    }
}

/// Feature indices ordered from most to least dense; ties go to the lower index.
pub fn rank_order(densities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..densities.len()).collect();
    order.sort_by(|&a, &b| densities[b].total_cmp(&densities[a]).then(a.cmp(&b)));
    order
}

/// First 1-based rank counted as "bottom quartile": `ceil(0.75·F) + 1`.
pub fn bottom_quartile_start(features: usize) -> usize {
    (3 * features).div_ceil(4) + 1
}

/// Features in the bottom quarter by density rank whose density is strictly
/// below 60% of the fitted prediction at their rank. Returned in ascending
/// feature order.
pub fn classify_dying(densities: &[f64], fit: &ZipfFit) -> Vec<usize> {
    let start = bottom_quartile_start(densities.len());
    let mut dying: Vec<usize> = rank_order(densities)
        .into_iter()
        .enumerate()
        .filter_map(|(pos, feature)| {
            let rank = pos + 1;
            if rank < start {
                return None;
            }
            let predicted =
                fit.params.scale / (rank as f64 + fit.params.beta).powf(fit.params.alpha);
            (densities[feature] < 0.6 * predicted).then_some(feature)
        })
        .collect();
    dying.sort_unstable();
    dying
}

#[derive(Debug, Serialize, Deserialize)]
struct DensityRow {
    rank: usize,
    density: f64,
}

/// Writes densities sorted in descending order with 1-based ranks.
pub fn write_density_csv(path: &Path, densities: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut sorted = densities.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for (i, density) in sorted.into_iter().enumerate() {
        w.serialize(DensityRow {
            rank: i + 1,
            density,
        })?;
    }
    w.flush().map_err(|e| SaeError::io(path, e))?;
    Ok(())
}

/// Reads a `rank,density` CSV and returns densities in rank order.
pub fn read_density_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["rank", "density"] {
        return Err(SaeError::invalid(format!(
            "density CSV {path:?} must have header `rank,density`"
        )));
    }
    let mut rows: Vec<DensityRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|row| row.rank);
    Ok(rows.into_iter().map(|row| row.density).collect())
}
