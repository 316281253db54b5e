use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ActivationStore;
use crate::error::{Result, SaeError};

/// Number of active ground-truth features per token: Poisson(`mean`)
/// clipped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveCount {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub d_model: usize,
    pub n_true_features: usize,
    pub zipf_alpha: f64,
    pub zipf_beta: f64,
    pub actives: ActiveCount,
    pub coeff_range: (f64, f64),
    pub noise_sigma: f64,
    pub n_tokens: usize,
    /// Fraction of tokens replaced by one fixed, noise-free "easy" row.
    pub easy_row_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_true_features: 512,
            zipf_alpha: 1.0,
            zipf_beta: 6.8,
            actives: ActiveCount {
                mean: 8.0,
                min: 1,
                max: 32,
            },
            coeff_range: (0.5, 2.0),
            noise_sigma: 0.01,
            n_tokens: 262_144,
            easy_row_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SaeError::invalid(format!("synthetic spec: {m}")));
        if self.d_model < 2 || self.n_true_features == 0 {
            return bad("d_model must be >= 2 and n_true_features >= 1");
        }
        if !(self.zipf_alpha > 0.0) || !(self.zipf_beta > -1.0) {
            return bad("zipf alpha must be > 0 and beta > -1");
        }
        let a = self.actives;
        if a.min < 1 || a.min > a.max || !(a.mean > 0.0) || a.min > self.n_true_features {
            return bad("active count needs 1 <= min <= max, min <= n_true_features, mean > 0");
        }
        let (lo, hi) = self.coeff_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return bad("coefficient range must satisfy 0 < lo <= hi");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.easy_row_rate) {
            return bad("easy row rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `(n_true_features, d_model)`, unit rows. Row `i` has frequency rank `i + 1`.
    pub dictionary: Array2<f64>,
    /// Active `(feature, coefficient)` pairs for every token; empty for easy rows.
    pub codes: Vec<Vec<(usize, f64)>>,
    pub easy_row: Array1<f64>,
    pub easy_rows: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    spec: SyntheticSpec,
    dictionary: Vec<Vec<f64>>,
    easy_row: Vec<f64>,
    easy_rows: Vec<usize>,
}

impl GroundTruth {
    /// Saves the dictionary and easy-row bookkeeping (not the per-token codes).
    pub fn write_json(&self, spec: &SyntheticSpec, path: &Path) -> Result<()> {
        let file = TruthFile {
            spec: spec.clone(),
            dictionary: self.dictionary.outer_iter().map(|r| r.to_vec()).collect(),
            easy_row: self.easy_row.to_vec(),
            easy_rows: self.easy_rows.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| SaeError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<(SyntheticSpec, GroundTruth)> {
        let text = std::fs::read_to_string(path).map_err(|e| SaeError::io(path, e))?;
        let file: TruthFile = serde_json::from_str(&text)?;
        let rows = file.dictionary.len();
        let cols = file.dictionary.first().map_or(0, Vec::len);
        let dictionary = Array2::from_shape_vec((rows, cols), file.dictionary.concat())
            .map_err(|e| SaeError::invalid(format!("ragged dictionary: {e}")))?;
        Ok((
            file.spec,
            GroundTruth {
                dictionary,
                codes: Vec::new(),
                easy_row: Array1::from(file.easy_row),
                easy_rows: file.easy_rows,
            },
        ))
    }

    pub fn is_easy(&self, n_rows: usize) -> Vec<bool> {
        let mut flags = vec![false; n_rows];
        for &r in &self.easy_rows {
            if r < n_rows {
                flags[r] = true;
            }
        }
        flags
    }
}

fn random_unit<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Sparse superpositions of a random unit dictionary whose feature
/// frequencies follow `1 / (rank + β)^α`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ActivationStore, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, f_true) = (spec.d_model, spec.n_true_features);

    let mut dictionary = Array2::zeros((f_true, n));
    for mut row in dictionary.outer_iter_mut() {
        row.assign(&random_unit(n, &mut rng));
    }
    let easy_row = random_unit(n, &mut rng);

    let weights: Vec<f64> = (1..=f_true)
        .map(|i| (i as f64 + spec.zipf_beta).powf(-spec.zipf_alpha))
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| SaeError::invalid(e.to_string()))?;
    let count_dist =
        Poisson::new(spec.actives.mean).map_err(|e| SaeError::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SaeError::invalid(e.to_string()))?;
    let max_active = spec.actives.max.min(f_true);
    let (lo, hi) = spec.coeff_range;

    let mut payload = Vec::with_capacity(spec.n_tokens * n);
    let mut codes = Vec::with_capacity(spec.n_tokens);
    let mut easy_rows = Vec::new();
    let mut token = vec![0.0f64; n];
    for t in 0..spec.n_tokens {
        if spec.easy_row_rate > 0.0 && rng.random::<f64>() < spec.easy_row_rate {
            easy_rows.push(t);
            codes.push(Vec::new());
            payload.extend(easy_row.iter().map(|&v| v as f32));
            continue;
        }
        let count = (count_dist.sample(&mut rng) as usize).clamp(spec.actives.min, max_active);
        let mut active: Vec<(usize, f64)> = Vec::with_capacity(count);
        while active.len() < count {
            let feature = pick.sample(&mut rng);
            if active.iter().all(|&(g, _)| g != feature) {
                let c = if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                };
                active.push((feature, c));
            }
        }
        token.iter_mut().for_each(|v| *v = 0.0);
        for &(feature, c) in &active {
            for (v, d) in token.iter_mut().zip(dictionary.row(feature)) {
                *v += c * d;
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in token.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        payload.extend(token.iter().map(|&v| v as f32));
        codes.push(active);
    }

    let store = ActivationStore::new(n, payload)?;
    Ok((
        store,
        GroundTruth {
            dictionary,
            codes,
            easy_row,
            easy_rows,
        },
    ))
}
