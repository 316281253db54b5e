//! Run configuration. Every field has an explicit default and is written
//! back in full when a run is saved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::losses::LossWeights;
use crate::optimizer::{scaled_lr, AdamWConfig};
use crate::sparsifiers::Criterion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    TokenChoice,
    FeatureChoice,
    MutualChoice,
    Relu,
}

impl PolicyChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token-choice" | "tc" => Ok(Self::TokenChoice),
            "feature-choice" | "fc" => Ok(Self::FeatureChoice),
            "mutual-choice" | "mc" => Ok(Self::MutualChoice),
            "relu" => Ok(Self::Relu),
            other => Err(SaeError::invalid(format!("unknown policy '{other}'"))),
        }
    }
}

/// Reference curve for the dying-feature rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DyingReference {
    /// Zipf curve refit to the tracked densities at every refit.
    Refit,
    /// Density implied by the configured budget curve.
    Prior,
}

/// Where phase-2 Feature Choice budgets take their Zipf shape from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetSource {
    /// The last phase-1 refit, falling back to the configured curve.
    Fit,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZipfSettings {
    pub alpha: f64,
    pub beta: f64,
    /// Per-feature budget cap; `None` caps at the batch size.
    pub m_max: Option<usize>,
    pub fix_alpha: Option<f64>,
    pub budget_source: BudgetSource,
}

impl Default for ZipfSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 6.8,
            m_max: None,
            fix_alpha: None,
            budget_source: BudgetSource::Fit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingSettings {
    pub window_tokens: u64,
    pub dead_threshold_tokens: u64,
    /// Steps between Zipf refits in phase 1; the dying set is frozen in between.
    pub refit_interval: usize,
    pub dying_reference: DyingReference,
}

impl Default for TrackingSettings {
    fn default() -> Self {
        Self {
            window_tokens: 100_000,
            dead_threshold_tokens: 100_000,
            refit_interval: 500,
            dying_reference: DyingReference::Refit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Settings {
    pub enabled: bool,
    pub steps: usize,
}

impl Default for Phase2Settings {
    fn default() -> Self {
        Self {
            enabled: false,
            steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub enabled: bool,
    pub window_steps: usize,
    pub min_rel_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: false,
            window_steps: 500,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        let d = AdamWConfig::default();
        Self {
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: String,
    pub data: PathBuf,
    /// Ground-truth sidecar written by `gen-data`, for the recovery score.
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub policy: PolicyChoice,
    pub criterion: Criterion,
    pub rectify: bool,
    pub width_multiple: usize,
    pub expected_k: f64,
    /// When set, overrides `expected_k` with `round(ratio · F)`.
    pub expected_k_ratio: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr_base: f64,
    pub lr_n_ref: usize,
    pub optimizer: OptimSettings,
    pub weights: LossWeights,
    pub zipf: ZipfSettings,
    pub tracking: TrackingSettings,
    pub phase2: Phase2Settings,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub shuffle_buffer_tokens: usize,
    /// Rows held out from the end of the data file for the final evaluation.
    pub eval_tokens: usize,
    pub save_optimizer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Training recipes compared at matched expected k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    TokenChoice,
    MutualChoice,
    MutualThenFeature,
    FeatureChoice,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tc" | "token-choice" => Ok(Self::TokenChoice),
            "mc" | "mutual-choice" => Ok(Self::MutualChoice),
            "mc-fc" | "mutual-then-feature" => Ok(Self::MutualThenFeature),
            "fc" | "feature-choice" => Ok(Self::FeatureChoice),
            other => Err(SaeError::invalid(format!("unknown recipe '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::TokenChoice => "tc",
            Self::MutualChoice => "mc",
            Self::MutualThenFeature => "mc-fc",
            Self::FeatureChoice => "fc",
        }
    }
}

impl RunConfig {
    /// Laptop-scale defaults: 8× width, E[k] = 20, 2000 steps of 1536 tokens.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            data: PathBuf::from("data/synthetic.saeact"),
            truth: None,
            out_dir: PathBuf::from("runs/desk"),
            policy: PolicyChoice::MutualChoice,
            criterion: Criterion::ByValue,
            rectify: true,
            width_multiple: 8,
            expected_k: 20.0,
            expected_k_ratio: None,
            steps: 2000,
            batch_size: 1536,
            accumulation_steps: 1,
            lr_base: 2e-3,
            lr_n_ref: 512,
            optimizer: OptimSettings::default(),
            weights: LossWeights::default(),
            zipf: ZipfSettings::default(),
            tracking: TrackingSettings::default(),
            phase2: Phase2Settings::default(),
            early_stop: EarlyStop::default(),
            seed: 0,
            shuffle_buffer_tokens: 65_536,
            eval_tokens: 15_360,
            save_optimizer: false,
        }
    }

    /// Desk preset with E[k] tied to 0.8% of the dictionary.
    pub fn paper_ratio() -> Self {
        Self {
            preset: "paper-ratio".into(),
            expected_k_ratio: Some(0.008),
            ..Self::desk()
        }
    }

    /// Desk preset cut to 200 steps, for quick end-to-end checks.
    pub fn smoke() -> Self {
        Self {
            preset: "smoke".into(),
            out_dir: PathBuf::from("runs/smoke"),
            steps: 200,
            tracking: TrackingSettings {
                refit_interval: 100,
                ..TrackingSettings::default()
            },
            ..Self::desk()
        }
    }

    /// Full-scale settings for real exported activations.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            out_dir: PathBuf::from("runs/paper"),
            width_multiple: 32,
            expected_k_ratio: Some(0.008),
            steps: 10_000,
            lr_base: 3e-4,
            lr_n_ref: 6144,
            tracking: TrackingSettings {
                window_tokens: 100_000_000,
                dead_threshold_tokens: 10_000_000,
                ..TrackingSettings::default()
            },
            phase2: Phase2Settings {
                enabled: true,
                steps: 2_000,
            },
            early_stop: EarlyStop {
                enabled: true,
                ..EarlyStop::default()
            },
            shuffle_buffer_tokens: 1 << 20,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            "paper" => Ok(Self::paper()),
            "paper-ratio" => Ok(Self::paper_ratio()),
            other => Err(SaeError::invalid(format!(
                "unknown preset '{other}' (expected desk, smoke, paper or paper-ratio)"
            ))),
        }
    }

    /// Adapts this config to a recipe, keeping the total step count.
    pub fn with_recipe(&self, recipe: Recipe) -> Self {
        let mut c = self.clone();
        match recipe {
            Recipe::TokenChoice => {
                c.policy = PolicyChoice::TokenChoice;
                c.weights.lambda_aux_zipf = 0.0;
                c.phase2.enabled = false;
            }
            Recipe::MutualChoice => {
                c.policy = PolicyChoice::MutualChoice;
                c.phase2.enabled = false;
            }
            Recipe::MutualThenFeature => {
                c.policy = PolicyChoice::MutualChoice;
                c.phase2.enabled = true;
                let p2 = c.phase2.steps.min(c.steps.saturating_sub(1));
                c.phase2.steps = p2;
                c.steps -= p2;
            }
            Recipe::FeatureChoice => {
                c.policy = PolicyChoice::FeatureChoice;
                c.phase2.enabled = false;
            }
        }
        c
    }

    pub fn features(&self, d_model: usize) -> usize {
        self.width_multiple * d_model
    }

    pub fn resolved_k(&self, features: usize) -> f64 {
        match self.expected_k_ratio {
            Some(r) => (r * features as f64).round().max(1.0),
            None => self.expected_k,
        }
    }

    pub fn learning_rate(&self, features: usize) -> f64 {
        scaled_lr(self.lr_base, features, self.lr_n_ref)
    }

    pub fn adamw(&self, features: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate(features),
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            epsilon: self.optimizer.epsilon,
            weight_decay: self.optimizer.weight_decay,
            clip_norm: self.optimizer.clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaeError::InvalidParameter(m));
        if self.width_multiple == 0 {
            return bad("width_multiple must be >= 1".into());
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return bad("batch_size and accumulation_steps must be >= 1".into());
        }
        if !(self.expected_k > 0.0) || !self.expected_k.is_finite() {
            return bad(format!("expected_k must be > 0, got {}", self.expected_k));
        }
        if let Some(r) = self.expected_k_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("expected_k_ratio must lie in (0, 1], got {r}"));
            }
        }
        if !(self.lr_base > 0.0) || self.lr_n_ref == 0 {
            return bad("lr_base and lr_n_ref must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.epsilon > 0.0) || !(o.weight_decay >= 0.0) || !(o.clip_norm > 0.0) {
            return bad("epsilon and clip_norm must be > 0, weight_decay >= 0".into());
        }
        self.weights.validate()?;
        if self.tracking.window_tokens == 0 || self.tracking.dead_threshold_tokens == 0 {
            return bad("tracking window and dead threshold must be >= 1".into());
        }
        if self.tracking.refit_interval == 0 {
            return bad("refit_interval must be >= 1".into());
        }
        if self.shuffle_buffer_tokens < self.batch_size {
            return bad(format!(
                "shuffle_buffer_tokens ({}) must be >= batch_size ({})",
                self.shuffle_buffer_tokens, self.batch_size
            ));
        }
        if self.eval_tokens < self.batch_size {
            return bad(format!(
                "eval_tokens ({}) must hold at least one batch ({})",
                self.eval_tokens, self.batch_size
            ));
        }
        if self.early_stop.enabled && self.early_stop.window_steps == 0 {
            return bad("early_stop.window_steps must be >= 1".into());
        }
        if self.phase2.enabled && self.policy != PolicyChoice::MutualChoice {
            return bad("phase 2 follows a mutual-choice phase 1".into());
        }
        if self.policy == PolicyChoice::Relu && self.weights.lambda_sparsity == 0.0 {
            return bad("the relu policy needs lambda_sparsity > 0".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SaeError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        for name in ["desk", "smoke", "paper", "paper-ratio"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn defaults_are_written_explicitly() {
        let text = RunConfig::desk().to_json().unwrap();
        for key in [
            "m_max",
            "fix_alpha",
            "expected_k_ratio",
            "truth",
            "dead_threshold_tokens",
        ] {
            assert!(text.contains(&format!("\"{key}\"")), "{key} missing");
        }
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c = RunConfig::from_json(r#"{"steps": 7, "policy": "token-choice"}"#).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.policy, PolicyChoice::TokenChoice);
        assert_eq!(c.batch_size, 1536);
    }

    #[test]
    fn ratio_preset_resolves_k() {
        assert_eq!(RunConfig::paper_ratio().resolved_k(512), 4.0);
        assert_eq!(RunConfig::desk().resolved_k(512), 20.0);
        assert_eq!(RunConfig::paper().resolved_k(24_576), 197.0);
    }

    #[test]
    fn recipes_keep_total_steps() {
        let base = RunConfig::desk();
        let two_phase = base.with_recipe(Recipe::MutualThenFeature);
        assert_eq!(two_phase.steps + two_phase.phase2.steps, base.steps);
        assert!(two_phase.phase2.enabled);
        let tc = base.with_recipe(Recipe::TokenChoice);
        assert_eq!(tc.weights.lambda_aux_zipf, 0.0);
        assert!(tc.weights.lambda_aux_k > 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::desk();
        c.shuffle_buffer_tokens = 10;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.policy = PolicyChoice::TokenChoice;
        c.phase2.enabled = true;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.policy = PolicyChoice::Relu;
        assert!(c.validate().is_err());
    }
}
