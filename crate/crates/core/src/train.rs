//! The training loop and the two-phase Mutual Choice → Feature Choice recipe.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, write_atomic, SaveRequest};
use crate::config::{BudgetSource, DyingReference, PolicyChoice, RunConfig};
use crate::data::{read_activations, ActivationStore, BatchCycler, GroundTruth};
use crate::error::{Result, SaeError};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::losses::{AuxSets, LossReport};
use crate::model::{
    forward, loss_and_backward, preprocess, project_decoder_grads, Gradients, SaeParams,
};
use crate::optimizer::{clip_gradients, AdamWState};
use crate::sparsifiers::AllocationPolicy;
use crate::tracking::{ranks_from_order, FeatureDensityStats};
use crate::zipf::{self, compute_feature_budgets, FeatureBudgets, ZipfFit};

pub const THREADS_ENV: &str = "SPARSEALLOC_THREADS";

/// Caps the global rayon pool from `SPARSEALLOC_THREADS`, if set.
pub fn configure_threads_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        SaeError::invalid(format!(
            "{THREADS_ENV} must be a positive integer, got '{raw}'"
        ))
    })?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(Some(n))
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: u8,
    pub policy: String,
    pub loss: LossReport,
    pub dead: usize,
    pub dying: usize,
    pub mean_l0: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub dec_norm_max_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub d_model: usize,
    pub features: usize,
    pub expected_k: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub phase1_policy: String,
    pub final_policy: String,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub early_stopped: bool,
    pub initial_mse: f64,
    /// Mean training MSE over the last few steps.
    pub final_mse: f64,
    /// From the training tracker with the configured dead threshold.
    pub dead_count: usize,
    pub dying_count: usize,
    pub dead_threshold_tokens: u64,
    pub density_window_tokens: u64,
    pub tokens_seen: u64,
    pub budgets_clamped_to_one: usize,
    pub zipf_fit: Option<ZipfFit>,
    /// Reconstruction is reported as FVU; downstream loss recovered needs a language model.
    pub reconstruction_metric: String,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SaeParams,
    pub optimizer: AdamWState,
    pub stats: FeatureDensityStats,
    pub policy: AllocationPolicy,
    pub report: TrainReport,
    pub log: Vec<StepRecord>,
}

pub struct TrainInputs<'a> {
    pub config: &'a RunConfig,
    pub train: &'a ActivationStore,
    pub eval: Option<&'a ActivationStore>,
    pub truth: Option<ArrayView2<'a, f64>>,
    /// Run directory; `None` keeps everything in memory.
    pub out: Option<&'a Path>,
}

fn configure(policy: AllocationPolicy, cfg: &RunConfig) -> AllocationPolicy {
    policy
        .with_criterion(cfg.criterion)
        .with_rectify(cfg.rectify)
}

/// Phase-1 policy and, for Feature Choice, its budgets (assigned in index order).
fn initial_policy(
    cfg: &RunConfig,
    features: usize,
    k: f64,
) -> Result<(AllocationPolicy, Option<FeatureBudgets>)> {
    let batch = cfg.batch_size;
    let policy = match cfg.policy {
        PolicyChoice::TokenChoice => AllocationPolicy::token_choice(k.round() as usize),
        PolicyChoice::MutualChoice => {
            AllocationPolicy::mutual_choice((k * batch as f64).round() as usize)
        }
        PolicyChoice::Relu => AllocationPolicy::relu(),
        PolicyChoice::FeatureChoice => {
            let budgets = feature_budgets(cfg, features, k, cfg.zipf.alpha, cfg.zipf.beta)?;
            let ranks: Vec<usize> = (1..=features).collect();
            let policy = AllocationPolicy::feature_choice(budgets.per_feature(&ranks)?);
            return Ok((configure(policy, cfg), Some(budgets)));
        }
    };
    Ok((configure(policy, cfg), None))
}

fn feature_budgets(
    cfg: &RunConfig,
    features: usize,
    k: f64,
    alpha: f64,
    beta: f64,
) -> Result<FeatureBudgets> {
    let batch = cfg.batch_size;
    let m_max = cfg.zipf.m_max.unwrap_or(batch);
    let budgets = compute_feature_budgets(k, features, batch, beta, alpha, m_max)?;
    if let Some((feature, &budget)) = budgets.m.iter().enumerate().find(|(_, &m)| m > batch) {
        return Err(SaeError::InfeasibleBudget {
            feature,
            budget,
            batch,
        });
    }
    Ok(budgets)
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    store: &'a ActivationStore,
    cycler: BatchCycler,
    params: SaeParams,
    opt: AdamWState,
    stats: FeatureDensityStats,
    dying: BTreeSet<usize>,
    fit: Option<ZipfFit>,
    k: f64,
    step: usize,
    records: Vec<StepRecord>,
    log: Option<(BufWriter<File>, PathBuf, PathBuf)>,
    out: Option<PathBuf>,
}

impl Loop<'_> {
    fn step(&mut self, policy: &AllocationPolicy, phase: u8) -> Result<()> {
        let cfg = self.cfg;
        let dead = self.stats.detect_dead(cfg.tracking.dead_threshold_tokens);
        let dying = self.dying.difference(&dead).copied().collect();
        let aux = AuxSets { dead, dying };

        let accum = cfg.accumulation_steps;
        let mut grads = Gradients::zeros_like(&self.params);
        let mut loss = LossReport::default();
        let mut masks = Vec::with_capacity(accum);
        let mut nonzero = 0usize;
        let mut tokens = 0usize;
        for _ in 0..accum {
            let rows = self.cycler.next_batch();
            let x = preprocess(self.store.gather(&rows).view())?;
            let trace = forward(&self.params, x.view(), policy)?;
            let (report, g) = loss_and_backward(&self.params, &trace, &cfg.weights, &aux)?;
            grads.add_assign(&g);
            accumulate(&mut loss, &report, accum);
            nonzero += trace.z.iter().filter(|&&v| v != 0.0).count();
            tokens += trace.batch();
            masks.push(trace.mask);
        }
        if accum > 1 {
            grads.scale(1.0 / accum as f64);
        }
        if !grads.all_finite() {
            return Err(SaeError::NonFinite {
                location: format!("gradients at step {}", self.step + 1),
            });
        }
        project_decoder_grads(&mut grads, &self.params)?;
        let grad_norm = clip_gradients(&mut grads, cfg.optimizer.clip_norm);
        self.opt.step(&mut self.params, &grads)?;
        for mask in &masks {
            self.stats.update_density(mask)?;
        }
        self.step += 1;

        let record = StepRecord {
            step: self.step,
            phase,
            policy: policy.kind.name().to_string(),
            loss,
            dead: aux.dead.len(),
            dying: aux.dying.len(),
            mean_l0: nonzero as f64 / tokens as f64,
            lr: self.opt.config.lr,
            grad_norm,
            dec_norm_max_dev: self.params.decoder_norm_deviation(),
        };
        if let Some((w, tmp, _)) = &mut self.log {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| SaeError::io(tmp.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Refreshes the dying set against the configured reference curve.
    fn refit(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let densities = self.stats.densities()?;
        let features = densities.len();
        let reference = match cfg.tracking.dying_reference {
            DyingReference::Refit => match zipf::fit_zipf(&densities, cfg.zipf.fix_alpha) {
                Ok(fit) => {
                    self.fit = Some(fit.clone());
                    Some(fit)
                }
                Err(SaeError::InsufficientData { .. }) => None,
                Err(e) => return Err(e),
            },
            DyingReference::Prior => {
                let params = zipf::budget_prior(self.k, features, cfg.zipf.alpha, cfg.zipf.beta)?;
                let predicted = (1..=features)
                    .map(|r| zipf::zipf_predict(&params, r))
                    .collect::<Result<Vec<_>>>()?;
                Some(ZipfFit {
                    params,
                    r_squared: 1.0,
                    predicted,
                })
            }
        };
        if let Some(fit) = reference {
            self.dying = zipf::classify_dying(&densities, &fit).into_iter().collect();
        }
        if let Some(out) = &self.out {
            let dir = out.join("densities");
            fs::create_dir_all(&dir).map_err(|e| SaeError::io(&dir, e))?;
            zipf::write_density_csv(&dir.join(format!("step_{:06}.csv", self.step)), &densities)?;
        }
        Ok(())
    }

    fn converged(&self) -> bool {
        let es = &self.cfg.early_stop;
        let w = es.window_steps;
        let n = self.records.len();
        if !es.enabled || n < 2 * w || !n.is_multiple_of(w) {
            return false;
        }
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss.mse).sum::<f64>() / s.len() as f64;
        let prev = mean(&self.records[n - 2 * w..n - w]);
        let cur = mean(&self.records[n - w..]);
        prev > 0.0 && (prev - cur) / prev < es.min_rel_improvement
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport, parts: usize) {
    let s = 1.0 / parts as f64;
    acc.mse += r.mse * s;
    acc.l1 += r.l1 * s;
    acc.aux_k += r.aux_k * s;
    acc.aux_zipf += r.aux_zipf * s;
    acc.nfm += r.nfm * s;
    acc.nfm_inf += r.nfm_inf * s;
    acc.weighted.l1 += r.weighted.l1 * s;
    acc.weighted.aux_k += r.weighted.aux_k * s;
    acc.weighted.aux_zipf += r.weighted.aux_zipf * s;
    acc.weighted.nfm += r.weighted.nfm * s;
    acc.weighted.nfm_inf += r.weighted.nfm_inf * s;
    acc.total += r.total * s;
    acc.aux_overridden |= r.aux_overridden;
}

/// Trains on an in-memory store; writes run artifacts when `out` is set.
pub fn train(inputs: &TrainInputs<'_>) -> Result<TrainOutcome> {
    let cfg = inputs.config;
    cfg.validate()?;
    let store = inputs.train;
    let n = store.d_model();
    let features = cfg.features(n);
    let k = cfg.resolved_k(features);
    let (phase1_policy, fc_budgets) = initial_policy(cfg, features, k)?;
    phase1_policy.validate(cfg.batch_size, features)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = SaeParams::init(n, features, &mut rng);
    let cycler = BatchCycler::new(
        store,
        cfg.batch_size,
        cfg.shuffle_buffer_tokens,
        rng.random(),
    )?;
    let opt = AdamWState::new(cfg.adamw(features), &params);

    let log = match inputs.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| SaeError::io(dir, e))?;
            write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
            let tmp = dir.join(".log.jsonl.tmp");
            let file = File::create(&tmp).map_err(|e| SaeError::io(&tmp, e))?;
            Some((BufWriter::new(file), tmp, dir.join("log.jsonl")))
        }
        None => None,
    };

    let mut lp = Loop {
        cfg,
        store,
        cycler,
        params,
        opt,
        stats: FeatureDensityStats::new(features, cfg.tracking.window_tokens),
        dying: BTreeSet::new(),
        fit: None,
        k,
        step: 0,
        records: Vec::with_capacity(cfg.steps + cfg.phase2.steps),
        log,
        out: inputs.out.map(Path::to_path_buf),
    };

    let mut early_stopped = false;
    for _ in 0..cfg.steps {
        lp.step(&phase1_policy, 1)?;
        if lp.step.is_multiple_of(cfg.tracking.refit_interval) {
            lp.refit()?;
        }
        if lp.converged() {
            early_stopped = true;
            break;
        }
    }
    let phase1_steps = lp.step;

    let mut final_policy = phase1_policy.clone();
    let mut clamped = fc_budgets.as_ref().map_or(0, |b| b.clamped_to_one);
    if cfg.phase2.enabled && cfg.phase2.steps > 0 {
        let densities = lp.stats.densities()?;
        let ranks = ranks_from_order(&zipf::rank_order(&densities));
        let (alpha, beta) = match (&cfg.zipf.budget_source, &lp.fit) {
            (BudgetSource::Fit, Some(fit)) if fit.params.beta > -1.0 => {
                (fit.params.alpha, fit.params.beta)
            }
            _ => (cfg.zipf.alpha, cfg.zipf.beta),
        };
        let budgets = feature_budgets(cfg, features, k, alpha, beta)?;
        clamped = budgets.clamped_to_one;
        final_policy = configure(
            AllocationPolicy::feature_choice(budgets.per_feature(&ranks)?),
            cfg,
        );
        final_policy.validate(cfg.batch_size, features)?;
        for _ in 0..cfg.phase2.steps {
            lp.step(&final_policy, 2)?;
        }
    }
    let phase2_steps = lp.step - phase1_steps;

    let dead = lp.stats.detect_dead(cfg.tracking.dead_threshold_tokens);
    let dying_count = lp.dying.difference(&dead).count();
    let tail = lp.records.len().clamp(1, 10);
    let final_mse = lp
        .records
        .iter()
        .rev()
        .take(tail)
        .map(|r| r.loss.mse)
        .sum::<f64>()
        / tail as f64;
    let initial_mse = lp.records.first().map_or(f64::NAN, |r| r.loss.mse);

    let eval = match inputs.eval {
        Some(eval_store) => Some(evaluate(
            &lp.params,
            eval_store,
            &final_policy,
            &EvalOptions {
                batch_size: cfg.batch_size,
                max_tokens: cfg.eval_tokens,
                truth: inputs.truth,
                fix_alpha: cfg.zipf.fix_alpha,
            },
        )?),
        None => None,
    };

    let report = TrainReport {
        d_model: n,
        features,
        expected_k: k,
        lr: lp.opt.config.lr,
        batch_size: cfg.batch_size * cfg.accumulation_steps,
        phase1_policy: phase1_policy.kind.name().into(),
        final_policy: final_policy.kind.name().into(),
        phase1_steps,
        phase2_steps,
        early_stopped,
        initial_mse,
        final_mse,
        dead_count: dead.len(),
        dying_count,
        dead_threshold_tokens: cfg.tracking.dead_threshold_tokens,
        density_window_tokens: cfg.tracking.window_tokens,
        tokens_seen: lp.stats.tokens_seen_total,
        budgets_clamped_to_one: clamped,
        zipf_fit: lp.fit.clone(),
        reconstruction_metric: "fvu".into(),
        eval,
    };

    if let Some(dir) = inputs.out {
        if let Some((mut w, tmp, dest)) = lp.log.take() {
            w.flush().map_err(|e| SaeError::io(&tmp, e))?;
            drop(w);
            fs::rename(&tmp, &dest).map_err(|e| SaeError::io(&dest, e))?;
        }
        if let Ok(d) = lp.stats.densities() {
            zipf::write_density_csv(&dir.join("densities_final.csv"), &d)?;
        }
        save_checkpoint(
            dir,
            &SaveRequest {
                params: &lp.params,
                policy: &final_policy,
                budgets_clamped_to_one: clamped,
                steps_completed: lp.step,
                optimizer: cfg.save_optimizer.then_some(&lp.opt),
                config: cfg,
            },
        )?;
        write_atomic(
            &dir.join("report.json"),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
    }

    Ok(TrainOutcome {
        params: lp.params,
        optimizer: lp.opt,
        stats: lp.stats,
        policy: final_policy,
        report,
        log: lp.records,
    })
}

/// Reads the configured data file, holds out the evaluation tail, trains,
/// and writes all artifacts under `config.out_dir`.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let store = read_activations(&config.data)?;
    if store.n_rows() < config.eval_tokens + config.batch_size {
        return Err(SaeError::InsufficientData {
            needed: config.eval_tokens + config.batch_size,
            got: store.n_rows(),
        });
    }
    let (train_rows, eval_rows) = store.split_tail(config.eval_tokens)?;
    let truth: Option<Array2<f64>> = match &config.truth {
        Some(p) => Some(GroundTruth::read_json(p)?.1.dictionary),
        None => None,
    };
    train(&TrainInputs {
        config,
        train: &train_rows,
        eval: Some(&eval_rows),
        truth: truth.as_ref().map(|t| t.view()),
        out: Some(&config.out_dir),
    })
}
