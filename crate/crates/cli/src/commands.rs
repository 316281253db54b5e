use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use sparsealloc::compare::{compare_runs, summarize, write_compare_csv};
use sparsealloc::config::{PolicyChoice, Recipe, RunConfig};
use sparsealloc::data::{
    generate_synthetic, read_activations, write_activations, GroundTruth, SyntheticSpec,
};
use sparsealloc::eval::{evaluate, EvalOptions};
use sparsealloc::model::{calibrate_thresholds, preprocess};
use sparsealloc::zipf::{self, read_density_csv};
use sparsealloc::{load_checkpoint, run_train, Criterion, SaeError};

use crate::args::{CompareArgs, ConfigOverrides, EvalArgs, FitZipfArgs, GenDataArgs, TrainArgs};
use crate::{CliError, CliResult};

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.tokens {
        spec.n_tokens = v;
    }
    if let Some(v) = a.d_model {
        spec.d_model = v;
    }
    if let Some(v) = a.true_features {
        spec.n_true_features = v;
    }
    if let Some(v) = a.zipf_alpha {
        spec.zipf_alpha = v;
    }
    if let Some(v) = a.zipf_beta {
        spec.zipf_beta = v;
    }
    if let Some(v) = a.mean_active {
        spec.actives.mean = v;
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = a.easy_row_rate {
        spec.easy_row_rate = v;
    }
    let (store, truth) = generate_synthetic(&spec)?;
    write_activations(&store, &a.out)?;
    let truth_path = a.truth.unwrap_or_else(|| sidecar_path(&a.out));
    truth.write_json(&spec, &truth_path)?;
    outln!(
        "wrote {} rows x {} to {} (truth: {})",
        store.n_rows(),
        store.d_model(),
        a.out.display(),
        truth_path.display()
    );
    Ok(())
}

fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".truth.json");
    data.with_file_name(name)
}

fn parse_criterion(s: &str) -> CliResult<Criterion> {
    match s {
        "by-value" | "by_value" | "value" => Ok(Criterion::ByValue),
        "by-magnitude" | "by_magnitude" | "magnitude" => Ok(Criterion::ByMagnitude),
        other => Err(CliError::Usage(format!(
            "unknown criterion '{other}' (expected by-value or by-magnitude)"
        ))),
    }
}

fn base_config(config: Option<&Path>, preset: Option<&str>) -> CliResult<RunConfig> {
    Ok(match (config, preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::desk(),
    })
}

fn apply_overrides(c: &mut RunConfig, o: &ConfigOverrides) -> CliResult<()> {
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = o.$field.clone() { $target = v; })*
        };
    }
    set! {
        data => c.data,
        out_dir => c.out_dir,
        rectify => c.rectify,
        width_multiple => c.width_multiple,
        expected_k => c.expected_k,
        steps => c.steps,
        batch_size => c.batch_size,
        accumulation_steps => c.accumulation_steps,
        lr_base => c.lr_base,
        lr_n_ref => c.lr_n_ref,
        seed => c.seed,
        lambda_sparsity => c.weights.lambda_sparsity,
        lambda_aux_k => c.weights.lambda_aux_k,
        lambda_aux_zipf => c.weights.lambda_aux_zipf,
        lambda_nfm => c.weights.lambda_nfm,
        lambda_nfm_inf => c.weights.lambda_nfm_inf,
        k_aux => c.weights.k_aux,
        zipf_alpha => c.zipf.alpha,
        zipf_beta => c.zipf.beta,
        window_tokens => c.tracking.window_tokens,
        dead_threshold_tokens => c.tracking.dead_threshold_tokens,
        refit_interval => c.tracking.refit_interval,
        phase2 => c.phase2.enabled,
        phase2_steps => c.phase2.steps,
        early_stop => c.early_stop.enabled,
        shuffle_buffer_tokens => c.shuffle_buffer_tokens,
        eval_tokens => c.eval_tokens,
        save_optimizer => c.save_optimizer,
    }
    if o.truth.is_some() {
        c.truth = o.truth.clone();
    }
    if o.expected_k_ratio.is_some() {
        c.expected_k_ratio = o.expected_k_ratio;
    }
    if o.m_max.is_some() {
        c.zipf.m_max = o.m_max;
    }
    if o.fix_alpha.is_some() {
        c.zipf.fix_alpha = o.fix_alpha;
    }
    if let Some(p) = &o.policy {
        c.policy = PolicyChoice::parse(p)?;
    }
    if let Some(s) = &o.criterion {
        c.criterion = parse_criterion(s)?;
    }
    Ok(())
}

fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    recipe: Option<&str>,
    overrides: &ConfigOverrides,
) -> CliResult<RunConfig> {
    let mut c = base_config(config, preset)?;
    apply_overrides(&mut c, overrides)?;
    if let Some(r) = recipe {
        c = c.with_recipe(Recipe::parse(r)?);
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(
        a.config.as_deref(),
        a.preset.as_deref(),
        a.recipe.as_deref(),
        &a.overrides,
    )?;
    if a.dry_run {
        outln!("{}", cfg.to_json()?);
        return Ok(());
    }
    let out = run_train(&cfg)?;
    let r = &out.report;
    outln!(
        "{} -> {}: {} + {} steps, F = {}, E[k] = {}",
        r.phase1_policy,
        r.final_policy,
        r.phase1_steps,
        r.phase2_steps,
        r.features,
        r.expected_k
    );
    outln!(
        "train mse {:.6} -> {:.6}; dead {}, dying {}",
        r.initial_mse,
        r.final_mse,
        r.dead_count,
        r.dying_count
    );
    if let Some(e) = &r.eval {
        out!(
            "eval fvu {:.6}, mean L0 {:.3}, never fired {}",
            e.fvu,
            e.mean_l0,
            e.dead_count
        );
        if let Some(s) = e.recovery_score {
            out!(", recovery {s:.4}");
        }
        outln!();
    }
    outln!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn read_truth(path: Option<&Path>) -> CliResult<Option<Array2<f64>>> {
    Ok(path
        .map(|p| GroundTruth::read_json(p).map(|(_, t)| t.dictionary))
        .transpose()?)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let store = read_activations(&a.data)?;
    if store.d_model() != ckpt.meta.d_model {
        return Err(CliError::Usage(format!(
            "data has d_model {} but the checkpoint expects {}",
            store.d_model(),
            ckpt.meta.d_model
        )));
    }
    let batch_size = a.batch_size.unwrap_or(ckpt.meta.config.batch_size);
    let truth = read_truth(a.truth.as_deref())?;
    let opts = EvalOptions {
        batch_size,
        max_tokens: a.max_tokens.unwrap_or(usize::MAX),
        truth: truth.as_ref().map(|t| t.view()),
        fix_alpha: ckpt.meta.config.zipf.fix_alpha,
    };
    let policy = &ckpt.meta.policy;
    let report = if a.streaming {
        let n_cal = a.calibration_batches.max(1);
        if store.n_rows() < (n_cal + 1) * batch_size {
            return Err(SaeError::InsufficientData {
                needed: (n_cal + 1) * batch_size,
                got: store.n_rows(),
            }
            .into());
        }
        let batches = (0..n_cal)
            .map(|b| {
                let rows: Vec<usize> = (b * batch_size..(b + 1) * batch_size).collect();
                preprocess(store.gather(&rows).view())
            })
            .collect::<sparsealloc::Result<Vec<_>>>()?;
        let table = calibrate_thresholds(&ckpt.params, policy, &batches)?;
        let held = store.split_tail(store.n_rows() - n_cal * batch_size)?.1;
        evaluate(&ckpt.params, &held, &table.policy(), &opts)?
    } else {
        evaluate(&ckpt.params, &store, policy, &opts)?
    };
    let text = serde_json::to_string_pretty(&report).map_err(SaeError::from)?;
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| SaeError::Io {
            path: p.clone(),
            source: e,
        })?,
        None => outln!("{text}"),
    }
    Ok(())
}

pub fn fit_zipf(a: FitZipfArgs) -> CliResult<()> {
    let densities = read_density_csv(&a.density)?;
    let fit = zipf::fit_zipf(&densities, a.fix_alpha)?;
    let text = serde_json::to_string_pretty(&fit).map_err(SaeError::from)?;
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| SaeError::Io {
            path: p.clone(),
            source: e,
        })?,
        None => outln!("{text}"),
    }
    Ok(())
}

pub fn compare(a: CompareArgs) -> CliResult<()> {
    let base = resolve_config(a.config.as_deref(), a.preset.as_deref(), None, &a.overrides)?;
    let configs = a
        .recipes
        .iter()
        .map(|r| {
            let recipe = Recipe::parse(r)?;
            let c = base.with_recipe(recipe);
            c.validate()?;
            Ok((recipe.label().to_string(), c))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let store = read_activations(&base.data)?;
    let (train_rows, eval_rows) = store.split_tail(base.eval_tokens)?;
    let truth = read_truth(base.truth.as_deref())?;
    let rows = compare_runs(
        &train_rows,
        &eval_rows,
        truth.as_ref().map(|t| t.view()),
        &configs,
        &a.seeds,
    )?;
    write_compare_csv(&a.csv, &rows)?;
    outln!(
        "{:<8} {:>8} {:>10} {:>8} {:>8}",
        "recipe",
        "E[k]",
        "fvu",
        "dead",
        "dying"
    );
    for (label, k, fvu, dead, dying) in summarize(&rows) {
        outln!("{label:<8} {k:>8.2} {fvu:>10.6} {dead:>8.2} {dying:>8.2}");
    }
    Ok(())
}
