//! Experiment orchestration: dataset synthesis, the pretraining pipeline,
//! stream construction, and the adaptation runs the harness reports on.

use crate::config::{ExperimentConfig, TargetSpec};
use pluto_core::engine::{EngineConfig, EngineState, StreamMetrics};
use pluto_core::error::{PlutoError, Result};
use pluto_core::pet::{ModuleKind, ModuleRecord, PetHyper};
use pluto_core::rng::Rng;
use pluto_core::selector::{init_supervised, SelectorInput, SelectorParams};
use pluto_core::synth::{
    make_base_dataset, make_domain, make_mixture_target, Dataset, MixtureSpec,
};
use pluto_core::tensor::Tensor;
use pluto_core::vit::{
    evaluate, forward, input_representation, pretrain_backbone, pretrain_source_module, VitParams,
};
use serde::Serialize;

/// Everything produced by the pretraining stage for one seed.
pub struct Artifacts {
    pub backbone: VitParams,
    pub modules: Vec<ModuleRecord>,
    pub selector: SelectorParams,
    pub base_train: Dataset,
    pub base_test: Dataset,
    pub source_train: Vec<Dataset>,
    pub source_test: Vec<Dataset>,
}

/// Base dataset split per the configured train fraction.
pub fn base_split(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let base = make_base_dataset(cfg.training.base_dataset_size, seed)?;
    let n_train = (base.len() as f64 * cfg.training.train_fraction).round() as usize;
    Ok(base.split(n_train))
}

/// Pretrain the backbone, one module per source domain, and the selector.
pub fn build_artifacts(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts> {
    let (base_train, base_test) = base_split(cfg, seed)?;
    let backbone = pretrain_backbone(&base_train, &cfg.vit, &cfg.training.backbone, seed)?;

    let mut source_train = Vec::new();
    let mut source_test = Vec::new();
    for spec in &cfg.sources {
        source_train.push(make_domain(&base_train, spec)?);
        source_test.push(make_domain(&base_test, spec)?);
    }

    let (hyper, opt) = match cfg.module_kind {
        ModuleKind::Vpt => (
            PetHyper::Vpt {
                prompts: cfg.vpt_prompts,
            },
            &cfg.training.vpt,
        ),
        ModuleKind::Adapter => (
            PetHyper::Adapter {
                bottleneck: cfg.adapter_bottleneck,
            },
            &cfg.training.adapter,
        ),
    };
    let mut modules = Vec::new();
    for (i, spec) in cfg.sources.iter().enumerate() {
        modules.push(pretrain_source_module(
            &backbone,
            hyper,
            &format!("module:{}", spec.label()),
            &spec.label(),
            &source_train[i],
            opt,
            seed + i as u64,
        )?);
    }

    let mut rng = Rng::new(seed ^ 0x5E1);
    let sel0 = SelectorParams::init(&cfg.selector, &mut rng)?;
    let samples = selector_training_set(&backbone, &modules, &source_train)?;
    let selector = init_supervised(
        &sel0,
        &samples,
        cfg.training.selector_lr,
        cfg.training.selector_epochs,
        cfg.training.selector_batch,
        seed,
    )?;
    let selector = init_supervised(
        &selector,
        &samples,
        cfg.training.selector_fine_lr,
        cfg.training.selector_fine_epochs,
        cfg.training.selector_batch,
        seed ^ 1,
    )?;

    Ok(Artifacts {
        backbone,
        modules,
        selector,
        base_train,
        base_test,
        source_train,
        source_test,
    })
}

/// Cache (x̂, per-source logits, label) triples over the labeled source
/// mixture; the frozen models make this a one-time cost.
pub fn selector_training_set(
    backbone: &VitParams,
    modules: &[ModuleRecord],
    source_train: &[Dataset],
) -> Result<Vec<(SelectorInput, usize)>> {
    let mut samples = Vec::new();
    for domain in source_train {
        for (img, &label) in domain.images.iter().zip(&domain.labels) {
            samples.push((selector_input(backbone, modules, img)?, label));
        }
    }
    Ok(samples)
}

fn selector_input(
    backbone: &VitParams,
    modules: &[ModuleRecord],
    img: &Tensor,
) -> Result<SelectorInput> {
    Ok(SelectorInput {
        x_hat: input_representation(backbone, img)?,
        source_logits: modules
            .iter()
            .map(|m| forward(backbone, Some(m), img))
            .collect::<Result<_>>()?,
    })
}

/// The unlabeled target stream plus eval-only label batches.
pub fn target_stream(
    cfg: &ExperimentConfig,
    base_test: &Dataset,
    seed: u64,
) -> Result<(Vec<Vec<Tensor>>, Vec<Vec<usize>>, Dataset)> {
    let (domains, lambdas): (Vec<Dataset>, Vec<f64>) = match &cfg.target {
        TargetSpec::Domain { spec } => (vec![make_domain(base_test, spec)?], vec![1.0]),
        TargetSpec::Mixture { domains, lambdas } => (
            domains
                .iter()
                .map(|d| make_domain(base_test, d))
                .collect::<Result<_>>()?,
            lambdas.clone(),
        ),
    };
    let stream = make_mixture_target(
        &domains,
        &MixtureSpec { lambdas },
        cfg.training.target_stream_len,
        seed ^ 0xBEEF,
    )?;
    let (batches, labels) = stream.batches(cfg.engine.batch_size);
    Ok((batches, labels, stream.to_eval_dataset()))
}

/// Sequential multi-domain stream used by the forgetting comparison.
pub fn forgetting_stream(
    cfg: &ExperimentConfig,
    base_test: &Dataset,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    let mut batches = Vec::new();
    for spec in &cfg.forgetting_domains {
        let domain = make_domain(base_test, spec)?;
        let stream = make_mixture_target(
            &[domain],
            &MixtureSpec {
                lambdas: vec![1.0],
            },
            cfg.training.forgetting_samples_per_domain,
            seed ^ spec.seed,
        )?;
        batches.extend(stream.batches(cfg.engine.batch_size).0);
    }
    Ok(batches)
}

/// Combined digest over frozen params, selector, and every LN state.
pub fn state_digest(state: &EngineState) -> String {
    let mut hasher: Vec<u8> = Vec::new();
    hasher.extend_from_slice(&state.frozen_digest());
    hasher.extend_from_slice(&state.selector_digest());
    for j in 0..state.num_sources() {
        hasher.extend_from_slice(&state.ln_digest(j));
    }
    pluto_core::pet::sha256_hex(&hasher)
}

/// One pipeline's outcome on one seed.
#[derive(Clone, Serialize)]
pub struct PipelineRun {
    pub mean_accuracy: Option<f64>,
    pub pre_digest: String,
    pub post_digest: String,
    #[serde(skip)]
    pub metrics: StreamMetrics,
    #[serde(skip)]
    pub final_state: Option<Box<EngineState>>,
}

/// Run the full adaptation loop with the given engine overrides.
pub fn run_pluto(
    artifacts: &Artifacts,
    engine_cfg: EngineConfig,
    batches: &[Vec<Tensor>],
    labels: Option<&[Vec<usize>]>,
    keep_state: bool,
) -> Result<PipelineRun> {
    let mut state = EngineState::new(
        artifacts.backbone.clone(),
        artifacts.modules.clone(),
        artifacts.selector.clone(),
        engine_cfg,
    )?;
    let pre_digest = state_digest(&state);
    let metrics = state.run_stream(batches, labels)?;
    Ok(PipelineRun {
        mean_accuracy: metrics.mean_accuracy,
        pre_digest,
        post_digest: state_digest(&state),
        metrics,
        final_state: keep_state.then(|| Box::new(state)),
    })
}

/// Run the uniform logit-averaging baseline (with per-source plain LN
/// updates when `plain_ln_update`).
pub fn run_baseline(
    artifacts: &Artifacts,
    engine_cfg: EngineConfig,
    batches: &[Vec<Tensor>],
    labels: Option<&[Vec<usize>]>,
    plain_ln_update: bool,
    keep_state: bool,
) -> Result<PipelineRun> {
    let mut state = EngineState::new(
        artifacts.backbone.clone(),
        artifacts.modules.clone(),
        artifacts.selector.clone(),
        engine_cfg,
    )?;
    let pre_digest = state_digest(&state);
    let metrics = state.uniform_ensemble_baseline(batches, labels, plain_ln_update)?;
    Ok(PipelineRun {
        mean_accuracy: metrics.mean_accuracy,
        pre_digest,
        post_digest: state_digest(&state),
        metrics,
        final_state: keep_state.then(|| Box::new(state)),
    })
}

/// Forgetting comparison: adapt both pipelines over the continual stream at
/// the configured LN pressure, then re-test every source model on its own
/// test set. Returns (pre, post_pluto, post_baseline) accuracies.
pub fn forgetting_comparison(
    artifacts: &Artifacts,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ForgettingReport> {
    let batches = forgetting_stream(cfg, &artifacts.base_test, seed)?;
    let mut engine_cfg = cfg.engine;
    engine_cfg.sam.lr = cfg.training.forgetting_ln_lr;

    let pre: Vec<f64> = artifacts
        .modules
        .iter()
        .zip(&artifacts.source_test)
        .map(|(m, set)| evaluate(&artifacts.backbone, Some(m), set))
        .collect::<Result<_>>()?;

    let pluto = run_pluto(artifacts, engine_cfg, &batches, None, true)?;
    let post_pluto = pluto
        .final_state
        .as_ref()
        .expect("state kept")
        .forgetting_eval(&artifacts.source_test)?;

    let baseline = run_baseline(artifacts, engine_cfg, &batches, None, true, true)?;
    let post_baseline = baseline
        .final_state
        .as_ref()
        .expect("state kept")
        .forgetting_eval(&artifacts.source_test)?;

    let mean_drop = |post: &[f64]| {
        pre.iter()
            .zip(post)
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / pre.len() as f64
    };
    Ok(ForgettingReport {
        pre_accuracy: pre.clone(),
        post_pluto_accuracy: post_pluto.clone(),
        post_baseline_accuracy: post_baseline.clone(),
        pluto_mean_drop: mean_drop(&post_pluto),
        baseline_mean_drop: mean_drop(&post_baseline),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ForgettingReport {
    pub pre_accuracy: Vec<f64>,
    pub post_pluto_accuracy: Vec<f64>,
    pub post_baseline_accuracy: Vec<f64>,
    pub pluto_mean_drop: f64,
    pub baseline_mean_drop: f64,
}

/// Accuracy of each single source model on the target evaluation set.
pub fn single_source_accuracies(artifacts: &Artifacts, target_eval: &Dataset) -> Result<Vec<f64>> {
    artifacts
        .modules
        .iter()
        .map(|m| evaluate(&artifacts.backbone, Some(m), target_eval))
        .collect()
}

/// Parse "a..b" (inclusive) used by the M-sweep flag.
pub fn parse_sweep(raw: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let parts: Vec<&str> = raw.split("..").collect();
    if parts.len() != 2 {
        return Err(PlutoError::InvalidArgument(format!(
            "sweep range must look like 1..4, got {raw}"
        )));
    }
    let lo: usize = parts[0]
        .parse()
        .map_err(|_| PlutoError::InvalidArgument(format!("bad sweep start {raw}")))?;
    let hi: usize = parts[1]
        .parse()
        .map_err(|_| PlutoError::InvalidArgument(format!("bad sweep end {raw}")))?;
    if lo < 1 || hi < lo {
        return Err(PlutoError::InvalidArgument(format!(
            "empty sweep range {raw}"
        )));
    }
    Ok(lo..=hi)
}
