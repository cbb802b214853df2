//! The streaming adaptation loop: per-sample source weighting, selector
//! updates, batch-average top-M selection, selective LayerNorm adaptation of
//! the highest-weight source, and final ensembled predictions.
//!
//! State mutation discipline: a batch either commits atomically at the end
//! of `process_batch` or (on a non-finite value anywhere) leaves the state
//! exactly as it was. Logits for batch t are always computed with the
//! LayerNorm states produced by batch t−1.

use crate::error::{PlutoError, Result};
use crate::pet::ModuleRecord;
use crate::samln::{batch_sam_step, entropy_gradient, SamConfig, SourceModel};
use crate::selector::{
    ensemble_logits, tta_update, SelectorInput, SelectorParams,
};
use crate::synth::Dataset;
use crate::tensor::{self, Tensor};
use crate::vit::{digest_named, forward_with_ln, input_representation, LnState, VitParams};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// M: modules kept after top-M selection (1 ≤ M ≤ N).
    pub top_m: usize,
    /// B: stream batch size.
    pub batch_size: usize,
    /// U: samples per batch used for selector/LN updates (0 = zero-shot).
    pub shots: usize,
    pub selector_lr: f64,
    pub selector_steps: usize,
    pub sam: SamConfig,
    /// Update LayerNorms of all M selected sources instead of the argmax one.
    pub update_all_selected: bool,
}

impl EngineConfig {
    pub fn desk_default() -> Self {
        EngineConfig {
            top_m: 4,
            batch_size: 32,
            shots: 16,
            selector_lr: 2e-2,
            selector_steps: 1,
            sam: SamConfig::desk_default(),
            update_all_selected: false,
        }
    }

    pub fn zero_shot(&self) -> bool {
        self.shots == 0
    }
}

/// Per-batch weighting outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    /// B rows of N per-sample weights from the updated selector.
    pub per_sample_weights: Vec<Vec<f64>>,
    pub batch_avg: Vec<f64>,
    /// Indices of the selected sources, strictly descending by batch-average
    /// weight (smaller index wins ties).
    pub selected: Vec<usize>,
    /// Selected batch-average weights rescaled to sum to 1.
    pub rescaled: Vec<f64>,
    /// argmax of `batch_avg` (= `selected[0]`), the LN update target.
    pub ln_target: usize,
}

impl WeightReport {
    /// Structural invariants; used by property tests and the harness.
    pub fn validate(&self, n_sources: usize, top_m: usize) -> Result<()> {
        let simplex = |xs: &[f64], what: &str| -> Result<()> {
            if xs.iter().any(|&w| w < 0.0) {
                return Err(PlutoError::InvalidArgument(format!("negative {what}")));
            }
            let sum: f64 = xs.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(PlutoError::NotNormalized { sum });
            }
            Ok(())
        };
        for row in &self.per_sample_weights {
            if row.len() != n_sources {
                return Err(PlutoError::InvalidArgument("weight row width".into()));
            }
            simplex(row, "per-sample weight")?;
        }
        if self.batch_avg.len() != n_sources {
            return Err(PlutoError::InvalidArgument("batch_avg width".into()));
        }
        simplex(&self.batch_avg, "batch average weight")?;
        if self.selected.len() != top_m {
            return Err(PlutoError::InvalidArgument("selected length".into()));
        }
        for pair in self.selected.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (wa, wb) = (self.batch_avg[a], self.batch_avg[b]);
            if !(wa > wb || (wa == wb && a < b)) {
                return Err(PlutoError::InvalidArgument(
                    "selected not in descending weight order".into(),
                ));
            }
        }
        simplex(&self.rescaled, "rescaled weight")?;
        if self.rescaled.len() != self.selected.len() {
            return Err(PlutoError::InvalidArgument("rescaled length".into()));
        }
        if self.ln_target != self.selected[0] {
            return Err(PlutoError::InvalidArgument(
                "ln_target is not the argmax source".into(),
            ));
        }
        Ok(())
    }
}

/// Final predictions for one batch.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probs: Vec<Tensor>,
}

/// One line of the stream log.
#[derive(Clone, Debug, Serialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub accuracy: Option<f64>,
    pub mean_prediction_entropy: f64,
    pub failed: bool,
    pub report: Option<WeightReport>,
}

/// Aggregated metrics for one adaptation run.
#[derive(Clone, Debug, Serialize)]
pub struct StreamMetrics {
    pub batches: Vec<BatchRecord>,
    pub mean_accuracy: Option<f64>,
    /// Mean of batch-average weights over successful batches.
    pub cumulative_weights: Vec<f64>,
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

impl StreamMetrics {
    pub fn failed_batches(&self) -> usize {
        self.batches.iter().filter(|b| b.failed).count()
    }
}

/// Indices of the M largest entries (descending, smaller index wins ties)
/// plus those weights rescaled to sum to 1.
pub fn top_m_select(batch_avg: &[f64], m: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = batch_avg.len();
    if m < 1 || m > n {
        return Err(PlutoError::InvalidArgument(format!(
            "top_m {m} out of range 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        batch_avg[b]
            .partial_cmp(&batch_avg[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected: Vec<usize> = order[..m].to_vec();
    let total: f64 = selected.iter().map(|&j| batch_avg[j]).sum();
    let rescaled = selected.iter().map(|&j| batch_avg[j] / total).collect();
    Ok((selected, rescaled))
}

/// Restrict per-sample weights to the selected set and renormalize; when the
/// whole set is selected this is the identity (bit-exact, no division).
fn renormalize_over(weights: &[f64], selected_ascending: &[usize]) -> Vec<f64> {
    if selected_ascending.len() == weights.len() {
        return weights.to_vec();
    }
    let total: f64 = selected_ascending.iter().map(|&j| weights[j]).sum();
    selected_ascending.iter().map(|&j| weights[j] / total).collect()
}

/// Everything a stream run owns: the frozen backbone and modules, the
/// selector, and one LayerNorm state per source.
#[derive(Clone)]
pub struct EngineState {
    pub backbone: VitParams,
    pub modules: Vec<ModuleRecord>,
    pub selector: SelectorParams,
    pub ln_states: Vec<LnState>,
    pub cfg: EngineConfig,
}

impl EngineState {
    pub fn new(
        backbone: VitParams,
        modules: Vec<ModuleRecord>,
        selector: SelectorParams,
        cfg: EngineConfig,
    ) -> Result<EngineState> {
        if modules.is_empty() {
            return Err(PlutoError::EmptyInput("engine modules"));
        }
        if cfg.top_m < 1 || cfg.top_m > modules.len() {
            return Err(PlutoError::InvalidArgument(format!(
                "top_m {} out of range 1..={}",
                cfg.top_m,
                modules.len()
            )));
        }
        if cfg.shots > cfg.batch_size {
            return Err(PlutoError::InvalidArgument(format!(
                "shots {} exceed batch size {}",
                cfg.shots, cfg.batch_size
            )));
        }
        cfg.sam.validate()?;
        for m in &modules {
            m.validate_shapes(&backbone.cfg)?;
        }
        if selector.cfg.embed_dim != backbone.cfg.embed_dim
            || selector.cfg.logit_dim != backbone.cfg.classes
        {
            return Err(PlutoError::InvalidArgument(
                "selector dims do not match backbone".to_string(),
            ));
        }
        let ln = backbone.ln_state.clone();
        let n = modules.len();
        Ok(EngineState {
            backbone,
            modules,
            selector,
            ln_states: vec![ln; n],
            cfg,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.modules.len()
    }

    /// Digest of everything that must never change at test time.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut named: Vec<(String, Tensor)> = self
            .backbone
            .frozen_named()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
            .collect();
        for m in &self.modules {
            for (n, t) in &m.payload {
                named.push((format!("{}.{n}", m.id), t.clone()));
            }
            named.push((format!("{}.head.weight", m.id), m.head_weight.clone()));
            named.push((format!("{}.head.bias", m.id), m.head_bias.clone()));
        }
        digest_named(&named)
    }

    pub fn selector_digest(&self) -> [u8; 32] {
        self.selector.digest()
    }

    pub fn ln_digest(&self, source: usize) -> [u8; 32] {
        self.ln_states[source].digest()
    }

    /// Cache x̂ and every source's logits for one image, using the current
    /// per-source LayerNorm states.
    fn selector_input(&self, image: &Tensor) -> Result<SelectorInput> {
        let x_hat = input_representation(&self.backbone, image)?;
        let mut source_logits = Vec::with_capacity(self.modules.len());
        for (module, ln) in self.modules.iter().zip(&self.ln_states) {
            let logits = forward_with_ln(&self.backbone, Some(ln), Some(module), image)?;
            if !logits.is_finite() {
                return Err(PlutoError::NonFinite(format!(
                    "logits of source {}",
                    module.id
                )));
            }
            source_logits.push(logits);
        }
        Ok(SelectorInput {
            x_hat,
            source_logits,
        })
    }

    /// One pass of the adaptation loop over a test batch.
    ///
    /// Returns predictions for every sample plus the weight report; commits
    /// the selector update and the LN update of the selected source(s) so
    /// they take effect from the next batch.
    pub fn process_batch(&mut self, batch: &[Tensor]) -> Result<(Predictions, WeightReport)> {
        if batch.is_empty() {
            return Err(PlutoError::EmptyInput("process_batch"));
        }
        let n = self.num_sources();
        let shots = self.cfg.shots.min(batch.len());

        // (1) forward every sample through every source; cache logits
        let inputs: Vec<SelectorInput> = batch
            .iter()
            .map(|img| self.selector_input(img))
            .collect::<Result<_>>()?;

        // (2–3) selector update on the first U samples (logits stay cached)
        let updated_selector = if shots > 0 {
            tta_update(
                &self.selector,
                &inputs[..shots],
                self.cfg.selector_lr,
                self.cfg.selector_steps,
            )?
        } else {
            self.selector.clone()
        };

        // (4) recompute per-sample weights with the updated selector
        let weight_rows: Vec<Tensor> = inputs
            .iter()
            .map(|inp| updated_selector.sample_weights(inp))
            .collect::<Result<_>>()?;

        // (5) batch average, top-M, rescale
        let mut batch_avg = vec![0.0; n];
        for row in &weight_rows {
            for (acc, w) in batch_avg.iter_mut().zip(row.data()) {
                *acc += w / batch.len() as f64;
            }
        }
        let (selected, rescaled) = top_m_select(&batch_avg, self.cfg.top_m)?;
        let ln_target = selected[0];

        // (6) per-sample prediction over the selected set (ascending index
        // order keeps the M = N case bit-identical to no selection)
        let mut ascending = selected.clone();
        ascending.sort_unstable();
        let mut labels = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        for (input, row) in inputs.iter().zip(&weight_rows) {
            let wsel = renormalize_over(row.data(), &ascending);
            let logit_subset: Vec<Tensor> = ascending
                .iter()
                .map(|&j| input.source_logits[j].clone())
                .collect();
            let ens = ensemble_logits(&Tensor::vector(wsel), &logit_subset)?;
            let p = tensor::softmax(&ens)?;
            if !p.is_finite() {
                return Err(PlutoError::NonFinite("ensembled prediction".to_string()));
            }
            labels.push(p.argmax());
            probs.push(p);
        }

        // (7) sharpness-aware LN update of the argmax source (or all M)
        let mut ln_updates: Vec<(usize, LnState)> = Vec::new();
        if shots > 0 {
            let targets: Vec<usize> = if self.cfg.update_all_selected {
                selected.clone()
            } else {
                vec![ln_target]
            };
            for j in targets {
                let model = SourceModel::new(&self.backbone, Some(&self.modules[j]));
                let (new_ln, _report) =
                    batch_sam_step(&model, &self.ln_states[j], &batch[..shots], &self.cfg.sam)?;
                ln_updates.push((j, new_ln));
            }
        }

        // commit point: nothing above mutated self
        self.selector = updated_selector;
        for (j, ln) in ln_updates {
            self.ln_states[j] = ln;
        }

        let report = WeightReport {
            per_sample_weights: weight_rows.iter().map(|r| r.data().to_vec()).collect(),
            batch_avg,
            selected,
            rescaled,
            ln_target,
        };
        Ok((Predictions { labels, probs }, report))
    }

    /// Sequential processing of a full stream. Labels, when provided, are
    /// used for metric computation only. A batch that fails with a
    /// non-finite value is logged and skipped; the state rolls back to its
    /// pre-batch value and the stream continues.
    pub fn run_stream(
        &mut self,
        batches: &[Vec<Tensor>],
        eval_labels: Option<&[Vec<usize>]>,
    ) -> Result<StreamMetrics> {
        if batches.is_empty() {
            return Err(PlutoError::EmptyInput("run_stream batches"));
        }
        if let Some(labels) = eval_labels {
            if labels.len() != batches.len() {
                return Err(PlutoError::InvalidArgument(
                    "label batches do not align with image batches".to_string(),
                ));
            }
        }
        let start = Instant::now();
        let n = self.num_sources();
        let mut records = Vec::with_capacity(batches.len());
        let mut weight_acc = vec![0.0; n];
        let mut ok_batches = 0usize;
        let mut correct = 0usize;
        let mut labeled = 0usize;

        for (t, batch) in batches.iter().enumerate() {
            match self.process_batch(batch) {
                Ok((preds, report)) => {
                    let accuracy = eval_labels.map(|labels| {
                        let truth = &labels[t];
                        let hits = preds
                            .labels
                            .iter()
                            .zip(truth)
                            .filter(|(p, t)| p == t)
                            .count();
                        correct += hits;
                        labeled += truth.len();
                        hits as f64 / truth.len().max(1) as f64
                    });
                    let mean_entropy = preds
                        .probs
                        .iter()
                        .map(|p| tensor::shannon_entropy(p).unwrap_or(f64::NAN))
                        .sum::<f64>()
                        / preds.probs.len() as f64;
                    for (acc, w) in weight_acc.iter_mut().zip(&report.batch_avg) {
                        *acc += w;
                    }
                    ok_batches += 1;
                    records.push(BatchRecord {
                        batch_index: t,
                        accuracy,
                        mean_prediction_entropy: mean_entropy,
                        failed: false,
                        report: Some(report),
                    });
                }
                Err(PlutoError::NonFinite(_)) | Err(PlutoError::Diverged(_)) => {
                    records.push(BatchRecord {
                        batch_index: t,
                        accuracy: None,
                        mean_prediction_entropy: f64::NAN,
                        failed: true,
                        report: None,
                    });
                }
                Err(other) => return Err(other),
            }
        }
        let cumulative_weights = if ok_batches > 0 {
            weight_acc.iter().map(|w| w / ok_batches as f64).collect()
        } else {
            vec![0.0; n]
        };
        Ok(StreamMetrics {
            batches: records,
            mean_accuracy: eval_labels.and(if labeled > 0 {
                Some(correct as f64 / labeled as f64)
            } else {
                None
            }),
            cumulative_weights,
            wall_clock_ms: start.elapsed().as_millis(),
        })
    }

    /// Uniform logit-averaging baseline over the same stream protocol.
    ///
    /// With `plain_ln_update` every source receives an unfiltered, non-SAM
    /// entropy gradient step per batch (on the first U samples), emulating
    /// the uniform-ensemble adaptation baselines.
    pub fn uniform_ensemble_baseline(
        &mut self,
        batches: &[Vec<Tensor>],
        eval_labels: Option<&[Vec<usize>]>,
        plain_ln_update: bool,
    ) -> Result<StreamMetrics> {
        if batches.is_empty() {
            return Err(PlutoError::EmptyInput("baseline batches"));
        }
        let start = Instant::now();
        let n = self.num_sources();
        let uniform = vec![1.0 / n as f64; n];
        let mut records = Vec::with_capacity(batches.len());
        let mut correct = 0usize;
        let mut labeled = 0usize;

        for (t, batch) in batches.iter().enumerate() {
            let result: Result<(Predictions, WeightReport)> = (|| {
                let inputs: Vec<SelectorInput> = batch
                    .iter()
                    .map(|img| self.selector_input(img))
                    .collect::<Result<_>>()?;
                let mut labels = Vec::with_capacity(batch.len());
                let mut probs = Vec::with_capacity(batch.len());
                for input in &inputs {
                    let ens =
                        ensemble_logits(&Tensor::vector(uniform.clone()), &input.source_logits)?;
                    let p = tensor::softmax(&ens)?;
                    if !p.is_finite() {
                        return Err(PlutoError::NonFinite("baseline prediction".to_string()));
                    }
                    labels.push(p.argmax());
                    probs.push(p);
                }
                let shots = self.cfg.shots.min(batch.len());
                let mut ln_updates = Vec::new();
                if plain_ln_update && shots > 0 {
                    let update_batch: Vec<&Tensor> = batch[..shots].iter().collect();
                    for j in 0..n {
                        let model = SourceModel::new(&self.backbone, Some(&self.modules[j]));
                        let grad = entropy_gradient(&model, &self.ln_states[j], &update_batch)?;
                        let flat = self.ln_states[j]
                            .flatten()
                            .sub(&grad.scale(self.cfg.sam.lr))?;
                        ln_updates.push((j, self.ln_states[j].from_flat(flat.data())?));
                    }
                }
                for (j, ln) in ln_updates {
                    self.ln_states[j] = ln;
                }
                let report = WeightReport {
                    per_sample_weights: vec![uniform.clone(); batch.len()],
                    batch_avg: uniform.clone(),
                    selected: (0..n).collect(),
                    rescaled: uniform.clone(),
                    ln_target: 0,
                };
                Ok((Predictions { labels, probs }, report))
            })();

            match result {
                Ok((preds, report)) => {
                    let accuracy = eval_labels.map(|labels| {
                        let truth = &labels[t];
                        let hits = preds
                            .labels
                            .iter()
                            .zip(truth)
                            .filter(|(p, t)| p == t)
                            .count();
                        correct += hits;
                        labeled += truth.len();
                        hits as f64 / truth.len().max(1) as f64
                    });
                    let mean_entropy = preds
                        .probs
                        .iter()
                        .map(|p| tensor::shannon_entropy(p).unwrap_or(f64::NAN))
                        .sum::<f64>()
                        / preds.probs.len() as f64;
                    records.push(BatchRecord {
                        batch_index: t,
                        accuracy,
                        mean_prediction_entropy: mean_entropy,
                        failed: false,
                        report: Some(report),
                    });
                }
                Err(PlutoError::NonFinite(_)) | Err(PlutoError::Diverged(_)) => {
                    records.push(BatchRecord {
                        batch_index: t,
                        accuracy: None,
                        mean_prediction_entropy: f64::NAN,
                        failed: true,
                        report: None,
                    });
                }
                Err(other) => return Err(other),
            }
        }
        Ok(StreamMetrics {
            batches: records,
            mean_accuracy: eval_labels.and(if labeled > 0 {
                Some(correct as f64 / labeled as f64)
            } else {
                None
            }),
            cumulative_weights: uniform,
            wall_clock_ms: start.elapsed().as_millis(),
        })
    }

    /// Accuracy of each source model (its module plus its current LN state)
    /// on its own source test set.
    pub fn forgetting_eval(&self, source_test_sets: &[Dataset]) -> Result<Vec<f64>> {
        if source_test_sets.len() != self.num_sources() {
            return Err(PlutoError::InvalidArgument(format!(
                "{} test sets for {} sources",
                source_test_sets.len(),
                self.num_sources()
            )));
        }
        self.modules
            .iter()
            .zip(&self.ln_states)
            .zip(source_test_sets)
            .map(|((module, ln), data)| {
                crate::vit::evaluate_with_ln(&self.backbone, Some(ln), Some(module), data)
            })
            .collect()
    }
}
