//! The attention-based module selector: projects the pooled image
//! representation and each source's logits into a shared space, scores
//! sources by dot-product attention, and forms weighted pseudo-labels.
//!
//! Supervised initialization trains against ground-truth labels on the
//! source mixture; at test time the selector is updated by minimizing the
//! Shannon entropy of the weighted pseudo-labels, with the per-source logits
//! held fixed.

use crate::autodiff::{GradContext, ValueId};
use crate::error::{PlutoError, Result};
use crate::pet::{Container, ContainerKind};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};

/// LayerNorm epsilon inside the selector towers.
pub const SELECTOR_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Backbone embedding dim d (length of x̂).
    pub embed_dim: usize,
    /// Down-projection width for the input tower (d'_x).
    pub input_proj_dim: usize,
    /// Down-projection width for the logit tower (d'_l).
    pub logit_proj_dim: usize,
    /// Shared attention space width (d').
    pub attn_dim: usize,
    /// Logit dimensionality v (= number of classes).
    pub logit_dim: usize,
    /// Dropout on tower hidden activations during supervised init.
    pub dropout_rate: f64,
}

impl SelectorConfig {
    pub fn desk_default() -> Self {
        SelectorConfig {
            embed_dim: 32,
            input_proj_dim: 16,
            logit_proj_dim: 16,
            attn_dim: 16,
            logit_dim: 10,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1
            || self.input_proj_dim < 1
            || self.logit_proj_dim < 1
            || self.attn_dim < 1
            || self.logit_dim < 1
        {
            return Err(PlutoError::InvalidArgument(
                "selector dims must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PlutoError::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnPair {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// The four projection matrices and two normalization layers of the module
/// selector.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub cfg: SelectorConfig,
    pub w_dx: Tensor,
    pub w_ux: Tensor,
    pub w_dl: Tensor,
    pub w_ul: Tensor,
    pub ln_x: LnPair,
    pub ln_l: LnPair,
}

impl SelectorParams {
    /// Seeded init: projections uniform(±1/√fan_in), unit LayerNorms.
    pub fn init(cfg: &SelectorConfig, rng: &mut Rng) -> Result<SelectorParams> {
        cfg.validate()?;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
        };
        Ok(SelectorParams {
            cfg: *cfg,
            w_dx: uniform(&[cfg.embed_dim, cfg.input_proj_dim], cfg.embed_dim),
            w_ux: uniform(&[cfg.input_proj_dim, cfg.attn_dim], cfg.input_proj_dim),
            w_dl: uniform(&[cfg.logit_dim, cfg.logit_proj_dim], cfg.logit_dim),
            w_ul: uniform(&[cfg.logit_proj_dim, cfg.attn_dim], cfg.logit_proj_dim),
            ln_x: LnPair {
                gamma: Tensor::full(&[cfg.attn_dim], 1.0),
                beta: Tensor::zeros(&[cfg.attn_dim]),
            },
            ln_l: LnPair {
                gamma: Tensor::full(&[cfg.attn_dim], 1.0),
                beta: Tensor::zeros(&[cfg.attn_dim]),
            },
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_dx", &self.w_dx),
            ("w_ux", &self.w_ux),
            ("w_dl", &self.w_dl),
            ("w_ul", &self.w_ul),
            ("ln_x.gamma", &self.ln_x.gamma),
            ("ln_x.beta", &self.ln_x.beta),
            ("ln_l.gamma", &self.ln_l.gamma),
            ("ln_l.beta", &self.ln_l.beta),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_dx", &mut self.w_dx),
            ("w_ux", &mut self.w_ux),
            ("w_dl", &mut self.w_dl),
            ("w_ul", &mut self.w_ul),
            ("ln_x.gamma", &mut self.ln_x.gamma),
            ("ln_x.beta", &mut self.ln_x.beta),
            ("ln_l.gamma", &mut self.ln_l.gamma),
            ("ln_l.beta", &mut self.ln_l.beta),
        ]
    }

    /// Total stored parameters; equals the closed-form selector count.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        let named: Vec<(String, Tensor)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        crate::vit::digest_named(&named)
    }

    pub fn to_container(&self, id: &str) -> Container {
        Container {
            id: id.to_string(),
            domain_label: "selector".to_string(),
            kind: ContainerKind::Selector,
            hyper: serde_json::to_value(self.cfg).expect("config serializes"),
            meta: serde_json::json!({}),
            tensors: self
                .named()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            labels: None,
        }
    }

    pub fn from_container(c: &Container) -> Result<SelectorParams> {
        if c.kind != ContainerKind::Selector {
            return Err(PlutoError::BadHeader(format!(
                "container {} is not a selector",
                c.id
            )));
        }
        let cfg: SelectorConfig = serde_json::from_value(c.hyper.clone())
            .map_err(|e| PlutoError::BadHeader(format!("selector hyper: {e}")))?;
        let mut rng = Rng::new(0);
        let mut params = SelectorParams::init(&cfg, &mut rng)?;
        for (name, tensor) in params.named_mut() {
            let stored = c.tensor(name)?;
            if stored.shape() != tensor.shape() {
                return Err(PlutoError::shapes(
                    format!("selector tensor {name}"),
                    stored.shape(),
                    tensor.shape(),
                ));
            }
            *tensor = stored.clone();
        }
        Ok(params)
    }

    /// h_x = LN_x(W_uxᵀ · ReLU(W_dxᵀ · x̂)), evaluation mode (no dropout).
    pub fn embed_input(&self, x_hat: &Tensor) -> Result<Tensor> {
        if x_hat.numel() != self.cfg.embed_dim {
            return Err(PlutoError::shapes(
                "embed_input",
                x_hat.shape(),
                &[self.cfg.embed_dim],
            ));
        }
        tower(x_hat, &self.w_dx, &self.w_ux, &self.ln_x)
    }

    /// h_{l,j} = LN_l(W_ulᵀ · ReLU(W_dlᵀ · l(x)ʲ)), evaluation mode.
    pub fn embed_logits(&self, logits: &Tensor) -> Result<Tensor> {
        if logits.numel() != self.cfg.logit_dim {
            return Err(PlutoError::shapes(
                "embed_logits",
                logits.shape(),
                &[self.cfg.logit_dim],
            ));
        }
        tower(logits, &self.w_dl, &self.w_ul, &self.ln_l)
    }

    /// Per-sample source weights for one input (evaluation mode).
    pub fn sample_weights(&self, input: &SelectorInput) -> Result<Tensor> {
        let h_x = self.embed_input(&input.x_hat)?;
        let h_ls = input
            .source_logits
            .iter()
            .map(|l| self.embed_logits(l))
            .collect::<Result<Vec<_>>>()?;
        attention_weights(&h_x, &h_ls)
    }
}

fn tower(input: &Tensor, w_down: &Tensor, w_up: &Tensor, ln: &LnPair) -> Result<Tensor> {
    let hidden = tensor::relu(&tensor::apply_linear(&input.to_row_matrix(), w_down, None)?);
    let up = tensor::apply_linear(&hidden, w_up, None)?;
    tensor::layer_norm(&up.to_vector(), &ln.gamma, &ln.beta, SELECTOR_LN_EPS)
}

/// One test sample as the selector sees it: pooled representation plus the
/// cached pre-softmax logits of every source.
#[derive(Clone, Debug)]
pub struct SelectorInput {
    pub x_hat: Tensor,
    pub source_logits: Vec<Tensor>,
}

impl SelectorInput {
    /// Softmax of each source's logits (the per-source pseudo-labels ŷ_j).
    pub fn source_probs(&self) -> Result<Vec<Tensor>> {
        self.source_logits.iter().map(tensor::softmax).collect()
    }
}

/// w_j = exp(h_{l,j}·h_x) / Σ_k exp(h_{l,k}·h_x).
pub fn attention_weights(h_x: &Tensor, h_ls: &[Tensor]) -> Result<Tensor> {
    if h_ls.is_empty() {
        return Err(PlutoError::EmptyInput("attention_weights sources"));
    }
    let mut dots = Vec::with_capacity(h_ls.len());
    for h_l in h_ls {
        dots.push(h_l.dot(h_x)?);
    }
    tensor::softmax(&Tensor::vector(dots))
}

/// Σ_j w_j l_j over pre-softmax logits.
pub fn ensemble_logits(weights: &Tensor, logits: &[Tensor]) -> Result<Tensor> {
    if logits.len() != weights.numel() {
        return Err(PlutoError::InvalidArgument(format!(
            "{} weights vs {} logit vectors",
            weights.numel(),
            logits.len()
        )));
    }
    check_simplex(weights, "ensemble weights")?;
    let mut out = Tensor::zeros(logits[0].shape());
    for (w, l) in weights.data().iter().zip(logits) {
        out = out.add(&l.scale(*w))?;
    }
    Ok(out)
}

/// Convex combination of per-source probability vectors: ŷ = Σ_j w_j ŷ_j.
pub fn weighted_pseudo_label(weights: &Tensor, probs: &[Tensor]) -> Result<Tensor> {
    if probs.len() != weights.numel() {
        return Err(PlutoError::InvalidArgument(format!(
            "{} weights vs {} probability vectors",
            weights.numel(),
            probs.len()
        )));
    }
    check_simplex(weights, "pseudo-label weights")?;
    for p in probs {
        check_simplex(p, "source probabilities")?;
    }
    let mut out = Tensor::zeros(probs[0].shape());
    for (w, p) in weights.data().iter().zip(probs) {
        out = out.add(&p.scale(*w))?;
    }
    Ok(out)
}

fn check_simplex(p: &Tensor, context: &str) -> Result<()> {
    if let Some(&bad) = p.data().iter().find(|&&v| v < 0.0) {
        return Err(PlutoError::NegativeProbability { value: bad });
    }
    let sum: f64 = p.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(PlutoError::NotNormalized { sum });
    }
    let _ = context;
    Ok(())
}

/// Mean Shannon entropy of the weighted pseudo-labels over a batch
/// (evaluation-mode selector).
pub fn batch_pseudo_label_entropy(sel: &SelectorParams, batch: &[SelectorInput]) -> Result<f64> {
    if batch.is_empty() {
        return Err(PlutoError::EmptyInput("pseudo-label entropy batch"));
    }
    let mut total = 0.0;
    for input in batch {
        let weights = sel.sample_weights(input)?;
        let probs = input.source_probs()?;
        let label = weighted_pseudo_label(&weights, &probs)?;
        total += tensor::shannon_entropy(&label)?;
    }
    Ok(total / batch.len() as f64)
}

// ── taped selector graphs ────────────────────────────────────────────

struct BoundSelector {
    w_dx: ValueId,
    w_ux: ValueId,
    w_dl: ValueId,
    w_ul: ValueId,
    ln_x: (ValueId, ValueId),
    ln_l: (ValueId, ValueId),
}

fn bind_selector(tape: &mut GradContext, sel: &SelectorParams) -> Result<BoundSelector> {
    Ok(BoundSelector {
        w_dx: tape.watch("w_dx", sel.w_dx.clone())?,
        w_ux: tape.watch("w_ux", sel.w_ux.clone())?,
        w_dl: tape.watch("w_dl", sel.w_dl.clone())?,
        w_ul: tape.watch("w_ul", sel.w_ul.clone())?,
        ln_x: (
            tape.watch("ln_x.gamma", sel.ln_x.gamma.clone())?,
            tape.watch("ln_x.beta", sel.ln_x.beta.clone())?,
        ),
        ln_l: (
            tape.watch("ln_l.gamma", sel.ln_l.gamma.clone())?,
            tape.watch("ln_l.beta", sel.ln_l.beta.clone())?,
        ),
    })
}

fn tower_on_tape(
    tape: &mut GradContext,
    input: ValueId,
    w_down: ValueId,
    w_up: ValueId,
    ln: (ValueId, ValueId),
    dropout_mask: Option<&Tensor>,
) -> Result<ValueId> {
    let hidden = tape.matmul(input, w_down)?;
    let mut hidden = tape.relu(hidden);
    if let Some(mask) = dropout_mask {
        let mask = tape.constant(mask.clone());
        hidden = tape.mul_elem(hidden, mask)?;
    }
    let up = tape.matmul(hidden, w_up)?;
    tape.layer_norm_rows(up, ln.0, ln.1, SELECTOR_LN_EPS)
}

/// Dropout masks for one sample (input tower, logit tower); `None` in
/// evaluation mode or when the rate is zero.
struct SampleMasks {
    input: Option<Tensor>,
    logit: Option<Tensor>,
}

fn weights_on_tape(
    tape: &mut GradContext,
    bound: &BoundSelector,
    input: &SelectorInput,
    masks: &SampleMasks,
) -> Result<ValueId> {
    let x = tape.constant(input.x_hat.to_row_matrix());
    let h_x = tower_on_tape(tape, x, bound.w_dx, bound.w_ux, bound.ln_x, masks.input.as_ref())?;
    let mut dots = Vec::with_capacity(input.source_logits.len());
    for logits in &input.source_logits {
        let l = tape.constant(logits.to_row_matrix());
        let h_l = tower_on_tape(tape, l, bound.w_dl, bound.w_ul, bound.ln_l, masks.logit.as_ref())?;
        let h_x_t = tape.transpose(h_x)?;
        dots.push(tape.matmul(h_l, h_x_t)?);
    }
    let scores = tape.concat_cols(&dots)?;
    tape.softmax_rows(scores)
}

fn pseudo_label_on_tape(
    tape: &mut GradContext,
    bound: &BoundSelector,
    input: &SelectorInput,
    masks: &SampleMasks,
) -> Result<ValueId> {
    let weights = weights_on_tape(tape, bound, input, masks)?;
    let probs = input.source_probs()?;
    let n = probs.len();
    let k = probs[0].numel();
    let mut stacked = Vec::with_capacity(n * k);
    for p in &probs {
        stacked.extend_from_slice(p.data());
    }
    let prob_matrix = tape.constant(Tensor::from_vec(vec![n, k], stacked)?);
    tape.matmul(weights, prob_matrix)
}

fn make_masks(cfg: &SelectorConfig, training: bool, rng: Option<&mut Rng>) -> SampleMasks {
    let rate = cfg.dropout_rate;
    if !training || rate == 0.0 {
        return SampleMasks {
            input: None,
            logit: None,
        };
    }
    let rng = rng.expect("training dropout needs an rng");
    let keep = 1.0 - rate;
    let mut draw = |width: usize| {
        Tensor::from_fn(&[1, width], |_| {
            if rng.next_f64() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    };
    SampleMasks {
        input: Some(draw(cfg.input_proj_dim)),
        logit: Some(draw(cfg.logit_proj_dim)),
    }
}

// ── training ─────────────────────────────────────────────────────────

/// Supervised initialization: minimize cross-entropy of the weighted
/// pseudo-label against ground-truth labels from the source mixture.
/// Zero epochs returns the input unchanged. Deterministic given the seed.
pub fn init_supervised(
    sel: &SelectorParams,
    samples: &[(SelectorInput, usize)],
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SelectorParams> {
    if samples.is_empty() {
        return Err(PlutoError::EmptyInput("selector init dataset"));
    }
    let mut params = sel.clone();
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size.max(1)) {
            let mut tape = GradContext::new();
            let bound = bind_selector(&mut tape, &params)?;
            let mut rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (input, label) = &samples[i];
                let masks = make_masks(&params.cfg, true, Some(&mut rng));
                rows.push(pseudo_label_on_tape(&mut tape, &bound, input, &masks)?);
                labels.push(*label);
            }
            let stacked = tape.concat_rows(&rows)?;
            let nll = tape.nll_rows(stacked, &labels)?;
            let loss = tape.mean_all(nll);
            let loss_val = tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(PlutoError::Diverged(format!(
                    "selector init loss {loss_val} at epoch {epoch}"
                )));
            }
            let grads = tape.gradient(loss)?;
            if !grads.is_finite() {
                return Err(PlutoError::Diverged(
                    "non-finite selector init gradient".to_string(),
                ));
            }
            for (name, tensor) in params.named_mut() {
                let g = grads.get(name)?;
                let data = tensor.data_mut();
                for (p, gv) in data.iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }
    }
    Ok(params)
}

/// Test-time update 𝒢 → 𝒢*: gradient descent on the batch pseudo-label
/// entropy with per-source logits held fixed. Runs in evaluation mode (no
/// dropout), so the update is deterministic. On a non-finite loss the
/// original parameters stay valid and an error is returned.
pub fn tta_update(
    sel: &SelectorParams,
    batch: &[SelectorInput],
    lr: f64,
    steps: usize,
) -> Result<SelectorParams> {
    if batch.is_empty() {
        return Err(PlutoError::EmptyInput("tta_update batch"));
    }
    if steps < 1 {
        return Err(PlutoError::InvalidArgument(
            "tta_update needs steps >= 1".to_string(),
        ));
    }
    if lr < 0.0 {
        return Err(PlutoError::InvalidArgument(format!(
            "negative learning rate {lr}"
        )));
    }
    let mut params = sel.clone();
    let masks = SampleMasks {
        input: None,
        logit: None,
    };
    for _ in 0..steps {
        let mut tape = GradContext::new();
        let bound = bind_selector(&mut tape, &params)?;
        let mut entropies = Vec::with_capacity(batch.len());
        for input in batch {
            let label = pseudo_label_on_tape(&mut tape, &bound, input, &masks)?;
            entropies.push(tape.entropy_rows(label)?);
        }
        let stacked = tape.concat_rows(&entropies)?;
        let loss = tape.mean_all(stacked);
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(PlutoError::NonFinite("tta_update entropy loss".to_string()));
        }
        let grads = tape.gradient(loss)?;
        if !grads.is_finite() {
            return Err(PlutoError::NonFinite("tta_update gradient".to_string()));
        }
        for (name, tensor) in params.named_mut() {
            let g = grads.get(name)?;
            let data = tensor.data_mut();
            for (p, gv) in data.iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    }
    Ok(params)
}
