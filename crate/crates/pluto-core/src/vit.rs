//! A small frozen vision transformer with pluggable PET modules and exposed
//! LayerNorm affine state.
//!
//! The same tape-based forward is used everywhere (inference just discards
//! the tape), so training, adaptation, and evaluation are guaranteed to
//! compute the identical function. At test time only [`LnState`] and the
//! plugged module vary; everything else stays frozen.

use crate::autodiff::{GradContext, ValueId};
use crate::error::{PlutoError, Result};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::pet::{
    expected_payload_shapes, Container, ContainerKind, ModuleMeta, ModuleRecord, PetHyper,
};
use crate::rng::Rng;
use crate::synth::Dataset;
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// LayerNorm variance epsilon (ε_σ).
pub const LN_EPS: f64 = 1e-5;

/// Backbone architecture. The desk-scale default runs full experiments in
/// minutes on a CPU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
}

impl VitConfig {
    pub fn desk_default() -> Self {
        VitConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(PlutoError::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(PlutoError::InvalidArgument(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.classes == 0 || self.channels == 0 {
            return Err(PlutoError::InvalidArgument(
                "depth, classes, channels must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// e = H·W / P²
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }

    /// P²·C, the flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// LN sites: two per block plus the final norm.
    pub fn num_layer_norms(&self) -> usize {
        2 * self.depth + 1
    }
}

/// Ordered (γ, β) affine pairs for every LayerNorm in the backbone; the only
/// backbone state mutated at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct LnState {
    pub pairs: Vec<(Tensor, Tensor)>,
}

impl LnState {
    pub fn init(cfg: &VitConfig) -> LnState {
        let d = cfg.embed_dim;
        LnState {
            pairs: (0..cfg.num_layer_norms())
                .map(|_| (Tensor::full(&[d], 1.0), Tensor::zeros(&[d])))
                .collect(),
        }
    }

    pub fn validate(&self, cfg: &VitConfig) -> Result<()> {
        if self.pairs.len() != cfg.num_layer_norms() {
            return Err(PlutoError::InvalidArgument(format!(
                "{} LN pairs, expected {}",
                self.pairs.len(),
                cfg.num_layer_norms()
            )));
        }
        for (gamma, beta) in &self.pairs {
            if gamma.shape() != [cfg.embed_dim] || beta.shape() != [cfg.embed_dim] {
                return Err(PlutoError::shapes(
                    "LN affine pair",
                    gamma.shape(),
                    &[cfg.embed_dim],
                ));
            }
        }
        Ok(())
    }

    /// Concatenate all pairs into one flat λ vector (γ0 β0 γ1 β1 …).
    pub fn flatten(&self) -> Tensor {
        let mut out = Vec::new();
        for (gamma, beta) in &self.pairs {
            out.extend_from_slice(gamma.data());
            out.extend_from_slice(beta.data());
        }
        Tensor::vector(out)
    }

    /// Inverse of [`LnState::flatten`] for the same geometry.
    pub fn from_flat(&self, flat: &[f64]) -> Result<LnState> {
        let total: usize = self.pairs.iter().map(|(g, b)| g.numel() + b.numel()).sum();
        if flat.len() != total {
            return Err(PlutoError::InvalidArgument(format!(
                "flat λ length {} != {}",
                flat.len(),
                total
            )));
        }
        let mut pairs = Vec::with_capacity(self.pairs.len());
        let mut off = 0;
        for (gamma, beta) in &self.pairs {
            let g = Tensor::from_vec(
                gamma.shape().to_vec(),
                flat[off..off + gamma.numel()].to_vec(),
            )?;
            off += gamma.numel();
            let b = Tensor::from_vec(
                beta.shape().to_vec(),
                flat[off..off + beta.numel()].to_vec(),
            )?;
            off += beta.numel();
            pairs.push((g, b));
        }
        Ok(LnState { pairs })
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut named = Vec::new();
        for (i, (gamma, beta)) in self.pairs.iter().enumerate() {
            named.push((format!("ln{i}.gamma"), gamma.clone()));
            named.push((format!("ln{i}.beta"), beta.clone()));
        }
        digest_named(&named)
    }
}

/// One transformer block's frozen weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Full backbone parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub cfg: VitConfig,
    pub patch_embed: Tensor,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub ln_state: LnState,
}

impl VitParams {
    /// Seeded initialization (weights N(0, 0.02²), zero biases, unit LN).
    pub fn init(cfg: &VitConfig, rng: &mut Rng) -> Result<VitParams> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut w = |shape: &[usize]| Tensor::from_fn(shape, |_| 0.02 * rng.normal());
        let patch_embed = w(&[cfg.patch_dim(), d]);
        let class_token = w(&[d]);
        let pos_embed = w(&[1 + cfg.num_patches(), d]);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                wq: w(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: w(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: w(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: w(&[d, d]),
                bo: Tensor::zeros(&[d]),
                w1: w(&[d, cfg.mlp_dim()]),
                b1: Tensor::zeros(&[cfg.mlp_dim()]),
                w2: w(&[cfg.mlp_dim(), d]),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head_weight = w(&[d, cfg.classes]);
        Ok(VitParams {
            cfg: *cfg,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            head_weight,
            head_bias: Tensor::zeros(&[cfg.classes]),
            ln_state: LnState::init(cfg),
        })
    }

    /// Named views of every non-LN tensor, in canonical order.
    pub fn frozen_named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("class_token".into(), &self.class_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.attn.wq"), &b.wq));
            out.push((format!("block{i}.attn.bq"), &b.bq));
            out.push((format!("block{i}.attn.wk"), &b.wk));
            out.push((format!("block{i}.attn.bk"), &b.bk));
            out.push((format!("block{i}.attn.wv"), &b.wv));
            out.push((format!("block{i}.attn.bv"), &b.bv));
            out.push((format!("block{i}.attn.wo"), &b.wo));
            out.push((format!("block{i}.attn.bo"), &b.bo));
            out.push((format!("block{i}.mlp.w1"), &b.w1));
            out.push((format!("block{i}.mlp.b1"), &b.b1));
            out.push((format!("block{i}.mlp.w2"), &b.w2));
            out.push((format!("block{i}.mlp.b2"), &b.b2));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn all_named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed".into(), &mut self.patch_embed),
            ("class_token".into(), &mut self.class_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.attn.wq"), &mut b.wq));
            out.push((format!("block{i}.attn.bq"), &mut b.bq));
            out.push((format!("block{i}.attn.wk"), &mut b.wk));
            out.push((format!("block{i}.attn.bk"), &mut b.bk));
            out.push((format!("block{i}.attn.wv"), &mut b.wv));
            out.push((format!("block{i}.attn.bv"), &mut b.bv));
            out.push((format!("block{i}.attn.wo"), &mut b.wo));
            out.push((format!("block{i}.attn.bo"), &mut b.bo));
            out.push((format!("block{i}.mlp.w1"), &mut b.w1));
            out.push((format!("block{i}.mlp.b1"), &mut b.b1));
            out.push((format!("block{i}.mlp.w2"), &mut b.w2));
            out.push((format!("block{i}.mlp.b2"), &mut b.b2));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        for (k, (gamma, beta)) in self.ln_state.pairs.iter_mut().enumerate() {
            out.push((format!("ln{k}.gamma"), gamma));
            out.push((format!("ln{k}.beta"), beta));
        }
        out
    }

    /// SHA-256 over every non-LN parameter; constant across all test-time
    /// operations.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let named: Vec<(String, Tensor)> = self
            .frozen_named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        digest_named(&named)
    }

    pub fn to_container(&self, id: &str) -> Container {
        let mut tensors: Vec<(String, Tensor)> = self
            .frozen_named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (k, (gamma, beta)) in self.ln_state.pairs.iter().enumerate() {
            tensors.push((format!("ln{k}.gamma"), gamma.clone()));
            tensors.push((format!("ln{k}.beta"), beta.clone()));
        }
        Container {
            id: id.to_string(),
            domain_label: "base".to_string(),
            kind: ContainerKind::Backbone,
            hyper: serde_json::to_value(self.cfg).expect("config serializes"),
            meta: serde_json::json!({}),
            tensors,
            labels: None,
        }
    }

    pub fn from_container(c: &Container) -> Result<VitParams> {
        if c.kind != ContainerKind::Backbone {
            return Err(PlutoError::BadHeader(format!(
                "container {} is not a backbone",
                c.id
            )));
        }
        let cfg: VitConfig = serde_json::from_value(c.hyper.clone())
            .map_err(|e| PlutoError::BadHeader(format!("backbone hyper: {e}")))?;
        cfg.validate()?;
        let mut params = {
            let mut rng = Rng::new(0);
            VitParams::init(&cfg, &mut rng)?
        };
        for (name, tensor) in params.all_named_mut() {
            let stored = c.tensor(&name)?;
            if stored.shape() != tensor.shape() {
                return Err(PlutoError::shapes(
                    format!("backbone tensor {name}"),
                    stored.shape(),
                    tensor.shape(),
                ));
            }
            *tensor = stored.clone();
        }
        Ok(params)
    }
}

/// SHA-256 digest of named tensors (name, shape, f64 LE payload).
pub fn digest_named(tensors: &[(String, Tensor)]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for dim in t.shape() {
            hasher.update((*dim as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

// ── patch extraction ─────────────────────────────────────────────────

/// Non-overlapping P×P patches in row-major order, each flattened
/// (row-major pixels, then channels).
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(PlutoError::InvalidArgument(format!(
                "patchify expects H×W×C, got {other:?}"
            )))
        }
    };
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(PlutoError::shapes(
            "patchify image",
            image.shape(),
            &[cfg.image_size, cfg.image_size, cfg.channels],
        ));
    }
    let p = cfg.patch_size;
    let grid = h / p;
    let data = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out.push(data[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Max-pooled patch-embedding representation x̂ ∈ R^d (the selector input).
pub fn input_representation(params: &VitParams, image: &Tensor) -> Result<Tensor> {
    let patches = patchify(image, &params.cfg)?;
    let embedded = patches.matmul(&params.patch_embed)?;
    tensor::max_pool_rows(&embedded)
}

// ── taped forward ────────────────────────────────────────────────────

/// Which parameter group a forward graph trains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WatchSet {
    /// Inference: everything constant.
    None,
    /// Backbone pretraining: every backbone tensor incl. LN and head.
    All,
    /// Module pretraining: PET payload plus the module head.
    ModuleAndHead,
    /// Test-time adaptation: LN affine pairs only.
    LayerNorms,
}

/// Parameter bindings for one tape; shared across all images added to it.
pub struct BoundVit {
    cfg: VitConfig,
    patch_embed: ValueId,
    class_token: ValueId,
    pos_embed: ValueId,
    blocks: Vec<BoundBlock>,
    head_w: ValueId,
    head_b: ValueId,
    lns: Vec<(ValueId, ValueId)>,
    module: Option<BoundModule>,
}

struct BoundBlock {
    wq: ValueId,
    bq: ValueId,
    wk: ValueId,
    bk: ValueId,
    wv: ValueId,
    bv: ValueId,
    wo: ValueId,
    bo: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
}

enum BoundModule {
    Vpt {
        prompts: ValueId,
    },
    Adapter {
        per_block: Vec<[BoundAdapter; 2]>,
    },
}

struct BoundAdapter {
    w_down: ValueId,
    b_down: ValueId,
    w_up: ValueId,
    b_up: ValueId,
}

fn bind(
    tape: &mut GradContext,
    watch: bool,
    name: &str,
    tensor: &Tensor,
) -> Result<ValueId> {
    if watch {
        tape.watch(name, tensor.clone())
    } else {
        Ok(tape.constant(tensor.clone()))
    }
}

/// Bind backbone (+ optional module) parameters onto a tape.
///
/// `ln_override`, when present, replaces `params.ln_state` — this is how the
/// engine runs per-source adapted LayerNorms over a shared frozen backbone.
pub fn bind_model(
    tape: &mut GradContext,
    params: &VitParams,
    ln_override: Option<&LnState>,
    module: Option<&ModuleRecord>,
    watch: WatchSet,
) -> Result<BoundVit> {
    let cfg = params.cfg;
    let ln = ln_override.unwrap_or(&params.ln_state);
    ln.validate(&cfg)?;
    if let Some(m) = module {
        m.validate_shapes(&cfg)?;
    }
    let watch_backbone = watch == WatchSet::All;
    let watch_module = matches!(watch, WatchSet::ModuleAndHead);
    let watch_ln = matches!(watch, WatchSet::LayerNorms);

    let patch_embed = bind(tape, watch_backbone, "patch_embed", &params.patch_embed)?;
    let class_token = bind(
        tape,
        watch_backbone,
        "class_token",
        &params.class_token.to_row_matrix(),
    )?;
    let pos_embed = bind(tape, watch_backbone, "pos_embed", &params.pos_embed)?;

    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, b) in params.blocks.iter().enumerate() {
        blocks.push(BoundBlock {
            wq: bind(tape, watch_backbone, &format!("block{i}.attn.wq"), &b.wq)?,
            bq: bind(tape, watch_backbone, &format!("block{i}.attn.bq"), &b.bq)?,
            wk: bind(tape, watch_backbone, &format!("block{i}.attn.wk"), &b.wk)?,
            bk: bind(tape, watch_backbone, &format!("block{i}.attn.bk"), &b.bk)?,
            wv: bind(tape, watch_backbone, &format!("block{i}.attn.wv"), &b.wv)?,
            bv: bind(tape, watch_backbone, &format!("block{i}.attn.bv"), &b.bv)?,
            wo: bind(tape, watch_backbone, &format!("block{i}.attn.wo"), &b.wo)?,
            bo: bind(tape, watch_backbone, &format!("block{i}.attn.bo"), &b.bo)?,
            w1: bind(tape, watch_backbone, &format!("block{i}.mlp.w1"), &b.w1)?,
            b1: bind(tape, watch_backbone, &format!("block{i}.mlp.b1"), &b.b1)?,
            w2: bind(tape, watch_backbone, &format!("block{i}.mlp.w2"), &b.w2)?,
            b2: bind(tape, watch_backbone, &format!("block{i}.mlp.b2"), &b.b2)?,
        });
    }

    let mut lns = Vec::with_capacity(ln.pairs.len());
    for (k, (gamma, beta)) in ln.pairs.iter().enumerate() {
        lns.push((
            bind(
                tape,
                watch_backbone || watch_ln,
                &format!("ln{k}.gamma"),
                gamma,
            )?,
            bind(
                tape,
                watch_backbone || watch_ln,
                &format!("ln{k}.beta"),
                beta,
            )?,
        ));
    }

    // the module head, when present, replaces the base head
    let (head_w_t, head_b_t) = match module {
        Some(m) => (&m.head_weight, &m.head_bias),
        None => (&params.head_weight, &params.head_bias),
    };
    let head_w = bind(
        tape,
        watch_backbone || watch_module,
        "head.weight",
        head_w_t,
    )?;
    let head_b = bind(tape, watch_backbone || watch_module, "head.bias", head_b_t)?;

    let bound_module = match module {
        None => None,
        Some(m) => match m.hyper {
            PetHyper::Vpt { .. } => {
                let prompts = m.get("prompts").expect("validated payload");
                Some(BoundModule::Vpt {
                    prompts: bind(tape, watch_module, "prompts", prompts)?,
                })
            }
            PetHyper::Adapter { .. } => {
                let mut per_block = Vec::with_capacity(cfg.depth);
                for i in 0..cfg.depth {
                    let mut sites = Vec::with_capacity(2);
                    for site in ["attn", "mlp"] {
                        let base = format!("block{i}.adapter_{site}");
                        sites.push(BoundAdapter {
                            w_down: bind(
                                tape,
                                watch_module,
                                &format!("{base}.w_down"),
                                m.get(&format!("{base}.w_down")).expect("validated"),
                            )?,
                            b_down: bind(
                                tape,
                                watch_module,
                                &format!("{base}.b_down"),
                                m.get(&format!("{base}.b_down")).expect("validated"),
                            )?,
                            w_up: bind(
                                tape,
                                watch_module,
                                &format!("{base}.w_up"),
                                m.get(&format!("{base}.w_up")).expect("validated"),
                            )?,
                            b_up: bind(
                                tape,
                                watch_module,
                                &format!("{base}.b_up"),
                                m.get(&format!("{base}.b_up")).expect("validated"),
                            )?,
                        });
                    }
                    let [attn, mlp]: [BoundAdapter; 2] = sites.try_into().ok().unwrap();
                    per_block.push([attn, mlp]);
                }
                Some(BoundModule::Adapter { per_block })
            }
        },
    };

    Ok(BoundVit {
        cfg,
        patch_embed,
        class_token,
        pos_embed,
        blocks,
        head_w,
        head_b,
        lns,
        module: bound_module,
    })
}

/// Build the layer-1 input sequence: [class token, prompts?, patch
/// embeddings], prompts inserted after positional encoding.
fn embed_sequence(tape: &mut GradContext, bound: &BoundVit, image: &Tensor) -> Result<ValueId> {
    let patches = patchify(image, &bound.cfg)?;
    let patches = tape.constant(patches);
    let embedded = tape.matmul(patches, bound.patch_embed)?;

    let e = bound.cfg.num_patches();
    let cls_pos = tape.slice_rows(bound.pos_embed, 0, 1)?;
    let patch_pos = tape.slice_rows(bound.pos_embed, 1, 1 + e)?;
    let cls = tape.add(bound.class_token, cls_pos)?;
    let patches_pe = tape.add(embedded, patch_pos)?;

    match &bound.module {
        Some(BoundModule::Vpt { prompts }) => tape.concat_rows(&[cls, *prompts, patches_pe]),
        _ => tape.concat_rows(&[cls, patches_pe]),
    }
}

fn bottleneck(tape: &mut GradContext, x: ValueId, adapter: &BoundAdapter) -> Result<ValueId> {
    let down = tape.matmul(x, adapter.w_down)?;
    let down = tape.add_bias(down, adapter.b_down)?;
    let act = tape.relu(down);
    let up = tape.matmul(act, adapter.w_up)?;
    let up = tape.add_bias(up, adapter.b_up)?;
    tape.add(x, up)
}

fn attention(
    tape: &mut GradContext,
    bound: &BoundVit,
    block: &BoundBlock,
    x: ValueId,
) -> Result<ValueId> {
    let q = tape.matmul(x, block.wq)?;
    let q = tape.add_bias(q, block.bq)?;
    let k = tape.matmul(x, block.wk)?;
    let k = tape.add_bias(k, block.bk)?;
    let v = tape.matmul(x, block.wv)?;
    let v = tape.add_bias(v, block.bv)?;

    let dh = bound.cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(bound.cfg.heads);
    for h in 0..bound.cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, block.wo)?;
    tape.add_bias(out, block.bo)
}

/// Append one image's forward pass to the tape; returns the 1×K logits node.
pub fn forward_on_tape(
    tape: &mut GradContext,
    bound: &BoundVit,
    image: &Tensor,
) -> Result<ValueId> {
    let mut seq = embed_sequence(tape, bound, image)?;
    for (i, block) in bound.blocks.iter().enumerate() {
        let (g1, b1) = bound.lns[2 * i];
        let normed = tape.layer_norm_rows(seq, g1, b1, LN_EPS)?;
        let mut attn_out = attention(tape, bound, block, normed)?;
        if let Some(BoundModule::Adapter { per_block }) = &bound.module {
            attn_out = bottleneck(tape, attn_out, &per_block[i][0])?;
        }
        seq = tape.add(seq, attn_out)?;

        let (g2, b2) = bound.lns[2 * i + 1];
        let normed = tape.layer_norm_rows(seq, g2, b2, LN_EPS)?;
        let hidden = tape.matmul(normed, block.w1)?;
        let hidden = tape.add_bias(hidden, block.b1)?;
        let hidden = tape.gelu(hidden);
        let mut mlp_out = tape.matmul(hidden, block.w2)?;
        mlp_out = tape.add_bias(mlp_out, block.b2)?;
        if let Some(BoundModule::Adapter { per_block }) = &bound.module {
            mlp_out = bottleneck(tape, mlp_out, &per_block[i][1])?;
        }
        seq = tape.add(seq, mlp_out)?;
    }
    let (gf, bf) = bound.lns[2 * bound.cfg.depth];
    let fin = tape.layer_norm_rows(seq, gf, bf, LN_EPS)?;
    let cls = tape.slice_rows(fin, 0, 1)?;
    let logits = tape.matmul(cls, bound.head_w)?;
    tape.add_bias(logits, bound.head_b)
}

/// Pure forward: logits for one image, current `params.ln_state`.
pub fn forward(
    params: &VitParams,
    module: Option<&ModuleRecord>,
    image: &Tensor,
) -> Result<Tensor> {
    forward_with_ln(params, None, module, image)
}

/// Pure forward with an explicit LayerNorm state override.
pub fn forward_with_ln(
    params: &VitParams,
    ln_override: Option<&LnState>,
    module: Option<&ModuleRecord>,
    image: &Tensor,
) -> Result<Tensor> {
    let mut tape = GradContext::new();
    let bound = bind_model(&mut tape, params, ln_override, module, WatchSet::None)?;
    let logits = forward_on_tape(&mut tape, &bound, image)?;
    Ok(tape.value(logits).to_vector())
}

// ── training ─────────────────────────────────────────────────────────

fn cross_entropy_batch(
    tape: &mut GradContext,
    bound: &BoundVit,
    images: &[&Tensor],
    labels: &[usize],
) -> Result<ValueId> {
    let mut rows = Vec::with_capacity(images.len());
    for image in images {
        rows.push(forward_on_tape(tape, bound, image)?);
    }
    let logits = tape.concat_rows(&rows)?;
    let probs = tape.softmax_rows(logits)?;
    let nll = tape.nll_rows(probs, labels)?;
    Ok(tape.mean_all(nll))
}

/// Train the whole backbone from scratch on a labeled dataset.
/// Deterministic given the seed.
pub fn pretrain_backbone(
    data: &Dataset,
    cfg: &VitConfig,
    opt_spec: &OptimizerSpec,
    seed: u64,
) -> Result<VitParams> {
    if data.is_empty() {
        return Err(PlutoError::EmptyInput("pretrain_backbone dataset"));
    }
    if data.labels.iter().any(|&l| l >= cfg.classes) {
        return Err(PlutoError::InvalidArgument(
            "label out of range for configured classes".to_string(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut params = VitParams::init(cfg, &mut rng)?;
    let mut opt = Optimizer::new(opt_spec);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..opt_spec.epochs {
        rng.shuffle(&mut order);
        let lr = opt_spec.lr_at_epoch(epoch);
        for chunk in order.chunks(opt_spec.batch_size.max(1)) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = GradContext::new();
            let bound = bind_model(&mut tape, &params, None, None, WatchSet::All)?;
            let loss = cross_entropy_batch(&mut tape, &bound, &images, &labels)?;
            let loss_val = tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(PlutoError::Diverged(format!(
                    "backbone loss {loss_val} at epoch {epoch}"
                )));
            }
            let grads = tape.gradient(loss)?;
            if !grads.is_finite() {
                return Err(PlutoError::Diverged(format!(
                    "non-finite backbone gradient at epoch {epoch}"
                )));
            }
            let mut named = params.all_named_mut();
            opt.step(&mut named, &grads, lr)?;
        }
    }
    Ok(params)
}

/// Train one PET module (and its head) against a frozen backbone.
///
/// The backbone is taken by shared reference and never mutated; the returned
/// record carries domain metadata and the final source-train accuracy.
pub fn pretrain_source_module(
    params: &VitParams,
    hyper: PetHyper,
    id: &str,
    domain_label: &str,
    source: &Dataset,
    opt_spec: &OptimizerSpec,
    seed: u64,
) -> Result<ModuleRecord> {
    if source.is_empty() {
        return Err(PlutoError::EmptyInput("pretrain_source_module dataset"));
    }
    let mut rng = Rng::new(seed);
    let mut record = init_module(params, hyper, id, domain_label, seed, &mut rng);
    let mut opt = Optimizer::new(opt_spec);
    let mut order: Vec<usize> = (0..source.len()).collect();

    for epoch in 0..opt_spec.epochs {
        rng.shuffle(&mut order);
        let lr = opt_spec.lr_at_epoch(epoch);
        for chunk in order.chunks(opt_spec.batch_size.max(1)) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &source.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| source.labels[i]).collect();
            let mut tape = GradContext::new();
            let bound = bind_model(&mut tape, params, None, Some(&record), WatchSet::ModuleAndHead)?;
            let loss = cross_entropy_batch(&mut tape, &bound, &images, &labels)?;
            let loss_val = tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(PlutoError::Diverged(format!(
                    "module {id} loss {loss_val} at epoch {epoch}"
                )));
            }
            let grads = tape.gradient(loss)?;
            if !grads.is_finite() {
                return Err(PlutoError::Diverged(format!(
                    "non-finite module gradient ({id}) at epoch {epoch}"
                )));
            }
            let mut named: Vec<(String, &mut Tensor)> = record
                .payload
                .iter_mut()
                .map(|(n, t)| (n.clone(), t))
                .collect();
            named.push(("head.weight".into(), &mut record.head_weight));
            named.push(("head.bias".into(), &mut record.head_bias));
            opt.step(&mut named, &grads, lr)?;
        }
    }
    record.meta.source_train_accuracy = evaluate(params, Some(&record), source)?;
    Ok(record)
}

fn init_module(
    params: &VitParams,
    hyper: PetHyper,
    id: &str,
    domain_label: &str,
    seed: u64,
    rng: &mut Rng,
) -> ModuleRecord {
    let cfg = &params.cfg;
    let payload = expected_payload_shapes(&hyper, cfg)
        .into_iter()
        .map(|(name, shape)| {
            // up-projections start at zero so a fresh adapter is the identity
            let t = if name.ends_with("w_up") || name.contains(".b_") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| 0.02 * rng.normal())
            };
            (name, t)
        })
        .collect();
    let head_count = cfg.embed_dim * cfg.classes + cfg.classes;
    let mut record = ModuleRecord {
        id: id.to_string(),
        domain_label: domain_label.to_string(),
        hyper,
        payload,
        // warm-start the per-module head from the base head
        head_weight: params.head_weight.clone(),
        head_bias: params.head_bias.clone(),
        meta: ModuleMeta {
            source_train_accuracy: 0.0,
            seed,
            created_at: 0,
            head_param_count: head_count,
            bias_param_count: 0,
        },
    };
    record.meta.bias_param_count = record.bias_param_count();
    record
}

/// Fraction of argmax-correct predictions. Deterministic.
pub fn evaluate(
    params: &VitParams,
    module: Option<&ModuleRecord>,
    data: &Dataset,
) -> Result<f64> {
    evaluate_with_ln(params, None, module, data)
}

/// Evaluation with an explicit per-source LayerNorm state.
pub fn evaluate_with_ln(
    params: &VitParams,
    ln_override: Option<&LnState>,
    module: Option<&ModuleRecord>,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(PlutoError::EmptyInput("evaluate dataset"));
    }
    let mut correct = 0usize;
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let logits = forward_with_ln(params, ln_override, module, image)?;
        if logits.argmax() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
