//! PET module records, parameter-count formulas, the binary container
//! format, and the filesystem-backed module store.
//!
//! Container layout (bit-exact):
//!
//! ```text
//! magic "PLUT" (4) | version u16 LE | header_len u32 LE
//! | header: UTF-8 JSON {id, domain_label, kind, hyper, meta, manifest}
//! | payload: concatenated f32 LE arrays in manifest order
//!   (kind "dataset" stores its "labels" entry as u16 LE)
//! | SHA-256 of all preceding bytes (32)
//! ```

use crate::error::{PlutoError, Result};
use crate::tensor::Tensor;
use crate::vit::VitConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"PLUT";
pub const VERSION: u16 = 1;

// ── parameter-count formulas ─────────────────────────────────────────

/// VPT prompt parameters: p × d.
pub fn vpt_param_count(p: usize, d: usize) -> Result<usize> {
    if p < 1 || d < 1 {
        return Err(PlutoError::InvalidArgument(format!(
            "vpt_param_count requires p, d >= 1, got p={p} d={d}"
        )));
    }
    Ok(p * d)
}

/// Adapter projection parameters: 2 × l × 2 × k × d_b (matrices only;
/// biases are tracked separately in module metadata).
pub fn adapter_param_count(l: usize, k: usize, d_b: usize) -> Result<usize> {
    if l < 1 || k < 1 || d_b < 1 {
        return Err(PlutoError::InvalidArgument(format!(
            "adapter_param_count requires l, k, d_b >= 1, got l={l} k={k} d_b={d_b}"
        )));
    }
    Ok(2 * l * 2 * k * d_b)
}

/// Selector parameters: d·dx + dx·dp + v·dl + dl·dp + 4·dp.
pub fn selector_param_count(d: usize, dx: usize, dl: usize, dp: usize, v: usize) -> Result<usize> {
    if d < 1 || dx < 1 || dl < 1 || dp < 1 || v < 1 {
        return Err(PlutoError::InvalidArgument(format!(
            "selector_param_count requires all dims >= 1, got d={d} dx={dx} dl={dl} dp={dp} v={v}"
        )));
    }
    Ok(d * dx + dx * dp + v * dl + dl * dp + 4 * dp)
}

// ── module records ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Vpt,
    Adapter,
}

/// Kind-specific size hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PetHyper {
    Vpt { prompts: usize },
    Adapter { bottleneck: usize },
}

impl PetHyper {
    pub fn kind(&self) -> ModuleKind {
        match self {
            PetHyper::Vpt { .. } => ModuleKind::Vpt,
            PetHyper::Adapter { .. } => ModuleKind::Adapter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub source_train_accuracy: f64,
    pub seed: u64,
    pub created_at: u64,
    pub head_param_count: usize,
    pub bias_param_count: usize,
}

/// One pretrained PET module plus its classifier head and domain metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRecord {
    pub id: String,
    pub domain_label: String,
    pub hyper: PetHyper,
    /// Ordered named tensors; shapes are fixed by (kind, hyper, VitConfig).
    pub payload: Vec<(String, Tensor)>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub meta: ModuleMeta,
}

impl ModuleRecord {
    pub fn kind(&self) -> ModuleKind {
        self.hyper.kind()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.payload
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Element count of the projection payload tensors (prompts, or the
    /// adapter down/up matrices). Matches the closed-form count formulas.
    pub fn projection_param_count(&self) -> usize {
        match self.hyper {
            PetHyper::Vpt { .. } => self.payload.iter().map(|(_, t)| t.numel()).sum(),
            PetHyper::Adapter { .. } => self
                .payload
                .iter()
                .filter(|(n, _)| n.ends_with("w_down") || n.ends_with("w_up"))
                .map(|(_, t)| t.numel())
                .sum(),
        }
    }

    /// Element count of the adapter bias vectors (zero for VPT).
    pub fn bias_param_count(&self) -> usize {
        match self.hyper {
            PetHyper::Vpt { .. } => 0,
            PetHyper::Adapter { .. } => self
                .payload
                .iter()
                .filter(|(n, _)| n.ends_with("b_down") || n.ends_with("b_up"))
                .map(|(_, t)| t.numel())
                .sum(),
        }
    }

    /// Check every payload/head shape against the backbone configuration.
    pub fn validate_shapes(&self, cfg: &VitConfig) -> Result<()> {
        let d = cfg.embed_dim;
        let expect = expected_payload_shapes(&self.hyper, cfg);
        if self.payload.len() != expect.len() {
            return Err(PlutoError::BadHeader(format!(
                "module {}: {} payload tensors, expected {}",
                self.id,
                self.payload.len(),
                expect.len()
            )));
        }
        for ((name, tensor), (want_name, want_shape)) in self.payload.iter().zip(&expect) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(PlutoError::shapes(
                    format!("module {} tensor {name} (expected {want_name})", self.id),
                    tensor.shape(),
                    want_shape,
                ));
            }
        }
        if self.head_weight.shape() != [d, cfg.classes] {
            return Err(PlutoError::shapes(
                "module head weight",
                self.head_weight.shape(),
                &[d, cfg.classes],
            ));
        }
        if self.head_bias.shape() != [cfg.classes] {
            return Err(PlutoError::shapes(
                "module head bias",
                self.head_bias.shape(),
                &[cfg.classes],
            ));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = self.payload.clone();
        tensors.push(("head.weight".to_string(), self.head_weight.clone()));
        tensors.push(("head.bias".to_string(), self.head_bias.clone()));
        Container {
            id: self.id.clone(),
            domain_label: self.domain_label.clone(),
            kind: match self.kind() {
                ModuleKind::Vpt => ContainerKind::Vpt,
                ModuleKind::Adapter => ContainerKind::Adapter,
            },
            hyper: serde_json::to_value(self.hyper).expect("hyper serializes"),
            meta: serde_json::to_value(&self.meta).expect("meta serializes"),
            tensors,
            labels: None,
        }
    }

    pub fn from_container(c: &Container) -> Result<ModuleRecord> {
        match c.kind {
            ContainerKind::Vpt | ContainerKind::Adapter => {}
            other => {
                return Err(PlutoError::BadHeader(format!(
                    "container {} holds {:?}, not a PET module",
                    c.id, other
                )))
            }
        }
        let hyper: PetHyper = serde_json::from_value(c.hyper.clone())
            .map_err(|e| PlutoError::BadHeader(format!("hyper: {e}")))?;
        let meta: ModuleMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| PlutoError::BadHeader(format!("meta: {e}")))?;
        let mut payload = Vec::new();
        let mut head_weight = None;
        let mut head_bias = None;
        for (name, tensor) in &c.tensors {
            match name.as_str() {
                "head.weight" => head_weight = Some(tensor.clone()),
                "head.bias" => head_bias = Some(tensor.clone()),
                _ => payload.push((name.clone(), tensor.clone())),
            }
        }
        let head_weight =
            head_weight.ok_or_else(|| PlutoError::BadHeader("missing head.weight".into()))?;
        let head_bias =
            head_bias.ok_or_else(|| PlutoError::BadHeader("missing head.bias".into()))?;
        Ok(ModuleRecord {
            id: c.id.clone(),
            domain_label: c.domain_label.clone(),
            hyper,
            payload,
            head_weight,
            head_bias,
            meta,
        })
    }
}

/// Expected (name, shape) list for a module payload.
pub fn expected_payload_shapes(hyper: &PetHyper, cfg: &VitConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    match *hyper {
        PetHyper::Vpt { prompts } => vec![("prompts".to_string(), vec![prompts, d])],
        PetHyper::Adapter { bottleneck } => {
            let mut out = Vec::new();
            for layer in 0..cfg.depth {
                for site in ["attn", "mlp"] {
                    let base = format!("block{layer}.adapter_{site}");
                    out.push((format!("{base}.w_down"), vec![d, bottleneck]));
                    out.push((format!("{base}.b_down"), vec![bottleneck]));
                    out.push((format!("{base}.w_up"), vec![bottleneck, d]));
                    out.push((format!("{base}.b_up"), vec![d]));
                }
            }
            out
        }
    }
}

// ── generic container ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Vpt,
    Adapter,
    Backbone,
    Selector,
    Dataset,
}

impl ContainerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ContainerKind::Vpt => "vpt",
            ContainerKind::Adapter => "adapter",
            ContainerKind::Backbone => "backbone",
            ContainerKind::Selector => "selector",
            ContainerKind::Dataset => "dataset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

// field order fixes the serialized header byte layout
#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    domain_label: String,
    kind: ContainerKind,
    hyper: serde_json::Value,
    meta: serde_json::Value,
    manifest: Vec<ManifestEntry>,
}

/// In-memory form of any container file (module, backbone, selector,
/// dataset).
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub id: String,
    pub domain_label: String,
    pub kind: ContainerKind,
    pub hyper: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    /// Dataset label array (u16 on disk); `None` for every other kind.
    pub labels: Option<Vec<u16>>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| PlutoError::BadHeader(format!("missing tensor {name} in {}", self.id)))
    }
}

/// Round a tensor through f32, the payload precision.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Deterministic byte encoding of a container.
pub fn serialize(c: &Container) -> Vec<u8> {
    let mut manifest: Vec<ManifestEntry> = c
        .tensors
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if let Some(labels) = &c.labels {
        manifest.push(ManifestEntry {
            name: "labels".to_string(),
            shape: vec![labels.len()],
        });
    }
    let header = Header {
        id: c.id.clone(),
        domain_label: c.domain_label.clone(),
        kind: c.kind,
        hyper: c.hyper.clone(),
        meta: c.meta.clone(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in &c.tensors {
        for v in tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &c.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Decode and verify a container byte stream.
pub fn deserialize(bytes: &[u8]) -> Result<Container> {
    const PREFIX: usize = 4 + 2 + 4;
    if bytes.len() < PREFIX {
        return Err(PlutoError::Truncated {
            expected: PREFIX,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(PlutoError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PlutoError::BadVersion(version));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < PREFIX + header_len {
        return Err(PlutoError::Truncated {
            expected: PREFIX + header_len,
            actual: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len])
        .map_err(|e| PlutoError::BadHeader(e.to_string()))?;

    let mut payload_len = 0usize;
    for entry in &header.manifest {
        let numel: usize = entry.shape.iter().product();
        let width = if header.kind == ContainerKind::Dataset && entry.name == "labels" {
            2
        } else {
            4
        };
        payload_len += numel * width;
    }
    let expected_total = PREFIX + header_len + payload_len + 32;
    if bytes.len() != expected_total {
        return Err(PlutoError::Truncated {
            expected: expected_total,
            actual: bytes.len(),
        });
    }
    let digest = Sha256::digest(&bytes[..expected_total - 32]);
    if digest.as_slice() != &bytes[expected_total - 32..] {
        return Err(PlutoError::DigestMismatch(format!(
            "container {}",
            header.id
        )));
    }

    let mut offset = PREFIX + header_len;
    let mut tensors = Vec::new();
    let mut labels = None;
    for entry in &header.manifest {
        let numel: usize = entry.shape.iter().product();
        if header.kind == ContainerKind::Dataset && entry.name == "labels" {
            let mut vals = Vec::with_capacity(numel);
            for i in 0..numel {
                let o = offset + 2 * i;
                vals.push(u16::from_le_bytes([bytes[o], bytes[o + 1]]));
            }
            offset += 2 * numel;
            labels = Some(vals);
        } else {
            let mut vals = Vec::with_capacity(numel);
            for i in 0..numel {
                let o = offset + 4 * i;
                vals.push(
                    f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
                        as f64,
                );
            }
            offset += 4 * numel;
            tensors.push((
                entry.name.clone(),
                Tensor::from_vec(entry.shape.clone(), vals)?,
            ));
        }
    }
    Ok(Container {
        id: header.id,
        domain_label: header.domain_label,
        kind: header.kind,
        hyper: header.hyper,
        meta: header.meta,
        tensors,
        labels,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ── store ────────────────────────────────────────────────────────────

/// One row of the store index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub path: String,
    pub byte_len: u64,
    pub sha256: String,
    pub domain_label: String,
    pub kind: ContainerKind,
}

#[derive(Default, Serialize, Deserialize)]
struct StoreIndex {
    entries: BTreeMap<String, StoreEntry>,
}

/// Filesystem-backed container store: one file per container plus a JSON
/// index (`store.json`). Reads are lock-free; writes take an exclusive lock
/// file.
pub struct Store {
    dir: PathBuf,
}

const INDEX_FILE: &str = "store.json";
const LOCK_FILE: &str = "store.json.lock";

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..400 {
            match fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(_) => return Ok(LockGuard { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    std::thread::sleep(std::time::Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(PlutoError::Io(std::io::Error::new(
            std::io::ErrorKind::TimedOut,
            "store index lock",
        )))
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Store {
    /// Open (creating if needed) a store directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Store> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            let _guard = LockGuard::acquire(&dir)?;
            if !index_path.exists() {
                write_index(&dir, &StoreIndex::default())?;
            }
        }
        Ok(Store { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_index(&self) -> Result<StoreIndex> {
        let raw = fs::read(self.dir.join(INDEX_FILE))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    /// Store raw container bytes under the container's own id.
    pub fn put_bytes(&self, bytes: &[u8]) -> Result<StoreEntry> {
        let container = deserialize(bytes)?;
        if container.id.is_empty() || container.id.contains('/') || container.id.contains("..") {
            return Err(PlutoError::InvalidArgument(format!(
                "bad container id {:?}",
                container.id
            )));
        }
        let _guard = LockGuard::acquire(&self.dir)?;
        let mut index = self.read_index()?;
        if index.entries.contains_key(&container.id) {
            return Err(PlutoError::Conflict(container.id));
        }
        let filename = format!(
            "{}-{:08x}.plut",
            sanitize(&container.id),
            crate::rng::fnv1a(container.id.as_bytes()) as u32
        );
        fs::write(self.dir.join(&filename), bytes)?;
        let entry = StoreEntry {
            id: container.id.clone(),
            path: filename,
            byte_len: bytes.len() as u64,
            sha256: sha256_hex(bytes),
            domain_label: container.domain_label.clone(),
            kind: container.kind,
        };
        index.entries.insert(container.id, entry.clone());
        write_index(&self.dir, &index)?;
        Ok(entry)
    }

    pub fn put(&self, container: &Container) -> Result<StoreEntry> {
        self.put_bytes(&serialize(container))
    }

    pub fn put_module(&self, record: &ModuleRecord) -> Result<StoreEntry> {
        self.put(&record.to_container())
    }

    /// Exact stored bytes, verified against the index digest.
    pub fn get_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let index = self.read_index()?;
        let entry = index
            .entries
            .get(id)
            .ok_or_else(|| PlutoError::NotFound(id.to_string()))?;
        let bytes = fs::read(self.dir.join(&entry.path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(PlutoError::DigestMismatch(format!(
                "store file {}",
                entry.path
            )));
        }
        Ok(bytes)
    }

    pub fn get(&self, id: &str) -> Result<Container> {
        deserialize(&self.get_bytes(id)?)
    }

    pub fn get_module(&self, id: &str) -> Result<ModuleRecord> {
        ModuleRecord::from_container(&self.get(id)?)
    }

    /// All entries sorted by id.
    pub fn list(&self) -> Result<Vec<StoreEntry>> {
        Ok(self.read_index()?.entries.into_values().collect())
    }

    pub fn contains(&self, id: &str) -> Result<bool> {
        Ok(self.read_index()?.entries.contains_key(id))
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_index(dir: &Path, index: &StoreIndex) -> Result<()> {
    let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&serde_json::to_vec_pretty(index)?)?;
    f.sync_all()?;
    fs::rename(&tmp, dir.join(INDEX_FILE))?;
    Ok(())
}
