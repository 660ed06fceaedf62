//! LoRA data structures, merge semantics, per-task fine-tuning and the bank
//! serialization format.
//!
//! An adapter holds one (B, A) pair per base-model block; ΔW = B*A with no
//! extra scale factor. Perturbation experiments produce dense deltas that no
//! longer factor, so a separate dense variant shares the injection trait.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LofaError, Result};
use crate::graph::Graph;
use crate::optim::{AdamConfig, AdamW};
use crate::toybase::{
    normal_matrix, AdapterVars, BaseModel, BlockKey, BlockType, DeltaRef, DeltaSource,
    FlowBatchSource,
};
use crate::util::{le_bytes_to_f32s, matrix_to_le_bytes};

pub const BANK_MANIFEST: &str = "bank_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub task_id: String,
    pub prompt_text: String,
    pub training_steps: usize,
    pub seed: u64,
    pub base_fingerprint: String,
}

impl AdapterMeta {
    pub fn empty() -> Self {
        Self {
            task_id: String::new(),
            prompt_text: String::new(),
            training_steps: 0,
            seed: 0,
            base_fingerprint: String::new(),
        }
    }
}

/// Low-rank adapter: one (B: m x r, A: r x n) pair per block.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub block_order: Vec<BlockKey>,
    /// Aligned with `block_order`.
    pub factors: Vec<(Array2<f32>, Array2<f32>)>,
    pub meta: AdapterMeta,
}

impl LoraAdapter {
    /// B = 0, A ~ N(0, 0.01^2): training starts exactly at the base model.
    pub fn init(base: &BaseModel, rank: usize, seed: u64, meta: AdapterMeta) -> Result<Self> {
        if rank == 0 {
            return Err(LofaError::Argument("LoRA rank must be >= 1".into()));
        }
        let (m, n) = (base.dims.m, base.dims.n);
        if rank > m.min(n) {
            return Err(LofaError::Argument(format!(
                "rank {rank} exceeds min(m, n) = {}",
                m.min(n)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block_order = base.dims.block_keys();
        let factors = block_order
            .iter()
            .map(|_| {
                (
                    Array2::zeros((m, rank)),
                    normal_matrix(&mut rng, rank, n, 0.01),
                )
            })
            .collect();
        Ok(Self {
            rank,
            block_order,
            factors,
            meta,
        })
    }

    pub fn index_of(&self, depth: usize, block_type: BlockType) -> Option<usize> {
        self.block_order
            .iter()
            .position(|&(d, b)| d == depth && b == block_type)
    }

    /// ΔW = B*A for one block.
    pub fn delta(&self, depth: usize, block_type: BlockType) -> Result<Array2<f32>> {
        let idx = self
            .index_of(depth, block_type)
            .ok_or(LofaError::MissingBlock { depth, block_type })?;
        let (b, a) = &self.factors[idx];
        Ok(b.dot(a))
    }

    /// Register the factors as graph leaves for taped training.
    pub fn vars(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            factors: self
                .factors
                .iter()
                .map(|(b, a)| (g.leaf(b.clone()), g.leaf(a.clone())))
                .collect(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (b, a) in &self.factors {
            bytes.extend_from_slice(&matrix_to_le_bytes(b));
            bytes.extend_from_slice(&matrix_to_le_bytes(a));
        }
        bytes
    }
}

impl DeltaSource for LoraAdapter {
    fn delta_ref(&self, depth: usize, block_type: BlockType) -> Option<DeltaRef<'_>> {
        self.index_of(depth, block_type).map(|idx| {
            let (b, a) = &self.factors[idx];
            DeltaRef::Factored { b, a }
        })
    }
}

/// Dense-delta adapter; produced by masked perturbation, consumable by merge
/// and forward like a LoRA.
#[derive(Debug, Clone)]
pub struct DenseAdapter {
    pub block_order: Vec<BlockKey>,
    pub deltas: Vec<Array2<f32>>,
    pub meta: AdapterMeta,
}

impl DeltaSource for DenseAdapter {
    fn delta_ref(&self, depth: usize, block_type: BlockType) -> Option<DeltaRef<'_>> {
        self.block_order
            .iter()
            .position(|&(d, b)| d == depth && b == block_type)
            .map(|idx| DeltaRef::Dense(&self.deltas[idx]))
    }
}

/// New model with every targeted block replaced by W + ΔW. Non-LoRA
/// parameters are untouched and the input model is not modified.
pub fn merge(base: &BaseModel, adapter: &dyn DeltaSource) -> Result<BaseModel> {
    let mut merged = base.clone();
    for block in &mut merged.blocks {
        let delta = adapter
            .delta_matrix(block.depth, block.block_type)
            .ok_or(LofaError::MissingBlock {
                depth: block.depth,
                block_type: block.block_type,
            })?;
        if delta.dim() != block.matrix.dim() {
            return Err(LofaError::Shape {
                depth: block.depth,
                block_type: block.block_type,
                expected: format!("{:?}", block.matrix.dim()),
                got: format!("{:?}", delta.dim()),
            });
        }
        block.matrix = &block.matrix + &delta;
    }
    Ok(merged)
}

/// Check an adapter's recorded base fingerprint against a model.
pub fn check_fingerprint(base: &BaseModel, meta: &AdapterMeta) -> Result<()> {
    if meta.base_fingerprint.is_empty() {
        return Ok(());
    }
    let fp = base.fingerprint();
    if fp != meta.base_fingerprint {
        return Err(LofaError::Fingerprint {
            expected: meta.base_fingerprint.clone(),
            got: fp,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoraTrainConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            steps: 1000,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Fine-tune a fresh LoRA on one task. The base model is frozen; only the
/// (B, A) factors train, with a constant learning rate. Returns the adapter
/// and the per-step loss history.
pub fn finetune_lora(
    base: &BaseModel,
    task: &dyn FlowBatchSource,
    cfg: &LoraTrainConfig,
    task_id: &str,
    prompt_text: &str,
) -> Result<(LoraAdapter, Vec<f32>)> {
    if cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(LofaError::Argument(
            "finetune_lora needs positive lr and batch size".into(),
        ));
    }
    let meta = AdapterMeta {
        task_id: task_id.to_string(),
        prompt_text: prompt_text.to_string(),
        training_steps: cfg.steps,
        seed: cfg.seed,
        base_fingerprint: base.fingerprint(),
    };
    let mut adapter = LoraAdapter::init(base, cfg.rank, cfg.seed, meta)?;
    if cfg.steps == 0 {
        return Ok((adapter, Vec::new()));
    }
    let shapes: Vec<(usize, usize)> = adapter
        .factors
        .iter()
        .flat_map(|(b, a)| [b.dim(), a.dim()])
        .collect();
    let mut opt = AdamW::new(AdamConfig::constant(cfg.lr), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = task.batch(cfg.batch_size, &mut rng);
        let mut g = Graph::new();
        let base_vars = base.vars(&mut g);
        let adapter_vars = adapter.vars(&mut g);
        let loss = base.fm_loss_taped(&mut g, &base_vars, &batch, Some(&adapter_vars));
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(LofaError::Numerical(format!(
                "finetune loss {loss_val} at step {step}"
            )));
        }
        history.push(loss_val);
        let grads = g.backward(loss);
        // Base leaves get gradients too; they are simply never applied.
        let grad_arrays: Vec<Array2<f32>> = adapter_vars
            .factors
            .iter()
            .zip(adapter.factors.iter())
            .flat_map(|((vb, va), (b, a))| [grads.get(*vb, b), grads.get(*va, a)])
            .collect();
        let mut params: Vec<&mut Array2<f32>> = Vec::with_capacity(shapes.len());
        for (b, a) in adapter.factors.iter_mut() {
            params.push(b);
            params.push(a);
        }
        opt.step(&mut params, &grad_arrays);
    }
    Ok((adapter, history))
}

/// Per-adapter bank annotations: split membership and build-time quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankTag {
    pub task_id: String,
    pub family: String,
    pub split: Split,
    pub quality_energy_distance: Option<f64>,
    pub quality_ok: Option<bool>,
}

/// A collection of adapters fine-tuned against one base model.
#[derive(Debug, Clone)]
pub struct LoraBank {
    pub rank: usize,
    pub base_fingerprint: String,
    pub block_order: Vec<BlockKey>,
    pub adapters: Vec<LoraAdapter>,
    /// Aligned with `adapters`.
    pub tags: Vec<BankTag>,
    pub compat_warnings: Vec<String>,
}

impl LoraBank {
    pub fn new(rank: usize, base_fingerprint: String, block_order: Vec<BlockKey>) -> Self {
        Self {
            rank,
            base_fingerprint,
            block_order,
            adapters: Vec::new(),
            tags: Vec::new(),
            compat_warnings: Vec::new(),
        }
    }

    pub fn push(&mut self, adapter: LoraAdapter, tag: BankTag) -> Result<()> {
        if adapter.rank != self.rank {
            return Err(LofaError::Argument(format!(
                "adapter rank {} mismatches bank rank {}",
                adapter.rank, self.rank
            )));
        }
        if adapter.meta.base_fingerprint != self.base_fingerprint {
            return Err(LofaError::Fingerprint {
                expected: self.base_fingerprint.clone(),
                got: adapter.meta.base_fingerprint.clone(),
            });
        }
        self.adapters.push(adapter);
        self.tags.push(tag);
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Train/val family label sets must be disjoint.
    pub fn split_families_disjoint(&self) -> bool {
        use std::collections::BTreeSet;
        let train: BTreeSet<_> = self
            .tags
            .iter()
            .filter(|t| t.split == Split::Train)
            .map(|t| t.family.clone())
            .collect();
        let val: BTreeSet<_> = self
            .tags
            .iter()
            .filter(|t| t.split == Split::Val)
            .map(|t| t.family.clone())
            .collect();
        train.intersection(&val).next().is_none()
    }
}

#[derive(Serialize, Deserialize)]
struct BankAdapterEntry {
    task_id: String,
    file: String,
    prompt_text: String,
    training_steps: usize,
    seed: u64,
    family: String,
    split: Split,
    quality_energy_distance: Option<f64>,
    quality_ok: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    version: u32,
    dtype: String,
    endianness: String,
    rank: usize,
    m: usize,
    n: usize,
    base_fingerprint: String,
    block_order: Vec<(usize, String)>,
    adapters: Vec<BankAdapterEntry>,
}

/// Write `bank_manifest.json` + `adapters/<task_id>.bin`. Blob layout: per
/// block in manifest order, B row-major then A row-major, little-endian f32.
pub fn save_bank(bank: &LoraBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("adapters"))?;
    let (m, n) = match bank.adapters.first() {
        Some(a) => (a.factors[0].0.nrows(), a.factors[0].1.ncols()),
        None => (0, 0),
    };
    let mut entries = Vec::with_capacity(bank.adapters.len());
    for (adapter, tag) in bank.adapters.iter().zip(&bank.tags) {
        let file = format!("adapters/{}.bin", adapter.meta.task_id);
        fs::write(dir.join(&file), adapter.payload())?;
        entries.push(BankAdapterEntry {
            task_id: adapter.meta.task_id.clone(),
            file,
            prompt_text: adapter.meta.prompt_text.clone(),
            training_steps: adapter.meta.training_steps,
            seed: adapter.meta.seed,
            family: tag.family.clone(),
            split: tag.split,
            quality_energy_distance: tag.quality_energy_distance,
            quality_ok: tag.quality_ok,
        });
    }
    let manifest = BankManifest {
        version: 1,
        dtype: "f32".into(),
        endianness: "little".into(),
        rank: bank.rank,
        m,
        n,
        base_fingerprint: bank.base_fingerprint.clone(),
        block_order: bank
            .block_order
            .iter()
            .map(|&(d, bt)| (d, bt.as_str().to_string()))
            .collect(),
        adapters: entries,
    };
    fs::write(
        dir.join(BANK_MANIFEST),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a bank. When `base` is given, a fingerprint mismatch is reported as
/// a warning on the returned bank rather than an error.
pub fn load_bank(dir: &Path, base: Option<&BaseModel>) -> Result<LoraBank> {
    let manifest_path = dir.join(BANK_MANIFEST);
    if !manifest_path.exists() {
        return Err(LofaError::MissingArtifact(format!(
            "{} (no {BANK_MANIFEST})",
            dir.display()
        )));
    }
    let manifest: BankManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let block_order: Vec<BlockKey> = manifest
        .block_order
        .iter()
        .map(|(d, s)| BlockType::from_str(s).map(|bt| (*d, bt)))
        .collect::<Result<_>>()?;
    let mut bank = LoraBank::new(
        manifest.rank,
        manifest.base_fingerprint.clone(),
        block_order.clone(),
    );
    if let Some(base) = base {
        let fp = base.fingerprint();
        if fp != manifest.base_fingerprint {
            bank.compat_warnings.push(format!(
                "bank fingerprint {} does not match provided base {}",
                manifest.base_fingerprint, fp
            ));
        }
    }
    let (m, n, r) = (manifest.m, manifest.n, manifest.rank);
    let per_block = m * r + r * n;
    for entry in &manifest.adapters {
        let bytes = fs::read(dir.join(&entry.file))?;
        let values = le_bytes_to_f32s(&bytes).ok_or_else(|| LofaError::Format {
            what: entry.file.clone(),
            detail: "blob length not a multiple of 4".into(),
        })?;
        if values.len() != per_block * block_order.len() {
            return Err(LofaError::Format {
                what: entry.file.clone(),
                detail: format!(
                    "expected {} f32 values for {} blocks, found {}",
                    per_block * block_order.len(),
                    block_order.len(),
                    values.len()
                ),
            });
        }
        let mut factors = Vec::with_capacity(block_order.len());
        for (i, _) in block_order.iter().enumerate() {
            let off = i * per_block;
            let b = Array2::from_shape_vec((m, r), values[off..off + m * r].to_vec())
                .expect("checked length");
            let a = Array2::from_shape_vec(
                (r, n),
                values[off + m * r..off + per_block].to_vec(),
            )
            .expect("checked length");
            factors.push((b, a));
        }
        let adapter = LoraAdapter {
            rank: r,
            block_order: block_order.clone(),
            factors,
            meta: AdapterMeta {
                task_id: entry.task_id.clone(),
                prompt_text: entry.prompt_text.clone(),
                training_steps: entry.training_steps,
                seed: entry.seed,
                base_fingerprint: manifest.base_fingerprint.clone(),
            },
        };
        bank.adapters.push(adapter);
        bank.tags.push(BankTag {
            task_id: entry.task_id.clone(),
            family: entry.family.clone(),
            split: entry.split,
            quality_energy_distance: entry.quality_energy_distance,
            quality_ok: entry.quality_ok,
        });
    }
    Ok(bank)
}

/// Standalone single-adapter files: `<path>` holds the blob, `<path>.json`
/// the metadata needed to reconstruct it.
pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, adapter.payload())?;
    let (m, n) = (adapter.factors[0].0.nrows(), adapter.factors[0].1.ncols());
    let sidecar = serde_json::json!({
        "rank": adapter.rank,
        "m": m,
        "n": n,
        "block_order": adapter
            .block_order
            .iter()
            .map(|&(d, bt)| (d, bt.as_str()))
            .collect::<Vec<_>>(),
        "meta": adapter.meta,
    });
    fs::write(
        path.with_extension(format!(
            "{}.json",
            path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
        )),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let sidecar_path = path.with_extension(format!(
        "{}.json",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    if !path.exists() || !sidecar_path.exists() {
        return Err(LofaError::MissingArtifact(format!(
            "adapter {} (+ sidecar json)",
            path.display()
        )));
    }
    let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(&sidecar_path)?)?;
    let rank = sidecar["rank"].as_u64().unwrap_or(0) as usize;
    let m = sidecar["m"].as_u64().unwrap_or(0) as usize;
    let n = sidecar["n"].as_u64().unwrap_or(0) as usize;
    let meta: AdapterMeta = serde_json::from_value(sidecar["meta"].clone())?;
    let block_order: Vec<BlockKey> = sidecar["block_order"]
        .as_array()
        .ok_or_else(|| LofaError::Format {
            what: sidecar_path.display().to_string(),
            detail: "block_order missing".into(),
        })?
        .iter()
        .map(|v| {
            let d = v[0].as_u64().unwrap_or(0) as usize;
            BlockType::from_str(v[1].as_str().unwrap_or("?")).map(|bt| (d, bt))
        })
        .collect::<Result<_>>()?;
    let values = le_bytes_to_f32s(&fs::read(path)?).ok_or_else(|| LofaError::Format {
        what: path.display().to_string(),
        detail: "blob length not a multiple of 4".into(),
    })?;
    let per_block = m * rank + rank * n;
    if values.len() != per_block * block_order.len() {
        return Err(LofaError::Format {
            what: path.display().to_string(),
            detail: format!(
                "expected {} values, found {}",
                per_block * block_order.len(),
                values.len()
            ),
        });
    }
    let mut factors = Vec::with_capacity(block_order.len());
    for i in 0..block_order.len() {
        let off = i * per_block;
        let b = Array2::from_shape_vec((m, rank), values[off..off + m * rank].to_vec())
            .expect("checked length");
        let a = Array2::from_shape_vec((rank, n), values[off + m * rank..off + per_block].to_vec())
            .expect("checked length");
        factors.push((b, a));
    }
    Ok(LoraAdapter {
        rank,
        block_order,
        factors,
        meta,
    })
}

/// Raw bank-blob bytes for one adapter, exposed for format tests.
pub fn bank_blob_bytes(adapter: &LoraAdapter) -> Vec<u8> {
    adapter.payload()
}
