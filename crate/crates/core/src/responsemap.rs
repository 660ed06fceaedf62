//! Relative-change ratio maps and their binary response masks.
//!
//! For every weight entry, m_i = |Δw_i| / max(|w_i|, guard); thresholding at
//! τ (strictly greater, default 0.02) gives the binary response map R. Masks
//! are kept per (depth, block_type) block.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LofaError, Result};
use crate::lorakit::{DenseAdapter, LoraAdapter};
use crate::toybase::{standard_normal, BaseModel, BlockKey, DeltaSource};

pub const DEFAULT_GUARD_EPSILON: f32 = 1e-8;
pub const DEFAULT_TAU: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct MagnitudeMap {
    pub values: BTreeMap<BlockKey, Array2<f32>>,
    pub guard_epsilon: f32,
}

#[derive(Debug, Clone)]
pub struct ResponseMap {
    pub masks: BTreeMap<BlockKey, Array2<u8>>,
    pub threshold: f32,
}

/// Elementwise |Δw| / max(|w|, guard) per block. A near-zero base weight
/// clamps the denominator, so adapting it registers as maximally significant.
pub fn magnitude_map(
    base: &BaseModel,
    adapter: &dyn DeltaSource,
    guard_epsilon: f32,
) -> Result<MagnitudeMap> {
    if guard_epsilon <= 0.0 {
        return Err(LofaError::Argument("guard_epsilon must be > 0".into()));
    }
    let mut values = BTreeMap::new();
    for block in &base.blocks {
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
        let mut m = Array2::zeros(delta.dim());
        ndarray::Zip::from(&mut m)
            .and(&delta)
            .and(&block.matrix)
            .for_each(|out, &dw, &w| {
                *out = dw.abs() / w.abs().max(guard_epsilon);
            });
        values.insert((block.depth, block.block_type), m);
    }
    Ok(MagnitudeMap {
        values,
        guard_epsilon,
    })
}

/// Strict-greater-than thresholding; ties (m_i == τ) go to 0.
pub fn binarize(mmap: &MagnitudeMap, tau: f32) -> Result<ResponseMap> {
    if tau <= 0.0 {
        return Err(LofaError::Argument(format!("threshold {tau} must be > 0")));
    }
    let masks = mmap
        .values
        .iter()
        .map(|(k, m)| (*k, m.mapv(|v| u8::from(v > tau))))
        .collect();
    Ok(ResponseMap {
        masks,
        threshold: tau,
    })
}

/// Per-block fraction of entries with m_i <= τ (the sub-threshold share).
pub fn sparsity_stats(mmap: &MagnitudeMap, tau: f32) -> BTreeMap<BlockKey, f64> {
    mmap.values
        .iter()
        .map(|(k, m)| {
            let below = m.iter().filter(|&&v| v <= tau).count();
            (*k, below as f64 / m.len() as f64)
        })
        .collect()
}

impl ResponseMap {
    /// Fraction of 1-entries over all blocks.
    pub fn density(&self) -> f64 {
        let mut ones = 0usize;
        let mut total = 0usize;
        for m in self.masks.values() {
            ones += m.iter().filter(|&&v| v == 1).count();
            total += m.len();
        }
        if total == 0 {
            0.0
        } else {
            ones as f64 / total as f64
        }
    }

    pub fn count_ones(&self) -> usize {
        self.masks
            .values()
            .map(|m| m.iter().filter(|&&v| v == 1).count())
            .sum()
    }
}

/// Cosine similarity between two flattened binary masks over all blocks.
/// Two empty masks compare as 1.0; one empty mask against a non-empty one
/// is 0.0.
pub fn mask_cosine(r1: &ResponseMap, r2: &ResponseMap) -> Result<f64> {
    if r1.masks.len() != r2.masks.len() {
        return Err(LofaError::Argument(format!(
            "mask block counts differ: {} vs {}",
            r1.masks.len(),
            r2.masks.len()
        )));
    }
    let mut dot = 0u64;
    let mut n1 = 0u64;
    let mut n2 = 0u64;
    for ((k1, m1), (k2, m2)) in r1.masks.iter().zip(r2.masks.iter()) {
        if k1 != k2 || m1.dim() != m2.dim() {
            return Err(LofaError::Argument(format!(
                "mask blocks mismatch at {k1:?} vs {k2:?}"
            )));
        }
        for (a, b) in m1.iter().zip(m2.iter()) {
            dot += (*a as u64) * (*b as u64);
            n1 += (*a as u64) * (*a as u64);
            n2 += (*b as u64) * (*b as u64);
        }
    }
    if n1 == 0 && n2 == 0 {
        return Ok(1.0);
    }
    if n1 == 0 || n2 == 0 {
        return Ok(0.0);
    }
    Ok(dot as f64 / ((n1 as f64).sqrt() * (n2 as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    Zero,
    Noise,
}

/// Perturb only the sub-threshold (r_i = 0) entries of ΔW: zero them or add
/// N(0, σ²) noise. The result is generally not rank-r anymore, so it comes
/// back as a dense-delta adapter.
pub fn perturb_masked(
    lora: &LoraAdapter,
    rmap: &ResponseMap,
    mode: PerturbMode,
    sigma: f32,
    seed: u64,
) -> Result<DenseAdapter> {
    if sigma < 0.0 {
        return Err(LofaError::Argument(format!("sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(lora.block_order.len());
    for &(depth, bt) in &lora.block_order {
        let dw = lora.delta(depth, bt)?;
        let mask = rmap
            .masks
            .get(&(depth, bt))
            .ok_or(LofaError::MissingBlock {
                depth,
                block_type: bt,
            })?;
        if mask.dim() != dw.dim() {
            return Err(LofaError::Shape {
                depth,
                block_type: bt,
                expected: format!("{:?}", dw.dim()),
                got: format!("{:?}", mask.dim()),
            });
        }
        let mut out = dw.clone();
        ndarray::Zip::from(&mut out).and(mask).for_each(|d, &m| {
            if m == 0 {
                match mode {
                    PerturbMode::Zero => *d = 0.0,
                    PerturbMode::Noise => *d += sigma * standard_normal(&mut rng),
                }
            }
        });
        deltas.push(out);
    }
    Ok(DenseAdapter {
        block_order: lora.block_order.clone(),
        deltas,
        meta: lora.meta.clone(),
    })
}

/// Complement experiment: perturb the ABOVE-threshold (r_i = 1) entries
/// instead. Used as the control in the perturbation study.
pub fn perturb_unmasked(
    lora: &LoraAdapter,
    rmap: &ResponseMap,
    mode: PerturbMode,
    sigma: f32,
    seed: u64,
) -> Result<DenseAdapter> {
    let inverted = ResponseMap {
        masks: rmap
            .masks
            .iter()
            .map(|(k, m)| (*k, m.mapv(|v| 1 - v)))
            .collect(),
        threshold: rmap.threshold,
    };
    perturb_masked(lora, &inverted, mode, sigma, seed)
}

/// One grayscale image per response map: blocks tiled in a depth x type
/// grid with no separators (m*L rows, n*4 cols); 1 -> white, 0 -> black.
pub fn render_response_map(rmap: &ResponseMap) -> Result<image::GrayImage> {
    let keys: Vec<BlockKey> = rmap.masks.keys().copied().collect();
    if keys.is_empty() {
        return Err(LofaError::Argument("empty response map".into()));
    }
    let depths = keys.iter().map(|k| k.0).max().unwrap() + 1;
    let (m, n) = rmap.masks[&keys[0]].dim();
    let mut img = image::GrayImage::new((n * 4) as u32, (m * depths) as u32);
    for (&(depth, bt), mask) in &rmap.masks {
        let oy = depth * m;
        let ox = bt.index() * n;
        for r in 0..m {
            for c in 0..n {
                let v = if mask[[r, c]] == 1 { 255u8 } else { 0u8 };
                img.put_pixel((ox + c) as u32, (oy + r) as u32, image::Luma([v]));
            }
        }
    }
    Ok(img)
}

/// Render one PNG per response map under `dir`, named `<task_id>.png`.
/// Also writes `responses.json` metadata plus one raw u8 mask blob per map.
pub fn export_response_maps(
    rmaps: &[(String, ResponseMap)],
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut meta = Vec::new();
    for (task_id, rmap) in rmaps {
        let img = render_response_map(rmap)?;
        let png_path = dir.join(format!("{task_id}.png"));
        img.save(&png_path).map_err(|e| LofaError::Format {
            what: png_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let blob_path = dir.join(format!("{task_id}.mask.bin"));
        let mut blob = Vec::new();
        for mask in rmap.masks.values() {
            blob.extend(mask.iter().copied());
        }
        std::fs::write(&blob_path, &blob)?;
        meta.push(serde_json::json!({
            "task_id": task_id,
            "threshold": rmap.threshold,
            "png": png_path.file_name().unwrap().to_string_lossy(),
            "mask_blob": blob_path.file_name().unwrap().to_string_lossy(),
            "blocks": rmap.masks.iter().map(|(&(d, bt), m)| serde_json::json!({
                "depth": d,
                "block_type": bt.as_str(),
                "shape": [m.nrows(), m.ncols()],
                "density": m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64,
            })).collect::<Vec<_>>(),
        }));
        written.push(png_path);
        written.push(blob_path);
    }
    let meta_path = dir.join("responses.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
    written.push(meta_path);
    Ok(written)
}
