//! Training for both hypernetwork stages.
//!
//! Stage-I regresses binary response maps with BCE; Stage-II regresses the
//! LoRA factors with an L1 reconstruction term plus the flow-matching loss of
//! the base model with the predicted adapter injected. AdamW with linear
//! warmup drives both stages; everything is seed-deterministic.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LofaError, Result};
use crate::graph::{Graph, Var};
use crate::hypernet::{encode_condition, Condition, StageOneNet, StageTwoNet};
use crate::lorakit::{LoraAdapter, LoraBank};
use crate::optim::{AdamConfig, AdamW};
use crate::responsemap::{binarize, magnitude_map, DEFAULT_GUARD_EPSILON};
use crate::toybase::{AdapterVars, BaseModel, BaseVars, FlowBatchSource, FlowSample};

pub const PROB_CLAMP: f32 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f32,
    pub stage2_steps: usize,
    pub stage2_lr: f32,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lambda_recon: f32,
    pub lambda_diff: f32,
    pub weight_decay: f32,
    /// Response-map threshold for Stage-I targets.
    pub tau: f32,
    pub seed: u64,
    /// Multiplies every step count (incl. warmup) for quick runs.
    pub desk_scale_factor: f64,
    /// Reproduce the literal one-sided -R log R̂ for comparison runs.
    pub stage1_one_sided: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 4000,
            stage1_lr: 1e-4,
            stage2_steps: 7000,
            stage2_lr: 4e-5,
            warmup_steps: 1000,
            batch_size: 4,
            lambda_recon: 5.0,
            lambda_diff: 1.0,
            weight_decay: 0.01,
            tau: 0.02,
            seed: 0,
            desk_scale_factor: 0.25,
            stage1_one_sided: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0
            || self.stage2_steps == 0
            || self.batch_size == 0
            || self.stage1_lr <= 0.0
            || self.stage2_lr <= 0.0
            || self.desk_scale_factor <= 0.0
            || self.tau <= 0.0
        {
            return Err(LofaError::Config(
                "train config fields must be positive".into(),
            ));
        }
        Ok(())
    }

    fn scale(&self, steps: usize) -> usize {
        ((steps as f64 * self.desk_scale_factor).round() as usize).max(1)
    }

    pub fn scaled_stage1_steps(&self) -> usize {
        self.scale(self.stage1_steps)
    }

    pub fn scaled_stage2_steps(&self) -> usize {
        self.scale(self.stage2_steps)
    }

    pub fn scaled_warmup_steps(&self) -> usize {
        if self.warmup_steps == 0 {
            0
        } else {
            self.scale(self.warmup_steps)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub l_recon: Option<f32>,
    pub l_diff: Option<f32>,
}

#[derive(Debug, Default)]
pub struct StageHistory {
    pub rows: Vec<HistoryRow>,
    pub warnings: Vec<String>,
}

impl StageHistory {
    pub fn final_loss(&self) -> Option<f32> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn min_loss(&self) -> Option<f32> {
        self.rows
            .iter()
            .map(|r| r.loss)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    /// metrics.csv: step, lr, loss, l_recon, l_diff.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,lr,loss,l_recon,l_diff")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss,
                r.l_recon.map(|v| v.to_string()).unwrap_or_default(),
                r.l_diff.map(|v| v.to_string()).unwrap_or_default(),
            )?;
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with probabilities clamped at `PROB_CLAMP`.
/// `one_sided` drops the (1-R) term.
pub fn stage1_loss(rhat: &Array2<f32>, r: &Array2<u8>, one_sided: bool) -> Result<f32> {
    if rhat.dim() != r.dim() {
        return Err(LofaError::Argument(format!(
            "stage1_loss shapes differ: {:?} vs {:?}",
            rhat.dim(),
            r.dim()
        )));
    }
    let mut acc = 0.0f64;
    for (p, &t) in rhat.iter().zip(r.iter()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let t = t as f32;
        let term = if one_sided {
            -t * p.ln()
        } else {
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        };
        acc += term as f64;
    }
    Ok((acc / rhat.len() as f64) as f32)
}

/// Taped BCE matching `stage1_loss`.
pub fn stage1_loss_taped(g: &mut Graph, rhat: Var, r: &Array2<u8>, one_sided: bool) -> Var {
    let target = g.constant(r.mapv(|v| v as f32));
    let ones = g.constant(Array2::ones(r.dim()));
    let p = g.clamp(rhat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let pos = g.mul(target, log_p);
    let summed = if one_sided {
        pos
    } else {
        let one_minus_p = g.sub(ones, p);
        let log_q = g.log(one_minus_p);
        let one_minus_t = g.sub(ones, target);
        let neg = g.mul(one_minus_t, log_q);
        g.add(pos, neg)
    };
    let mean = g.mean_all(summed);
    g.scale(mean, -1.0)
}

/// Response-map targets and encoded conditions for every bank adapter.
pub struct Stage1Data {
    pub conditions: Vec<Condition>,
    /// masks[adapter][block-in-bank-order]
    pub masks: Vec<Vec<Array2<u8>>>,
}

pub fn prepare_stage1_data(
    bank: &LoraBank,
    base: &BaseModel,
    net: &StageOneNet,
    tau: f32,
) -> Result<Stage1Data> {
    let mut conditions = Vec::with_capacity(bank.adapters.len());
    let mut masks = Vec::with_capacity(bank.adapters.len());
    for adapter in &bank.adapters {
        conditions.push(encode_condition(
            &adapter.meta.prompt_text,
            &net.backbone.vocab,
            net.backbone.cfg.max_cond_len,
        ));
        let mmap = magnitude_map(base, adapter, DEFAULT_GUARD_EPSILON)?;
        let rmap = binarize(&mmap, tau)?;
        masks.push(
            bank.block_order
                .iter()
                .map(|k| rmap.masks[k].clone())
                .collect(),
        );
    }
    Ok(Stage1Data { conditions, masks })
}

/// Train Stage-I on (block, condition, R) samples drawn uniformly over
/// (adapter x block).
pub fn train_stage1(
    net: &mut StageOneNet,
    bank: &LoraBank,
    base: &BaseModel,
    cfg: &TrainConfig,
) -> Result<StageHistory> {
    cfg.validate()?;
    if bank.adapters.is_empty() {
        return Err(LofaError::Argument("stage-1 training on empty bank".into()));
    }
    let data = prepare_stage1_data(bank, base, net, cfg.tau)?;
    let steps = cfg.scaled_stage1_steps();
    let warmup = cfg.scaled_warmup_steps();
    let shapes: Vec<(usize, usize)> = net.named_params().iter().map(|(_, m)| m.dim()).collect();
    let mut opt = AdamW::new(
        AdamConfig::with_warmup(cfg.stage1_lr, warmup, cfg.weight_decay),
        &shapes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_blocks = bank.block_order.len();
    let mut history = StageHistory::default();
    for step in 0..steps {
        let lr = opt.current_lr();
        let mut g = Graph::new();
        let vars = net.vars(&mut g);
        let mut per_sample = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ai = rng.gen_range(0..bank.adapters.len());
            let bi = rng.gen_range(0..n_blocks);
            let (depth, bt) = bank.block_order[bi];
            let block = base.block(depth, bt);
            let (rhat, _f1) = net.forward_taped(&mut g, &vars, block, &data.conditions[ai])?;
            per_sample.push(stage1_loss_taped(
                &mut g,
                rhat,
                &data.masks[ai][bi],
                cfg.stage1_one_sided,
            ));
        }
        let mut loss = per_sample[0];
        for s in &per_sample[1..] {
            loss = g.add(loss, *s);
        }
        let loss = g.scale(loss, 1.0 / cfg.batch_size as f32);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(LofaError::Numerical(format!(
                "stage-1 loss {loss_val} at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let var_list = StageOneNet::var_list(&vars);
        let grad_arrays: Vec<Array2<f32>> = var_list
            .iter()
            .zip(net.named_params())
            .map(|(v, (_, p))| grads.get(*v, p))
            .collect();
        opt.step(&mut net.params_mut(), &grad_arrays);
        history.rows.push(HistoryRow {
            step,
            lr,
            loss: loss_val,
            l_recon: None,
            l_diff: None,
        });
    }
    net.trained_steps += steps;
    Ok(history)
}

/// Plain Stage-II loss over one adapter. `block_batch` indexes the blocks
/// contributing to L_recon; L_diff injects the full predicted adapter.
pub fn stage2_loss(
    pred: &LoraAdapter,
    gt: &LoraAdapter,
    base: &BaseModel,
    block_batch: &[usize],
    task_batch: &[FlowSample],
    lambda_recon: f32,
    lambda_diff: f32,
) -> Result<(f32, f32, f32)> {
    if block_batch.is_empty() {
        return Err(LofaError::Argument("empty block batch".into()));
    }
    let mut l_recon = 0.0f32;
    for &bi in block_batch {
        let (pb, pa) = &pred.factors[bi];
        let (gb, ga) = &gt.factors[bi];
        if pb.dim() != gb.dim() || pa.dim() != ga.dim() {
            return Err(LofaError::Argument(format!(
                "factor shapes differ at block {bi}"
            )));
        }
        let mb = (pb - gb).mapv(f32::abs).mean().unwrap();
        let ma = (pa - ga).mapv(f32::abs).mean().unwrap();
        l_recon += mb + ma;
    }
    l_recon /= block_batch.len() as f32;
    let l_diff = base.fm_loss(task_batch, Some(pred))?;
    Ok((
        lambda_recon * l_recon + lambda_diff * l_diff,
        l_recon,
        l_diff,
    ))
}

/// Taped Stage-II loss builder shared by training and gradient checks.
/// `pred_vars` must cover every block; gradients flow through all factors via
/// L_diff and through `block_batch` via L_recon.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_taped(
    g: &mut Graph,
    base: &BaseModel,
    base_vars: &BaseVars,
    pred_vars: &AdapterVars,
    gt: &LoraAdapter,
    block_batch: &[usize],
    task_batch: &[FlowSample],
    lambda_recon: f32,
    lambda_diff: f32,
) -> (Var, Var, Var) {
    assert!(!block_batch.is_empty());
    let mut recon_terms = Vec::with_capacity(block_batch.len());
    for &bi in block_batch {
        let (vb, va) = pred_vars.factors[bi];
        let (gb, ga) = &gt.factors[bi];
        let cb = g.constant(gb.clone());
        let ca = g.constant(ga.clone());
        let mb = g.mae(vb, cb);
        let ma = g.mae(va, ca);
        recon_terms.push(g.add(mb, ma));
    }
    let mut l_recon = recon_terms[0];
    for t in &recon_terms[1..] {
        l_recon = g.add(l_recon, *t);
    }
    let l_recon = g.scale(l_recon, 1.0 / block_batch.len() as f32);
    let l_diff = base.fm_loss_taped(g, base_vars, task_batch, Some(pred_vars));
    let recon_w = g.scale(l_recon, lambda_recon);
    let diff_w = g.scale(l_diff, lambda_diff);
    let total = g.add(recon_w, diff_w);
    (total, l_recon, l_diff)
}

/// Feature provider for Stage-II training: per (adapter, block-in-bank-order)
/// guidance features plus encoded conditions.
pub struct Stage2Data {
    pub conditions: Vec<Condition>,
    pub features: Vec<Vec<Array2<f32>>>,
}

impl Stage2Data {
    /// Dummy single-row zero features for nets without feature attention
    /// (the single-stage ablation).
    pub fn with_zero_features(bank: &LoraBank, s2: &StageTwoNet) -> Result<Self> {
        let d = s2.backbone.cfg.d_h;
        let conditions = bank
            .adapters
            .iter()
            .map(|a| {
                encode_condition(
                    &a.meta.prompt_text,
                    &s2.backbone.vocab,
                    s2.backbone.cfg.max_cond_len,
                )
            })
            .collect();
        let features = bank
            .adapters
            .iter()
            .map(|_| {
                bank.block_order
                    .iter()
                    .map(|_| Array2::zeros((1, d)))
                    .collect()
            })
            .collect();
        Ok(Self {
            conditions,
            features,
        })
    }

    /// Guidance features from a lightweight first-stage LoRA predictor.
    pub fn from_light(bank: &LoraBank, base: &BaseModel, light: &StageTwoNet) -> Result<Self> {
        let d = light.backbone.cfg.d_h;
        let zeros = Array2::zeros((1, d));
        let mut conditions = Vec::with_capacity(bank.adapters.len());
        let mut features = Vec::with_capacity(bank.adapters.len());
        for adapter in &bank.adapters {
            let cond = encode_condition(
                &adapter.meta.prompt_text,
                &light.backbone.vocab,
                light.backbone.cfg.max_cond_len,
            );
            let mut per_block = Vec::with_capacity(bank.block_order.len());
            for &(depth, bt) in &bank.block_order {
                let block = base.block(depth, bt);
                per_block.push(light.backbone_features(block, &cond, &zeros)?);
            }
            conditions.push(cond);
            features.push(per_block);
        }
        Ok(Self {
            conditions,
            features,
        })
    }
}

pub fn prepare_stage2_data(
    bank: &LoraBank,
    base: &BaseModel,
    s1: &StageOneNet,
) -> Result<Stage2Data> {
    let mut conditions = Vec::with_capacity(bank.adapters.len());
    let mut features = Vec::with_capacity(bank.adapters.len());
    for adapter in &bank.adapters {
        let cond = encode_condition(
            &adapter.meta.prompt_text,
            &s1.backbone.vocab,
            s1.backbone.cfg.max_cond_len,
        );
        let mut per_block = Vec::with_capacity(bank.block_order.len());
        for &(depth, bt) in &bank.block_order {
            let block = base.block(depth, bt);
            let (_r, f1) = s1.forward(block, &cond)?;
            per_block.push(f1);
        }
        conditions.push(cond);
        features.push(per_block);
    }
    Ok(Stage2Data {
        conditions,
        features,
    })
}

/// Train Stage-II against a frozen Stage-I. Each step samples one adapter,
/// predicts all of its blocks (the full adapter feeds L_diff), scores
/// L_recon on a sampled block batch, and updates Stage-II only.
pub fn train_stage2(
    s2: &mut StageTwoNet,
    s1_frozen: &StageOneNet,
    bank: &LoraBank,
    base: &BaseModel,
    cfg: &TrainConfig,
    task_data: &HashMap<String, &dyn FlowBatchSource>,
) -> Result<StageHistory> {
    cfg.validate()?;
    let s1_fingerprint_before = s1_frozen.fingerprint();
    let data = prepare_stage2_data_checked(bank, base, s1_frozen)?;
    let mut history = train_stage2_core(
        s2,
        &data,
        bank,
        base,
        cfg,
        cfg.scaled_stage2_steps(),
        task_data,
    )?;
    if s1_frozen.trained_steps == 0 {
        history
            .warnings
            .push("stage-1 net has no training metadata; features may be uninformative".into());
    }
    debug_assert_eq!(
        s1_frozen.fingerprint(),
        s1_fingerprint_before,
        "stage-2 training must not touch stage-1"
    );
    Ok(history)
}

fn prepare_stage2_data_checked(
    bank: &LoraBank,
    base: &BaseModel,
    s1: &StageOneNet,
) -> Result<Stage2Data> {
    if bank.adapters.is_empty() {
        return Err(LofaError::Argument("stage-2 training on empty bank".into()));
    }
    prepare_stage2_data(bank, base, s1)
}

/// Budget-explicit Stage-II training loop shared by the spec path and the
/// ablation variants (which pass different feature providers and step
/// counts).
pub fn train_stage2_core(
    s2: &mut StageTwoNet,
    data: &Stage2Data,
    bank: &LoraBank,
    base: &BaseModel,
    cfg: &TrainConfig,
    steps: usize,
    task_data: &HashMap<String, &dyn FlowBatchSource>,
) -> Result<StageHistory> {
    cfg.validate()?;
    if bank.adapters.is_empty() {
        return Err(LofaError::Argument("stage-2 training on empty bank".into()));
    }
    for adapter in &bank.adapters {
        if !task_data.contains_key(&adapter.meta.task_id) {
            return Err(LofaError::Config(format!(
                "no task data for adapter {}",
                adapter.meta.task_id
            )));
        }
    }
    let mut history = StageHistory::default();
    let warmup = cfg.scaled_warmup_steps();
    let shapes: Vec<(usize, usize)> = s2.named_params().iter().map(|(_, m)| m.dim()).collect();
    let mut opt = AdamW::new(
        AdamConfig::with_warmup(cfg.stage2_lr, warmup, cfg.weight_decay),
        &shapes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let n_blocks = bank.block_order.len();
    for step in 0..steps {
        let lr = opt.current_lr();
        let ai = rng.gen_range(0..bank.adapters.len());
        let adapter = &bank.adapters[ai];
        let block_batch = sample_distinct(&mut rng, n_blocks, cfg.batch_size);
        let task = task_data[&adapter.meta.task_id];
        let task_batch = task.batch(cfg.batch_size, &mut rng);

        let mut g = Graph::new();
        let vars = s2.vars(&mut g);
        let base_vars = base_constant_vars(base, &mut g);
        let mut factors = Vec::with_capacity(n_blocks);
        for bi in 0..n_blocks {
            let (depth, bt) = bank.block_order[bi];
            let block = base.block(depth, bt);
            let (bh, ah) = s2.forward_taped(
                &mut g,
                &vars,
                block,
                &data.conditions[ai],
                &data.features[ai][bi],
            )?;
            factors.push((bh, ah));
        }
        let pred_vars = AdapterVars { factors };
        let (total, l_recon, l_diff) = stage2_loss_taped(
            &mut g,
            base,
            &base_vars,
            &pred_vars,
            adapter,
            &block_batch,
            &task_batch,
            cfg.lambda_recon,
            cfg.lambda_diff,
        );
        let total_val = g.scalar_value(total);
        let recon_val = g.scalar_value(l_recon);
        let diff_val = g.scalar_value(l_diff);
        if !total_val.is_finite() {
            return Err(LofaError::Numerical(format!(
                "stage-2 loss {total_val} at step {step}"
            )));
        }
        let grads = g.backward(total);
        let var_list = StageTwoNet::var_list(&vars);
        let grad_arrays: Vec<Array2<f32>> = var_list
            .iter()
            .zip(s2.named_params())
            .map(|(v, (_, p))| grads.get(*v, p))
            .collect();
        opt.step(&mut s2.params_mut(), &grad_arrays);
        history.rows.push(HistoryRow {
            step,
            lr,
            loss: total_val,
            l_recon: Some(recon_val),
            l_diff: Some(diff_val),
        });
    }
    s2.trained_steps += steps;
    Ok(history)
}

/// Base parameters as constants: gradients may reach them on the tape but are
/// never applied — the base stays frozen during hypernet training.
pub fn base_constant_vars(base: &BaseModel, g: &mut Graph) -> BaseVars {
    base.vars(g)
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    // partial Fisher-Yates over index list
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
