//! Evaluation harness: generation quality via energy distance,
//! response-alignment analysis, the four method variants (full, single-stage,
//! lightweight first stage, prompt-as-input), threshold and injection-layer
//! sweeps, the masked-parameter perturbation study, and the data-scaling
//! curve.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LofaError, Result};
use crate::hypernet::{
    binarize_rhat, encode_condition, predict_lora, HyperConfig, InputMode, StageOneNet,
    StageTwoNet, Vocab,
};
use crate::lorakit::{LoraAdapter, LoraBank, Split};
use crate::plot::{line_plot, Series};
use crate::responsemap::{
    binarize, magnitude_map, mask_cosine, perturb_masked, perturb_unmasked, PerturbMode,
    ResponseMap, DEFAULT_GUARD_EPSILON,
};
use crate::taskgen::TaskSpec;
use crate::toybase::{BaseModel, DeltaSource, FlowBatchSource};
use crate::trainer::{
    prepare_stage2_data, train_stage1, train_stage2_core, Stage2Data, TrainConfig,
};
use crate::util::{derive_seed, fnv1a};

/// Energy distance between two point sets:
/// E(X, Y) = 2 E||x - y|| - E||x - x'|| - E||y - y'||, all ordered pairs.
pub fn energy_distance(xs: &[[f32; 2]], ys: &[[f32; 2]]) -> Result<f64> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(LofaError::Argument(format!(
            "energy_distance needs >= 2 points per set, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let cross = mean_pair_distance(xs, ys);
    let within_x = mean_pair_distance(xs, xs);
    let within_y = mean_pair_distance(ys, ys);
    Ok(2.0 * cross - within_x - within_y)
}

fn mean_pair_distance(a: &[[f32; 2]], b: &[[f32; 2]]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|p| {
            let mut acc = 0.0f64;
            for q in b {
                let dx = (p[0] - q[0]) as f64;
                let dy = (p[1] - q[1]) as f64;
                acc += (dx * dx + dy * dy).sqrt();
            }
            acc
        })
        .sum();
    total / (a.len() * b.len()) as f64
}

/// Generation quality of an adapter on its task: energy distance between
/// model samples (adapter injected) and a fresh target sample.
pub fn eval_generation(
    base: &BaseModel,
    adapter: &dyn DeltaSource,
    task: &TaskSpec,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let generated = base.sample(n, steps, Some(adapter), seed)?;
    let target = task.target_points(n, derive_seed(seed, "target"));
    energy_distance(&generated, &target)
}

/// The three response-alignment cosines, averaged over validation adapters:
/// (Stage-I R-hat vs GT R), (predicted-LoRA R vs Stage-I R-hat),
/// (predicted-LoRA R vs GT R).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlignmentCosines {
    pub s1_vs_gt: f64,
    pub pred_vs_s1: f64,
    pub pred_vs_gt: f64,
}

pub fn eval_response_alignment(
    s1: &StageOneNet,
    s2: &StageTwoNet,
    bank: &LoraBank,
    val_indices: &[usize],
    base: &BaseModel,
    tau: f32,
) -> Result<AlignmentCosines> {
    if val_indices.is_empty() {
        return Err(LofaError::Argument("no validation adapters".into()));
    }
    let mut sums = [0.0f64; 3];
    for &ai in val_indices {
        let adapter = &bank.adapters[ai];
        let gt_map = binarize(&magnitude_map(base, adapter, DEFAULT_GUARD_EPSILON)?, tau)?;
        let cond = encode_condition(
            &adapter.meta.prompt_text,
            &s1.backbone.vocab,
            s1.backbone.cfg.max_cond_len,
        );
        let mut s1_masks = std::collections::BTreeMap::new();
        for &(depth, bt) in &bank.block_order {
            let block = base.block(depth, bt);
            let (rhat, _f1) = s1.forward(block, &cond)?;
            s1_masks.insert((depth, bt), binarize_rhat(&rhat));
        }
        let s1_map = ResponseMap {
            masks: s1_masks,
            threshold: 0.5,
        };
        let predicted = predict_lora(s1, s2, base, &adapter.meta.prompt_text)?;
        let pred_map = binarize(&magnitude_map(base, &predicted, DEFAULT_GUARD_EPSILON)?, tau)?;
        sums[0] += mask_cosine(&s1_map, &gt_map)?;
        sums[1] += mask_cosine(&pred_map, &s1_map)?;
        sums[2] += mask_cosine(&pred_map, &gt_map)?;
    }
    let k = val_indices.len() as f64;
    Ok(AlignmentCosines {
        s1_vs_gt: sums[0] / k,
        pred_vs_s1: sums[1] / k,
        pred_vs_gt: sums[2] / k,
    })
}

/// Method variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoResponse,
    Lightweight,
    PromptInput,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WoResponse,
        Variant::Lightweight,
        Variant::PromptInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoResponse => "wo_response",
            Variant::Lightweight => "lightweight",
            Variant::PromptInput => "prompt_input",
        }
    }
}

/// Everything the study pipelines need beyond the artifacts themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub train_cfg: TrainConfig,
    pub hyper_cfg: HyperConfig,
    pub feature_layers: Vec<usize>,
    pub rank: usize,
    pub eval_samples: usize,
    pub eval_steps: usize,
    pub taus: Vec<f32>,
    pub injection_settings: Vec<Vec<usize>>,
    pub fractions: Vec<f64>,
    pub sigma_list: Vec<f32>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train_cfg: TrainConfig::default(),
            hyper_cfg: HyperConfig::default(),
            feature_layers: HyperConfig::default_feature_layers(),
            rank: 4,
            eval_samples: 512,
            eval_steps: 50,
            taus: vec![0.01, 0.015, 0.02, 0.025, 0.03],
            injection_settings: vec![
                vec![1, 2],
                vec![2, 4],
                vec![4, 6],
                vec![6, 8],
                vec![4, 8],
            ],
            fractions: vec![0.25, 0.5, 1.0],
            sigma_list: vec![0.0, 0.005, 0.02],
        }
    }
}

impl StudyConfig {
    pub fn config_hash(&self, bank_fingerprint: &str) -> String {
        let blob = serde_json::to_vec(self).expect("config serializes");
        format!(
            "{:016x}",
            fnv1a(&[blob.as_slice(), bank_fingerprint.as_bytes()].concat())
        )
    }
}

/// A trained predictor under one variant: enough state to map a prompt to an
/// adapter.
pub struct TrainedVariant {
    pub variant: Variant,
    pub s1: Option<StageOneNet>,
    pub light: Option<StageTwoNet>,
    pub s2: StageTwoNet,
    pub total_steps: usize,
}

impl TrainedVariant {
    pub fn predict(&self, base: &BaseModel, prompt: &str) -> Result<LoraAdapter> {
        match (&self.s1, &self.light) {
            (Some(s1), _) => predict_lora(s1, &self.s2, base, prompt),
            (None, Some(light)) => predict_with_features(light, &self.s2, base, prompt),
            (None, None) => predict_without_features(&self.s2, base, prompt),
        }
    }
}

fn zero_features(d_h: usize) -> Array2<f32> {
    Array2::zeros((1, d_h))
}

fn predict_without_features(
    s2: &StageTwoNet,
    base: &BaseModel,
    prompt: &str,
) -> Result<LoraAdapter> {
    let cond = encode_condition(prompt, &s2.backbone.vocab, s2.backbone.cfg.max_cond_len);
    let z = zero_features(s2.backbone.cfg.d_h);
    let block_order = base.dims.block_keys();
    let mut factors = Vec::with_capacity(block_order.len());
    for &(depth, bt) in &block_order {
        let block = base.block(depth, bt);
        let (b, a) = s2.forward(block, &cond, &z)?;
        factors.push((b, a));
    }
    Ok(LoraAdapter {
        rank: s2.rank,
        block_order,
        factors,
        meta: crate::lorakit::AdapterMeta {
            task_id: "predicted".into(),
            prompt_text: prompt.to_string(),
            training_steps: 0,
            seed: 0,
            base_fingerprint: base.fingerprint(),
        },
    })
}

fn predict_with_features(
    light: &StageTwoNet,
    s2: &StageTwoNet,
    base: &BaseModel,
    prompt: &str,
) -> Result<LoraAdapter> {
    let cond = encode_condition(prompt, &s2.backbone.vocab, s2.backbone.cfg.max_cond_len);
    let z = zero_features(light.backbone.cfg.d_h);
    let block_order = base.dims.block_keys();
    let mut factors = Vec::with_capacity(block_order.len());
    for &(depth, bt) in &block_order {
        let block = base.block(depth, bt);
        let f1 = light.backbone_features(block, &cond, &z)?;
        let (b, a) = s2.forward(block, &cond, &f1)?;
        factors.push((b, a));
    }
    Ok(LoraAdapter {
        rank: s2.rank,
        block_order,
        factors,
        meta: crate::lorakit::AdapterMeta {
            task_id: "predicted".into(),
            prompt_text: prompt.to_string(),
            training_steps: 0,
            seed: 0,
            base_fingerprint: base.fingerprint(),
        },
    })
}

/// Train one variant on a bank subset with budget parity: every variant
/// consumes exactly stage1_steps + stage2_steps optimizer steps.
pub fn train_variant(
    variant: Variant,
    bank: &LoraBank,
    train_indices: &[usize],
    base: &BaseModel,
    tasks: &[TaskSpec],
    study: &StudyConfig,
    seed: u64,
) -> Result<TrainedVariant> {
    let sub_bank = subset_bank(bank, train_indices);
    let task_map = task_data_map(tasks);
    let mut cfg = study.train_cfg.clone();
    cfg.seed = seed;
    let vocab = vocab_from_bank(bank);
    let s1_steps = cfg.scaled_stage1_steps();
    let s2_steps = cfg.scaled_stage2_steps();
    let dims = base.dims;

    match variant {
        Variant::Full | Variant::PromptInput => {
            let mut hyper = study.hyper_cfg.clone();
            hyper.input_mode = if variant == Variant::PromptInput {
                InputMode::Prompt
            } else {
                InputMode::Weights
            };
            let mut s1 = StageOneNet::new(hyper.clone(), dims, vocab, derive_seed(seed, "s1"))?;
            let h1 = train_stage1(&mut s1, &sub_bank, base, &cfg)?;
            let mut s2 = StageTwoNet::from_stage1(
                &s1,
                &study.feature_layers,
                study.rank,
                derive_seed(seed, "s2"),
            )?;
            let data = prepare_stage2_data(&sub_bank, base, &s1)?;
            let h2 = train_stage2_core(&mut s2, &data, &sub_bank, base, &cfg, s2_steps, &task_map)?;
            Ok(TrainedVariant {
                variant,
                s1: Some(s1),
                light: None,
                s2,
                total_steps: h1.rows.len() + h2.rows.len(),
            })
        }
        Variant::WoResponse => {
            let mut s2 = StageTwoNet::fresh(
                study.hyper_cfg.clone(),
                dims,
                vocab,
                &[],
                study.rank,
                derive_seed(seed, "single"),
            )?;
            let data = Stage2Data::with_zero_features(&sub_bank, &s2)?;
            let h = train_stage2_core(
                &mut s2,
                &data,
                &sub_bank,
                base,
                &cfg,
                s1_steps + s2_steps,
                &task_map,
            )?;
            Ok(TrainedVariant {
                variant,
                s1: None,
                light: None,
                s2,
                total_steps: h.rows.len(),
            })
        }
        Variant::Lightweight => {
            let mut light_cfg = study.hyper_cfg.clone();
            light_cfg.layers = 2;
            let mut light = StageTwoNet::fresh(
                light_cfg,
                dims,
                vocab.clone(),
                &[],
                study.rank,
                derive_seed(seed, "light"),
            )?;
            let data0 = Stage2Data::with_zero_features(&sub_bank, &light)?;
            let h1 =
                train_stage2_core(&mut light, &data0, &sub_bank, base, &cfg, s1_steps, &task_map)?;
            let mut s2 = StageTwoNet::fresh(
                study.hyper_cfg.clone(),
                dims,
                vocab,
                &study.feature_layers,
                study.rank,
                derive_seed(seed, "s2"),
            )?;
            let data = Stage2Data::from_light(&sub_bank, base, &light)?;
            let h2 = train_stage2_core(&mut s2, &data, &sub_bank, base, &cfg, s2_steps, &task_map)?;
            Ok(TrainedVariant {
                variant,
                s1: None,
                light: Some(light),
                s2,
                total_steps: h1.rows.len() + h2.rows.len(),
            })
        }
    }
}

/// Vocabulary from the bank's training-split prompts only; validation words
/// land on UNK, matching the unseen-task protocol.
pub fn vocab_from_bank(bank: &LoraBank) -> Vocab {
    let corpus: Vec<String> = bank
        .adapters
        .iter()
        .zip(&bank.tags)
        .filter(|(_, t)| t.split == Split::Train)
        .map(|(a, _)| a.meta.prompt_text.clone())
        .collect();
    Vocab::build(&corpus)
}

pub fn subset_bank(bank: &LoraBank, indices: &[usize]) -> LoraBank {
    LoraBank {
        rank: bank.rank,
        base_fingerprint: bank.base_fingerprint.clone(),
        block_order: bank.block_order.clone(),
        adapters: indices.iter().map(|&i| bank.adapters[i].clone()).collect(),
        tags: indices.iter().map(|&i| bank.tags[i].clone()).collect(),
        compat_warnings: Vec::new(),
    }
}

pub fn task_data_map(tasks: &[TaskSpec]) -> HashMap<String, &dyn FlowBatchSource> {
    tasks
        .iter()
        .map(|t| (t.task_id.clone(), t as &dyn FlowBatchSource))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub setting: Option<String>,
    pub fraction: Option<f64>,
    pub task_id: String,
    pub energy_distance: f64,
    pub l_recon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub setting: Option<String>,
    pub fraction: Option<f64>,
    pub mean_energy_distance: f64,
    pub std_energy_distance: f64,
    pub mean_l_recon: Option<f64>,
    pub total_steps: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        let mut f = std::fs::File::create(dir.join("rows.csv"))?;
        writeln!(f, "method,seed,setting,fraction,task_id,energy_distance,l_recon")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.method,
                r.seed,
                r.setting.clone().unwrap_or_default(),
                r.fraction.map(|v| v.to_string()).unwrap_or_default(),
                r.task_id,
                r.energy_distance,
                r.l_recon.map(|v| v.to_string()).unwrap_or_default(),
            )?;
        }
        Ok(())
    }

    pub fn mean_for(&self, method: &str, seed: u64) -> Option<f64> {
        let eds: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.seed == seed)
            .map(|r| r.energy_distance)
            .collect();
        if eds.is_empty() {
            None
        } else {
            Some(eds.iter().sum::<f64>() / eds.len() as f64)
        }
    }
}

/// Evaluate a trained variant on the validation tasks: per-task generation
/// distance plus factor-reconstruction error against the GT adapters.
pub fn evaluate_variant(
    tv: &TrainedVariant,
    bank: &LoraBank,
    base: &BaseModel,
    val_tasks: &[TaskSpec],
    study: &StudyConfig,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(val_tasks.len());
    for task in val_tasks {
        let predicted = tv.predict(base, &task.prompt_text)?;
        let ed = eval_generation(
            base,
            &predicted,
            task,
            study.eval_samples,
            study.eval_steps,
            derive_seed(seed, &format!("eval/{}", task.task_id)),
        )?;
        let l_recon = bank
            .adapters
            .iter()
            .position(|a| a.meta.task_id == task.task_id)
            .map(|gi| recon_error(&predicted, &bank.adapters[gi]));
        rows.push(ReportRow {
            method: tv.variant.name().to_string(),
            seed,
            setting: None,
            fraction: None,
            task_id: task.task_id.clone(),
            energy_distance: ed,
            l_recon,
        });
    }
    Ok(rows)
}

/// Mean |B - B̂| + mean |A - Â| over all blocks.
pub fn recon_error(pred: &LoraAdapter, gt: &LoraAdapter) -> f64 {
    let mut acc = 0.0f64;
    for ((pb, pa), (gb, ga)) in pred.factors.iter().zip(gt.factors.iter()) {
        acc += (pb - gb).mapv(f32::abs).mean().unwrap() as f64;
        acc += (pa - ga).mapv(f32::abs).mean().unwrap() as f64;
    }
    acc / pred.factors.len() as f64
}

fn aggregate_rows(rows: &[ReportRow], total_steps: &HashMap<String, usize>) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Option<String>, Option<f64>)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.setting.clone(), r.fraction);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, setting, fraction)| {
            let sel: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.method == method && r.setting == setting && r.fraction == fraction)
                .collect();
            let eds: Vec<f64> = sel.iter().map(|r| r.energy_distance).collect();
            let mean = eds.iter().sum::<f64>() / eds.len() as f64;
            let var = eds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / eds.len() as f64;
            let recons: Vec<f64> = sel.iter().filter_map(|r| r.l_recon).collect();
            let mut seeds: Vec<u64> = sel.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            Aggregate {
                total_steps: *total_steps.get(&method).unwrap_or(&0),
                mean_energy_distance: mean,
                std_energy_distance: var.sqrt(),
                mean_l_recon: if recons.is_empty() {
                    None
                } else {
                    Some(recons.iter().sum::<f64>() / recons.len() as f64)
                },
                method,
                setting,
                fraction,
                seeds,
            }
        })
        .collect()
}

/// Ablation study: all four variants, shared bank, shared seeds, identical
/// budgets. Writes report.json + rows.csv under `out_dir`.
pub fn run_ablations(
    bank: &LoraBank,
    base: &BaseModel,
    tasks: &[TaskSpec],
    study: &StudyConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    let train_idx = bank.indices_of(Split::Train);
    let val_tasks: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Val)
        .cloned()
        .collect();
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| study.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(Vec<ReportRow>, String, usize)>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let tv = train_variant(variant, bank, &train_idx, base, tasks, study, seed)?;
            let rows = evaluate_variant(&tv, bank, base, &val_tasks, study, seed)?;
            Ok((rows, variant.name().to_string(), tv.total_steps))
        })
        .collect();
    let mut rows = Vec::new();
    let mut steps_by_method: HashMap<String, usize> = HashMap::new();
    for r in results {
        let (mut rs, method, steps) = r?;
        if let Some(prev) = steps_by_method.insert(method.clone(), steps) {
            if prev != steps {
                return Err(LofaError::Numerical(format!(
                    "budget parity violated for {method}: {prev} vs {steps}"
                )));
            }
        }
        rows.append(&mut rs);
    }
    // budget parity across variants is part of the contract
    let step_set: std::collections::BTreeSet<usize> = steps_by_method.values().copied().collect();
    if step_set.len() != 1 {
        return Err(LofaError::Numerical(format!(
            "budget parity violated across variants: {steps_by_method:?}"
        )));
    }
    let report = EvalReport {
        config_hash: study.config_hash(&bank.base_fingerprint),
        seeds: study.seeds.clone(),
        aggregates: aggregate_rows(&rows, &steps_by_method),
        rows,
    };
    report.write(out_dir)?;
    Ok(report)
}

/// Threshold and injection-layer sweeps, one reduced-budget retrain each.
pub fn run_sweeps(
    bank: &LoraBank,
    base: &BaseModel,
    tasks: &[TaskSpec],
    study: &StudyConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    let train_idx = bank.indices_of(Split::Train);
    let val_tasks: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Val)
        .cloned()
        .collect();
    let seed = *study.seeds.first().unwrap_or(&0);

    enum Job {
        Tau(f32),
        Injection(Vec<usize>),
    }
    let mut jobs: Vec<Job> = study.taus.iter().map(|&t| Job::Tau(t)).collect();
    jobs.extend(
        study
            .injection_settings
            .iter()
            .map(|s| Job::Injection(s.clone())),
    );
    let results: Vec<Result<(Vec<ReportRow>, usize)>> = jobs
        .par_iter()
        .map(|job| {
            let mut s = study.clone();
            s.seeds = vec![seed];
            let setting = match job {
                Job::Tau(t) => {
                    s.train_cfg.tau = *t;
                    format!("tau={t}")
                }
                Job::Injection(layers) => {
                    s.feature_layers = layers.clone();
                    format!(
                        "inject={}",
                        layers
                            .iter()
                            .map(|l| l.to_string())
                            .collect::<Vec<_>>()
                            .join("&")
                    )
                }
            };
            let tv = train_variant(Variant::Full, bank, &train_idx, base, tasks, &s, seed)?;
            let mut rows = evaluate_variant(&tv, bank, base, &val_tasks, &s, seed)?;
            for r in &mut rows {
                r.setting = Some(setting.clone());
                r.method = match job {
                    Job::Tau(_) => "tau_sweep".into(),
                    Job::Injection(_) => "injection_sweep".into(),
                };
            }
            Ok((rows, tv.total_steps))
        })
        .collect();
    let mut rows = Vec::new();
    let mut steps_by_method = HashMap::new();
    for r in results {
        let (mut rs, steps) = r?;
        if let Some(first) = rs.first() {
            steps_by_method.insert(first.method.clone(), steps);
        }
        rows.append(&mut rs);
    }
    let report = EvalReport {
        config_hash: study.config_hash(&bank.base_fingerprint),
        seeds: vec![seed],
        aggregates: aggregate_rows(&rows, &steps_by_method),
        rows,
    };
    report.write(out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbRow {
    pub task_id: String,
    pub split: Split,
    pub mode: String,
    pub sigma: f32,
    pub ed_original: f64,
    pub ed_perturbed: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbReport {
    pub tau: f32,
    pub rows: Vec<PerturbRow>,
    /// Mean |relative change| for zeroing sub-threshold entries.
    pub mean_rel_change_zero: f64,
    /// Mean |relative change| for the above-threshold control.
    pub mean_rel_change_control: f64,
}

/// Masked-parameter perturbation study over every bank adapter: zero or
/// noise the sub-threshold entries, plus the above-threshold control.
pub fn run_perturbation(
    bank: &LoraBank,
    base: &BaseModel,
    tasks: &[TaskSpec],
    tau: f32,
    sigma_list: &[f32],
    eval_samples: usize,
    eval_steps: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PerturbReport> {
    let task_by_id: HashMap<&str, &TaskSpec> =
        tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let jobs: Vec<usize> = (0..bank.adapters.len()).collect();
    let results: Vec<Result<Vec<PerturbRow>>> = jobs
        .par_iter()
        .map(|&ai| {
            let adapter = &bank.adapters[ai];
            let tag = &bank.tags[ai];
            let task = task_by_id
                .get(adapter.meta.task_id.as_str())
                .ok_or_else(|| {
                    LofaError::Config(format!("no task for adapter {}", adapter.meta.task_id))
                })?;
            let rmap = binarize(&magnitude_map(base, adapter, DEFAULT_GUARD_EPSILON)?, tau)?;
            let eval_seed = derive_seed(seed, &format!("perturb/{}", adapter.meta.task_id));
            let ed_orig =
                eval_generation(base, adapter, task, eval_samples, eval_steps, eval_seed)?;
            let mut rows = Vec::new();
            let mut push = |mode: &str, sigma: f32, ed: f64| {
                rows.push(PerturbRow {
                    task_id: adapter.meta.task_id.clone(),
                    split: tag.split,
                    mode: mode.to_string(),
                    sigma,
                    ed_original: ed_orig,
                    ed_perturbed: ed,
                    relative_change: (ed - ed_orig) / ed_orig.max(1e-9),
                });
            };
            let zeroed = perturb_masked(adapter, &rmap, PerturbMode::Zero, 0.0, eval_seed)?;
            let ed_zero =
                eval_generation(base, &zeroed, task, eval_samples, eval_steps, eval_seed)?;
            push("zero_subthreshold", 0.0, ed_zero);
            let control = perturb_unmasked(adapter, &rmap, PerturbMode::Zero, 0.0, eval_seed)?;
            let ed_ctrl =
                eval_generation(base, &control, task, eval_samples, eval_steps, eval_seed)?;
            push("zero_above_threshold_control", 0.0, ed_ctrl);
            for &sigma in sigma_list {
                let noisy = perturb_masked(adapter, &rmap, PerturbMode::Noise, sigma, eval_seed)?;
                let ed_noise =
                    eval_generation(base, &noisy, task, eval_samples, eval_steps, eval_seed)?;
                push("noise_subthreshold", sigma, ed_noise);
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let mean_abs = |mode: &str| -> f64 {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.relative_change.abs())
            .collect();
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    };
    let report = PerturbReport {
        tau,
        mean_rel_change_zero: mean_abs("zero_subthreshold"),
        mean_rel_change_control: mean_abs("zero_above_threshold_control"),
        rows,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("perturbation.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

/// Scaling study: nested training-bank fractions, full vs single-stage.
/// Emits a scaling-curve plot beside the report.
pub fn run_scaling(
    bank: &LoraBank,
    base: &BaseModel,
    tasks: &[TaskSpec],
    study: &StudyConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    let train_idx = bank.indices_of(Split::Train);
    let val_tasks: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Val)
        .cloned()
        .collect();
    let mut fractions = study.fractions.clone();
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let variants = [Variant::Full, Variant::WoResponse];
    let jobs: Vec<(Variant, f64, u64)> = variants
        .iter()
        .flat_map(|&v| {
            fractions.iter().flat_map(move |&f| {
                study.seeds.iter().map(move |&s| (v, f, s))
            })
        })
        .collect();
    let results: Vec<Result<(Vec<ReportRow>, String, usize)>> = jobs
        .par_iter()
        .map(|&(variant, fraction, seed)| {
            // nested prefix subsets: 25% ⊂ 50% ⊂ 100%
            let k = ((train_idx.len() as f64 * fraction).round() as usize)
                .clamp(1, train_idx.len());
            let subset = &train_idx[..k];
            let tv = train_variant(variant, bank, subset, base, tasks, study, seed)?;
            let mut rows = evaluate_variant(&tv, bank, base, &val_tasks, study, seed)?;
            for r in &mut rows {
                r.fraction = Some(fraction);
            }
            Ok((rows, variant.name().to_string(), tv.total_steps))
        })
        .collect();
    let mut rows = Vec::new();
    let mut steps_by_method = HashMap::new();
    for r in results {
        let (mut rs, method, steps) = r?;
        steps_by_method.insert(method, steps);
        rows.append(&mut rs);
    }
    let report = EvalReport {
        config_hash: study.config_hash(&bank.base_fingerprint),
        seeds: study.seeds.clone(),
        aggregates: aggregate_rows(&rows, &steps_by_method),
        rows,
    };
    report.write(out_dir)?;

    let mut series = Vec::new();
    for v in variants {
        let mut pts = Vec::new();
        for &f in &fractions {
            let sel: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.method == v.name() && r.fraction == Some(f))
                .map(|r| r.energy_distance)
                .collect();
            if !sel.is_empty() {
                pts.push((f, sel.iter().sum::<f64>() / sel.len() as f64));
            }
        }
        series.push(Series {
            label: v.name().to_string(),
            points: pts,
        });
    }
    line_plot(&series, &out_dir.join("scaling_curve.png"))?;
    Ok(report)
}

/// Random mask with exactly `ones` 1-entries across block shapes, matching a
/// reference map's layout. Used as the density-matched baseline in the
/// alignment analysis.
pub fn random_mask_like(rmap: &ResponseMap, ones: usize, seed: u64) -> ResponseMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<_> = rmap.masks.keys().copied().collect();
    let total: usize = rmap.masks.values().map(|m| m.len()).sum();
    let ones = ones.min(total);
    // reservoir-free: choose `ones` positions via partial shuffle of indices
    let mut flat: Vec<usize> = (0..total).collect();
    for i in 0..ones {
        let j = rng.gen_range(i..total);
        flat.swap(i, j);
    }
    let chosen: std::collections::BTreeSet<usize> = flat[..ones].iter().copied().collect();
    let mut masks = std::collections::BTreeMap::new();
    let mut offset = 0usize;
    for k in keys {
        let shape = rmap.masks[&k].dim();
        let len = shape.0 * shape.1;
        let mut m = Array2::zeros(shape);
        for idx in 0..len {
            if chosen.contains(&(offset + idx)) {
                m[[idx / shape.1, idx % shape.1]] = 1u8;
            }
        }
        masks.insert(k, m);
        offset += len;
    }
    ResponseMap {
        masks,
        threshold: rmap.threshold,
    }
}
