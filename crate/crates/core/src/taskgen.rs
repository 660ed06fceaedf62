//! Synthetic 2D personalization tasks: families of target distributions with
//! templated prompts, plus ground-truth LoRA bank construction.
//!
//! Validation families (spiral, star) never appear in training, mirroring an
//! unseen-task evaluation protocol.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LofaError, Result};
use crate::eval::energy_distance;
use crate::lorakit::{finetune_lora, BankTag, LoraBank, LoraTrainConfig, Split};
use crate::toybase::{standard_normal, BaseModel, FlowBatchSource, FlowSample};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Rotate,
    Scale,
    Translate,
    Ring,
    Moons,
    Spiral,
    Star,
    Mixture,
}

impl TaskFamily {
    pub const TRAIN: [TaskFamily; 6] = [
        TaskFamily::Rotate,
        TaskFamily::Scale,
        TaskFamily::Translate,
        TaskFamily::Ring,
        TaskFamily::Moons,
        TaskFamily::Mixture,
    ];
    /// Families reserved for validation only.
    pub const VAL: [TaskFamily; 2] = [TaskFamily::Spiral, TaskFamily::Star];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Rotate => "rotate",
            TaskFamily::Scale => "scale",
            TaskFamily::Translate => "translate",
            TaskFamily::Ring => "ring",
            TaskFamily::Moons => "moons",
            TaskFamily::Spiral => "spiral",
            TaskFamily::Star => "star",
            TaskFamily::Mixture => "mixture",
        }
    }
}

/// One personalization task: a target distribution plus its prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub family: TaskFamily,
    pub params: Vec<f64>,
    pub prompt_text: String,
    pub split: Split,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, params: Vec<f64>, split: Split, root_seed: u64) -> Self {
        let prompt_text = prompt_for(family, &params);
        let task_id = id_for(family, &params);
        let seed = derive_seed(root_seed, &task_id);
        Self {
            task_id,
            family,
            params,
            prompt_text,
            split,
            seed,
        }
    }

    /// One draw from the task's target distribution.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> [f32; 2] {
        let p = &self.params;
        match self.family {
            TaskFamily::Rotate => {
                let theta = (p[0] as f32).to_radians();
                let a = 1.8 * standard_normal(rng);
                let b = 0.35 * standard_normal(rng);
                [
                    theta.cos() * a - theta.sin() * b,
                    theta.sin() * a + theta.cos() * b,
                ]
            }
            TaskFamily::Scale => {
                let c = p[0] as f32;
                [c * standard_normal(rng), c * standard_normal(rng)]
            }
            TaskFamily::Translate => [
                standard_normal(rng) + p[0] as f32,
                standard_normal(rng) + p[1] as f32,
            ],
            TaskFamily::Ring => {
                let r = p[0] as f32;
                let phi = rng.gen_range(0.0..std::f32::consts::TAU);
                [
                    r * phi.cos() + 0.12 * standard_normal(rng),
                    r * phi.sin() + 0.12 * standard_normal(rng),
                ]
            }
            TaskFamily::Moons => {
                let s = p[0] as f32;
                let upper: bool = rng.gen_range(0..2) == 0;
                let phi = rng.gen_range(0.0..std::f32::consts::PI);
                let (x, y) = if upper {
                    (phi.cos(), phi.sin() - 0.25)
                } else {
                    (1.0 - phi.cos(), 0.25 - phi.sin())
                };
                [
                    s * x - s * 0.5 + 0.1 * standard_normal(rng),
                    s * y + 0.1 * standard_normal(rng),
                ]
            }
            TaskFamily::Spiral => {
                let turns = p[0] as f32;
                let scale = p[1] as f32;
                let u: f32 = rng.gen_range(0.0..1.0);
                let phi = std::f32::consts::TAU * turns * u;
                let r = scale * phi / std::f32::consts::PI;
                [
                    r * phi.cos() + 0.08 * standard_normal(rng),
                    r * phi.sin() + 0.08 * standard_normal(rng),
                ]
            }
            TaskFamily::Star => {
                let k = p[0] as f32;
                let base_r = p[1] as f32;
                let phi = rng.gen_range(0.0..std::f32::consts::TAU);
                let r = base_r * (1.0 + 0.35 * (k * phi).cos());
                [
                    r * phi.cos() + 0.1 * standard_normal(rng),
                    r * phi.sin() + 0.1 * standard_normal(rng),
                ]
            }
            TaskFamily::Mixture => {
                let k = p[0] as usize;
                let radius = p[1] as f32;
                let j = rng.gen_range(0..k);
                let angle = std::f32::consts::TAU * j as f32 / k as f32;
                [
                    radius * angle.cos() + 0.25 * standard_normal(rng),
                    radius * angle.sin() + 0.25 * standard_normal(rng),
                ]
            }
        }
    }

    /// Deterministic target sample of size n.
    pub fn target_points(&self, n: usize, seed: u64) -> Vec<[f32; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

impl FlowBatchSource for TaskSpec {
    fn batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<FlowSample> {
        (0..n)
            .map(|_| {
                let x0 = self.draw(rng);
                let x1 = [standard_normal(rng), standard_normal(rng)];
                let t: f32 = rng.gen_range(0.0..1.0);
                FlowSample::new(x0, x1, t)
            })
            .collect()
    }
}

fn prompt_for(family: TaskFamily, p: &[f64]) -> String {
    match family {
        TaskFamily::Rotate => format!("rotate the pattern by {:.0} degrees", p[0]),
        TaskFamily::Scale => format!("scale the pattern by a factor of {:.2}", p[0]),
        TaskFamily::Translate => {
            format!("shift the pattern by {:.1} along x and {:.1} along y", p[0], p[1])
        }
        TaskFamily::Ring => format!("draw a ring of radius {:.2}", p[0]),
        TaskFamily::Moons => format!("draw two moons with spread {:.2}", p[0]),
        TaskFamily::Spiral => {
            format!("draw a spiral with {:.2} turns and scale {:.2}", p[0], p[1])
        }
        TaskFamily::Star => {
            format!("draw a star with {:.0} points and radius {:.2}", p[0], p[1])
        }
        TaskFamily::Mixture => {
            format!("mix {:.0} clusters on a circle of radius {:.2}", p[0], p[1])
        }
    }
}

fn id_for(family: TaskFamily, p: &[f64]) -> String {
    let params: Vec<String> = p.iter().map(|v| format!("{v:.2}").replace('-', "m")).collect();
    format!("{}-{}", family.name(), params.join("-"))
}

fn family_grid(family: TaskFamily) -> Vec<Vec<f64>> {
    match family {
        TaskFamily::Rotate => [15.0, 30.0, 45.0, 60.0, 75.0, 105.0, 120.0, 135.0, 150.0, 165.0]
            .iter()
            .map(|&a| vec![a])
            .collect(),
        TaskFamily::Scale => [0.4, 0.55, 0.7, 0.85, 1.3, 1.6, 1.9, 2.2, 2.5, 2.8]
            .iter()
            .map(|&c| vec![c])
            .collect(),
        TaskFamily::Translate => vec![
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![-2.0, 0.0],
            vec![0.0, -2.0],
            vec![1.5, 1.5],
            vec![-1.5, 1.5],
            vec![1.5, -1.5],
            vec![-1.5, -1.5],
            vec![2.5, 1.0],
            vec![1.0, 2.5],
        ],
        TaskFamily::Ring => [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8]
            .iter()
            .map(|&r| vec![r])
            .collect(),
        TaskFamily::Moons => [0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6]
            .iter()
            .map(|&s| vec![s])
            .collect(),
        TaskFamily::Mixture => vec![
            vec![3.0, 1.5],
            vec![4.0, 1.5],
            vec![5.0, 1.5],
            vec![6.0, 1.5],
            vec![3.0, 2.2],
            vec![4.0, 2.2],
            vec![5.0, 2.2],
            vec![6.0, 2.2],
            vec![3.0, 2.8],
            vec![5.0, 2.8],
        ],
        TaskFamily::Spiral => vec![
            vec![1.5, 0.45],
            vec![2.0, 0.45],
            vec![2.5, 0.45],
            vec![1.5, 0.6],
            vec![2.0, 0.6],
            vec![2.5, 0.6],
            vec![1.75, 0.5],
            vec![2.25, 0.5],
        ],
        TaskFamily::Star => vec![
            vec![4.0, 1.5],
            vec![5.0, 1.5],
            vec![6.0, 1.5],
            vec![4.0, 2.0],
            vec![5.0, 2.0],
            vec![6.0, 2.0],
            vec![7.0, 1.8],
            vec![3.0, 1.8],
        ],
    }
}

/// Build train/val task lists. Validation draws only from the reserved
/// families, so the two splits can never share a family label.
pub fn make_task_families(
    seed: u64,
    n_train_tasks: usize,
    n_val_tasks: usize,
) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    if n_train_tasks == 0 || n_val_tasks == 0 {
        return Err(LofaError::Argument("task counts must be >= 1".into()));
    }
    let train = pick_tasks(&TaskFamily::TRAIN, n_train_tasks, Split::Train, seed)?;
    let val = pick_tasks(&TaskFamily::VAL, n_val_tasks, Split::Val, seed)?;
    Ok((train, val))
}

fn pick_tasks(
    families: &[TaskFamily],
    count: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    let mut grids: Vec<(TaskFamily, Vec<Vec<f64>>)> = families
        .iter()
        .map(|&f| {
            let mut grid = family_grid(f);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, f.name()));
            // seeded Fisher-Yates so different seeds pick different subsets
            for i in (1..grid.len()).rev() {
                let j = rng.gen_range(0..=i);
                grid.swap(i, j);
            }
            (f, grid)
        })
        .collect();
    let capacity: usize = grids.iter().map(|(_, g)| g.len()).sum();
    if count > capacity {
        return Err(LofaError::Argument(format!(
            "requested {count} tasks but family capacity is {capacity}"
        )));
    }
    // round-robin across families
    let mut tasks = Vec::with_capacity(count);
    let mut cursor = vec![0usize; grids.len()];
    let mut fi = 0usize;
    while tasks.len() < count {
        let (family, grid) = &mut grids[fi % grids.len()];
        let c = &mut cursor[fi % grids.len()];
        if *c < grid.len() {
            tasks.push(TaskSpec::new(*family, grid[*c].clone(), split, seed));
            *c += 1;
        }
        fi += 1;
    }
    Ok(tasks)
}

#[derive(Debug, Clone)]
pub struct BuildBankConfig {
    pub lora: LoraTrainConfig,
    /// Adapters whose generation distance exceeds this are flagged, not
    /// dropped.
    pub quality_threshold: f64,
    pub quality_samples: usize,
    pub quality_steps: usize,
    pub seed: u64,
}

impl Default for BuildBankConfig {
    fn default() -> Self {
        Self {
            lora: LoraTrainConfig::default(),
            quality_threshold: 0.5,
            quality_samples: 512,
            quality_steps: 50,
            seed: 0,
        }
    }
}

/// Fine-tune one ground-truth LoRA per task and assemble the annotated bank.
/// Per-task runs are independent, so they execute in parallel with derived
/// seeds; results are identical to a serial build.
pub fn build_pairs(
    base: &BaseModel,
    tasks: &[TaskSpec],
    cfg: &BuildBankConfig,
) -> Result<LoraBank> {
    if tasks.is_empty() {
        return Err(LofaError::Argument("build_pairs with no tasks".into()));
    }
    let ids: BTreeSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    if ids.len() != tasks.len() {
        return Err(LofaError::Argument("duplicate task ids".into()));
    }
    let fingerprint = base.fingerprint();
    let results: Vec<Result<(crate::lorakit::LoraAdapter, BankTag)>> = tasks
        .par_iter()
        .map(|task| {
            let mut lora_cfg = cfg.lora.clone();
            lora_cfg.seed = derive_seed(cfg.seed, &format!("finetune/{}", task.task_id));
            let (adapter, _history) =
                finetune_lora(base, task, &lora_cfg, &task.task_id, &task.prompt_text)?;
            let gen_seed = derive_seed(cfg.seed, &format!("quality/{}", task.task_id));
            let generated =
                base.sample(cfg.quality_samples, cfg.quality_steps, Some(&adapter), gen_seed)?;
            let target = task.target_points(cfg.quality_samples, gen_seed.wrapping_add(1));
            let ed = energy_distance(&generated, &target)?;
            let tag = BankTag {
                task_id: task.task_id.clone(),
                family: task.family.name().to_string(),
                split: task.split,
                quality_energy_distance: Some(ed),
                quality_ok: Some(ed <= cfg.quality_threshold),
            };
            Ok((adapter, tag))
        })
        .collect();
    let mut bank = LoraBank::new(cfg.lora.rank, fingerprint, base.dims.block_keys());
    for r in results {
        let (adapter, tag) = r?;
        bank.push(adapter, tag)?;
    }
    Ok(bank)
}

/// tasks.json alongside the bank.
pub fn save_tasks(tasks: &[TaskSpec], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_vec_pretty(tasks)?)?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    if !path.exists() {
        return Err(LofaError::MissingArtifact(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
