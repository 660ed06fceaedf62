//! Toy flow-matching base model over 2D point distributions.
//!
//! A small attention-only denoiser: a point token, a time token and a learned
//! class token pass through `L` attention depths whose Q/K/V/O projections
//! are the LoRA-targeted weight blocks. The velocity head reads the point
//! token. Everything is f32 and deterministic for a fixed seed.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{LofaError, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::optim::{AdamConfig, AdamW};

/// Functional role of an attention projection.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum BlockType {
    Q,
    K,
    V,
    O,
}

impl BlockType {
    pub const ALL: [BlockType; 4] = [BlockType::Q, BlockType::K, BlockType::V, BlockType::O];

    pub fn index(self) -> usize {
        match self {
            BlockType::Q => 0,
            BlockType::K => 1,
            BlockType::V => 2,
            BlockType::O => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockType::Q => "q",
            BlockType::K => "k",
            BlockType::V => "v",
            BlockType::O => "o",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(BlockType::Q),
            "k" => Ok(BlockType::K),
            "v" => Ok(BlockType::V),
            "o" => Ok(BlockType::O),
            other => Err(LofaError::Argument(format!("unknown block type {other}"))),
        }
    }
}

impl std::fmt::Display for BlockType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

/// (depth, block type) address of one LoRA-targeted weight matrix.
pub type BlockKey = (usize, BlockType);

#[derive(Debug, Clone)]
pub struct WeightBlock {
    pub depth: usize,
    pub block_type: BlockType,
    pub matrix: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of attention depths L.
    pub depths: usize,
    /// Hidden width d; projection blocks are m x n with m = n = d here.
    pub hidden: usize,
    pub m: usize,
    pub n: usize,
    pub point_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            depths: 4,
            hidden: 32,
            m: 32,
            n: 32,
            point_dim: 2,
        }
    }
}

impl ModelDims {
    pub fn tiny() -> Self {
        Self {
            depths: 2,
            hidden: 8,
            m: 8,
            n: 8,
            point_dim: 2,
        }
    }

    pub fn block_count(&self) -> usize {
        self.depths * 4
    }

    pub fn block_keys(&self) -> Vec<BlockKey> {
        let mut keys = Vec::with_capacity(self.block_count());
        for depth in 0..self.depths {
            for bt in BlockType::ALL {
                keys.push((depth, bt));
            }
        }
        keys
    }
}

/// Which quantity the denoiser regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTarget {
    /// Rectified-flow velocity x1 - x0 (default).
    Velocity,
    /// Noise x1; sampling converts the prediction back to a velocity.
    Noise,
}

/// One training example of the linear-interpolant flow.
#[derive(Debug, Clone, Copy)]
pub struct FlowSample {
    pub x0: [f32; 2],
    pub x1: [f32; 2],
    pub t: f32,
    pub x_t: [f32; 2],
    pub v_target: [f32; 2],
}

impl FlowSample {
    pub fn new(x0: [f32; 2], x1: [f32; 2], t: f32) -> Self {
        let x_t = [(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]];
        let v_target = [x1[0] - x0[0], x1[1] - x0[1]];
        Self {
            x0,
            x1,
            t,
            x_t,
            v_target,
        }
    }
}

/// Anything that can produce batches of flow samples for one task.
pub trait FlowBatchSource: Sync {
    fn batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<FlowSample>;
}

/// A low-rank or dense weight delta, borrowed from an adapter.
pub enum DeltaRef<'a> {
    Factored {
        b: &'a Array2<f32>,
        a: &'a Array2<f32>,
    },
    Dense(&'a Array2<f32>),
}

/// Source of per-block weight deltas: LoRA adapters and perturbed dense
/// variants both implement this so injection paths stay uniform.
pub trait DeltaSource {
    fn delta_ref(&self, depth: usize, block_type: BlockType) -> Option<DeltaRef<'_>>;

    /// Dense delta matrix B*A (or the dense payload).
    fn delta_matrix(&self, depth: usize, block_type: BlockType) -> Option<Array2<f32>> {
        self.delta_ref(depth, block_type).map(|d| match d {
            DeltaRef::Factored { b, a } => b.dot(a),
            DeltaRef::Dense(d) => d.clone(),
        })
    }
}

pub const POINT_FEATURES: usize = 10;
pub const TIME_FEATURES: usize = 10;

/// Fourier-style featurization of a 2D point.
pub fn point_features(x: [f32; 2]) -> [f32; POINT_FEATURES] {
    [
        x[0],
        x[1],
        x[0].sin(),
        x[0].cos(),
        x[1].sin(),
        x[1].cos(),
        (2.0 * x[0]).sin(),
        (2.0 * x[0]).cos(),
        (2.0 * x[1]).sin(),
        (2.0 * x[1]).cos(),
    ]
}

pub fn time_features(t: f32) -> [f32; TIME_FEATURES] {
    let tau = std::f32::consts::TAU;
    [
        t,
        1.0,
        (tau * t).sin(),
        (tau * t).cos(),
        (2.0 * tau * t).sin(),
        (2.0 * tau * t).cos(),
        (4.0 * tau * t).sin(),
        (4.0 * tau * t).cos(),
        (8.0 * tau * t).sin(),
        (8.0 * tau * t).cos(),
    ]
}

#[derive(Clone)]
pub struct BaseModel {
    pub dims: ModelDims,
    pub flow_target: FlowTarget,
    /// Depth-major, type order Q, K, V, O.
    pub blocks: Vec<WeightBlock>,
    pub point_proj_w: Array2<f32>,
    pub point_proj_b: Array2<f32>,
    pub time_proj_w: Array2<f32>,
    pub time_proj_b: Array2<f32>,
    pub class_token: Array2<f32>,
    pub head_w: Array2<f32>,
    pub head_b: Array2<f32>,
}

impl BaseModel {
    pub fn new(dims: ModelDims, flow_target: FlowTarget, seed: u64) -> Self {
        assert_eq!(dims.m, dims.hidden, "projection rows must equal hidden width");
        assert_eq!(dims.n, dims.hidden, "projection cols must equal hidden width");
        assert_eq!(dims.point_dim, 2, "toy model is 2D");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.hidden;
        let block_sigma = 0.3 / (d as f32).sqrt();
        let mut blocks = Vec::with_capacity(dims.block_count());
        for depth in 0..dims.depths {
            for bt in BlockType::ALL {
                blocks.push(WeightBlock {
                    depth,
                    block_type: bt,
                    matrix: normal_matrix(&mut rng, d, d, block_sigma),
                });
            }
        }
        let xavier = |fi: usize, fo: usize| (2.0 / (fi + fo) as f32).sqrt();
        Self {
            dims,
            flow_target,
            blocks,
            point_proj_w: normal_matrix(&mut rng, POINT_FEATURES, d, xavier(POINT_FEATURES, d)),
            point_proj_b: Array2::zeros((1, d)),
            time_proj_w: normal_matrix(&mut rng, TIME_FEATURES, d, xavier(TIME_FEATURES, d)),
            time_proj_b: Array2::zeros((1, d)),
            class_token: normal_matrix(&mut rng, 1, d, 0.5),
            head_w: normal_matrix(&mut rng, d, dims.point_dim, xavier(d, dims.point_dim)),
            head_b: Array2::zeros((1, dims.point_dim)),
        }
    }

    pub fn block_index(&self, depth: usize, block_type: BlockType) -> usize {
        depth * 4 + block_type.index()
    }

    pub fn block(&self, depth: usize, block_type: BlockType) -> &WeightBlock {
        &self.blocks[self.block_index(depth, block_type)]
    }

    /// Effective weight W + BA (or W + D) for one block, shape-checked.
    fn effective_weight(
        &self,
        depth: usize,
        block_type: BlockType,
        adapter: Option<&dyn DeltaSource>,
    ) -> Result<Array2<f32>> {
        let w = &self.block(depth, block_type).matrix;
        match adapter {
            None => Ok(w.clone()),
            Some(src) => {
                let delta = src
                    .delta_ref(depth, block_type)
                    .ok_or(LofaError::MissingBlock { depth, block_type })?;
                let d = match delta {
                    DeltaRef::Factored { b, a } => {
                        if b.nrows() != w.nrows() || a.ncols() != w.ncols() || b.ncols() != a.nrows()
                        {
                            return Err(LofaError::Shape {
                                depth,
                                block_type,
                                expected: format!("B {}x r, A r x {}", w.nrows(), w.ncols()),
                                got: format!("B {:?}, A {:?}", b.dim(), a.dim()),
                            });
                        }
                        b.dot(a)
                    }
                    DeltaRef::Dense(d) => {
                        if d.dim() != w.dim() {
                            return Err(LofaError::Shape {
                                depth,
                                block_type,
                                expected: format!("{:?}", w.dim()),
                                got: format!("{:?}", d.dim()),
                            });
                        }
                        d.clone()
                    }
                };
                Ok(w + &d)
            }
        }
    }

    /// Denoiser output at (x_t, t), optionally with an injected adapter.
    ///
    /// With a LoRA present every attention projection uses W + BA in place of
    /// W; the merge is recomputed per call so the adapter is free to change.
    /// The op sequence mirrors `forward_taped` exactly so the two paths stay
    /// bit-identical.
    pub fn forward(
        &self,
        x_t: [f32; 2],
        t: f32,
        adapter: Option<&dyn DeltaSource>,
    ) -> Result<[f32; 2]> {
        if !(0.0..=1.0).contains(&t) {
            return Err(LofaError::Argument(format!("t = {t} outside [0, 1]")));
        }
        let d = self.dims.hidden;
        let scale = 1.0 / (d as f32).sqrt();
        let pf = Array2::from_shape_vec((1, POINT_FEATURES), point_features(x_t).to_vec())
            .expect("point features");
        let tf = Array2::from_shape_vec((1, TIME_FEATURES), time_features(t).to_vec())
            .expect("time features");
        let p_tok = pf.dot(&self.point_proj_w) + &self.point_proj_b;
        let t_tok = tf.dot(&self.time_proj_w) + &self.time_proj_b;
        let mut tokens = Array2::zeros((3, d));
        tokens.row_mut(0).assign(&p_tok.row(0));
        tokens.row_mut(1).assign(&t_tok.row(0));
        tokens.row_mut(2).assign(&self.class_token.row(0));
        for depth in 0..self.dims.depths {
            let wq = self.effective_weight(depth, BlockType::Q, adapter)?;
            let wk = self.effective_weight(depth, BlockType::K, adapter)?;
            let wv = self.effective_weight(depth, BlockType::V, adapter)?;
            let wo = self.effective_weight(depth, BlockType::O, adapter)?;
            let q = tokens.dot(&wq);
            let k = tokens.dot(&wk);
            let v = tokens.dot(&wv);
            let kt = k.t().to_owned();
            let scores = q.dot(&kt).mapv(|s| s * scale);
            let attn = softmax_rows(&scores);
            let ctx = attn.dot(&v).dot(&wo);
            tokens = &tokens + &ctx;
        }
        let point_row = tokens.slice(ndarray::s![0..1, ..]).to_owned();
        let out = point_row.dot(&self.head_w) + &self.head_b;
        Ok([out[[0, 0]], out[[0, 1]]])
    }

    /// Regression target for one flow sample under this model's convention.
    pub fn target_of(&self, s: &FlowSample) -> [f32; 2] {
        match self.flow_target {
            FlowTarget::Velocity => s.v_target,
            FlowTarget::Noise => s.x1,
        }
    }

    /// Flow-matching loss: MSE between the denoiser output and the target
    /// over every scalar component of the batch.
    pub fn fm_loss(
        &self,
        batch: &[FlowSample],
        adapter: Option<&dyn DeltaSource>,
    ) -> Result<f32> {
        if batch.is_empty() {
            return Err(LofaError::Argument("fm_loss on empty batch".into()));
        }
        let mut acc = 0.0f32;
        for s in batch {
            let pred = self.forward(s.x_t, s.t, adapter)?;
            let tgt = self.target_of(s);
            acc += (pred[0] - tgt[0]).powi(2) + (pred[1] - tgt[1]).powi(2);
        }
        Ok(acc / (batch.len() * 2) as f32)
    }

    /// Euler integration of the learned flow from t=1 down to t=0.
    /// Deterministic in `seed`; the initial noise draw order is fixed before
    /// any integration so per-point work can run in parallel.
    ///
    /// The adapter, when present, is merged eagerly once up front; this is
    /// equivalent to per-call injection (see the injection-linearity tests)
    /// and avoids recomputing B*A for every integration step.
    pub fn sample(
        &self,
        n: usize,
        steps: usize,
        adapter: Option<&dyn DeltaSource>,
        seed: u64,
    ) -> Result<Vec<[f32; 2]>> {
        if steps == 0 {
            return Err(LofaError::Argument("sample with steps = 0".into()));
        }
        if n == 0 {
            return Err(LofaError::Argument("sample with n = 0".into()));
        }
        let merged_storage;
        let model: &BaseModel = match adapter {
            None => self,
            Some(src) => {
                let mut merged = self.clone();
                for block in &mut merged.blocks {
                    let delta = src
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
                merged_storage = merged;
                &merged_storage
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts: Vec<[f32; 2]> = (0..n)
            .map(|_| [standard_normal(&mut rng), standard_normal(&mut rng)])
            .collect();
        let dt = 1.0 / steps as f32;
        let points: Vec<Result<[f32; 2]>> = starts
            .par_iter()
            .map(|&start| {
                let mut x = start;
                for k in 0..steps {
                    let t = 1.0 - k as f32 * dt;
                    let out = model.forward(x, t, None)?;
                    let v = match model.flow_target {
                        FlowTarget::Velocity => out,
                        FlowTarget::Noise => {
                            let denom = (1.0 - t).max(0.5 * dt);
                            [(out[0] - x[0]) / denom, (out[1] - x[1]) / denom]
                        }
                    };
                    x = [x[0] - dt * v[0], x[1] - dt * v[1]];
                }
                Ok(x)
            })
            .collect();
        points.into_iter().collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f32>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push((format!("blocks/d{}/{}", b.depth, b.block_type), &b.matrix));
        }
        out.push(("point_proj/w".into(), &self.point_proj_w));
        out.push(("point_proj/b".into(), &self.point_proj_b));
        out.push(("time_proj/w".into(), &self.time_proj_w));
        out.push(("time_proj/b".into(), &self.time_proj_b));
        out.push(("class_token".into(), &self.class_token));
        out.push(("head/w".into(), &self.head_w));
        out.push(("head/b".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f32>> {
        let mut out: Vec<&mut Array2<f32>> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.matrix);
        }
        out.push(&mut self.point_proj_w);
        out.push(&mut self.point_proj_b);
        out.push(&mut self.time_proj_w);
        out.push(&mut self.time_proj_b);
        out.push(&mut self.class_token);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn fingerprint(&self) -> String {
        self.to_container().fingerprint()
    }

    fn to_container(&self) -> TensorContainer {
        let arch = serde_json::json!({
            "model_dims": self.dims,
            "flow_target": self.flow_target,
            "block_index": self
                .blocks
                .iter()
                .map(|b| serde_json::json!({
                    "name": format!("blocks/d{}/{}", b.depth, b.block_type),
                    "depth": b.depth,
                    "block_type": b.block_type.as_str(),
                }))
                .collect::<Vec<_>>(),
        });
        TensorContainer {
            kind: "base-model".into(),
            arch,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_container().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = TensorContainer::load(dir)?;
        if c.kind != "base-model" {
            return Err(LofaError::Format {
                what: "manifest.json".into(),
                detail: format!("expected kind base-model, got {}", c.kind),
            });
        }
        let dims: ModelDims = serde_json::from_value(c.arch["model_dims"].clone())?;
        let flow_target: FlowTarget = serde_json::from_value(c.arch["flow_target"].clone())?;
        let mut model = BaseModel::new(dims, flow_target, 0);
        for b in &mut model.blocks {
            b.matrix = c
                .tensor(&format!("blocks/d{}/{}", b.depth, b.block_type))?
                .clone();
        }
        model.point_proj_w = c.tensor("point_proj/w")?.clone();
        model.point_proj_b = c.tensor("point_proj/b")?.clone();
        model.time_proj_w = c.tensor("time_proj/w")?.clone();
        model.time_proj_b = c.tensor("time_proj/b")?.clone();
        model.class_token = c.tensor("class_token")?.clone();
        model.head_w = c.tensor("head/w")?.clone();
        model.head_b = c.tensor("head/b")?.clone();
        Ok(model)
    }
}

/// Graph leaves for every base-model parameter, in `named_params` order.
pub struct BaseVars {
    pub blocks: Vec<Var>,
    pub point_w: Var,
    pub point_b: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub class: Var,
    pub head_w: Var,
    pub head_b: Var,
}

/// Adapter factors as graph nodes, aligned with the model's block order.
pub struct AdapterVars {
    /// One (B, A) pair per block, depth-major Q/K/V/O order.
    pub factors: Vec<(Var, Var)>,
}

impl BaseModel {
    /// Register every parameter as a graph leaf (trainable base).
    pub fn vars(&self, g: &mut Graph) -> BaseVars {
        BaseVars {
            blocks: self.blocks.iter().map(|b| g.leaf(b.matrix.clone())).collect(),
            point_w: g.leaf(self.point_proj_w.clone()),
            point_b: g.leaf(self.point_proj_b.clone()),
            time_w: g.leaf(self.time_proj_w.clone()),
            time_b: g.leaf(self.time_proj_b.clone()),
            class: g.leaf(self.class_token.clone()),
            head_w: g.leaf(self.head_w.clone()),
            head_b: g.leaf(self.head_b.clone()),
        }
    }

    /// Taped forward pass. Mirrors `forward` op-for-op so the two paths agree
    /// bit-exactly; with `adapter` present each projection uses W + BA inside
    /// the differentiable graph.
    pub fn forward_taped(
        &self,
        g: &mut Graph,
        vars: &BaseVars,
        x_t: [f32; 2],
        t: f32,
        adapter: Option<&AdapterVars>,
    ) -> Var {
        let d = self.dims.hidden;
        let scale = 1.0 / (d as f32).sqrt();
        let pf = Array2::from_shape_vec((1, POINT_FEATURES), point_features(x_t).to_vec())
            .expect("point features");
        let tf = Array2::from_shape_vec((1, TIME_FEATURES), time_features(t).to_vec())
            .expect("time features");
        let pf = g.constant(pf);
        let tf = g.constant(tf);
        let p_tok = g.matmul(pf, vars.point_w);
        let p_tok = g.add(p_tok, vars.point_b);
        let t_tok = g.matmul(tf, vars.time_w);
        let t_tok = g.add(t_tok, vars.time_b);
        let mut tokens = g.concat_rows(&[p_tok, t_tok, vars.class]);
        for depth in 0..self.dims.depths {
            let eff = |g: &mut Graph, bt: BlockType| -> Var {
                let idx = self.block_index(depth, bt);
                let w = vars.blocks[idx];
                match adapter {
                    None => w,
                    Some(a) => {
                        let (b, av) = a.factors[idx];
                        let delta = g.matmul(b, av);
                        g.add(w, delta)
                    }
                }
            };
            let wq = eff(g, BlockType::Q);
            let wk = eff(g, BlockType::K);
            let wv = eff(g, BlockType::V);
            let wo = eff(g, BlockType::O);
            let q = g.matmul(tokens, wq);
            let k = g.matmul(tokens, wk);
            let v = g.matmul(tokens, wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled);
            let mixed = g.matmul(attn, v);
            let ctx = g.matmul(mixed, wo);
            tokens = g.add(tokens, ctx);
        }
        let point_row = g.slice_rows_one(tokens, 0);
        let out = g.matmul(point_row, vars.head_w);
        g.add(out, vars.head_b)
    }

    /// Taped flow-matching loss over a batch.
    pub fn fm_loss_taped(
        &self,
        g: &mut Graph,
        vars: &BaseVars,
        batch: &[FlowSample],
        adapter: Option<&AdapterVars>,
    ) -> Var {
        assert!(!batch.is_empty(), "fm_loss_taped on empty batch");
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Array2::zeros((batch.len(), 2));
        for (i, s) in batch.iter().enumerate() {
            preds.push(self.forward_taped(g, vars, s.x_t, s.t, adapter));
            let tgt = self.target_of(s);
            targets[[i, 0]] = tgt[0];
            targets[[i, 1]] = tgt[1];
        }
        let pred = g.concat_rows(&preds);
        let tgt = g.constant(targets);
        g.mse(pred, tgt)
    }
}

/// Recipe for training the base model itself on a target distribution.
#[derive(Debug, Clone)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Train every parameter of the base model against the flow-matching loss on
/// `source`. Returns the per-step loss history.
pub fn train_base(
    model: &mut BaseModel,
    source: &dyn FlowBatchSource,
    cfg: &BaseTrainConfig,
) -> Result<Vec<f32>> {
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(LofaError::Argument(
            "base training needs positive steps, lr and batch".into(),
        ));
    }
    let shapes: Vec<(usize, usize)> = model.named_params().iter().map(|(_, m)| m.dim()).collect();
    let mut opt = AdamW::new(AdamConfig::constant(cfg.lr), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = source.batch(cfg.batch_size, &mut rng);
        let mut g = Graph::new();
        let vars = model.vars(&mut g);
        let loss = model.fm_loss_taped(&mut g, &vars, &batch, None);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(LofaError::Numerical(format!(
                "base training loss {loss_val} at step {step}"
            )));
        }
        history.push(loss_val);
        let grads = g.backward(loss);
        let var_list = base_var_list(&vars);
        let grad_arrays: Vec<Array2<f32>> = var_list
            .iter()
            .zip(model.named_params())
            .map(|(v, (_, p))| grads.get(*v, p))
            .collect();
        opt.step(&mut model.params_mut(), &grad_arrays);
    }
    Ok(history)
}

pub fn base_var_list(vars: &BaseVars) -> Vec<Var> {
    let mut out = vars.blocks.clone();
    out.extend([
        vars.point_w,
        vars.point_b,
        vars.time_w,
        vars.time_b,
        vars.class,
        vars.head_w,
        vars.head_b,
    ]);
    out
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| standard_normal(rng) * sigma)
}

/// Unit Gaussian source used to pre-train the base model.
pub struct GaussianSource;

impl FlowBatchSource for GaussianSource {
    fn batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<FlowSample> {
        (0..n)
            .map(|_| {
                let x0 = [standard_normal(rng), standard_normal(rng)];
                let x1 = [standard_normal(rng), standard_normal(rng)];
                let t: f32 = rng.gen_range(0.0..1.0);
                FlowSample::new(x0, x1, t)
            })
            .collect()
    }
}
