//! Two-stage transformer hypernetwork.
//!
//! Stage-I consumes one weight block (tokenized as m row-tokens) plus the
//! block's depth/type embeddings, cross-attends to the condition tokens and
//! predicts the block's response map through a sigmoid head. Stage-II reuses
//! the Stage-I backbone (parameter copy at construction), adds cross-attention
//! sublayers over the Stage-I final-layer features at configured layer
//! indices, and predicts the (B, A) LoRA factors from a pooled representation.
//!
//! Forward passes run on the autodiff tape; inference simply never calls
//! backward. All forwards are pure functions of (parameters, inputs).

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{LofaError, Result};
use crate::graph::{Graph, Var};
use crate::lorakit::{AdapterMeta, LoraAdapter};
use crate::toybase::{normal_matrix, BaseModel, ModelDims, WeightBlock};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NULL_ID: usize = 2;
pub const RESERVED_TOKENS: usize = 3;

const RMS_EPS: f32 = 1e-6;

/// Word-level vocabulary with reserved {PAD, UNK, NULL} ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a prompt corpus: lowercase, whitespace split, unique words
    /// sorted for determinism.
    pub fn build(corpus: &[String]) -> Self {
        let mut words: Vec<String> = corpus
            .iter()
            .flat_map(|p| p.to_lowercase().split_whitespace().map(String::from).collect::<Vec<_>>())
            .collect();
        words.sort();
        words.dedup();
        let mut v = Self {
            words,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + RESERVED_TOKENS))
            .collect();
    }

    pub fn len_with_reserved(&self) -> usize {
        self.words.len() + RESERVED_TOKENS
    }

    pub fn id_of(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK_ID)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Encoded user prompt. Token ids reference the net's condition embedding
/// table; the empty prompt maps to a single NULL token.
#[derive(Debug, Clone)]
pub struct Condition {
    pub token_ids: Vec<usize>,
    pub prompt_text: String,
}

/// Deterministic tokenization: lowercase + whitespace split, OOV -> UNK,
/// truncation at `max_cond_len`. Total function.
pub fn encode_condition(prompt: &str, vocab: &Vocab, max_cond_len: usize) -> Condition {
    let mut ids: Vec<usize> = prompt
        .to_lowercase()
        .split_whitespace()
        .take(max_cond_len.max(1))
        .map(|w| vocab.id_of(w))
        .collect();
    if ids.is_empty() {
        ids.push(NULL_ID);
    }
    Condition {
        token_ids: ids,
        prompt_text: prompt.to_string(),
    }
}

/// Whether the backbone tokens are weight rows (default) or condition tokens
/// (the "prompt input" ablation, which moves weights to cross-attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Weights,
    Prompt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperConfig {
    pub layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_c: usize,
    pub ffn_mult: usize,
    pub max_cond_len: usize,
    pub input_mode: InputMode,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_h: 64,
            heads: 4,
            d_c: 64,
            ffn_mult: 4,
            max_cond_len: 16,
            input_mode: InputMode::Weights,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_h == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(LofaError::Config("hypernet dims must be positive".into()));
        }
        if self.d_h % self.heads != 0 {
            return Err(LofaError::Config(format!(
                "d_h {} not divisible by heads {}",
                self.d_h, self.heads
            )));
        }
        if self.d_c != self.d_h {
            return Err(LofaError::Config(
                "conditioning width must equal hidden width".into(),
            ));
        }
        Ok(())
    }

    /// Default Stage-I feature injection points: 4th & 8th layer, 1-indexed.
    pub fn default_feature_layers() -> Vec<usize> {
        vec![4, 8]
    }
}

struct AttnParams {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

impl AttnParams {
    fn new(rng: &mut ChaCha8Rng, d: usize, kv_dim: usize) -> Self {
        Self {
            wq: normal_matrix(rng, d, d, 0.02),
            wk: normal_matrix(rng, kv_dim, d, 0.02),
            wv: normal_matrix(rng, kv_dim, d, 0.02),
            wo: normal_matrix(rng, d, d, 0.02),
        }
    }
}

struct LayerParams {
    g_self: Array2<f32>,
    self_attn: AttnParams,
    g_cross: Array2<f32>,
    cross_attn: AttnParams,
    g_ffn: Array2<f32>,
    ffn_w1: Array2<f32>,
    ffn_b1: Array2<f32>,
    ffn_w2: Array2<f32>,
    ffn_b2: Array2<f32>,
}

impl LayerParams {
    fn new(rng: &mut ChaCha8Rng, d: usize, cross_kv_dim: usize, ffn_mult: usize) -> Self {
        Self {
            g_self: Array2::ones((1, d)),
            self_attn: AttnParams::new(rng, d, d),
            g_cross: Array2::ones((1, d)),
            cross_attn: AttnParams::new(rng, d, cross_kv_dim),
            g_ffn: Array2::ones((1, d)),
            ffn_w1: normal_matrix(rng, d, d * ffn_mult, 0.02),
            ffn_b1: Array2::zeros((1, d * ffn_mult)),
            ffn_w2: normal_matrix(rng, d * ffn_mult, d, 0.02),
            ffn_b2: Array2::zeros((1, d)),
        }
    }
}

struct FeatParams {
    g_feat: Array2<f32>,
    attn: AttnParams,
}

/// Shared trunk of both stages.
pub struct Backbone {
    pub cfg: HyperConfig,
    pub dims: ModelDims,
    pub vocab: Vocab,
    tok_w: Array2<f32>,
    tok_b: Array2<f32>,
    e_pos: Array2<f32>,
    e_type: Array2<f32>,
    cond_embed: Array2<f32>,
    layers: Vec<LayerParams>,
}

impl Backbone {
    fn new(cfg: HyperConfig, dims: ModelDims, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_h;
        // Cross-attention memory width: condition tokens in Weights mode,
        // weight-row tokens (already projected to d_h) in Prompt mode.
        let cross_kv = match cfg.input_mode {
            InputMode::Weights => cfg.d_c,
            InputMode::Prompt => d,
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::new(&mut rng, d, cross_kv, cfg.ffn_mult))
            .collect();
        Ok(Self {
            tok_w: normal_matrix(&mut rng, dims.n, d, 0.02),
            tok_b: Array2::zeros((1, d)),
            e_pos: normal_matrix(&mut rng, dims.depths, d, 0.02),
            e_type: normal_matrix(&mut rng, 4, d, 0.02),
            cond_embed: normal_matrix(&mut rng, vocab.len_with_reserved(), cfg.d_c, 0.02),
            layers,
            cfg,
            dims,
            vocab,
        })
    }

    fn named_params(&self) -> Vec<(String, &Array2<f32>)> {
        let mut out: Vec<(String, &Array2<f32>)> = vec![
            ("tok/w".into(), &self.tok_w),
            ("tok/b".into(), &self.tok_b),
            ("e_pos".into(), &self.e_pos),
            ("e_type".into(), &self.e_type),
            ("cond_embed".into(), &self.cond_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers/{i}/{s}");
            out.push((p("g_self"), &l.g_self));
            out.push((p("self/wq"), &l.self_attn.wq));
            out.push((p("self/wk"), &l.self_attn.wk));
            out.push((p("self/wv"), &l.self_attn.wv));
            out.push((p("self/wo"), &l.self_attn.wo));
            out.push((p("g_cross"), &l.g_cross));
            out.push((p("cross/wq"), &l.cross_attn.wq));
            out.push((p("cross/wk"), &l.cross_attn.wk));
            out.push((p("cross/wv"), &l.cross_attn.wv));
            out.push((p("cross/wo"), &l.cross_attn.wo));
            out.push((p("g_ffn"), &l.g_ffn));
            out.push((p("ffn/w1"), &l.ffn_w1));
            out.push((p("ffn/b1"), &l.ffn_b1));
            out.push((p("ffn/w2"), &l.ffn_w2));
            out.push((p("ffn/b2"), &l.ffn_b2));
        }
        out
    }
}

struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

struct LayerVars {
    g_self: Var,
    self_attn: AttnVars,
    g_cross: Var,
    cross_attn: AttnVars,
    g_ffn: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
}

struct FeatVars {
    g_feat: Var,
    attn: AttnVars,
}

pub struct BackboneVars {
    tok_w: Var,
    tok_b: Var,
    e_pos: Var,
    e_type: Var,
    cond_embed: Var,
    layers: Vec<LayerVars>,
}

fn attn_vars(g: &mut Graph, p: &AttnParams) -> AttnVars {
    AttnVars {
        wq: g.leaf(p.wq.clone()),
        wk: g.leaf(p.wk.clone()),
        wv: g.leaf(p.wv.clone()),
        wo: g.leaf(p.wo.clone()),
    }
}

impl Backbone {
    fn vars(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars {
            tok_w: g.leaf(self.tok_w.clone()),
            tok_b: g.leaf(self.tok_b.clone()),
            e_pos: g.leaf(self.e_pos.clone()),
            e_type: g.leaf(self.e_type.clone()),
            cond_embed: g.leaf(self.cond_embed.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    g_self: g.leaf(l.g_self.clone()),
                    self_attn: attn_vars(g, &l.self_attn),
                    g_cross: g.leaf(l.g_cross.clone()),
                    cross_attn: attn_vars(g, &l.cross_attn),
                    g_ffn: g.leaf(l.g_ffn.clone()),
                    ffn_w1: g.leaf(l.ffn_w1.clone()),
                    ffn_b1: g.leaf(l.ffn_b1.clone()),
                    ffn_w2: g.leaf(l.ffn_w2.clone()),
                    ffn_b2: g.leaf(l.ffn_b2.clone()),
                })
                .collect(),
        }
    }

    fn var_list(vars: &BackboneVars) -> Vec<Var> {
        let mut out = vec![
            vars.tok_w,
            vars.tok_b,
            vars.e_pos,
            vars.e_type,
            vars.cond_embed,
        ];
        for l in &vars.layers {
            out.extend([
                l.g_self,
                l.self_attn.wq,
                l.self_attn.wk,
                l.self_attn.wv,
                l.self_attn.wo,
                l.g_cross,
                l.cross_attn.wq,
                l.cross_attn.wk,
                l.cross_attn.wv,
                l.cross_attn.wo,
                l.g_ffn,
                l.ffn_w1,
                l.ffn_b1,
                l.ffn_w2,
                l.ffn_b2,
            ]);
        }
        out
    }

    fn check_block(&self, block: &WeightBlock) -> Result<()> {
        if block.matrix.dim() != (self.dims.m, self.dims.n) {
            return Err(LofaError::Shape {
                depth: block.depth,
                block_type: block.block_type,
                expected: format!("({}, {})", self.dims.m, self.dims.n),
                got: format!("{:?}", block.matrix.dim()),
            });
        }
        if block.depth >= self.dims.depths {
            return Err(LofaError::Argument(format!(
                "depth {} outside embedding range 0..{}",
                block.depth, self.dims.depths
            )));
        }
        Ok(())
    }

    /// Input tokens and cross-attention memory for one (block, condition)
    /// sample. E_pos[depth] and E_type[type] are added to every backbone
    /// token after projection.
    fn embed(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        block: &WeightBlock,
        cond: &Condition,
    ) -> (Var, Var) {
        let w = g.constant(block.matrix.clone());
        let w_tokens = g.matmul(w, vars.tok_w);
        let w_tokens = g.add_row(w_tokens, vars.tok_b);
        let e_pos = g.gather_rows(vars.e_pos, &[block.depth]);
        let e_type = g.gather_rows(vars.e_type, &[block.block_type.index()]);
        let cond_tokens = g.gather_rows(vars.cond_embed, &cond.token_ids);
        match self.cfg.input_mode {
            InputMode::Weights => {
                let x = g.add_row(w_tokens, e_pos);
                let x = g.add_row(x, e_type);
                (x, cond_tokens)
            }
            InputMode::Prompt => {
                let x = g.add_row(cond_tokens, e_pos);
                let x = g.add_row(x, e_type);
                (x, w_tokens)
            }
        }
    }

    /// Run the trunk. `feature` holds the Stage-I feature memory plus the
    /// per-layer feature-attention parameters keyed by 1-indexed layer.
    fn run(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        mut x: Var,
        cross_kv: Var,
        feature: Option<(&[(usize, FeatVars)], Var)>,
    ) -> Var {
        let heads = self.cfg.heads;
        for (i, l) in vars.layers.iter().enumerate() {
            let n1 = g.rms_norm_rows(x, RMS_EPS);
            let n1 = g.mul_row(n1, l.g_self);
            let sa = mha(g, n1, n1, &l.self_attn, heads);
            x = g.add(x, sa);

            let n2 = g.rms_norm_rows(x, RMS_EPS);
            let n2 = g.mul_row(n2, l.g_cross);
            let ca = mha(g, n2, cross_kv, &l.cross_attn, heads);
            x = g.add(x, ca);

            if let Some((feat_layers, f1)) = &feature {
                if let Some((_, fv)) = feat_layers.iter().find(|(idx, _)| *idx == i + 1) {
                    let nf = g.rms_norm_rows(x, RMS_EPS);
                    let nf = g.mul_row(nf, fv.g_feat);
                    let fa = mha(g, nf, *f1, &fv.attn, heads);
                    x = g.add(x, fa);
                }
            }

            let n3 = g.rms_norm_rows(x, RMS_EPS);
            let n3 = g.mul_row(n3, l.g_ffn);
            let h = g.matmul(n3, l.ffn_w1);
            let h = g.add_row(h, l.ffn_b1);
            let h = g.silu(h);
            let ff = g.matmul(h, l.ffn_w2);
            let ff = g.add_row(ff, l.ffn_b2);
            x = g.add(x, ff);
        }
        x
    }
}

/// Multi-head attention: queries from `x`, keys/values from `kv`.
fn mha(g: &mut Graph, x: Var, kv: Var, p: &AttnVars, heads: usize) -> Var {
    let q = g.matmul(x, p.wq);
    let k = g.matmul(kv, p.wk);
    let v = g.matmul(kv, p.wv);
    let d = g.value(q).ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        parts.push(g.matmul(attn, vh));
    }
    let ctx = g.concat_cols(&parts);
    g.matmul(ctx, p.wo)
}

/// Per-block token features captured from the Stage-I backbone's final layer.
pub type StageOneFeatures = Array2<f32>;

pub struct StageOneNet {
    pub backbone: Backbone,
    head_w: Array2<f32>,
    head_b: Array2<f32>,
    pub trained_steps: usize,
}

pub struct StageOneVars {
    pub backbone: BackboneVars,
    head_w: Var,
    head_b: Var,
}

impl StageOneNet {
    pub fn new(cfg: HyperConfig, dims: ModelDims, vocab: Vocab, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(cfg, dims, vocab, seed)?;
        // Zero-init head: a fresh net predicts R-hat = 0.5 everywhere.
        let (hw, hb) = match backbone.cfg.input_mode {
            InputMode::Weights => (
                Array2::zeros((backbone.cfg.d_h, dims.n)),
                Array2::zeros((1, dims.n)),
            ),
            InputMode::Prompt => (
                Array2::zeros((backbone.cfg.d_h, dims.m * dims.n)),
                Array2::zeros((1, dims.m * dims.n)),
            ),
        };
        Ok(Self {
            backbone,
            head_w: hw,
            head_b: hb,
            trained_steps: 0,
        })
    }

    pub fn vars(&self, g: &mut Graph) -> StageOneVars {
        StageOneVars {
            backbone: self.backbone.vars(g),
            head_w: g.leaf(self.head_w.clone()),
            head_b: g.leaf(self.head_b.clone()),
        }
    }

    pub fn var_list(vars: &StageOneVars) -> Vec<Var> {
        let mut out = Backbone::var_list(&vars.backbone);
        out.extend([vars.head_w, vars.head_b]);
        out
    }

    /// Taped forward: returns (R-hat in (0,1) of shape (m, n), F_stage1).
    pub fn forward_taped(
        &self,
        g: &mut Graph,
        vars: &StageOneVars,
        block: &WeightBlock,
        cond: &Condition,
    ) -> Result<(Var, Var)> {
        self.backbone.check_block(block)?;
        let (x, cross_kv) = self.backbone.embed(g, &vars.backbone, block, cond);
        let f1 = self.backbone.run(g, &vars.backbone, x, cross_kv, None);
        let rhat = match self.backbone.cfg.input_mode {
            InputMode::Weights => {
                let logits = g.matmul(f1, vars.head_w);
                let logits = g.add_row(logits, vars.head_b);
                g.sigmoid(logits)
            }
            InputMode::Prompt => {
                let pooled = g.mean_rows(f1);
                let logits = g.matmul(pooled, vars.head_w);
                let logits = g.add_row(logits, vars.head_b);
                let logits = g.reshape(logits, self.backbone.dims.m, self.backbone.dims.n);
                g.sigmoid(logits)
            }
        };
        Ok((rhat, f1))
    }

    /// Inference forward (no gradients kept).
    pub fn forward(
        &self,
        block: &WeightBlock,
        cond: &Condition,
    ) -> Result<(Array2<f32>, StageOneFeatures)> {
        let mut g = Graph::new();
        let vars = self.vars(&mut g);
        let (rhat, f1) = self.forward_taped(&mut g, &vars, block, cond)?;
        Ok((g.value(rhat).clone(), g.value(f1).clone()))
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f32>)> {
        let mut out = self.backbone.named_params();
        out.push(("head/w".into(), &self.head_w));
        out.push(("head/b".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f32>> {
        let mut out = backbone_params_mut(&mut self.backbone);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = serde_json::json!({
            "config": self.backbone.cfg,
            "model_dims": self.backbone.dims,
            "vocab": self.backbone.vocab.words(),
            "trained_steps": self.trained_steps,
        });
        let c = TensorContainer {
            kind: "stage1".into(),
            arch,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        };
        c.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = TensorContainer::load(dir)?;
        if c.kind != "stage1" {
            return Err(LofaError::Format {
                what: "manifest.json".into(),
                detail: format!("expected kind stage1, got {}", c.kind),
            });
        }
        let cfg: HyperConfig = serde_json::from_value(c.arch["config"].clone())?;
        let dims: ModelDims = serde_json::from_value(c.arch["model_dims"].clone())?;
        let words: Vec<String> = serde_json::from_value(c.arch["vocab"].clone())?;
        let mut vocab = Vocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        let mut net = StageOneNet::new(cfg, dims, vocab, 0)?;
        net.trained_steps = c.arch["trained_steps"].as_u64().unwrap_or(0) as usize;
        let names = net_names(&net.named_params());
        load_named(&mut net.params_mut(), &names, &c)?;
        Ok(net)
    }

    pub fn fingerprint(&self) -> String {
        let c = TensorContainer {
            kind: "stage1".into(),
            arch: serde_json::Value::Null,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        };
        c.fingerprint()
    }
}

pub struct StageTwoNet {
    pub backbone: Backbone,
    /// (1-indexed layer, params), ascending.
    feat: Vec<(usize, FeatParams)>,
    head_b_w: Array2<f32>,
    head_b_b: Array2<f32>,
    head_a_w: Array2<f32>,
    head_a_b: Array2<f32>,
    pub rank: usize,
    pub trained_steps: usize,
}

pub struct StageTwoVars {
    pub backbone: BackboneVars,
    feat: Vec<(usize, FeatVars)>,
    head_b_w: Var,
    head_b_b: Var,
    head_a_w: Var,
    head_a_b: Var,
}

impl StageTwoNet {
    /// Backbone parameters are copied from the trained Stage-I net; feature
    /// cross-attention sublayers and the two factor heads are fresh.
    pub fn from_stage1(
        s1: &StageOneNet,
        feature_layers: &[usize],
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let backbone = clone_backbone(&s1.backbone);
        Self::assemble(backbone, feature_layers, rank, seed)
    }

    /// Fresh random backbone (single-stage ablations).
    pub fn fresh(
        cfg: HyperConfig,
        dims: ModelDims,
        vocab: Vocab,
        feature_layers: &[usize],
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::new(cfg, dims, vocab, seed)?;
        Self::assemble(backbone, feature_layers, rank, seed.wrapping_add(1))
    }

    fn assemble(
        backbone: Backbone,
        feature_layers: &[usize],
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(LofaError::Argument("rank must be >= 1".into()));
        }
        for &fl in feature_layers {
            if fl == 0 || fl > backbone.cfg.layers {
                return Err(LofaError::Config(format!(
                    "feature layer {fl} outside 1..={}",
                    backbone.cfg.layers
                )));
            }
        }
        let mut dedup = feature_layers.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != feature_layers.len() {
            return Err(LofaError::Config("duplicate feature layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = backbone.cfg.d_h;
        let mut feat: Vec<(usize, FeatParams)> = feature_layers
            .iter()
            .map(|&fl| {
                (
                    fl,
                    FeatParams {
                        g_feat: Array2::ones((1, d)),
                        attn: AttnParams::new(&mut rng, d, d),
                    },
                )
            })
            .collect();
        feat.sort_by_key(|(fl, _)| *fl);
        let (m, n) = (backbone.dims.m, backbone.dims.n);
        Ok(Self {
            // Zero-init heads: a fresh net predicts B-hat = A-hat = 0.
            head_b_w: Array2::zeros((d, m * rank)),
            head_b_b: Array2::zeros((1, m * rank)),
            head_a_w: Array2::zeros((d, rank * n)),
            head_a_b: Array2::zeros((1, rank * n)),
            backbone,
            feat,
            rank,
            trained_steps: 0,
        })
    }

    pub fn feature_layers(&self) -> Vec<usize> {
        self.feat.iter().map(|(fl, _)| *fl).collect()
    }

    pub fn vars(&self, g: &mut Graph) -> StageTwoVars {
        StageTwoVars {
            backbone: self.backbone.vars(g),
            feat: self
                .feat
                .iter()
                .map(|(fl, fp)| {
                    (
                        *fl,
                        FeatVars {
                            g_feat: g.leaf(fp.g_feat.clone()),
                            attn: attn_vars(g, &fp.attn),
                        },
                    )
                })
                .collect(),
            head_b_w: g.leaf(self.head_b_w.clone()),
            head_b_b: g.leaf(self.head_b_b.clone()),
            head_a_w: g.leaf(self.head_a_w.clone()),
            head_a_b: g.leaf(self.head_a_b.clone()),
        }
    }

    pub fn var_list(vars: &StageTwoVars) -> Vec<Var> {
        let mut out = Backbone::var_list(&vars.backbone);
        for (_, fv) in &vars.feat {
            out.extend([fv.g_feat, fv.attn.wq, fv.attn.wk, fv.attn.wv, fv.attn.wo]);
        }
        out.extend([vars.head_b_w, vars.head_b_b, vars.head_a_w, vars.head_a_b]);
        out
    }

    /// Taped forward: (B-hat m x r, A-hat r x n). `f1` must come from the
    /// same (block, cond) pair fed here; it enters as a constant, so no
    /// gradient flows back into Stage-I.
    pub fn forward_taped(
        &self,
        g: &mut Graph,
        vars: &StageTwoVars,
        block: &WeightBlock,
        cond: &Condition,
        f1: &StageOneFeatures,
    ) -> Result<(Var, Var)> {
        self.backbone.check_block(block)?;
        if !self.feat.is_empty() && f1.ncols() != self.backbone.cfg.d_h {
            return Err(LofaError::Argument(format!(
                "stage-1 feature width {} != d_h {}",
                f1.ncols(),
                self.backbone.cfg.d_h
            )));
        }
        let (x, cross_kv) = self.backbone.embed(g, &vars.backbone, block, cond);
        let f1_var = g.constant(f1.clone());
        let out = self.backbone.run(
            g,
            &vars.backbone,
            x,
            cross_kv,
            Some((&vars.feat, f1_var)),
        );
        let pooled = g.mean_rows(out);
        let b_flat = g.matmul(pooled, vars.head_b_w);
        let b_flat = g.add_row(b_flat, vars.head_b_b);
        let b_hat = g.reshape(b_flat, self.backbone.dims.m, self.rank);
        let a_flat = g.matmul(pooled, vars.head_a_w);
        let a_flat = g.add_row(a_flat, vars.head_a_b);
        let a_hat = g.reshape(a_flat, self.rank, self.backbone.dims.n);
        Ok((b_hat, a_hat))
    }

    pub fn forward(
        &self,
        block: &WeightBlock,
        cond: &Condition,
        f1: &StageOneFeatures,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        let mut g = Graph::new();
        let vars = self.vars(&mut g);
        let (b, a) = self.forward_taped(&mut g, &vars, block, cond, f1)?;
        Ok((g.value(b).clone(), g.value(a).clone()))
    }

    /// Final-layer backbone features for one (block, cond) sample; the
    /// guidance signal when this net plays the lightweight first stage.
    pub fn backbone_features(
        &self,
        block: &WeightBlock,
        cond: &Condition,
        f1: &StageOneFeatures,
    ) -> Result<Array2<f32>> {
        self.backbone.check_block(block)?;
        let mut g = Graph::new();
        let vars = self.vars(&mut g);
        let (x, cross_kv) = self.backbone.embed(&mut g, &vars.backbone, block, cond);
        let f1_var = g.constant(f1.clone());
        let out = self.backbone.run(
            &mut g,
            &vars.backbone,
            x,
            cross_kv,
            Some((&vars.feat, f1_var)),
        );
        Ok(g.value(out).clone())
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f32>)> {
        let mut out = self.backbone.named_params();
        for (fl, fp) in &self.feat {
            let p = |s: &str| format!("feat/{fl}/{s}");
            out.push((p("g_feat"), &fp.g_feat));
            out.push((p("wq"), &fp.attn.wq));
            out.push((p("wk"), &fp.attn.wk));
            out.push((p("wv"), &fp.attn.wv));
            out.push((p("wo"), &fp.attn.wo));
        }
        out.push(("head_b/w".into(), &self.head_b_w));
        out.push(("head_b/b".into(), &self.head_b_b));
        out.push(("head_a/w".into(), &self.head_a_w));
        out.push(("head_a/b".into(), &self.head_a_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f32>> {
        let mut out = backbone_params_mut(&mut self.backbone);
        for (_, fp) in &mut self.feat {
            out.push(&mut fp.g_feat);
            out.push(&mut fp.attn.wq);
            out.push(&mut fp.attn.wk);
            out.push(&mut fp.attn.wv);
            out.push(&mut fp.attn.wo);
        }
        out.push(&mut self.head_b_w);
        out.push(&mut self.head_b_b);
        out.push(&mut self.head_a_w);
        out.push(&mut self.head_a_b);
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = serde_json::json!({
            "config": self.backbone.cfg,
            "model_dims": self.backbone.dims,
            "vocab": self.backbone.vocab.words(),
            "feature_layers": self.feature_layers(),
            "rank": self.rank,
            "trained_steps": self.trained_steps,
        });
        let c = TensorContainer {
            kind: "stage2".into(),
            arch,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        };
        c.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = TensorContainer::load(dir)?;
        if c.kind != "stage2" {
            return Err(LofaError::Format {
                what: "manifest.json".into(),
                detail: format!("expected kind stage2, got {}", c.kind),
            });
        }
        let cfg: HyperConfig = serde_json::from_value(c.arch["config"].clone())?;
        let dims: ModelDims = serde_json::from_value(c.arch["model_dims"].clone())?;
        let words: Vec<String> = serde_json::from_value(c.arch["vocab"].clone())?;
        let feature_layers: Vec<usize> = serde_json::from_value(c.arch["feature_layers"].clone())?;
        let rank = c.arch["rank"].as_u64().unwrap_or(0) as usize;
        let mut vocab = Vocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        let mut net = StageTwoNet::fresh(cfg, dims, vocab, &feature_layers, rank, 0)?;
        net.trained_steps = c.arch["trained_steps"].as_u64().unwrap_or(0) as usize;
        let names = net_names(&net.named_params());
        load_named(&mut net.params_mut(), &names, &c)?;
        Ok(net)
    }

    pub fn fingerprint(&self) -> String {
        let c = TensorContainer {
            kind: "stage2".into(),
            arch: serde_json::Value::Null,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        };
        c.fingerprint()
    }

    /// Max |Δ| between this net's backbone and another backbone; 0 right
    /// after `from_stage1`.
    pub fn backbone_param_distance(&self, s1: &StageOneNet) -> f32 {
        let a = self.backbone.named_params();
        let b = s1.backbone.named_params();
        let mut max = 0.0f32;
        for ((_, ma), (_, mb)) in a.iter().zip(b.iter()) {
            for (x, y) in ma.iter().zip(mb.iter()) {
                max = max.max((x - y).abs());
            }
        }
        max
    }
}

fn net_names(named: &[(String, &Array2<f32>)]) -> Vec<String> {
    named.iter().map(|(n, _)| n.clone()).collect()
}

fn load_named(
    params: &mut [&mut Array2<f32>],
    names: &[String],
    c: &TensorContainer,
) -> Result<()> {
    for (p, name) in params.iter_mut().zip(names) {
        let t = c.tensor(name)?;
        if t.dim() != p.dim() {
            return Err(LofaError::Format {
                what: name.clone(),
                detail: format!("shape {:?} != expected {:?}", t.dim(), p.dim()),
            });
        }
        **p = t.clone();
    }
    Ok(())
}

fn backbone_params_mut(b: &mut Backbone) -> Vec<&mut Array2<f32>> {
    let mut out: Vec<&mut Array2<f32>> = vec![
        &mut b.tok_w,
        &mut b.tok_b,
        &mut b.e_pos,
        &mut b.e_type,
        &mut b.cond_embed,
    ];
    for l in &mut b.layers {
        out.push(&mut l.g_self);
        out.push(&mut l.self_attn.wq);
        out.push(&mut l.self_attn.wk);
        out.push(&mut l.self_attn.wv);
        out.push(&mut l.self_attn.wo);
        out.push(&mut l.g_cross);
        out.push(&mut l.cross_attn.wq);
        out.push(&mut l.cross_attn.wk);
        out.push(&mut l.cross_attn.wv);
        out.push(&mut l.cross_attn.wo);
        out.push(&mut l.g_ffn);
        out.push(&mut l.ffn_w1);
        out.push(&mut l.ffn_b1);
        out.push(&mut l.ffn_w2);
        out.push(&mut l.ffn_b2);
    }
    out
}

fn clone_backbone(b: &Backbone) -> Backbone {
    Backbone {
        cfg: b.cfg.clone(),
        dims: b.dims,
        vocab: b.vocab.clone(),
        tok_w: b.tok_w.clone(),
        tok_b: b.tok_b.clone(),
        e_pos: b.e_pos.clone(),
        e_type: b.e_type.clone(),
        cond_embed: b.cond_embed.clone(),
        layers: b
            .layers
            .iter()
            .map(|l| LayerParams {
                g_self: l.g_self.clone(),
                self_attn: AttnParams {
                    wq: l.self_attn.wq.clone(),
                    wk: l.self_attn.wk.clone(),
                    wv: l.self_attn.wv.clone(),
                    wo: l.self_attn.wo.clone(),
                },
                g_cross: l.g_cross.clone(),
                cross_attn: AttnParams {
                    wq: l.cross_attn.wq.clone(),
                    wk: l.cross_attn.wk.clone(),
                    wv: l.cross_attn.wv.clone(),
                    wo: l.cross_attn.wo.clone(),
                },
                g_ffn: l.g_ffn.clone(),
                ffn_w1: l.ffn_w1.clone(),
                ffn_b1: l.ffn_b1.clone(),
                ffn_w2: l.ffn_w2.clone(),
                ffn_b2: l.ffn_b2.clone(),
            })
            .collect(),
    }
}

/// Downstream inference: predict a full LoRA adapter for a prompt.
///
/// Iterates every (depth, block_type) block, runs Stage-I for its features,
/// then Stage-II for its factors. Pure forward passes; no optimization and no
/// gradient application happen on this path.
pub fn predict_lora(
    s1: &StageOneNet,
    s2: &StageTwoNet,
    base: &BaseModel,
    prompt: &str,
) -> Result<LoraAdapter> {
    let cond = encode_condition(prompt, &s1.backbone.vocab, s1.backbone.cfg.max_cond_len);
    let block_order = base.dims.block_keys();
    let mut factors = Vec::with_capacity(block_order.len());
    for &(depth, bt) in &block_order {
        let block = base.block(depth, bt);
        let (_rhat, f1) = s1.forward(block, &cond)?;
        let (b, a) = s2.forward(block, &cond, &f1)?;
        factors.push((b, a));
    }
    Ok(LoraAdapter {
        rank: s2.rank,
        block_order,
        factors,
        meta: AdapterMeta {
            task_id: "predicted".into(),
            prompt_text: prompt.to_string(),
            training_steps: 0,
            seed: 0,
            base_fingerprint: base.fingerprint(),
        },
    })
}

/// Binarize a Stage-I probability map at 0.5 (ties -> 0) for evaluation.
pub fn binarize_rhat(rhat: &Array2<f32>) -> Array2<u8> {
    rhat.mapv(|v| u8::from(v > 0.5))
}
