//! Tiny pre-layernorm transformer family: standard or gated FFN, byte-level LM
//! or sequence-classifier head.

mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mha::ReplacementMlp;
use crate::moe::MoeLayer;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub use forward::{
    forward, forward_tape, ActivationTrace, Bound, Capture, ForwardOutput, SiteTrace, SiteVars,
    TokenBatch,
};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Standard,
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => crate::autodiff::kernels::gelu(x),
        }
    }

    pub fn apply_slice<T: Real>(self, xs: &mut [T]) {
        xs.iter_mut().for_each(|x| *x = self.apply(*x));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskHead {
    Lm,
    Classifier { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub expansion_factor: usize,
    pub ffn_kind: FfnKind,
    pub activation: Activation,
    pub task_head: TaskHead,
    /// Attention masking; defaults to causal for the LM head and bidirectional otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causal: Option<bool>,
}

impl TransformerConfig {
    /// Desk-scale byte-level LM: L=2, d_m=128, 4 heads, e=4, context 128, vocab 256.
    pub fn desk_lm() -> Self {
        TransformerConfig {
            vocab_size: 256,
            context_length: 128,
            num_layers: 2,
            model_dim: 128,
            num_heads: 4,
            expansion_factor: 4,
            ffn_kind: FfnKind::Standard,
            activation: Activation::Gelu,
            task_head: TaskHead::Lm,
            causal: None,
        }
    }

    pub fn desk_classifier(num_classes: usize) -> Self {
        TransformerConfig {
            task_head: TaskHead::Classifier { num_classes },
            ..Self::desk_lm()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.expansion_factor
    }

    pub fn is_causal(&self) -> bool {
        self.causal
            .unwrap_or(matches!(self.task_head, TaskHead::Lm))
    }

    pub fn output_dim(&self) -> usize {
        match self.task_head {
            TaskHead::Lm => self.vocab_size,
            TaskHead::Classifier { num_classes } => num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.num_layers < 1 {
            v.push("num_layers must be >= 1".to_string());
        }
        if self.expansion_factor < 1 {
            v.push("expansion_factor must be >= 1".to_string());
        }
        if self.model_dim < 1 {
            v.push("model_dim must be >= 1".to_string());
        }
        if self.num_heads < 1 || self.model_dim % self.num_heads.max(1) != 0 {
            v.push(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < 1 {
            v.push("vocab_size must be >= 1".to_string());
        }
        if self.context_length < 1 {
            v.push("context_length must be >= 1".to_string());
        }
        if let TaskHead::Classifier { num_classes } = self.task_head {
            if num_classes < 2 {
                v.push("classifier needs at least 2 classes".to_string());
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Which module a MoE conversion or replacement targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Q,
    K,
    V,
    O,
    Ffn,
}

impl SiteKind {
    pub const PROJECTIONS: [SiteKind; 4] = [SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::O];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Q => "q",
            SiteKind::K => "k",
            SiteKind::V => "v",
            SiteKind::O => "o",
            SiteKind::Ffn => "ffn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn ffn(layer: usize) -> Self {
        Site {
            layer,
            kind: SiteKind::Ffn,
        }
    }

    pub fn proj(layer: usize, kind: SiteKind) -> Self {
        Site { layer, kind }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.kind.as_str(), self.layer)
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, layer) = s
            .split_once('.')
            .ok_or_else(|| Error::input(format!("site `{s}` is not of the form kind.layer")))?;
        let kind = match kind {
            "q" => SiteKind::Q,
            "k" => SiteKind::K,
            "v" => SiteKind::V,
            "o" => SiteKind::O,
            "ffn" => SiteKind::Ffn,
            _ => return Err(Error::input(format!("unknown site kind `{kind}`"))),
        };
        let layer = layer
            .parse()
            .map_err(|_| Error::input(format!("bad layer index in `{s}`")))?;
        Ok(Site { layer, kind })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut rng::Rng, d_in: usize, d_out: usize, std: f64) -> Self {
        Linear {
            weight: rng::normal_tensor(rng, &[d_in, d_out], std),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        add_bias_inplace(&mut y, &self.bias);
        Ok(y)
    }
}

pub(crate) fn add_bias_inplace<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let rows = y.rows();
    for r in 0..rows {
        y.row_mut(r)
            .iter_mut()
            .zip(b.data())
            .for_each(|(o, &bv)| *o = *o + bv);
    }
}

/// `W2ᵀ h` without the output bias, where `h = act(W1ᵀx + b1)` or, gated,
/// `h = act(Wgᵀx) ∘ (W1ᵀx + b1)`. Shared by dense FFNs and expert slices so
/// both follow one operation order.
pub(crate) fn ffn_apply<T: Real>(
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    wg: Option<&Tensor<T>>,
    act: Activation,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut up = x.matmul(w1)?;
    add_bias_inplace(&mut up, b1);
    let h = match wg {
        None => {
            act.apply_slice(up.data_mut());
            up
        }
        Some(wg) => {
            let mut g = x.matmul(wg)?;
            act.apply_slice(g.data_mut());
            up.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(u, &gv)| *u = gv * *u);
            up
        }
    };
    h.matmul(w2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormWeights {
    pub fn new(d: usize) -> Self {
        LayerNormWeights {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Two-layer FFN: `W2ᵀ act(W1ᵀ x + b1) + b2`, or for the gated kind
/// `W2ᵀ (act(Wgᵀ x) ∘ (W1ᵀ x + b1)) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[d_m, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, d_m]`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[d_m, hidden]`, gated kind only.
    pub wg: Option<Tensor>,
}

impl FfnWeights {
    pub fn init(rng: &mut rng::Rng, d: usize, hidden: usize, gated: bool, resid_std: f64) -> Self {
        let w1 = rng::normal_tensor(rng, &[d, hidden], INIT_STD);
        let w2 = rng::normal_tensor(rng, &[hidden, d], resid_std);
        let wg = gated.then(|| rng::normal_tensor(rng, &[d, hidden], INIT_STD));
        FfnWeights {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[d]),
            wg,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn is_gated(&self) -> bool {
        self.wg.is_some()
    }

    /// Hidden representation the sparsity statistics look at: `act(W1ᵀx + b1)` for
    /// the standard kind, the gate path `act(Wgᵀx)` for the gated kind.
    /// Returns `(pre_activation, post_activation, up_projection)`.
    pub fn hidden_parts(
        &self,
        act: Activation,
        x: &Tensor,
    ) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let mut up = x.matmul(&self.w1)?;
        add_bias_inplace(&mut up, &self.b1);
        match &self.wg {
            None => {
                let mut post = up.clone();
                act.apply_slice(post.data_mut());
                Ok((up, post, None))
            }
            Some(wg) => {
                let pre = x.matmul(wg)?;
                let mut post = pre.clone();
                act.apply_slice(post.data_mut());
                Ok((pre, post, Some(up)))
            }
        }
    }

    /// Untaped forward with the same operation order as the taped path.
    pub fn forward(&self, act: Activation, x: &Tensor) -> Result<Tensor> {
        let mut y = ffn_apply(&self.w1, &self.b1, &self.w2, self.wg.as_ref(), act, x)?;
        add_bias_inplace(&mut y, &self.b2);
        Ok(y)
    }

    /// Stable hash of the weights, used to tie expert slices to their source.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |t: &Tensor| {
            for &d in t.shape() {
                h = rng::splitmix64(h ^ d as u64);
            }
            for &v in t.data() {
                h = rng::splitmix64(h ^ v.to_bits() as u64);
            }
        };
        eat(&self.w1);
        eat(&self.b1);
        eat(&self.w2);
        eat(&self.b2);
        if let Some(wg) = &self.wg {
            eat(wg);
        }
        h
    }
}

/// Q/K/V/O projection slot. A raw projection must be replaced by an MLP before
/// it can be converted to MoE.
#[derive(Clone, Debug)]
pub enum ProjSlot {
    Dense(Linear),
    Replaced(ReplacementMlp),
    Moe(Box<MoeLayer>),
}

impl ProjSlot {
    pub fn form(&self) -> ModuleForm {
        match self {
            ProjSlot::Dense(_) => ModuleForm::Dense,
            ProjSlot::Replaced(_) => ModuleForm::ReplacedMha,
            ProjSlot::Moe(_) => ModuleForm::Moe,
        }
    }
}

#[derive(Clone, Debug)]
pub enum FfnSlot {
    Dense(FfnWeights),
    Moe(Box<MoeLayer>),
}

impl FfnSlot {
    pub fn form(&self) -> ModuleForm {
        match self {
            FfnSlot::Dense(_) => ModuleForm::Dense,
            FfnSlot::Moe(_) => ModuleForm::Moe,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleForm {
    Dense,
    ReplacedMha,
    Moe,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormWeights,
    pub q: ProjSlot,
    pub k: ProjSlot,
    pub v: ProjSlot,
    pub o: ProjSlot,
    pub ln2: LayerNormWeights,
    pub ffn: FfnSlot,
}

impl Block {
    pub fn proj(&self, kind: SiteKind) -> &ProjSlot {
        match kind {
            SiteKind::Q => &self.q,
            SiteKind::K => &self.k,
            SiteKind::V => &self.v,
            SiteKind::O => &self.o,
            SiteKind::Ffn => panic!("ffn is not a projection"),
        }
    }

    pub fn proj_mut(&mut self, kind: SiteKind) -> &mut ProjSlot {
        match kind {
            SiteKind::Q => &mut self.q,
            SiteKind::K => &mut self.k,
            SiteKind::V => &mut self.v,
            SiteKind::O => &mut self.o,
            SiteKind::Ffn => panic!("ffn is not a projection"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseModel {
    pub config: TransformerConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormWeights,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelufyStatus {
    Converted,
    /// The model already used ReLU; nothing changed.
    AlreadyRelu,
}

impl DenseModel {
    /// Scaled-normal init: std 0.02, residual projections (O and FFN W2) scaled by 1/√(2L).
    pub fn build(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let d = config.model_dim;
        let resid_std = INIT_STD / ((2 * config.num_layers) as f64).sqrt();
        let tok_emb = rng::normal_tensor(&mut rng, &[config.vocab_size, d], INIT_STD);
        let pos_emb = rng::normal_tensor(&mut rng, &[config.context_length, d], INIT_STD);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let q = ProjSlot::Dense(Linear::init(&mut rng, d, d, INIT_STD));
            let k = ProjSlot::Dense(Linear::init(&mut rng, d, d, INIT_STD));
            let v = ProjSlot::Dense(Linear::init(&mut rng, d, d, INIT_STD));
            let o = ProjSlot::Dense(Linear::init(&mut rng, d, d, resid_std));
            let ffn = FfnWeights::init(
                &mut rng,
                d,
                config.hidden_dim(),
                config.ffn_kind == FfnKind::Gated,
                resid_std,
            );
            blocks.push(Block {
                ln1: LayerNormWeights::new(d),
                q,
                k,
                v,
                o,
                ln2: LayerNormWeights::new(d),
                ffn: FfnSlot::Dense(ffn),
            });
        }
        let head = Linear::init(&mut rng, d, config.output_dim(), INIT_STD);
        Ok(DenseModel {
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNormWeights::new(d),
            head,
            config,
        })
    }

    /// Switch the FFN activation to ReLU. Weights are untouched; recovery
    /// fine-tuning is the caller's job.
    pub fn relufy(&mut self) -> RelufyStatus {
        if self.config.activation == Activation::Relu {
            log::warn!("relufy: model already uses relu, nothing to do");
            return RelufyStatus::AlreadyRelu;
        }
        self.config.activation = Activation::Relu;
        RelufyStatus::Converted
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn ffn(&self, layer: usize) -> Option<&FfnWeights> {
        match &self.blocks.get(layer)?.ffn {
            FfnSlot::Dense(f) => Some(f),
            FfnSlot::Moe(_) => None,
        }
    }

    pub fn moe_layer(&self, site: Site) -> Option<&MoeLayer> {
        let b = self.blocks.get(site.layer)?;
        match site.kind {
            SiteKind::Ffn => match &b.ffn {
                FfnSlot::Moe(m) => Some(m),
                _ => None,
            },
            k => match b.proj(k) {
                ProjSlot::Moe(m) => Some(m),
                _ => None,
            },
        }
    }

    pub fn moe_layer_mut(&mut self, site: Site) -> Option<&mut MoeLayer> {
        let b = self.blocks.get_mut(site.layer)?;
        match site.kind {
            SiteKind::Ffn => match &mut b.ffn {
                FfnSlot::Moe(m) => Some(m),
                _ => None,
            },
            k => match b.proj_mut(k) {
                ProjSlot::Moe(m) => Some(m),
                _ => None,
            },
        }
    }

    /// Every site in canonical order (per layer: q, k, v, o, ffn).
    pub fn all_sites(&self) -> Vec<Site> {
        (0..self.num_layers())
            .flat_map(|l| {
                [
                    SiteKind::Q,
                    SiteKind::K,
                    SiteKind::V,
                    SiteKind::O,
                    SiteKind::Ffn,
                ]
                .into_iter()
                .map(move |k| Site { layer: l, kind: k })
            })
            .collect()
    }

    pub fn form(&self, site: Site) -> Option<ModuleForm> {
        let b = self.blocks.get(site.layer)?;
        Some(match site.kind {
            SiteKind::Ffn => b.ffn.form(),
            k => b.proj(k).form(),
        })
    }

    pub fn forms(&self) -> BTreeMap<Site, ModuleForm> {
        self.all_sites()
            .into_iter()
            .map(|s| (s, self.form(s).unwrap()))
            .collect()
    }

    pub fn moe_sites(&self) -> Vec<Site> {
        self.all_sites()
            .into_iter()
            .filter(|&s| self.form(s) == Some(ModuleForm::Moe))
            .collect()
    }

    /// Tensors that take part in gradient training, with their checkpoint names.
    /// MoE sites run off-tape and are excluded.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("layers.{l}.ln1.beta"), &b.ln1.beta));
            for kind in SiteKind::PROJECTIONS {
                let s = kind.as_str();
                match b.proj(kind) {
                    ProjSlot::Dense(lin) => {
                        out.push((format!("layers.{l}.attn.{s}.weight"), &lin.weight));
                        out.push((format!("layers.{l}.attn.{s}.bias"), &lin.bias));
                    }
                    ProjSlot::Replaced(m) => {
                        out.push((format!("mha.{l}.{s}.W_in"), &m.w_in));
                        out.push((format!("mha.{l}.{s}.b_in"), &m.b_in));
                        out.push((format!("mha.{l}.{s}.W_out"), &m.w_out));
                        out.push((format!("mha.{l}.{s}.b_out"), &m.b_out));
                    }
                    ProjSlot::Moe(_) => {}
                }
            }
            out.push((format!("layers.{l}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("layers.{l}.ln2.beta"), &b.ln2.beta));
            if let FfnSlot::Dense(f) = &b.ffn {
                out.push((format!("layers.{l}.ffn.W1"), &f.w1));
                out.push((format!("layers.{l}.ffn.b1"), &f.b1));
                out.push((format!("layers.{l}.ffn.W2"), &f.w2));
                out.push((format!("layers.{l}.ffn.b2"), &f.b2));
                if let Some(wg) = &f.wg {
                    out.push((format!("layers.{l}.ffn.Wg"), wg));
                }
            }
        }
        out.push(("ln_f.gamma".into(), &self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &self.ln_f.beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable twin of [`DenseModel::trainable`], same order and names.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("layers.{l}.ln1.beta"), &mut b.ln1.beta));
            for (kind, slot) in [
                (SiteKind::Q, &mut b.q),
                (SiteKind::K, &mut b.k),
                (SiteKind::V, &mut b.v),
                (SiteKind::O, &mut b.o),
            ] {
                let s = kind.as_str();
                match slot {
                    ProjSlot::Dense(lin) => {
                        out.push((format!("layers.{l}.attn.{s}.weight"), &mut lin.weight));
                        out.push((format!("layers.{l}.attn.{s}.bias"), &mut lin.bias));
                    }
                    ProjSlot::Replaced(m) => {
                        out.push((format!("mha.{l}.{s}.W_in"), &mut m.w_in));
                        out.push((format!("mha.{l}.{s}.b_in"), &mut m.b_in));
                        out.push((format!("mha.{l}.{s}.W_out"), &mut m.w_out));
                        out.push((format!("mha.{l}.{s}.b_out"), &mut m.b_out));
                    }
                    ProjSlot::Moe(_) => {}
                }
            }
            out.push((format!("layers.{l}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("layers.{l}.ln2.beta"), &mut b.ln2.beta));
            if let FfnSlot::Dense(f) = &mut b.ffn {
                out.push((format!("layers.{l}.ffn.W1"), &mut f.w1));
                out.push((format!("layers.{l}.ffn.b1"), &mut f.b1));
                out.push((format!("layers.{l}.ffn.W2"), &mut f.w2));
                out.push((format!("layers.{l}.ffn.b2"), &mut f.b2));
                if let Some(wg) = &mut f.wg {
                    out.push((format!("layers.{l}.ffn.Wg"), wg));
                }
            }
        }
        out.push(("ln_f.gamma".into(), &mut self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &mut self.ln_f.beta));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn num_trainable_params(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace the task head, keeping the trunk.
    pub fn with_head(&self, task_head: TaskHead, seed: u64) -> Self {
        let mut m = self.clone();
        m.config.causal = Some(self.config.is_causal());
        m.config.task_head = task_head;
        let mut rng = rng::stream(seed, "head");
        m.head = Linear::init(
            &mut rng,
            self.config.model_dim,
            m.config.output_dim(),
            INIT_STD,
        );
        m
    }
}
