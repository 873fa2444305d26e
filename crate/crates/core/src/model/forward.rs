use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{moe_forward, ExecutionTrace, MoeLayer};
use crate::tensor::Tensor;

use super::{Activation, DenseModel, FfnSlot, ProjSlot, Site, SiteKind, TaskHead, LN_EPS};

/// `batch` sequences of `seq` token ids, row-major. `targets` holds next-token
/// ids (`batch*seq`) for the LM head or one class per sequence for the classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::input("empty token batch"));
        }
        if ids.len() != batch * seq {
            return Err(Error::input(format!(
                "token batch {batch}x{seq} holds {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch {
            batch,
            seq,
            ids,
            targets,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Which sites materialize tensors in an [`ActivationTrace`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    /// `None` captures every site.
    pub sites: Option<BTreeSet<Site>>,
    /// Hidden pre/post-activation of FFN and replacement-MLP sites.
    pub hidden: bool,
    /// Site inputs and outputs.
    pub io: bool,
    /// Full expert masks at MoE sites.
    pub masks: bool,
}

impl Capture {
    pub fn none() -> Self {
        Capture::default()
    }

    pub fn hidden() -> Self {
        Capture {
            hidden: true,
            ..Capture::default()
        }
    }

    pub fn io_at(sites: impl IntoIterator<Item = Site>) -> Self {
        Capture {
            sites: Some(sites.into_iter().collect()),
            io: true,
            ..Capture::default()
        }
    }

    pub fn wants(&self, site: Site) -> bool {
        (self.hidden || self.io) && self.sites.as_ref().is_none_or(|s| s.contains(&site))
    }

    pub fn is_empty(&self) -> bool {
        !self.hidden && !self.io && !self.masks
    }
}

/// Tape handles for one site.
#[derive(Clone, Copy, Debug)]
pub struct SiteVars {
    pub input: Var,
    /// Pre-activation of the hidden layer (the gate path for gated FFNs).
    pub pre: Option<Var>,
    /// `act(pre)`.
    pub post: Option<Var>,
    pub output: Var,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiteTrace {
    pub input: Option<Tensor>,
    pub pre: Option<Tensor>,
    pub post: Option<Tensor>,
    pub output: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub sites: BTreeMap<Site, SiteTrace>,
}

impl ActivationTrace {
    /// FFN hidden post-activation of `layer`, `[tokens, hidden]`.
    pub fn ffn_post(&self, layer: usize) -> Option<&Tensor> {
        self.sites.get(&Site::ffn(layer))?.post.as_ref()
    }

    pub fn ffn_pre(&self, layer: usize) -> Option<&Tensor> {
        self.sites.get(&Site::ffn(layer))?.pre.as_ref()
    }

    pub fn input(&self, site: Site) -> Option<&Tensor> {
        self.sites.get(&site)?.input.as_ref()
    }

    pub fn output(&self, site: Site) -> Option<&Tensor> {
        self.sites.get(&site)?.output.as_ref()
    }
}

pub struct ForwardOutput {
    /// `[tokens, vocab]` for the LM head, `[batch, classes]` for the classifier.
    pub logits: Var,
    pub sites: BTreeMap<Site, SiteVars>,
    pub exec: ExecutionTrace,
}

/// Model tensors placed on a tape, addressable by checkpoint name.
pub struct Bound {
    names: Vec<String>,
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new(model: &DenseModel, tape: &mut Tape<f32>, requires_grad: bool) -> Self {
        let mut names = Vec::new();
        let mut vars = HashMap::new();
        for (name, t) in model.trainable() {
            let v = tape.leaf(t.clone(), requires_grad);
            vars.insert(name.clone(), v);
            names.push(name);
        }
        Bound { names, vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Names in [`DenseModel::trainable`] order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> Vec<Var> {
        self.names.iter().map(|n| self.vars[n]).collect()
    }
}

fn activate(tape: &mut Tape<f32>, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

fn run_moe(
    tape: &mut Tape<f32>,
    layer: &MoeLayer,
    input: Var,
    exec: &mut ExecutionTrace,
    masks: bool,
) -> Result<Var> {
    let out = moe_forward(layer, tape.value(input), masks)?;
    exec.record(layer.site, out.counts, out.masks, out.all_zero_tokens);
    Ok(tape.constant(out.output))
}

fn run_proj(
    tape: &mut Tape<f32>,
    bound: &Bound,
    slot: &ProjSlot,
    site: Site,
    input: Var,
    exec: &mut ExecutionTrace,
    masks: bool,
) -> Result<SiteVars> {
    let (l, s) = (site.layer, site.kind.as_str());
    Ok(match slot {
        ProjSlot::Dense(_) => {
            let w = bound.get(&format!("layers.{l}.attn.{s}.weight"));
            let b = bound.get(&format!("layers.{l}.attn.{s}.bias"));
            let output = tape.linear(input, w, b)?;
            SiteVars {
                input,
                pre: None,
                post: None,
                output,
            }
        }
        ProjSlot::Replaced(_) => {
            let w_in = bound.get(&format!("mha.{l}.{s}.W_in"));
            let b_in = bound.get(&format!("mha.{l}.{s}.b_in"));
            let w_out = bound.get(&format!("mha.{l}.{s}.W_out"));
            let b_out = bound.get(&format!("mha.{l}.{s}.b_out"));
            let pre = tape.linear(input, w_in, b_in)?;
            let post = tape.relu(pre)?;
            let output = tape.linear(post, w_out, b_out)?;
            SiteVars {
                input,
                pre: Some(pre),
                post: Some(post),
                output,
            }
        }
        ProjSlot::Moe(layer) => {
            let output = run_moe(tape, layer, input, exec, masks)?;
            SiteVars {
                input,
                pre: None,
                post: None,
                output,
            }
        }
    })
}

fn check_batch(model: &DenseModel, batch: &TokenBatch) -> Result<()> {
    let c = &model.config;
    if batch.ids.len() != batch.batch * batch.seq {
        return Err(Error::input(
            "token batch length does not match batch x seq",
        ));
    }
    if batch.seq > c.context_length {
        return Err(Error::input(format!(
            "sequence length {} exceeds context length {}",
            batch.seq, c.context_length
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} out of range for vocab {}",
            c.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass on `tape` using parameters bound by [`Bound::new`].
/// MoE sites run off-tape; their outputs enter as constants.
pub fn forward_tape(
    model: &DenseModel,
    tape: &mut Tape<f32>,
    bound: &Bound,
    batch: &TokenBatch,
    capture_masks: bool,
) -> Result<ForwardOutput> {
    check_batch(model, batch)?;
    let c = &model.config;
    let (b, t) = (batch.batch, batch.seq);
    let mut exec = ExecutionTrace::default();
    let mut sites = BTreeMap::new();

    let tok = tape.embedding(bound.get("tok_emb"), &batch.ids)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = tape.embedding(bound.get("pos_emb"), &pos_ids)?;
    let mut x = tape.add(tok, pos)?;
    let spec = AttentionSpec {
        batch: b,
        seq: t,
        heads: c.num_heads,
        causal: c.is_causal(),
    };

    for (l, block) in model.blocks.iter().enumerate() {
        let g1 = bound.get(&format!("layers.{l}.ln1.gamma"));
        let b1 = bound.get(&format!("layers.{l}.ln1.beta"));
        let h = tape.layernorm(x, g1, b1, LN_EPS)?;
        let mut qkv = [h; 3];
        for (slot_out, kind) in qkv.iter_mut().zip([SiteKind::Q, SiteKind::K, SiteKind::V]) {
            let site = Site::proj(l, kind);
            let sv = run_proj(
                tape,
                bound,
                block.proj(kind),
                site,
                h,
                &mut exec,
                capture_masks,
            )?;
            *slot_out = sv.output;
            sites.insert(site, sv);
        }
        let attn = tape.attention(qkv[0], qkv[1], qkv[2], spec)?;
        let site = Site::proj(l, SiteKind::O);
        let sv = run_proj(tape, bound, &block.o, site, attn, &mut exec, capture_masks)?;
        sites.insert(site, sv);
        x = tape.add(x, sv.output)?;

        let g2 = bound.get(&format!("layers.{l}.ln2.gamma"));
        let b2 = bound.get(&format!("layers.{l}.ln2.beta"));
        let z = tape.layernorm(x, g2, b2, LN_EPS)?;
        let site = Site::ffn(l);
        let sv = match &block.ffn {
            FfnSlot::Dense(f) => {
                let w1 = bound.get(&format!("layers.{l}.ffn.W1"));
                let bb1 = bound.get(&format!("layers.{l}.ffn.b1"));
                let w2 = bound.get(&format!("layers.{l}.ffn.W2"));
                let bb2 = bound.get(&format!("layers.{l}.ffn.b2"));
                let up = tape.linear(z, w1, bb1)?;
                let (pre, post, hidden) = if f.is_gated() {
                    let wg = bound.get(&format!("layers.{l}.ffn.Wg"));
                    let gpre = tape.matmul(z, wg)?;
                    let gpost = activate(tape, c.activation, gpre)?;
                    let hidden = tape.mul(gpost, up)?;
                    (gpre, gpost, hidden)
                } else {
                    let post = activate(tape, c.activation, up)?;
                    (up, post, post)
                };
                let output = tape.linear(hidden, w2, bb2)?;
                SiteVars {
                    input: z,
                    pre: Some(pre),
                    post: Some(post),
                    output,
                }
            }
            FfnSlot::Moe(layer) => {
                let output = run_moe(tape, layer, z, &mut exec, capture_masks)?;
                SiteVars {
                    input: z,
                    pre: None,
                    post: None,
                    output,
                }
            }
        };
        sites.insert(site, sv);
        x = tape.add(x, sv.output)?;
    }

    let x = tape.layernorm(x, bound.get("ln_f.gamma"), bound.get("ln_f.beta"), LN_EPS)?;
    let feats = match c.task_head {
        TaskHead::Lm => x,
        TaskHead::Classifier { .. } => {
            // Mean pool over each sequence.
            let mut pool = Tensor::zeros(&[b, b * t]);
            let w = 1.0 / t as f32;
            for r in 0..b {
                pool.row_mut(r)[r * t..(r + 1) * t]
                    .iter_mut()
                    .for_each(|v| *v = w);
            }
            let p = tape.constant(pool);
            tape.matmul(p, x)?
        }
    };
    let logits = tape.linear(feats, bound.get("head.weight"), bound.get("head.bias"))?;
    Ok(ForwardOutput {
        logits,
        sites,
        exec,
    })
}

/// Inference forward. Tracing never changes the logits.
pub fn forward(
    model: &DenseModel,
    batch: &TokenBatch,
    capture: &Capture,
) -> Result<(Tensor, ActivationTrace, ExecutionTrace)> {
    let mut tape = Tape::no_grad();
    let bound = Bound::new(model, &mut tape, false);
    let out = forward_tape(model, &mut tape, &bound, batch, capture.masks)?;
    let mut trace = ActivationTrace::default();
    for (&site, sv) in &out.sites {
        if !capture.wants(site) {
            continue;
        }
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        let st = SiteTrace {
            input: if capture.io {
                get(Some(sv.input))
            } else {
                None
            },
            output: if capture.io {
                get(Some(sv.output))
            } else {
                None
            },
            pre: if capture.hidden { get(sv.pre) } else { None },
            post: if capture.hidden { get(sv.post) } else { None },
        };
        trace.sites.insert(site, st);
    }
    let logits = tape.value(out.logits).clone();
    Ok((logits, trace, out.exec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnKind, TransformerConfig};

    fn cfg(head: TaskHead, kind: FfnKind) -> TransformerConfig {
        TransformerConfig {
            vocab_size: 20,
            context_length: 8,
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            expansion_factor: 4,
            ffn_kind: kind,
            activation: Activation::Relu,
            task_head: head,
            causal: None,
        }
    }

    fn batch() -> TokenBatch {
        let ids: Vec<usize> = (0..16).map(|i| (i * 7) % 20).collect();
        TokenBatch::new(2, 8, ids, vec![0; 16]).unwrap()
    }

    #[test]
    fn capture_does_not_change_logits() {
        let m = DenseModel::build(cfg(TaskHead::Lm, FfnKind::Gated), 5).unwrap();
        let (a, t0, _) = forward(&m, &batch(), &Capture::none()).unwrap();
        let full = Capture {
            hidden: true,
            io: true,
            ..Capture::default()
        };
        let (b, t1, _) = forward(&m, &batch(), &full).unwrap();
        assert_eq!(a, b);
        assert!(t0.sites.is_empty());
        assert_eq!(t1.ffn_post(1).unwrap().shape(), &[16, 64]);
        assert_eq!(a.shape(), &[16, 20]);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = DenseModel::build(
            cfg(TaskHead::Classifier { num_classes: 6 }, FfnKind::Standard),
            1,
        )
        .unwrap();
        m.head.weight = Tensor::zeros(m.head.weight.shape());
        let (logits, _, _) = forward(&m, &batch(), &Capture::none()).unwrap();
        assert_eq!(logits.shape(), &[2, 6]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_leaves_only_b2() {
        let mut m = DenseModel::build(cfg(TaskHead::Lm, FfnKind::Gated), 2).unwrap();
        if let FfnSlot::Dense(f) = &mut m.blocks[0].ffn {
            f.wg = Some(Tensor::zeros(f.wg.as_ref().unwrap().shape()));
            f.b2 = Tensor::from_vec((0..16).map(|i| i as f32 * 0.1).collect());
        }
        let (_, tr, _) = forward(&m, &batch(), &Capture::io_at([Site::ffn(0)])).unwrap();
        let out = tr.output(Site::ffn(0)).unwrap();
        for r in 0..out.rows() {
            for (j, &v) in out.row(r).iter().enumerate() {
                assert_eq!(v, j as f32 * 0.1);
            }
        }
    }

    #[test]
    fn gated_all_ones_gate_scales_linear_path() {
        // Two hidden neurons, gate pre-activation fixed at 1 -> relu gives 1.
        let f = crate::model::FfnWeights {
            w1: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            b1: Tensor::from_vec(vec![0.5, -0.5]),
            w2: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            b2: Tensor::zeros(&[2]),
            wg: Some(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap()),
        };
        let x = Tensor::matrix(1, 2, vec![1.0, 7.0]).unwrap();
        let y = f.forward(Activation::Relu, &x).unwrap();
        // up = [1+21+0.5, 2+28-0.5] = [22.5, 29.5]
        assert_eq!(y.data(), &[22.5, 29.5]);
    }

    #[test]
    fn input_errors() {
        let m = DenseModel::build(cfg(TaskHead::Lm, FfnKind::Standard), 1).unwrap();
        let bad = TokenBatch::new(1, 2, vec![0, 20], vec![0, 0]).unwrap();
        assert!(matches!(
            forward(&m, &bad, &Capture::none()),
            Err(Error::Input(_))
        ));
        let long = TokenBatch::new(1, 9, vec![0; 9], vec![0; 9]).unwrap();
        assert!(matches!(
            forward(&m, &long, &Capture::none()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn relufy_changes_logits_and_negative_preacts_give_b2() {
        let mut c = cfg(TaskHead::Lm, FfnKind::Standard);
        c.activation = Activation::Gelu;
        let mut m = DenseModel::build(c, 9).unwrap();
        let (before, _, _) = forward(&m, &batch(), &Capture::none()).unwrap();
        m.relufy();
        let (after, _, _) = forward(&m, &batch(), &Capture::none()).unwrap();
        assert!(before.max_abs_diff(&after) > 0.0);
        if let FfnSlot::Dense(f) = &mut m.blocks[0].ffn {
            f.b1 = Tensor::full(f.b1.shape(), -1e3);
        }
        let (_, tr, _) = forward(&m, &batch(), &Capture::io_at([Site::ffn(0)])).unwrap();
        let b2 = m.ffn(0).unwrap().b2.clone();
        let out = tr.output(Site::ffn(0)).unwrap();
        for r in 0..out.rows() {
            assert_eq!(out.row(r), b2.data());
        }
    }

    #[test]
    fn head_swap_keeps_trunk() {
        let m = DenseModel::build(cfg(TaskHead::Lm, FfnKind::Standard), 4).unwrap();
        let c = m.with_head(TaskHead::Classifier { num_classes: 3 }, 1);
        let cap = Capture {
            hidden: true,
            io: true,
            ..Capture::default()
        };
        let (_, a, _) = forward(&m, &batch(), &cap).unwrap();
        let (_, b, _) = forward(&c, &batch(), &cap).unwrap();
        assert_eq!(a, b);
    }
}
