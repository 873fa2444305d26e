//! Gradient training of the dense trunk, optionally with the Hoyer penalty,
//! and evaluation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{classify_batch, classify_eval_batches, lm_batch, lm_eval_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_tape, Activation, Bound, Capture, DenseModel, Site, TaskHead, TokenBatch,
};
use crate::moe::ExecutionTrace;
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng;
use crate::sparsity::{default_threshold, displaced_tape, hoyer_tape, SparsityConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// LM window length; defaults to the context length.
    #[serde(default)]
    pub seq_len: Option<usize>,
    pub opt: AdamConfig,
    /// Evaluate every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    /// Validation batches per evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_eval_batches() -> usize {
    8
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, lr: f64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            seq_len: None,
            opt: AdamConfig::new(lr).cosine(steps).clip(1.0),
            eval_every: 0,
            eval_batches: default_eval_batches(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub ce: f64,
    #[serde(default)]
    pub hoyer: Option<f64>,
    /// Fraction of FFN hidden entries above the non-zero threshold.
    #[serde(default)]
    pub nonzero_frac: Option<f64>,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub tokens_seen: u64,
    /// Degenerate token-layer rows skipped by the Hoyer penalty.
    pub degenerate_rows: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy (nats).
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub tokens: u64,
}

fn check_task(model: &DenseModel, data: &Dataset) -> Result<()> {
    match (&model.config.task_head, data) {
        (TaskHead::Lm, Dataset::Lm { .. }) => Ok(()),
        (TaskHead::Classifier { num_classes }, Dataset::Classify { train, .. }) => {
            match train.iter().find(|e| e.label >= *num_classes) {
                Some(e) => Err(Error::input(format!(
                    "label {} exceeds {num_classes} classes",
                    e.label
                ))),
                None => Ok(()),
            }
        }
        _ => Err(Error::input("model head and dataset task differ")),
    }
}

fn seq_len(model: &DenseModel, cfg_seq: Option<usize>) -> usize {
    cfg_seq
        .unwrap_or(model.config.context_length)
        .min(model.config.context_length)
}

/// Deterministic validation batches.
pub fn validation_batches(
    model: &DenseModel,
    data: &Dataset,
    batch: usize,
    seq: Option<usize>,
    max_batches: usize,
) -> Result<Vec<TokenBatch>> {
    match data {
        Dataset::Lm { val, .. } => lm_eval_batches(val, batch, seq_len(model, seq), max_batches),
        Dataset::Classify { val, .. } => {
            let n = (batch * max_batches).min(val.len());
            classify_eval_batches(&val[..n], batch)
        }
    }
}

/// Deterministic batches drawn from the training split (router data, distillation).
pub fn sample_train_batches(
    model: &DenseModel,
    data: &Dataset,
    batch: usize,
    seq: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    let mut r = rng::stream(seed, "train-sample");
    (0..count)
        .map(|_| train_batch(model, data, batch, seq, &mut r))
        .collect()
}

fn train_batch(
    model: &DenseModel,
    data: &Dataset,
    batch: usize,
    seq: Option<usize>,
    r: &mut rng::Rng,
) -> Result<TokenBatch> {
    match data {
        Dataset::Lm { train, .. } => lm_batch(train, batch, seq_len(model, seq), r),
        Dataset::Classify { train, .. } => {
            if train.is_empty() {
                return Err(Error::input("empty training split"));
            }
            let picks: Vec<_> = (0..batch)
                .map(|_| &train[r.random_range(0..train.len())])
                .collect();
            classify_batch(&picks)
        }
    }
}

fn log_softmax_ce(row: &[f32], target: usize) -> (f64, usize) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    let argmax = row
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0;
    (lse - row[target] as f64, argmax)
}

/// Mean cross-entropy (and accuracy for the classifier) over `batches`.
pub fn evaluate(model: &DenseModel, batches: &[TokenBatch]) -> Result<EvalMetrics> {
    evaluate_traced(model, batches).map(|(m, _)| m)
}

/// [`evaluate`] plus the concatenated execution trace of the MoE sites.
pub fn evaluate_traced(
    model: &DenseModel,
    batches: &[TokenBatch],
) -> Result<(EvalMetrics, ExecutionTrace)> {
    if batches.is_empty() {
        return Err(Error::input("no evaluation batches"));
    }
    let (mut loss, mut correct, mut count) = (0.0, 0u64, 0u64);
    let mut trace = ExecutionTrace::default();
    for b in batches {
        let (logits, _, t) = forward(model, b, &Capture::none())?;
        trace.merge(t);
        for (r, &t) in b.targets.iter().enumerate() {
            let (ce, am) = log_softmax_ce(logits.row(r), t);
            loss += ce;
            correct += (am == t) as u64;
            count += 1;
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("evaluation loss", None));
    }
    let accuracy = matches!(model.config.task_head, TaskHead::Classifier { .. })
        .then(|| correct as f64 / count as f64);
    Ok((
        EvalMetrics {
            loss: loss / count as f64,
            accuracy,
            tokens: count,
        },
        trace,
    ))
}

/// Train all dense parameters on the task loss, plus `α·hoyer` when a
/// sparsity config is given. On a non-finite loss the model keeps its last
/// good parameters and a numeric error naming the step is returned.
pub fn train(
    model: &mut DenseModel,
    data: &Dataset,
    cfg: &TrainConfig,
    sparsity: Option<&SparsityConfig>,
    seed: u64,
) -> Result<TrainLog> {
    let _ftz = crate::tensor::FlushSubnormals::new();
    check_task(model, data)?;
    if let Some(s) = sparsity {
        s.validate()?;
    }
    let shapes: Vec<Vec<usize>> = model
        .trainable()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = OptimizerState::<f32>::new(cfg.opt.clone(), &shape_refs, seed);
    let mut r = rng::stream(seed, "train-batches");
    let act = model.config.activation;
    let threshold = sparsity
        .and_then(|s| s.nonzero_threshold)
        .unwrap_or_else(|| default_threshold(act));
    let ffn_layers: Vec<usize> = (0..model.num_layers())
        .filter(|&l| model.ffn(l).is_some())
        .collect();
    let val = validation_batches(model, data, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = train_batch(model, data, cfg.batch_size, cfg.seq_len, &mut r)?;
        log.tokens_seen += batch.tokens() as u64;
        let mut tape = Tape::new();
        let bound = Bound::new(model, &mut tape, true);
        let out = forward_tape(model, &mut tape, &bound, &batch, false)?;
        let ce = tape.cross_entropy(out.logits, &batch.targets)?;
        let ce_val = tape.value(ce).item() as f64;
        let (mut loss, mut hoyer, mut nz) = (ce, None, None);
        let alpha = sparsity.map_or(0.0, |s| s.alpha_at(step, cfg.steps));
        if let Some(s) = sparsity {
            let mut acts = Vec::new();
            let (mut above, mut total) = (0usize, 0usize);
            for &l in &ffn_layers {
                let sv = out.sites[&Site::ffn(l)];
                let post = sv.post.expect("dense FFN records hidden");
                let pv = tape.value(post);
                above += pv
                    .data()
                    .iter()
                    .filter(|v| (v.abs() as f64) > threshold)
                    .count();
                total += pv.numel();
                acts.push(match act {
                    Activation::Relu => post,
                    Activation::Gelu => {
                        displaced_tape(&mut tape, sv.pre.expect("pre"), s.displacement)?
                    }
                });
            }
            nz = Some(above as f64 / total.max(1) as f64);
            if !acts.is_empty() {
                let (h, deg) = hoyer_tape(&mut tape, &acts)?;
                log.degenerate_rows += deg as u64;
                hoyer = Some(tape.value(h).item() as f64);
                if alpha > 0.0 {
                    let scaled = tape.scale(h, alpha)?;
                    loss = tape.add(ce, scaled)?;
                }
            }
        }
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::numeric("training loss", Some(step)));
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .vars()
            .into_iter()
            .map(|v| grads.take(v).expect("grad"))
            .collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::numeric("training gradient", Some(step)));
        }
        let mut params: Vec<&mut Tensor> =
            model.trainable_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &g)?;
        let last = step + 1 == cfg.steps;
        let eval_now = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        let (val_loss, val_accuracy) = if eval_now {
            let m = evaluate(model, &val)?;
            (Some(m.loss), m.accuracy)
        } else {
            (None, None)
        };
        if eval_now || step % 25 == 0 {
            log.entries.push(LogEntry {
                step,
                ce: ce_val,
                hoyer,
                nonzero_frac: nz,
                val_loss,
                val_accuracy,
            });
        }
        if eval_now {
            log::info!(
                "step {step}: ce {ce_val:.4} hoyer {:?} val {:?} acc {:?}",
                hoyer,
                val_loss,
                val_accuracy
            );
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_byte_lm;
    use crate::model::{FfnKind, TransformerConfig};

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 256,
            context_length: 16,
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            expansion_factor: 2,
            ffn_kind: FfnKind::Standard,
            activation: Activation::Relu,
            task_head: TaskHead::Lm,
            causal: None,
        }
    }

    #[test]
    fn loss_decreases_on_tiny_lm() {
        let data = gen_byte_lm(20_000, 1).unwrap();
        let mut m = DenseModel::build(tiny(), 0).unwrap();
        let val = validation_batches(&m, &data, 8, None, 4).unwrap();
        let before = evaluate(&m, &val).unwrap().loss;
        let mut cfg = TrainConfig::new(60, 8, 1e-2);
        cfg.eval_batches = 4;
        train(&mut m, &data, &cfg, None, 0).unwrap();
        let after = evaluate(&m, &val).unwrap().loss;
        assert!(after < before - 0.5, "{before} -> {after}");
    }

    #[test]
    fn mismatched_task_is_input_error() {
        let data = crate::data::gen_toy_classify(20, 1).unwrap();
        let mut m = DenseModel::build(tiny(), 0).unwrap();
        let cfg = TrainConfig::new(1, 2, 1e-3);
        assert!(matches!(
            train(&mut m, &data, &cfg, None, 0),
            Err(Error::Input(_))
        ));
    }
}
